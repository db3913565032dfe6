//! Small differentiable building blocks over candle tensors.

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;

/// `x · Wᵀ + b` over the last dimension; `w` is `(out, in)`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = x.broadcast_matmul(&w.t()?)?;
    Ok(match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `log Σ exp(x)` over the last dimension, keeping the reduced axis.
pub fn logsumexp_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?;
    Ok(s.log()?.broadcast_add(&max)?)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Logistic function written through `tanh`, which keeps its backward pass
/// finite for large-magnitude inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

fn strided_window(x: &Tensor, dim: usize, start: usize, count: usize, stride: usize) -> Result<Tensor> {
    if stride == 1 {
        return Ok(x.narrow(dim, start, count)?);
    }
    let idx: Vec<u32> = (0..count).map(|i| (start + i * stride) as u32).collect();
    Ok(x.index_select(&Tensor::new(idx.as_slice(), x.device())?, dim)?)
}

/// NCHW convolution (zero padding) with a per-output-channel bias, written
/// as an explicit im2col product so that both input and kernel gradients
/// come from plain slicing and matmul backward passes.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, ci, kh, kw) = w.dims4()?;
    if ci != c || stride == 0 {
        return Err(crate::Error::ShapeMismatch(format!("conv2d: input {:?}, kernel {:?}, stride {stride}", x.dims(), w.dims())));
    }
    let xp = if padding > 0 { x.pad_with_zeros(2, padding, padding)?.pad_with_zeros(3, padding, padding)? } else { x.clone() };
    let (hp, wp) = (h + 2 * padding, wd + 2 * padding);
    if hp < kh || wp < kw {
        return Err(crate::Error::ShapeMismatch(format!("conv2d: kernel {kh}x{kw} exceeds padded input {hp}x{wp}")));
    }
    let (ho, wo) = ((hp - kh) / stride + 1, (wp - kw) / stride + 1);
    let mut cols = Vec::with_capacity(kh * kw);
    for ky in 0..kh {
        let rows = strided_window(&xp, 2, ky, ho, stride)?;
        for kx in 0..kw {
            cols.push(strided_window(&rows, 3, kx, wo, stride)?);
        }
    }
    // (N, C, K, Ho, Wo) -> (N, C·K, Ho·Wo), matching the (O, C, kh, kw) kernel layout
    let cols = Tensor::stack(&cols, 2)?.reshape((n, c * kh * kw, ho * wo))?;
    let y = w.reshape((o, c * kh * kw))?.broadcast_matmul(&cols)?.reshape((n, o, ho, wo))?;
    Ok(y.broadcast_add(&b.reshape((1, o, 1, 1))?)?)
}

/// Replicate-pad the two spatial axes of an NCHW tensor by `p`.
pub fn pad_replicate(x: &Tensor, p: usize) -> Result<Tensor> {
    Ok(x.pad_with_same(2, p, p)?.pad_with_same(3, p, p)?)
}

/// Transposed convolution for the non-overlapping case (kernel size equal to
/// the stride); `w` is `(C_in, C_out, s, s)`.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (ci, o, kh, kw) = w.dims4()?;
    if ci != c || kh != stride || kw != stride {
        return Err(crate::Error::ShapeMismatch(format!(
            "conv_transpose2d needs a ({c}, _, {stride}, {stride}) kernel, got {:?}",
            w.dims()
        )));
    }
    let s = stride;
    let xf = x.reshape((n, c, h * wd))?;
    // (O·s·s, C): row (o, dy, dx) holds w[:, o, dy, dx]
    let wm = w.permute((1, 2, 3, 0))?.contiguous()?.reshape((o * s * s, c))?;
    let y = wm.broadcast_matmul(&xf)?.reshape((n, o, s, s, h, wd))?;
    let y = y.permute((0, 1, 4, 2, 5, 3))?.contiguous()?.reshape((n, o, h * s, wd * s))?;
    Ok(y.broadcast_add(&b.reshape((1, o, 1, 1))?)?)
}

/// Constant tensor built from host `f64` values in the requested dtype.
pub fn constant(values: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Aligned-corners bilinear resize of the last two axes, expressed as two
/// matrix products so that it is differentiable.
pub fn resize_bilinear(x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let n = dims.len();
    let (h, w) = (dims[n - 2], dims[n - 1]);
    if (h, w) == target {
        return Ok(x.clone());
    }
    let rh = constant(crate::grid::bilinear_matrix(h, target.0), &[target.0, h], x.dtype())?;
    let rw = constant(crate::grid::bilinear_matrix(w, target.1), &[target.1, w], x.dtype())?;
    let rows = rh.broadcast_matmul(x)?;
    Ok(rows.broadcast_matmul(&rw.t()?)?)
}

/// Host copy of any tensor as flat `f64`.
pub fn to_host(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn softmax_and_lse_agree() {
        let x = t(&[1.0, 2.0, 3.0, -1000.0, 0.0, 1000.0], &[2, 3]);
        let p = to_host(&softmax_last(&x).unwrap()).unwrap();
        let lse = to_host(&logsumexp_last(&x).unwrap()).unwrap();
        let z = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((lse[0] - z).abs() < 1e-12);
        assert!((lse[1] - 1000.0).abs() < 1e-9);
        assert!((p[2] - (3.0 - z).exp()).abs() < 1e-12);
        assert!((p[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_finite_with_finite_grad() {
        let x = candle_core::Var::from_tensor(&t(&[-800.0, 0.0, 800.0], &[3])).unwrap();
        let y = sigmoid(&x).unwrap();
        let v = to_host(&y).unwrap();
        assert_eq!(v, vec![0.0, 0.5, 1.0]);
        let g = y.sum_all().unwrap().backward().unwrap();
        let gx = to_host(g.get(&x).unwrap()).unwrap();
        assert!(gx.iter().all(|v| v.is_finite()));
        assert!((gx[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 4]);
        let y = layer_norm(&x, &t(&[1.0; 4], &[4]), &t(&[0.0; 4], &[4]), 0.0).unwrap();
        let v = to_host(&y).unwrap();
        assert!(v.iter().sum::<f64>().abs() < 1e-12);
        assert!((v.iter().map(|a| a * a).sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
    }

    fn conv_reference(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], pad: usize, stride: usize) -> (Vec<f64>, [usize; 4]) {
        let [n, c, h, wd] = xs;
        let [o, _, kh, kw] = ws;
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * o * ho * wo];
        for b in 0..n {
            for oc in 0..o {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let y = (i * stride + ky) as i64 - pad as i64;
                                    let xx = (j * stride + kx) as i64 - pad as i64;
                                    if y < 0 || xx < 0 || y >= h as i64 || xx >= wd as i64 {
                                        continue;
                                    }
                                    acc += x[((b * c + ic) * h + y as usize) * wd + xx as usize] * w[((oc * c + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((b * o + oc) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        (out, [n, o, ho, wo])
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let xs = [2, 3, 7, 6];
        let ws = [4, 3, 3, 2];
        let x: Vec<f64> = (0..xs.iter().product::<usize>()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let w: Vec<f64> = (0..ws.iter().product::<usize>()).map(|i| ((i * 13 % 7) as f64 - 3.0) / 2.0).collect();
        for (pad, stride) in [(0, 1), (1, 1), (0, 2), (1, 2), (2, 3)] {
            let (want, shape) = conv_reference(&x, xs, &w, ws, pad, stride);
            let got = conv2d(&t(&x, &xs), &t(&w, &ws), &t(&[0.0; 4], &[4]), pad, stride).unwrap();
            assert_eq!(got.dims(), shape);
            for (a, b) in to_host(&got).unwrap().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_transpose_scatters_each_pixel_into_its_block() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let w = t(&[1.0, 10.0, 100.0, 1000.0], &[1, 1, 2, 2]);
        let y = to_host(&conv_transpose2d(&x, &w, &t(&[0.5], &[1]), 2).unwrap()).unwrap();
        let want = [
            1.5, 10.5, 2.5, 20.5, //
            100.5, 1000.5, 200.5, 2000.5, //
            3.5, 30.5, 4.5, 40.5, //
            300.5, 3000.5, 400.5, 4000.5,
        ];
        assert_eq!(y, want);
    }

    #[test]
    fn bilinear_tensor_matches_grid_resize() {
        let g = ndarray::Array2::from_shape_fn((3, 5), |(i, j)| (i * 7 + j * j) as f32);
        let want = crate::grid::resize_grid(&g, (7, 4), crate::grid::ResizeMode::Bilinear).unwrap();
        let x = Tensor::from_vec(g.iter().map(|&v| v as f64).collect::<Vec<_>>(), (1, 3, 5), &Device::Cpu).unwrap();
        let got = to_host(&resize_bilinear(&x, (7, 4)).unwrap()).unwrap();
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - *b as f64).abs() < 1e-4);
        }
    }
}
