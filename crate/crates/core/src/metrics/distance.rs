//! Exact squared Euclidean distance transform (lower envelope of parabolas).

use ndarray::Array2;

const INF: f64 = 1e20;

fn intersect(f: &[f64], p: usize, q: usize, fq: f64) -> f64 {
    (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
}

fn transform_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        let mut s = intersect(f, v[k], q, fq);
        // z[0] is -inf, so this never pops the first parabola
        while s <= z[k] {
            k -= 1;
            s = intersect(f, v[k], q, fq);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

/// Squared distance from every pixel to the nearest nonzero `sites` pixel.
/// With no sites every entry is a large sentinel.
pub fn squared_edt(sites: &Array2<u8>) -> Array2<f64> {
    let (h, w) = sites.dim();
    let mut grid = sites.mapv(|s| if s != 0 { 0.0 } else { INF });
    let n = h.max(w);
    let (mut f, mut d) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[[y, x]];
        }
        transform_1d(&f[..h], &mut d[..h], &mut v, &mut z);
        for y in 0..h {
            grid[[y, x]] = d[y];
        }
    }
    for y in 0..h {
        for x in 0..w {
            f[x] = grid[[y, x]];
        }
        transform_1d(&f[..w], &mut d[..w], &mut v, &mut z);
        for x in 0..w {
            grid[[y, x]] = d[x];
        }
    }
    grid
}
