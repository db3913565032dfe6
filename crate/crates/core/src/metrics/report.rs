use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::quantile_sorted;
use crate::error::{bail, Error, Result};

pub const PER_SAMPLE_HEADER: &str = "model,domain,run_seed,sample_id,dice,hausdorff_px";
pub const BOXPLOT_HEADER: &str = "model,domain,n,min,q1,median,q3,max";
pub const REPORT_FORMAT: &str = "sammix-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    InDomain,
    CrossDomain,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::InDomain => "in_domain",
            Domain::CrossDomain => "cross_domain",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_domain" => Ok(Domain::InDomain),
            "cross_domain" => Ok(Domain::CrossDomain),
            _ => bail!(InvalidArgument, "unknown domain {s:?} (expected in_domain or cross_domain)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: String,
    pub dice: f64,
    /// `None` marks the undefined case (exactly one mask empty).
    pub hausdorff_px: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub domain: Domain,
    pub run_seed: u64,
    pub samples: Vec<SampleEval>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Order-independent: values are sorted before summation.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            let mut sq: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
            sq.sort_by(f64::total_cmp);
            (sq.iter().sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Some(Self { mean, std, n })
    }

    pub fn display(&self) -> String {
        format_mean_std(self.mean, self.std)
    }
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3} ± {std:.3}")
}

impl EvalReport {
    pub fn dice(&self) -> Option<MeanStd> {
        MeanStd::of(&self.samples.iter().map(|s| s.dice).collect::<Vec<_>>())
    }

    pub fn hausdorff(&self) -> Option<MeanStd> {
        MeanStd::of(&self.samples.iter().filter_map(|s| s.hausdorff_px).collect::<Vec<_>>())
    }

    pub fn hd_excluded(&self) -> usize {
        self.samples.iter().filter(|s| s.hausdorff_px.is_none()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub model: String,
    pub domain: Domain,
    pub runs: usize,
    /// Across-run statistics of the per-run mean Dice.
    pub dice: MeanStd,
    /// Across-run statistics of the per-run mean HD; `None` when no run has
    /// a defined HD.
    pub hausdorff_px: Option<MeanStd>,
    pub hd_excluded: usize,
    pub dice_text: String,
    pub hausdorff_text: Option<String>,
}

/// Mean ± sample std across runs of one model and domain.
pub fn aggregate_runs(reports: &[EvalReport]) -> Result<Aggregate> {
    let Some(first) = reports.first() else {
        bail!(InvalidArgument, "aggregate_runs needs at least one report");
    };
    if reports.iter().any(|r| r.model != first.model || r.domain != first.domain) {
        bail!(InvalidArgument, "aggregate_runs expects reports of a single model and domain");
    }
    let mut dice = Vec::new();
    let mut hd = Vec::new();
    for r in reports {
        let Some(d) = r.dice() else {
            bail!(InvalidArgument, "report for seed {} has no samples", r.run_seed);
        };
        dice.push(d.mean);
        if let Some(h) = r.hausdorff() {
            hd.push(h.mean);
        }
    }
    let dice = MeanStd::of(&dice).expect("nonempty");
    let hausdorff_px = MeanStd::of(&hd);
    Ok(Aggregate {
        model: first.model.clone(),
        domain: first.domain,
        runs: reports.len(),
        dice_text: dice.display(),
        hausdorff_text: hausdorff_px.map(|h| h.display()),
        dice,
        hausdorff_px,
        hd_excluded: reports.iter().map(EvalReport::hd_excluded).sum(),
    })
}

/// `[min, q1, median, q3, max]` with linear interpolation.
pub fn quartiles(values: &[f64]) -> Result<[f64; 5]> {
    if values.is_empty() {
        bail!(InvalidArgument, "quartiles of an empty list");
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok([v[0], quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.5), quantile_sorted(&v, 0.75), v[v.len() - 1]])
}

#[derive(Serialize)]
struct RunSummary<'a> {
    model: &'a str,
    domain: Domain,
    run_seed: u64,
    n_samples: usize,
    dice: Option<MeanStd>,
    hausdorff_px: Option<MeanStd>,
    hd_excluded: usize,
}

#[derive(Serialize)]
struct Summary<'a> {
    format: &'static str,
    version: u32,
    runs: Vec<RunSummary<'a>>,
    aggregates: Vec<Aggregate>,
}

fn sorted_reports(reports: &[EvalReport]) -> Vec<&EvalReport> {
    let mut v: Vec<&EvalReport> = reports.iter().collect();
    v.sort_by(|a, b| (&a.model, a.domain, a.run_seed).cmp(&(&b.model, b.domain, b.run_seed)));
    v
}

/// Write `per_sample.csv`, `summary.json` and `boxplot.csv` into `out`.
///
/// Rows are ordered by (model, domain, seed, sample id). An undefined HD is
/// an empty CSV field and is left out of every HD mean.
pub fn export_report(reports: &[EvalReport], out: &Path) -> Result<()> {
    if reports.is_empty() {
        bail!(InvalidArgument, "export_report needs at least one report");
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ordered = sorted_reports(reports);

    let mut csv = format!("{PER_SAMPLE_HEADER}\n");
    for r in &ordered {
        let mut samples: Vec<&SampleEval> = r.samples.iter().collect();
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        for s in samples {
            let hd = s.hausdorff_px.map(|h| h.to_string()).unwrap_or_default();
            writeln!(csv, "{},{},{},{},{},{}", r.model, r.domain.as_str(), r.run_seed, s.id, s.dice, hd).expect("string write");
        }
    }
    write(out, "per_sample.csv", &csv)?;

    let mut groups: BTreeMap<(String, Domain), Vec<EvalReport>> = BTreeMap::new();
    for r in &ordered {
        groups.entry((r.model.clone(), r.domain)).or_default().push((*r).clone());
    }
    let mut aggregates = Vec::new();
    let mut box_csv = format!("{BOXPLOT_HEADER}\n");
    for ((model, domain), rs) in &groups {
        aggregates.push(aggregate_runs(rs)?);
        let pooled: Vec<f64> = rs.iter().flat_map(|r| r.samples.iter().map(|s| s.dice)).collect();
        let q = quartiles(&pooled)?;
        writeln!(box_csv, "{model},{},{},{},{},{},{},{}", domain.as_str(), pooled.len(), q[0], q[1], q[2], q[3], q[4]).expect("string write");
    }
    write(out, "boxplot.csv", &box_csv)?;

    let summary = Summary {
        format: REPORT_FORMAT,
        version: REPORT_VERSION,
        runs: ordered
            .iter()
            .map(|r| RunSummary {
                model: &r.model,
                domain: r.domain,
                run_seed: r.run_seed,
                n_samples: r.samples.len(),
                dice: r.dice(),
                hausdorff_px: r.hausdorff(),
                hd_excluded: r.hd_excluded(),
            })
            .collect(),
        aggregates,
    };
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    write(out, "summary.json", &json)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}
