//! `sammix` command line: data synthesis, preprocessing, training,
//! evaluation, prediction, reports, overlays and the experiment matrix.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use candle_core::DType;
use clap::{Args, Parser, Subcommand, ValueEnum};
use sammix::config::{self, ExperimentConfig, SNAPSHOT_FILE};
use sammix::dataio::{self, Dataset, Split};
use sammix::metrics::{self, Domain, EvalReport};
use sammix::trainer::{self, EvalOptions, Model, TrainMode, TrainState};
use serde::Serialize;
use serde_json::{json, Value};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const TABLE_FILE: &str = "table.md";
pub const FAILURES_FILE: &str = "failures.json";

#[derive(Debug, Parser)]
#[command(name = "sammix", version, about = "CAM-prompted LoRA segmentation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate phantom volumes and write preprocessed train/val/test splits.
    SynthData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Shorthand for `--set data.seed=N`.
        #[arg(long)]
        seed: Option<u64>,
        /// Shorthand for `--set data.n_volumes=N`.
        #[arg(long)]
        n: Option<usize>,
        /// Also write the raw HU volumes to `<out>/raw`.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Window, slice and resize a raw volume directory into one dataset split.
    Preprocess {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mark `trainer.n_labeled` positives of a split as segmentation-labeled.
    Split {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on `<data>/train`, validating on `<data>/val`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/last` when it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a dataset split; writes CSV and JSON summaries.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "in_domain")]
        domain: DomainArg,
        /// Model name used in report rows.
        #[arg(long, default_value = "model")]
        name: String,
        #[arg(long, default_value_t = 0)]
        run_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masks, boxes and logits for every sample of a split.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge `eval.json` files (or directories holding one) into one report.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// PNG overlays: ground truth tinted, prediction outlined.
    Overlay {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated sample ids; all samples when absent.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every mode x label budget x seed cell.
    Matrix {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Extra test split scored as the cross-domain column.
        #[arg(long)]
        cross: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON config merged over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `trainer.n_labeled=50`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum DomainArg {
    InDomain,
    CrossDomain,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::InDomain => Domain::InDomain,
            DomainArg::CrossDomain => Domain::CrossDomain,
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<sammix::Error> for CliError {
    fn from(e: sammix::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parse `argv` (program name first), dispatch, and map the outcome to an
/// exit code. Messages go to stdout/stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `sammix --help` for usage");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

/// Preset, then file, then overrides. Bad keys or values are usage errors.
pub fn resolve_config(args: &ConfigArgs, extra: &[String]) -> CliResult<ExperimentConfig> {
    let base = match args.preset {
        Preset::Desk => ExperimentConfig::desk(),
        Preset::Full => ExperimentConfig::default(),
    };
    let mut overrides = args.overrides.clone();
    overrides.extend_from_slice(extra);
    let cfg = config::resolve(base, args.config.as_deref(), &overrides).map_err(|e| match e {
        sammix::Error::Io { .. } => CliError::Runtime(e.into()),
        other => CliError::Usage(other.to_string()),
    })?;
    if cfg.trainer.single_threaded {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    Ok(cfg)
}

/// Line-delimited JSON event log.
pub struct Events {
    file: fs::File,
}

impl Events {
    pub fn create(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(EVENTS_FILE);
        let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { file })
    }

    pub fn emit(&mut self, event: &str, fields: Value) -> anyhow::Result<()> {
        let mut obj = serde_json::Map::new();
        obj.insert("event".into(), Value::String(event.into()));
        if let Value::Object(m) = fields {
            obj.extend(m);
        }
        writeln!(self.file, "{}", Value::Object(obj))?;
        Ok(())
    }
}

fn start(cfg: &ExperimentConfig, out: &Path, command: &str) -> CliResult<Events> {
    config::write_snapshot(cfg, out)?;
    let mut ev = Events::create(out)?;
    ev.emit("start", json!({"command": command, "config": SNAPSHOT_FILE}))?;
    Ok(ev)
}

fn eval_options(cfg: &ExperimentConfig) -> EvalOptions {
    EvalOptions {
        inference: cfg.inference.clone(),
        metrics: cfg.metrics.clone(),
    }
}

fn load_split(dir: &Path) -> CliResult<Dataset> {
    dataio::load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display())).map_err(CliError::Runtime)
}

fn load_model(dir: &Path) -> CliResult<Model> {
    Ok(Model::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?.0)
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::SynthData { cfg, seed, n, raw, out } => {
            let mut extra = Vec::new();
            if let Some(s) = seed {
                extra.push(format!("data.seed={s}"));
            }
            if let Some(n) = n {
                extra.push(format!("data.n_volumes={n}"));
            }
            let cfg = resolve_config(&cfg, &extra)?;
            let mut ev = start(&cfg, &out, "synth-data")?;
            let splits = dataio::generate_phantoms(cfg.data.n_volumes, cfg.data.seed, &cfg.phantom, &cfg.preprocess, Some(&out), raw)?;
            for d in &splits {
                ev.emit("split_written", json!({"split": d.split.as_str(), "samples": d.len(), "positives": d.samples.iter().filter(|s| s.cls_label == 1).count()}))?;
            }
            ev.emit("done", json!({}))?;
            Ok(())
        }
        Command::Preprocess { cfg, input, split, out } => {
            let cfg = resolve_config(&cfg, &[])?;
            let volumes = dataio::load_volumes(&input).with_context(|| format!("loading volumes {}", input.display()))?;
            let mut ev = start(&cfg, &out, "preprocess")?;
            let mut samples = Vec::new();
            for (id, vol, labels) in &volumes {
                let s = dataio::volume_to_samples(vol, labels.as_ref(), &cfg.preprocess, id)?;
                ev.emit("volume", json!({"id": id, "slices": s.len()}))?;
                samples.extend(s);
            }
            let ds = Dataset::new(split.into(), samples);
            dataio::save_dataset(&ds, &out)?;
            ev.emit("done", json!({"samples": ds.len()}))?;
            Ok(())
        }
        Command::Split { cfg, dataset, out } => {
            let cfg = resolve_config(&cfg, &[])?;
            let ds = load_split(&dataset)?;
            let labeled = dataio::split_supervision(&ds, cfg.trainer.n_labeled, cfg.trainer.seed)?;
            let mut ev = start(&cfg, &out, "split")?;
            dataio::save_dataset(&labeled, &out)?;
            ev.emit("done", json!({"n_labeled": labeled.labeled_ids.len(), "labeled_ids": labeled.labeled_ids}))?;
            Ok(())
        }
        Command::Train { cfg, data, out, resume } => {
            let cfg = resolve_config(&cfg, &[])?;
            let train = load_split(&dataio::split_dir(&data, Split::Train))?;
            let val_dir = dataio::split_dir(&data, Split::Val);
            let val = if val_dir.join(dataio::DATASET_HEADER).exists() { Some(load_split(&val_dir)?) } else { None };
            let mut ev = start(&cfg, &out, "train")?;
            train_run(&cfg, &train, val.as_ref(), &out, resume, &mut ev)?;
            ev.emit("done", json!({"checkpoint": trainer::BEST_DIR}))?;
            Ok(())
        }
        Command::Evaluate {
            cfg,
            checkpoint,
            dataset,
            domain,
            name,
            run_seed,
            out,
        } => {
            let cfg = resolve_config(&cfg, &[])?;
            let model = load_model(&checkpoint)?;
            let ds = load_split(&dataset)?;
            let mut ev = start(&cfg, &out, "evaluate")?;
            let report = trainer::evaluate_report(&model, &ds, &eval_options(&cfg), &name, domain.into(), run_seed)?;
            write_eval(&report, &out)?;
            metrics::export_report(std::slice::from_ref(&report), &out)?;
            write_table(std::slice::from_ref(&report), &out)?;
            ev.emit("done", json!({"samples": report.samples.len(), "dice": report.dice()}))?;
            Ok(())
        }
        Command::Predict { cfg, checkpoint, dataset, out } => {
            let cfg = resolve_config(&cfg, &[])?;
            let model = load_model(&checkpoint)?;
            let ds = load_split(&dataset)?;
            let mut ev = start(&cfg, &out, "predict")?;
            let n = predict_split(&model, &ds, &cfg, &out)?;
            ev.emit("done", json!({"samples": n}))?;
            Ok(())
        }
        Command::Report { inputs, out } => {
            let mut reports = Vec::new();
            for p in &inputs {
                let file = if p.is_dir() { p.join(EVAL_FILE) } else { p.clone() };
                reports.push(read_eval(&file)?);
            }
            if reports.is_empty() {
                return Err(CliError::Usage("report needs at least one input".into()));
            }
            let mut ev = Events::create(&out)?;
            ev.emit("start", json!({"command": "report", "inputs": reports.len()}))?;
            metrics::export_report(&reports, &out)?;
            write_table(&reports, &out)?;
            ev.emit("done", json!({}))?;
            Ok(())
        }
        Command::Overlay {
            cfg,
            checkpoint,
            dataset,
            ids,
            out,
        } => {
            let cfg = resolve_config(&cfg, &[])?;
            let model = load_model(&checkpoint)?;
            let ds = load_split(&dataset)?;
            if let Some(missing) = ids.iter().find(|id| ds.get(id).is_none()) {
                return Err(CliError::Usage(format!("sample {missing} is not in {}", dataset.display())));
            }
            let mut ev = start(&cfg, &out, "overlay")?;
            let mut written = 0;
            for s in ds.samples.iter().filter(|s| ids.is_empty() || ids.contains(&s.id)) {
                let p = trainer::predict(&model, &s.image, &cfg.inference)?;
                let empty = sammix::BinaryMask::zeros(s.image.dim());
                let gt = s.seg_label.as_ref().unwrap_or(&empty);
                metrics::render_overlay(&s.image, gt, &p.mask, &out.join(format!("{}.png", s.id)))?;
                written += 1;
            }
            ev.emit("done", json!({"images": written}))?;
            Ok(())
        }
        Command::Matrix { cfg, data, cross, out } => {
            let cfg = resolve_config(&cfg, &[])?;
            run_matrix(&cfg, &data, cross.as_deref(), &out)
        }
    }
}

/// Train with the configured budget and seed. Writes `best/`, `last/` and
/// the epoch log under `out`, and returns the best-validation model.
pub fn train_run(cfg: &ExperimentConfig, train: &Dataset, val: Option<&Dataset>, out: &Path, resume: bool, ev: &mut Events) -> CliResult<Model> {
    let tc = &cfg.trainer;
    let train = dataio::split_supervision(train, tc.n_labeled, tc.seed)?;
    let eval = eval_options(cfg);
    let last = out.join(trainer::LAST_DIR);
    let state = if resume && last.join(sammix::checkpoint::MANIFEST_FILE).exists() {
        let s = TrainState::load(&last)?;
        ev.emit("resume", json!({"epoch": s.epoch}))?;
        s
    } else {
        let model = Model::init(cfg.classifier.clone(), cfg.segnet.clone(), cfg.promptgen.clone(), tc.seed, DType::F32)?;
        TrainState::new(model, tc)
    };
    let done = state.log.len();
    ev.emit("train_start", json!({"mode": tc.mode, "n_labeled": train.labeled_ids.len(), "samples": train.len(), "seed": tc.seed}))?;
    let outcome = trainer::resume(state, &train, val, tc, &eval, Some(out), None)?;
    for log in &outcome.state.log[done..] {
        ev.emit("epoch", serde_json::to_value(log).map_err(anyhow::Error::from)?)?;
    }
    ev.emit("train_end", json!({"epochs": outcome.state.epoch, "best": outcome.state.best}))?;
    Ok(outcome.best_model)
}

fn write_eval(report: &EvalReport, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join(EVAL_FILE);
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_eval(path: &Path) -> CliResult<EvalReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).map_err(CliError::Runtime)
}

/// Markdown table with one row per (model, domain): Dice and HD as
/// `mean ± std` over runs.
pub fn write_table(reports: &[EvalReport], dir: &Path) -> CliResult<()> {
    let mut groups: std::collections::BTreeMap<(String, Domain), Vec<EvalReport>> = Default::default();
    for r in reports {
        groups.entry((r.model.clone(), r.domain)).or_default().push(r.clone());
    }
    let mut text = String::from("| Model | Domain | Runs | Dice | HD (px) |\n|---|---|---|---|---|\n");
    for ((model, domain), rs) in &groups {
        let agg = metrics::aggregate_runs(rs)?;
        let hd = agg.hausdorff_text.unwrap_or_else(|| "n/a".into());
        text.push_str(&format!("| {model} | {} | {} | {} | {hd} |\n", domain.as_str(), agg.runs, agg.dice_text));
    }
    let path = dir.join(TABLE_FILE);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct PredictionRecord<'a> {
    id: &'a str,
    logits: [f64; 2],
    predicted_class: u8,
    mask_area: usize,
    n_boxes: usize,
}

/// `predictions.json`, `boxes.json` and `masks/<id>.u8` (row-major 0/1).
fn predict_split(model: &Model, ds: &Dataset, cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<usize> {
    let masks = out.join("masks");
    fs::create_dir_all(&masks)?;
    let mut preds = Vec::new();
    let mut boxes = Vec::new();
    let mut all = Vec::new();
    for s in &ds.samples {
        all.push((s, trainer::predict(model, &s.image, &cfg.inference)?));
    }
    for (s, p) in &all {
        let bytes: Vec<u8> = p.mask.iter().copied().collect();
        fs::write(masks.join(format!("{}.u8", s.id)), &bytes)?;
        preds.push(PredictionRecord {
            id: &s.id,
            logits: p.diagnostics.logits,
            predicted_class: p.diagnostics.predicted_class,
            mask_area: bytes.iter().filter(|&&v| v > 0).count(),
            n_boxes: p.diagnostics.boxes.len(),
        });
        boxes.extend(sammix::promptgen::box_records(&s.id, &p.diagnostics.boxes));
    }
    fs::write(out.join("predictions.json"), serde_json::to_string_pretty(&preds)? + "\n")?;
    fs::write(out.join("boxes.json"), serde_json::to_string_pretty(&boxes)? + "\n")?;
    Ok(all.len())
}

/// Report row label, e.g. `SAM-Mix-50`.
pub fn cell_name(mode: TrainMode, n_labeled: usize) -> String {
    format!("{}-{n_labeled}", mode.label())
}

/// Run directory of one cell and seed.
pub fn cell_dir(out: &Path, mode: TrainMode, n_labeled: usize, seed: u64) -> PathBuf {
    out.join("cells").join(cell_name(mode, n_labeled)).join(format!("seed{seed}"))
}

fn run_matrix(cfg: &ExperimentConfig, data: &Path, cross: Option<&Path>, out: &Path) -> CliResult<()> {
    let train = load_split(&dataio::split_dir(data, Split::Train))?;
    let val = load_split(&dataio::split_dir(data, Split::Val))?;
    let test = load_split(&dataio::split_dir(data, Split::Test))?;
    let cross = cross.map(load_split).transpose()?;
    let mut ev = start(cfg, out, "matrix")?;
    ev.emit("sequential", json!({"cells": cfg.matrix.modes.len() * cfg.matrix.n_labeled.len(), "seeds": cfg.trainer.seeds}))?;

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for &mode in &cfg.matrix.modes {
        for &n in &cfg.matrix.n_labeled {
            for &seed in &cfg.trainer.seeds {
                let name = cell_name(mode, n);
                let dir = cell_dir(out, mode, n, seed);
                let tag = json!({"cell": name, "seed": seed});
                let mut domains = vec![(Domain::InDomain, &test, dir.join(EVAL_FILE))];
                if let Some(c) = &cross {
                    domains.push((Domain::CrossDomain, c, dir.join("eval_cross.json")));
                }
                if domains.iter().all(|(_, _, f)| f.exists()) {
                    for (_, _, f) in &domains {
                        reports.push(read_eval(f)?);
                    }
                    ev.emit("cell_skipped", tag)?;
                    continue;
                }
                ev.emit("cell_start", tag.clone())?;
                let mut run_cfg = cfg.clone();
                run_cfg.trainer.mode = mode;
                run_cfg.trainer.n_labeled = n;
                run_cfg.trainer.seed = seed;
                match run_cell(&run_cfg, &train, &val, &domains, &dir, &name, seed) {
                    Ok(rs) => {
                        ev.emit("cell_done", json!({"cell": name, "seed": seed, "dice": rs[0].dice()}))?;
                        reports.extend(rs);
                    }
                    Err(e) => {
                        let msg = match e {
                            CliError::Usage(m) => m,
                            CliError::Runtime(e) => format!("{e:#}"),
                        };
                        ev.emit("cell_failed", json!({"cell": name, "seed": seed, "error": msg}))?;
                        failures.push(json!({"cell": name, "seed": seed, "error": msg}));
                    }
                }
            }
        }
    }
    let report_dir = out.join("report");
    if !reports.is_empty() {
        metrics::export_report(&reports, &report_dir)?;
        write_table(&reports, &report_dir)?;
    }
    fs::write(out.join(FAILURES_FILE), serde_json::to_string_pretty(&failures).map_err(anyhow::Error::from)? + "\n").map_err(anyhow::Error::from)?;
    ev.emit("done", json!({"runs": reports.len(), "failures": failures.len()}))?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow!("{} matrix run(s) failed; see {}", failures.len(), out.join(FAILURES_FILE).display())))
    }
}

fn run_cell(cfg: &ExperimentConfig, train: &Dataset, val: &Dataset, domains: &[(Domain, &Dataset, PathBuf)], dir: &Path, name: &str, seed: u64) -> CliResult<Vec<EvalReport>> {
    let mut ev = start(cfg, dir, "train")?;
    let model = train_run(cfg, train, Some(val), dir, true, &mut ev)?;
    let mut out = Vec::new();
    for (domain, data, file) in domains {
        let r = trainer::evaluate_report(&model, data, &eval_options(cfg), name, *domain, seed)?;
        let mut text = serde_json::to_string_pretty(&r).map_err(anyhow::Error::from)?;
        text.push('\n');
        fs::write(file, text).map_err(anyhow::Error::from)?;
        out.push(r);
    }
    ev.emit("done", json!({}))?;
    Ok(out)
}
