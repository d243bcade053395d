// SPDX-License-Identifier: Apache-2.0

//! Command line front end. Every training command writes `stageN.ckpt`,
//! `stageN_metrics.jsonl` and `stageN_manifest.toml` into `--out`; passing a run
//! manifest back as `--config` repeats the run.
//!
//! Exit codes: 0 success, 2 usage or config, 3 data, format or I/O, 4 missing
//! prerequisite.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::augment;
use crate::config::{TrainConfig, GAMMA_UNREACHABLE};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, Model};
use crate::pcio::{self, LabeledScan};
use crate::pipeline::{self, EvalRecord, EvalReport, TrainData, TrainObserver};
use crate::schema::ClassSchema;
use crate::synth::{self, DatasetManifest};
use crate::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "advseg", version, about = "LiDAR segmentation for adverse weather")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config (training keys, or a run manifest from an earlier run).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train the base model on the source split.
    TrainStage0(TrainArgs),
    /// Few-shot fine-tuning with gated pseudo-labels.
    TrainStage1(TrainArgs),
    /// Re-training with distillation and polar-mixed pseudo-labels.
    TrainStage2(TrainArgs),
    /// Per-class IoU of a checkpoint on a labeled split.
    Eval(EvalArgs),
    /// Argmax labels for one scan or a `velodyne/` directory.
    PseudoLabel(PseudoLabelArgs),
    /// Polar mix of two labeled scans.
    Mix(MixArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of labeled adverse scans.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n_source: Option<usize>,
    #[arg(long)]
    pub n_unlabeled: Option<usize>,
    #[arg(long)]
    pub n_test_source: Option<usize>,
    #[arg(long)]
    pub n_test_target: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset root written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Stage-zero checkpoint (default `{out}/stage0.ckpt`).
    #[arg(long)]
    pub stage0: Option<PathBuf>,
    /// Stage-one checkpoint (default `{out}/stage1.ckpt`).
    #[arg(long)]
    pub stage1: Option<PathBuf>,
    /// Never enable the pseudo-label term (stage one).
    #[arg(long)]
    pub ablate_fss_only: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root; evaluates `--split`.
    #[arg(long, conflicts_with = "scans")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = synth::SPLIT_TEST_TARGET)]
    pub split: String,
    /// Directory with `velodyne/` and `labels/`.
    #[arg(long)]
    pub scans: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PseudoLabelArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A `.bin` scan or a directory containing `velodyne/`.
    #[arg(long)]
    pub input: PathBuf,
    /// Output `.label` file, or a directory for directory input.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MixArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub a_labels: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub b_labels: PathBuf,
    /// Width of the sector taken from `a`, radians in (0, 2π).
    #[arg(long, allow_negative_numbers = true)]
    pub theta: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub start: f64,
    /// Dataset root whose schema maps the raw label ids (default schema otherwise).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; receives `mixed.bin` and `mixed.label`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Written next to every training output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub ablate_fss_only: bool,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    /// Wall-clock seconds.
    pub timings: BTreeMap<String, f64>,
    pub config: TrainConfig,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

/// Parses `args` (including the program name) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    let common = match &cmd {
        Command::GenData(a) => &a.common,
        Command::TrainStage0(a) | Command::TrainStage1(a) | Command::TrainStage2(a) => &a.common,
        Command::Eval(a) => &a.common,
        Command::PseudoLabel(a) => &a.common,
        Command::Mix(a) => &a.common,
    };
    init_threads(common.threads)?;
    match cmd {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::TrainStage0(a) => cmd_train(0, &a),
        Command::TrainStage1(a) => cmd_train(1, &a),
        Command::TrainStage2(a) => cmd_train(2, &a),
        Command::Eval(a) => cmd_eval(&a),
        Command::PseudoLabel(a) => cmd_pseudo_label(&a),
        Command::Mix(a) => cmd_mix(&a),
    }
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(Error::arg("--threads must be at least 1"));
    }
    // The global pool can only be set once per process.
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        log::debug!("thread pool already initialized: {e}");
    }
    Ok(())
}

fn mkdirs(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

// --- gen-data --------------------------------------------------------------------

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let mut m = match &a.common.config {
        Some(p) => DatasetManifest::load_file(p)?,
        None => DatasetManifest::with_defaults(0, 5),
    };
    if let Some(s) = a.common.seed {
        m.seed = s;
    }
    if let Some(k) = a.k {
        m.k = k;
    }
    if let Some(n) = a.n_source {
        m.n_source = n;
    }
    if let Some(n) = a.n_unlabeled {
        m.n_target_unlabeled = n;
    }
    if let Some(n) = a.n_test_source {
        m.n_test_source = n;
    }
    if let Some(n) = a.n_test_target {
        m.n_test_target = n;
    }
    let data = synth::generate_dataset(&m)?;
    let path = synth::write_dataset(&a.out, &m, &data)?;
    println!("{}", path.display());
    Ok(())
}

// --- training --------------------------------------------------------------------

struct LogObserver;

impl TrainObserver for LogObserver {
    fn on_eval(&mut self, r: &EvalRecord) {
        let f = |v: Option<f64>| v.map_or("undef".to_string(), |x| format!("{x:.4}"));
        log::info!(
            "stage {} epoch {}: miou {} base {} novel {}{}",
            r.stage,
            r.epoch,
            f(r.miou_all),
            f(r.miou_base),
            f(r.miou_novel),
            if r.best { " (best)" } else { "" }
        );
    }
}

/// Config and recorded inputs from `--config`, which may be a plain config file or
/// a run manifest.
fn resolve_config(path: Option<&Path>) -> Result<(TrainConfig, BTreeMap<String, PathBuf>)> {
    let Some(path) = path else {
        return Ok((TrainConfig::default(), BTreeMap::new()));
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: toml::Table =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if value.contains_key("tool_version") {
        let m = RunManifest::load(path)?;
        Ok((m.config, m.inputs))
    } else {
        Ok((TrainConfig::from_toml(&text)?, BTreeMap::new()))
    }
}

fn require_checkpoint(path: &Path, stage: u8) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Prerequisite(format!(
            "stage {stage} checkpoint not found at {}; run `advseg train-stage{stage}` first",
            path.display()
        )));
    }
    load_checkpoint(path)
}

fn check_schema(ckpt: &Checkpoint, schema: &ClassSchema, path: &Path) -> Result<()> {
    if &ckpt.schema != schema {
        return Err(Error::Data(format!(
            "{}: checkpoint schema differs from the dataset schema",
            path.display()
        )));
    }
    Ok(())
}

pub fn cmd_train(stage: u8, a: &TrainArgs) -> Result<()> {
    let (mut cfg, recorded) = resolve_config(a.common.config.as_deref())?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    let ablate = a.ablate_fss_only || cfg.gamma == GAMMA_UNREACHABLE;
    if a.ablate_fss_only {
        cfg.gamma = GAMMA_UNREACHABLE;
    }
    cfg.validate()?;

    let pick = |flag: &Option<PathBuf>, key: &str, default: Option<PathBuf>| {
        flag.clone().or_else(|| recorded.get(key).cloned()).or(default)
    };
    let data_root = pick(&a.data, "data", None)
        .ok_or_else(|| Error::arg("--data is required (or a run manifest recording it)"))?;
    mkdirs(&a.out)?;

    let mut inputs = BTreeMap::new();
    inputs.insert("data".to_string(), data_root.clone());
    let mut timings = BTreeMap::new();

    let t = Instant::now();
    let (dm, split) = synth::read_split(&data_root)?;
    timings.insert("load".to_string(), t.elapsed().as_secs_f64());
    let schema = &dm.schema;
    let data = TrainData {
        schema,
        source: &split.source,
        shots: &split.target_labeled,
        unlabeled: &split.target_unlabeled,
    };

    let t = Instant::now();
    let (model, epoch, records) = match stage {
        0 => {
            let out = pipeline::train_stage0(&split.source, schema, &cfg, &mut LogObserver)?;
            (out.model, cfg.stage0_epochs, out.records)
        }
        1 => {
            let p0 = pick(&a.stage0, "stage0", Some(a.out.join("stage0.ckpt"))).expect("default");
            let c0 = require_checkpoint(&p0, 0)?;
            check_schema(&c0, schema, &p0)?;
            inputs.insert("stage0".to_string(), p0);
            let out = pipeline::train_stage1(&c0.model, data, &cfg, &mut LogObserver)?;
            (out.best_model().clone(), out.best.epoch, out.records)
        }
        _ => {
            let p0 = pick(&a.stage0, "stage0", Some(a.out.join("stage0.ckpt"))).expect("default");
            let c0 = require_checkpoint(&p0, 0)?;
            check_schema(&c0, schema, &p0)?;
            let p1 = pick(&a.stage1, "stage1", Some(a.out.join("stage1.ckpt"))).expect("default");
            let c1 = require_checkpoint(&p1, 1)?;
            check_schema(&c1, schema, &p1)?;
            inputs.insert("stage0".to_string(), p0);
            inputs.insert("stage1".to_string(), p1);
            let out = pipeline::train_stage2(&c0.model, &c1.model, data, &cfg, &mut LogObserver)?;
            (out.best_model().clone(), out.best.epoch, out.records)
        }
    };
    timings.insert(format!("stage{stage}"), t.elapsed().as_secs_f64());

    let ckpt_path = a.out.join(format!("stage{stage}.ckpt"));
    let log_path = a.out.join(format!("stage{stage}_metrics.jsonl"));
    let manifest_path = a.out.join(format!("stage{stage}_manifest.toml"));
    save_checkpoint(
        &Checkpoint {
            model,
            schema: schema.clone(),
            epoch: epoch as u64,
            config_hash: cfg.hash(),
        },
        &ckpt_path,
    )?;
    write_file(&log_path, pipeline::records_to_jsonl(&records))?;

    let mut outputs = BTreeMap::new();
    outputs.insert("checkpoint".to_string(), ckpt_path.clone());
    outputs.insert("metrics".to_string(), log_path);
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        command: format!("train-stage{stage}"),
        seed: cfg.seed,
        ablate_fss_only: ablate,
        inputs,
        outputs,
        timings,
        config: cfg,
    };
    write_file(&manifest_path, manifest.to_toml())?;
    println!("{}", ckpt_path.display());
    Ok(())
}

// --- eval / pseudo-label / mix ---------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("undef".to_string(), |x| format!("{x:.6}"))
}

/// Human-readable table followed by one `RESULT key=value ...` line. Keys:
/// `miou_all`, `miou_base`, `miou_novel`, `points`, and `iou.<class name>` per class;
/// undefined values print as `undef`.
pub fn format_report(report: &EvalReport, schema: &ClassSchema) -> String {
    let mut s = String::new();
    s.push_str(&format!("{:<20} {:>10}\n", "class", "IoU"));
    for (c, iou) in report.iou.iter().enumerate() {
        let name = schema.name(c as u32).unwrap_or("?");
        s.push_str(&format!("{name:<20} {:>10}\n", fmt_opt(*iou)));
    }
    s.push_str(&format!("{:<20} {:>10}\n", "mIoU (all)", fmt_opt(report.miou_all)));
    s.push_str(&format!("{:<20} {:>10}\n", "mIoU (base)", fmt_opt(report.miou_base)));
    s.push_str(&format!("{:<20} {:>10}\n", "mIoU (novel)", fmt_opt(report.miou_novel)));
    s.push_str(&format!(
        "RESULT miou_all={} miou_base={} miou_novel={} points={}",
        fmt_opt(report.miou_all),
        fmt_opt(report.miou_base),
        fmt_opt(report.miou_novel),
        report.confusion.total()
    ));
    for (c, iou) in report.iou.iter().enumerate() {
        let name = schema.name(c as u32).unwrap_or("?");
        s.push_str(&format!(" iou.{name}={}", fmt_opt(*iou)));
    }
    s.push('\n');
    s
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ckpt = require_checkpoint(&a.checkpoint, 0).map_err(|e| match e {
        Error::Prerequisite(_) => Error::Prerequisite(format!(
            "checkpoint not found at {}",
            a.checkpoint.display()
        )),
        e => e,
    })?;
    let (cfg, _) = resolve_config(a.common.config.as_deref())?;
    let scans: Vec<LabeledScan> = match (&a.data, &a.scans) {
        (Some(root), _) => {
            let dm = DatasetManifest::load(root)?;
            check_schema(&ckpt, &dm.schema, &a.checkpoint)?;
            synth::read_labeled_split(root, &a.split, &dm.schema)?
        }
        (None, Some(dir)) => synth::read_labeled_dir(dir, &ckpt.schema)?,
        (None, None) => return Err(Error::arg("one of --data or --scans is required")),
    };
    let report = pipeline::evaluate(&ckpt.model, &scans, &ckpt.schema, cfg.miou_policy)?;
    let text = format_report(&report, &ckpt.schema);
    print!("{text}");
    if let Some(out) = &a.out {
        let json = serde_json::json!({
            "checkpoint": a.checkpoint,
            "scans": scans.len(),
            "iou": report.iou,
            "miou_all": report.miou_all,
            "miou_base": report.miou_base,
            "miou_novel": report.miou_novel,
        });
        write_file(out, serde_json::to_string_pretty(&json).expect("json") + "\n")?;
    }
    Ok(())
}

fn label_file(model: &Model, schema: &ClassSchema, scan: &Path, out: &Path) -> Result<usize> {
    let cloud = pcio::read_scan(scan)?;
    let labels = pipeline::generate_pseudo_labels(model, &cloud)?;
    pcio::write_labels(&labels, schema, out)?;
    Ok(labels.len())
}

pub fn cmd_pseudo_label(a: &PseudoLabelArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    if a.input.is_dir() {
        let n = synth::read_cloud_dir(&a.input)?.len();
        let labels_dir = a.out.join("labels");
        mkdirs(&labels_dir)?;
        for i in 0..n {
            label_file(
                &ckpt.model,
                &ckpt.schema,
                &a.input.join("velodyne").join(format!("{i:06}.bin")),
                &labels_dir.join(format!("{i:06}.label")),
            )?;
        }
        println!("{} scans -> {}", n, labels_dir.display());
    } else {
        let n = label_file(&ckpt.model, &ckpt.schema, &a.input, &a.out)?;
        println!("{n} points -> {}", a.out.display());
    }
    Ok(())
}

pub fn cmd_mix(a: &MixArgs) -> Result<()> {
    let schema = match &a.data {
        Some(root) => DatasetManifest::load(root)?.schema,
        None => ClassSchema::default_weather(),
    };
    let sa = pcio::read_labeled_scan(&a.a, &a.a_labels, &schema)?;
    let sb = pcio::read_labeled_scan(&a.b, &a.b_labels, &schema)?;
    let mixed = augment::polar_mix(&sa, &sb, a.theta, a.start)?;
    mkdirs(&a.out)?;
    pcio::write_scan(&mixed.cloud, a.out.join("mixed.bin"))?;
    pcio::write_labels(&mixed.labels, &schema, a.out.join("mixed.label"))?;
    println!("{} points -> {}", mixed.len(), a.out.display());
    Ok(())
}
