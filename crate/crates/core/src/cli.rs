//! Command-line front end.
//!
//! Every command writes into its `--out` directory and leaves an `echo.json`
//! there; `cpseg rerun --echo <file> --out <dir>` replays it.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::audit::{AuditReport, Confusion, CoverageCounts, SetSizeStats};
use crate::calibrate::{calibrate, CalibrationConfig, DEFAULT_CLUSTERS};
use crate::error::{Error, Result};
use crate::maskgen::{resolve_mask, set_size_map};
use crate::nonconformity::{inverse_prediction_map, pool_scores, UnitAssignment};
use crate::synth::{gen_dataset, Dataset, DatasetConfig, ImageEntry, Partition};
use crate::tensor::{
    export_pgm, read_tensor, write_file_atomic, write_tensor, LabelMap, QuantileField, ScoreMap, Variant, IGNORE,
};
use crate::toytrain::{train, TrainRunConfig, TrainingData};

pub const ECHO_FILE: &str = "echo.json";

#[derive(Debug, Parser)]
#[command(name = "cpseg", version, about = "Conformal calibration of segmentation pseudo-labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Write inverse prediction maps for a partition.
    Score(ScoreArgs),
    /// Fit a quantile field from score maps.
    Calibrate(CalibrateArgs),
    /// Resolve pseudo-masks from a quantile field (or raw argmax).
    Genmask(GenmaskArgs),
    /// Report coverage, set sizes and mask quality.
    Audit(AuditArgs),
    /// Train the toy classifier on labeled images plus pseudo-masks.
    Train(TrainArgs),
    /// Tabulate audit and training runs.
    Report(ReportArgs),
    /// Replay a command from its echo file.
    #[serde(skip)]
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Dataset config (JSON); defaults apply to omitted fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the master seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "labeled", value_parser = parse_partition)]
    pub partition: Partition,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// `scores.json` written by `score`.
    #[arg(long)]
    pub scores: PathBuf,
    /// Target mis-coverage rate, strictly between 0 and 1.
    #[arg(long, default_value_t = 0.05, value_parser = parse_alpha)]
    pub alpha: f64,
    /// pixel, image, kmeans or genann.
    #[arg(long, default_value = "pixel")]
    pub variant: Variant,
    #[arg(long, default_value_t = DEFAULT_CLUSTERS, value_parser = parse_clusters)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MaskRule {
    /// Class favored least when resolving prediction sets.
    #[arg(long, default_value_t = 0)]
    pub background: usize,
    /// Resolve sets by highest probability without a background rule.
    #[arg(long)]
    pub no_background: bool,
}

impl MaskRule {
    fn background(&self) -> Option<usize> {
        (!self.no_background).then_some(self.background)
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenmaskArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// `quantile.cmtf` written by `calibrate`.
    #[arg(long, required_unless_present = "raw", conflicts_with = "raw")]
    pub quantile: Option<PathBuf>,
    /// Emit the simulated model's argmax instead of calibrated masks.
    #[arg(long)]
    pub raw: bool,
    #[command(flatten)]
    pub rule: MaskRule,
    #[arg(long, default_value = "unlabeled", value_parser = parse_partition)]
    pub partition: Partition,
    /// Also write a PGM preview next to every mask.
    #[arg(long)]
    pub pgm: bool,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AuditArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Quantile field; enables coverage and set-size statistics on the test partition.
    #[arg(long, required_unless_present = "masks")]
    pub quantile: Option<PathBuf>,
    /// `masks.json` written by `genmask`; generated from `--quantile` when absent.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[command(flatten)]
    pub rule: MaskRule,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Pseudo-masks for the unlabeled partition; optional when `lambda0` is 0.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Training config (JSON); defaults apply to omitted fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Output directories of `audit` and `train` runs.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub echo: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_alpha(s: &str) -> std::result::Result<f64, String> {
    let a: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if a > 0.0 && a < 1.0 {
        Ok(a)
    } else {
        Err(format!("alpha must lie strictly between 0 and 1, got {a}"))
    }
}

fn parse_clusters(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(k) if k > 0 => Ok(k),
        _ => Err(format!("cluster count must be a positive integer, got '{s}'")),
    }
}

fn parse_partition(s: &str) -> std::result::Result<Partition, String> {
    match s {
        "labeled" => Ok(Partition::Labeled),
        "unlabeled" => Ok(Partition::Unlabeled),
        "test" => Ok(Partition::Test),
        _ => Err(format!("unknown partition '{s}'")),
    }
}

/// 2 for usage and validation errors, 1 for everything else.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Validation(_) | Error::InvalidArgument(_) | Error::Json(_) => 2,
        _ => 1,
    }
}

impl Command {
    fn out_mut(&mut self) -> &mut PathBuf {
        match self {
            Command::Synth(a) => &mut a.out,
            Command::Score(a) => &mut a.out,
            Command::Calibrate(a) => &mut a.out,
            Command::Genmask(a) => &mut a.out,
            Command::Audit(a) => &mut a.out,
            Command::Train(a) => &mut a.out,
            Command::Report(a) => &mut a.out,
            Command::Rerun(a) => &mut a.out,
        }
    }

    /// Makes every input path absolute so the echo replays from any directory.
    fn absolutize(&mut self) -> Result<()> {
        let abs = |p: &mut PathBuf| -> Result<()> {
            *p = std::path::absolute(&*p).map_err(|e| Error::io(&*p, e))?;
            Ok(())
        };
        let opt = |p: &mut Option<PathBuf>| p.as_mut().map_or(Ok(()), abs);
        match self {
            Command::Synth(a) => opt(&mut a.config)?,
            Command::Score(a) => abs(&mut a.manifest)?,
            Command::Calibrate(a) => {
                abs(&mut a.manifest)?;
                abs(&mut a.scores)?;
            }
            Command::Genmask(a) => {
                abs(&mut a.manifest)?;
                opt(&mut a.quantile)?;
            }
            Command::Audit(a) => {
                abs(&mut a.manifest)?;
                opt(&mut a.quantile)?;
                opt(&mut a.masks)?;
            }
            Command::Train(a) => {
                abs(&mut a.manifest)?;
                opt(&mut a.masks)?;
                opt(&mut a.config)?;
            }
            Command::Report(a) => a.runs.iter_mut().try_for_each(abs)?,
            Command::Rerun(_) => {}
        }
        Ok(())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Rerun(r) => {
            let bytes = fs::read(&r.echo).map_err(|e| Error::io(&r.echo, e))?;
            let mut cmd: Command = serde_json::from_slice(&bytes)?;
            *cmd.out_mut() = r.out;
            execute(cmd)
        }
        cmd => execute(cmd),
    }
}

fn execute(mut cmd: Command) -> Result<()> {
    cmd.absolutize()?;
    let out = cmd.out_mut().clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    match &cmd {
        Command::Synth(a) => cmd_synth(a, &out)?,
        Command::Score(a) => cmd_score(a, &out)?,
        Command::Calibrate(a) => cmd_calibrate(a, &out)?,
        Command::Genmask(a) => cmd_genmask(a, &out)?,
        Command::Audit(a) => cmd_audit(a, &out)?,
        Command::Train(a) => cmd_train(a, &out)?,
        Command::Report(a) => cmd_report(a, &out)?,
        Command::Rerun(_) => return Err(Error::InvalidArgument("an echo cannot contain rerun".into())),
    }
    write_json(&out.join(ECHO_FILE), &cmd)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Listing of per-image tensors written by a command, paths relative to the listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorIndex {
    pub partition: Partition,
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub id: String,
    pub path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Calibrated,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskIndex {
    pub source: MaskSource,
    pub variant: Option<Variant>,
    pub alpha: Option<f64>,
    pub background: Option<usize>,
    #[serde(flatten)]
    pub index: TensorIndex,
}

impl TensorIndex {
    fn resolve(&self, listing: &Path) -> HashMap<&str, PathBuf> {
        let root = listing.parent().unwrap_or(Path::new(""));
        self.entries.iter().map(|e| (e.id.as_str(), root.join(&e.path))).collect()
    }
}

fn lookup<'a>(paths: &'a HashMap<&str, PathBuf>, id: &str) -> Result<&'a PathBuf> {
    paths
        .get(id)
        .ok_or_else(|| Error::Validation(format!("no tensor listed for image '{id}'")))
}

fn cmd_synth(a: &SynthArgs, out: &Path) -> Result<()> {
    let mut cfg: DatasetConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => DatasetConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    gen_dataset(&cfg, out)?;
    write_json(&out.join("dataset_config.json"), &cfg)
}

fn cmd_score(a: &ScoreArgs, out: &Path) -> Result<()> {
    let ds = Dataset::open(&a.manifest)?;
    create_dir(&out.join("scores"))?;
    let mut entries = Vec::new();
    for e in ds.entries(a.partition) {
        let map = inverse_prediction_map(&ds.probs(e)?, &ds.labels(e)?)?;
        let rel = format!("scores/{}.cmtf", e.id);
        write_tensor(out.join(&rel), &map)?;
        entries.push(IndexEntry { id: e.id.clone(), path: rel });
    }
    let index = TensorIndex {
        partition: a.partition,
        entries,
    };
    write_json(&out.join("scores.json"), &index)
}

fn find_entry<'a>(ds: &'a Dataset, which: Partition, id: &str) -> Result<&'a ImageEntry> {
    ds.entries(which)
        .iter()
        .find(|e| e.id == id)
        .ok_or_else(|| Error::Validation(format!("image '{id}' is not in the manifest")))
}

fn cmd_calibrate(a: &CalibrateArgs, out: &Path) -> Result<()> {
    let ds = Dataset::open(&a.manifest)?;
    let index: TensorIndex = read_json(&a.scores)?;
    let paths = index.resolve(&a.scores);
    let mut maps = Vec::with_capacity(index.entries.len());
    let mut labels = Vec::with_capacity(index.entries.len());
    for e in &index.entries {
        let map: ScoreMap = read_tensor(lookup(&paths, &e.id)?)?;
        maps.push(map);
        labels.push(ds.labels(find_entry(&ds, index.partition, &e.id)?)?);
    }
    let pools = pool_scores(&maps, UnitAssignment::Pixel)?;
    let cfg = CalibrationConfig {
        variant: a.variant,
        alpha: a.alpha,
        k_clusters: a.clusters,
        seed: a.seed,
    };
    let field = calibrate(&pools, &labels, ds.classes(), &cfg)?;
    field.save(out.join("quantile.cmtf"))
}

fn cmd_genmask(a: &GenmaskArgs, out: &Path) -> Result<()> {
    let ds = Dataset::open(&a.manifest)?;
    let field = a.quantile.as_ref().map(QuantileField::load).transpose()?;
    let background = a.rule.background();
    create_dir(&out.join("masks"))?;
    let mut entries = Vec::new();
    for e in ds.entries(a.partition) {
        let probs = ds.probs(e)?;
        let mask = match &field {
            Some(f) => resolve_mask(&probs, f, background)?.into_inner(),
            None => probs.argmax(),
        };
        let rel = format!("masks/{}.cmtf", e.id);
        write_tensor(out.join(&rel), &mask)?;
        if a.pgm {
            export_pgm(&mask, ds.classes(), out.join(format!("masks/{}.pgm", e.id)))?;
        }
        entries.push(IndexEntry { id: e.id.clone(), path: rel });
    }
    let index = MaskIndex {
        source: if field.is_some() { MaskSource::Calibrated } else { MaskSource::Raw },
        variant: field.as_ref().map(|f| f.variant()),
        alpha: field.as_ref().map(|f| f.alpha()),
        background: field.as_ref().and(background),
        index: TensorIndex {
            partition: a.partition,
            entries,
        },
    };
    write_json(&out.join("masks.json"), &index)
}

fn load_masks(ds: &Dataset, listing: &Path) -> Result<(MaskIndex, Vec<(String, LabelMap)>)> {
    let index: MaskIndex = read_json(listing)?;
    let paths = index.index.resolve(listing);
    let masks = ds
        .entries(index.index.partition)
        .iter()
        .map(|e| {
            let m: LabelMap = read_tensor(lookup(&paths, &e.id)?)?;
            m.validate_classes(ds.classes())?;
            Ok((e.id.clone(), m))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((index, masks))
}

fn cmd_audit(a: &AuditArgs, out: &Path) -> Result<()> {
    let ds = Dataset::open(&a.manifest)?;
    let classes = ds.classes();
    let field = a.quantile.as_ref().map(QuantileField::load).transpose()?;

    let mut coverage = None;
    let mut set_sizes = None;
    let mut coverage_images = 0;
    if let Some(f) = &field {
        let mut counts = CoverageCounts::new(classes);
        let mut histogram = vec![0u64; classes + 1];
        for e in ds.entries(Partition::Test) {
            let probs = ds.probs(e)?;
            counts.add(&probs, f, &ds.labels(e)?)?;
            for &s in &set_size_map(&probs, f)?.sizes {
                histogram[s as usize] += 1;
            }
            coverage_images += 1;
        }
        coverage = Some(counts.report()?);
        set_sizes = Some(SetSizeStats::from_histogram(histogram));
    }

    let (variant, alpha, background, masks) = match (&a.masks, &field) {
        (Some(listing), _) => {
            let (index, masks) = load_masks(&ds, listing)?;
            let which = index.index.partition;
            (index.variant, index.alpha, index.background, (which, masks))
        }
        (None, Some(f)) => {
            let bg = a.rule.background();
            let masks = ds
                .entries(Partition::Unlabeled)
                .iter()
                .map(|e| Ok((e.id.clone(), resolve_mask(&ds.probs(e)?, f, bg)?.into_inner())))
                .collect::<Result<Vec<_>>>()?;
            (Some(f.variant()), Some(f.alpha()), bg, (Partition::Unlabeled, masks))
        }
        (None, None) => return Err(Error::InvalidArgument("audit needs --quantile or --masks".into())),
    };
    let (which, masks) = masks;
    let mut confusion = Confusion::new(classes);
    let (mut ignored, mut pixels) = (0usize, 0usize);
    for (id, mask) in &masks {
        confusion.add(mask, &ds.labels(find_entry(&ds, which, id)?)?)?;
        ignored += mask.labels().iter().filter(|&&l| l == IGNORE).count();
        pixels += mask.pixels();
    }
    let miou = confusion.miou()?;
    let report = AuditReport {
        variant: variant.or(field.as_ref().map(|f| f.variant())),
        alpha: alpha.or(field.as_ref().map(|f| f.alpha())),
        background,
        coverage: coverage.as_ref().map(|c| c.overall),
        per_class_coverage: coverage.map(|c| c.per_class),
        set_size_stats: set_sizes,
        coverage_images,
        miou: miou.mean,
        per_class_iou: miou.per_class,
        ignore_fraction: if pixels == 0 { 0.0 } else { ignored as f64 / pixels as f64 },
        mask_images: masks.len(),
    };
    write_json(&out.join("audit.json"), &report)
}

/// What `train` records next to the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    /// Pseudo-mask source; `None` for label-only runs.
    pub source: Option<MaskSource>,
    pub variant: Option<Variant>,
    pub alpha: Option<f64>,
    pub config: TrainRunConfig,
    pub final_test_miou: Option<f64>,
}

fn cmd_train(a: &TrainArgs, out: &Path) -> Result<()> {
    let ds = Dataset::open(&a.manifest)?;
    let cfg: TrainRunConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainRunConfig::default(),
    };
    cfg.validate()?;
    let pair = |e: &ImageEntry| Ok((ds.features(e)?, ds.labels(e)?));
    let labeled = ds.entries(Partition::Labeled).iter().map(pair).collect::<Result<Vec<_>>>()?;
    let test = ds.entries(Partition::Test).iter().map(pair).collect::<Result<Vec<_>>>()?;
    let unlabeled = ds
        .entries(Partition::Unlabeled)
        .iter()
        .map(|e| ds.features(e))
        .collect::<Result<Vec<_>>>()?;

    let (index, pseudo) = match &a.masks {
        Some(listing) => {
            let (index, masks) = load_masks(&ds, listing)?;
            if index.index.partition != Partition::Unlabeled {
                return Err(Error::Validation("pseudo-masks must cover the unlabeled partition".into()));
            }
            (Some(index), masks.into_iter().map(|(_, m)| m).collect())
        }
        None if cfg.lambda0 == 0.0 => {
            let blank = unlabeled
                .iter()
                .map(|x| LabelMap::filled(x.height(), x.width(), IGNORE))
                .collect::<Result<Vec<_>>>()?;
            (None, blank)
        }
        None => return Err(Error::Validation("missing pseudo-masks for lambda0 > 0".into())),
    };
    let data = TrainingData::new(ds.classes(), labeled, unlabeled, pseudo, test)?;
    let outcome = train(&data, &cfg)?;

    write_tensor(out.join("model.cmtf"), &outcome.model)?;
    let mut history = String::new();
    for rec in &outcome.history {
        history.push_str(&serde_json::to_string(rec)?);
        history.push('\n');
    }
    write_file_atomic(&out.join("history.jsonl"), history.as_bytes())?;
    let summary = TrainSummary {
        source: index.as_ref().map(|i| i.source),
        variant: index.as_ref().and_then(|i| i.variant),
        alpha: index.as_ref().and_then(|i| i.alpha),
        final_test_miou: outcome.history.last().and_then(|r| r.test_miou),
        config: cfg,
    };
    write_json(&out.join("summary.json"), &summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub run: String,
    pub variant: Option<Variant>,
    pub alpha: Option<f64>,
    pub coverage: Option<f64>,
    pub mean_set_size: Option<f64>,
    pub miou: f64,
    pub ignore_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub run: String,
    pub arm: String,
    pub lambda0: f64,
    pub stage_switch: usize,
    pub epochs: usize,
    pub final_test_miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub variants: Vec<VariantRow>,
    pub ablation: Vec<AblationEntry>,
}

fn arm_name(s: &TrainSummary) -> &'static str {
    let stage_two = s.config.stage_switch < s.config.epochs;
    match (s.source, s.config.lambda0 == 0.0) {
        (None, _) | (_, true) => "label-only",
        (Some(MaskSource::Raw), _) => "raw pseudo-labels",
        (Some(MaskSource::Calibrated), _) if stage_two => "calibrated + self-reliance",
        (Some(MaskSource::Calibrated), _) => "calibrated, stage I only",
    }
}

fn arm_rank(arm: &str) -> usize {
    ["label-only", "raw pseudo-labels", "calibrated, stage I only", "calibrated + self-reliance"]
        .iter()
        .position(|a| *a == arm)
        .unwrap_or(usize::MAX)
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cmd_report(a: &ReportArgs, out: &Path) -> Result<()> {
    let mut report = Report {
        variants: Vec::new(),
        ablation: Vec::new(),
    };
    for dir in &a.runs {
        let (audit, summary) = (dir.join("audit.json"), dir.join("summary.json"));
        let mut found = false;
        if audit.exists() {
            let r: AuditReport = read_json(&audit)?;
            report.variants.push(VariantRow {
                run: run_name(dir),
                variant: r.variant,
                alpha: r.alpha,
                coverage: r.coverage,
                mean_set_size: r.set_size_stats.map(|s| s.mean),
                miou: r.miou,
                ignore_fraction: r.ignore_fraction,
            });
            found = true;
        }
        if summary.exists() {
            let s: TrainSummary = read_json(&summary)?;
            report.ablation.push(AblationEntry {
                run: run_name(dir),
                arm: arm_name(&s).to_string(),
                lambda0: s.config.lambda0,
                stage_switch: s.config.stage_switch,
                epochs: s.config.epochs,
                final_test_miou: s.final_test_miou,
            });
            found = true;
        }
        if !found {
            return Err(Error::Validation(format!(
                "{} holds neither audit.json nor summary.json",
                dir.display()
            )));
        }
    }
    let variant_rank = |v: Option<Variant>| v.and_then(|v| Variant::ALL.iter().position(|&x| x == v));
    report.variants.sort_by(|x, y| {
        variant_rank(x.variant)
            .cmp(&variant_rank(y.variant))
            .then(y.alpha.unwrap_or(0.0).total_cmp(&x.alpha.unwrap_or(0.0)))
            .then(x.run.cmp(&y.run))
    });
    report
        .ablation
        .sort_by(|x, y| arm_rank(&x.arm).cmp(&arm_rank(&y.arm)).then(x.run.cmp(&y.run)));

    let mut csv = String::from("run,variant,alpha,coverage,mean_set_size,miou,ignore_fraction\n");
    for r in &report.variants {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            csv_field(&r.run),
            cell(r.variant),
            cell(r.alpha),
            cell(r.coverage),
            cell(r.mean_set_size),
            r.miou,
            r.ignore_fraction
        );
    }
    write_file_atomic(&out.join("variants.csv"), csv.as_bytes())?;

    let mut csv = String::from("run,arm,lambda0,stage_switch,epochs,final_test_miou\n");
    for r in &report.ablation {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            csv_field(&r.run),
            csv_field(&r.arm),
            r.lambda0,
            r.stage_switch,
            r.epochs,
            cell(r.final_test_miou)
        );
    }
    write_file_atomic(&out.join("ablation.csv"), csv.as_bytes())?;
    write_json(&out.join("report.json"), &report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_parser_rejects_out_of_range() {
        assert!(parse_alpha("1.5").is_err());
        assert!(parse_alpha("0").is_err());
        assert!(parse_alpha("nan").is_err());
        assert_eq!(parse_alpha("0.1"), Ok(0.1));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn echo_round_trips_without_out() {
        let cli = Cli::try_parse_from([
            "cpseg", "calibrate", "--manifest", "/m.json", "--scores", "/s.json", "--alpha", "0.1", "--out", "/o",
        ])
        .unwrap();
        let json = serde_json::to_string(&cli.command).unwrap();
        assert!(!json.contains("/o\""));
        let back: Command = serde_json::from_str(&json).unwrap();
        match back {
            Command::Calibrate(a) => {
                assert_eq!(a.alpha, 0.1);
                assert_eq!(a.variant, Variant::Pixel);
                assert_eq!(a.out, PathBuf::new());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_fields_are_quoted_when_needed() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }

    #[test]
    fn validation_errors_map_to_usage_exit_code() {
        assert_eq!(exit_code(&Error::Validation("x".into())), 2);
        assert_eq!(exit_code(&Error::BadMagic), 1);
    }
}
