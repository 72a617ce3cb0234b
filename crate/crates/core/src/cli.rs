//! Command-line entry point and run manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{default_brats_suffixes, generate_phantoms, ingest_brats, list_subjects, load_dataset, make_folds, save_dataset, FoldSplit, Subject};
use crate::embedding::{compute_tsne, extract_features, majority_rate, nearest_neighbor_accuracy, render_scatter, write_embedding_csv, Highlight, TsneConfig};
use crate::evaluation::{emit_report, parse_report_csv, pool_reports, DiceReport, FoldId, ReportFormat};
use crate::missingness::{enumerate_subsets, ModalityMask};
use crate::nets::input_for_output;
use crate::pipeline::{evaluate_models, find_checkpoints, load_trained, prepare, run_toy, split_fold, train_variant, ExperimentConfig, ToyRun, Variant};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "mmseg", version, about = "Multi-modal tumor segmentation robust to missing MR sequences")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Convert a directory of per-subject NIfTI files into the dataset layout.
    Ingest(IngestArgs),
    /// Train one model variant on the training part of a fold.
    Train(TrainArgs),
    /// Evaluate trained models on a test fold under modality subsets.
    Eval(EvalArgs),
    /// Embed hidden-layer features with t-SNE and draw highlighted panels.
    Visualize(VisualizeArgs),
    /// Combine per-fold report CSVs into markdown tables and a pooled mean.
    Report(ReportArgs),
    /// Run the whole toy pipeline: synth, train all variants, eval, report, visualize.
    ReproToy(ReproArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 25)]
    pub subjects: usize,
    /// Cube side in voxels.
    #[arg(long, default_value_t = 48)]
    pub side: usize,
    #[arg(long, default_value_t = 4)]
    pub modalities: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory with one sub-directory of NIfTI files per subject.
    #[arg(long)]
    pub root: PathBuf,
    /// Comma-separated `suffix:NAME` pairs in channel order.
    #[arg(long, default_value = "t1:T1W,t1ce:T1WC,t2:T2W,flair:FLAIR")]
    pub modalities: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON experiment configuration; omitted fields take preset values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base configuration the JSON file overrides.
    #[arg(long, value_parser = ["reference", "toy"], default_value = "reference")]
    pub preset: String,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let base = match self.preset.as_str() {
            "toy" => ExperimentConfig::toy(),
            _ => ExperimentConfig::default(),
        };
        let Some(path) = &self.config else {
            return Ok(base);
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let overrides: serde_json::Value = serde_json::from_str(&text)?;
        let mut merged = serde_json::to_value(&base)?;
        merge_json(&mut merged, overrides);
        Ok(serde_json::from_value(merged)?)
    }
}

fn merge_json(base: &mut serde_json::Value, overrides: serde_json::Value) {
    match (base, overrides) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = ["unet", "dropout", "multipath", "sharedrep"])]
    pub arch: String,
    /// Pretrain one pathway per modality, then train the fusion layers on frozen paths.
    #[arg(long)]
    pub pretrain: bool,
    /// Train dedicated UNets for `all` subsets or the listed ones (e.g. `T2W+FLAIR,T1W`).
    #[arg(long)]
    pub dedicated: Option<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A checkpoint, a variant directory or a directory of several variants.
    #[arg(long)]
    pub model_dir: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// `all` or comma-separated subsets such as `T1W+T2W,FLAIR`.
    #[arg(long, default_value = "all")]
    pub subsets: String,
    /// Side of the evaluation tiles; defaults to the configuration's value.
    #[arg(long)]
    pub input_side: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report CSV; a markdown rendering is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub model_dir: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long, default_value_t = 40_000)]
    pub n_voxels: usize,
    #[arg(long, default_value_t = 16)]
    pub n_patches: usize,
    /// Comma-separated masks; `all` is the full set.
    #[arg(long, default_value = "all,T1W,T1WC,T2W,FLAIR")]
    pub masks: String,
    /// Patch side for feature extraction; defaults to the training patch side.
    #[arg(long)]
    pub input_side: Option<usize>,
    #[arg(long, default_value_t = 30.0)]
    pub perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Per-fold report CSVs.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// Comma-separated dataset modality names, in channel order.
    #[arg(long, default_value = "T1W,T1WC,T2W,FLAIR")]
    pub modalities: String,
    /// Markdown output with per-fold and pooled tables.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV with the per-fold rows followed by the pooled rows.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReproArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON overriding fields of the toy run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Provenance of one run: enough to re-execute it and check its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub subcommand: String,
    pub resolved_config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub data_checksum: Option<String>,
    pub checkpoints: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
    /// Artifact path → SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// SHA-256 over every file of a dataset directory in sorted order.
pub fn dataset_checksum(root: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for dir in list_subjects(root)? {
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            hasher.update(f.strip_prefix(root).unwrap_or(&f).to_string_lossy().as_bytes());
            hasher.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
        }
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
    } else if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    }
    Ok(())
}

struct ManifestBuilder {
    manifest: RunManifest,
}

impl ManifestBuilder {
    fn start(argv: &[String], subcommand: &str) -> Self {
        Self {
            manifest: RunManifest {
                command_line: argv.to_vec(),
                subcommand: subcommand.to_string(),
                resolved_config: serde_json::Value::Null,
                seeds: BTreeMap::new(),
                data_checksum: None,
                checkpoints: Vec::new(),
                started_at: chrono::Utc::now().to_rfc3339(),
                finished_at: String::new(),
                artifacts: BTreeMap::new(),
            },
        }
    }

    fn artifacts(&mut self, paths: &[PathBuf], base: &Path) -> Result<()> {
        let mut files = Vec::new();
        for p in paths {
            collect_files(p, &mut files)?;
        }
        for f in files {
            let key = f.strip_prefix(base).unwrap_or(&f).to_string_lossy().into_owned();
            self.manifest.artifacts.insert(key, sha256_file(&f)?);
        }
        Ok(())
    }

    fn finish(mut self, path: &Path) -> Result<()> {
        self.manifest.finished_at = chrono::Utc::now().to_rfc3339();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, serde_json::to_vec_pretty(&self.manifest)?).map_err(|e| Error::io(path, e))
    }
}

/// Fold assignment written next to trained models and checked by `eval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitRecord {
    fold: usize,
    split: FoldSplit,
    train_ids: Vec<String>,
}

fn load_data(dir: &Path) -> Result<Vec<Subject>> {
    let subjects = load_dataset(dir)?;
    if subjects.is_empty() {
        return Err(Error::invalid(format!("no subjects found in {}", dir.display())));
    }
    prepare(subjects)
}

fn folds_for(subjects: &[Subject], cfg: &ExperimentConfig) -> Result<FoldSplit> {
    let ids: Vec<String> = subjects.iter().map(|s| s.id().to_string()).collect();
    make_folds(&ids, cfg.folds, cfg.fold_seed)
}

fn parse_subsets(list: &str, names: &[String]) -> Result<Vec<ModalityMask>> {
    if list.trim() == "all" {
        return Ok(enumerate_subsets(names.len()));
    }
    list.split(',').map(|s| ModalityMask::parse(s.trim(), names)).collect()
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let subjects = generate_phantoms(a.seed, a.subjects, a.side, a.modalities)?;
    save_dataset(&a.out, &subjects)?;
    log::info!("wrote {} subjects to {}", subjects.len(), a.out.display());
    Ok(())
}

fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    let suffixes: Vec<(String, String)> = if a.modalities.is_empty() {
        default_brats_suffixes()
    } else {
        a.modalities
            .split(',')
            .map(|pair| {
                pair.split_once(':')
                    .map(|(s, n)| (s.trim().to_string(), n.trim().to_string()))
                    .ok_or_else(|| Error::invalid(format!("modality '{pair}' is not suffix:NAME")))
            })
            .collect::<Result<_>>()?
    };
    let subjects = ingest_brats(&a.root, &suffixes)?;
    save_dataset(&a.out, &subjects)?;
    log::info!("ingested {} subjects into {}", subjects.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let mut manifest = ManifestBuilder::start(argv, "train");
    let cfg = a.config.load()?;
    let variant = Variant::from_flags(&a.arch, a.pretrain, a.dedicated.is_some())?;
    let subjects = load_data(&a.data)?;
    let split = folds_for(&subjects, &cfg)?;
    let (train_set, _) = split_fold(&subjects, &split, a.fold)?;
    let names = subjects[0].volume.modality_names.clone();
    let subsets = match &a.dedicated {
        Some(list) => parse_subsets(list, &names)?,
        None => Vec::new(),
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let record = SplitRecord {
        fold: a.fold,
        train_ids: split.train_ids(a.fold)?,
        split,
    };
    let split_path = a.out.join("split.json");
    fs::write(&split_path, serde_json::to_vec_pretty(&record)?).map_err(|e| Error::io(&split_path, e))?;

    let models = train_variant(variant, &train_set, &cfg, a.seed, Some(&a.out), None, &subsets)?;
    let m = &mut manifest.manifest;
    m.resolved_config = serde_json::to_value(&cfg)?;
    m.seeds.insert("seed".into(), a.seed);
    m.seeds.insert("fold_seed".into(), cfg.fold_seed);
    m.data_checksum = Some(dataset_checksum(&a.data)?);
    m.checkpoints = models.iter().filter_map(|t| t.checkpoint.as_ref().map(|p| p.display().to_string())).collect();
    manifest.artifacts(&[a.out.join(variant.slug()), split_path], &a.out)?;
    manifest.finish(&a.out.join(format!("{}.manifest.json", variant.slug())))
}

/// Training ids recorded by `train` at or above `dir`.
fn recorded_training_ids(dir: &Path) -> Result<Option<BTreeSet<String>>> {
    let mut cur = Some(dir);
    while let Some(d) = cur {
        let p = d.join("split.json");
        if p.exists() {
            let record: SplitRecord = serde_json::from_slice(&fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
            return Ok(Some(record.train_ids.into_iter().collect()));
        }
        cur = d.parent();
    }
    Ok(None)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn cmd_eval(a: &EvalArgs, argv: &[String]) -> Result<()> {
    let mut manifest = ManifestBuilder::start(argv, "eval");
    let cfg = a.config.load()?;
    let subjects = load_data(&a.data)?;
    let split = folds_for(&subjects, &cfg)?;
    let (_, test) = split_fold(&subjects, &split, a.fold)?;
    let training_ids = match recorded_training_ids(&a.model_dir)? {
        Some(ids) => ids,
        None => split.train_ids(a.fold)?.into_iter().collect(),
    };
    let names = subjects[0].volume.modality_names.clone();
    let subsets = parse_subsets(&a.subsets, &names)?;
    let dirs = find_checkpoints(&a.model_dir)?;
    if dirs.is_empty() {
        return Err(Error::Checkpoint(format!("no checkpoints below {}", a.model_dir.display())));
    }
    let mut models = dirs.iter().map(|d| load_trained(d)).collect::<Result<Vec<_>>>()?;
    let depth = models[0].model.config().depth;
    let side = match (a.input_side, &a.config.config) {
        (Some(s), _) => s,
        (None, Some(_)) => cfg.eval_input_side,
        (None, None) => input_for_output(20, depth)?.0,
    };
    let report = evaluate_models(&mut models, &test, &subsets, &training_ids, side, FoldId::Fold(a.fold), a.seed)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    emit_report(std::slice::from_ref(&report), &a.out, ReportFormat::Csv)?;
    let md = sibling(&a.out, ".md");
    emit_report(std::slice::from_ref(&report), &md, ReportFormat::Markdown)?;
    println!("{} rows written to {}", report.rows.len(), a.out.display());

    let m = &mut manifest.manifest;
    m.resolved_config = serde_json::json!({ "experiment": cfg, "eval_input_side": side, "subsets": a.subsets });
    m.seeds.insert("seed".into(), a.seed);
    m.seeds.insert("fold_seed".into(), cfg.fold_seed);
    m.data_checksum = Some(dataset_checksum(&a.data)?);
    m.checkpoints = dirs.iter().map(|d| d.display().to_string()).collect();
    let base = a.out.parent().unwrap_or(Path::new("")).to_path_buf();
    manifest.artifacts(&[a.out.clone(), md], &base)?;
    manifest.finish(&sibling(&a.out, ".manifest.json"))
}

fn cmd_visualize(a: &VisualizeArgs, argv: &[String]) -> Result<()> {
    let mut manifest = ManifestBuilder::start(argv, "visualize");
    let cfg = a.config.load()?;
    let subjects = load_data(&a.data)?;
    let split = folds_for(&subjects, &cfg)?;
    let (_, test) = split_fold(&subjects, &split, a.fold)?;
    let dirs = find_checkpoints(&a.model_dir)?;
    let dir = match dirs.as_slice() {
        [one] => one.clone(),
        [] => return Err(Error::Checkpoint(format!("no checkpoint below {}", a.model_dir.display()))),
        _ => return Err(Error::invalid(format!("{} holds several checkpoints; point --model-dir at one", a.model_dir.display()))),
    };
    let mut trained = load_trained(&dir)?;
    let names = test[0].volume.modality_names.clone();
    let masks: Vec<ModalityMask> = a.masks.split(',').map(|s| ModalityMask::parse(s.trim(), &names)).collect::<Result<_>>()?;
    let depth = trained.model.config().depth;
    let side = match (a.input_side, &a.config.config) {
        (Some(s), _) => s,
        (None, Some(_)) => cfg.train.input_side,
        (None, None) => input_for_output(20, depth)?.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let samples = extract_features(&mut trained.model, &test, &mut rng, a.n_patches, a.n_voxels, &masks, side, &names)?;
    let features: Vec<Vec<f32>> = samples.iter().map(|s| s.feature.clone()).collect();
    let tsne_cfg = TsneConfig {
        perplexity: a.perplexity,
        iterations: a.iterations,
        seed: a.seed,
        ..TsneConfig::default()
    };
    let tsne = compute_tsne(&features, &tsne_cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut outputs = vec![a.out.join("embedding.csv")];
    write_embedding_csv(&outputs[0], &tsne.points, &samples)?;
    for h in [Highlight::PredictedLabel, Highlight::TrueLabel, Highlight::MaskName] {
        let png = a.out.join(format!("{}.png", h.key()));
        render_scatter(&tsne.points, &samples, h, &png)?;
        outputs.push(png);
    }
    let labels: Vec<String> = samples.iter().map(|s| s.mask_name.clone()).collect();
    let meta = serde_json::json!({
        "model": trained.name,
        "perplexity": tsne_cfg.perplexity,
        "iterations": tsne_cfg.iterations,
        "seed": tsne_cfg.seed,
        "method": tsne.method,
        "kl_divergence": tsne.kl_divergence,
        "hidden_width": trained.model.hidden_width(),
        "samples": samples.len(),
        "mask_1nn_accuracy": nearest_neighbor_accuracy(&tsne.points, &labels),
        "mask_chance_rate": majority_rate(&labels),
    });
    let meta_path = a.out.join("meta.json");
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    outputs.push(meta_path);

    let m = &mut manifest.manifest;
    m.resolved_config = serde_json::json!({ "tsne": tsne_cfg, "masks": a.masks, "n_voxels": a.n_voxels, "n_patches": a.n_patches, "input_side": side });
    m.seeds.insert("seed".into(), a.seed);
    m.data_checksum = Some(dataset_checksum(&a.data)?);
    m.checkpoints = vec![dir.display().to_string()];
    manifest.artifacts(&outputs, &a.out)?;
    manifest.finish(&a.out.join("manifest.json"))
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let names: Vec<String> = a.modalities.split(',').map(|s| s.trim().to_string()).collect();
    let mut reports: Vec<DiceReport> = Vec::new();
    for p in &a.inputs {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        reports.extend(parse_report_csv(&text, &names)?);
    }
    if reports.is_empty() {
        return Err(Error::invalid("input reports contain no rows"));
    }
    let per_fold: Vec<DiceReport> = reports.iter().filter(|r| r.fold != FoldId::Pooled).cloned().collect();
    let mut all = reports.clone();
    if per_fold.len() > 1 {
        all.push(pool_reports(&per_fold)?);
    }
    emit_report(&all, &a.out, ReportFormat::Markdown)?;
    if let Some(csv) = &a.csv {
        emit_report(&all, csv, ReportFormat::Csv)?;
    }
    Ok(())
}

fn cmd_repro(a: &ReproArgs, argv: &[String]) -> Result<()> {
    let mut manifest = ManifestBuilder::start(argv, "repro-toy");
    let mut run = ToyRun::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut merged = serde_json::to_value(&run)?;
        merge_json(&mut merged, serde_json::from_str(&text)?);
        run = serde_json::from_value(merged)?;
    }
    run.seed = a.seed;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let outcome = run_toy(&run, Some(&a.out))?;
    for (model, acc, chance) in &outcome.mask_separation {
        println!("{model}: mask 1-NN accuracy {acc:.3} (chance {chance:.3})");
    }
    println!("{} report rows written to {}", outcome.report.rows.len(), a.out.join("report.csv").display());
    let m = &mut manifest.manifest;
    m.resolved_config = serde_json::to_value(&run)?;
    m.seeds.insert("seed".into(), run.seed);
    m.data_checksum = Some(dataset_checksum(&a.out.join("data"))?);
    m.checkpoints = outcome.models.iter().filter_map(|t| t.checkpoint.as_ref().map(|p| p.display().to_string())).collect();
    manifest.artifacts(&outcome.artifacts, &a.out)?;
    manifest.finish(&a.out.join("manifest.json"))
}

impl Error {
    fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::MissingModality { .. } => "missing_modality",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidInputSize { .. } => "invalid_input_size",
            Error::ZeroVariance { .. } => "zero_variance",
            Error::EmptyMask => "empty_mask",
            Error::MaskArity { .. } => "mask_arity",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Leakage(_) => "leakage",
            Error::Nifti { .. } => "nifti",
            Error::FrozenParameterChanged(_) => "frozen_parameter_changed",
            Error::Checkpoint(_) => "checkpoint",
            Error::InvalidArgument(_) => "invalid_argument",
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 runtime failure, 2 usage error.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    let argv: Vec<String> = argv.iter().map(|s| s.to_string_lossy().into_owned()).collect();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Train(a) => cmd_train(a, &argv),
        Command::Eval(a) => cmd_eval(a, &argv),
        Command::Visualize(a) => cmd_visualize(a, &argv),
        Command::Report(a) => cmd_report(a),
        Command::ReproToy(a) => cmd_repro(a, &argv),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "status": "error", "kind": e.kind(), "message": e.to_string() }));
            1
        }
    }
}
