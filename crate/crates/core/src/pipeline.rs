//! Model variants, experiment configuration and the end-to-end toy run
//! shared by the command line and the acceptance suite.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate_phantoms, make_folds, normalize, save_dataset, FoldSplit, Subject};
use crate::embedding::{compute_tsne, extract_features, majority_rate, nearest_neighbor_accuracy, render_scatter, write_embedding_csv, Highlight, TsneConfig};
use crate::evaluation::{emit_report, evaluate_subsets, merge_reports, DiceReport, EvalContext, FoldId, ReportFormat};
use crate::missingness::{enumerate_subsets, DropoutSchedule, ModalityMask};
use crate::nets::checkpoint::load_checkpoint;
use crate::nets::{build_model, FusionMode, Model, NetworkConfig, Upsample};
use crate::training::{assemble_and_finetune, derive_seed, pretrain_paths, train, train_dedicated, PretrainPlan, RunOutput, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Unet,
    Dropout,
    Multipath,
    SharedRep,
    MultipathPretrained,
    SharedRepPretrained,
    Dedicated,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Unet,
        Variant::Dropout,
        Variant::Multipath,
        Variant::SharedRep,
        Variant::MultipathPretrained,
        Variant::SharedRepPretrained,
        Variant::Dedicated,
    ];

    /// Row label in reports.
    pub fn name(self) -> &'static str {
        match self {
            Variant::Unet => "UNet",
            Variant::Dropout => "Dropout",
            Variant::Multipath => "Multipath",
            Variant::SharedRep => "SharedRep",
            Variant::MultipathPretrained => "Multipath + Pretraining",
            Variant::SharedRepPretrained => "SharedRep + Pretraining",
            Variant::Dedicated => "Dedicated",
        }
    }

    /// Directory name.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::Dropout => "dropout",
            Variant::Multipath => "multipath",
            Variant::SharedRep => "sharedrep",
            Variant::MultipathPretrained => "multipath_pretrained",
            Variant::SharedRepPretrained => "sharedrep_pretrained",
            Variant::Dedicated => "dedicated",
        }
    }

    /// Maps the `train` flags onto a variant.
    pub fn from_flags(arch: &str, pretrain: bool, dedicated: bool) -> Result<Self> {
        let v = match (arch, pretrain) {
            ("unet", false) if dedicated => Variant::Dedicated,
            ("unet", false) => Variant::Unet,
            ("dropout", false) => Variant::Dropout,
            ("multipath", false) => Variant::Multipath,
            ("sharedrep", false) => Variant::SharedRep,
            ("multipath", true) => Variant::MultipathPretrained,
            ("sharedrep", true) => Variant::SharedRepPretrained,
            ("unet" | "dropout", true) => return Err(Error::invalid(format!("--pretrain applies to multipath architectures, not {arch}"))),
            _ => return Err(Error::invalid(format!("unknown architecture '{arch}'"))),
        };
        if dedicated && v != Variant::Dedicated {
            return Err(Error::invalid("--dedicated trains plain UNets; use it with --arch unet"));
        }
        Ok(v)
    }

    pub fn is_pretrained(self) -> bool {
        matches!(self, Variant::MultipathPretrained | Variant::SharedRepPretrained)
    }
}

/// Everything a training run needs besides data and seed. Mirrors the JSON
/// accepted by `train --config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Width c of single UNets.
    pub base_width: usize,
    /// Width of each multipath pathway.
    pub pathway_width: usize,
    pub depth: usize,
    pub upsample: Upsample,
    pub train: TrainConfig,
    /// Curriculum used by the dropout and jointly trained multipath
    /// variants.
    pub dropout_schedule: DropoutSchedule,
    pub pretrain: PretrainPlan,
    /// Input side of the evaluation tiles.
    pub eval_input_side: usize,
    pub folds: usize,
    pub fold_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            pathway_width: 16,
            depth: 4,
            upsample: Upsample::Trilinear,
            train: TrainConfig::default(),
            dropout_schedule: DropoutSchedule::default(),
            pretrain: PretrainPlan::default(),
            eval_input_side: 108,
            folds: 5,
            fold_seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale configuration for phantoms: c=4, depth 3, 15 epochs with
    /// the curriculum compressed to the shorter run.
    pub fn toy() -> Self {
        Self {
            base_width: 4,
            pathway_width: 2,
            depth: 3,
            upsample: Upsample::Trilinear,
            train: TrainConfig {
                epochs: 15,
                batches_per_epoch: 10,
                batch_size: 4,
                adam: crate::training::AdamConfig {
                    learning_rate: 3e-3,
                    ..Default::default()
                },
                dropout_schedule: None,
                seed: 0,
                input_side: 52,
                checkpoint_every: 5,
            },
            dropout_schedule: DropoutSchedule {
                p_initial: 0.125,
                doubling_period: 5,
                p_max: 0.5,
            },
            pretrain: PretrainPlan {
                path_epochs: 15,
                path_learning_rate: Some(1e-2),
                fusion_epochs: 30,
                ..PretrainPlan::default()
            },
            eval_input_side: 92,
            folds: 5,
            fold_seed: 0,
        }
    }

    pub fn network(&self, variant: Variant, num_modalities: usize) -> NetworkConfig {
        let mut config = match variant {
            Variant::Unet | Variant::Dropout | Variant::Dedicated => NetworkConfig::unet(num_modalities, self.base_width, self.depth),
            Variant::Multipath | Variant::MultipathPretrained => NetworkConfig::multipath(FusionMode::Concat, num_modalities, self.pathway_width, self.depth),
            Variant::SharedRep | Variant::SharedRepPretrained => NetworkConfig::multipath(FusionMode::MeanVar, num_modalities, self.pathway_width, self.depth),
        };
        config.upsample = self.upsample;
        config
    }
}

/// A trained model with the metadata evaluation needs.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub name: String,
    pub model: Model,
    pub input_modalities: Vec<String>,
    pub checkpoint: Option<PathBuf>,
}

fn variant_index(v: Variant) -> u64 {
    Variant::ALL.iter().position(|&x| x == v).unwrap() as u64
}

/// Pathway pretraining shared by both pretrained variants. Pathways are
/// pretrained with concatenation-sized heads; the shared-representation
/// variant replaces its heads anyway.
pub fn pretrain_shared_paths(data: &[Subject], cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<Vec<Model>> {
    let template = cfg.network(Variant::MultipathPretrained, data[0].volume.num_modalities());
    let train_cfg = TrainConfig {
        seed: derive_seed(seed, 1000),
        ..cfg.train.clone()
    };
    Ok(pretrain_paths(data, &train_cfg, &cfg.pretrain, &template, template.pathway_head_width_factor, out, false)?
        .into_iter()
        .map(|(m, _)| m)
        .collect())
}

/// Trains one variant on `data`. Dedicated training yields one model per
/// entry of `dedicated_subsets`; pretrained variants reuse `paths` when
/// given.
pub fn train_variant(
    variant: Variant,
    data: &[Subject],
    cfg: &ExperimentConfig,
    seed: u64,
    out: Option<&Path>,
    paths: Option<&[Model]>,
    dedicated_subsets: &[ModalityMask],
) -> Result<Vec<TrainedModel>> {
    let first = data.first().ok_or_else(|| Error::invalid("training set is empty"))?;
    let names = first.volume.modality_names.clone();
    let m = names.len();
    let vseed = derive_seed(seed, 100 + variant_index(variant));
    let init_seed = derive_seed(vseed, 0);
    let train_cfg = TrainConfig {
        seed: derive_seed(vseed, 1),
        ..cfg.train.clone()
    };
    let dir = out.map(|o| o.join(variant.slug()));
    let output = |dir: Option<PathBuf>, inputs: Vec<String>| {
        dir.map(|d| RunOutput {
            dir: d,
            model_name: variant.name().to_string(),
            input_modalities: inputs,
            init_seed,
        })
    };
    let finish = |model: Model, inputs: Vec<String>, run: Option<RunOutput>| TrainedModel {
        name: variant.name().to_string(),
        model,
        input_modalities: inputs,
        checkpoint: run.map(|r| r.dir.join("final")),
    };
    match variant {
        Variant::Unet | Variant::Dropout | Variant::Multipath | Variant::SharedRep => {
            let mut model = build_model(&cfg.network(variant, m), init_seed)?;
            let train_cfg = TrainConfig {
                dropout_schedule: (variant != Variant::Unet).then_some(cfg.dropout_schedule),
                ..train_cfg
            };
            let run = output(dir, names.clone());
            train(&mut model, data, &train_cfg, run.as_ref())?;
            Ok(vec![finish(model, names, run)])
        }
        Variant::MultipathPretrained | Variant::SharedRepPretrained => {
            let owned;
            let paths = match paths {
                Some(p) => p,
                None => {
                    owned = pretrain_shared_paths(data, cfg, seed, dir.as_deref().map(|d| d.join("paths")).as_deref())?;
                    &owned
                }
            };
            let mode = if variant == Variant::MultipathPretrained { FusionMode::Concat } else { FusionMode::MeanVar };
            let plan = PretrainPlan {
                replace_pathway_heads: mode == FusionMode::MeanVar,
                ..cfg.pretrain.clone()
            };
            let run = output(dir, names.clone());
            let (model, _) = assemble_and_finetune(paths, data, &train_cfg, &plan, mode, init_seed, run.as_ref())?;
            Ok(vec![finish(model, names, run)])
        }
        Variant::Dedicated => dedicated_subsets
            .iter()
            .enumerate()
            .map(|(i, subset)| {
                let inputs: Vec<String> = subset.present_indices().iter().map(|&c| names[c].clone()).collect();
                let run = output(dir.as_ref().map(|d| d.join(subset.name(&names))), inputs.clone());
                let cfg_i = TrainConfig {
                    seed: derive_seed(train_cfg.seed, i as u64),
                    ..train_cfg.clone()
                };
                let (model, _) = train_dedicated(data, subset, &cfg.network(variant, m), &cfg_i, derive_seed(init_seed, i as u64), run.as_ref())?;
                Ok(finish(model, inputs, run))
            })
            .collect(),
    }
}

/// Normalizes every subject.
pub fn prepare(subjects: Vec<Subject>) -> Result<Vec<Subject>> {
    subjects
        .into_iter()
        .map(|s| Subject::new(normalize(&s.volume)?, s.labels))
        .collect()
}

/// Splits `subjects` into (train, test) for `fold`.
pub fn split_fold(subjects: &[Subject], split: &FoldSplit, fold: usize) -> Result<(Vec<Subject>, Vec<Subject>)> {
    let test_ids: BTreeSet<&str> = split.test_ids(fold)?.iter().map(String::as_str).collect();
    let (test, train): (Vec<Subject>, Vec<Subject>) = subjects.iter().cloned().partition(|s| test_ids.contains(s.id()));
    Ok((train, test))
}

/// Evaluates trained models on the test set and merges their rows.
pub fn evaluate_models(
    models: &mut [TrainedModel],
    test: &[Subject],
    subsets: &[ModalityMask],
    training_ids: &BTreeSet<String>,
    eval_input_side: usize,
    fold: FoldId,
    seed: u64,
) -> Result<DiceReport> {
    let reports = models
        .iter_mut()
        .map(|tm| {
            let ctx = EvalContext {
                model_name: tm.name.clone(),
                input_modalities: tm.input_modalities.clone(),
                training_ids: training_ids.clone(),
                input_side: eval_input_side,
                fold,
                seed,
                own_subset_only: tm.name == Variant::Dedicated.name(),
            };
            evaluate_subsets(&mut tm.model, test, subsets, &ctx)
        })
        .collect::<Result<Vec<_>>>()?;
    merge_reports(&reports)
}

/// Every checkpoint directory (holding `config.json`) at or below `dir`,
/// preferring `final/` over intermediate epochs, sorted by path.
pub fn find_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("config.json").exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    if dir.join("final").join("config.json").exists() {
        return Ok(vec![dir.join("final")]);
    }
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n != "paths"))
        .collect();
    entries.sort();
    for e in entries {
        out.extend(find_checkpoints(&e)?);
    }
    Ok(out)
}

pub fn load_trained(dir: &Path) -> Result<TrainedModel> {
    let (model, meta) = load_checkpoint(dir)?;
    Ok(TrainedModel {
        name: meta.model_name,
        model,
        input_modalities: meta.input_modalities,
        checkpoint: Some(dir.to_path_buf()),
    })
}

/// Parameters of the one-command toy pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyRun {
    pub experiment: ExperimentConfig,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub side: usize,
    pub num_modalities: usize,
    pub variants: Vec<Variant>,
    /// Subsets evaluated; `None` means all 2^M - 1.
    pub subsets: Option<Vec<Vec<usize>>>,
    /// Total t-SNE samples (0 skips the visualization).
    pub tsne_voxels: usize,
    pub tsne_patches: usize,
    pub tsne_iterations: usize,
}

impl Default for ToyRun {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::toy(),
            seed: 0,
            n_train: 20,
            n_test: 5,
            side: 48,
            num_modalities: 4,
            variants: Variant::ALL.to_vec(),
            subsets: None,
            tsne_voxels: 1000,
            tsne_patches: 4,
            tsne_iterations: 1000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub report: DiceReport,
    pub models: Vec<TrainedModel>,
    pub artifacts: Vec<PathBuf>,
    /// Leave-one-out 1-NN accuracy of the mask name in each embedding,
    /// with the majority-class rate as chance level.
    pub mask_separation: Vec<(String, f64, f64)>,
}

/// Phantoms → fold split → training of every variant → evaluation →
/// reports → embeddings. Artifacts go below `out` when given.
pub fn run_toy(run: &ToyRun, out: Option<&Path>) -> Result<ToyOutcome> {
    let total = run.n_train + run.n_test;
    if run.n_test == 0 || total % run.n_test != 0 {
        return Err(Error::invalid(format!("{} subjects cannot be split into folds of {}", total, run.n_test)));
    }
    let raw = generate_phantoms(derive_seed(run.seed, 1), total, run.side, run.num_modalities)?;
    let mut artifacts = Vec::new();
    if let Some(out) = out {
        let data_dir = out.join("data");
        save_dataset(&data_dir, &raw)?;
    }
    let subjects = prepare(raw)?;
    let ids: Vec<String> = subjects.iter().map(|s| s.id().to_string()).collect();
    let split = make_folds(&ids, total / run.n_test, run.experiment.fold_seed)?;
    let (train_set, test_set) = split_fold(&subjects, &split, 0)?;
    let training_ids: BTreeSet<String> = train_set.iter().map(|s| s.id().to_string()).collect();
    let m = run.num_modalities;
    let subsets: Vec<ModalityMask> = match &run.subsets {
        Some(list) => list.iter().map(|idx| ModalityMask::from_indices(m, idx)).collect::<Result<_>>()?,
        None => enumerate_subsets(m),
    };
    let models_dir = out.map(|o| o.join("models"));

    let needs_paths = run.variants.iter().any(|v| v.is_pretrained());
    let paths = if needs_paths {
        Some(pretrain_shared_paths(&train_set, &run.experiment, run.seed, models_dir.as_deref().map(|d| d.join("paths")).as_deref())?)
    } else {
        None
    };
    let mut models = Vec::new();
    for &variant in &run.variants {
        log::info!("training {}", variant.name());
        models.extend(train_variant(variant, &train_set, &run.experiment, run.seed, models_dir.as_deref(), paths.as_deref(), &subsets)?);
    }
    let report = evaluate_models(&mut models, &test_set, &subsets, &training_ids, run.experiment.eval_input_side, FoldId::Fold(0), run.seed)?;

    let mut mask_separation = Vec::new();
    if let Some(out) = out {
        let csv = out.join("report.csv");
        emit_report(std::slice::from_ref(&report), &csv, ReportFormat::Csv)?;
        let md = out.join("report.md");
        emit_report(std::slice::from_ref(&report), &md, ReportFormat::Markdown)?;
        artifacts.extend([csv, md]);
    }
    if run.tsne_voxels > 0 {
        let names = test_set[0].volume.modality_names.clone();
        let mut masks = vec![ModalityMask::all(m)];
        masks.extend((0..m).map(|i| ModalityMask::from_indices(m, &[i]).expect("index in range")));
        let per_mask = run.tsne_voxels / masks.len();
        for tm in models.iter_mut().filter(|tm| tm.name == Variant::MultipathPretrained.name() || tm.name == Variant::SharedRepPretrained.name()) {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, 7));
            let samples = extract_features(&mut tm.model, &test_set, &mut rng, run.tsne_patches, per_mask * masks.len(), &masks, run.experiment.train.input_side, &names)?;
            let features: Vec<Vec<f32>> = samples.iter().map(|s| s.feature.clone()).collect();
            let tsne_cfg = TsneConfig {
                iterations: run.tsne_iterations,
                seed: run.seed,
                ..TsneConfig::default()
            };
            let tsne = compute_tsne(&features, &tsne_cfg)?;
            let labels: Vec<String> = samples.iter().map(|s| s.mask_name.clone()).collect();
            let acc = nearest_neighbor_accuracy(&tsne.points, &labels);
            let chance = majority_rate(&labels);
            mask_separation.push((tm.name.clone(), acc, chance));
            if let Some(out) = out {
                let dir = out.join("embedding").join(slug_of(&tm.name));
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let csv = dir.join("embedding.csv");
                write_embedding_csv(&csv, &tsne.points, &samples)?;
                artifacts.push(csv);
                for h in [Highlight::PredictedLabel, Highlight::TrueLabel, Highlight::MaskName] {
                    let png = dir.join(format!("{}.png", h.key()));
                    render_scatter(&tsne.points, &samples, h, &png)?;
                    artifacts.push(png);
                }
                let meta = serde_json::json!({
                    "model": tm.name,
                    "perplexity": tsne_cfg.perplexity,
                    "iterations": tsne_cfg.iterations,
                    "seed": tsne_cfg.seed,
                    "method": tsne.method,
                    "kl_divergence": tsne.kl_divergence,
                    "hidden_width": tm.model.hidden_width(),
                    "samples": samples.len(),
                    "mask_1nn_accuracy": acc,
                    "mask_chance_rate": chance,
                });
                let meta_path = dir.join("meta.json");
                fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
                artifacts.push(meta_path);
            }
        }
    }
    Ok(ToyOutcome {
        report,
        models,
        artifacts,
        mask_separation,
    })
}

fn slug_of(name: &str) -> String {
    Variant::ALL
        .iter()
        .find(|v| v.name() == name)
        .map(|v| v.slug().to_string())
        .unwrap_or_else(|| name.to_lowercase().replace(|c: char| !c.is_ascii_alphanumeric(), "_"))
}
