//! Training loops: joint training with optional modality dropout, pathway
//! pretraining, frozen-path fusion fine-tuning and dedicated per-subset
//! models.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{label_to_class, sample_patch, select_modalities, Subject};
use crate::missingness::{sample_mask, schedule_p, DropoutSchedule, ModalityMask};
use crate::nets::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::nets::{build_model, ops, output_size, FusionMode, Mode, Model, NetworkConfig, NetworkKind, ParamKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub dropout_schedule: Option<DropoutSchedule>,
    pub seed: u64,
    /// Side of the cubic input patches.
    pub input_side: usize,
    /// Write a checkpoint every this many epochs (0 disables intermediate
    /// checkpoints; the final one is always written).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batches_per_epoch: 100,
            batch_size: 4,
            adam: AdamConfig::default(),
            dropout_schedule: None,
            seed: 0,
            input_side: 108,
            checkpoint_every: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainPlan {
    pub path_epochs: usize,
    /// Learning rate of the pathway stage; `None` keeps the training rate.
    pub path_learning_rate: Option<f32>,
    pub fusion_epochs: usize,
    pub fusion_dropout_p: f64,
    pub freeze_paths: bool,
    pub replace_pathway_heads: bool,
}

impl Default for PretrainPlan {
    fn default() -> Self {
        Self::for_fusion(FusionMode::Concat)
    }
}

impl PretrainPlan {
    pub fn for_fusion(mode: FusionMode) -> Self {
        Self {
            path_epochs: 100,
            path_learning_rate: None,
            fusion_epochs: 100,
            fusion_dropout_p: 0.5,
            freeze_paths: true,
            replace_pathway_heads: mode == FusionMode::MeanVar,
        }
    }
}

/// Adam with per-parameter moment buffers keyed by parameter name. Frozen
/// parameters and running statistics are skipped.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: i32,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut Model) {
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step);
        let bias2 = 1.0 - c.beta2.powi(self.step);
        for (name, p) in model.params_mut() {
            if p.kind != ParamKind::Weight || !p.trainable {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p.value[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Dropout probability in effect, 0 without a schedule.
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub patches_consumed: usize,
    pub checkpoints: Vec<PathBuf>,
}

/// Where and under which name a run stores its artifacts.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub model_name: String,
    pub input_modalities: Vec<String>,
    /// Seed the model was initialized with.
    pub init_seed: u64,
}

impl RunOutput {
    fn meta(&self, model: &Model, epoch: usize) -> CheckpointMeta {
        CheckpointMeta {
            network: model.config().clone(),
            seed: self.init_seed,
            epoch,
            model_name: self.model_name.clone(),
            input_modalities: self.input_modalities.clone(),
        }
    }
}

pub fn write_loss_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,mean_loss,p\n");
    for r in history {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.mean_loss, r.p));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn check_dataset(model: &Model, data: &[Subject], cfg: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let m = model.config().num_modalities;
    for s in data {
        if s.volume.num_modalities() != m {
            return Err(Error::ShapeMismatch {
                subject: s.id().to_string(),
                detail: format!("{} modalities, model expects {m}", s.volume.num_modalities()),
            });
        }
    }
    if cfg.batch_size == 0 || cfg.batches_per_epoch == 0 {
        return Err(Error::invalid("batch size and batches per epoch must be positive"));
    }
    output_size(cfg.input_side, model.config().depth)?;
    Ok(())
}

/// Trains `model` in place. Each batch draws `batch_size` patches from
/// random subjects; with a dropout schedule one mask per batch is drawn at
/// `p = schedule_p(epoch)` and applied at the model's masking point.
pub fn train(model: &mut Model, data: &[Subject], cfg: &TrainConfig, output: Option<&RunOutput>) -> Result<TrainOutcome> {
    check_dataset(model, data, cfg)?;
    let m = model.config().num_modalities;
    let depth = model.config().depth;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::new();
    let mut consumed = 0usize;
    if let Some(out) = output {
        fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    }

    for epoch in 0..cfg.epochs {
        let p = cfg.dropout_schedule.as_ref().map(|s| schedule_p(epoch, s));
        let mut loss_sum = 0.0f64;
        for batch in 0..cfg.batches_per_epoch {
            let mut inputs = Vec::with_capacity(cfg.batch_size);
            let mut targets = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let subject = &data[rng.random_range(0..data.len())];
                let patch = sample_patch(subject, &mut rng, cfg.input_side, depth)?;
                targets.push(patch.target.iter().map(|&l| label_to_class(l) as u8).collect::<Vec<u8>>());
                inputs.push(patch.input);
            }
            consumed += cfg.batch_size;
            let mask = match p {
                Some(p) => sample_mask(&mut rng, p, m)?,
                None => ModalityMask::all(m),
            };
            model.zero_grad();
            let fwd = model.forward(&inputs, &mask, Mode::Train)?;
            let (loss, dlogits) = ops::softmax_cross_entropy(&fwd.logits, &targets);
            if !loss.is_finite() {
                model.clear_cache();
                return Err(Error::NonFiniteLoss { epoch, batch, loss });
            }
            model.backward(dlogits)?;
            adam.step(model);
            loss_sum += loss as f64;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / cfg.batches_per_epoch as f64,
            p: p.unwrap_or(0.0),
        };
        log::info!("epoch {epoch}: loss {:.5} p {:.3}", record.mean_loss, record.p);
        history.push(record);
        if let Some(out) = output {
            let last = epoch + 1 == cfg.epochs;
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && !last {
                let dir = out.dir.join(format!("epoch_{:04}", epoch + 1));
                save_checkpoint(&dir, model, &out.meta(model, epoch + 1))?;
                checkpoints.push(dir);
            }
        }
    }
    model.clear_cache();
    if let Some(out) = output {
        let dir = out.dir.join("final");
        save_checkpoint(&dir, model, &out.meta(model, cfg.epochs))?;
        checkpoints.push(dir);
        write_loss_history(&out.dir.join("loss.csv"), &history)?;
    }
    Ok(TrainOutcome {
        history,
        patches_consumed: consumed,
        checkpoints,
    })
}

/// Seed for the `index`-th independent sub-run of a run seeded `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0xD134_2543_DE82_EF95).wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)) ^ 0x5851_F42D
}

/// Pretrains one single-modality UNet of width `pathway_width` per
/// modality, each for `plan.path_epochs` epochs without dropout. The
/// UNet's hidden head has `head_width_factor · pathway_width` maps, so its
/// body is a drop-in pathway. Runs concurrently when `parallel`.
pub fn pretrain_paths(
    data: &[Subject],
    cfg: &TrainConfig,
    plan: &PretrainPlan,
    template: &NetworkConfig,
    head_width_factor: usize,
    output: Option<&Path>,
    parallel: bool,
) -> Result<Vec<(Model, TrainOutcome)>> {
    let m = data.first().ok_or_else(|| Error::invalid("training set is empty"))?.volume.num_modalities();
    if m < 2 {
        return Err(Error::invalid("pathway pretraining needs at least two modalities"));
    }
    let run = |i: usize| -> Result<(Model, TrainOutcome)> {
        let subset: Vec<Subject> = data.iter().map(|s| select_modalities(s, &[i])).collect::<Result<_>>()?;
        let mut config = NetworkConfig::unet(1, template.pathway_width, template.depth);
        config.pathway_head_width_factor = head_width_factor;
        config.leaky_slope = template.leaky_slope;
        config.num_labels = template.num_labels;
        config.upsample = template.upsample;
        let init_seed = derive_seed(cfg.seed, 2 * i as u64);
        let mut model = build_model(&config, init_seed)?;
        let path_cfg = TrainConfig {
            epochs: plan.path_epochs,
            adam: AdamConfig {
                learning_rate: plan.path_learning_rate.unwrap_or(cfg.adam.learning_rate),
                ..cfg.adam
            },
            dropout_schedule: None,
            seed: derive_seed(cfg.seed, 2 * i as u64 + 1),
            ..cfg.clone()
        };
        let out = output.map(|dir| RunOutput {
            dir: dir.join(format!("path{i}")),
            model_name: format!("Path {}", data[0].volume.modality_names[i]),
            input_modalities: vec![data[0].volume.modality_names[i].clone()],
            init_seed,
        });
        let outcome = train(&mut model, &subset, &path_cfg, out.as_ref())?;
        Ok((model, outcome))
    };
    if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..m).map(|i| scope.spawn(move || run(i))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("pretraining thread panicked"))
                .collect()
        })
    } else {
        (0..m).map(run).collect()
    }
}

fn frozen_snapshot(model: &Model, replaced_heads: bool) -> Vec<(String, Vec<f32>)> {
    model
        .params()
        .into_iter()
        .filter(|(name, _)| name.starts_with("path") && !(replaced_heads && name.contains(".head.")))
        .map(|(name, p)| (name, p.value.clone()))
        .collect()
}

/// Builds a multipath model from pretrained single-modality UNets, freezes
/// the pathways and trains the fusion and prediction layers at a constant
/// dropout probability. With `plan.replace_pathway_heads` every pathway
/// head is freshly initialized and trained too.
pub fn assemble_and_finetune(
    paths: &[Model],
    data: &[Subject],
    cfg: &TrainConfig,
    plan: &PretrainPlan,
    mode: FusionMode,
    init_seed: u64,
    output: Option<&RunOutput>,
) -> Result<(Model, TrainOutcome)> {
    let first = match paths.first() {
        Some(Model::Single(u)) => u,
        Some(_) => return Err(Error::Checkpoint("pretrained paths must be single UNets".into())),
        None => return Err(Error::invalid("no pretrained paths")),
    };
    let mut config = NetworkConfig::multipath(mode, paths.len(), first.config.base_width, first.config.depth);
    config.leaky_slope = first.config.leaky_slope;
    config.num_labels = first.config.num_labels;
    config.upsample = first.config.upsample;
    let mut model = build_model(&config, init_seed)?;
    let Model::Multipath(mp) = &mut model else { unreachable!() };
    for (i, path) in paths.iter().enumerate() {
        let Model::Single(u) = path else {
            return Err(Error::Checkpoint(format!("path {i} is not a single UNet")));
        };
        let c = &u.config;
        if c.num_modalities != 1 || c.base_width != config.pathway_width || c.depth != config.depth || c.upsample != config.upsample {
            return Err(Error::Checkpoint(format!(
                "path {i} ({} inputs, width {}, depth {}) does not fit a {:?} network of width {}, depth {}",
                c.num_modalities, c.base_width, c.depth, config.kind, config.pathway_width, config.depth
            )));
        }
        mp.paths[i].trunk = u.body.trunk.clone();
        if !plan.replace_pathway_heads {
            if u.body.head.out_ch != config.pathway_feature_width() {
                return Err(Error::Checkpoint(format!(
                    "path {i} head has {} maps, {:?} fusion needs {}",
                    u.body.head.out_ch,
                    config.kind,
                    config.pathway_feature_width()
                )));
            }
            mp.paths[i].head = u.body.head.clone();
        }
    }
    if plan.freeze_paths {
        mp.freeze_paths(plan.replace_pathway_heads);
    }
    let before = plan.freeze_paths.then(|| frozen_snapshot(&model, plan.replace_pathway_heads));
    let fusion_cfg = TrainConfig {
        epochs: plan.fusion_epochs,
        dropout_schedule: Some(DropoutSchedule::constant(plan.fusion_dropout_p)),
        ..cfg.clone()
    };
    let outcome = train(&mut model, data, &fusion_cfg, output)?;
    if let Some(before) = before {
        let after = frozen_snapshot(&model, plan.replace_pathway_heads);
        for ((name, a), (_, b)) in before.iter().zip(&after) {
            if a != b {
                return Err(Error::FrozenParameterChanged(name.clone()));
            }
        }
    }
    Ok((model, outcome))
}

/// Trains a UNet from scratch on exactly the channels of `subset`, without
/// modality dropout.
pub fn train_dedicated(
    data: &[Subject],
    subset: &ModalityMask,
    template: &NetworkConfig,
    cfg: &TrainConfig,
    init_seed: u64,
    output: Option<&RunOutput>,
) -> Result<(Model, TrainOutcome)> {
    if subset.is_empty() {
        return Err(Error::EmptyMask);
    }
    if template.kind != NetworkKind::Single {
        return Err(Error::invalid("dedicated models are single UNets"));
    }
    let channels = subset.present_indices();
    let selected: Vec<Subject> = data.iter().map(|s| select_modalities(s, &channels)).collect::<Result<_>>()?;
    let config = NetworkConfig {
        num_modalities: channels.len(),
        ..template.clone()
    };
    let mut model = build_model(&config, init_seed)?;
    let cfg = TrainConfig {
        dropout_schedule: None,
        ..cfg.clone()
    };
    let outcome = train(&mut model, &selected, &cfg, output)?;
    Ok((model, outcome))
}
