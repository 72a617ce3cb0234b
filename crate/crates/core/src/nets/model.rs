use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fusion::{fuse_concat, fuse_concat_backward, fuse_meanvar, fuse_meanvar_backward, FusionMode};
use super::layers::{Conv, Mode, Param, Params, Pathway};
use super::ops;
use super::tensor::Volume;
use super::{output_size, NetworkConfig};
use crate::missingness::{apply_mask_in_place, ModalityMask};
use crate::{Error, Result};

/// Logits plus the activations of the last hidden 1³ layer.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Vec<Volume>,
    pub hidden: Vec<Volume>,
}

fn check_inputs(xs: &[Volume], config: &NetworkConfig, mask: &ModalityMask) -> Result<()> {
    if mask.original_count() != config.num_modalities {
        return Err(Error::MaskArity {
            expected: config.num_modalities,
            got: mask.original_count(),
        });
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    for x in xs {
        if x.channels != config.num_modalities {
            return Err(Error::invalid(format!(
                "input has {} channels, model expects {}",
                x.channels, config.num_modalities
            )));
        }
        if x.dims[0] != x.dims[1] || x.dims[1] != x.dims[2] {
            return Err(Error::invalid(format!("input patch {:?} is not cubic", x.dims)));
        }
        output_size(x.dims[0], config.depth)?;
    }
    Ok(())
}

/// A single UNet over all input channels. Modality dropout is applied to the
/// input channels.
#[derive(Debug, Clone)]
pub struct UNet {
    pub config: NetworkConfig,
    pub body: Pathway,
    pub logits: Conv,
    cache: Option<Vec<Volume>>,
}

impl UNet {
    pub fn new(config: NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let body = Pathway::new(
            &mut rng,
            config.num_modalities,
            config.base_width,
            config.depth,
            config.hidden_width(),
            config.leaky_slope,
            config.upsample,
        );
        let logits = Conv::new(&mut rng, config.hidden_width(), config.num_labels, 1);
        Self {
            config,
            body,
            logits,
            cache: None,
        }
    }

    fn forward(&mut self, xs: &[Volume], mask: &ModalityMask, mode: Mode) -> Result<Forward> {
        check_inputs(xs, &self.config, mask)?;
        let hidden = if mask.is_full() {
            self.body.forward(xs, mode)
        } else {
            let mut masked = xs.to_vec();
            for x in &mut masked {
                apply_mask_in_place(&mut x.data, mask)?;
            }
            self.body.forward(&masked, mode)
        };
        let logits = hidden.iter().map(|h| self.logits.forward(h)).collect();
        if mode == Mode::Train {
            self.cache = Some(hidden.clone());
        }
        Ok(Forward { logits, hidden })
    }

    fn backward(&mut self, dlogits: Vec<Volume>) {
        let hidden = self.cache.take().expect("backward without a training forward pass");
        let need = self.body.is_trainable();
        let mut dh = Vec::with_capacity(hidden.len());
        for (h, g) in hidden.iter().zip(&dlogits) {
            if let Some(d) = self.logits.backward(h, g, need) {
                dh.push(d);
            }
        }
        if need {
            self.body.backward(dh, false);
        }
    }
}

/// One single-channel pathway per modality, fused after the pathway heads,
/// followed by a 1³ hidden layer (4·width) and the logit layer.
#[derive(Debug, Clone)]
pub struct Multipath {
    pub config: NetworkConfig,
    pub paths: Vec<Pathway>,
    pub hidden: Conv,
    pub logits: Conv,
    cache: Option<MultipathCache>,
}

#[derive(Debug, Clone)]
struct MultipathCache {
    mask: ModalityMask,
    /// `[path][sample]`, empty for absent paths.
    features: Vec<Vec<Volume>>,
    fused: Vec<Volume>,
    hidden: Vec<Volume>,
}

impl Multipath {
    pub fn new(config: NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let paths = (0..config.num_modalities)
            .map(|_| {
                Pathway::new(
                    &mut rng,
                    1,
                    config.pathway_width,
                    config.depth,
                    config.pathway_feature_width(),
                    config.leaky_slope,
                    config.upsample,
                )
            })
            .collect();
        let fused = config.fusion_spec().expect("multipath kind").output_channels();
        let hidden = Conv::new(&mut rng, fused, config.hidden_width(), 1);
        let logits = Conv::new(&mut rng, config.hidden_width(), config.num_labels, 1);
        Self {
            config,
            paths,
            hidden,
            logits,
            cache: None,
        }
    }

    pub fn fusion_mode(&self) -> FusionMode {
        self.config.kind.fusion().expect("multipath kind")
    }

    fn fuse(&self, features: &[&[f32]], mask: &ModalityMask) -> Result<Vec<f32>> {
        match self.fusion_mode() {
            FusionMode::Concat => fuse_concat(features, mask),
            FusionMode::MeanVar => fuse_meanvar(features, mask),
        }
    }

    fn fuse_sample(&self, per_path: &[Option<&Volume>], mask: &ModalityMask) -> Result<Volume> {
        let dims = per_path.iter().flatten().next().ok_or(Error::EmptyMask)?.dims;
        let slices: Vec<&[f32]> = per_path.iter().map(|v| v.map_or(&[][..], |v| &v.data[..])).collect();
        let data = self.fuse(&slices, mask)?;
        let channels = self.config.fusion_spec().unwrap().output_channels();
        Ok(Volume::from_data(channels, dims, data))
    }

    fn head(&self, fused: &Volume) -> (Volume, Volume) {
        let mut h = self.hidden.forward(fused);
        ops::leaky_relu_in_place(&mut h, self.config.leaky_slope);
        let l = self.logits.forward(&h);
        (h, l)
    }

    fn forward(&mut self, xs: &[Volume], mask: &ModalityMask, mode: Mode) -> Result<Forward> {
        check_inputs(xs, &self.config, mask)?;
        let mut features: Vec<Vec<Volume>> = vec![Vec::new(); self.paths.len()];
        for i in mask.present_indices() {
            let inputs: Vec<Volume> = xs.iter().map(|x| x.select_channels(&[i])).collect();
            features[i] = self.paths[i].forward(&inputs, mode);
        }
        let mut fused = Vec::with_capacity(xs.len());
        for s in 0..xs.len() {
            let per: Vec<Option<&Volume>> = features.iter().map(|f| f.get(s)).collect();
            fused.push(self.fuse_sample(&per, mask)?);
        }
        let (hidden, logits): (Vec<_>, Vec<_>) = fused.iter().map(|f| self.head(f)).unzip();
        if mode == Mode::Train {
            self.cache = Some(MultipathCache {
                mask: mask.clone(),
                features,
                fused,
                hidden: hidden.clone(),
            });
        }
        Ok(Forward { logits, hidden })
    }

    fn backward(&mut self, dlogits: Vec<Volume>) -> Result<()> {
        let cache = self.cache.take().expect("backward without a training forward pass");
        let slope = self.config.leaky_slope;
        let need_paths = cache.mask.present_indices().iter().any(|&i| self.paths[i].is_trainable());
        let mode = self.fusion_mode();
        let mut path_grads: Vec<Vec<Volume>> = vec![Vec::new(); self.paths.len()];
        for s in 0..dlogits.len() {
            let mut dh = self
                .logits
                .backward(&cache.hidden[s], &dlogits[s], true)
                .expect("input gradient requested");
            ops::leaky_relu_backward(&cache.hidden[s], &mut dh, slope);
            let Some(dfused) = self.hidden.backward(&cache.fused[s], &dh, need_paths) else {
                continue;
            };
            let grads = match mode {
                FusionMode::Concat => fuse_concat_backward(&dfused.data, &cache.mask)?,
                FusionMode::MeanVar => {
                    let slices: Vec<&[f32]> = cache
                        .features
                        .iter()
                        .map(|f| f.get(s).map_or(&[][..], |v| &v.data[..]))
                        .collect();
                    fuse_meanvar_backward(&slices, &dfused.data, &cache.mask)?
                }
            };
            for (i, g) in grads.into_iter().enumerate() {
                if cache.mask.is_present(i) {
                    let dims = cache.features[i][s].dims;
                    let ch = cache.features[i][s].channels;
                    path_grads[i].push(Volume::from_data(ch, dims, g));
                }
            }
        }
        if need_paths {
            for i in cache.mask.present_indices() {
                if self.paths[i].is_trainable() {
                    self.paths[i].backward(std::mem::take(&mut path_grads[i]), false);
                }
            }
        }
        Ok(())
    }

    /// Inference for one input under several masks, running each pathway
    /// once.
    fn predict_masks(&mut self, x: &Volume, masks: &[ModalityMask]) -> Result<Vec<(Volume, Volume)>> {
        let xs = std::slice::from_ref(x);
        for m in masks {
            check_inputs(xs, &self.config, m)?;
        }
        let mut features: Vec<Option<Volume>> = vec![None; self.paths.len()];
        for (i, feature) in features.iter_mut().enumerate() {
            if masks.iter().any(|m| m.is_present(i)) {
                let input = x.select_channels(&[i]);
                *feature = self.paths[i].forward(std::slice::from_ref(&input), Mode::Eval).pop();
            }
        }
        masks
            .iter()
            .map(|m| {
                let per: Vec<Option<&Volume>> = features
                    .iter()
                    .enumerate()
                    .map(|(i, f)| if m.is_present(i) { f.as_ref() } else { None })
                    .collect();
                let fused = self.fuse_sample(&per, m)?;
                let (h, l) = self.head(&fused);
                Ok((l, h))
            })
            .collect()
    }

    /// Freezes every pathway trunk; heads stay trainable only when
    /// `train_heads`.
    pub fn freeze_paths(&mut self, train_heads: bool) {
        for p in &mut self.paths {
            p.freeze(true, !train_heads);
        }
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Single(UNet),
    Multipath(Multipath),
}

impl Model {
    pub fn config(&self) -> &NetworkConfig {
        match self {
            Model::Single(u) => &u.config,
            Model::Multipath(m) => &m.config,
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.config().hidden_width()
    }

    /// Logits (and hidden activations) for a batch of `[M, s, s, s]`
    /// patches. The mask is applied at the model's masking point: input
    /// channels for a single UNet, the fusion layer otherwise.
    pub fn forward(&mut self, xs: &[Volume], mask: &ModalityMask, mode: Mode) -> Result<Forward> {
        match self {
            Model::Single(u) => u.forward(xs, mask, mode),
            Model::Multipath(m) => m.forward(xs, mask, mode),
        }
    }

    /// Accumulates gradients of the loss whose logit gradient is `dlogits`
    /// into every trainable parameter.
    pub fn backward(&mut self, dlogits: Vec<Volume>) -> Result<()> {
        match self {
            Model::Single(u) => {
                u.backward(dlogits);
                Ok(())
            }
            Model::Multipath(m) => m.backward(dlogits),
        }
    }

    /// Eval-mode `(logits, hidden)` of one patch under each mask.
    pub fn predict_masks(&mut self, x: &Volume, masks: &[ModalityMask]) -> Result<Vec<(Volume, Volume)>> {
        match self {
            Model::Single(u) => masks
                .iter()
                .map(|m| {
                    let mut f = u.forward(std::slice::from_ref(x), m, Mode::Eval)?;
                    Ok((f.logits.pop().unwrap(), f.hidden.pop().unwrap()))
                })
                .collect(),
            Model::Multipath(m) => m.predict_masks(x, masks),
        }
    }

    pub fn params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        match self {
            Model::Single(u) => {
                u.body.params("body", &mut out);
                u.logits.params("logits", &mut out);
            }
            Model::Multipath(m) => {
                for (i, p) in m.paths.iter().enumerate() {
                    p.params(&format!("path{i}"), &mut out);
                }
                m.hidden.params("hidden", &mut out);
                m.logits.params("logits", &mut out);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        match self {
            Model::Single(u) => {
                u.body.params_mut("body", &mut out);
                u.logits.params_mut("logits", &mut out);
            }
            Model::Multipath(m) => {
                for (i, p) in m.paths.iter_mut().enumerate() {
                    p.params_mut(&format!("path{i}"), &mut out);
                }
                m.hidden.params_mut("hidden", &mut out);
                m.logits.params_mut("logits", &mut out);
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Learnable scalars currently open to optimization.
    pub fn trainable_param_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, p)| p.kind == super::ParamKind::Weight && p.trainable)
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Drops any activations held for a backward pass.
    pub fn clear_cache(&mut self) {
        match self {
            Model::Single(u) => {
                u.cache = None;
                u.body.clear_cache();
            }
            Model::Multipath(m) => {
                m.cache = None;
                m.paths.iter_mut().for_each(Pathway::clear_cache);
            }
        }
    }
}
