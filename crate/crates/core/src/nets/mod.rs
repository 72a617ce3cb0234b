//! Network construction: shape arithmetic for unpadded UNets, the single
//! UNet, the multipath networks with concatenation or mean/variance
//! fusion, and model checkpoints.

pub mod checkpoint;
pub mod fusion;
pub mod layers;
mod model;
pub mod ops;
mod tensor;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use fusion::{fuse_concat, fuse_concat_backward, fuse_meanvar, fuse_meanvar_backward, FusionMode, FusionSpec};
pub use layers::{Mode, Param, ParamKind};
pub use model::{Forward, Model, Multipath, UNet};
pub use ops::Upsample;
pub use tensor::{concat_channels, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetworkKind {
    Single,
    MultipathConcat,
    MultipathSharedRep,
}

impl NetworkKind {
    pub fn fusion(self) -> Option<FusionMode> {
        match self {
            NetworkKind::Single => None,
            NetworkKind::MultipathConcat => Some(FusionMode::Concat),
            NetworkKind::MultipathSharedRep => Some(FusionMode::MeanVar),
        }
    }
}

/// Architecture hyperparameters. Every layer shape follows from these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub kind: NetworkKind,
    /// Kernels in the first convolution of a single UNet (c).
    pub base_width: usize,
    /// Resolution levels, including the bottom one.
    pub depth: usize,
    pub num_modalities: usize,
    pub num_labels: usize,
    /// Base width of every pathway of a multipath network.
    pub pathway_width: usize,
    pub leaky_slope: f32,
    /// Width of the final pathway layer (or a single UNet's hidden head) as
    /// a multiple of the pathway's base width.
    pub pathway_head_width_factor: usize,
    #[serde(default)]
    pub upsample: Upsample,
}

impl NetworkConfig {
    pub fn unet(num_modalities: usize, base_width: usize, depth: usize) -> Self {
        Self {
            kind: NetworkKind::Single,
            base_width,
            depth,
            num_modalities,
            num_labels: 4,
            pathway_width: base_width,
            leaky_slope: 0.01,
            pathway_head_width_factor: 2,
            upsample: Upsample::Trilinear,
        }
    }

    /// Multipath network; concat pathways end in 2·width maps, shared
    /// representation pathways in 4·width maps.
    pub fn multipath(fusion: FusionMode, num_modalities: usize, pathway_width: usize, depth: usize) -> Self {
        let (kind, factor) = match fusion {
            FusionMode::Concat => (NetworkKind::MultipathConcat, 2),
            FusionMode::MeanVar => (NetworkKind::MultipathSharedRep, 4),
        };
        Self {
            kind,
            base_width: pathway_width,
            depth,
            num_modalities,
            num_labels: 4,
            pathway_width,
            leaky_slope: 0.01,
            pathway_head_width_factor: factor,
            upsample: Upsample::Trilinear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.pathway_width == 0 {
            return Err(Error::invalid("network widths must be at least 1"));
        }
        if self.depth < 2 {
            return Err(Error::invalid(format!("depth {} < 2", self.depth)));
        }
        if self.num_labels < 2 {
            return Err(Error::invalid(format!("{} labels < 2", self.num_labels)));
        }
        if self.num_modalities == 0 {
            return Err(Error::invalid("at least one modality is required"));
        }
        if self.pathway_head_width_factor == 0 {
            return Err(Error::invalid("pathway head width factor must be at least 1"));
        }
        Ok(())
    }

    /// Width of one pathway's output feature maps.
    pub fn pathway_feature_width(&self) -> usize {
        self.pathway_width * self.pathway_head_width_factor
    }

    pub fn fusion_spec(&self) -> Option<FusionSpec> {
        self.kind.fusion().map(|mode| FusionSpec {
            mode,
            num_inputs: self.num_modalities,
            per_input_channels: self.pathway_feature_width(),
        })
    }

    /// Width of the last hidden 1³ layer before the logits.
    pub fn hidden_width(&self) -> usize {
        match self.kind {
            NetworkKind::Single => self.base_width * self.pathway_head_width_factor,
            _ => 4 * self.pathway_width,
        }
    }
}

/// Output side of an unpadded UNet for a cubic input of `input_side`.
///
/// Each encoder level applies two 3³ convolutions (−4) and a 2× pooling,
/// the bottom level two convolutions, and each decoder level a 2×
/// upsampling followed by two convolutions. Sides must stay positive and
/// be even wherever they are pooled.
pub fn output_size(input_side: usize, depth: usize) -> Result<usize> {
    let fail = |stage: String| Error::InvalidInputSize {
        input_side,
        depth,
        stage,
    };
    if depth < 2 {
        return Err(fail(format!("depth must be at least 2, got {depth}")));
    }
    let mut side = input_side;
    let mut skips = Vec::with_capacity(depth - 1);
    for level in 0..depth - 1 {
        if side <= 4 {
            return Err(fail(format!("encoder level {}: side {side} vanishes under two 3³ convolutions", level + 1)));
        }
        side -= 4;
        if side % 2 != 0 {
            return Err(fail(format!("encoder level {}: odd side {side} before pooling", level + 1)));
        }
        skips.push(side);
        side /= 2;
    }
    if side <= 4 {
        return Err(fail(format!("bottom level: side {side} vanishes under two 3³ convolutions")));
    }
    side -= 4;
    for level in (0..depth - 1).rev() {
        side *= 2;
        if side > skips[level] {
            return Err(fail(format!("decoder level {}: upsampled side {side} exceeds skip side {}", level + 1, skips[level])));
        }
        if side <= 4 {
            return Err(fail(format!("decoder level {}: side {side} vanishes under two 3³ convolutions", level + 1)));
        }
        side -= 4;
    }
    Ok(side)
}

/// Smallest valid input side ≥ `min_output` output voxels, with its output.
pub fn input_for_output(min_output: usize, depth: usize) -> Result<(usize, usize)> {
    (1..10_000)
        .filter_map(|s| output_size(s, depth).ok().map(|t| (s, t)))
        .find(|&(_, t)| t >= min_output)
        .ok_or_else(|| Error::invalid(format!("no input size reaches output {min_output} at depth {depth}")))
}

pub fn build_unet(config: &NetworkConfig, seed: u64) -> Result<Model> {
    if config.kind != NetworkKind::Single {
        return Err(Error::invalid(format!("build_unet needs kind Single, got {:?}", config.kind)));
    }
    config.validate()?;
    Ok(Model::Single(UNet::new(config.clone(), seed)))
}

pub fn build_multipath(config: &NetworkConfig, seed: u64) -> Result<Model> {
    if config.kind == NetworkKind::Single {
        return Err(Error::invalid("build_multipath needs a multipath kind"));
    }
    config.validate()?;
    Ok(Model::Multipath(Multipath::new(config.clone(), seed)))
}

pub fn build_model(config: &NetworkConfig, seed: u64) -> Result<Model> {
    match config.kind {
        NetworkKind::Single => build_unet(config, seed),
        _ => build_multipath(config, seed),
    }
}

/// Total learnable scalars (running statistics excluded).
pub fn param_count(model: &Model) -> usize {
    model
        .params()
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight)
        .map(|(_, p)| p.value.len())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_geometry() {
        assert_eq!(output_size(108, 4).unwrap(), 20);
        assert_eq!(output_size(92, 4).unwrap(), 4);
        assert_eq!(output_size(44, 3).unwrap(), 4);
        assert_eq!(output_size(52, 3).unwrap(), 12);
        assert_eq!(output_size(60, 3).unwrap(), 20);
    }

    #[test]
    fn invalid_sizes_name_the_stage() {
        match output_size(64, 4) {
            Err(Error::InvalidInputSize { stage, .. }) => assert!(stage.contains("encoder level 3"), "{stage}"),
            other => panic!("{other:?}"),
        }
        assert!(output_size(91, 4).is_err());
        assert!(output_size(10, 3).is_err());
        assert!(output_size(108, 1).is_err());
    }

    #[test]
    fn smallest_inputs() {
        assert_eq!(input_for_output(1, 4).unwrap(), (92, 4));
        assert_eq!(input_for_output(1, 3).unwrap(), (44, 4));
        assert_eq!(input_for_output(20, 4).unwrap(), (108, 20));
    }

    #[test]
    fn config_validation() {
        let mut c = NetworkConfig::unet(4, 4, 3);
        assert!(c.validate().is_ok());
        c.depth = 1;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::unet(4, 4, 3);
        c.num_labels = 1;
        assert!(c.validate().is_err());
        assert!(build_multipath(&NetworkConfig::unet(4, 2, 2), 0).is_err());
        assert!(build_unet(&NetworkConfig::multipath(FusionMode::Concat, 4, 2, 2), 0).is_err());
    }

    #[test]
    fn fused_widths() {
        let c = NetworkConfig::multipath(FusionMode::Concat, 4, 16, 4);
        assert_eq!(c.fusion_spec().unwrap().output_channels(), 128);
        assert_eq!(c.hidden_width(), 64);
        let s = NetworkConfig::multipath(FusionMode::MeanVar, 4, 16, 4);
        assert_eq!(s.fusion_spec().unwrap().output_channels(), 128);
    }
}
