//! Fusion of per-modality pathway features.
//!
//! Each pathway contributes one flattened feature block of `F · voxels`
//! values. Blocks of absent pathways are ignored and may be empty.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::missingness::ModalityMask;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    Concat,
    MeanVar,
}

/// Channel bookkeeping for a fusion layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub mode: FusionMode,
    pub num_inputs: usize,
    pub per_input_channels: usize,
}

impl FusionSpec {
    pub fn output_channels(&self) -> usize {
        match self.mode {
            FusionMode::Concat => self.num_inputs * self.per_input_channels,
            FusionMode::MeanVar => 2 * self.per_input_channels,
        }
    }
}

fn block_len<T>(features: &[&[T]], mask: &ModalityMask) -> Result<usize> {
    if features.len() != mask.original_count() {
        return Err(Error::MaskArity {
            expected: features.len(),
            got: mask.original_count(),
        });
    }
    let present = mask.present_indices();
    let first = *present.first().ok_or(Error::EmptyMask)?;
    let len = features[first].len();
    if let Some(&bad) = present.iter().find(|&&i| features[i].len() != len) {
        return Err(Error::invalid(format!(
            "pathway {bad} has {} features, pathway {first} has {len}",
            features[bad].len()
        )));
    }
    Ok(len)
}

/// Positional concatenation. Absent pathways become zero blocks at their
/// fixed positions; present ones are scaled by m_o / m_present.
pub fn fuse_concat<T: Float>(features: &[&[T]], mask: &ModalityMask) -> Result<Vec<T>> {
    let len = block_len(features, mask)?;
    let scale = T::from(mask.scale_factor()?).unwrap();
    let mut out = vec![T::zero(); features.len() * len];
    for (i, block) in out.chunks_mut(len.max(1)).enumerate().take(features.len()) {
        if mask.is_present(i) {
            for (o, &v) in block.iter_mut().zip(features[i]) {
                *o = v * scale;
            }
        }
    }
    Ok(out)
}

/// Gradient of [`fuse_concat`] per pathway; absent pathways get an empty
/// vector.
pub fn fuse_concat_backward<T: Float>(grad: &[T], mask: &ModalityMask) -> Result<Vec<Vec<T>>> {
    let m = mask.original_count();
    if m == 0 || grad.len() % m != 0 {
        return Err(Error::invalid("concat gradient length is not a multiple of the pathway count"));
    }
    let len = grad.len() / m;
    let scale = T::from(mask.scale_factor()?).unwrap();
    Ok((0..m)
        .map(|i| {
            if mask.is_present(i) {
                grad[i * len..(i + 1) * len].iter().map(|&g| g * scale).collect()
            } else {
                Vec::new()
            }
        })
        .collect())
}

/// Mean block followed by population-variance block, both over the present
/// pathways. A single present pathway yields an exactly zero variance.
pub fn fuse_meanvar<T: Float>(features: &[&[T]], mask: &ModalityMask) -> Result<Vec<T>> {
    let len = block_len(features, mask)?;
    let present = mask.present_indices();
    let n = T::from(present.len()).unwrap();
    let mut out = vec![T::zero(); 2 * len];
    let (mean, var) = out.split_at_mut(len);
    for &i in &present {
        for (m, &v) in mean.iter_mut().zip(features[i]) {
            *m = *m + v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / n);
    if present.len() > 1 {
        // deviations from the first present pathway
        let pivot = features[present[0]];
        let mut shift = vec![T::zero(); len];
        for &i in &present {
            for ((c, &v), &p) in shift.iter_mut().zip(features[i]).zip(pivot) {
                *c = *c + (v - p);
            }
        }
        shift.iter_mut().for_each(|c| *c = *c / n);
        for &i in &present {
            for (((s, &c), &v), &p) in var.iter_mut().zip(&shift).zip(features[i]).zip(pivot) {
                let d = (v - p) - c;
                *s = *s + d * d;
            }
        }
        var.iter_mut().for_each(|s| *s = *s / n);
    }
    Ok(out)
}

/// Gradient of [`fuse_meanvar`] with respect to each present pathway:
/// `g_mean / n + g_var · 2 (f_i − mean) / n`.
pub fn fuse_meanvar_backward<T: Float>(features: &[&[T]], grad: &[T], mask: &ModalityMask) -> Result<Vec<Vec<T>>> {
    let len = block_len(features, mask)?;
    if grad.len() != 2 * len {
        return Err(Error::invalid("mean/variance gradient length mismatch"));
    }
    let present = mask.present_indices();
    let n = T::from(present.len()).unwrap();
    let two = T::from(2.0).unwrap();
    let (g_mean, g_var) = grad.split_at(len);
    let mut mean = vec![T::zero(); len];
    for &i in &present {
        for (m, &v) in mean.iter_mut().zip(features[i]) {
            *m = *m + v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / n);
    Ok((0..features.len())
        .map(|i| {
            if !mask.is_present(i) {
                return Vec::new();
            }
            features[i]
                .iter()
                .zip(&mean)
                .zip(g_mean.iter().zip(g_var))
                .map(|((&f, &m), (&gm, &gv))| {
                    let var_term = if present.len() > 1 { gv * two * (f - m) / n } else { T::zero() };
                    gm / n + var_term
                })
                .collect()
        })
        .collect())
}
