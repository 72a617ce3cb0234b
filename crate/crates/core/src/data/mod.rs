//! Subjects, labels and evaluation regions, plus everything that turns a
//! dataset on disk into training patches: ingestion, synthetic phantoms,
//! normalization, fold splitting and patch sampling.

mod folds;
pub mod nifti;
mod patch;
mod phantom;
mod store;

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use folds::{make_folds, FoldSplit};
pub use nifti::{ingest_brats, default_brats_suffixes};
pub use patch::{extract_input, extract_labels, sample_patch, PatchSample};
pub use phantom::{generate_phantoms, PHANTOM_CONTRASTS};
pub use store::{list_subjects, load_dataset, load_subject, save_dataset, save_subject};

/// Canonical modality order.
pub const DEFAULT_MODALITIES: [&str; 4] = ["T1W", "T1WC", "T2W", "FLAIR"];

/// Valid voxel labels: background, necrotic/non-enhancing core, edema,
/// enhancing core.
pub const LABEL_SET: [u8; 4] = [0, 1, 2, 4];

pub fn default_modality_names() -> Vec<String> {
    DEFAULT_MODALITIES.iter().map(|s| s.to_string()).collect()
}

/// Maps a label in [`LABEL_SET`] to its class index (0..4).
pub fn label_to_class(label: u8) -> usize {
    match label {
        0 => 0,
        1 => 1,
        2 => 2,
        4 => 3,
        other => panic!("label {other} outside the label set"),
    }
}

pub fn class_to_label(class: usize) -> u8 {
    LABEL_SET[class]
}

/// Co-registered stack of modality volumes for one subject, stored
/// modality-major as `[modality, depth, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalVolume {
    pub subject_id: String,
    pub dims: [usize; 3],
    pub voxels: Vec<f32>,
    pub modality_names: Vec<String>,
    pub background_value: f32,
}

impl MultiModalVolume {
    pub fn new(
        subject_id: impl Into<String>,
        dims: [usize; 3],
        voxels: Vec<f32>,
        modality_names: Vec<String>,
        background_value: f32,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        let expected = modality_names.len() * dims.iter().product::<usize>();
        if voxels.len() != expected {
            return Err(Error::ShapeMismatch {
                subject: subject_id,
                detail: format!("{} voxels for {} modalities of {dims:?}", voxels.len(), modality_names.len()),
            });
        }
        Ok(Self {
            subject_id,
            dims,
            voxels,
            modality_names,
            background_value,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.modality_names.len()
    }

    pub fn spatial_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn modality(&self, m: usize) -> &[f32] {
        let n = self.spatial_len();
        &self.voxels[m * n..(m + 1) * n]
    }

    /// A voxel is background iff it equals `background_value` in every
    /// modality.
    pub fn brain_mask(&self) -> Vec<bool> {
        let n = self.spatial_len();
        let bg = self.background_value;
        (0..n)
            .map(|i| (0..self.num_modalities()).any(|m| self.voxels[m * n + i] != bg))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        if labels.len() != dims.iter().product::<usize>() {
            return Err(Error::invalid(format!("{} labels for dims {dims:?}", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|l| !LABEL_SET.contains(l)) {
            return Err(Error::invalid(format!("label {bad} outside {{0,1,2,4}}")));
        }
        Ok(Self { dims, labels })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    WholeTumor,
    TumorCore,
    EnhancingCore,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::WholeTumor, Region::TumorCore, Region::EnhancingCore];

    pub fn contains_label(self, label: u8) -> bool {
        match self {
            Region::WholeTumor => matches!(label, 1 | 2 | 4),
            Region::TumorCore => matches!(label, 1 | 4),
            Region::EnhancingCore => label == 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::WholeTumor => "WholeTumor",
            Region::TumorCore => "TumorCore",
            Region::EnhancingCore => "EnhancingCore",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Region::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown region '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    pub region: Region,
    pub dims: [usize; 3],
    pub mask: Vec<bool>,
}

impl RegionMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_subset_of(&self, other: &RegionMask) -> bool {
        self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }
}

/// Whole tumor = {1,2,4}, tumor core = {1,4}, enhancing core = {4}.
pub fn derive_regions(labels: &LabelVolume) -> [RegionMask; 3] {
    Region::ALL.map(|region| RegionMask {
        region,
        dims: labels.dims,
        mask: labels.labels.iter().map(|&l| region.contains_label(l)).collect(),
    })
}

/// Index of brain voxels split by tumor membership, used to draw patch
/// centres.
#[derive(Debug, Clone)]
pub(crate) struct SamplingIndex {
    pub tumor: Vec<u32>,
    pub healthy: Vec<u32>,
}

/// One subject: image stack and its label map.
#[derive(Debug)]
pub struct Subject {
    pub volume: MultiModalVolume,
    pub labels: LabelVolume,
    index: OnceLock<SamplingIndex>,
}

impl Clone for Subject {
    fn clone(&self) -> Self {
        Subject::new(self.volume.clone(), self.labels.clone()).expect("already validated")
    }
}

impl PartialEq for Subject {
    fn eq(&self, other: &Self) -> bool {
        self.volume == other.volume && self.labels == other.labels
    }
}

impl Subject {
    pub fn new(volume: MultiModalVolume, labels: LabelVolume) -> Result<Self> {
        if volume.dims != labels.dims {
            return Err(Error::ShapeMismatch {
                subject: volume.subject_id.clone(),
                detail: format!("image {:?} vs labels {:?}", volume.dims, labels.dims),
            });
        }
        Ok(Self {
            volume,
            labels,
            index: OnceLock::new(),
        })
    }

    pub fn id(&self) -> &str {
        &self.volume.subject_id
    }

    pub(crate) fn sampling_index(&self) -> &SamplingIndex {
        self.index.get_or_init(|| {
            let brain = self.volume.brain_mask();
            let mut tumor = Vec::new();
            let mut healthy = Vec::new();
            for (i, (&b, &l)) in brain.iter().zip(&self.labels.labels).enumerate() {
                if l != 0 {
                    tumor.push(i as u32);
                } else if b {
                    healthy.push(i as u32);
                }
            }
            SamplingIndex { tumor, healthy }
        })
    }
}

/// Copy of `subject` keeping only the listed modality channels, in order.
pub fn select_modalities(subject: &Subject, channels: &[usize]) -> Result<Subject> {
    let v = &subject.volume;
    let mut voxels = Vec::with_capacity(channels.len() * v.spatial_len());
    let mut names = Vec::with_capacity(channels.len());
    for &c in channels {
        if c >= v.num_modalities() {
            return Err(Error::invalid(format!("modality index {c} out of range for {}", v.subject_id)));
        }
        voxels.extend_from_slice(v.modality(c));
        names.push(v.modality_names[c].clone());
    }
    let volume = MultiModalVolume::new(v.subject_id.clone(), v.dims, voxels, names, v.background_value)?;
    Subject::new(volume, subject.labels.clone())
}

/// Standardizes every modality to zero mean and unit standard deviation
/// over the non-background voxels. Background voxels keep
/// `background_value`.
pub fn normalize(volume: &MultiModalVolume) -> Result<MultiModalVolume> {
    let brain = volume.brain_mask();
    let n = volume.spatial_len();
    let mut out = volume.clone();
    for m in 0..volume.num_modalities() {
        let values = volume.modality(m);
        let mut count = 0usize;
        let mut sum = 0.0f64;
        let mut first: Option<f32> = None;
        let mut distinct = false;
        for (&v, &b) in values.iter().zip(&brain) {
            if b {
                count += 1;
                sum += v as f64;
                match first {
                    None => first = Some(v),
                    Some(f) if f != v => distinct = true,
                    _ => {}
                }
            }
        }
        if count < 2 || !distinct {
            return Err(Error::ZeroVariance {
                modality: volume.modality_names[m].clone(),
            });
        }
        let mean = sum / count as f64;
        let var = values
            .iter()
            .zip(&brain)
            .filter(|(_, &b)| b)
            .map(|(&v, _)| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / count as f64;
        let std = var.sqrt();
        if std == 0.0 || !std.is_finite() {
            return Err(Error::ZeroVariance {
                modality: volume.modality_names[m].clone(),
            });
        }
        let dst = &mut out.voxels[m * n..(m + 1) * n];
        for (o, (&v, &b)) in dst.iter_mut().zip(values.iter().zip(&brain)) {
            *o = if b {
                ((v as f64 - mean) / std) as f32
            } else {
                volume.background_value
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(values: Vec<f32>, dims: [usize; 3], m: usize) -> MultiModalVolume {
        let names = (0..m).map(|i| format!("M{i}")).collect();
        MultiModalVolume::new("s", dims, values, names, 0.0).unwrap()
    }

    #[test]
    fn two_point_standardization() {
        let v = vol(vec![0.0, 2.0, 4.0, 0.0], [1, 1, 4], 1);
        let n = normalize(&v).unwrap();
        assert_eq!(n.voxels, vec![0.0, -1.0, 1.0, 0.0]);
    }

    #[test]
    fn normalization_is_idempotent() {
        let values: Vec<f32> = (0..64).map(|i| if i % 7 == 0 { 0.0 } else { (i as f32 * 0.37).sin() + 3.0 }).collect();
        let once = normalize(&vol(values, [4, 4, 4], 1)).unwrap();
        let twice = normalize(&once).unwrap();
        for (a, b) in once.voxels.iter().zip(&twice.voxels) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_modality_is_rejected() {
        let v = vol(vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0], [1, 2, 2], 2);
        match normalize(&v) {
            Err(Error::ZeroVariance { modality }) => assert_eq!(modality, "M0"),
            other => panic!("expected zero variance error, got {other:?}"),
        }
        let blank = vol(vec![0.0; 8], [2, 2, 2], 1);
        assert!(normalize(&blank).is_err());
    }

    #[test]
    fn region_definitions() {
        let labels = LabelVolume::new([1, 1, 4], vec![0, 2, 1, 4]).unwrap();
        let [wt, tc, et] = derive_regions(&labels);
        assert_eq!(wt.mask, vec![false, true, true, true]);
        assert_eq!(tc.mask, vec![false, false, true, true]);
        assert_eq!(et.mask, vec![false, false, false, true]);

        let empty = LabelVolume::new([2, 2, 2], vec![0; 8]).unwrap();
        assert!(derive_regions(&empty).iter().all(|r| r.count() == 0));
    }

    #[test]
    fn invalid_labels_are_rejected() {
        assert!(LabelVolume::new([1, 1, 2], vec![0, 3]).is_err());
        assert!(LabelVolume::new([1, 1, 2], vec![0]).is_err());
    }

    #[test]
    fn class_mapping_round_trips() {
        for (c, &l) in LABEL_SET.iter().enumerate() {
            assert_eq!(label_to_class(l), c);
            assert_eq!(class_to_label(c), l);
        }
    }
}
