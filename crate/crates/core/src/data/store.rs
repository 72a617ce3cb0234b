//! On-disk dataset layout:
//!
//! ```text
//! <root>/<subject>/volume.bin   little-endian f32, [modality, depth, height, width]
//! <root>/<subject>/meta.json    shape, dtype, modality names, background value
//! <root>/<subject>/labels.bin   u8, [depth, height, width]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabelVolume, MultiModalVolume, Subject};
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct VolumeMeta {
    subject_id: String,
    /// `[modality, depth, height, width]`
    shape: [usize; 4],
    dtype: String,
    endianness: String,
    modality_names: Vec<String>,
    background_value: f32,
}

pub fn save_subject(root: &Path, subject: &Subject) -> Result<PathBuf> {
    let dir = root.join(subject.id());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let v = &subject.volume;
    let meta = VolumeMeta {
        subject_id: v.subject_id.clone(),
        shape: [v.num_modalities(), v.dims[0], v.dims[1], v.dims[2]],
        dtype: "float32".into(),
        endianness: "little".into(),
        modality_names: v.modality_names.clone(),
        background_value: v.background_value,
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;

    let bytes: Vec<u8> = v.voxels.iter().flat_map(|x| x.to_le_bytes()).collect();
    let vol_path = dir.join("volume.bin");
    fs::write(&vol_path, bytes).map_err(|e| Error::io(&vol_path, e))?;

    let lab_path = dir.join("labels.bin");
    fs::write(&lab_path, &subject.labels.labels).map_err(|e| Error::io(&lab_path, e))?;
    Ok(dir)
}

pub fn save_dataset(root: &Path, subjects: &[Subject]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for s in subjects {
        save_subject(root, s)?;
    }
    Ok(())
}

pub fn load_subject(dir: &Path) -> Result<Subject> {
    let meta_path = dir.join("meta.json");
    let meta: VolumeMeta =
        serde_json::from_slice(&fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
    if meta.dtype != "float32" || meta.endianness != "little" {
        return Err(Error::invalid(format!(
            "{}: unsupported dtype {} ({})",
            meta_path.display(),
            meta.dtype,
            meta.endianness
        )));
    }
    let [m, d, h, w] = meta.shape;
    if m != meta.modality_names.len() {
        return Err(Error::ShapeMismatch {
            subject: meta.subject_id,
            detail: format!("{m} modalities in shape but {} names", meta.modality_names.len()),
        });
    }
    let vol_path = dir.join("volume.bin");
    let raw = fs::read(&vol_path).map_err(|e| Error::io(&vol_path, e))?;
    if raw.len() != m * d * h * w * 4 {
        return Err(Error::ShapeMismatch {
            subject: meta.subject_id,
            detail: format!("volume.bin has {} bytes, expected {}", raw.len(), m * d * h * w * 4),
        });
    }
    let voxels = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let lab_path = dir.join("labels.bin");
    let labels = fs::read(&lab_path).map_err(|e| Error::io(&lab_path, e))?;
    let volume = MultiModalVolume::new(meta.subject_id, [d, h, w], voxels, meta.modality_names, meta.background_value)?;
    Subject::new(volume, LabelVolume::new([d, h, w], labels)?)
}

/// Subject directories under `root` (those holding a `meta.json`), sorted.
pub fn list_subjects(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<Subject>> {
    list_subjects(root)?.iter().map(|d| load_subject(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_phantoms;

    #[test]
    fn dataset_survives_disk() {
        let dir = tempfile::tempdir().unwrap();
        let subjects = generate_phantoms(4, 2, 32, 3).unwrap();
        save_dataset(dir.path(), &subjects).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, subjects);
    }

    #[test]
    fn truncated_volume_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let subjects = generate_phantoms(4, 1, 32, 2).unwrap();
        let sub = save_subject(dir.path(), &subjects[0]).unwrap();
        fs::write(sub.join("volume.bin"), [0u8; 10]).unwrap();
        assert!(matches!(load_subject(&sub), Err(Error::ShapeMismatch { .. })));
    }
}
