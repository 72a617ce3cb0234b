//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer, and
//! ingestion of the BraTS directory layout
//! `<root>/<subject>/<subject>_<suffix>.nii.gz`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{LabelVolume, MultiModalVolume, Subject};
use crate::{Error, Result};

const HEADER_SIZE: usize = 348;

/// A decoded NIfTI image, reordered to `[z, y, x]` with x fastest (the
/// on-disk order), intensity scaling applied.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

fn nifti_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Nifti {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| nifti_err(path, format!("gzip: {e}")))?;
        out
    } else {
        raw
    };
    decode(path, &bytes)
}

fn decode(path: &Path, bytes: &[u8]) -> Result<NiftiImage> {
    if bytes.len() < HEADER_SIZE {
        return Err(nifti_err(path, "file shorter than header"));
    }
    let little = i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32;
    if !little && i32::from_be_bytes(bytes[0..4].try_into().unwrap()) != HEADER_SIZE as i32 {
        return Err(nifti_err(path, "sizeof_hdr is not 348"));
    }
    let i16_at = |o: usize| {
        let b = [bytes[o], bytes[o + 1]];
        if little { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }
    };
    let f32_at = |o: usize| {
        let b: [u8; 4] = bytes[o..o + 4].try_into().unwrap();
        if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
    };
    if &bytes[344..347] != b"n+1" {
        return Err(nifti_err(path, "missing n+1 magic (only single-file NIfTI-1 is supported)"));
    }
    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(nifti_err(path, format!("dim[0] = {ndim}")));
    }
    let mut extent = [1usize; 3];
    for (a, e) in extent.iter_mut().enumerate().take((ndim as usize).min(3)) {
        let d = i16_at(42 + 2 * a);
        if d < 1 {
            return Err(nifti_err(path, format!("dim[{}] = {d}", a + 1)));
        }
        *e = d as usize;
    }
    for a in 3..ndim as usize {
        if i16_at(42 + 2 * a) > 1 {
            return Err(nifti_err(path, "only 3D volumes are supported"));
        }
    }
    let datatype = i16_at(70);
    let vox_offset = f32_at(108) as usize;
    let slope = f32_at(112);
    let inter = f32_at(116);
    let n: usize = extent.iter().product();
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 | 768 => 4,
        64 => 8,
        other => return Err(nifti_err(path, format!("unsupported datatype {other}"))),
    };
    let start = vox_offset.max(HEADER_SIZE);
    let end = start + n * width;
    if bytes.len() < end {
        return Err(nifti_err(path, format!("expected {} data bytes, found {}", n * width, bytes.len().saturating_sub(start))));
    }
    let payload = &bytes[start..end];
    let mut data = Vec::with_capacity(n);
    for chunk in payload.chunks_exact(width) {
        let v = match (datatype, little) {
            (2, _) => chunk[0] as f32,
            (256, _) => chunk[0] as i8 as f32,
            (4, true) => i16::from_le_bytes([chunk[0], chunk[1]]) as f32,
            (4, false) => i16::from_be_bytes([chunk[0], chunk[1]]) as f32,
            (512, true) => u16::from_le_bytes([chunk[0], chunk[1]]) as f32,
            (512, false) => u16::from_be_bytes([chunk[0], chunk[1]]) as f32,
            (8, true) => i32::from_le_bytes(chunk.try_into().unwrap()) as f32,
            (8, false) => i32::from_be_bytes(chunk.try_into().unwrap()) as f32,
            (768, true) => u32::from_le_bytes(chunk.try_into().unwrap()) as f32,
            (768, false) => u32::from_be_bytes(chunk.try_into().unwrap()) as f32,
            (16, true) => f32::from_le_bytes(chunk.try_into().unwrap()),
            (16, false) => f32::from_be_bytes(chunk.try_into().unwrap()),
            (64, true) => f64::from_le_bytes(chunk.try_into().unwrap()) as f32,
            (64, false) => f64::from_be_bytes(chunk.try_into().unwrap()) as f32,
            _ => unreachable!(),
        };
        data.push(v);
    }
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    // On disk x varies fastest, so [nx, ny, nz] becomes dims [nz, ny, nx].
    Ok(NiftiImage {
        dims: [extent[2], extent[1], extent[0]],
        data,
    })
}

/// Writes a little-endian float32 NIfTI-1 file, gzip-compressed when the
/// path ends in `.gz`.
pub fn write_nifti(path: &Path, image: &NiftiImage) -> Result<()> {
    let mut hdr = vec![0u8; HEADER_SIZE];
    hdr[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dims: [i16; 8] = [3, image.dims[2] as i16, image.dims[1] as i16, image.dims[0] as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        hdr[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    hdr[70..72].copy_from_slice(&16i16.to_le_bytes());
    hdr[72..74].copy_from_slice(&32i16.to_le_bytes());
    for i in 0..4 {
        hdr[76 + 4 * i..80 + 4 * i].copy_from_slice(&1.0f32.to_le_bytes());
    }
    hdr[108..112].copy_from_slice(&352.0f32.to_le_bytes());
    hdr[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    hdr[344..348].copy_from_slice(b"n+1\0");
    let mut bytes = hdr;
    bytes.extend_from_slice(&[0u8; 4]);
    for v in &image.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let gz = path.extension().is_some_and(|e| e == "gz");
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `(file suffix, modality name)` in canonical order, for BraTS 2018.
pub fn default_brats_suffixes() -> Vec<(String, String)> {
    [("t1", "T1W"), ("t1ce", "T1WC"), ("t2", "T2W"), ("flair", "FLAIR")]
        .iter()
        .map(|(s, n)| (s.to_string(), n.to_string()))
        .collect()
}

fn find_volume(dir: &Path, subject: &str, suffix: &str) -> Option<PathBuf> {
    ["nii.gz", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{subject}_{suffix}.{ext}")))
        .find(|p| p.is_file())
}

/// Loads every subject directory under `root`. Modalities are stacked in
/// the order of `modality_suffixes`; the `seg` file provides labels, with
/// the legacy enhancing label 3 mapped to 4.
pub fn ingest_brats(root: &Path, modality_suffixes: &[(String, String)]) -> Result<Vec<Subject>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        log::warn!("no subject directories found under {}", root.display());
        return Ok(Vec::new());
    }
    dirs.iter().map(|d| ingest_subject(d, modality_suffixes)).collect()
}

fn ingest_subject(dir: &Path, modality_suffixes: &[(String, String)]) -> Result<Subject> {
    let subject = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut missing = Vec::new();
    let mut paths = Vec::new();
    for (suffix, name) in modality_suffixes {
        match find_volume(dir, &subject, suffix) {
            Some(p) => paths.push(p),
            None => missing.push(name.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingModality {
            subject: subject.clone(),
            modality: missing.join(", "),
            path: dir.to_path_buf(),
        });
    }
    let seg_path = find_volume(dir, &subject, "seg").ok_or_else(|| Error::MissingModality {
        subject: subject.clone(),
        modality: "seg".into(),
        path: dir.to_path_buf(),
    })?;

    let mut dims = None;
    let mut voxels = Vec::new();
    for (p, (_, name)) in paths.iter().zip(modality_suffixes) {
        let img = read_nifti(p)?;
        match dims {
            None => dims = Some(img.dims),
            Some(d) if d != img.dims => {
                return Err(Error::ShapeMismatch {
                    subject,
                    detail: format!("{name} has shape {:?}, expected {d:?}", img.dims),
                })
            }
            _ => {}
        }
        voxels.extend(img.data);
    }
    let dims = dims.expect("at least one modality");
    let seg = read_nifti(&seg_path)?;
    if seg.dims != dims {
        return Err(Error::ShapeMismatch {
            subject,
            detail: format!("seg has shape {:?}, expected {dims:?}", seg.dims),
        });
    }
    let labels = seg
        .data
        .iter()
        .map(|&v| match v.round() as i64 {
            0 => Ok(0u8),
            1 => Ok(1),
            2 => Ok(2),
            3 | 4 => Ok(4),
            other => Err(Error::invalid(format!("subject {subject}: label {other} outside BraTS label set"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    let names = modality_suffixes.iter().map(|(_, n)| n.clone()).collect();
    let volume = MultiModalVolume::new(subject, dims, voxels, names, 0.0)?;
    Subject::new(volume, LabelVolume::new(dims, labels)?)
}
