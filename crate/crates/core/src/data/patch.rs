use rand::Rng;

use super::{LabelVolume, MultiModalVolume, Subject};
use crate::nets::{output_size, Volume};
use crate::{Error, Result};

/// A training patch: the input window and the label crop it predicts.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    /// `[modality, s, s, s]`
    pub input: Volume,
    /// `[t, t, t]` raw labels, centered inside the input window.
    pub target: Vec<u8>,
    pub target_side: usize,
    /// Volume coordinates of the first target voxel; may be negative near
    /// the border.
    pub target_origin: [isize; 3],
    pub center: [usize; 3],
    pub center_in_tumor: bool,
}

/// Copies an `side³` window of every modality starting at `origin`,
/// padding outside the volume with the background value.
pub fn extract_input(volume: &MultiModalVolume, origin: [isize; 3], side: usize) -> Volume {
    let m = volume.num_modalities();
    let mut out = Volume::filled(m, [side; 3], volume.background_value);
    let n = volume.spatial_len();
    let [d, h, w] = volume.dims;
    let (x_lo, x_hi) = clip_range(origin[2], side, w);
    if x_lo >= x_hi {
        return out;
    }
    for c in 0..m {
        let src = &volume.voxels[c * n..(c + 1) * n];
        for dz in 0..side {
            let z = origin[0] + dz as isize;
            if z < 0 || z >= d as isize {
                continue;
            }
            for dy in 0..side {
                let y = origin[1] + dy as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                let row = (z as usize * h + y as usize) * w;
                let dst = out.index(c, dz, dy, (x_lo as isize - origin[2]) as usize);
                out.data[dst..dst + (x_hi - x_lo)].copy_from_slice(&src[row + x_lo..row + x_hi]);
            }
        }
    }
    out
}

/// Label window with zero (background) padding.
pub fn extract_labels(labels: &LabelVolume, origin: [isize; 3], side: usize) -> Vec<u8> {
    let [d, h, w] = labels.dims;
    let mut out = vec![0u8; side * side * side];
    let (x_lo, x_hi) = clip_range(origin[2], side, w);
    if x_lo >= x_hi {
        return out;
    }
    for dz in 0..side {
        let z = origin[0] + dz as isize;
        if z < 0 || z >= d as isize {
            continue;
        }
        for dy in 0..side {
            let y = origin[1] + dy as isize;
            if y < 0 || y >= h as isize {
                continue;
            }
            let row = (z as usize * h + y as usize) * w;
            let dst = (dz * side + dy) * side + (x_lo as isize - origin[2]) as usize;
            out[dst..dst + (x_hi - x_lo)].copy_from_slice(&labels.labels[row + x_lo..row + x_hi]);
        }
    }
    out
}

fn clip_range(origin: isize, side: usize, extent: usize) -> (usize, usize) {
    let lo = origin.max(0) as usize;
    let hi = (origin + side as isize).clamp(0, extent as isize) as usize;
    (lo.min(hi), hi)
}

/// Draws one patch: with probability 0.5 the centre voxel is tumor,
/// otherwise it is a non-tumor brain voxel. The target crop starts at
/// `center - t/2`; the input window extends `(s - t)/2` beyond it.
pub fn sample_patch<R: Rng + ?Sized>(
    subject: &Subject,
    rng: &mut R,
    input_side: usize,
    depth: usize,
) -> Result<PatchSample> {
    let t = output_size(input_side, depth)?;
    let index = subject.sampling_index();
    if index.tumor.is_empty() {
        return Err(Error::invalid(format!("subject {} has no tumor voxels", subject.id())));
    }
    if index.healthy.is_empty() {
        return Err(Error::invalid(format!("subject {} has no healthy brain voxels", subject.id())));
    }
    let in_tumor = rng.random_bool(0.5);
    let pool = if in_tumor { &index.tumor } else { &index.healthy };
    let flat = pool[rng.random_range(0..pool.len())] as usize;
    let [_, h, w] = subject.volume.dims;
    let center = [flat / (h * w), (flat / w) % h, flat % w];
    let half_t = (t / 2) as isize;
    let target_origin = center.map(|c| c as isize - half_t);
    let margin = ((input_side - t) / 2) as isize;
    let input_origin = target_origin.map(|o| o - margin);
    Ok(PatchSample {
        input: extract_input(&subject.volume, input_origin, input_side),
        target: extract_labels(&subject.labels, target_origin, t),
        target_side: t,
        target_origin,
        center,
        center_in_tumor: in_tumor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_phantoms;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn target_is_center_crop_of_labels() {
        let subject = &generate_phantoms(2, 1, 40, 4).unwrap()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let p = sample_patch(subject, &mut rng, 52, 3).unwrap();
            assert_eq!(p.target_side, 12);
            let t = p.target_side as isize;
            let [d, h, w] = subject.labels.dims;
            for z in 0..t {
                for y in 0..t {
                    for x in 0..t {
                        let (vz, vy, vx) = (p.target_origin[0] + z, p.target_origin[1] + y, p.target_origin[2] + x);
                        let expected = if vz < 0 || vy < 0 || vx < 0 || vz >= d as isize || vy >= h as isize || vx >= w as isize {
                            0
                        } else {
                            subject.labels.labels[(vz as usize * h + vy as usize) * w + vx as usize]
                        };
                        assert_eq!(p.target[((z * t + y) * t + x) as usize], expected);
                    }
                }
            }
            let c = p.center;
            let label = subject.labels.labels[(c[0] * h + c[1]) * w + c[2]];
            assert_eq!(label != 0, p.center_in_tumor);
            // The input voxel aligned with the target centre is the same
            // image voxel.
            let off = (52 - 12) / 2 + 6;
            let n = subject.volume.spatial_len();
            assert_eq!(
                p.input.data[p.input.index(1, off, off, off)],
                subject.volume.voxels[n + (c[0] * h + c[1]) * w + c[2]]
            );
        }
    }

    #[test]
    fn same_seed_same_patch() {
        let subject = &generate_phantoms(2, 1, 40, 4).unwrap()[0];
        let a = sample_patch(subject, &mut ChaCha8Rng::seed_from_u64(3), 44, 3).unwrap();
        let b = sample_patch(subject, &mut ChaCha8Rng::seed_from_u64(3), 44, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reference_geometry() {
        let subject = &generate_phantoms(2, 1, 40, 1).unwrap()[0];
        let p = sample_patch(subject, &mut ChaCha8Rng::seed_from_u64(0), 108, 4).unwrap();
        assert_eq!(p.input.dims, [108; 3]);
        assert_eq!(p.target_side, 20);
        assert_eq!(p.target.len(), 8000);
    }

    #[test]
    fn tumorless_subject_is_rejected() {
        let mut subject = generate_phantoms(2, 1, 32, 1).unwrap().remove(0);
        subject.labels.labels.iter_mut().for_each(|l| *l = 0);
        let subject = Subject::new(subject.volume, subject.labels).unwrap();
        assert!(sample_patch(&subject, &mut ChaCha8Rng::seed_from_u64(0), 44, 3).is_err());
    }
}
