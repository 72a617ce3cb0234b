//! Synthetic brain-tumor phantoms.
//!
//! Each subject is an ellipsoidal brain on a zero background with a tumor of
//! three nested ellipsoids: edema (2) outside, necrotic core (1) inside it,
//! enhancing core (4) innermost. Tissue contrast differs per modality so
//! that no single modality resolves all three regions:
//!
//! | modality | brain | edema | necrotic | enhancing |
//! |----------|-------|-------|----------|-----------|
//! | T1W      | 1.0   | 0.55  | 0.35     | 0.45      |
//! | T1WC     | 1.0   | 0.5   | 0.35     | 2.0       |
//! | T2W      | 1.0   | 1.7   | 1.9      | 1.5       |
//! | FLAIR    | 1.0   | 2.0   | 1.3      | 1.3       |
//!
//! FLAIR and T2W outline the whole tumor clearly, the T1 modalities more
//! weakly, and T1WC is the only modality separating enhancing from
//! necrotic core. For `m != 4` the table rows are reused cyclically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{default_modality_names, LabelVolume, MultiModalVolume, Subject};
use crate::{Error, Result};

/// Mean intensity per modality row for (brain, edema, necrotic, enhancing).
pub const PHANTOM_CONTRASTS: [[f32; 4]; 4] = [
    [1.0, 0.55, 0.35, 0.45],
    [1.0, 0.5, 0.35, 2.0],
    [1.0, 1.7, 1.9, 1.5],
    [1.0, 2.0, 1.3, 1.3],
];

const NOISE_SIGMA: f32 = 0.25;
const MIN_SIDE: usize = 32;

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn scaled(&self, f: [f64; 3]) -> Ellipsoid {
        Ellipsoid {
            center: self.center,
            radii: [self.radii[0] * f[0], self.radii[1] * f[1], self.radii[2] * f[2]],
        }
    }
}

fn modality_names(m: usize) -> Vec<String> {
    let canon = default_modality_names();
    (0..m)
        .map(|i| if i < canon.len() { canon[i].clone() } else { format!("MOD{i}") })
        .collect()
}

/// Deterministic phantom dataset. Subject `i` draws from its own generator
/// seeded by `(seed, i)`, so subsets of a dataset are stable under changes
/// of `n_subjects`.
pub fn generate_phantoms(seed: u64, n_subjects: usize, side: usize, m: usize) -> Result<Vec<Subject>> {
    if side < MIN_SIDE {
        return Err(Error::invalid(format!(
            "phantom side {side} too small for nested tumor regions (minimum {MIN_SIDE})"
        )));
    }
    if m == 0 {
        return Err(Error::invalid("phantoms need at least one modality"));
    }
    (0..n_subjects)
        .map(|i| generate_subject(seed, i, side, m))
        .collect()
}

fn generate_subject(seed: u64, index: usize, side: usize, m: usize) -> Result<Subject> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64 + 1));
    let s = side as f64;
    let mid = (s - 1.0) / 2.0;

    let brain = Ellipsoid {
        center: [
            mid + rng.random_range(-0.03..0.03) * s,
            mid + rng.random_range(-0.03..0.03) * s,
            mid + rng.random_range(-0.03..0.03) * s,
        ],
        radii: [
            rng.random_range(0.36..0.44) * s,
            rng.random_range(0.38..0.46) * s,
            rng.random_range(0.38..0.46) * s,
        ],
    };

    let edema_radii = [
        rng.random_range(0.12..0.2) * s,
        rng.random_range(0.12..0.2) * s,
        rng.random_range(0.12..0.2) * s,
    ];
    // Keep the tumor inside the brain: offset along each axis bounded by the
    // slack between brain and edema radii.
    let mut center = [0.0; 3];
    for a in 0..3 {
        let slack = (brain.radii[a] - edema_radii[a]) * 0.55;
        center[a] = brain.center[a] + rng.random_range(-slack..slack);
    }
    let edema = Ellipsoid {
        center,
        radii: edema_radii,
    };
    let core = edema.scaled([
        rng.random_range(0.5..0.7),
        rng.random_range(0.5..0.7),
        rng.random_range(0.5..0.7),
    ]);
    let enhancing = core.scaled([
        rng.random_range(0.45..0.65),
        rng.random_range(0.45..0.65),
        rng.random_range(0.45..0.65),
    ]);

    let n = side * side * side;
    let mut tissue = vec![u8::MAX; n];
    let mut labels = vec![0u8; n];
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                let p = [z as f64, y as f64, x as f64];
                let i = (z * side + y) * side + x;
                if !brain.contains(p) {
                    continue;
                }
                let (t, l) = if enhancing.contains(p) {
                    (3, 4)
                } else if core.contains(p) {
                    (2, 1)
                } else if edema.contains(p) {
                    (1, 2)
                } else {
                    (0, 0)
                };
                tissue[i] = t;
                labels[i] = l;
            }
        }
    }
    if !labels.contains(&4) || !labels.contains(&1) {
        return Err(Error::invalid(format!(
            "phantom side {side} too small to resolve nested tumor regions"
        )));
    }

    let noise = Normal::new(0.0f32, NOISE_SIGMA).expect("valid sigma");
    let mut voxels = vec![0.0f32; m * n];
    for mod_idx in 0..m {
        let contrast = PHANTOM_CONTRASTS[mod_idx % PHANTOM_CONTRASTS.len()];
        let gain: f32 = rng.random_range(0.8..1.25);
        let offset: f32 = rng.random_range(0.0..0.5);
        let dst = &mut voxels[mod_idx * n..(mod_idx + 1) * n];
        for (v, &t) in dst.iter_mut().zip(&tissue) {
            if t == u8::MAX {
                continue;
            }
            let base = contrast[t as usize] + noise.sample(&mut rng);
            // Strictly positive inside the brain so no voxel collides with the
            // zero background.
            *v = (gain * base + offset).max(1e-3);
        }
    }

    let dims = [side, side, side];
    let volume = MultiModalVolume::new(format!("phantom_{index:04}"), dims, voxels, modality_names(m), 0.0)?;
    Subject::new(volume, LabelVolume::new(dims, labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::derive_regions;

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_phantoms(1, 3, 40, 4).unwrap();
        let b = generate_phantoms(1, 3, 40, 4).unwrap();
        assert_eq!(a, b);
        let c = generate_phantoms(2, 3, 40, 4).unwrap();
        assert_ne!(a[0].volume.voxels, c[0].volume.voxels);
    }

    #[test]
    fn regions_nest_and_tumor_is_inside_brain() {
        for s in generate_phantoms(5, 4, 48, 4).unwrap() {
            let [wt, tc, et] = derive_regions(&s.labels);
            assert!(et.count() > 0);
            assert!(et.is_subset_of(&tc) && tc.is_subset_of(&wt));
            let brain = s.volume.brain_mask();
            assert!(wt.mask.iter().zip(&brain).all(|(&t, &b)| !t || b));
            assert!(brain.iter().filter(|&&b| b).count() > wt.count());
        }
    }

    #[test]
    fn small_side_rejected() {
        assert!(generate_phantoms(1, 1, 16, 4).is_err());
        assert!(generate_phantoms(1, 1, 40, 0).is_err());
    }

    #[test]
    fn other_modality_counts() {
        let s = &generate_phantoms(3, 1, 32, 6).unwrap()[0];
        assert_eq!(s.volume.num_modalities(), 6);
        assert_eq!(s.volume.modality_names[5], "MOD5");
    }
}
