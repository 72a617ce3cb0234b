//! Modality availability masks, modality dropout and its curriculum, and the
//! enumeration of modality subsets used for evaluation.

use std::fmt;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which of the original modalities are available.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityMask {
    present: Vec<bool>,
}

impl ModalityMask {
    pub fn new(present: Vec<bool>) -> Self {
        Self { present }
    }

    pub fn all(m: usize) -> Self {
        Self::new(vec![true; m])
    }

    /// Mask with only the listed modality indices present.
    pub fn from_indices(m: usize, indices: &[usize]) -> Result<Self> {
        let mut present = vec![false; m];
        for &i in indices {
            if i >= m {
                return Err(Error::invalid(format!("modality index {i} out of range for {m}")));
            }
            present[i] = true;
        }
        Ok(Self::new(present))
    }

    /// Parses a `+`-joined list of modality names. `All` (any case) selects
    /// every modality.
    pub fn parse(name: &str, modality_names: &[String]) -> Result<Self> {
        let m = modality_names.len();
        if name.eq_ignore_ascii_case("all") {
            return Ok(Self::all(m));
        }
        let mut present = vec![false; m];
        for part in name.split('+') {
            let part = part.trim();
            let idx = modality_names
                .iter()
                .position(|n| n.eq_ignore_ascii_case(part))
                .ok_or_else(|| Error::invalid(format!("unknown modality '{part}' in subset '{name}'")))?;
            present[idx] = true;
        }
        let mask = Self::new(present);
        if mask.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(mask)
    }

    /// Number of original modalities (m_o).
    pub fn original_count(&self) -> usize {
        self.present.len()
    }

    pub fn present_count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn is_present(&self, i: usize) -> bool {
        self.present[i]
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    pub fn present_indices(&self) -> Vec<usize> {
        (0..self.present.len()).filter(|&i| self.present[i]).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.present_count() == 0
    }

    pub fn is_full(&self) -> bool {
        self.present.iter().all(|&p| p)
    }

    /// m_o / m_present; the factor applied to kept channels.
    pub fn scale_factor(&self) -> Result<f64> {
        let kept = self.present_count();
        if kept == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(self.original_count() as f64 / kept as f64)
    }

    /// `+`-joined names of the present modalities.
    pub fn name(&self, modality_names: &[String]) -> String {
        self.present_indices()
            .into_iter()
            .map(|i| modality_names[i].as_str())
            .collect::<Vec<_>>()
            .join("+")
    }

    /// Column heading in the style of the published results table:
    /// "All", "All but X", otherwise the comma-separated modality list.
    pub fn table_label(&self, modality_names: &[String]) -> String {
        let m = self.original_count();
        if self.is_full() {
            return "All".to_string();
        }
        if m > 2 && self.present_count() == m - 1 {
            let missing = (0..m).find(|&i| !self.present[i]).unwrap();
            return format!("All but {}", modality_names[missing]);
        }
        self.present_indices()
            .into_iter()
            .map(|i| modality_names[i].as_str())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &p in &self.present {
            f.write_str(if p { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Curriculum for the modality dropout probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSchedule {
    pub p_initial: f64,
    pub doubling_period: usize,
    pub p_max: f64,
}

impl Default for DropoutSchedule {
    fn default() -> Self {
        Self {
            p_initial: 0.125,
            doubling_period: 50,
            p_max: 0.5,
        }
    }
}

impl DropoutSchedule {
    /// Constant probability, used for fusion training on pretrained paths.
    pub fn constant(p: f64) -> Self {
        Self {
            p_initial: p,
            doubling_period: usize::MAX,
            p_max: p,
        }
    }
}

/// Dropout probability at a 0-based epoch: p_initial doubled every
/// `doubling_period` epochs, capped at p_max.
pub fn schedule_p(epoch: usize, schedule: &DropoutSchedule) -> f64 {
    let doublings = epoch / schedule.doubling_period.max(1);
    let mut p = schedule.p_initial;
    for _ in 0..doublings {
        if p >= schedule.p_max {
            break;
        }
        p *= 2.0;
    }
    p.min(schedule.p_max)
}

/// Drops each modality independently with probability `p`, redrawing until
/// at least one modality survives.
pub fn sample_mask<R: Rng + ?Sized>(rng: &mut R, p: f64, m: usize) -> Result<ModalityMask> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    if m == 0 {
        return Err(Error::invalid("mask over zero modalities"));
    }
    loop {
        let present: Vec<bool> = (0..m).map(|_| rng.random::<f64>() >= p).collect();
        if present.iter().any(|&k| k) {
            return Ok(ModalityMask::new(present));
        }
    }
}

/// Zeroes dropped channels and rescales kept ones by m_o / m_present.
///
/// `inputs` is channel-major: `mask.original_count()` equal-length blocks.
pub fn apply_mask<T: Float>(inputs: &[T], mask: &ModalityMask) -> Result<Vec<T>> {
    let mut out = inputs.to_vec();
    apply_mask_in_place(&mut out, mask)?;
    Ok(out)
}

pub fn apply_mask_in_place<T: Float>(data: &mut [T], mask: &ModalityMask) -> Result<()> {
    let m = mask.original_count();
    if m == 0 || data.len() % m != 0 {
        return Err(Error::MaskArity {
            expected: m,
            got: if m == 0 { 0 } else { data.len() % m },
        });
    }
    let scale = T::from(mask.scale_factor()?).unwrap();
    let block = data.len() / m;
    if mask.is_full() {
        return Ok(());
    }
    for (i, chunk) in data.chunks_mut(block).enumerate() {
        if mask.is_present(i) {
            chunk.iter_mut().for_each(|v| *v = *v * scale);
        } else {
            chunk.iter_mut().for_each(|v| *v = T::zero());
        }
    }
    Ok(())
}

/// All 2^m − 1 non-empty masks: larger subsets first, and within one size
/// in descending lexicographic order of the present indices. For the four
/// canonical modalities this reproduces the column order
/// All, All but T1W, …, T1W, T1WC, …, T1W.
pub fn enumerate_subsets(m: usize) -> Vec<ModalityMask> {
    let mut subsets: Vec<Vec<usize>> = (1u64..(1u64 << m))
        .map(|bits| (0..m).filter(|&i| bits & (1 << i) != 0).collect())
        .collect();
    subsets.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| b.cmp(a)));
    subsets
        .into_iter()
        .map(|idx| ModalityMask::from_indices(m, &idx).expect("indices in range"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names() -> Vec<String> {
        ["T1W", "T1WC", "T2W", "FLAIR"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn schedule_values() {
        let s = DropoutSchedule::default();
        assert_eq!(schedule_p(0, &s), 0.125);
        assert_eq!(schedule_p(49, &s), 0.125);
        assert_eq!(schedule_p(50, &s), 0.25);
        assert_eq!(schedule_p(100, &s), 0.5);
        assert_eq!(schedule_p(149, &s), 0.5);
        assert_eq!(schedule_p(10_000, &s), 0.5);
        assert_eq!(schedule_p(1_000, &DropoutSchedule::constant(0.5)), 0.5);
    }

    #[test]
    fn schedule_monotone_and_capped() {
        let s = DropoutSchedule::default();
        let mut prev = 0.0;
        for e in 0..=10_000 {
            let p = schedule_p(e, &s);
            assert!(p >= prev && p <= s.p_max);
            prev = p;
        }
    }

    #[test]
    fn zero_probability_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert!(sample_mask(&mut rng, 0.0, 4).unwrap().is_full());
        }
    }

    #[test]
    fn sample_mask_rejects_certain_drop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_mask(&mut rng, 1.0, 4).is_err());
    }

    #[test]
    fn apply_mask_scaling() {
        let x: Vec<f64> = (1..=8).map(|v| v as f64).collect();
        assert_eq!(apply_mask(&x, &ModalityMask::all(4)).unwrap(), x);

        let keep = ModalityMask::parse("T2W+FLAIR", &names()).unwrap();
        assert_eq!(keep.scale_factor().unwrap(), 2.0);
        let y = apply_mask(&x, &keep).unwrap();
        assert_eq!(y, vec![0.0, 0.0, 0.0, 0.0, 10.0, 12.0, 14.0, 16.0]);

        let three = ModalityMask::from_indices(4, &[0, 1, 3]).unwrap();
        let y = apply_mask(&x, &three).unwrap();
        assert_eq!(y[0], 4.0 / 3.0);
        assert_eq!(y[4], 0.0);

        assert!(matches!(
            apply_mask(&x, &ModalityMask::new(vec![false; 4])),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn subset_order_matches_results_table() {
        let subsets = enumerate_subsets(4);
        let labels: Vec<String> = subsets.iter().map(|s| s.table_label(&names())).collect();
        assert_eq!(
            labels,
            vec![
                "All",
                "All but T1W",
                "All but T1WC",
                "All but T2W",
                "All but FLAIR",
                "T2W, FLAIR",
                "T1WC, FLAIR",
                "T1WC, T2W",
                "T1W, FLAIR",
                "T1W, T2W",
                "T1W, T1WC",
                "FLAIR",
                "T2W",
                "T1WC",
                "T1W",
            ]
        );
        assert_eq!(enumerate_subsets(1).len(), 1);
        assert_eq!(enumerate_subsets(3).len(), 7);
    }

    #[test]
    fn names_round_trip() {
        for mask in enumerate_subsets(4) {
            let name = mask.name(&names());
            assert_eq!(ModalityMask::parse(&name, &names()).unwrap(), mask);
        }
        assert!(ModalityMask::parse("all", &names()).unwrap().is_full());
        assert!(ModalityMask::parse("T3", &names()).is_err());
    }
}
