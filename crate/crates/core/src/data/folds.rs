use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// K disjoint test folds over subject ids. The same split is reused for
/// every model variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Vec<String>>,
    pub seed: u64,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn test_ids(&self, fold: usize) -> Result<&[String]> {
        self.folds
            .get(fold)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("fold {fold} out of range for k={}", self.k())))
    }

    /// Every subject outside `fold`.
    pub fn train_ids(&self, fold: usize) -> Result<Vec<String>> {
        self.test_ids(fold)?;
        Ok(self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect())
    }
}

/// Shuffles ids with a seeded generator and deals them round-robin, so fold
/// sizes differ by at most one.
pub fn make_folds(subject_ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    if subject_ids.len() < k {
        return Err(Error::invalid(format!(
            "{k} folds requested for {} subjects",
            subject_ids.len()
        )));
    }
    let mut ids = subject_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != subject_ids.len() {
        return Err(Error::invalid("duplicate subject ids"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(FoldSplit { folds, seed })
}
