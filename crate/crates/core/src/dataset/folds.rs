use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PairedDataset;
use crate::error::{Error, Result};

/// Fold id of every pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    k: usize,
    fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self, pair: usize) -> usize {
        self.fold_of[pair]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.fold_of
    }

    pub fn fold(&self, f: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == f).collect()
    }

    /// Every pair outside fold `f`.
    pub fn train(&self, f: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != f).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        self.fold_of.iter().for_each(|&f| s[f] += 1);
        s
    }
}

/// Stratified `k`-fold split of target labels: within each class the
/// members are shuffled and dealt round-robin, starting where the previous
/// class stopped so fold totals stay balanced too.
pub fn split_labels(targets: &[usize], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Split(format!("need at least 2 folds, got {k}")));
    }
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &t) in targets.iter().enumerate() {
        classes.entry(t).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0; targets.len()];
    let mut next = 0;
    for (t, mut members) in classes {
        if members.len() < k {
            return Err(Error::Split(format!(
                "target class {t} has {} members, fewer than {k} folds",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for i in members {
            fold_of[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldAssignment { k, fold_of })
}

pub fn split_folds(dataset: &PairedDataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    split_labels(&dataset.targets(), k, seed)
}
