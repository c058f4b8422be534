//! Stratified random train/test splits.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub split_id: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub train_ratio: f64,
    pub seed: u64,
}

/// Splits `indices` per class so each class contributes
/// `round(ratio · class_size)` samples to the first part, clamped so both
/// parts keep at least one sample of every class with two or more samples.
/// Both outputs are sorted.
pub fn stratified_partition<R: Rng + ?Sized>(
    indices: &[usize],
    labels: &[usize],
    n_classes: usize,
    ratio: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class = vec![Vec::new(); n_classes];
    for &i in indices {
        by_class[labels[i]].push(i);
    }
    let mut first = Vec::new();
    let mut second = Vec::new();
    for mut members in by_class {
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let n = members.len();
        let mut take = (ratio * n as f64).round() as usize;
        if n >= 2 {
            take = take.clamp(1, n - 1);
        }
        first.extend_from_slice(&members[..take]);
        second.extend_from_slice(&members[take..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    (first, second)
}

/// `n_splits` stratified splits; split `k` draws from seed `seed + k`.
pub fn make_splits(dataset: &Dataset, train_ratio: f64, n_splits: usize, seed: u64) -> Result<Vec<DatasetSplit>> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::Config(format!("train ratio {train_ratio} outside (0, 1)")));
    }
    if n_splits == 0 {
        return Err(Error::Config("need at least one split".into()));
    }
    for (k, &c) in dataset.class_counts().iter().enumerate() {
        if c < 2 {
            return Err(Error::Data(format!(
                "class {:?} has {c} samples; stratified splitting needs at least 2",
                dataset.class_names[k]
            )));
        }
    }
    let all: Vec<usize> = (0..dataset.len()).collect();
    Ok((0..n_splits)
        .map(|k| {
            let split_seed = seed.wrapping_add(k as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
            let (train, test) = stratified_partition(&all, &dataset.labels, dataset.n_classes(), train_ratio, &mut rng);
            DatasetSplit {
                split_id: k,
                train_indices: train,
                test_indices: test,
                train_ratio,
                seed: split_seed,
            }
        })
        .collect())
}
