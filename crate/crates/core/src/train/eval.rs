//! Accuracy, confusion matrices and the multi-split protocol.

use std::fmt::Write as _;

use rayon::prelude::*;

use super::model::Model;
use super::trainer::{train, TrainConfig, TrainOutcome};
use crate::data::{make_splits, Dataset, DatasetSplit};
use crate::error::{Error, Result};

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks(self.classes).map(|r| r.iter().sum()).collect()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub oa: f64,
    pub confusion: Confusion,
}

/// Eval-mode overall accuracy on `indices`.
pub fn evaluate(model: &mut Model, dataset: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let classes = model.cfg.n_classes;
    let mut confusion = Confusion::new(classes);
    for chunk in indices.chunks(32) {
        let logits = model.predict(&dataset.batch(chunk))?;
        for (row, &i) in logits.data().chunks(classes).zip(chunk) {
            confusion.add(dataset.labels[i], argmax(row));
        }
    }
    Ok(Evaluation {
        oa: confusion.accuracy(),
        confusion,
    })
}

/// Mean and population standard deviation of split accuracies.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub train_ratio: f64,
    pub per_split_oa: Vec<f64>,
    pub mean_oa: f64,
    pub sd_oa: f64,
    pub confusion: Vec<Confusion>,
}

impl Metrics {
    pub fn from_evaluations(train_ratio: f64, evals: &[Evaluation]) -> Self {
        let per_split_oa: Vec<f64> = evals.iter().map(|e| e.oa).collect();
        let (mean_oa, sd_oa) = mean_population_sd(&per_split_oa);
        Self {
            train_ratio,
            per_split_oa,
            mean_oa,
            sd_oa,
            confusion: evals.iter().map(|e| e.confusion.clone()).collect(),
        }
    }

    /// `"95.85 ± 0.003"`: mean as a percentage with two decimals, SD as a
    /// fraction with three.
    pub fn summary(&self) -> String {
        format!("{:.2} ± {:.3}", 100.0 * self.mean_oa, self.sd_oa)
    }

    /// Train/test percentages, e.g. `Tr/Te=20/80`.
    pub fn setting(&self) -> String {
        let tr = (100.0 * self.train_ratio).round() as u32;
        format!("Tr/Te={tr}/{}", 100 - tr)
    }

    /// Machine-readable `key=value` lines.
    pub fn kv_lines(&self) -> String {
        let mut s = String::new();
        for (k, oa) in self.per_split_oa.iter().enumerate() {
            let _ = writeln!(s, "split{k}_oa={oa}");
        }
        let _ = writeln!(s, "mean_oa={}", self.mean_oa);
        let _ = writeln!(s, "sd_oa={}", self.sd_oa);
        let _ = writeln!(s, "sd_kind=population");
        s
    }
}

pub fn mean_population_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug)]
pub struct SplitRun {
    pub split: DatasetSplit,
    pub outcome: TrainOutcome,
    pub evaluation: Evaluation,
    pub model: Model,
}

#[derive(Clone, Debug)]
pub struct ProtocolRun {
    pub metrics: Metrics,
    pub runs: Vec<SplitRun>,
}

/// For each ratio: builds `n_splits` stratified splits from `split_seed`,
/// trains a fresh model per split and evaluates it on the held-out part.
/// With `jobs > 1` splits train concurrently; results are collected in
/// split order and are identical to a sequential run.
pub fn run_protocol<F>(
    dataset: &Dataset,
    ratios: &[f64],
    n_splits: usize,
    split_seed: u64,
    cfg: &TrainConfig,
    jobs: usize,
    make_model: F,
) -> Result<Vec<ProtocolRun>>
where
    F: Fn() -> Result<Model> + Sync,
{
    let mut out = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let splits = make_splits(dataset, ratio, n_splits, split_seed)?;
        let run_one = |split: &DatasetSplit| -> Result<SplitRun> {
            let mut model = make_model()?;
            let outcome = train(&mut model, dataset, split, cfg)?;
            let evaluation = evaluate(&mut model, dataset, &split.test_indices)?;
            Ok(SplitRun {
                split: split.clone(),
                outcome,
                evaluation,
                model,
            })
        };
        let runs: Vec<SplitRun> = if jobs > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| splits.par_iter().map(run_one).collect::<Result<Vec<_>>>())?
        } else {
            splits.iter().map(run_one).collect::<Result<Vec<_>>>()?
        };
        let evals: Vec<Evaluation> = runs.iter().map(|r| r.evaluation.clone()).collect();
        out.push(ProtocolRun {
            metrics: Metrics::from_evaluations(ratio, &evals),
            runs,
        });
    }
    Ok(out)
}
