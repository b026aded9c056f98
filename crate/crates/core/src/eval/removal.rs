//! Counterfactual removal: drop the top-ranked training examples, retrain, and
//! compare against removing the same number at random.
//!
//! For each seed `s` a shuffle `π_s` of the training rows fixes both the random
//! baseline (its first `N` rows) and the tiebreak among equal totals in the
//! ranked arm, and both arms retrain under the same seed. An all-zero ranking
//! therefore reproduces the random arm exactly.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::model::ModelSpec;
use crate::rng::{derive_seed, permutation, stream, Purpose};
use crate::train::{accuracy, mean_loss, train_erm, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RemovalMetric {
    TestAccuracy,
    MeanQueryLoss,
}

impl RemovalMetric {
    pub fn higher_is_better(self) -> bool {
        self == RemovalMetric::TestAccuracy
    }

    /// How much worse `value` is than `reference` (positive means worse).
    pub fn degradation(self, reference: f64, value: f64) -> f64 {
        if self.higher_is_better() {
            reference - value
        } else {
            value - reference
        }
    }
}

fn default_seeds() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemovalConfig {
    /// Numbers of removed examples, ascending.
    pub intervals: Vec<usize>,
    pub retrain: TrainConfig,
    pub metric: RemovalMetric,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    pub seed: u64,
}

impl RemovalConfig {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::input("removal needs at least one seed"));
        }
        if self.intervals.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input("removal intervals must be strictly ascending"));
        }
        if let Some(&n) = self.intervals.iter().find(|&&n| n >= n_train) {
            return Err(Error::input(format!("cannot remove {n} of {n_train} training examples")));
        }
        self.retrain.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalRow {
    pub interval: usize,
    pub metric_mean: f64,
    pub metric_std: f64,
    pub random_baseline_mean: f64,
    pub random_baseline_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalReport {
    pub metric: RemovalMetric,
    pub seeds: usize,
    pub rows: Vec<RemovalRow>,
}

impl RemovalReport {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("interval,metric_mean,metric_std,random_baseline_mean\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.interval,
                fmt_f64(r.metric_mean),
                fmt_f64(r.metric_std),
                fmt_f64(r.random_baseline_mean)
            );
        }
        out
    }

    /// True when the ranked arm is at least as bad as the random arm at every
    /// interval.
    pub fn ranked_degrades_at_least_random(&self) -> bool {
        self.rows.iter().all(|r| self.metric.degradation(r.random_baseline_mean, r.metric_mean) >= 0.0)
    }
}

/// Row order for seed `s`: by descending total, ties in `π_s` order.
pub fn removal_order(totals: &[f64], shuffle: &[usize]) -> Vec<usize> {
    let mut order = shuffle.to_vec();
    order.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]));
    order
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    (mean, (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Metric after removing the top `N` rows for each interval, beside the random
/// baseline.
pub fn removal_harness(
    train: &Dataset,
    test: &Dataset,
    spec: &ModelSpec,
    totals: &[(u64, f64)],
    cfg: &RemovalConfig,
) -> Result<RemovalReport> {
    let n = train.len();
    cfg.validate(n)?;
    crate::train::check_compatible(test, spec)?;
    if cfg.metric == RemovalMetric::TestAccuracy && !spec.is_classification() {
        return Err(Error::unsupported("test accuracy needs a classification model"));
    }
    let by_id: HashMap<u64, f64> = totals.iter().copied().collect();
    let row_totals = train
        .ids()
        .iter()
        .map(|id| by_id.get(id).copied().ok_or_else(|| Error::input(format!("ranking misses training id {id}"))))
        .collect::<Result<Vec<_>>>()?;

    let shuffles: Vec<Vec<usize>> = (0..cfg.seeds).map(|s| permutation(n, &mut stream(cfg.seed, Purpose::Removal, s as u64))).collect();
    let ranked: Vec<Vec<usize>> = shuffles.iter().map(|p| removal_order(&row_totals, p)).collect();

    // job = (interval index, seed, ranked arm?)
    let jobs: Vec<(usize, usize, bool)> = (0..cfg.intervals.len())
        .flat_map(|t| (0..cfg.seeds).flat_map(move |s| [(t, s, true), (t, s, false)]))
        .collect();
    let values: Vec<f64> = jobs
        .par_iter()
        .enumerate()
        .map(|(job, &(t, s, is_ranked))| -> Result<f64> {
            let order = if is_ranked { &ranked[s] } else { &shuffles[s] };
            let wrap = |e: Error| Error::Evaluation { job, source: Box::new(e) };
            let kept = train.without(&order[..cfg.intervals[t]]).map_err(wrap)?;
            let seed = derive_seed(cfg.seed, Purpose::Retrain, s as u64);
            let fit = train_erm(&kept, spec, &cfg.retrain.with_seed(seed)).map_err(wrap)?;
            match cfg.metric {
                RemovalMetric::TestAccuracy => accuracy(spec, &fit.params, test),
                RemovalMetric::MeanQueryLoss => mean_loss(spec, &fit.params, test),
            }
            .map_err(wrap)
        })
        .collect::<Result<_>>()?;

    let rows = cfg
        .intervals
        .iter()
        .enumerate()
        .map(|(t, &interval)| {
            let pick = |arm: bool| -> Vec<f64> {
                jobs.iter().zip(&values).filter(|((jt, _, a), _)| *jt == t && *a == arm).map(|(_, v)| *v).collect()
            };
            let (metric_mean, metric_std) = mean_std(&pick(true));
            let (random_baseline_mean, random_baseline_std) = mean_std(&pick(false));
            RemovalRow { interval, metric_mean, metric_std, random_baseline_mean, random_baseline_std }
        })
        .collect();
    Ok(RemovalReport { metric: cfg.metric, seeds: cfg.seeds, rows })
}
