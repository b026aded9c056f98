//! Linear datamodeling score: how well additive group scores rank the true
//! outputs of models retrained on random subsets.

use std::collections::HashMap;
use std::fmt::Write as _;

use log::warn;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::spearman::spearman;
use crate::attribution::{attribute_all, AttributionMatrix, UncertaintyMeasure};
use crate::data::Dataset;
use crate::ensemble::LossMatrix;
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::model::{self, ModelSpec};
use crate::rng::{ceil_fraction, derive_seed, permutation, stream, Purpose};
use crate::train::{train_erm, TrainConfig};

/// Below this many subsets the per-query rank correlations are too coarse.
pub const MIN_SUBSETS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputMeasure {
    NegLoss,
    Margin,
}

fn default_seeds() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdsConfig {
    /// Subset fraction `α`.
    pub alpha: f64,
    /// Number of subsets `M`.
    pub subsets: usize,
    #[serde(default = "default_seeds")]
    pub seeds_per_subset: usize,
    /// Defaults to the margin for classifiers and negative loss for regression.
    #[serde(default)]
    pub output_measure: Option<OutputMeasure>,
    pub retrain: TrainConfig,
    pub seed: u64,
}

impl LdsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::input(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.subsets < 2 {
            return Err(Error::input("LDS needs at least 2 subsets"));
        }
        if self.seeds_per_subset == 0 {
            return Err(Error::input("seeds_per_subset must be positive"));
        }
        self.retrain.validate()
    }

    pub fn measure_for(&self, spec: &ModelSpec) -> OutputMeasure {
        self.output_measure
            .unwrap_or(if spec.is_classification() { OutputMeasure::Margin } else { OutputMeasure::NegLoss })
    }
}

/// Retrained outputs for every subset, reusable across attribution methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdsGroundTruth {
    pub config: LdsConfig,
    pub measure: OutputMeasure,
    pub train_ids: Vec<u64>,
    pub query_ids: Vec<u64>,
    /// Training rows of each subset, ascending.
    pub subsets: Vec<Vec<usize>>,
    /// `M x n_query` seed-averaged outputs.
    pub outputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLds {
    pub query_id: u64,
    pub lds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdsReport {
    pub mean: f64,
    /// Standard error of the mean over queries.
    pub std_error: f64,
    pub alpha: f64,
    pub subsets: usize,
    pub seeds_per_subset: usize,
    pub seed: u64,
    pub per_query: Vec<QueryLds>,
    /// Queries whose group scores or outputs were constant; they count as 0.
    pub undefined_queries: Vec<u64>,
}

impl LdsReport {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("query_id,lds\n");
        for q in &self.per_query {
            let _ = writeln!(out, "{},{}", q.query_id, fmt_f64(q.lds));
        }
        out
    }
}

fn output(measure: OutputMeasure, spec: &ModelSpec, params: &crate::model::ParamVector, ex: crate::data::Example<'_>) -> Result<f64> {
    match measure {
        OutputMeasure::NegLoss => Ok(-model::per_example_loss(spec, params, ex)?),
        OutputMeasure::Margin => model::margin(spec, params, ex),
    }
}

/// `M` subsets of size `⌈αn⌉`, each retrained from scratch under `S` seeds.
pub fn lds_ground_truth(train: &Dataset, queries: &Dataset, spec: &ModelSpec, cfg: &LdsConfig) -> Result<LdsGroundTruth> {
    cfg.validate()?;
    crate::train::check_compatible(train, spec)?;
    crate::train::check_compatible(queries, spec)?;
    let measure = cfg.measure_for(spec);
    if measure == OutputMeasure::Margin && !spec.is_classification() {
        return Err(Error::unsupported("the margin output needs a classification model"));
    }
    if cfg.subsets < MIN_SUBSETS {
        warn!("LDS with only {} subsets gives coarse rank correlations (at least {MIN_SUBSETS} advised)", cfg.subsets);
    }
    let n = train.len();
    let size = ceil_fraction(cfg.alpha, n);
    let subsets: Vec<Vec<usize>> = (0..cfg.subsets)
        .map(|m| {
            let mut rows = permutation(n, &mut stream(cfg.seed, Purpose::LdsSubsets, m as u64));
            rows.truncate(size);
            rows.sort_unstable();
            rows
        })
        .collect();
    let s = cfg.seeds_per_subset;
    let jobs: Vec<(usize, usize)> = (0..cfg.subsets).flat_map(|m| (0..s).map(move |j| (m, j))).collect();
    let runs: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(m, j)| -> Result<Vec<f64>> {
            let wrap = |e: Error| Error::Evaluation { job: m, source: Box::new(e) };
            let data = train.select(&subsets[m]).map_err(wrap)?;
            let seed = derive_seed(cfg.seed, Purpose::Retrain, (m * s + j) as u64);
            let fit = train_erm(&data, spec, &cfg.retrain.with_seed(seed)).map_err(wrap)?;
            queries.examples().map(|q| output(measure, spec, &fit.params, q)).collect::<Result<_>>().map_err(wrap)
        })
        .collect::<Result<_>>()?;
    let outputs = runs
        .chunks(s)
        .map(|group| {
            (0..queries.len()).map(|q| group.iter().map(|r| r[q]).sum::<f64>() / s as f64).collect()
        })
        .collect();
    Ok(LdsGroundTruth {
        config: cfg.clone(),
        measure,
        train_ids: train.ids().to_vec(),
        query_ids: queries.ids().to_vec(),
        subsets,
        outputs,
    })
}

/// `Σ_{i ∈ subset} τ(q, i)` for every query column.
pub fn group_scores(scores: &[Vec<f64>], subset: &[usize]) -> Vec<f64> {
    let nq = scores.first().map_or(0, Vec::len);
    let mut out = vec![0.0; nq];
    for &i in subset {
        for (o, v) in out.iter_mut().zip(&scores[i]) {
            *o += v;
        }
    }
    out
}

/// Rows of `tau` reordered to the ground truth's training and query ids.
fn align(gt: &LdsGroundTruth, tau: &AttributionMatrix) -> Result<Vec<Vec<f64>>> {
    let rows: HashMap<u64, usize> = tau.train_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let cols: HashMap<u64, usize> = tau.query_ids.iter().enumerate().map(|(j, id)| (*id, j)).collect();
    let col_idx = gt
        .query_ids
        .iter()
        .map(|id| cols.get(id).copied().ok_or_else(|| Error::input(format!("scores miss query id {id}"))))
        .collect::<Result<Vec<_>>>()?;
    gt.train_ids
        .iter()
        .map(|id| {
            let r = rows.get(id).ok_or_else(|| Error::input(format!("scores miss training id {id}")))?;
            Ok(col_idx.iter().map(|&j| tau.scores[*r][j]).collect())
        })
        .collect()
}

/// Per-query Spearman between true subset outputs and group scores.
pub fn lds_score(gt: &LdsGroundTruth, tau: &AttributionMatrix) -> Result<LdsReport> {
    let aligned = align(gt, tau)?;
    let groups: Vec<Vec<f64>> = gt.subsets.iter().map(|s| group_scores(&aligned, s)).collect();
    let mut per_query = Vec::with_capacity(gt.query_ids.len());
    let mut undefined_queries = Vec::new();
    for (q, &query_id) in gt.query_ids.iter().enumerate() {
        let truth: Vec<f64> = gt.outputs.iter().map(|o| o[q]).collect();
        let predicted: Vec<f64> = groups.iter().map(|g| g[q]).collect();
        let lds = match spearman(&truth, &predicted) {
            Ok(r) => r,
            Err(Error::Numeric(_)) => {
                undefined_queries.push(query_id);
                0.0
            }
            Err(e) => return Err(e),
        };
        per_query.push(QueryLds { query_id, lds });
    }
    let values: Vec<f64> = per_query.iter().map(|q| q.lds).collect();
    let (mean, std_error) = mean_and_std_error(&values);
    Ok(LdsReport {
        mean,
        std_error,
        alpha: gt.config.alpha,
        subsets: gt.config.subsets,
        seeds_per_subset: gt.config.seeds_per_subset,
        seed: gt.config.seed,
        per_query,
        undefined_queries,
    })
}

pub(crate) fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Ground truth and scoring in one call.
pub fn lds_evaluate(
    train: &Dataset,
    queries: &Dataset,
    spec: &ModelSpec,
    tau: &AttributionMatrix,
    cfg: &LdsConfig,
) -> Result<LdsReport> {
    // validate coverage before paying for retraining
    for id in train.ids() {
        if !tau.train_ids.contains(id) {
            return Err(Error::input(format!("scores miss training id {id}")));
        }
    }
    let gt = lds_ground_truth(train, queries, spec, cfg)?;
    lds_score(&gt, tau)
}

/// Independent standard-normal scores with the given ids.
pub fn random_scores(train_ids: &[u64], query_ids: &[u64], seed: u64) -> AttributionMatrix {
    let mut rng = stream(seed, Purpose::Null, 0);
    let scores = train_ids
        .iter()
        .map(|_| query_ids.iter().map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    AttributionMatrix {
        scores,
        train_ids: train_ids.to_vec(),
        query_ids: query_ids.to_vec(),
        measure: UncertaintyMeasure::Covariance,
        threshold: None,
        degenerate_columns: Vec::new(),
    }
}

/// Mean LDS of `reps` independent random score matrices.
pub fn null_lds(gt: &LdsGroundTruth, reps: usize, seed: u64) -> Result<Vec<f64>> {
    (0..reps)
        .map(|r| {
            let tau = random_scores(&gt.train_ids, &gt.query_ids, derive_seed(seed, Purpose::Null, r as u64));
            Ok(lds_score(gt, &tau)?.mean)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub mean_lds: f64,
    pub std_error: f64,
}

/// Mean LDS against ensemble size, with an optional exponential fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSweep {
    pub points: Vec<SweepPoint>,
    pub fit: Option<super::ScalingFit>,
}

impl ScalingSweep {
    /// True when each mean is at least the previous one minus its standard
    /// error.
    pub fn nondecreasing_within_se(&self) -> bool {
        self.points.windows(2).all(|w| w[1].mean_lds >= w[0].mean_lds - w[0].std_error.max(w[1].std_error))
    }
}

/// LDS of the first `k` members of `lm` for each `k` in `ks`.
pub fn lds_sweep(
    gt: &LdsGroundTruth,
    lm: &LossMatrix,
    ks: &[usize],
    measure: UncertaintyMeasure,
    threshold: Option<f64>,
) -> Result<ScalingSweep> {
    let points = ks
        .iter()
        .map(|&k| {
            let am = attribute_all(&lm.head(k)?, measure, threshold)?;
            let report = lds_score(gt, &am)?;
            Ok(SweepPoint { k, mean_lds: report.mean, std_error: report.std_error })
        })
        .collect::<Result<Vec<_>>>()?;
    let fit = if points.len() >= 4 {
        let xs: Vec<f64> = points.iter().map(|p| p.k as f64).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.mean_lds).collect();
        match super::fit_exponential(&xs, &ys) {
            Ok(fit) => Some(fit),
            Err(e) => {
                log::warn!("scaling fit skipped: {e}");
                None
            }
        }
    } else {
        None
    };
    Ok(ScalingSweep { points, fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn group_scores_are_additive(
            scores in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 8),
            split in prop::collection::vec(any::<bool>(), 8),
        ) {
            let s1: Vec<usize> = (0..8).filter(|&i| split[i]).collect();
            let s2: Vec<usize> = (0..8).filter(|&i| !split[i]).collect();
            let all: Vec<usize> = (0..8).collect();
            let (a, b, c) = (group_scores(&scores, &s1), group_scores(&scores, &s2), group_scores(&scores, &all));
            for q in 0..3 {
                prop_assert!((a[q] + b[q] - c[q]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_validation() {
        let retrain = TrainConfig { learning_rate: 0.1, steps: 10, batch_size: 4, momentum: 0.0, l2: 0.0, seed: 0 };
        let ok = LdsConfig { alpha: 0.5, subsets: 20, seeds_per_subset: 1, output_measure: None, retrain, seed: 1 };
        ok.validate().unwrap();
        assert!(LdsConfig { alpha: 1.0, ..ok.clone() }.validate().is_err());
        assert!(LdsConfig { subsets: 1, ..ok.clone() }.validate().is_err());
        assert!(LdsConfig { seeds_per_subset: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn two_subsets_give_unit_correlations() {
        let gt = LdsGroundTruth {
            config: LdsConfig {
                alpha: 0.5,
                subsets: 2,
                seeds_per_subset: 1,
                output_measure: None,
                retrain: TrainConfig { learning_rate: 0.1, steps: 1, batch_size: 1, momentum: 0.0, l2: 0.0, seed: 0 },
                seed: 0,
            },
            measure: OutputMeasure::NegLoss,
            train_ids: vec![0, 1],
            query_ids: vec![9],
            subsets: vec![vec![0], vec![1]],
            outputs: vec![vec![0.3], vec![0.1]],
        };
        let tau = AttributionMatrix {
            scores: vec![vec![-1.0], vec![2.0]],
            train_ids: vec![0, 1],
            query_ids: vec![9],
            measure: UncertaintyMeasure::Covariance,
            threshold: None,
            degenerate_columns: vec![],
        };
        assert_eq!(lds_score(&gt, &tau).unwrap().mean, -1.0);
        let flat = AttributionMatrix { scores: vec![vec![0.0], vec![0.0]], ..tau };
        let report = lds_score(&gt, &flat).unwrap();
        assert_eq!(report.undefined_queries, vec![9]);
        assert_eq!(report.mean, 0.0);
        assert_eq!(report.to_csv_string(), "query_id,lds\n9,0.0000000000000000e0\n");
    }
}
