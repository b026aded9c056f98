//! Attribution scores from a loss matrix.
//!
//! The covariance score of training column `i` and query column `j` is
//! `(1/(K-1)) Σ_k (L_i(θᵏ) - L̄_i)(L_j(θᵏ) - L̄_j)`; the correlation score divides
//! it by both sample standard deviations. Scores carry no `1/n` factor since a
//! common positive scale does not change any ranking.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::LossMatrix;
use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyMeasure {
    Covariance,
    Correlation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnStats {
    pub mean: f64,
    /// Sample standard deviation (denominator `K - 1`).
    pub std: f64,
}

pub fn column_stats(lm: &LossMatrix) -> Result<Vec<ColumnStats>> {
    let k = lm.k();
    if k < 2 {
        return Err(Error::input(format!("need at least 2 members for sample statistics, have {k}")));
    }
    Ok((0..lm.num_columns())
        .map(|c| {
            let col = lm.column(c);
            let mean = col.iter().sum::<f64>() / k as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
            ColumnStats { mean, std: var.sqrt() }
        })
        .collect())
}

fn centered(lm: &LossMatrix, stats: &[ColumnStats], c: usize) -> Vec<f64> {
    lm.rows().iter().map(|row| row[c] - stats[c].mean).collect()
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (a.len() - 1) as f64
}

/// Score between columns `i` and `j` (any two columns of the matrix).
pub fn score(lm: &LossMatrix, i: usize, j: usize, measure: UncertaintyMeasure) -> Result<f64> {
    let cols = lm.num_columns();
    if i >= cols || j >= cols {
        return Err(Error::input(format!("column index out of range for {cols} columns")));
    }
    let stats = column_stats(lm)?;
    let cov = covariance(&centered(lm, &stats, i), &centered(lm, &stats, j));
    match measure {
        UncertaintyMeasure::Covariance => Ok(cov),
        UncertaintyMeasure::Correlation => {
            for c in [i, j] {
                if stats[c].std == 0.0 {
                    return Err(Error::DegenerateColumn { column: lm.column_ids()[c] });
                }
            }
            Ok((cov / (stats[i].std * stats[j].std)).clamp(-1.0, 1.0))
        }
    }
}

/// `n_train x n_query` attribution scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMatrix {
    pub scores: Vec<Vec<f64>>,
    pub train_ids: Vec<u64>,
    pub query_ids: Vec<u64>,
    pub measure: UncertaintyMeasure,
    pub threshold: Option<f64>,
    /// Columns whose zero variance forced their correlation scores to 0.
    pub degenerate_columns: Vec<u64>,
}

/// Sidecar metadata for an attribution CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionMeta {
    pub measure: UncertaintyMeasure,
    pub threshold: Option<f64>,
    pub degenerate_columns: Vec<u64>,
    pub source_digest: String,
    pub config_digest: String,
}

/// Scores for every (training, query) pair. With a threshold, entries below it
/// are set to 0.
pub fn attribute_all(lm: &LossMatrix, measure: UncertaintyMeasure, threshold: Option<f64>) -> Result<AttributionMatrix> {
    if lm.n_train() == 0 || lm.n_query() == 0 {
        return Err(Error::input("loss matrix needs both training and query columns"));
    }
    let stats = column_stats(lm)?;
    let columns: Vec<Vec<f64>> = (0..lm.num_columns()).map(|c| centered(lm, &stats, c)).collect();
    let degenerate: Vec<bool> = stats.iter().map(|s| s.std == 0.0).collect();
    let n_train = lm.n_train();
    let scores = (0..n_train)
        .map(|i| {
            (n_train..lm.num_columns())
                .map(|j| {
                    let cov = covariance(&columns[i], &columns[j]);
                    let v = match measure {
                        UncertaintyMeasure::Covariance => cov,
                        UncertaintyMeasure::Correlation if degenerate[i] || degenerate[j] => 0.0,
                        UncertaintyMeasure::Correlation => (cov / (stats[i].std * stats[j].std)).clamp(-1.0, 1.0),
                    };
                    match threshold {
                        Some(t) if v < t => 0.0,
                        _ => v,
                    }
                })
                .collect()
        })
        .collect();
    let degenerate_columns = if measure == UncertaintyMeasure::Correlation {
        lm.column_ids().iter().zip(&degenerate).filter(|(_, d)| **d).map(|(id, _)| *id).collect()
    } else {
        Vec::new()
    };
    Ok(AttributionMatrix {
        scores,
        train_ids: lm.train_ids().to_vec(),
        query_ids: lm.query_ids().to_vec(),
        measure,
        threshold,
        degenerate_columns,
    })
}

/// Row sums: total score of each training example over all queries.
pub fn aggregate_over_queries(am: &AttributionMatrix) -> Result<Vec<(u64, f64)>> {
    if am.train_ids.is_empty() || am.query_ids.is_empty() {
        return Err(Error::input("attribution matrix is empty"));
    }
    Ok(am.train_ids.iter().zip(&am.scores).map(|(id, row)| (*id, row.iter().sum())).collect())
}

/// Ids by descending total; equal totals in ascending id order.
pub fn rank_training_examples(totals: &[(u64, f64)]) -> Vec<u64> {
    let mut order = totals.to_vec();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.into_iter().map(|(id, _)| id).collect()
}

impl AttributionMatrix {
    /// Scores for query column `q`, one per training example.
    pub fn query_column(&self, q: usize) -> Vec<f64> {
        self.scores.iter().map(|row| row[q]).collect()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("train_id");
        for q in &self.query_ids {
            let _ = write!(out, ",{q}");
        }
        out.push('\n');
        for (id, row) in self.train_ids.iter().zip(&self.scores) {
            let _ = write!(out, "{id}");
            for v in row {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv_str(text: &str, measure: UncertaintyMeasure, threshold: Option<f64>) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty attribution file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 2 || cols[0] != "train_id" {
            return Err(Error::Format("attribution header must start with train_id".into()));
        }
        let parse_id = |s: &str| s.parse::<u64>().map_err(|_| Error::Format(format!("bad id `{s}`")));
        let query_ids = cols[1..].iter().map(|c| parse_id(c)).collect::<Result<Vec<_>>>()?;
        let mut train_ids = Vec::new();
        let mut scores = Vec::new();
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != query_ids.len() + 1 {
                return Err(Error::Format("attribution row has the wrong number of fields".into()));
            }
            train_ids.push(parse_id(fields[0])?);
            scores.push(
                fields[1..]
                    .iter()
                    .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("bad score `{v}`"))))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(Self { scores, train_ids, query_ids, measure, threshold, degenerate_columns: Vec::new() })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(cols: &[&[f64]], n_train: usize) -> LossMatrix {
        let k = cols[0].len();
        let rows = (0..k).map(|r| cols.iter().map(|c| c[r]).collect()).collect();
        LossMatrix::new(rows, (0..cols.len() as u64).collect(), n_train, (0..k as u64).collect()).unwrap()
    }

    #[test]
    fn column_stats_examples() {
        let m = lm(&[&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]], 1);
        let s = column_stats(&m).unwrap();
        assert_eq!(s[0], ColumnStats { mean: 2.0, std: 1.0 });
        assert_eq!(s[1].std, 0.0);
        let two = lm(&[&[0.5, 2.0], &[0.0, 0.0]], 1);
        assert!((column_stats(&two).unwrap()[0].std - 1.5 / 2f64.sqrt()).abs() < 1e-15);
        let one = lm(&[&[1.0], &[2.0]], 1);
        assert!(matches!(column_stats(&one), Err(Error::Input(_))));
    }

    #[test]
    fn covariance_and_correlation_examples() {
        let m = lm(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &[7.0, 7.0, 7.0], &[1.0, 1.0, 1.0]], 1);
        assert_eq!(score(&m, 0, 1, UncertaintyMeasure::Covariance).unwrap(), 2.0);
        assert!((score(&m, 0, 1, UncertaintyMeasure::Correlation).unwrap() - 1.0).abs() < 1e-15);
        assert!((score(&m, 0, 0, UncertaintyMeasure::Correlation).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(score(&m, 2, 3, UncertaintyMeasure::Covariance).unwrap(), 0.0);
        assert!(matches!(score(&m, 0, 2, UncertaintyMeasure::Correlation), Err(Error::DegenerateColumn { column: 2 })));
    }

    #[test]
    fn two_member_matrix() {
        let m = lm(&[&[0.0, 1.0], &[0.0, 1.0]], 1);
        let cov = attribute_all(&m, UncertaintyMeasure::Covariance, None).unwrap();
        assert_eq!(cov.scores, vec![vec![0.5]]);
        let cor = attribute_all(&m, UncertaintyMeasure::Correlation, None).unwrap();
        assert!((cor.scores[0][0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn thresholds() {
        let m = lm(&[&[0.0, 1.0, 3.0], &[1.0, 0.0, 2.0], &[0.0, 1.0, 2.0]], 2);
        let raw = attribute_all(&m, UncertaintyMeasure::Covariance, None).unwrap();
        let inf = attribute_all(&m, UncertaintyMeasure::Covariance, Some(f64::INFINITY)).unwrap();
        assert!(inf.scores.iter().flatten().all(|v| *v == 0.0));
        let neg = attribute_all(&m, UncertaintyMeasure::Covariance, Some(f64::NEG_INFINITY)).unwrap();
        assert_eq!(neg.scores, raw.scores);
        let zero = attribute_all(&m, UncertaintyMeasure::Covariance, Some(0.0)).unwrap();
        for (a, b) in raw.scores.iter().flatten().zip(zero.scores.iter().flatten()) {
            assert_eq!(*b, if *a < 0.0 { 0.0 } else { *a });
        }
    }

    #[test]
    fn degenerate_columns_are_flagged_not_fatal() {
        let m = lm(&[&[1.0, 1.0, 1.0], &[0.0, 1.0, 3.0], &[1.0, 2.0, 2.0]], 2);
        let am = attribute_all(&m, UncertaintyMeasure::Correlation, None).unwrap();
        assert_eq!(am.scores[0], vec![0.0]);
        assert_eq!(am.degenerate_columns, vec![0]);
    }

    #[test]
    fn aggregation_and_ranking() {
        let am = AttributionMatrix {
            scores: vec![vec![1.0, 3.0], vec![2.0, -1.0]],
            train_ids: vec![0, 1],
            query_ids: vec![10, 11],
            measure: UncertaintyMeasure::Covariance,
            threshold: None,
            degenerate_columns: vec![],
        };
        let totals = aggregate_over_queries(&am).unwrap();
        assert_eq!(totals, vec![(0, 4.0), (1, 1.0)]);
        assert_eq!(rank_training_examples(&totals), vec![0, 1]);
        assert_eq!(rank_training_examples(&[(5, 1.0), (2, 1.0), (9, 1.0)]), vec![2, 5, 9]);

        let single = AttributionMatrix { scores: vec![vec![1.0], vec![2.0]], query_ids: vec![10], ..am.clone() };
        assert_eq!(aggregate_over_queries(&single).unwrap(), vec![(0, 1.0), (1, 2.0)]);
    }

    #[test]
    fn csv_round_trip() {
        let am = AttributionMatrix {
            scores: vec![vec![0.1, -3.0], vec![2.5e-7, 1.0 / 7.0]],
            train_ids: vec![4, 9],
            query_ids: vec![100, 101],
            measure: UncertaintyMeasure::Correlation,
            threshold: Some(0.0),
            degenerate_columns: vec![],
        };
        let text = am.to_csv_string();
        assert!(text.starts_with("train_id,100,101\n4,"));
        let back = AttributionMatrix::from_csv_str(&text, am.measure, am.threshold).unwrap();
        assert_eq!(back, am);
    }
}
