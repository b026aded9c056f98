//! Covariance against correlation on the same loss matrix.

use serde::{Deserialize, Serialize};

use super::spearman::{average_ranks, spearman};
use crate::attribution::{attribute_all, AttributionMatrix, UncertaintyMeasure};
use crate::ensemble::LossMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAgreement {
    pub query_id: u64,
    /// Spearman between the two score columns; `None` if either is constant.
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureComparison {
    pub covariance: AttributionMatrix,
    pub correlation: AttributionMatrix,
    pub per_query: Vec<QueryAgreement>,
}

impl MeasureComparison {
    /// Mean of the defined per-query agreements.
    pub fn mean_agreement(&self) -> Option<f64> {
        let defined: Vec<f64> = self.per_query.iter().filter_map(|q| q.spearman).collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Position of training row `i` when query column `q` is sorted by descending
/// score (1 = top); ties share the average position.
pub fn rank_position(am: &AttributionMatrix, q: usize, i: usize) -> f64 {
    let negated: Vec<f64> = am.query_column(q).iter().map(|v| -v).collect();
    average_ranks(&negated)[i]
}

pub fn correlation_vs_covariance_report(lm: &LossMatrix) -> Result<MeasureComparison> {
    if lm.n_query() == 0 {
        return Err(Error::input("the comparison needs at least one query column"));
    }
    let covariance = attribute_all(lm, UncertaintyMeasure::Covariance, None)?;
    let correlation = attribute_all(lm, UncertaintyMeasure::Correlation, None)?;
    let per_query = lm
        .query_ids()
        .iter()
        .enumerate()
        .map(|(q, &query_id)| QueryAgreement {
            query_id,
            spearman: spearman(&covariance.query_column(q), &correlation.query_column(q)).ok(),
        })
        .collect();
    Ok(MeasureComparison { covariance, correlation, per_query })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(cols: &[Vec<f64>], n_train: usize) -> LossMatrix {
        let k = cols[0].len();
        let rows = (0..k).map(|r| cols.iter().map(|c| c[r]).collect()).collect();
        LossMatrix::new(rows, (0..cols.len() as u64).collect(), n_train, (0..k as u64).collect()).unwrap()
    }

    #[test]
    fn homoscedastic_columns_agree() {
        // every column is ±1 around its mean, so all stds are equal
        let cols = vec![
            vec![1.0, -1.0, 1.0, -1.0],
            vec![1.0, 1.0, -1.0, -1.0],
            vec![1.0, -1.0, -1.0, 1.0],
            vec![1.0, -1.0, 1.0, -1.0],
        ];
        let report = correlation_vs_covariance_report(&matrix(&cols, 3)).unwrap();
        assert_eq!(report.mean_agreement(), Some(1.0));
    }

    #[test]
    fn outlier_column_drops_under_correlation() {
        let query = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let outlier: Vec<f64> = vec![0.0, 60.0, 30.0, 90.0, 120.0];
        let aligned = vec![1.1, 2.0, 2.9, 4.2, 4.8];
        let report = correlation_vs_covariance_report(&matrix(&[outlier, aligned, query], 2)).unwrap();
        let cov_rank = rank_position(&report.covariance, 0, 0);
        let cor_rank = rank_position(&report.correlation, 0, 0);
        assert_eq!(cov_rank, 1.0);
        assert!(cor_rank > cov_rank);
    }

    #[test]
    fn empty_queries_are_rejected() {
        let lm = matrix(&[vec![1.0, 2.0], vec![0.0, 1.0]], 2);
        assert!(matches!(correlation_vs_covariance_report(&lm), Err(Error::Input(_))));
    }
}
