//! JSON run configuration shared by every pipeline command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::UncertaintyMeasure;
use crate::curvature::{Damping, SecondOrderKind};
use crate::data::{Dataset, LabelKind};
use crate::ensemble::EnsembleConfig;
use crate::error::{Error, Result};
use crate::eval::{LdsConfig, RemovalConfig};
use crate::io::{digest_bytes, digest_json, read_artifact};
use crate::model::ModelSpec;
use crate::synthetic::{generate_split, SyntheticRecipe};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Two CSV files in the `id,feat_0,...,label` layout.
    Files { train: PathBuf, queries: PathBuf, labels: LabelKind },
    /// `recipe.n` training rows and `queries` query rows from one draw.
    Synthetic { recipe: SyntheticRecipe, queries: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionConfig {
    pub measure: UncertaintyMeasure,
    #[serde(default)]
    pub threshold: Option<f64>,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self { measure: UncertaintyMeasure::Correlation, threshold: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub kind: SecondOrderKind,
    #[serde(default)]
    pub damping: Damping,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { kind: SecondOrderKind::Hessian, damping: Damping::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    /// Ensemble sizes to evaluate; each must not exceed `ensemble.k`.
    pub ks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnbiasednessConfig {
    pub index: usize,
    pub k_mc: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Random parameter draws per training example checked.
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub lds: Option<LdsConfig>,
    #[serde(default)]
    pub removal: Option<RemovalConfig>,
    #[serde(default)]
    pub scaling: Option<ScalingConfig>,
    #[serde(default)]
    pub unbiasedness: Option<UnbiasednessConfig>,
    #[serde(default)]
    pub check_grads: Option<GradCheckConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub model: ModelSpec,
    pub erm: TrainConfig,
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub attribution: AttributionConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[serde(default)]
    pub workers: Option<usize>,
}

fn schema(e: Error) -> Error {
    match e {
        Error::Schema(_) => e,
        other => Error::Schema(other.to_string()),
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; relative dataset paths resolve
    /// against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_artifact(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Schema("config is not UTF-8".into()))?;
        let mut cfg = Self::from_json_str(&text)?;
        if let DatasetSource::Files { train, queries, .. } = &mut cfg.dataset {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [train, queries] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(schema)?;
        self.erm.validate().map_err(schema)?;
        self.ensemble.validate().map_err(schema)?;
        if let DatasetSource::Synthetic { recipe, queries } = &self.dataset {
            recipe.validate().map_err(schema)?;
            if *queries == 0 {
                return Err(Error::Schema("dataset.queries must be positive".into()));
            }
        }
        if let Some(lds) = &self.eval.lds {
            lds.validate().map_err(schema)?;
        }
        if let Some(scaling) = &self.eval.scaling {
            if scaling.ks.is_empty() || scaling.ks.iter().any(|&k| k < 2 || k > self.ensemble.k) {
                return Err(Error::Schema(format!("scaling.ks must lie in [2, {}]", self.ensemble.k)));
            }
        }
        if let Some(gc) = &self.eval.check_grads {
            if gc.samples == 0 || !(gc.step > 0.0) || !(gc.tolerance > 0.0) {
                return Err(Error::Schema("check_grads needs positive samples, step and tolerance".into()));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::Schema("workers must be positive".into()));
        }
        Ok(())
    }

    /// Digest of everything that determines numeric results. The output
    /// directory and worker count are left out.
    pub fn digest(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.workers = None;
        digest_json(&canonical)
    }

    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSource::Files { train, queries, labels } => {
                Ok((Dataset::read_csv(train, *labels)?, Dataset::read_csv(queries, *labels)?))
            }
            DatasetSource::Synthetic { recipe, queries } => generate_split(recipe, *queries),
        }
    }
}

/// Digest of a train/query pair, from their CSV serializations.
pub fn dataset_digest(train: &Dataset, queries: &Dataset) -> String {
    let mut bytes = train.to_csv_string().into_bytes();
    bytes.push(0);
    bytes.extend_from_slice(queries.to_csv_string().as_bytes());
    digest_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const DEMO: &str = r#"{
        "dataset": {"source": "synthetic", "queries": 4,
                    "recipe": {"kind": "linear-noise", "n": 12, "d": 2, "noise": 0.1, "seed": 3}},
        "model": {"kind": "linear-regression", "input_dim": 2},
        "erm": {"learning_rate": 0.1, "steps": 100, "batch_size": 12, "seed": 1},
        "ensemble": {"k": 8, "kind": "hessian", "access": "white-box",
                     "train": {"learning_rate": 0.1, "steps": 20, "batch_size": 12, "seed": 2},
                     "master_seed": 5},
        "output_dir": "out"
    }"#;

    #[test]
    fn parses_and_digests() {
        let cfg = RunConfig::from_json_str(DEMO).unwrap();
        assert_eq!(cfg.attribution, AttributionConfig::default());
        let moved = RunConfig { output_dir: "elsewhere".into(), workers: Some(3), ..cfg.clone() };
        assert_eq!(cfg.digest().unwrap(), moved.digest().unwrap());
        let mut reseeded = cfg.clone();
        reseeded.ensemble.master_seed = 6;
        assert_ne!(cfg.digest().unwrap(), reseeded.digest().unwrap());
        let (train, queries) = cfg.load_datasets().unwrap();
        assert_eq!((train.len(), queries.len()), (12, 4));
    }

    #[test]
    fn unknown_keys_are_schema_errors() {
        let extra = DEMO.replacen("\"output_dir\"", "\"colour\": 1, \"output_dir\"", 1);
        assert!(matches!(RunConfig::from_json_str(&extra), Err(Error::Schema(_))));
        let nested = DEMO.replacen("\"master_seed\": 5", "\"master_seed\": 5, \"mystery\": true", 1);
        assert!(matches!(RunConfig::from_json_str(&nested), Err(Error::Schema(_))));
        let unseeded = DEMO.replacen(", \"seed\": 1}", "}", 1);
        assert!(matches!(RunConfig::from_json_str(&unseeded), Err(Error::Schema(_))));
        let bad_k = DEMO.replacen("\"k\": 8", "\"k\": 0", 1);
        assert!(matches!(RunConfig::from_json_str(&bad_k), Err(Error::Schema(_))));
    }
}
