//! Command implementations behind the CLI. Each command reads its upstream
//! artifacts from the output directory, writes its own atomically, and tags
//! every JSON artifact with the config digest.

use std::path::{Path, PathBuf};

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{aggregate_over_queries, attribute_all, AttributionMatrix, AttributionMeta};
use crate::config::{dataset_digest, RunConfig};
use crate::curvature::{Damping, InfluenceOracle, SecondOrderKind};
use crate::data::Dataset;
use crate::ensemble::{run_blackbox_ensemble, run_ensemble, AccessMode, AnchorState, LossMatrix, LossMatrixMeta, SimulatedModel};
use crate::error::{Error, Result};
use crate::eval::{lds_ground_truth, lds_score, lds_sweep, removal_harness, unbiasedness_check, UnbiasednessReport};
use crate::io::{digest_bytes, digest_json, read_artifact, read_json, write_atomic, write_json};
use crate::model::{self, finite_diff_grad, relative_error, ModelSpec, ParamVector, Scalar};
use crate::plot::{emit_plot_data, Report, ReportArtifact};
use crate::rng::{stream, Purpose};
use crate::train::{accuracy, train_erm, TrainReport};

pub const TRAIN_CSV: &str = "train.csv";
pub const QUERIES_CSV: &str = "queries.csv";
pub const DATASET_JSON: &str = "dataset.json";
pub const ANCHOR_JSON: &str = "anchor.json";
pub const ANCHOR_STATE_JSON: &str = "anchor_state.json";
pub const LOSS_MATRIX_CSV: &str = "loss_matrix.csv";
pub const LOSS_MATRIX_JSON: &str = "loss_matrix.json";
pub const ATTRIBUTION_CSV: &str = "attribution.csv";
pub const ATTRIBUTION_JSON: &str = "attribution.json";
pub const ORACLE_CSV: &str = "oracle.csv";
pub const ORACLE_JSON: &str = "oracle.json";
pub const LDS_CSV: &str = "lds.csv";
pub const LDS_JSON: &str = "lds.json";
pub const REMOVAL_CSV: &str = "removal.csv";
pub const REMOVAL_JSON: &str = "removal.json";
pub const SCALING_JSON: &str = "scaling.json";
pub const UNBIASEDNESS_JSON: &str = "unbiasedness.json";
pub const GRAD_CHECK_JSON: &str = "grad_check.json";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Ensemble,
    Attribute,
    Oracle,
    /// Scores default to the attribution CSV.
    Lds { scores: Option<PathBuf> },
    Removal { scores: Option<PathBuf> },
    Unbiasedness,
    ScalingFit,
    CheckGrads,
    PlotData { report: PathBuf },
}

/// Process exit status for an error class.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingArtifact(_) => 2,
        Error::Schema(_) | Error::Format(_) | Error::Json(_) => 3,
        Error::Numeric(_)
        | Error::Training { .. }
        | Error::Capacity { .. }
        | Error::DegenerateExample { .. }
        | Error::DegenerateColumn { .. }
        | Error::Fit(_) => 4,
        Error::Evaluation { source, .. } => exit_code(source),
        Error::Input(_) | Error::Unsupported(_) | Error::Io(_) => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetArtifact {
    pub config_digest: String,
    pub dataset_digest: String,
    pub n_train: usize,
    pub n_query: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorArtifact {
    pub config_digest: String,
    pub dataset_digest: String,
    pub spec_digest: String,
    pub spec: ModelSpec,
    pub params: ParamVector,
    pub train_loss: f64,
    pub mean_grad_norm: f64,
    pub train_accuracy: Option<f64>,
    pub report: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorStateArtifact {
    pub config_digest: String,
    pub dataset_digest: String,
    pub state: AnchorState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleMeta {
    pub config_digest: String,
    pub dataset_digest: String,
    pub kind: SecondOrderKind,
    pub damping: Damping,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessArtifact {
    pub config_digest: String,
    #[serde(flatten)]
    pub report: UnbiasednessReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub config_digest: String,
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    pub max_loss_error: f64,
    pub max_margin_error: Option<f64>,
    pub passed: bool,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub out: PathBuf,
    pub config_digest: String,
}

impl Pipeline {
    /// `out` overrides the config's output directory; `seed` overrides the
    /// ensemble master seed (and so enters the digest).
    pub fn new(mut config: RunConfig, out: Option<PathBuf>, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            config.ensemble.master_seed = s;
        }
        config.validate()?;
        let out = out.unwrap_or_else(|| config.output_dir.clone());
        let config_digest = config.digest()?;
        Ok(Self { config, out, config_digest })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn datasets(&self) -> Result<(Dataset, Dataset, String)> {
        let (train, queries) = self.config.load_datasets()?;
        let digest = dataset_digest(&train, &queries);
        Ok((train, queries, digest))
    }

    fn require_dataset(&self, name: &str, recorded: &str, current: &str) -> Result<()> {
        if recorded != current {
            return Err(Error::Schema(format!(
                "{name} was produced from a different dataset (digest {recorded}, current {current})"
            )));
        }
        Ok(())
    }

    fn anchor(&self, dataset: &str) -> Result<AnchorArtifact> {
        let anchor: AnchorArtifact = read_json(&self.path(ANCHOR_JSON))?;
        self.require_dataset(ANCHOR_JSON, &anchor.dataset_digest, dataset)?;
        if anchor.spec != self.config.model {
            return Err(Error::Schema("anchor was trained for a different model spec".into()));
        }
        Ok(anchor)
    }

    fn scores(&self, path: Option<&Path>) -> Result<AttributionMatrix> {
        let path = path.map(Path::to_path_buf).unwrap_or_else(|| self.path(ATTRIBUTION_CSV));
        let bytes = read_artifact(&path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Format("score file is not UTF-8".into()))?;
        let a = &self.config.attribution;
        AttributionMatrix::from_csv_str(&text, a.measure, a.threshold)
    }

    fn loss_matrix(&self, dataset: &str) -> Result<(LossMatrix, LossMatrixMeta)> {
        let meta: LossMatrixMeta = read_json(&self.path(LOSS_MATRIX_JSON))?;
        self.require_dataset(LOSS_MATRIX_CSV, &meta.dataset_digest, dataset)?;
        let bytes = read_artifact(&self.path(LOSS_MATRIX_CSV))?;
        if digest_bytes(&bytes) != meta.digest {
            return Err(Error::Format("loss matrix does not match its sidecar digest".into()));
        }
        let text = String::from_utf8(bytes).map_err(|_| Error::Format("loss matrix is not UTF-8".into()))?;
        Ok((LossMatrix::from_csv_str(&text, meta.n_train)?, meta))
    }

    /// Runs one command and returns the artifacts it wrote.
    pub fn run(&self, command: &Command) -> Result<Vec<PathBuf>> {
        info!("{command:?} (config {})", &self.config_digest[..12]);
        match command {
            Command::GenData => self.gen_data(),
            Command::Train => self.train(),
            Command::Ensemble => self.ensemble(),
            Command::Attribute => self.attribute(),
            Command::Oracle => self.oracle(),
            Command::Lds { scores } => self.lds(scores.as_deref()),
            Command::Removal { scores } => self.removal(scores.as_deref()),
            Command::Unbiasedness => self.unbiasedness(),
            Command::ScalingFit => self.scaling_fit(),
            Command::CheckGrads => self.check_grads(),
            Command::PlotData { report } => self.plot_data(report),
        }
    }

    fn gen_data(&self) -> Result<Vec<PathBuf>> {
        let (train, queries, digest) = self.datasets()?;
        let paths = [self.path(TRAIN_CSV), self.path(QUERIES_CSV), self.path(DATASET_JSON)];
        train.write_csv(&paths[0])?;
        queries.write_csv(&paths[1])?;
        write_json(
            &paths[2],
            &DatasetArtifact {
                config_digest: self.config_digest.clone(),
                dataset_digest: digest,
                n_train: train.len(),
                n_query: queries.len(),
            },
        )?;
        Ok(paths.to_vec())
    }

    fn train(&self) -> Result<Vec<PathBuf>> {
        let (train, _, digest) = self.datasets()?;
        let spec = &self.config.model;
        let fit = train_erm(&train, spec, &self.config.erm)?;
        let train_accuracy = if spec.is_classification() { Some(accuracy(spec, &fit.params, &train)?) } else { None };
        let e = &self.config.ensemble;
        let state = AnchorState::build(spec, &fit.params, &train, e.kind, e.access, e.use_logits_form)?;
        let anchor = AnchorArtifact {
            config_digest: self.config_digest.clone(),
            dataset_digest: digest.clone(),
            spec_digest: digest_json(spec)?,
            spec: spec.clone(),
            params: fit.params,
            train_loss: fit.train_loss,
            mean_grad_norm: fit.mean_grad_norm,
            train_accuracy,
            report: fit.report,
        };
        let paths = [self.path(ANCHOR_JSON), self.path(ANCHOR_STATE_JSON)];
        write_json(&paths[0], &anchor)?;
        write_json(
            &paths[1],
            &AnchorStateArtifact { config_digest: self.config_digest.clone(), dataset_digest: digest, state },
        )?;
        Ok(paths.to_vec())
    }

    fn ensemble(&self) -> Result<Vec<PathBuf>> {
        let (train, queries, digest) = self.datasets()?;
        let anchor = self.anchor(&digest)?;
        let spec = &self.config.model;
        let cfg = &self.config.ensemble;
        let lm = match cfg.access {
            AccessMode::WhiteBox => {
                let cached: AnchorStateArtifact = read_json(&self.path(ANCHOR_STATE_JSON))?;
                self.require_dataset(ANCHOR_STATE_JSON, &cached.dataset_digest, &digest)?;
                if cached.state.params != anchor.params {
                    return Err(Error::Schema("anchor caches belong to different parameters".into()));
                }
                let n = train.len();
                cached.state.spot_check(spec, &train, &[0, n / 2, n - 1])?;
                run_ensemble(&train, &queries, spec, &cached.state, cfg)?
            }
            AccessMode::BlackBox => {
                let handle = SimulatedModel::new(spec.clone(), anchor.params.clone())?.with_custom_objectives();
                run_blackbox_ensemble(&handle, &train, &queries, cfg)?
            }
        };
        let csv = lm.to_csv_string();
        let meta = LossMatrixMeta {
            k: cfg.k,
            r: cfg.r,
            kind: cfg.kind,
            access: cfg.access,
            use_logits_form: cfg.use_logits_form,
            master_seed: cfg.master_seed,
            n_train: train.len(),
            spec_digest: anchor.spec_digest,
            dataset_digest: digest,
            config_digest: self.config_digest.clone(),
            digest: digest_bytes(csv.as_bytes()),
        };
        let paths = [self.path(LOSS_MATRIX_CSV), self.path(LOSS_MATRIX_JSON)];
        write_atomic(&paths[0], csv.as_bytes())?;
        write_json(&paths[1], &meta)?;
        Ok(paths.to_vec())
    }

    fn attribute(&self) -> Result<Vec<PathBuf>> {
        let (_, _, digest) = self.datasets()?;
        let (lm, meta) = self.loss_matrix(&digest)?;
        let a = &self.config.attribution;
        let am = attribute_all(&lm, a.measure, a.threshold)?;
        let paths = [self.path(ATTRIBUTION_CSV), self.path(ATTRIBUTION_JSON)];
        am.write_csv(&paths[0])?;
        write_json(
            &paths[1],
            &AttributionMeta {
                measure: am.measure,
                threshold: am.threshold,
                degenerate_columns: am.degenerate_columns.clone(),
                source_digest: meta.digest,
                config_digest: self.config_digest.clone(),
            },
        )?;
        Ok(paths.to_vec())
    }

    fn oracle(&self) -> Result<Vec<PathBuf>> {
        let (train, queries, digest) = self.datasets()?;
        let anchor = self.anchor(&digest)?;
        let o = &self.config.oracle;
        let oracle = InfluenceOracle::new(o.kind, &self.config.model, &anchor.params, &train, o.damping)?;
        let am = AttributionMatrix {
            scores: oracle.matrix(&train, &queries)?,
            train_ids: train.ids().to_vec(),
            query_ids: queries.ids().to_vec(),
            measure: self.config.attribution.measure,
            threshold: None,
            degenerate_columns: Vec::new(),
        };
        let paths = [self.path(ORACLE_CSV), self.path(ORACLE_JSON)];
        am.write_csv(&paths[0])?;
        write_json(
            &paths[1],
            &OracleMeta {
                config_digest: self.config_digest.clone(),
                dataset_digest: digest,
                kind: o.kind,
                damping: o.damping,
                lambda: oracle.curvature.damping,
            },
        )?;
        Ok(paths.to_vec())
    }

    fn write_report(&self, json: &str, csv: Option<(&str, String)>, report: Report) -> Result<Vec<PathBuf>> {
        let mut paths = Vec::new();
        if let Some((name, text)) = csv {
            paths.push(self.path(name));
            write_atomic(&self.path(name), text.as_bytes())?;
        }
        write_json(&self.path(json), &ReportArtifact { config_digest: self.config_digest.clone(), report })?;
        paths.push(self.path(json));
        Ok(paths)
    }

    fn lds(&self, scores: Option<&Path>) -> Result<Vec<PathBuf>> {
        let cfg = self.config.eval.lds.as_ref().ok_or_else(|| Error::Schema("config has no eval.lds section".into()))?;
        let tau = self.scores(scores)?;
        let (train, queries, _) = self.datasets()?;
        let gt = lds_ground_truth(&train, &queries, &self.config.model, cfg)?;
        let report = lds_score(&gt, &tau)?;
        info!("mean LDS {:.4} ± {:.4}", report.mean, report.std_error);
        self.write_report(LDS_JSON, Some((LDS_CSV, report.to_csv_string())), Report::Lds(report))
    }

    fn removal(&self, scores: Option<&Path>) -> Result<Vec<PathBuf>> {
        let cfg =
            self.config.eval.removal.as_ref().ok_or_else(|| Error::Schema("config has no eval.removal section".into()))?;
        let tau = self.scores(scores)?;
        let totals = aggregate_over_queries(&tau)?;
        let (train, queries, _) = self.datasets()?;
        let report = removal_harness(&train, &queries, &self.config.model, &totals, cfg)?;
        self.write_report(REMOVAL_JSON, Some((REMOVAL_CSV, report.to_csv_string())), Report::Removal(report))
    }

    fn unbiasedness(&self) -> Result<Vec<PathBuf>> {
        let cfg = self
            .config
            .eval
            .unbiasedness
            .as_ref()
            .ok_or_else(|| Error::Schema("config has no eval.unbiasedness section".into()))?;
        let (train, _, _) = self.datasets()?;
        let report = unbiasedness_check(&self.config.model, &train, cfg.index, cfg.k_mc, cfg.seed)?;
        let path = self.path(UNBIASEDNESS_JSON);
        write_json(&path, &UnbiasednessArtifact { config_digest: self.config_digest.clone(), report })?;
        Ok(vec![path])
    }

    fn scaling_fit(&self) -> Result<Vec<PathBuf>> {
        let lds = self.config.eval.lds.as_ref().ok_or_else(|| Error::Schema("config has no eval.lds section".into()))?;
        let scaling =
            self.config.eval.scaling.as_ref().ok_or_else(|| Error::Schema("config has no eval.scaling section".into()))?;
        let (train, queries, digest) = self.datasets()?;
        let (lm, _) = self.loss_matrix(&digest)?;
        let gt = lds_ground_truth(&train, &queries, &self.config.model, lds)?;
        let a = &self.config.attribution;
        let sweep = lds_sweep(&gt, &lm, &scaling.ks, a.measure, a.threshold)?;
        self.write_report(SCALING_JSON, None, Report::LdsSweep(sweep))
    }

    fn check_grads(&self) -> Result<Vec<PathBuf>> {
        let cfg = self
            .config
            .eval
            .check_grads
            .clone()
            .unwrap_or(crate::config::GradCheckConfig { samples: 20, step: 1e-5, tolerance: 1e-5, seed: 0 });
        let (train, _, _) = self.datasets()?;
        let spec = &self.config.model;
        let mut max_loss: f64 = 0.0;
        let mut max_margin: Option<f64> = None;
        for s in 0..cfg.samples {
            let mut rng = stream(cfg.seed, Purpose::MonteCarlo, s as u64);
            let params = ParamVector((0..spec.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect());
            let ex = train.example(s % train.len());
            let analytic = model::per_example_grad(spec, &params, ex)?;
            let fd = finite_diff_grad(spec, &params, ex, cfg.step, Scalar::Loss)?;
            max_loss = max_loss.max(relative_error(&analytic, &fd));
            if spec.is_classification() {
                let analytic = model::margin_grad(spec, &params, ex)?;
                let fd = finite_diff_grad(spec, &params, ex, cfg.step, Scalar::Margin)?;
                max_margin = Some(max_margin.unwrap_or(0.0).max(relative_error(&analytic, &fd)));
            }
        }
        let passed = max_loss <= cfg.tolerance && max_margin.map_or(true, |m| m <= cfg.tolerance);
        let path = self.path(GRAD_CHECK_JSON);
        write_json(
            &path,
            &GradCheckReport {
                config_digest: self.config_digest.clone(),
                samples: cfg.samples,
                step: cfg.step,
                tolerance: cfg.tolerance,
                max_loss_error: max_loss,
                max_margin_error: max_margin,
                passed,
            },
        )?;
        if !passed {
            return Err(Error::numeric(format!(
                "gradient check failed: loss error {max_loss:.3e}, margin error {max_margin:?}"
            )));
        }
        Ok(vec![path])
    }

    fn plot_data(&self, report: &Path) -> Result<Vec<PathBuf>> {
        let bytes = read_artifact(report)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::input("report is not UTF-8"))?;
        let artifact = ReportArtifact::from_json_str(&text)?;
        let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
        let path = self.path(&format!("{stem}.plot.csv"));
        write_atomic(&path, emit_plot_data(&artifact.report).as_bytes())?;
        Ok(vec![path])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(exit_code(&Error::MissingArtifact("x".into())), 2);
        assert_eq!(exit_code(&Error::Schema("x".into())), 3);
        assert_eq!(exit_code(&Error::Training { step: 1, member: None, message: "nan".into() }), 4);
        assert_eq!(exit_code(&Error::Evaluation { job: 3, source: Box::new(Error::numeric("x")) }), 4);
        assert_eq!(exit_code(&Error::input("x")), 1);
    }
}
