//! Attribution through an opaque model that only answers loss queries and
//! accepts fine-tuning jobs.

use rayon::prelude::*;

use super::{check_columns, sample_subset, train_perturbed, AccessMode, AnchorState, EnsembleConfig, LossMatrix, PerturbedObjective};
use crate::curvature::SecondOrderKind;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec, ParamVector};
use crate::rng::{derive_seed, member_seed, stream, Purpose};
use crate::train::TrainConfig;

/// A model reachable only through loss queries and fine-tuning calls.
pub trait OpaqueModel: Send + Sync {
    /// Per-example losses, in order. Deterministic for a fixed handle.
    fn query_losses(&self, examples: &Dataset) -> Result<Vec<f64>>;

    /// Plain fine-tuning on the mean loss of `examples`.
    fn fine_tune(&self, examples: &Dataset, config: &TrainConfig) -> Result<Box<dyn OpaqueModel>>;

    /// Fine-tuning on a custom black-box objective (mean `½L²` or `½f²`).
    /// Handles that cannot do this refuse with [`Error::Unsupported`].
    fn fine_tune_objective(
        &self,
        examples: &Dataset,
        kind: SecondOrderKind,
        config: &TrainConfig,
    ) -> Result<Box<dyn OpaqueModel>> {
        match kind {
            SecondOrderKind::Hessian => self.fine_tune(examples, config),
            other => Err(Error::unsupported(format!(
                "this model handle only supports plain fine-tuning, not the {} objective",
                other.name()
            ))),
        }
    }
}

/// A local model wrapped behind the opaque contract.
#[derive(Debug, Clone)]
pub struct SimulatedModel {
    spec: ModelSpec,
    params: ParamVector,
    custom_objectives: bool,
}

impl SimulatedModel {
    pub fn new(spec: ModelSpec, params: ParamVector) -> Result<Self> {
        spec.check(&params)?;
        Ok(Self { spec, params, custom_objectives: false })
    }

    /// Lets `fine_tune_objective` accept the `½L²` and `½f²` rows as well.
    pub fn with_custom_objectives(mut self) -> Self {
        self.custom_objectives = true;
        self
    }

    fn tune(&self, examples: &Dataset, kind: SecondOrderKind, config: &TrainConfig) -> Result<Box<dyn OpaqueModel>> {
        let anchor = AnchorState::build(&self.spec, &self.params, examples, kind, AccessMode::BlackBox, false)?;
        let rows: Vec<usize> = (0..examples.len()).collect();
        let xi = vec![0.0; rows.len()];
        let objective =
            PerturbedObjective::new(kind, AccessMode::BlackBox, false, &self.spec, examples, &anchor, &rows, &xi)?;
        let params = train_perturbed(&self.params, &objective, config)?;
        Ok(Box::new(SimulatedModel { spec: self.spec.clone(), params, custom_objectives: self.custom_objectives }))
    }
}

impl OpaqueModel for SimulatedModel {
    fn query_losses(&self, examples: &Dataset) -> Result<Vec<f64>> {
        crate::train::check_compatible(examples, &self.spec)?;
        examples.examples().map(|ex| model::per_example_loss(&self.spec, &self.params, ex)).collect()
    }

    fn fine_tune(&self, examples: &Dataset, config: &TrainConfig) -> Result<Box<dyn OpaqueModel>> {
        self.tune(examples, SecondOrderKind::Hessian, config)
    }

    fn fine_tune_objective(
        &self,
        examples: &Dataset,
        kind: SecondOrderKind,
        config: &TrainConfig,
    ) -> Result<Box<dyn OpaqueModel>> {
        if kind != SecondOrderKind::Hessian && !self.custom_objectives {
            return Err(Error::unsupported(format!("handle does not accept the {} objective", kind.name())));
        }
        self.tune(examples, kind, config)
    }
}

/// Black-box ensemble: every member fine-tunes the anchor handle on its subset
/// and reads losses back through `query_losses`; no parameters or gradients
/// are ever requested.
pub fn run_blackbox_ensemble(
    anchor: &dyn OpaqueModel,
    train: &Dataset,
    queries: &Dataset,
    config: &EnsembleConfig,
) -> Result<LossMatrix> {
    config.validate()?;
    if config.access != AccessMode::BlackBox {
        return Err(Error::input("run_blackbox_ensemble needs access = black-box"));
    }
    if config.exact_solve {
        return Err(Error::unsupported("exact solves need white-box access"));
    }
    check_columns(train, queries)?;
    if config.kind == SecondOrderKind::Hessian && config.r >= 1.0 {
        log::warn!("black-box hessian members with r = 1 differ only through minibatch order; use r < 1");
    }
    let everything = train.concat(queries)?;
    let rows: Vec<(u64, Vec<f64>)> = (1..=config.k)
        .into_par_iter()
        .map(|k| -> Result<(u64, Vec<f64>)> {
            let seed = member_seed(config.master_seed, k);
            let subset = sample_subset(train.len(), config.r, &mut stream(seed, Purpose::Subset, 0))?;
            let examples = train.select(&subset)?;
            let cfg = config.train.with_seed(derive_seed(seed, Purpose::Train, 0));
            let tuned = anchor.fine_tune_objective(&examples, config.kind, &cfg).map_err(|e| e.with_member(k))?;
            let losses = tuned.query_losses(&everything)?;
            Ok((seed, losses))
        })
        .collect::<Result<_>>()?;
    LossMatrix::new(
        rows.iter().map(|r| r.1.clone()).collect(),
        everything.ids().to_vec(),
        train.len(),
        rows.iter().map(|r| r.0).collect(),
    )
}
