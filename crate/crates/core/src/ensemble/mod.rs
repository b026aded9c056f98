//! The subsample / perturb / train loop that produces a [`LossMatrix`].
//!
//! Member `k` (1-based) draws its subset, its `ξ` values and its minibatch
//! order from independent streams keyed by `(member_seed(master, k), purpose)`,
//! so members can run in parallel and in any order with identical results.

mod blackbox;
mod loss_matrix;
mod objective;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use blackbox::{run_blackbox_ensemble, OpaqueModel, SimulatedModel};
pub use loss_matrix::{LossMatrix, LossMatrixMeta};
pub use objective::{perturbed_objective, AccessMode, AnchorState, PerturbedObjective};

use crate::curvature::SecondOrderKind;
use crate::data::{Dataset, Target};
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec, ParamVector};
use crate::rng::{ceil_fraction, derive_seed, member_seed, stream, Purpose};
use crate::train::{minimize, BatchObjective, TrainConfig};

fn default_r() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Number of perturbed models `K`.
    pub k: usize,
    /// Subset ratio `r`.
    #[serde(default = "default_r")]
    pub r: f64,
    pub kind: SecondOrderKind,
    pub access: AccessMode,
    #[serde(default)]
    pub use_logits_form: bool,
    pub train: TrainConfig,
    pub master_seed: u64,
    /// Solve each member in closed form (linear regression, white-box hessian
    /// row only) instead of running SGD.
    #[serde(default)]
    pub exact_solve: bool,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::input("ensemble size K must be positive"));
        }
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(Error::input(format!("subset ratio must lie in (0, 1], got {}", self.r)));
        }
        self.train.validate()
    }
}

/// `ξ` values for one member, aligned with its subset.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationDraw {
    pub member: usize,
    pub ids: Vec<u64>,
    pub xi: Vec<f64>,
}

impl PerturbationDraw {
    pub fn get(&self, id: u64) -> Option<f64> {
        self.ids.iter().position(|&x| x == id).map(|p| self.xi[p])
    }
}

/// `⌈r·n⌉` distinct rows drawn uniformly without replacement, ascending.
pub fn sample_subset(n: usize, r: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::input(format!("subset ratio must lie in (0, 1], got {r}")));
    }
    if n == 0 {
        return Err(Error::input("cannot subsample an empty dataset"));
    }
    let size = ceil_fraction(r, n);
    if size == n {
        return Ok((0..n).collect());
    }
    let mut rows = rand::seq::index::sample(rng, n, size).into_vec();
    rows.sort_unstable();
    Ok(rows)
}

/// Independent `ξ ~ U[0, 1)` for each subset id.
pub fn sample_perturbations(member: usize, ids: &[u64], rng: &mut impl Rng) -> Result<PerturbationDraw> {
    if ids.is_empty() {
        return Err(Error::input("cannot perturb an empty subset"));
    }
    let xi = ids.iter().map(|_| rng.random::<f64>()).collect();
    Ok(PerturbationDraw { member, ids: ids.to_vec(), xi })
}

/// Fine-tunes from the anchor on `objective` with a proximal `l2` toward it.
pub fn train_perturbed(anchor: &ParamVector, objective: &dyn BatchObjective, config: &TrainConfig) -> Result<ParamVector> {
    let (theta, _) = minimize(objective, anchor.as_slice(), Some(anchor.as_slice()), config)?;
    Ok(ParamVector(theta))
}

/// Exact minimizer of the white-box hessian row for linear regression:
/// `θ₀ + (H_D + l2 I)⁻¹ (1/|D|) Σ (2ξ_i ∇L_i(θ₀) - ∇L_i(θ₀))` with `H_D` the
/// subset second moment.
pub fn exact_quadratic_minimizer(
    spec: &ModelSpec,
    train: &Dataset,
    anchor: &AnchorState,
    subset: &[usize],
    xi: &[f64],
    l2: f64,
) -> Result<ParamVector> {
    let ModelSpec::LinearRegression { input_dim } = spec else {
        return Err(Error::unsupported("exact perturbed solves need a quadratic (linear-regression) loss"));
    };
    if anchor.kind != SecondOrderKind::Hessian || anchor.access != AccessMode::WhiteBox {
        return Err(Error::unsupported("exact perturbed solves are implemented for the white-box hessian row"));
    }
    let d = *input_dim;
    let m = subset.len() as f64;
    let theta0 = anchor.params.as_slice();
    let mut h = DMatrix::<f64>::identity(d, d) * l2;
    let mut rhs = DVector::<f64>::zeros(d);
    for (pos, &i) in subset.iter().enumerate() {
        let x = DVector::from_column_slice(train.row(i));
        h.ger(1.0 / m, &x, &x, 1.0);
        let Target::Real(y) = train.target(i) else {
            return Err(Error::input("regression needs real labels"));
        };
        let residual = theta0.iter().zip(train.row(i)).map(|(a, b)| a * b).sum::<f64>() - y;
        // ∇L_i(θ₀) = residual · x
        rhs += &x * ((2.0 * xi[pos] - 1.0) * residual / m);
    }
    let delta = h
        .cholesky()
        .ok_or_else(|| Error::numeric("subset second moment is singular"))?
        .solve(&rhs);
    Ok(ParamVector(theta0.iter().zip(delta.iter()).map(|(a, b)| a + b).collect()))
}

/// Per-example losses on `train ++ queries`.
pub(crate) fn all_losses(spec: &ModelSpec, params: &ParamVector, train: &Dataset, queries: &Dataset) -> Result<Vec<f64>> {
    train
        .examples()
        .chain(queries.examples())
        .map(|ex| model::per_example_loss(spec, params, ex))
        .collect()
}

pub(crate) fn check_columns(train: &Dataset, queries: &Dataset) -> Result<()> {
    if train.dim() != queries.dim() {
        return Err(Error::input("training and query features differ in dimension"));
    }
    if let Some(id) = queries.ids().iter().find(|id| train.ids().contains(id)) {
        return Err(Error::input(format!("query id {id} collides with a training id")));
    }
    Ok(())
}

struct MemberRun {
    seed: u64,
    losses: Vec<f64>,
}

fn run_member(
    k: usize,
    train: &Dataset,
    queries: &Dataset,
    spec: &ModelSpec,
    anchor: &AnchorState,
    config: &EnsembleConfig,
) -> Result<MemberRun> {
    let seed = member_seed(config.master_seed, k);
    let subset = sample_subset(train.len(), config.r, &mut stream(seed, Purpose::Subset, 0))?;
    let ids: Vec<u64> = subset.iter().map(|&i| train.ids()[i]).collect();
    let draw = sample_perturbations(k, &ids, &mut stream(seed, Purpose::Perturb, 0))?;
    let train_cfg = config.train.with_seed(derive_seed(seed, Purpose::Train, 0));
    let theta = if config.exact_solve {
        exact_quadratic_minimizer(spec, train, anchor, &subset, &draw.xi, train_cfg.l2)?
    } else {
        let objective = PerturbedObjective::new(
            config.kind,
            config.access,
            config.use_logits_form,
            spec,
            train,
            anchor,
            &subset,
            &draw.xi,
        )?;
        let theta = train_perturbed(&anchor.params, &objective, &train_cfg).map_err(|e| e.with_member(k))?;
        if log::log_enabled!(log::Level::Debug) && config.access == AccessMode::WhiteBox {
            let all: Vec<usize> = (0..subset.len()).collect();
            let (data, first) = objective.gradient_split(anchor.params.as_slice(), &all)?;
            debug!("member {k}: first-order / data gradient norm at θ₀ = {:.3e}", first / data.max(f64::MIN_POSITIVE));
        }
        theta
    };
    let losses = all_losses(spec, &theta, train, queries).map_err(|e| Error::Evaluation { job: k, source: Box::new(e) })?;
    Ok(MemberRun { seed, losses })
}

/// Runs `K` perturbed members and records their losses on `train ++ queries`.
pub fn run_ensemble(
    train: &Dataset,
    queries: &Dataset,
    spec: &ModelSpec,
    anchor: &AnchorState,
    config: &EnsembleConfig,
) -> Result<LossMatrix> {
    config.validate()?;
    crate::train::check_compatible(train, spec)?;
    crate::train::check_compatible(queries, spec)?;
    check_columns(train, queries)?;
    anchor.check_for(config.kind, config.access, config.use_logits_form, train.len())?;
    let runs: Vec<MemberRun> = (1..=config.k)
        .into_par_iter()
        .map(|k| run_member(k, train, queries, spec, anchor, config))
        .collect::<Result<_>>()?;
    LossMatrix::new(
        runs.iter().map(|r| r.losses.clone()).collect(),
        train.ids().iter().chain(queries.ids()).copied().collect(),
        train.len(),
        runs.iter().map(|r| r.seed).collect(),
    )
}
