//! Minibatch SGD with heavy-ball momentum, and empirical risk minimization.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec, ParamVector};
use crate::rng::{permutation, stream, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub momentum: f64,
    /// Strength of `½ l2 ‖θ - center‖²`; the center is the origin for ERM and
    /// the anchor for perturbed training.
    #[serde(default)]
    pub l2: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::input("learning_rate must be positive"));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::input("steps and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::input("momentum must lie in [0, 1)"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::input("l2 must be non-negative"));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// An objective that is a mean of per-term contributions.
pub trait BatchObjective: Sync {
    fn num_terms(&self) -> usize;

    /// Mean value and gradient over `terms`.
    fn value_and_grad(&self, params: &[f64], terms: &[usize]) -> Result<(f64, Vec<f64>)>;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full objective after each completed epoch (and after the final step).
    pub epoch_objective: Vec<f64>,
    pub steps: usize,
}

/// Runs `config.steps` SGD steps from `init`.
///
/// Each epoch visits the terms in a fresh seeded order, in batches of
/// `batch_size`; a batch at least as large as the term count is full-batch GD.
pub fn minimize(
    objective: &dyn BatchObjective,
    init: &[f64],
    center: Option<&[f64]>,
    config: &TrainConfig,
) -> Result<(Vec<f64>, TrainReport)> {
    config.validate()?;
    let m = objective.num_terms();
    if m == 0 {
        return Err(Error::input("objective has no terms"));
    }
    let mut theta = init.to_vec();
    let mut velocity = vec![0.0; theta.len()];
    let mut report = TrainReport::default();
    let full_batch = config.batch_size >= m;
    let all: Vec<usize> = (0..m).collect();
    let mut shuffle = stream(config.seed, Purpose::Shuffle, 0);
    let mut order = all.clone();
    let mut cursor = m;
    let mut epoch_steps = 0usize;
    let batches_per_epoch = m.div_ceil(config.batch_size);

    for step in 0..config.steps {
        let batch: &[usize] = if full_batch {
            &all
        } else {
            if cursor >= m {
                order = permutation(m, &mut shuffle);
                cursor = 0;
            }
            let end = (cursor + config.batch_size).min(m);
            let b = &order[cursor..end];
            cursor = end;
            b
        };
        let (value, mut grad) = objective
            .value_and_grad(&theta, batch)
            .map_err(|e| training_error(step, e))?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training { step, member: None, message: "non-finite loss or gradient".into() });
        }
        if config.l2 > 0.0 {
            for (k, g) in grad.iter_mut().enumerate() {
                *g += config.l2 * (theta[k] - center.map_or(0.0, |c| c[k]));
            }
        }
        for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = config.momentum * *v + g;
            *t -= config.learning_rate * *v;
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Training { step, member: None, message: "parameters became non-finite".into() });
        }
        epoch_steps += 1;
        if epoch_steps == batches_per_epoch || step + 1 == config.steps {
            epoch_steps = 0;
            let (full, _) = objective.value_and_grad(&theta, &all).map_err(|e| training_error(step, e))?;
            let reg = if config.l2 > 0.0 {
                0.5 * config.l2
                    * theta
                        .iter()
                        .enumerate()
                        .map(|(k, t)| (t - center.map_or(0.0, |c| c[k])).powi(2))
                        .sum::<f64>()
            } else {
                0.0
            };
            if !full.is_finite() {
                return Err(Error::Training { step, member: None, message: "objective became non-finite".into() });
            }
            report.epoch_objective.push(full + reg);
        }
    }
    report.steps = config.steps;
    Ok((theta, report))
}

fn training_error(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(message) => Error::Training { step, member: None, message },
        other => other,
    }
}

/// Mean per-example loss over a dataset.
pub struct ErmObjective<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
}

impl BatchObjective for ErmObjective<'_> {
    fn num_terms(&self) -> usize {
        self.data.len()
    }

    fn value_and_grad(&self, params: &[f64], terms: &[usize]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; params.len()];
        let mut value = 0.0;
        for &i in terms {
            let ex = self.data.example(i);
            let trace = model::forward(self.spec, params, ex.x);
            let (l, cot) = model::loss_from_output(trace.output(), ex.y)?;
            value += l;
            model::vjp_into(self.spec, params, ex.x, &trace, &cot, &mut grad);
        }
        let scale = 1.0 / terms.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((value * scale, grad))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErmResult {
    pub params: ParamVector,
    pub train_loss: f64,
    /// `‖(1/n) Σ ∇L_i(θ₀)‖` at the returned parameters.
    pub mean_grad_norm: f64,
    pub report: TrainReport,
}

/// Trains from `spec.init_params(config.seed)` on the mean training loss.
pub fn train_erm(data: &Dataset, spec: &ModelSpec, config: &TrainConfig) -> Result<ErmResult> {
    check_compatible(data, spec)?;
    let objective = ErmObjective { spec, data };
    let init = spec.init_params(config.seed);
    let (theta, report) = minimize(&objective, init.as_slice(), None, config)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let (train_loss, grad) = objective.value_and_grad(&theta, &all)?;
    let mean_grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    debug!("erm: loss {train_loss:.6e}, mean gradient norm {mean_grad_norm:.3e}");
    Ok(ErmResult { params: ParamVector(theta), train_loss, mean_grad_norm, report })
}

/// Checks that every example of `data` is a valid input for `spec`.
pub fn check_compatible(data: &Dataset, spec: &ModelSpec) -> Result<()> {
    spec.validate()?;
    if data.dim() != spec.input_dim() {
        return Err(Error::input(format!(
            "dataset dimension {} does not match model input {}",
            data.dim(),
            spec.input_dim()
        )));
    }
    match (spec.task(), data.labels()) {
        (model::Task::Regression, crate::data::Labels::Real(_)) => Ok(()),
        (model::Task::Classification { num_classes }, crate::data::Labels::Class(y)) => {
            match y.iter().find(|&&c| c >= num_classes) {
                Some(c) => Err(Error::input(format!("label {c} out of range for {num_classes} classes"))),
                None => Ok(()),
            }
        }
        _ => Err(Error::input("dataset label kind does not match the model task")),
    }
}

/// Fraction of examples whose arg-max logit is the label.
pub fn accuracy(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<f64> {
    check_compatible(data, spec)?;
    let mut hits = 0usize;
    for ex in data.examples() {
        let crate::data::Target::Class(c) = ex.y else {
            return Err(Error::unsupported("accuracy needs class labels"));
        };
        let g = model::predict(spec, params, ex.x)?;
        let best = g
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        hits += usize::from(best == c);
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Mean loss over a dataset.
pub fn mean_loss(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<f64> {
    check_compatible(data, spec)?;
    let mut total = 0.0;
    for ex in data.examples() {
        total += model::per_example_loss(spec, params, ex)?;
    }
    Ok(total / data.len() as f64)
}
