//! Small differentiable models over a flat parameter vector.
//!
//! Parameter layouts:
//!
//! - linear regression: `w` (length `d`), prediction `w·x`, no intercept;
//! - softmax regression: for each class `c`, `[w_c (d), b_c]`, so `P = C(d+1)`;
//! - mlp: for each layer `in -> out`, the `out x in` weight matrix row-major
//!   followed by the `out` biases. Hidden layers apply the activation; the last
//!   layer emits logits and its width is the class count.
//!
//! Every model is evaluated as `x -> g(θ, x)` (the output vector, length 1 for
//! regression) and every gradient is a vector-Jacobian product of `g` with a
//! cotangent `∂(scalar)/∂g`. Losses and margins are functions of `g` only.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Example, Target};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before logs.
pub const P_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    LinearRegression { input_dim: usize },
    SoftmaxRegression { input_dim: usize, num_classes: usize },
    Mlp { layer_sizes: Vec<usize>, activation: Activation },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Regression,
    Classification { num_classes: usize },
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::LinearRegression { input_dim } if *input_dim == 0 => {
                Err(Error::input("input_dim must be positive"))
            }
            ModelSpec::SoftmaxRegression { input_dim, num_classes } => {
                if *input_dim == 0 {
                    Err(Error::input("input_dim must be positive"))
                } else if *num_classes < 2 {
                    Err(Error::input("classification needs at least 2 classes"))
                } else {
                    Ok(())
                }
            }
            ModelSpec::Mlp { layer_sizes, .. } => {
                if layer_sizes.len() < 2 {
                    Err(Error::input("mlp needs at least input and output widths"))
                } else if layer_sizes.contains(&0) {
                    Err(Error::input("mlp layer widths must be positive"))
                } else if *layer_sizes.last().unwrap() < 2 {
                    Err(Error::input("mlp output width is the class count and must be at least 2"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelSpec::LinearRegression { input_dim } | ModelSpec::SoftmaxRegression { input_dim, .. } => {
                *input_dim
            }
            ModelSpec::Mlp { layer_sizes, .. } => layer_sizes[0],
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            ModelSpec::LinearRegression { .. } => 1,
            ModelSpec::SoftmaxRegression { num_classes, .. } => *num_classes,
            ModelSpec::Mlp { layer_sizes, .. } => *layer_sizes.last().unwrap(),
        }
    }

    pub fn task(&self) -> Task {
        match self {
            ModelSpec::LinearRegression { .. } => Task::Regression,
            _ => Task::Classification { num_classes: self.output_dim() },
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.task(), Task::Classification { .. })
    }

    pub fn num_params(&self) -> usize {
        match self {
            ModelSpec::LinearRegression { input_dim } => *input_dim,
            ModelSpec::SoftmaxRegression { input_dim, num_classes } => num_classes * (input_dim + 1),
            ModelSpec::Mlp { layer_sizes, .. } => layer_sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum(),
        }
    }

    /// Initial parameters: zeros for the convex models, uniform
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for the mlp.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        match self {
            ModelSpec::Mlp { layer_sizes, .. } => {
                let mut rng = stream(seed, Purpose::Init, 0);
                let mut values = Vec::with_capacity(self.num_params());
                for w in layer_sizes.windows(2) {
                    let bound = 1.0 / (w[0] as f64).sqrt();
                    for _ in 0..w[1] * (w[0] + 1) {
                        values.push(rng.random_range(-bound..=bound));
                    }
                }
                ParamVector(values)
            }
            _ => ParamVector(vec![0.0; self.num_params()]),
        }
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::input(format!(
                "parameter vector has length {}, model needs {}",
                params.len(),
                self.num_params()
            )));
        }
        Ok(())
    }

    fn check_example(&self, x: &[f64], y: Option<Target>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::input(format!(
                "feature row has dimension {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        match (self.task(), y) {
            (_, None) => Ok(()),
            (Task::Regression, Some(Target::Real(v))) if v.is_finite() => Ok(()),
            (Task::Classification { num_classes }, Some(Target::Class(c))) if c < num_classes => Ok(()),
            (_, Some(t)) => Err(Error::input(format!("label {t:?} is not valid for {:?}", self.task()))),
        }
    }

    /// Validates that `params` fits this spec and is finite.
    pub fn check(&self, params: &ParamVector) -> Result<()> {
        self.validate()?;
        self.check_params(params.as_slice())?;
        if params.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("parameter vector has non-finite entries"));
        }
        Ok(())
    }
}

/// Flat parameter vector `θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

/// Activations retained by a forward pass for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// Pre-activations of each mlp layer (the last one is the output).
    pre: Vec<Vec<f64>>,
    /// Inputs to each mlp layer (the first one is `x`).
    inputs: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// Forward pass without validation.
pub(crate) fn forward(spec: &ModelSpec, params: &[f64], x: &[f64]) -> Trace {
    match spec {
        ModelSpec::LinearRegression { .. } => {
            let y = params.iter().zip(x).map(|(w, v)| w * v).sum();
            Trace { output: vec![y], ..Trace::default() }
        }
        ModelSpec::SoftmaxRegression { input_dim, num_classes } => {
            let stride = input_dim + 1;
            let output = (0..*num_classes)
                .map(|c| {
                    let w = &params[c * stride..(c + 1) * stride];
                    w[..*input_dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[*input_dim]
                })
                .collect();
            Trace { output, ..Trace::default() }
        }
        ModelSpec::Mlp { layer_sizes, activation } => {
            let layers = layer_sizes.len() - 1;
            let mut pre = Vec::with_capacity(layers);
            let mut inputs = Vec::with_capacity(layers);
            let mut a = x.to_vec();
            let mut offset = 0;
            for (l, w) in layer_sizes.windows(2).enumerate() {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = &params[offset..offset + fan_out * fan_in];
                let bias = &params[offset + fan_out * fan_in..offset + fan_out * (fan_in + 1)];
                offset += fan_out * (fan_in + 1);
                let z: Vec<f64> = (0..fan_out)
                    .map(|o| {
                        weights[o * fan_in..(o + 1) * fan_in].iter().zip(&a).map(|(p, q)| p * q).sum::<f64>()
                            + bias[o]
                    })
                    .collect();
                let next = if l + 1 < layers { z.iter().map(|v| activation.apply(*v)).collect() } else { z.clone() };
                inputs.push(std::mem::replace(&mut a, next));
                pre.push(z);
            }
            Trace { pre, inputs, output: a }
        }
    }
}

/// Vector-Jacobian product `J_g(θ)ᵀ cot` for the trace of a forward pass at `x`.
pub(crate) fn vjp(spec: &ModelSpec, params: &[f64], x: &[f64], trace: &Trace, cot: &[f64]) -> Vec<f64> {
    let mut grad = vec![0.0; spec.num_params()];
    vjp_into(spec, params, x, trace, cot, &mut grad);
    grad
}

/// Accumulates `J_g(θ)ᵀ cot` into `grad`.
pub(crate) fn vjp_into(spec: &ModelSpec, params: &[f64], x: &[f64], trace: &Trace, cot: &[f64], grad: &mut [f64]) {
    match spec {
        ModelSpec::LinearRegression { .. } => {
            for (g, v) in grad.iter_mut().zip(x) {
                *g += cot[0] * v;
            }
        }
        ModelSpec::SoftmaxRegression { input_dim, num_classes } => {
            let stride = input_dim + 1;
            for c in 0..*num_classes {
                if cot[c] == 0.0 {
                    continue;
                }
                let g = &mut grad[c * stride..(c + 1) * stride];
                for (gi, v) in g[..*input_dim].iter_mut().zip(x) {
                    *gi += cot[c] * v;
                }
                g[*input_dim] += cot[c];
            }
        }
        ModelSpec::Mlp { layer_sizes, activation } => {
            let layers = layer_sizes.len() - 1;
            let mut offsets = Vec::with_capacity(layers);
            let mut off = 0;
            for w in layer_sizes.windows(2) {
                offsets.push(off);
                off += w[1] * (w[0] + 1);
            }
            let mut delta = cot.to_vec();
            for l in (0..layers).rev() {
                let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
                let base = offsets[l];
                let input = &trace.inputs[l];
                for o in 0..fan_out {
                    let d = delta[o];
                    let row = &mut grad[base + o * fan_in..base + (o + 1) * fan_in];
                    for (gi, a) in row.iter_mut().zip(input) {
                        *gi += d * a;
                    }
                    grad[base + fan_out * fan_in + o] += d;
                }
                if l > 0 {
                    let weights = &params[base..base + fan_out * fan_in];
                    let z_prev = &trace.pre[l - 1];
                    delta = (0..fan_in)
                        .map(|i| {
                            let back: f64 = (0..fan_out).map(|o| weights[o * fan_in + i] * delta[o]).sum();
                            back * activation.derivative(z_prev[i])
                        })
                        .collect();
                }
            }
        }
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(g: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(g.iter().copied());
    g.iter().map(|v| (v - lse).exp()).collect()
}

fn ensure_finite(g: &[f64]) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric("model output is not finite"))
    }
}

fn max_loss() -> f64 {
    -P_CLAMP.ln()
}

fn min_loss() -> f64 {
    -(-P_CLAMP).ln_1p()
}

/// Largest representable margin after clamping `p` to `1 - P_CLAMP`.
pub fn max_margin() -> f64 {
    (1.0 - P_CLAMP).ln() - P_CLAMP.ln()
}

/// Loss as a function of the model output, with its gradient in output space.
pub(crate) fn loss_from_output(g: &[f64], y: Target) -> Result<(f64, Vec<f64>)> {
    ensure_finite(g)?;
    match y {
        Target::Real(t) => {
            let r = g[0] - t;
            Ok((0.5 * r * r, vec![r]))
        }
        Target::Class(c) => {
            let lse = log_sum_exp(g.iter().copied());
            let raw = lse - g[c];
            let (lo, hi) = (min_loss(), max_loss());
            if raw > hi || raw < lo {
                return Ok((raw.clamp(lo, hi), vec![0.0; g.len()]));
            }
            let mut d: Vec<f64> = g.iter().map(|v| (v - lse).exp()).collect();
            d[c] -= 1.0;
            Ok((raw, d))
        }
    }
}

/// TRAK margin `log(p_y / (1 - p_y))` of the output, with its output-space gradient.
pub(crate) fn margin_from_output(g: &[f64], y: Target) -> Result<(f64, Vec<f64>)> {
    ensure_finite(g)?;
    let Target::Class(c) = y else {
        return Err(Error::unsupported("margin is only defined for classification"));
    };
    // log p_y - log(1 - p_y) = g_y - logsumexp_{k != y} g_k
    let rest = log_sum_exp(g.iter().enumerate().filter(|(k, _)| *k != c).map(|(_, v)| *v));
    let raw = g[c] - rest;
    let bound = max_margin();
    if raw.abs() > bound {
        return Ok((raw.clamp(-bound, bound), vec![0.0; g.len()]));
    }
    let p = softmax(g);
    let q = 1.0 - p[c];
    let d = (0..g.len())
        .map(|k| {
            let delta = if k == c { 1.0 } else { 0.0 };
            (delta - p[k]) / q
        })
        .collect();
    Ok((raw, d))
}

/// Counters for gradient evaluations made through the public gradient API.
///
/// Black-box code paths must leave them untouched.
pub mod probe {
    use super::*;

    pub(super) static LOSS_GRADS: AtomicUsize = AtomicUsize::new(0);
    pub(super) static MARGIN_GRADS: AtomicUsize = AtomicUsize::new(0);

    /// `(per_example_grad calls, margin_grad calls)` so far in this process.
    pub fn gradient_calls() -> (usize, usize) {
        (LOSS_GRADS.load(Ordering::Relaxed), MARGIN_GRADS.load(Ordering::Relaxed))
    }
}

/// Model output: the prediction for regression, pre-softmax logits otherwise.
pub fn predict(spec: &ModelSpec, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    spec.check(params)?;
    spec.check_example(x, None)?;
    let out = forward(spec, params.as_slice(), x).output;
    ensure_finite(&out)?;
    Ok(out)
}

/// `-ln p(y|x)` for classification, `½(y - ŷ)²` for regression.
pub fn per_example_loss(spec: &ModelSpec, params: &ParamVector, ex: Example<'_>) -> Result<f64> {
    spec.check(params)?;
    spec.check_example(ex.x, Some(ex.y))?;
    let g = forward(spec, params.as_slice(), ex.x).output;
    Ok(loss_from_output(&g, ex.y)?.0)
}

pub fn per_example_grad(spec: &ModelSpec, params: &ParamVector, ex: Example<'_>) -> Result<Vec<f64>> {
    probe::LOSS_GRADS.fetch_add(1, Ordering::Relaxed);
    spec.check(params)?;
    spec.check_example(ex.x, Some(ex.y))?;
    let trace = forward(spec, params.as_slice(), ex.x);
    let (_, cot) = loss_from_output(&trace.output, ex.y)?;
    Ok(vjp(spec, params.as_slice(), ex.x, &trace, &cot))
}

/// Probability of the labelled class.
pub fn correct_class_prob(spec: &ModelSpec, params: &ParamVector, ex: Example<'_>) -> Result<f64> {
    let Target::Class(c) = ex.y else {
        return Err(Error::unsupported("class probability needs a classification label"));
    };
    let g = predict(spec, params, ex.x)?;
    Ok(softmax(&g)[c].clamp(P_CLAMP, 1.0 - P_CLAMP))
}

/// `f = log(p / (1 - p))` for the labelled class.
pub fn margin(spec: &ModelSpec, params: &ParamVector, ex: Example<'_>) -> Result<f64> {
    if !spec.is_classification() {
        return Err(Error::unsupported("margin is only defined for classification models"));
    }
    spec.check(params)?;
    spec.check_example(ex.x, Some(ex.y))?;
    let g = forward(spec, params.as_slice(), ex.x).output;
    Ok(margin_from_output(&g, ex.y)?.0)
}

pub fn margin_grad(spec: &ModelSpec, params: &ParamVector, ex: Example<'_>) -> Result<Vec<f64>> {
    probe::MARGIN_GRADS.fetch_add(1, Ordering::Relaxed);
    if !spec.is_classification() {
        return Err(Error::unsupported("margin is only defined for classification models"));
    }
    spec.check(params)?;
    spec.check_example(ex.x, Some(ex.y))?;
    let trace = forward(spec, params.as_slice(), ex.x);
    let (_, cot) = margin_from_output(&trace.output, ex.y)?;
    Ok(vjp(spec, params.as_slice(), ex.x, &trace, &cot))
}

/// Which scalar a finite-difference check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scalar {
    Loss,
    Margin,
}

/// Central-difference gradient of the loss (or margin) with step `h`.
pub fn finite_diff_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    ex: Example<'_>,
    h: f64,
    scalar: Scalar,
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::input(format!("finite-difference step must be positive, got {h}")));
    }
    spec.check(params)?;
    spec.check_example(ex.x, Some(ex.y))?;
    let eval = |p: &[f64]| -> Result<f64> {
        let g = forward(spec, p, ex.x).output;
        match scalar {
            Scalar::Loss => Ok(loss_from_output(&g, ex.y)?.0),
            Scalar::Margin => Ok(margin_from_output(&g, ex.y)?.0),
        }
    };
    let mut p = params.as_slice().to_vec();
    let mut out = Vec::with_capacity(p.len());
    for k in 0..p.len() {
        let orig = p[k];
        p[k] = orig + h;
        let up = eval(&p)?;
        p[k] = orig - h;
        let down = eval(&p)?;
        p[k] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `‖a - b‖ / max(1, ‖a‖)`.
pub fn relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / norm.max(1.0)
}
