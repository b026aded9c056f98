//! Seeded synthetic datasets.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Labels};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

fn default_separation() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SyntheticRecipe {
    /// `classes` Gaussian clusters with means drawn from `N(0, separation² I)`
    /// and isotropic noise `σ`; labels cycle through the classes.
    GaussianBlobs {
        n: usize,
        d: usize,
        classes: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        noise: f64,
        seed: u64,
    },
    /// `y = θ*ᵀx + ε` with `x, θ* ~ N(0, I)` and `ε ~ N(0, σ²)`.
    LinearNoise { n: usize, d: usize, noise: f64, seed: u64 },
}

impl SyntheticRecipe {
    pub fn validate(&self) -> Result<()> {
        let (n, d, noise) = match *self {
            SyntheticRecipe::GaussianBlobs { n, d, classes, separation, noise, .. } => {
                if classes < 2 {
                    return Err(Error::input("blobs need at least 2 classes"));
                }
                if n < 2 * classes {
                    return Err(Error::input(format!("blobs need n >= 2·classes = {}", 2 * classes)));
                }
                if !(separation >= 0.0 && separation.is_finite()) {
                    return Err(Error::input("separation must be non-negative"));
                }
                (n, d, noise)
            }
            SyntheticRecipe::LinearNoise { n, d, noise, .. } => (n, d, noise),
        };
        if n == 0 || d == 0 {
            return Err(Error::input("n and d must be positive"));
        }
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::input("noise must be non-negative"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        match *self {
            SyntheticRecipe::GaussianBlobs { n, .. } | SyntheticRecipe::LinearNoise { n, .. } => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The same recipe with `n` rows; rows shared with a shorter draw coincide.
    pub fn with_len(&self, rows: usize) -> Self {
        let mut out = self.clone();
        match &mut out {
            SyntheticRecipe::GaussianBlobs { n, .. } | SyntheticRecipe::LinearNoise { n, .. } => *n = rows,
        }
        out
    }
}

fn normal_vec(d: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Deterministic in the recipe; ids are `0..n`.
pub fn generate_synthetic(recipe: &SyntheticRecipe) -> Result<Dataset> {
    recipe.validate()?;
    match *recipe {
        SyntheticRecipe::GaussianBlobs { n, d, classes, separation, noise, seed } => {
            let mut centers = stream(seed, Purpose::Synthetic, 0);
            let means: Vec<Vec<f64>> =
                (0..classes).map(|_| normal_vec(d, &mut centers).into_iter().map(|v| v * separation).collect()).collect();
            let mut rng = stream(seed, Purpose::Synthetic, 1);
            let mut rows = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let c = i % classes;
                rows.push(means[c].iter().zip(normal_vec(d, &mut rng)).map(|(m, z)| m + noise * z).collect());
                labels.push(c);
            }
            Dataset::from_rows(&rows, Labels::Class(labels), 0)
        }
        SyntheticRecipe::LinearNoise { n, d, noise, seed } => {
            let theta = normal_vec(d, &mut stream(seed, Purpose::Synthetic, 0));
            let mut rng = stream(seed, Purpose::Synthetic, 1);
            let mut rows = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let x = normal_vec(d, &mut rng);
                let eps: f64 = StandardNormal.sample(&mut rng);
                labels.push(theta.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + noise * eps);
                rows.push(x);
            }
            Dataset::from_rows(&rows, Labels::Real(labels), 0)
        }
    }
}

/// `recipe.len()` training rows followed by `n_query` query rows from one draw.
pub fn generate_split(recipe: &SyntheticRecipe, n_query: usize) -> Result<(Dataset, Dataset)> {
    if n_query == 0 {
        return Err(Error::input("at least one query example is required"));
    }
    let n = recipe.len();
    let all = generate_synthetic(&recipe.with_len(n + n_query))?;
    let train = all.select(&(0..n).collect::<Vec<_>>())?;
    let queries = all.select(&(n..n + n_query).collect::<Vec<_>>())?;
    Ok((train, queries))
}
