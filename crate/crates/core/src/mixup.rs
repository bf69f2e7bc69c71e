//! Mixup interpolation: pairwise mixing, Hybrid-Mixup between the trusted
//! pool and the high-uncertainty remainder, and Self-Mixup of a group
//! against a permutation of itself.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixupConfig {
    #[serde(default = "default_a")]
    pub beta_a: f64,
    #[serde(default = "default_b")]
    pub beta_b: f64,
    /// Use `max(λ, 1 − λ)` so the first argument of every pair dominates.
    #[serde(default = "default_true")]
    pub lambda_floor_adjust: bool,
    /// Temperature sharpening of pseudo-labels before mixing. Off by default.
    #[serde(default)]
    pub sharpen_t: Option<f64>,
    /// Replaces every sampled λ by this value.
    #[serde(default)]
    pub fixed_lambda: Option<f64>,
}

fn default_a() -> f64 {
    2.0
}
fn default_b() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            beta_a: default_a(),
            beta_b: default_b(),
            lambda_floor_adjust: true,
            sharpen_t: None,
            fixed_lambda: None,
        }
    }
}

impl MixupConfig {
    /// A raw Beta law with the given mean and the default concentration
    /// `a + b = 2.5`, with floor adjustment off.
    pub fn with_mean(mean: f64) -> Result<MixupConfig> {
        if !(mean > 0.0 && mean < 1.0) {
            return Err(Error::Config(format!("beta mean {mean} must lie in (0, 1)")));
        }
        let total = default_a() + default_b();
        Ok(MixupConfig {
            beta_a: mean * total,
            beta_b: (1.0 - mean) * total,
            lambda_floor_adjust: false,
            ..MixupConfig::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_a > 0.0 && self.beta_b > 0.0 && self.beta_a.is_finite() && self.beta_b.is_finite()) {
            return Err(Error::Config("mixup.beta_a and mixup.beta_b must be positive".into()));
        }
        if let Some(l) = self.fixed_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("mixup.fixed_lambda {l} outside [0, 1]")));
            }
        }
        if let Some(t) = self.sharpen_t {
            if !(t > 0.0) {
                return Err(Error::Config("mixup.sharpen_t must be positive".into()));
            }
        }
        Ok(())
    }
}

pub fn sample_lambda<R: Rng + ?Sized>(cfg: &MixupConfig, rng: &mut R) -> Result<f64> {
    if let Some(l) = cfg.fixed_lambda {
        return Ok(l);
    }
    let beta = Beta::new(cfg.beta_a, cfg.beta_b).map_err(|e| Error::Config(e.to_string()))?;
    let l: f64 = beta.sample(rng);
    Ok(if cfg.lambda_floor_adjust { l.max(1.0 - l) } else { l })
}

/// `(λ·x1 + (1−λ)·x2, λ·y1 + (1−λ)·y2)`.
pub fn mix_pair(x1: &[f64], y1: &[f64], x2: &[f64], y2: &[f64], lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if x1.len() != x2.len() || y1.len() != y2.len() {
        return Err(Error::Dimension(format!(
            "mix_pair operands differ: inputs {} vs {}, labels {} vs {}",
            x1.len(),
            x2.len(),
            y1.len(),
            y2.len()
        )));
    }
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(p, q)| lambda * p + (1.0 - lambda) * q).collect()
    };
    Ok((mix(x1, x2), mix(y1, y2)))
}

/// Temperature sharpening `p^(1/t) / Σ p^(1/t)`.
pub fn sharpen(p: &[f64], t: f64) -> Vec<f64> {
    let powered: Vec<f64> = p.iter().map(|v| v.powf(1.0 / t)).collect();
    let z: f64 = powered.iter().sum();
    powered.into_iter().map(|v| v / z).collect()
}

/// Inputs with their (soft) label rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SoftPool {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
}

impl SoftPool {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn push(&mut self, input: Vec<f64>, label: Vec<f64>) {
        self.inputs.push(input);
        self.labels.push(label);
    }

    pub fn extend(&mut self, other: &SoftPool) {
        self.inputs.extend(other.inputs.iter().cloned());
        self.labels.extend(other.labels.iter().cloned());
    }

    pub fn subset(&self, idx: &[usize]) -> SoftPool {
        SoftPool {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub lambdas: Vec<f64>,
    /// `(first, second)` pool indices of every mixed row.
    pub pairs: Vec<(usize, usize)>,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    /// Stacks batches row-wise.
    pub fn concat(batches: &[MixedBatch]) -> Result<MixedBatch> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut lambdas = Vec::new();
        let mut pairs = Vec::new();
        for b in batches {
            inputs.extend((0..b.len()).map(|i| b.inputs.row(i).to_vec()));
            targets.extend((0..b.len()).map(|i| b.targets.row(i).to_vec()));
            lambdas.extend_from_slice(&b.lambdas);
            pairs.extend_from_slice(&b.pairs);
        }
        Ok(MixedBatch {
            inputs: Tensor::from_rows(&inputs)?,
            targets: Tensor::from_rows(&targets)?,
            lambdas,
            pairs,
        })
    }
}

/// Mixes `first[i]` with `second[j]` for every `(i, j)` in `pairs`.
pub fn mix_pools(first: &SoftPool, second: &SoftPool, pairs: &[(usize, usize)], lambdas: &[f64]) -> Result<MixedBatch> {
    if pairs.len() != lambdas.len() || pairs.is_empty() {
        return Err(Error::Dimension(format!(
            "{} pairs but {} mixing coefficients",
            pairs.len(),
            lambdas.len()
        )));
    }
    let mut inputs = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    for (&(i, j), &l) in pairs.iter().zip(lambdas) {
        let (x, y) = mix_pair(&first.inputs[i], &first.labels[i], &second.inputs[j], &second.labels[j], l)?;
        inputs.push(x);
        targets.push(y);
    }
    Ok(MixedBatch {
        inputs: Tensor::from_rows(&inputs)?,
        targets: Tensor::from_rows(&targets)?,
        lambdas: lambdas.to_vec(),
        pairs: pairs.to_vec(),
    })
}

/// `n` indices into `0..len`: without replacement when possible, otherwise
/// uniformly with replacement.
fn draw_indices<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Vec<usize> {
    if n <= len {
        index::sample(rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Draws `batch` trusted examples, pairs each with a uniformly random
/// partner from `rest`, and mixes with trusted weight λ. An empty `rest`
/// falls back to [`self_mixup`] over a trusted draw.
pub fn hybrid_mixup<R: Rng + ?Sized>(
    trusted: &SoftPool,
    rest: &SoftPool,
    batch: usize,
    cfg: &MixupConfig,
    rng: &mut R,
) -> Result<MixedBatch> {
    if trusted.is_empty() {
        return Err(Error::Usage("hybrid mixup needs a non-empty trusted pool".into()));
    }
    if batch == 0 {
        return Err(Error::Config("mixup batch size must be at least 1".into()));
    }
    if rest.is_empty() {
        log::debug!("hybrid mixup: empty high-uncertainty pool, using self-mixup of the trusted pool");
        let draw = draw_indices(trusted.len(), batch, rng);
        return self_mixup(&trusted.subset(&draw), cfg, rng);
    }
    let firsts = draw_indices(trusted.len(), batch, rng);
    let mut pairs = Vec::with_capacity(batch);
    let mut lambdas = Vec::with_capacity(batch);
    for i in firsts {
        let j = rng.random_range(0..rest.len());
        pairs.push((i, j));
        lambdas.push(sample_lambda(cfg, rng)?);
    }
    mix_pools(trusted, rest, &pairs, &lambdas)
}

/// Mixes `group[i]` with `group[perm[i]]` for a uniformly random
/// permutation, one λ per row.
pub fn self_mixup<R: Rng + ?Sized>(group: &SoftPool, cfg: &MixupConfig, rng: &mut R) -> Result<MixedBatch> {
    if group.is_empty() {
        return Err(Error::Usage("self mixup needs a non-empty group".into()));
    }
    let mut perm: Vec<usize> = (0..group.len()).collect();
    perm.shuffle(rng);
    let lambdas = (0..group.len())
        .map(|_| sample_lambda(cfg, rng))
        .collect::<Result<Vec<f64>>>()?;
    self_mixup_with(group, &perm, &lambdas)
}

/// [`self_mixup`] with an explicit permutation and coefficients.
pub fn self_mixup_with(group: &SoftPool, perm: &[usize], lambdas: &[f64]) -> Result<MixedBatch> {
    if perm.len() != group.len() {
        return Err(Error::Dimension(format!(
            "permutation of length {} for a group of {}",
            perm.len(),
            group.len()
        )));
    }
    let pairs: Vec<(usize, usize)> = perm.iter().enumerate().map(|(i, &j)| (i, j)).collect();
    mix_pools(group, group, &pairs, lambdas)
}
