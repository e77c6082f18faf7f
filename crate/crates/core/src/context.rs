//! Latent task inference from high-level context.
//!
//! Every context entry `(s, g, r, s')` is encoded independently into a
//! diagonal Gaussian factor; the posterior over the task variable `z` is the
//! normalised product of the factors. Factors are summed in a canonical
//! order so the posterior is bit-identical under any permutation of the
//! context.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::env::OBS_DIM;
use crate::error::{Error, Result};
use crate::hierarchy::Transition;
use crate::nets::{DiagGaussian, ForwardCache, Matrix, MlpParams, LOG_STD_MAX, LOG_STD_MIN};

/// Width of one flattened context entry: state, 2-d action, reward, next state.
pub const CONTEXT_ENTRY_DIM: usize = 2 * OBS_DIM + 3;

pub fn context_entry(t: &Transition) -> Vec<f64> {
    let mut v = Vec::with_capacity(CONTEXT_ENTRY_DIM);
    v.extend_from_slice(&t.state);
    v.extend_from_slice(&t.action);
    v.push(t.reward);
    v.extend_from_slice(&t.next_state);
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextBatch {
    entries: Matrix,
}

impl ContextBatch {
    pub fn from_transitions<'a>(transitions: impl IntoIterator<Item = &'a Transition>) -> Result<Self> {
        let rows: Vec<Vec<f64>> = transitions.into_iter().map(context_entry).collect();
        if rows.is_empty() {
            return Err(Error::invalid("context batch needs at least one entry"));
        }
        Self::from_entries(Matrix::from_rows(&rows)?)
    }

    pub fn from_entries(entries: Matrix) -> Result<Self> {
        if entries.rows() == 0 {
            return Err(Error::invalid("context batch needs at least one entry"));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.rows() == 0
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPosterior {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl LatentPosterior {
    pub fn prior(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            variance: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LatentSource {
    Prior,
    Posterior(LatentPosterior),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentTask {
    pub z: Vec<f64>,
    pub source: LatentSource,
}

fn split_head(row: &[f64]) -> (&[f64], &[f64]) {
    row.split_at(row.len() / 2)
}

/// One Gaussian factor per context entry from the shared encoder. The encoder
/// output is read as `[mean, log_std]`.
pub fn encode_factors(phi: &MlpParams, context: &ContextBatch) -> Result<Vec<DiagGaussian>> {
    if phi.output_dim() % 2 != 0 {
        return Err(Error::invalid("encoder output must hold mean and log_std halves"));
    }
    let cache = phi.forward_batch(&context.entries)?;
    let out = cache.output();
    (0..out.rows())
        .map(|r| {
            let (m, s) = split_head(out.row(r));
            DiagGaussian::new(m.to_vec(), s.to_vec())
        })
        .collect()
}

fn cmp_slices(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Indices of `factors` in canonical summation order.
fn canonical_order(means: &[&[f64]], log_stds: &[&[f64]]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..means.len()).collect();
    idx.sort_by(|&a, &b| cmp_slices(means[a], means[b]).then_with(|| cmp_slices(log_stds[a], log_stds[b])));
    idx
}

fn product_of_gaussians(means: &[&[f64]], log_stds: &[&[f64]]) -> Result<LatentPosterior> {
    let n = means.len();
    if n == 0 {
        return Err(Error::invalid("posterior needs at least one factor"));
    }
    let d = means[0].len();
    let order = canonical_order(means, log_stds);
    let mut precision = vec![0.0; d];
    let mut weighted = vec![0.0; d];
    for &i in &order {
        if means[i].len() != d || log_stds[i].len() != d {
            return Err(Error::invalid("factor dimensions differ"));
        }
        for k in 0..d {
            let p = (-2.0 * log_stds[i][k]).exp();
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::invalid("factor variance must be positive and finite"));
            }
            precision[k] += p;
            weighted[k] += means[i][k] * p;
        }
    }
    let variance: Vec<f64> = precision.iter().map(|p| 1.0 / p).collect();
    let mean = variance.iter().zip(&weighted).map(|(v, w)| v * w).collect();
    Ok(LatentPosterior { mean, variance })
}

/// Precision-weighted product of the factors.
pub fn aggregate_posterior(factors: &[DiagGaussian]) -> Result<LatentPosterior> {
    let means: Vec<&[f64]> = factors.iter().map(|f| f.mean()).collect();
    let stds: Vec<&[f64]> = factors.iter().map(|f| f.log_std()).collect();
    product_of_gaussians(&means, &stds)
}

/// KL(posterior ‖ N(0, I)).
pub fn kl_to_prior(post: &LatentPosterior) -> f64 {
    post.mean
        .iter()
        .zip(&post.variance)
        .map(|(m, v)| 0.5 * (m * m + v - 1.0 - v.ln()))
        .sum()
}

/// Reparameterised `z = mean + sqrt(variance) ⊙ noise`.
pub fn sample_latent(post: &LatentPosterior, noise: &[f64]) -> Result<LatentTask> {
    if noise.len() != post.dim() {
        return Err(Error::invalid("latent noise has the wrong dimension"));
    }
    let z = post
        .mean
        .iter()
        .zip(&post.variance)
        .zip(noise)
        .map(|((m, v), e)| m + v.sqrt() * e)
        .collect();
    Ok(LatentTask {
        z,
        source: LatentSource::Posterior(post.clone()),
    })
}

pub fn prior_latent(dim: usize, noise: &[f64]) -> Result<LatentTask> {
    let mut t = sample_latent(&LatentPosterior::prior(dim), noise)?;
    t.source = LatentSource::Prior;
    Ok(t)
}

/// Differentiable inference: encoder pass, posterior, reparameterised `z`.
/// Keep it around to push gradients from `z` and the KL term back into the
/// encoder parameters.
#[derive(Debug, Clone)]
pub struct InferencePass {
    cache: ForwardCache,
    pub posterior: LatentPosterior,
    noise: Vec<f64>,
    pub z: Vec<f64>,
}

impl InferencePass {
    pub fn run(phi: &MlpParams, context: &ContextBatch, noise: &[f64]) -> Result<Self> {
        let cache = phi.forward_batch(&context.entries)?;
        let out = cache.output();
        let d = out.cols() / 2;
        if noise.len() != d || out.cols() % 2 != 0 {
            return Err(Error::invalid("encoder head width does not match latent noise"));
        }
        let clamped: Vec<Vec<f64>> = (0..out.rows())
            .map(|r| {
                split_head(out.row(r))
                    .1
                    .iter()
                    .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
                    .collect()
            })
            .collect();
        let means: Vec<&[f64]> = (0..out.rows()).map(|r| split_head(out.row(r)).0).collect();
        let stds: Vec<&[f64]> = clamped.iter().map(|v| v.as_slice()).collect();
        let posterior = product_of_gaussians(&means, &stds)?;
        let z = sample_latent(&posterior, noise)?.z;
        Ok(Self {
            cache,
            posterior,
            noise: noise.to_vec(),
            z,
        })
    }

    pub fn kl(&self) -> f64 {
        kl_to_prior(&self.posterior)
    }

    /// ∂(d_z·z + kl_weight·KL)/∂phi.
    pub fn backward(&self, phi: &MlpParams, d_z: &[f64], kl_weight: f64) -> Result<Vec<f64>> {
        let out = self.cache.output();
        let (n, d) = (out.rows(), out.cols() / 2);
        if d_z.len() != d {
            return Err(Error::invalid("latent gradient has the wrong dimension"));
        }
        let post = &self.posterior;
        // gradients w.r.t. posterior mean and variance
        let mut g_mean = vec![0.0; d];
        let mut g_var = vec![0.0; d];
        for k in 0..d {
            let v = post.variance[k];
            g_mean[k] = d_z[k] + kl_weight * post.mean[k];
            g_var[k] = d_z[k] * self.noise[k] / (2.0 * v.sqrt()) + kl_weight * 0.5 * (1.0 - 1.0 / v);
        }
        let mut grad_out = Matrix::zeros(n, 2 * d);
        for r in 0..n {
            let (mu, raw_ls) = split_head(out.row(r));
            let row = grad_out.row_mut(r);
            for k in 0..d {
                let ls = raw_ls[k].clamp(LOG_STD_MIN, LOG_STD_MAX);
                let p = (-2.0 * ls).exp();
                let big_p = 1.0 / post.variance[k];
                row[k] = g_mean[k] * p / big_p;
                let g_p = g_mean[k] * (mu[k] - post.mean[k]) / big_p - g_var[k] / (big_p * big_p);
                row[d + k] = if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw_ls[k]) {
                    -2.0 * p * g_p
                } else {
                    0.0
                };
            }
        }
        Ok(phi.backward(&self.cache, &grad_out)?.params)
    }
}
