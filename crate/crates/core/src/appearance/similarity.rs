use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splat::GaussianSet;

const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimRegConfig {
    pub k: usize,
    pub sample_size: usize,
    /// Iterations between regularization steps.
    pub cadence: usize,
    pub lambda_w: f64,
}

impl Default for SimRegConfig {
    fn default() -> Self {
        Self {
            k: 16,
            sample_size: 20480,
            cadence: 50,
            lambda_w: 4.0,
        }
    }
}

impl SimRegConfig {
    /// Shrinks `k` and the sample so they fit a set of `n` Gaussians.
    pub fn clamped(&self, n: usize) -> Self {
        Self {
            k: self.k.min(n.saturating_sub(1)),
            sample_size: self.sample_size.min(n / 2).max(1),
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReg {
    pub value: f64,
    /// Gradient w.r.t. the flat Gaussian embedding array.
    pub grad: Vec<f64>,
    /// Gradient w.r.t. the centers, through the distance weights.
    pub grad_mu: Vec<[f64; 3]>,
}

/// Neighbor weight `exp(−λ_w ‖a − b‖)`.
pub fn decay_weight(a: [f64; 3], b: [f64; 3], lambda_w: f64) -> f64 {
    let dist = (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>().sqrt();
    (-lambda_w * dist).exp()
}

/// Exact k nearest neighbors of `i` by center distance, excluding `i`;
/// ties go to the lower index.
fn knn(set: &GaussianSet, i: usize, k: usize) -> Vec<usize> {
    let mu = set.mu[i];
    let mut d: Vec<(f64, usize)> = (0..set.len())
        .filter(|&j| j != i)
        .map(|j| {
            let m = set.mu[j];
            ((0..3).map(|a| (m[a] - mu[a]).powi(2)).sum::<f64>(), j)
        })
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < d.len() {
        d.select_nth_unstable_by(k, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    d.into_iter().map(|(_, j)| j).collect()
}

/// Cosine similarity with each norm floored at `NORM_EPS`, plus its
/// gradients with respect to both vectors.
fn cosine(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    let floor = NORM_EPS * NORM_EPS;
    let (na2, nb2) = (aa.max(floor), bb.max(floor));
    let denom = (na2 * nb2).sqrt();
    let cos = dot / denom;
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / denom - if aa > floor { cos * x / aa } else { 0.0 })
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| x / denom - if bb > floor { cos * y / bb } else { 0.0 })
        .collect();
    (cos, ga, gb)
}

/// Similarity term for a fixed set of anchors. The neighbor sets are fixed
/// per call; the distance weights are differentiated (zero for co-located
/// pairs).
pub fn similarity_reg_at(set: &GaussianSet, anchors: &[usize], k: usize, lambda_w: f64) -> Result<SimReg> {
    if k < 2 {
        return Err(Error::Argument(format!("similarity regularization needs k >= 2, got {k}")));
    }
    if k + 1 > set.len() {
        return Err(Error::Argument(format!(
            "similarity regularization needs k + 1 = {} Gaussians, set has {}",
            k + 1,
            set.len()
        )));
    }
    let dim = set.embed_dim;
    let mut grad = vec![0.0; set.embedding.len()];
    let mut grad_mu = vec![[0.0; 3]; set.len()];
    if anchors.is_empty() || dim == 0 {
        return Ok(SimReg {
            value: 0.0,
            grad,
            grad_mu,
        });
    }
    let pairs = (k * (k - 1) / 2) as f64;
    let norm = 1.0 / (anchors.len() as f64 * pairs);
    let mut sum = 0.0;
    for &i in anchors {
        let nn = knn(set, i, k);
        for (a, &j) in nn.iter().enumerate() {
            for &l in &nn[a + 1..] {
                let w = decay_weight(set.mu[j], set.mu[l], lambda_w);
                let (cos, gj, gl) = cosine(set.embedding_of(j), set.embedding_of(l));
                sum += w * (1.0 - cos);
                for c in 0..dim {
                    grad[j * dim + c] -= norm * w * gj[c];
                    grad[l * dim + c] -= norm * w * gl[c];
                }
                let d: [f64; 3] = std::array::from_fn(|c| set.mu[j][c] - set.mu[l][c]);
                let dist = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                if dist > 0.0 {
                    // dw/dμ_j = −λ_w w (μ_j − μ_l)/‖μ_j − μ_l‖
                    let f = -norm * (1.0 - cos) * lambda_w * w / dist;
                    for c in 0..3 {
                        grad_mu[j][c] += f * d[c];
                        grad_mu[l][c] -= f * d[c];
                    }
                }
            }
        }
    }
    Ok(SimReg {
        value: sum * norm,
        grad,
        grad_mu,
    })
}

/// Samples anchors without replacement and evaluates the similarity term.
pub fn similarity_reg(set: &GaussianSet, cfg: &SimRegConfig, rng: &mut impl Rng) -> Result<SimReg> {
    let m = cfg.sample_size.min(set.len());
    let mut anchors = rand::seq::index::sample(rng, set.len(), m).into_vec();
    anchors.sort_unstable();
    similarity_reg_at(set, &anchors, cfg.k, cfg.lambda_w)
}
