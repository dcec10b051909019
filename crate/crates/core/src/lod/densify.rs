use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::partition::{Box2, GroundAxes};
use crate::splat::{logit, quat_to_matrix, GaussianSet};

/// Children of a split shrink their scales by this factor.
pub const SPLIT_SHRINK: f64 = 1.6;
pub const PRUNE_OPACITY: f64 = 0.005;
/// Opacity cap applied by a reset.
pub const RESET_OPACITY: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub tau_min: f64,
    pub eta: f64,
    /// Distance at which the threshold saturates; `None` uses the partition size.
    pub d_max: Option<f64>,
    /// Accumulate absolute per-pixel contributions instead of the net gradient.
    pub abs_grad: bool,
    /// Split instead of clone above this fraction of the scene extent.
    pub split_fraction: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            tau_min: 0.0002,
            eta: 4.0,
            d_max: None,
            abs_grad: false,
            split_fraction: 0.01,
        }
    }
}

/// Distance-dependent densification threshold: `τ_min` inside the partition,
/// rising linearly to `η·τ_min` at `d_max` and flat beyond.
pub fn threshold(d: f64, tau_min: f64, eta: f64, d_max: f64) -> f64 {
    tau_min * (d.max(0.0).min(d_max) / d_max * (eta - 1.0) + 1.0)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DensifyOutcome {
    /// For every row of the new set, the row it was copied from, or `None`
    /// for rows created by cloning or splitting.
    pub sources: Vec<Option<usize>>,
    pub candidates: usize,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Mean accumulated image-space gradient per Gaussian.
pub fn mean_gradients(set: &GaussianSet) -> Vec<f64> {
    set.grad_accum
        .iter()
        .zip(&set.grad_count)
        .map(|(a, c)| if *c > 0 { a / *c as f64 } else { 0.0 })
        .collect()
}

/// Candidates ordered by excess over their own threshold, then index.
pub fn ranked_candidates(set: &GaussianSet, cfg: &DensifyConfig, bbox: &Box2, axes: GroundAxes, d_max: f64) -> Vec<usize> {
    let grads = mean_gradients(set);
    let mut cands: Vec<(f64, usize)> = (0..set.len())
        .filter_map(|i| {
            let d = bbox.distance(axes.project_slice(&set.mu[i]));
            let tau = threshold(d, cfg.tau_min, cfg.eta, d_max);
            (grads[i] > tau).then_some((grads[i] - tau, i))
        })
        .collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    cands.into_iter().map(|(_, i)| i).collect()
}

/// One densification pass: clone or split the best-ranked candidates until
/// the count reaches `budget_target`, prune near-transparent Gaussians and
/// reset the statistics.
pub fn densify_step(
    set: &mut GaussianSet,
    cfg: &DensifyConfig,
    bbox: &Box2,
    axes: GroundAxes,
    scene_extent: f64,
    budget_target: usize,
    rng: &mut impl Rng,
) -> DensifyOutcome {
    let d_max = cfg.d_max.unwrap_or_else(|| bbox.extent(0).max(bbox.extent(1)));
    let ranked = ranked_candidates(set, cfg, bbox, axes, d_max);
    let headroom = budget_target.saturating_sub(set.len());
    let chosen = &ranked[..ranked.len().min(headroom)];
    let split_size = cfg.split_fraction * scene_extent;

    let mut is_split = vec![false; set.len()];
    let mut clones = Vec::new();
    for &i in chosen {
        let max_scale = set.scale(i).into_iter().fold(0.0, f64::max);
        if max_scale > split_size {
            is_split[i] = true;
        } else {
            clones.push(i);
        }
    }

    let n_before = set.len();
    let mut out = DensifyOutcome {
        candidates: ranked.len(),
        cloned: clones.len(),
        split: is_split.iter().filter(|s| **s).count(),
        ..Default::default()
    };

    let mut next = GaussianSet::new(set.embed_dim);
    for i in 0..n_before {
        if !is_split[i] {
            next.push(set.get(i));
            out.sources.push(Some(i));
        }
    }
    for &i in &clones {
        next.push(set.get(i));
        out.sources.push(None);
    }
    for i in (0..n_before).filter(|&i| is_split[i]) {
        let parent = set.get(i);
        let r = quat_to_matrix(parent.rot);
        let s = parent.scale();
        for _ in 0..2 {
            let z = Vector3::from_fn(|k, _| s[k] * rng.sample::<f64, _>(StandardNormal));
            let offset = r * z;
            let mut child = parent.clone();
            child.mu = [0, 1, 2].map(|k| parent.mu[k] + offset[k]);
            child.log_scale = parent.log_scale.map(|l| l - SPLIT_SHRINK.ln());
            next.push(child);
            out.sources.push(None);
        }
    }

    // prune
    let keep: Vec<usize> = (0..next.len()).filter(|&i| next.opacity(i) >= PRUNE_OPACITY).collect();
    out.pruned = next.len() - keep.len();
    if out.pruned > 0 {
        out.sources = keep.iter().map(|&i| out.sources[i]).collect();
        next = next.select(&keep);
    }
    next.reset_stats();
    *set = next;
    out
}

/// Caps every opacity at [`RESET_OPACITY`].
pub fn reset_opacity(set: &mut GaussianSet) {
    let cap = logit(RESET_OPACITY);
    for l in &mut set.opacity_logit {
        *l = l.min(cap);
    }
}

/// Count the budget allows after densification step `k` of `steps`
/// (1-based), ramping linearly from `start` to `budget`.
pub fn budget_target(start: usize, budget: usize, k: usize, steps: usize) -> usize {
    if budget <= start || steps == 0 {
        return budget.max(start).min(budget);
    }
    let k = k.min(steps);
    start + ((budget - start) * k).div_ceil(steps)
}
