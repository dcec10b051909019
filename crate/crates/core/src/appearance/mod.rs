//! Per-Gaussian and per-image embeddings decoded by a small MLP into color
//! and opacity offsets, with the neighbor similarity regularizer and the
//! half-image embedding fit used for evaluation.

mod fit;
mod similarity;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::splat::{sigmoid, GaussianSet};

pub use fit::{
    fit_test_embedding, fit_test_embeddings, half_embedding_eval, half_mask, render_segments, render_with_embedding,
    FitOptions, HalfEval, HalfRegion, Segment,
};
pub use similarity::{decay_weight, similarity_reg, similarity_reg_at, SimReg, SimRegConfig};

pub const IMAGE_EMBED_DIM: usize = 32;
pub const HIDDEN: usize = 32;
pub const OUTPUTS: usize = 4;
/// Initial output bias of the opacity head, so that Δo starts near zero.
const DELTA_O_BIAS: f64 = -4.0;

/// One hidden layer with ReLU, sigmoid outputs. Parameters are stored flat:
/// `w1 (hidden × in)`, `b1`, `w2 (4 × hidden)`, `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub in_dim: usize,
    pub hidden: usize,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn new(in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut mlp = Self {
            in_dim,
            hidden,
            params: vec![0.0; Self::param_count(in_dim, hidden)],
        };
        let l1 = Uniform::new_inclusive(-1.0, 1.0);
        let s1 = 1.0 / (in_dim as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        let (w1, _, w2, b2) = mlp.offsets();
        for p in &mut mlp.params[w1..w1 + hidden * in_dim] {
            *p = s1 * l1.sample(rng);
        }
        for p in &mut mlp.params[w2..w2 + OUTPUTS * hidden] {
            *p = s2 * l1.sample(rng);
        }
        mlp.params[b2 + 3] = DELTA_O_BIAS;
        mlp
    }

    pub fn param_count(in_dim: usize, hidden: usize) -> usize {
        hidden * in_dim + hidden + OUTPUTS * hidden + OUTPUTS
    }

    fn offsets(&self) -> (usize, usize, usize, usize) {
        let w1 = 0;
        let b1 = self.hidden * self.in_dim;
        let w2 = b1 + self.hidden;
        let b2 = w2 + OUTPUTS * self.hidden;
        (w1, b1, w2, b2)
    }

    /// Writes hidden pre-activations into `pre` and returns the outputs.
    pub fn forward(&self, x: &[f64], pre: &mut [f64]) -> [f64; OUTPUTS] {
        let (w1, b1, w2, b2) = self.offsets();
        let p = &self.params;
        for j in 0..self.hidden {
            let row = &p[w1 + j * self.in_dim..w1 + (j + 1) * self.in_dim];
            pre[j] = p[b1 + j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        let mut out = [0.0; OUTPUTS];
        for (k, o) in out.iter_mut().enumerate() {
            let row = &p[w2 + k * self.hidden..w2 + (k + 1) * self.hidden];
            let z = p[b2 + k] + row.iter().zip(pre.iter()).map(|(a, h)| a * h.max(0.0)).sum::<f64>();
            *o = sigmoid(z);
        }
        out
    }

    /// Accumulates parameter gradients into `g_params` and returns the input
    /// gradient, given the output gradient `g_out` (w.r.t. sigmoid outputs).
    fn backward(&self, x: &[f64], pre: &[f64], out: &[f64; OUTPUTS], g_out: &[f64; OUTPUTS], g_params: &mut [f64]) -> Vec<f64> {
        let (w1, b1, w2, b2) = self.offsets();
        let p = &self.params;
        let gz: [f64; OUTPUTS] = std::array::from_fn(|k| g_out[k] * out[k] * (1.0 - out[k]));
        let mut gh = vec![0.0; self.hidden];
        for k in 0..OUTPUTS {
            if gz[k] == 0.0 {
                continue;
            }
            g_params[b2 + k] += gz[k];
            for j in 0..self.hidden {
                g_params[w2 + k * self.hidden + j] += gz[k] * pre[j].max(0.0);
                gh[j] += gz[k] * p[w2 + k * self.hidden + j];
            }
        }
        let mut gx = vec![0.0; self.in_dim];
        for j in 0..self.hidden {
            if pre[j] <= 0.0 || gh[j] == 0.0 {
                continue;
            }
            g_params[b1 + j] += gh[j];
            for (i, xi) in x.iter().enumerate() {
                g_params[w1 + j * self.in_dim + i] += gh[j] * xi;
                gx[i] += gh[j] * p[w1 + j * self.in_dim + i];
            }
        }
        gx
    }

    /// Forces every output to `(0.5, 0.5, 0.5, 0)`, the identity transform.
    pub fn make_neutral(&mut self) {
        let (_, _, w2, b2) = self.offsets();
        self.params[w2..].iter_mut().for_each(|v| *v = 0.0);
        self.params[b2 + 3] = -1000.0;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceModel {
    pub gaussian_dim: usize,
    pub image_dim: usize,
    pub mlp: Mlp,
    pub image_embeddings: BTreeMap<u32, Vec<f64>>,
}

impl AppearanceModel {
    /// Zero image embeddings for `image_ids` and a freshly initialized MLP.
    pub fn new(gaussian_dim: usize, image_ids: impl IntoIterator<Item = u32>, rng: &mut impl Rng) -> Self {
        Self {
            gaussian_dim,
            image_dim: IMAGE_EMBED_DIM,
            mlp: Mlp::new(gaussian_dim + IMAGE_EMBED_DIM, HIDDEN, rng),
            image_embeddings: image_ids.into_iter().map(|id| (id, vec![0.0; IMAGE_EMBED_DIM])).collect(),
        }
    }

    pub fn embedding(&self, image_id: u32) -> Result<&[f64]> {
        self.image_embeddings
            .get(&image_id)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownImage(image_id))
    }

    pub fn transform(&self, set: &GaussianSet, image_id: u32) -> Result<Transformed> {
        Ok(self.transform_with(set, self.embedding(image_id)?))
    }

    /// Average of the training image embeddings; zeros when there are none.
    pub fn mean_embedding(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.image_dim];
        for e in self.image_embeddings.values() {
            for (a, b) in m.iter_mut().zip(e) {
                *a += b;
            }
        }
        let n = self.image_embeddings.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Applies the offsets predicted for `image_embedding` to every Gaussian.
    pub fn transform_with(&self, set: &GaussianSet, image_embedding: &[f64]) -> Transformed {
        assert_eq!(set.embed_dim, self.gaussian_dim, "Gaussian embedding width");
        let n = set.len();
        let h = self.mlp.hidden;
        let mut tr = Transformed {
            colors: Vec::with_capacity(n),
            opacities: Vec::with_capacity(n),
            delta_o: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
            pre: vec![0.0; n * h],
            image_embedding: image_embedding.to_vec(),
        };
        let mut x = vec![0.0; self.mlp.in_dim];
        x[self.gaussian_dim..].copy_from_slice(image_embedding);
        for i in 0..n {
            x[..self.gaussian_dim].copy_from_slice(set.embedding_of(i));
            let out = self.mlp.forward(&x, &mut tr.pre[i * h..(i + 1) * h]);
            let c = set.color[i];
            tr.colors.push(std::array::from_fn(|k| (c[k] + 2.0 * (out[k] - 0.5)).clamp(0.0, 1.0)));
            tr.opacities.push(set.opacity(i) * (1.0 - out[3]));
            tr.delta_o.push(out[3]);
            tr.outputs.push(out);
        }
        tr
    }

    /// Pulls gradients w.r.t. the transformed colors and opacities (and a
    /// uniform direct gradient on every Δo) back to the scene and the module.
    pub fn backward(
        &self,
        set: &GaussianSet,
        tr: &Transformed,
        g_colors: &[[f64; 3]],
        g_opacities: &[f64],
        g_delta_o: f64,
    ) -> AppearanceGrads {
        let n = set.len();
        let h = self.mlp.hidden;
        let gd = self.gaussian_dim;
        let mut out = AppearanceGrads {
            color: vec![[0.0; 3]; n],
            opacity: vec![0.0; n],
            gaussian_embedding: vec![0.0; n * gd],
            image_embedding: vec![0.0; self.image_dim],
            mlp: vec![0.0; self.mlp.params.len()],
        };
        let mut x = vec![0.0; self.mlp.in_dim];
        x[gd..].copy_from_slice(&tr.image_embedding);
        for i in 0..n {
            let y = tr.outputs[i];
            let c = set.color[i];
            let mut g_out = [0.0; OUTPUTS];
            for k in 0..3 {
                let v = c[k] + 2.0 * (y[k] - 0.5);
                if v > 0.0 && v < 1.0 {
                    out.color[i][k] = g_colors[i][k];
                    g_out[k] = 2.0 * g_colors[i][k];
                }
            }
            let o = set.opacity(i);
            out.opacity[i] = g_opacities[i] * (1.0 - y[3]);
            g_out[3] = -g_opacities[i] * o + g_delta_o;
            if g_out.iter().all(|g| *g == 0.0) {
                continue;
            }
            x[..gd].copy_from_slice(set.embedding_of(i));
            let gx = self.mlp.backward(&x, &tr.pre[i * h..(i + 1) * h], &y, &g_out, &mut out.mlp);
            out.gaussian_embedding[i * gd..(i + 1) * gd].copy_from_slice(&gx[..gd]);
            for (a, b) in out.image_embedding.iter_mut().zip(&gx[gd..]) {
                *a += b;
            }
        }
        out
    }
}

/// Per-Gaussian appearance-adjusted colors and opacities for one image
/// embedding, with the activations needed for the reverse pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformed {
    pub colors: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    pub delta_o: Vec<f64>,
    outputs: Vec<[f64; OUTPUTS]>,
    pre: Vec<f64>,
    image_embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceGrads {
    /// W.r.t. the base color.
    pub color: Vec<[f64; 3]>,
    /// W.r.t. the base opacity (not its logit).
    pub opacity: Vec<f64>,
    pub gaussian_embedding: Vec<f64>,
    pub image_embedding: Vec<f64>,
    pub mlp: Vec<f64>,
}
