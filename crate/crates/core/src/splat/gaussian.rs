use nalgebra::{Matrix3, Vector3};

pub const DEFAULT_EMBED_DIM: usize = 16;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|c| c / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back to the raw (unnormalized)
/// quaternion.
pub fn quat_matrix_vjp(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|c| c / n);
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gn = [gw, gx, gy, gz];
    let qn = [w, x, y, z];
    let dot: f64 = gn.iter().zip(&qn).map(|(a, b)| a * b).sum();
    [0, 1, 2, 3].map(|i| (gn[i] - qn[i] * dot) / n)
}

/// A single Gaussian, convenient for construction and inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mu: [f64; 3],
    pub rot: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub color: [f64; 3],
    pub embedding: Vec<f64>,
}

impl Gaussian {
    pub fn isotropic(mu: [f64; 3], scale: f64, opacity: f64, color: [f64; 3]) -> Self {
        Self {
            mu,
            rot: [1.0, 0.0, 0.0, 0.0],
            log_scale: [scale.ln(); 3],
            opacity_logit: logit(opacity),
            color,
            embedding: Vec::new(),
        }
    }

    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(f64::exp)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance(self.rot, self.log_scale)
    }
}

/// `R · diag(exp(2 · log_scale)) · Rᵀ`.
pub fn covariance(rot: [f64; 4], log_scale: [f64; 3]) -> Matrix3<f64> {
    let r = quat_to_matrix(rot);
    let s2 = Matrix3::from_diagonal(&Vector3::from(log_scale.map(|l| (2.0 * l).exp())));
    r * s2 * r.transpose()
}

/// Unnormalized Gaussian density `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
pub fn eval_gaussian(g: &Gaussian, x: [f64; 3]) -> f64 {
    let d = Vector3::from(x) - Vector3::from(g.mu);
    let inv = g
        .covariance()
        .try_inverse()
        .expect("covariance is positive definite by construction");
    (-0.5 * d.dot(&(inv * d))).exp()
}

/// Structure-of-arrays Gaussian scene with densification statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianSet {
    pub mu: Vec<[f64; 3]>,
    pub rot: Vec<[f64; 4]>,
    pub log_scale: Vec<[f64; 3]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    /// Row-major `len × embed_dim`.
    pub embedding: Vec<f64>,
    pub embed_dim: usize,
    pub grad_accum: Vec<f64>,
    pub grad_count: Vec<u32>,
}

impl GaussianSet {
    pub fn new(embed_dim: usize) -> Self {
        Self {
            embed_dim,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn push(&mut self, g: Gaussian) {
        self.mu.push(g.mu);
        self.rot.push(g.rot);
        self.log_scale.push(g.log_scale);
        self.opacity_logit.push(g.opacity_logit);
        self.color.push(g.color);
        let mut e = g.embedding;
        e.resize(self.embed_dim, 0.0);
        self.embedding.extend(e);
        self.grad_accum.push(0.0);
        self.grad_count.push(0);
    }

    pub fn get(&self, i: usize) -> Gaussian {
        Gaussian {
            mu: self.mu[i],
            rot: self.rot[i],
            log_scale: self.log_scale[i],
            opacity_logit: self.opacity_logit[i],
            color: self.color[i],
            embedding: self.embedding_of(i).to_vec(),
        }
    }

    pub fn embedding_of(&self, i: usize) -> &[f64] {
        &self.embedding[i * self.embed_dim..(i + 1) * self.embed_dim]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logit[i])
    }

    pub fn opacities(&self) -> Vec<f64> {
        self.opacity_logit.iter().map(|l| sigmoid(*l)).collect()
    }

    pub fn scale(&self, i: usize) -> [f64; 3] {
        self.log_scale[i].map(f64::exp)
    }

    /// New set holding the Gaussians at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> GaussianSet {
        let mut out = GaussianSet::new(self.embed_dim);
        for &i in indices {
            out.push(self.get(i));
            let last = out.len() - 1;
            out.grad_accum[last] = self.grad_accum[i];
            out.grad_count[last] = self.grad_count[i];
        }
        out
    }

    pub fn extend_from(&mut self, other: &GaussianSet) {
        assert_eq!(self.embed_dim, other.embed_dim);
        for i in 0..other.len() {
            self.push(other.get(i));
        }
    }

    pub fn reset_stats(&mut self) {
        self.grad_accum.iter_mut().for_each(|v| *v = 0.0);
        self.grad_count.iter_mut().for_each(|v| *v = 0);
    }

    /// Checks that every per-Gaussian array has the same length.
    pub fn is_consistent(&self) -> bool {
        let n = self.len();
        self.rot.len() == n
            && self.log_scale.len() == n
            && self.opacity_logit.len() == n
            && self.color.len() == n
            && self.embedding.len() == n * self.embed_dim
            && self.grad_accum.len() == n
            && self.grad_count.len() == n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};

    #[test]
    fn density_is_one_at_center() {
        let g = Gaussian::isotropic([1.0, 2.0, 3.0], 0.3, 0.5, [0.0; 3]);
        assert_eq!(eval_gaussian(&g, g.mu), 1.0);
    }

    #[test]
    fn isotropic_unit_distance() {
        let g = Gaussian::isotropic([0.0; 3], 1.0, 0.5, [0.0; 3]);
        let v = eval_gaussian(&g, [0.0, 1.0, 0.0]);
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn isotropic_is_rotation_invariant() {
        let mut g = Gaussian::isotropic([0.5, -0.2, 0.1], 0.7, 0.5, [0.0; 3]);
        g.rot = [0.3, -0.5, 0.2, 0.8];
        let d = Vector3::new(0.4, 0.1, -0.3);
        let reference = eval_gaussian(&g, (Vector3::from(g.mu) + d).into());
        let axis = Unit::new_normalize(Vector3::new(1.0, 2.0, -0.5));
        for k in 0..8 {
            let r = Rotation3::from_axis_angle(&axis, k as f64 * 0.7);
            let x = Vector3::from(g.mu) + r * d;
            assert!((eval_gaussian(&g, x.into()) - reference).abs() < 1e-12);
        }
    }

    #[test]
    fn covariance_is_spd() {
        let cov = covariance([0.2, 0.9, -0.1, 0.4], [-1.0, 0.3, -2.0]);
        assert!((cov - cov.transpose()).norm() < 1e-12);
        assert!(cov.symmetric_eigenvalues().iter().all(|e| *e > 0.0));
    }

    #[test]
    fn quaternion_vjp_matches_finite_differences() {
        let q = [0.4, -0.3, 0.7, 0.2];
        let g = Matrix3::new(0.3, -1.2, 0.5, 0.9, 0.1, -0.4, 0.2, 0.7, -0.8);
        let f = |q: [f64; 4]| quat_to_matrix(q).component_mul(&g).sum();
        let analytic = quat_matrix_vjp(q, &g);
        for i in 0..4 {
            let h = 1e-6;
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let fd = (f(qp) - f(qm)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-8, "{i}: {fd} vs {}", analytic[i]);
        }
    }
}
