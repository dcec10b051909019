//! EWA projection of 3D Gaussians to screen-space splats, and its adjoint.

use nalgebra::{Matrix2x3, Matrix3, Vector3};

use super::gaussian::{quat_matrix_vjp, quat_to_matrix, GaussianSet};
use crate::sfm::{CameraIntrinsics, Pose};

/// Camera-frame depth below which Gaussians are dropped.
pub const NEAR_PLANE: f64 = 0.01;
/// Dilation added to every screen-space covariance, in px².
pub const COV_FLOOR: f64 = 0.3;
/// Screen-space mip filter standard deviation, in px.
pub const MIP_FILTER_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intr: CameraIntrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn new(intr: CameraIntrinsics, pose: Pose) -> Self {
        Self { intr, pose }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            intr: self.intr.scaled(factor),
            pose: self.pose,
        }
    }

    pub fn width(&self) -> u32 {
        self.intr.width
    }

    pub fn height(&self) -> u32 {
        self.intr.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ProjectOptions {
    /// Screen-space mip filter with opacity compensation.
    pub antialias: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub center: [f64; 2],
    /// Upper triangle `(xx, xy, yy)` of the screen covariance.
    pub cov: [f64; 3],
    /// Upper triangle of the inverse covariance.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    pub source: usize,
}

impl Splat2D {
    pub fn max_eigenvalue(&self) -> f64 {
        let [a, b, c] = self.cov;
        let mid = 0.5 * (a + c);
        mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt()
    }
}

/// Gradient of a scalar with respect to one splat's fields.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SplatGrad {
    pub center: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub depth: f64,
    /// Per-pixel absolute center contributions, summed.
    pub center_abs: [f64; 2],
}

impl SplatGrad {
    pub fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.center[k] += o.center[k];
            self.center_abs[k] += o.center_abs[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

/// Gradients w.r.t. the geometric fields plus the per-Gaussian color and
/// opacity that were fed to the projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectGrads {
    pub mu: Vec<[f64; 3]>,
    pub rot: Vec<[f64; 4]>,
    pub log_scale: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    /// Screen-space center gradient per Gaussian (zero when not visible).
    pub center: Vec<[f64; 2]>,
    pub center_abs: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl ProjectGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            mu: vec![[0.0; 3]; n],
            rot: vec![[0.0; 4]; n],
            log_scale: vec![[0.0; 3]; n],
            opacity: vec![0.0; n],
            color: vec![[0.0; 3]; n],
            center: vec![[0.0; 2]; n],
            center_abs: vec![[0.0; 2]; n],
            visible: vec![false; n],
        }
    }
}

struct Forward {
    t: Vector3<f64>,
    jw: Matrix2x3<f64>,
    sigma: Matrix3<f64>,
    cov_pre: [f64; 3],
    aa_factor: f64,
}

fn forward_one(
    mu: &[f64; 3],
    rot: [f64; 4],
    log_scale: [f64; 3],
    cam: &Camera,
    opts: ProjectOptions,
) -> Option<(Forward, [f64; 2], [f64; 3])> {
    let intr = &cam.intr;
    let t = cam.pose.to_camera(&Vector3::from(*mu));
    if t.z <= NEAR_PLANE {
        return None;
    }
    let u = intr.fx * t.x / t.z + intr.cx;
    let v = intr.fy * t.y / t.z + intr.cy;
    let (w, h) = (intr.width as f64, intr.height as f64);
    if u < -0.5 * w || u > 1.5 * w || v < -0.5 * h || v > 1.5 * h {
        return None;
    }
    let j = Matrix2x3::new(
        intr.fx / t.z,
        0.0,
        -intr.fx * t.x / (t.z * t.z),
        0.0,
        intr.fy / t.z,
        -intr.fy * t.y / (t.z * t.z),
    );
    let jw = j * cam.pose.rotation;
    let r = quat_to_matrix(rot);
    let s2 = Matrix3::from_diagonal(&Vector3::from(log_scale.map(|l| (2.0 * l).exp())));
    let sigma = r * s2 * r.transpose();
    let c2 = jw * sigma * jw.transpose();
    let cov_pre = [c2[(0, 0)] + COV_FLOOR, c2[(0, 1)], c2[(1, 1)] + COV_FLOOR];
    let (cov, aa_factor) = if opts.antialias {
        let s2 = MIP_FILTER_SIGMA * MIP_FILTER_SIGMA;
        let post = [cov_pre[0] + s2, cov_pre[1], cov_pre[2] + s2];
        let det_pre = cov_pre[0] * cov_pre[2] - cov_pre[1] * cov_pre[1];
        let det_post = post[0] * post[2] - post[1] * post[1];
        (post, (det_pre / det_post).max(0.0).sqrt())
    } else {
        (cov_pre, 1.0)
    };
    Some((
        Forward {
            t,
            jw,
            sigma,
            cov_pre,
            aa_factor,
        },
        [u, v],
        cov,
    ))
}

fn conic_of(cov: [f64; 3]) -> Option<[f64; 3]> {
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    (det > 0.0).then(|| [cov[2] / det, -cov[1] / det, cov[0] / det])
}

/// Projects every visible Gaussian using its own color and opacity.
pub fn project_gaussians(set: &GaussianSet, cam: &Camera, opts: ProjectOptions) -> Vec<Splat2D> {
    project_gaussians_with(set, &set.color, &set.opacities(), cam, opts)
}

/// Projects with per-Gaussian color and opacity overrides (e.g. from an
/// appearance transform).
pub fn project_gaussians_with(
    set: &GaussianSet,
    colors: &[[f64; 3]],
    opacities: &[f64],
    cam: &Camera,
    opts: ProjectOptions,
) -> Vec<Splat2D> {
    (0..set.len())
        .filter_map(|i| {
            let (f, center, cov) = forward_one(&set.mu[i], set.rot[i], set.log_scale[i], cam, opts)?;
            let conic = conic_of(cov)?;
            Some(Splat2D {
                center,
                cov,
                conic,
                depth: f.t.z,
                color: colors[i],
                opacity: opacities[i] * f.aa_factor,
                source: i,
            })
        })
        .collect()
}

/// Adjoint of [`project_gaussians_with`]: maps per-splat gradients (indexed
/// like `splats`) back to the Gaussian parameters.
pub fn project_backward(
    set: &GaussianSet,
    opacities: &[f64],
    cam: &Camera,
    opts: ProjectOptions,
    splats: &[Splat2D],
    grads: &[SplatGrad],
) -> ProjectGrads {
    let mut out = ProjectGrads::zeros(set.len());
    let intr = &cam.intr;
    for (splat, g) in splats.iter().zip(grads) {
        let i = splat.source;
        let Some((f, _, cov)) = forward_one(&set.mu[i], set.rot[i], set.log_scale[i], cam, opts) else {
            continue;
        };
        out.visible[i] = true;
        out.color[i] = g.color;
        out.center[i] = g.center;
        out.center_abs[i] = g.center_abs;

        // conic -> covariance
        let [a_c, b_c, c_c] = cov;
        let det = a_c * c_c - b_c * b_c;
        let det2 = det * det;
        let [ga, gb, gc] = g.conic;
        let mut g_cov = [
            ga * (-c_c * c_c / det2) + gb * (b_c * c_c / det2) + gc * (1.0 / det - a_c * c_c / det2),
            ga * (2.0 * b_c * c_c / det2) + gb * (-1.0 / det - 2.0 * b_c * b_c / det2) + gc * (2.0 * a_c * b_c / det2),
            ga * (1.0 / det - a_c * c_c / det2) + gb * (a_c * b_c / det2) + gc * (-a_c * a_c / det2),
        ];

        // opacity compensation
        out.opacity[i] = g.opacity * f.aa_factor;
        if opts.antialias && f.aa_factor > 0.0 {
            let g_k = g.opacity * opacities[i];
            let [a, b, c] = f.cov_pre;
            let s2 = MIP_FILTER_SIGMA * MIP_FILTER_SIGMA;
            let det_pre = a * c - b * b;
            let det_post = (a + s2) * (c + s2) - b * b;
            let dp2 = det_post * det_post;
            let dratio = [
                (c * det_post - det_pre * (c + s2)) / dp2,
                (-2.0 * b * det_post + 2.0 * b * det_pre) / dp2,
                (a * det_post - det_pre * (a + s2)) / dp2,
            ];
            for k in 0..3 {
                g_cov[k] += g_k * 0.5 / f.aa_factor * dratio[k];
            }
        }

        // cov = M Σ Mᵀ with M = J W
        let g2 = nalgebra::Matrix2::new(g_cov[0], 0.5 * g_cov[1], 0.5 * g_cov[1], g_cov[2]);
        let g_sigma = f.jw.transpose() * g2 * f.jw;
        let g_m = 2.0 * g2 * f.jw * f.sigma;
        let g_j = g_m * cam.pose.rotation.transpose();

        let (tx, ty, tz) = (f.t.x, f.t.y, f.t.z);
        let (fx, fy) = (intr.fx, intr.fy);
        let tz2 = tz * tz;
        let tz3 = tz2 * tz;
        let mut gt = Vector3::new(
            g.center[0] * fx / tz,
            g.center[1] * fy / tz,
            -g.center[0] * fx * tx / tz2 - g.center[1] * fy * ty / tz2 + g.depth,
        );
        gt.z += g_j[(0, 0)] * (-fx / tz2);
        gt.x += g_j[(0, 2)] * (-fx / tz2);
        gt.z += g_j[(0, 2)] * (2.0 * fx * tx / tz3);
        gt.z += g_j[(1, 1)] * (-fy / tz2);
        gt.y += g_j[(1, 2)] * (-fy / tz2);
        gt.z += g_j[(1, 2)] * (2.0 * fy * ty / tz3);
        let g_mu = cam.pose.rotation.transpose() * gt;
        out.mu[i] = [g_mu.x, g_mu.y, g_mu.z];

        // Σ = (R S)(R S)ᵀ
        let r = quat_to_matrix(set.rot[i]);
        let s = set.log_scale[i].map(f64::exp);
        let m3 = r * Matrix3::from_diagonal(&Vector3::from(s));
        let g_m3 = 2.0 * g_sigma * m3;
        let mut g_r = Matrix3::zeros();
        for row in 0..3 {
            for col in 0..3 {
                g_r[(row, col)] = g_m3[(row, col)] * s[col];
            }
        }
        for k in 0..3 {
            let g_s: f64 = (0..3).map(|row| g_m3[(row, k)] * r[(row, k)]).sum();
            out.log_scale[i][k] = g_s * s[k];
        }
        out.rot[i] = quat_matrix_vjp(set.rot[i], &g_r);
    }
    out
}
