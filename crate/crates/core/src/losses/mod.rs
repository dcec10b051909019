//! Photometric, depth, scale and offset loss terms and their combination.

mod ssim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sfm::DepthMap;
use crate::splat::{GaussianSet, Image};

pub use ssim::{gaussian_taps, ssim, ssim_with_grad, C1, C2, SIGMA as SSIM_SIGMA, WINDOW as SSIM_WINDOW};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_dssim: f64,
    pub lambda_sim: f64,
    pub lambda_delta_o: f64,
    pub lambda_s: f64,
    pub lambda_d_start: f64,
    pub lambda_d_end: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dssim: 0.2,
            lambda_sim: 0.2,
            lambda_delta_o: 0.05,
            lambda_s: 0.05,
            lambda_d_start: 0.5,
            lambda_d_end: 0.01,
        }
    }
}

impl LossWeights {
    /// Depth weight decaying exponentially from start (iteration 0) to end
    /// (iteration `total - 1`).
    pub fn lambda_d(&self, iter: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.lambda_d_start;
        }
        let t = (iter.min(total - 1)) as f64 / (total - 1) as f64;
        self.lambda_d_start * (self.lambda_d_end / self.lambda_d_start).powf(t)
    }
}

/// Raw values of every term before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub l1: f64,
    pub dssim: f64,
    pub sim: f64,
    pub delta_o: f64,
    pub depth: f64,
    pub max_scale: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub dssim: f64,
    pub sim: f64,
    pub delta_o: f64,
    pub depth: f64,
    pub max_scale: f64,
    pub ratio: f64,
    pub lambda_d: f64,
    pub total: f64,
}

impl LossReport {
    pub fn parts(&self) -> LossParts {
        LossParts {
            l1: self.l1,
            dssim: self.dssim,
            sim: self.sim,
            delta_o: self.delta_o,
            depth: self.depth,
            max_scale: self.max_scale,
            ratio: self.ratio,
        }
    }
}

fn combine(p: &LossParts, w: &LossWeights, lambda_d: f64) -> f64 {
    (1.0 - w.lambda_dssim) * p.l1
        + w.lambda_dssim * p.dssim
        + w.lambda_sim * p.sim
        + w.lambda_delta_o * p.delta_o
        + lambda_d * p.depth
        + w.lambda_s * (p.max_scale + p.ratio)
}

/// Weighted sum of all terms with the depth weight evaluated at `iter`.
pub fn total_loss(p: &LossParts, w: &LossWeights, iter: usize, total_iters: usize) -> Result<LossReport> {
    for (name, v) in [
        ("l1", p.l1),
        ("dssim", p.dssim),
        ("sim", p.sim),
        ("delta_o", p.delta_o),
        ("depth", p.depth),
        ("max_scale", p.max_scale),
        ("ratio", p.ratio),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.to_string() });
        }
    }
    let lambda_d = w.lambda_d(iter, total_iters);
    Ok(LossReport {
        l1: p.l1,
        dssim: p.dssim,
        sim: p.sim,
        delta_o: p.delta_o,
        depth: p.depth,
        max_scale: p.max_scale,
        ratio: p.ratio,
        lambda_d,
        total: combine(p, w, lambda_d),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseLoss {
    pub value: f64,
    pub l1: f64,
    pub dssim: f64,
    /// Gradient of `value` w.r.t. the predicted image, same layout.
    pub grad: Vec<f64>,
}

fn check_shapes(pred: &Image, target: &Image, mask: Option<&[bool]>) -> Result<()> {
    if !pred.same_shape(target) {
        return Err(Error::Argument(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            pred.width, pred.height, pred.channels, target.width, target.height, target.channels
        )));
    }
    if let Some(m) = mask {
        if m.len() != pred.pixel_count() {
            return Err(Error::Argument(format!(
                "mask has {} entries for {} pixels",
                m.len(),
                pred.pixel_count()
            )));
        }
    }
    Ok(())
}

/// Mean absolute error over unmasked pixels and channels, with its gradient.
pub fn l1_with_grad(pred: &Image, target: &Image, mask: Option<&[bool]>) -> Result<(f64, Vec<f64>)> {
    check_shapes(pred, target, mask)?;
    let ch = pred.channels;
    let kept = mask.map_or(pred.pixel_count(), |m| m.iter().filter(|v| **v).count());
    let mut grad = vec![0.0; pred.data.len()];
    if kept == 0 {
        return Ok((0.0, grad));
    }
    let norm = 1.0 / (kept * ch) as f64;
    let mut sum = 0.0;
    for (i, (a, b)) in pred.data.iter().zip(&target.data).enumerate() {
        if mask.is_some_and(|m| !m[i / ch]) {
            continue;
        }
        let d = a - b;
        sum += d.abs();
        grad[i] = if d > 0.0 {
            norm
        } else if d < 0.0 {
            -norm
        } else {
            0.0
        };
    }
    Ok((sum * norm, grad))
}

/// `(1 − λ)·L1 + λ·(1 − SSIM)/2`.
pub fn base_loss(pred: &Image, target: &Image, mask: Option<&[bool]>, lambda: f64) -> Result<BaseLoss> {
    let (l1, g1) = l1_with_grad(pred, target, mask)?;
    let (s, gs) = ssim_with_grad(pred, target, mask, lambda != 0.0);
    let dssim = (1.0 - s) / 2.0;
    let mut grad: Vec<f64> = g1.iter().map(|g| (1.0 - lambda) * g).collect();
    if let Some(gs) = gs {
        for (g, s) in grad.iter_mut().zip(gs) {
            *g -= 0.5 * lambda * s;
        }
    }
    Ok(BaseLoss {
        value: (1.0 - lambda) * l1 + lambda * dssim,
        l1,
        dssim,
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleRegConfig {
    pub s_max: f64,
    pub r_max: f64,
    pub delta: f64,
}

impl ScaleRegConfig {
    pub fn new(s_max: f64) -> Self {
        Self {
            s_max,
            r_max: 10.0,
            delta: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_max > 0.0 && self.r_max >= 1.0 && self.delta > 0.0) {
            return Err(Error::Argument(format!("invalid scale regularization config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleReg {
    pub max_scale: f64,
    pub ratio: f64,
    /// Gradient of `max_scale` w.r.t. log scales.
    pub grad_max_scale: Vec<[f64; 3]>,
    /// Gradient of `ratio` w.r.t. log scales.
    pub grad_ratio: Vec<[f64; 3]>,
}

/// Indices of (largest, median) of three values; ties resolve to the lower index.
fn max_median(s: [f64; 3]) -> (usize, usize) {
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|a, b| s[*b].total_cmp(&s[*a]).then(a.cmp(b)));
    (idx[0], idx[1])
}

/// Max/median ratio of a Gaussian's three scales.
pub fn scale_ratio(s: [f64; 3]) -> f64 {
    let (imax, imed) = max_median(s);
    s[imax] / s[imed]
}

/// Scale upper-bound term over every scale component, and the max/median
/// ratio term over every Gaussian. Indicators carry no gradient.
pub fn scale_reg(set: &GaussianSet, cfg: &ScaleRegConfig) -> ScaleReg {
    let n = set.len();
    let mut out = ScaleReg {
        max_scale: 0.0,
        ratio: 0.0,
        grad_max_scale: vec![[0.0; 3]; n],
        grad_ratio: vec![[0.0; 3]; n],
    };
    let mut ms_num = 0.0;
    let mut ms_count = 0usize;
    let mut r_num = 0.0;
    let mut r_count = 0usize;
    for i in 0..n {
        let s = set.scale(i);
        for v in s {
            if v > cfg.s_max {
                ms_num += v;
                ms_count += 1;
            }
        }
        let r = scale_ratio(s);
        if r > cfg.r_max {
            r_num += r;
            r_count += 1;
        }
    }
    let ms_den = ms_count as f64 + cfg.delta;
    let r_den = r_count as f64 + cfg.delta;
    out.max_scale = ms_num / ms_den;
    out.ratio = r_num / r_den;
    for i in 0..n {
        let s = set.scale(i);
        for k in 0..3 {
            if s[k] > cfg.s_max {
                // d/dlog s = s · d/ds
                out.grad_max_scale[i][k] = s[k] / ms_den;
            }
        }
        let (imax, imed) = max_median(s);
        let r = s[imax] / s[imed];
        if r > cfg.r_max {
            out.grad_ratio[i][imax] += r / r_den;
            out.grad_ratio[i][imed] -= r / r_den;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    /// True when no pixel was usable; the value is then 0.
    pub no_valid_pixels: bool,
}

/// Mean absolute depth error over pixels valid in `target` and `usable`.
pub fn depth_loss(rendered: &[f64], target: &DepthMap, usable: Option<&[bool]>) -> Result<DepthLoss> {
    let n = target.width as usize * target.height as usize;
    if rendered.len() != n || usable.is_some_and(|u| u.len() != n) {
        return Err(Error::Argument(format!(
            "depth sizes differ: rendered {} vs target {n}",
            rendered.len()
        )));
    }
    let ok = |i: usize| target.valid[i] && usable.is_none_or(|u| u[i]) && target.values[i].is_finite();
    let count = (0..n).filter(|&i| ok(i)).count();
    let mut grad = vec![0.0; n];
    if count == 0 {
        log::warn!("depth loss has no valid pixels");
        return Ok(DepthLoss {
            value: 0.0,
            grad,
            no_valid_pixels: true,
        });
    }
    let norm = 1.0 / count as f64;
    let mut sum = 0.0;
    for i in (0..n).filter(|&i| ok(i)) {
        let d = rendered[i] - target.values[i];
        sum += d.abs();
        grad[i] = norm * d.signum() * (d != 0.0) as u8 as f64;
    }
    Ok(DepthLoss {
        value: sum * norm,
        grad,
        no_valid_pixels: false,
    })
}

/// Mean opacity offset; its gradient is `1/N` for every element.
pub fn opacity_offset_reg(delta_o: &[f64]) -> (f64, f64) {
    if delta_o.is_empty() {
        return (0.0, 0.0);
    }
    let n = delta_o.len() as f64;
    (delta_o.iter().sum::<f64>() / n, 1.0 / n)
}

/// `10·log10(1/MSE)` for images in [0, 1], capped at 100 dB.
pub fn psnr(pred: &Image, target: &Image, mask: Option<&[bool]>) -> Result<f64> {
    check_shapes(pred, target, mask)?;
    let ch = pred.channels;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (a, b)) in pred.data.iter().zip(&target.data).enumerate() {
        if mask.is_some_and(|m| !m[i / ch]) {
            continue;
        }
        sum += (a - b) * (a - b);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Argument("PSNR over an empty pixel set".into()));
    }
    let mse = sum / count as f64;
    Ok(if mse <= 0.0 { 100.0 } else { (10.0 * (1.0 / mse).log10()).min(100.0) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::Gaussian;

    #[test]
    fn identical_images_have_zero_loss() {
        let img = Image::filled(8, 8, 3, 0.3);
        let l = base_loss(&img, &img, None, 0.2).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn pure_l1_of_constant_offset() {
        let a = Image::filled(8, 8, 3, 0.3);
        let b = Image::filled(8, 8, 3, 0.4);
        let l = base_loss(&a, &b, None, 0.0).unwrap();
        assert!((l.value - 0.1).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_argument_error() {
        let a = Image::filled(8, 8, 3, 0.3);
        let b = Image::filled(8, 7, 3, 0.3);
        assert!(matches!(base_loss(&a, &b, None, 0.2), Err(Error::Argument(_))));
    }

    #[test]
    fn scale_reg_hand_values() {
        let mut set = GaussianSet::new(0);
        let mut g = Gaussian::isotropic([0.0; 3], 1.0, 0.5, [0.5; 3]);
        g.log_scale = [5f64.ln(), 0.0, 0.0];
        set.push(g);
        let r = scale_reg(&set, &ScaleRegConfig::new(2.0));
        assert!((r.max_scale - 5.0 / (1.0 + 1e-8)).abs() < 1e-12);
        assert!((scale_ratio(set.scale(0)) - 5.0).abs() < 1e-12);
        assert_eq!(r.ratio, 0.0);
    }

    #[test]
    fn scale_reg_inactive_is_zero() {
        let mut set = GaussianSet::new(0);
        set.push(Gaussian::isotropic([0.0; 3], 0.3, 0.5, [0.5; 3]));
        let r = scale_reg(&set, &ScaleRegConfig::new(2.0));
        assert_eq!((r.max_scale, r.ratio), (0.0, 0.0));
        assert_eq!(scale_ratio([0.7; 3]), 1.0);
    }

    #[test]
    fn depth_loss_offset_and_empty() {
        let target = DepthMap::new(4, 4, vec![2.0; 16]);
        let rendered = vec![2.5; 16];
        assert!((depth_loss(&rendered, &target, None).unwrap().value - 0.5).abs() < 1e-12);
        assert_eq!(depth_loss(&target.values, &target, None).unwrap().value, 0.0);
        let empty = DepthMap::new(4, 4, vec![f64::NAN; 16]);
        let l = depth_loss(&rendered, &empty, None).unwrap();
        assert!(l.no_valid_pixels);
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn opacity_offset_mean() {
        assert_eq!(opacity_offset_reg(&[0.0; 5]).0, 0.0);
        let (v, g) = opacity_offset_reg(&[0.1, 0.2, 0.3, 0.4]);
        assert!((v - 0.25).abs() < 1e-15);
        assert_eq!(g, 0.25);
    }

    #[test]
    fn total_recombines_parts() {
        let w = LossWeights::default();
        let zero = total_loss(&LossParts::default(), &w, 0, 100).unwrap();
        assert_eq!(zero.total, 0.0);
        // unit base loss is folded into l1 and dssim
        let parts = LossParts {
            l1: 1.0,
            dssim: 1.0,
            sim: 1.0,
            delta_o: 1.0,
            depth: 1.0,
            max_scale: 0.5,
            ratio: 0.5,
        };
        let r = total_loss(&parts, &w, 0, 100).unwrap();
        assert!((r.total - 1.8).abs() < 1e-12);
        assert!((w.lambda_d(99, 100) - 0.01).abs() < 1e-12);
        let bad = LossParts { depth: f64::NAN, ..parts };
        match total_loss(&bad, &w, 0, 100) {
            Err(Error::NonFinite { term }) => assert_eq!(term, "depth"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lambda_d_is_monotone() {
        let w = LossWeights::default();
        let mut prev = f64::INFINITY;
        for it in 0..50 {
            let v = w.lambda_d(it, 50);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn psnr_identities() {
        let a = Image::filled(4, 4, 3, 0.5);
        assert_eq!(psnr(&a, &a, None).unwrap(), 100.0);
        let b = Image::filled(4, 4, 3, 0.6);
        assert!((psnr(&a, &b, None).unwrap() - 20.0).abs() < 1e-9);
    }
}
