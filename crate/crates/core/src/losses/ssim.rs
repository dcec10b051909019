//! Gaussian-window SSIM with an analytic gradient.

use crate::splat::Image;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_taps() -> [f64; WINDOW] {
    let half = (WINDOW / 2) as f64;
    let mut taps = [0.0; WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.map(|t| t / sum)
}

/// Zero-padded "same" convolution of a single-channel plane.
fn blur(plane: &[f64], w: usize, h: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let r = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += t * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += t * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn channel(img: &Image, c: usize, mask: Option<&[bool]>) -> Vec<f64> {
    (0..img.pixel_count())
        .map(|i| {
            if mask.is_some_and(|m| !m[i]) {
                0.0
            } else {
                img.data[i * img.channels + c]
            }
        })
        .collect()
}

/// Mean SSIM over unmasked pixels and all channels, plus its gradient with
/// respect to `pred` when `want_grad`. Masked pixels are zeroed in both
/// images before filtering.
pub fn ssim_with_grad(pred: &Image, target: &Image, mask: Option<&[bool]>, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let (w, h, ch) = (pred.width as usize, pred.height as usize, pred.channels);
    let taps = gaussian_taps();
    let kept = mask.map_or(w * h, |m| m.iter().filter(|v| **v).count());
    if kept == 0 {
        return (1.0, want_grad.then(|| vec![0.0; pred.data.len()]));
    }
    let norm = 1.0 / (kept * ch) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; pred.data.len()]);
    for c in 0..ch {
        let x = channel(pred, c, mask);
        let y = channel(target, c, mask);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = blur(&x, w, h, &taps);
        let my = blur(&y, w, h, &taps);
        let sxx = blur(&xx, w, h, &taps);
        let syy = blur(&yy, w, h, &taps);
        let sxy = blur(&xy, w, h, &taps);
        let mut da = vec![0.0; w * h];
        let mut db = vec![0.0; w * h];
        let mut dc = vec![0.0; w * h];
        for p in 0..w * h {
            let vx = sxx[p] - mx[p] * mx[p];
            let vy = syy[p] - my[p] * my[p];
            let cxy = sxy[p] - mx[p] * my[p];
            let n1 = 2.0 * mx[p] * my[p] + C1;
            let n2 = 2.0 * cxy + C2;
            let d1 = mx[p] * mx[p] + my[p] * my[p] + C1;
            let d2 = vx + vy + C2;
            let s = n1 * n2 / (d1 * d2);
            let wp = if mask.is_some_and(|m| !m[p]) { 0.0 } else { norm };
            if wp != 0.0 {
                total += s;
            }
            if want_grad {
                da[p] = wp * s * (2.0 * my[p] / n1 - 2.0 * mx[p] / d1);
                db[p] = -wp * s / d2;
                dc[p] = wp * 2.0 * s / n2;
            }
        }
        if let Some(g) = grad.as_mut() {
            // the window is symmetric, so the adjoint of the blur is the blur
            let ga = blur(&da, w, h, &taps);
            let gb = blur(&db, w, h, &taps);
            let bm: Vec<f64> = db.iter().zip(&mx).map(|(b, m)| b * m).collect();
            let gbm = blur(&bm, w, h, &taps);
            let gc = blur(&dc, w, h, &taps);
            let cm: Vec<f64> = dc.iter().zip(&my).map(|(c, m)| c * m).collect();
            let gcm = blur(&cm, w, h, &taps);
            for p in 0..w * h {
                if mask.is_some_and(|m| !m[p]) {
                    continue;
                }
                let v = ga[p] + 2.0 * x[p] * gb[p] - 2.0 * gbm[p] + y[p] * gc[p] - gcm[p];
                g[p * ch + c] = v;
            }
        }
    }
    (total / (kept * ch) as f64, grad)
}

pub fn ssim(pred: &Image, target: &Image, mask: Option<&[bool]>) -> f64 {
    ssim_with_grad(pred, target, mask, false).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Image {
        let mut img = Image::zeros(w, h, 3);
        img.data.iter_mut().for_each(|v| *v = rng.gen());
        img
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let t = gaussian_taps();
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..WINDOW {
            assert_eq!(t[i], t[WINDOW - 1 - i]);
        }
    }

    #[test]
    fn identical_images_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 12, 9);
        assert!((ssim(&a, &a, None) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_image(&mut rng, 9, 7);
        let b = random_image(&mut rng, 9, 7);
        let mask: Vec<bool> = (0..63).map(|i| i % 5 != 0).collect();
        for m in [None, Some(mask.as_slice())] {
            let (_, g) = ssim_with_grad(&a, &b, m, true);
            let g = g.unwrap();
            for i in (0..a.data.len()).step_by(7) {
                let h = 1e-5;
                let mut p = a.clone();
                p.data[i] += h;
                let mut q = a.clone();
                q.data[i] -= h;
                let fd = (ssim(&p, &b, m) - ssim(&q, &b, m)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
            }
        }
    }
}
