//! Slow, direct reference implementations.
#![allow(dead_code)]

use usk::splat::Image;

/// SSIM by evaluating the 11×11 Gaussian window at every pixel, with
/// out-of-image samples treated as zero.
pub fn ssim_direct(x: &Image, y: &Image) -> f64 {
    const R: i64 = 5;
    let sigma = 1.5f64;
    let mut w = [[0.0; 11]; 11];
    let mut sum = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            sum += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (wd, ht, ch) = (x.width as i64, x.height as i64, x.channels);
    let mut total = 0.0;
    for c in 0..ch {
        for py in 0..ht {
            for px in 0..wd {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -R..=R {
                    for dx in -R..=R {
                        let (qx, qy) = (px + dx, py + dy);
                        if qx < 0 || qy < 0 || qx >= wd || qy >= ht {
                            continue;
                        }
                        let k = ((qy * wd + qx) as usize) * ch + c;
                        let wt = w[(dy + R) as usize][(dx + R) as usize] / sum;
                        let (a, b) = (x.data[k], y.data[k]);
                        mx += wt * a;
                        my += wt * b;
                        sxx += wt * a * a;
                        syy += wt * b * b;
                        sxy += wt * a * b;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                total += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    total / (wd * ht) as f64 / ch as f64
}

/// Hull area from every directed pair that has all other points strictly to
/// its left; assumes no three points are collinear.
pub fn hull_area_cubic(pts: &[[f64; 2]]) -> f64 {
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut twice = 0.0;
    for (i, &a) in pts.iter().enumerate() {
        for (j, &b) in pts.iter().enumerate() {
            if i == j {
                continue;
            }
            let edge = pts
                .iter()
                .enumerate()
                .all(|(k, &p)| k == i || k == j || cross(a, b, p) > 0.0);
            if edge {
                twice += a[0] * b[1] - a[1] * b[0];
            }
        }
    }
    0.5 * twice
}

/// `(a, b)` minimizing `Σ (a·p + b − t)²` from the 2×2 normal equations by
/// Cramer's rule.
pub fn least_squares_affine(pairs: &[(f64, f64)]) -> (f64, f64) {
    let n = pairs.len() as f64;
    let sp: f64 = pairs.iter().map(|p| p.0).sum();
    let st: f64 = pairs.iter().map(|p| p.1).sum();
    let spp: f64 = pairs.iter().map(|p| p.0 * p.0).sum();
    let spt: f64 = pairs.iter().map(|p| p.0 * p.1).sum();
    let det = spp * n - sp * sp;
    ((spt * n - sp * st) / det, (spp * st - sp * spt) / det)
}
