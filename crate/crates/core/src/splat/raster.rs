//! Tile-based front-to-back α-blending and its reverse pass.

use rayon::prelude::*;

use super::image::Image;
use super::project::{SplatGrad, Splat2D};
use crate::error::{Error, Result};

pub const ALPHA_CLAMP: f64 = 0.99;
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-4;
/// Contribution below which a splat is skipped, per pixel and per tile.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub tile: u32,
    /// Skip splat-tile pairs whose best-case α over the tile is below
    /// [`MIN_ALPHA`].
    pub culling: bool,
    /// Per-pixel α below which a splat is ignored. Zero makes the blend
    /// smooth in every parameter (used for gradient checks); binning then
    /// covers the whole image.
    pub min_alpha: f64,
    /// Blend with every opacity forced to 1 ("hard" depth).
    pub opaque: bool,
    /// Keep what [`render_backward`] needs.
    pub retain: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            tile: 16,
            culling: true,
            min_alpha: MIN_ALPHA,
            opaque: false,
            retain: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RenderStats {
    pub splats: usize,
    pub pairs_binned: usize,
    pub pairs_culled: usize,
}

impl RenderStats {
    pub fn culled_fraction(&self) -> f64 {
        if self.pairs_binned == 0 {
            0.0
        } else {
            self.pairs_culled as f64 / self.pairs_binned as f64
        }
    }
}

#[derive(Debug, Clone)]
struct Trace {
    sorted: Vec<Splat2D>,
    /// Index into the caller's splat slice for every sorted entry.
    order: Vec<usize>,
    tiles: Vec<Vec<u32>>,
    final_t: Vec<f64>,
    n_used: Vec<u32>,
    opts: RenderOptions,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    pub rgb: Image,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    pub stats: RenderStats,
    trace: Option<Trace>,
}

impl RenderOutput {
    pub fn has_trace(&self) -> bool {
        self.trace.is_some()
    }

    /// Depth normalized by accumulated α, or `None` where α is negligible.
    pub fn normalized_depth(&self, min_alpha: f64) -> Vec<Option<f64>> {
        self.depth
            .iter()
            .zip(&self.alpha)
            .map(|(d, a)| (*a > min_alpha).then(|| d / a))
            .collect()
    }
}

/// Upstream gradient of a scalar loss w.r.t. the render outputs. Missing
/// channels are treated as zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct RenderAdjoint<'a> {
    pub rgb: Option<&'a [f64]>,
    pub depth: Option<&'a [f64]>,
    pub alpha: Option<&'a [f64]>,
}

fn mahalanobis(conic: [f64; 3], dx: f64, dy: f64) -> f64 {
    conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy
}

/// Smallest Mahalanobis distance from the splat center to the rectangle.
fn min_mahalanobis(s: &Splat2D, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    let [cx, cy] = s.center;
    if (x0..=x1).contains(&cx) && (y0..=y1).contains(&cy) {
        return 0.0;
    }
    let [a, b, c] = s.conic;
    let mut best = f64::INFINITY;
    // horizontal edges: dy fixed, minimize over dx
    for y in [y0, y1] {
        let dy = y - cy;
        let dx = (-b * dy / a).clamp(x0 - cx, x1 - cx);
        best = best.min(mahalanobis(s.conic, dx, dy));
    }
    for x in [x0, x1] {
        let dx = x - cx;
        let dy = (-b * dx / c).clamp(y0 - cy, y1 - cy);
        best = best.min(mahalanobis(s.conic, dx, dy));
    }
    best
}

fn splat_opacity(s: &Splat2D, opaque: bool) -> f64 {
    if opaque {
        1.0
    } else {
        s.opacity
    }
}

pub fn render(splats: &[Splat2D], width: u32, height: u32, opts: &RenderOptions) -> Result<RenderOutput> {
    if width == 0 || height == 0 {
        return Err(Error::Argument(format!("cannot render a {width}x{height} image")));
    }
    if opts.tile == 0 {
        return Err(Error::Argument("tile size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&i, &j| {
        splats[i]
            .depth
            .total_cmp(&splats[j].depth)
            .then(splats[i].source.cmp(&splats[j].source))
    });
    let sorted: Vec<Splat2D> = order.iter().map(|&i| splats[i]).collect();

    let tile = opts.tile;
    let tiles_x = width.div_ceil(tile);
    let tiles_y = height.div_ceil(tile);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    let mut stats = RenderStats {
        splats: splats.len(),
        ..Default::default()
    };
    for (k, s) in sorted.iter().enumerate() {
        let o = splat_opacity(s, opts.opaque);
        let (tx0, tx1, ty0, ty1) = if opts.min_alpha > 0.0 {
            if o.min(ALPHA_CLAMP) < opts.min_alpha {
                continue;
            }
            let r = (2.0 * (o / opts.min_alpha).ln() * s.max_eigenvalue()).max(0.0).sqrt();
            let lo_x = ((s.center[0] - r) / tile as f64).floor().max(0.0) as i64;
            let hi_x = ((s.center[0] + r) / tile as f64).floor().min(tiles_x as f64 - 1.0) as i64;
            let lo_y = ((s.center[1] - r) / tile as f64).floor().max(0.0) as i64;
            let hi_y = ((s.center[1] + r) / tile as f64).floor().min(tiles_y as f64 - 1.0) as i64;
            (lo_x, hi_x, lo_y, hi_y)
        } else {
            (0, tiles_x as i64 - 1, 0, tiles_y as i64 - 1)
        };
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                stats.pairs_binned += 1;
                if opts.culling {
                    let px0 = (tx as u32 * tile) as f64 + 0.5;
                    let py0 = (ty as u32 * tile) as f64 + 0.5;
                    let px1 = (((tx as u32 + 1) * tile).min(width)) as f64 - 0.5;
                    let py1 = (((ty as u32 + 1) * tile).min(height)) as f64 - 0.5;
                    let q = min_mahalanobis(s, px0, px1, py0, py1);
                    if (o * (-0.5 * q).exp()).min(ALPHA_CLAMP) < MIN_ALPHA {
                        stats.pairs_culled += 1;
                        continue;
                    }
                }
                tiles[(ty as u32 * tiles_x + tx as u32) as usize].push(k as u32);
            }
        }
    }

    struct TileOut {
        rgb: Vec<f64>,
        depth: Vec<f64>,
        final_t: Vec<f64>,
        n_used: Vec<u32>,
    }
    let outs: Vec<TileOut> = (0..tiles.len())
        .into_par_iter()
        .map(|t| {
            let (tx, ty) = (t as u32 % tiles_x, t as u32 / tiles_x);
            let (x0, y0) = (tx * tile, ty * tile);
            let (x1, y1) = ((x0 + tile).min(width), (y0 + tile).min(height));
            let n = ((x1 - x0) * (y1 - y0)) as usize;
            let mut out = TileOut {
                rgb: vec![0.0; 3 * n],
                depth: vec![0.0; n],
                final_t: vec![1.0; n],
                n_used: vec![0; n],
            };
            let list = &tiles[t];
            let mut p = 0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut tr = 1.0;
                    let mut used = 0;
                    for (pos, &k) in list.iter().enumerate() {
                        let s = &sorted[k as usize];
                        let q = mahalanobis(s.conic, px - s.center[0], py - s.center[1]);
                        let alpha = (splat_opacity(s, opts.opaque) * (-0.5 * q).exp()).min(ALPHA_CLAMP);
                        if alpha < opts.min_alpha || alpha <= 0.0 {
                            continue;
                        }
                        let w = alpha * tr;
                        for c in 0..3 {
                            out.rgb[3 * p + c] += s.color[c] * w;
                        }
                        out.depth[p] += s.depth * w;
                        tr *= 1.0 - alpha;
                        used = pos as u32 + 1;
                        if tr < TRANSMITTANCE_CUTOFF {
                            break;
                        }
                    }
                    out.final_t[p] = tr;
                    out.n_used[p] = used;
                    p += 1;
                }
            }
            out
        })
        .collect();

    let npx = (width * height) as usize;
    let mut rgb = Image::zeros(width, height, 3);
    let mut depth = vec![0.0; npx];
    let mut alpha = vec![0.0; npx];
    let mut final_t = vec![1.0; npx];
    let mut n_used = vec![0u32; npx];
    for (t, out) in outs.into_iter().enumerate() {
        let (tx, ty) = (t as u32 % tiles_x, t as u32 / tiles_x);
        let (x0, y0) = (tx * tile, ty * tile);
        let (x1, y1) = ((x0 + tile).min(width), (y0 + tile).min(height));
        let mut p = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let i = (y * width + x) as usize;
                rgb.data[3 * i..3 * i + 3].copy_from_slice(&out.rgb[3 * p..3 * p + 3]);
                depth[i] = out.depth[p];
                alpha[i] = 1.0 - out.final_t[p];
                final_t[i] = out.final_t[p];
                n_used[i] = out.n_used[p];
                p += 1;
            }
        }
    }
    let trace = opts.retain.then(|| Trace {
        sorted,
        order,
        tiles,
        final_t,
        n_used,
        opts: *opts,
    });
    Ok(RenderOutput {
        width,
        height,
        rgb,
        depth,
        alpha,
        stats,
        trace,
    })
}

/// Gradients w.r.t. every splat passed to [`render`], in the same order.
pub fn render_backward(out: &RenderOutput, adj: &RenderAdjoint) -> Result<Vec<SplatGrad>> {
    let trace = out
        .trace
        .as_ref()
        .ok_or_else(|| Error::State("render_backward needs a forward pass rendered with retain = true".into()))?;
    let npx = (out.width * out.height) as usize;
    for (name, buf, len) in [
        ("rgb", adj.rgb, 3 * npx),
        ("depth", adj.depth, npx),
        ("alpha", adj.alpha, npx),
    ] {
        if let Some(b) = buf {
            if b.len() != len {
                return Err(Error::Argument(format!("{name} adjoint has {} values, expected {len}", b.len())));
            }
        }
    }
    let opts = trace.opts;
    let (width, height, tile) = (out.width, out.height, opts.tile);
    let tiles_x = width.div_ceil(tile);
    let sorted = &trace.sorted;

    let partials: Vec<Vec<(u32, SplatGrad)>> = (0..trace.tiles.len())
        .into_par_iter()
        .map(|t| {
            let list = &trace.tiles[t];
            let mut local = vec![SplatGrad::default(); list.len()];
            let mut touched = vec![false; list.len()];
            let (tx, ty) = (t as u32 % tiles_x, t as u32 / tiles_x);
            let (x0, y0) = (tx * tile, ty * tile);
            let (x1, y1) = ((x0 + tile).min(width), (y0 + tile).min(height));
            for y in y0..y1 {
                for x in x0..x1 {
                    let i = (y * width + x) as usize;
                    let g_rgb = adj.rgb.map_or([0.0; 3], |b| [b[3 * i], b[3 * i + 1], b[3 * i + 2]]);
                    let g_d = adj.depth.map_or(0.0, |b| b[i]);
                    let g_a = adj.alpha.map_or(0.0, |b| b[i]);
                    if g_rgb == [0.0; 3] && g_d == 0.0 && g_a == 0.0 {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let t_final = trace.final_t[i];
                    let mut tr = t_final;
                    let mut behind_c = [0.0; 3];
                    let mut behind_d = 0.0;
                    for pos in (0..trace.n_used[i] as usize).rev() {
                        let s = &sorted[list[pos] as usize];
                        let (dx, dy) = (px - s.center[0], py - s.center[1]);
                        let q = mahalanobis(s.conic, dx, dy);
                        let gauss = (-0.5 * q).exp();
                        let o = splat_opacity(s, opts.opaque);
                        let raw = o * gauss;
                        let alpha = raw.min(ALPHA_CLAMP);
                        if alpha < opts.min_alpha || alpha <= 0.0 {
                            continue;
                        }
                        tr /= 1.0 - alpha;
                        let w = alpha * tr;
                        let g = &mut local[pos];
                        touched[pos] = true;
                        let mut g_alpha = 0.0;
                        for c in 0..3 {
                            g.color[c] += g_rgb[c] * w;
                            g_alpha += g_rgb[c] * (s.color[c] * tr - behind_c[c] / (1.0 - alpha));
                            behind_c[c] += s.color[c] * w;
                        }
                        g.depth += g_d * w;
                        g_alpha += g_d * (s.depth * tr - behind_d / (1.0 - alpha));
                        behind_d += s.depth * w;
                        g_alpha += g_a * t_final / (1.0 - alpha);
                        if raw >= ALPHA_CLAMP {
                            continue;
                        }
                        if !opts.opaque {
                            g.opacity += g_alpha * gauss;
                        }
                        let g_q = -0.5 * g_alpha * o * gauss;
                        g.conic[0] += g_q * dx * dx;
                        g.conic[1] += g_q * 2.0 * dx * dy;
                        g.conic[2] += g_q * dy * dy;
                        let [a, b, c] = s.conic;
                        let gcx = -g_q * 2.0 * (a * dx + b * dy);
                        let gcy = -g_q * 2.0 * (b * dx + c * dy);
                        g.center[0] += gcx;
                        g.center[1] += gcy;
                        g.center_abs[0] += gcx.abs();
                        g.center_abs[1] += gcy.abs();
                    }
                }
            }
            list.iter()
                .zip(local)
                .zip(touched)
                .filter(|(_, t)| *t)
                .map(|((&k, g), _)| (k, g))
                .collect()
        })
        .collect();

    let mut grads = vec![SplatGrad::default(); trace.order.len()];
    for part in partials {
        for (k, g) in part {
            grads[trace.order[k as usize]].add(&g);
        }
    }
    Ok(grads)
}
