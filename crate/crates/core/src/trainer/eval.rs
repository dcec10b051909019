//! Held-out evaluation of a trained level-of-detail model.

use serde::{Deserialize, Serialize};

use super::step::View;
use crate::appearance::{half_embedding_eval, FitOptions, Segment};
use crate::error::{Error, Result};
use crate::lod::LodModel;
use crate::losses::{l1_with_grad, psnr, ssim};
use crate::splat::{project_gaussians_with, render, Camera, Image, ProjectOptions, RenderOptions, RenderStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Whole image, decoded with the view's own embedding when the model has
    /// one for it and with the mean training embedding otherwise.
    Direct,
    /// Fit a fresh embedding on one half and score the other, both ways.
    HalfEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub protocol: Protocol,
    /// Distance-based level selection with frustum culling; otherwise the
    /// top level of every partition.
    pub lod: bool,
    pub project: ProjectOptions,
    pub render: RenderOptions,
    /// Used by [`Protocol::HalfEmbedding`].
    pub fit: FitOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            protocol: Protocol::Direct,
            lod: true,
            project: ProjectOptions::default(),
            render: RenderOptions::default(),
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub image_id: u32,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    /// Gaussians drawn after level selection, culling and cropping.
    pub gaussians: usize,
    pub partitions_drawn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub protocol: Protocol,
    pub lod: bool,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    pub mean_gaussians: f64,
    pub views: Vec<ViewMetrics>,
}

/// Renders the model from `cam`, decoding appearance for `image` (see
/// [`LodModel::gather`]).
pub fn render_model(
    model: &LodModel,
    cam: &Camera,
    image: Option<u32>,
    lod: bool,
    project: ProjectOptions,
    render_opts: &RenderOptions,
) -> Result<(Image, RenderStats, usize)> {
    let sel = if lod {
        model.select_levels(cam)
    } else {
        model.select_all_top()
    };
    let g = model.gather(&sel, image)?;
    let splats = project_gaussians_with(&g.set, &g.colors, &g.opacities, cam, project);
    let opts = RenderOptions {
        retain: false,
        opaque: false,
        ..*render_opts
    };
    let out = render(&splats, cam.width(), cam.height(), &opts)?;
    Ok((out.rgb, out.stats, g.set.len()))
}

/// Scores every view and averages.
pub fn evaluate(model: &LodModel, views: &[View], opts: &EvalOptions) -> Result<Metrics> {
    if views.is_empty() {
        return Err(Error::Argument("no test views to evaluate".into()));
    }
    let mut per = Vec::with_capacity(views.len());
    for v in views {
        let sel = if opts.lod {
            model.select_levels(&v.camera)
        } else {
            model.select_all_top()
        };
        let m = match opts.protocol {
            Protocol::Direct => {
                let (pred, _, n) = render_model(model, &v.camera, Some(v.image_id), opts.lod, opts.project, &opts.render)?;
                let mask = v.mask.as_deref();
                ViewMetrics {
                    image_id: v.image_id,
                    psnr: psnr(&pred, &v.target, mask)?,
                    ssim: ssim(&pred, &v.target, mask),
                    l1: l1_with_grad(&pred, &v.target, mask)?.0,
                    gaussians: n,
                    partitions_drawn: sel.iter().filter(|s| s.level.is_some()).count(),
                }
            }
            Protocol::HalfEmbedding => {
                let cropped = model.segments(&sel)?;
                let segments: Vec<Segment> = cropped
                    .iter()
                    .map(|c| Segment {
                        set: &c.set,
                        model: c.appearance,
                    })
                    .collect();
                let fit = FitOptions {
                    project: opts.project,
                    render: opts.render,
                    ..opts.fit
                };
                let h = half_embedding_eval(&segments, &v.camera, &v.target, &fit)?;
                ViewMetrics {
                    image_id: v.image_id,
                    psnr: h.psnr,
                    ssim: h.ssim,
                    l1: h.l1,
                    gaussians: cropped.iter().map(|c| c.set.len()).sum(),
                    partitions_drawn: cropped.len(),
                }
            }
        };
        per.push(m);
    }
    let n = per.len() as f64;
    Ok(Metrics {
        protocol: opts.protocol,
        lod: opts.lod,
        psnr: per.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: per.iter().map(|m| m.ssim).sum::<f64>() / n,
        l1: per.iter().map(|m| m.l1).sum::<f64>() / n,
        mean_gaussians: per.iter().map(|m| m.gaussians as f64).sum::<f64>() / n,
        views: per,
    })
}
