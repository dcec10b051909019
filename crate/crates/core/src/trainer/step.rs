//! Full training objective for one view and its gradient with respect to
//! every trainable parameter.

use serde::{Deserialize, Serialize};

use crate::appearance::{similarity_reg_at, AppearanceModel};
use crate::error::{Error, Result};
use crate::losses::{
    base_loss, depth_loss, opacity_offset_reg, scale_reg, total_loss, LossParts, LossReport, LossWeights,
    ScaleRegConfig,
};
use crate::sfm::DepthMap;
use crate::splat::{
    project_backward, project_gaussians_with, render, render_backward, Camera, GaussianSet, Image, ProjectOptions,
    RenderAdjoint, RenderOptions, RenderOutput,
};

/// Rendered depth is divided by accumulated α where α exceeds this.
pub const DEPTH_MIN_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthMode {
    /// Expected depth under the learned opacities.
    Soft,
    /// Opacities forced to 1, no opacity gradient.
    Hard,
}

impl DepthMode {
    /// Strict alternation starting with soft.
    pub fn for_iteration(iter: usize) -> Self {
        if iter % 2 == 0 {
            DepthMode::Soft
        } else {
            DepthMode::Hard
        }
    }
}

/// One training view at the resolution it is rendered at.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image_id: u32,
    pub camera: Camera,
    pub target: Image,
    /// `true` keeps a pixel; transient pixels are `false`.
    pub mask: Option<Vec<bool>>,
    pub depth: Option<DepthMap>,
}

impl View {
    /// Resamples image, mask and depth to `factor` of the full size.
    pub fn scaled(&self, factor: f64) -> View {
        if factor == 1.0 {
            return self.clone();
        }
        let camera = self.camera.scaled(factor);
        let (w, h) = (camera.width(), camera.height());
        View {
            image_id: self.image_id,
            target: self.target.resized(w, h),
            mask: self
                .mask
                .as_ref()
                .map(|m| Image::resized_mask(m, self.target.width, self.target.height, w, h)),
            depth: self.depth.as_ref().map(|d| d.resized(w, h)),
            camera,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub scale: ScaleRegConfig,
    pub project: ProjectOptions,
    pub render: RenderOptions,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext<'a> {
    pub iter: usize,
    pub total_iters: usize,
    pub depth_mode: DepthMode,
    /// Anchors and `(k, λ_w)` for the similarity term when it is active.
    pub similarity: Option<(&'a [usize], usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrads {
    pub mu: Vec<[f64; 3]>,
    pub rot: Vec<[f64; 4]>,
    pub log_scale: Vec<[f64; 3]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub embedding: Vec<f64>,
    /// For the view's image only.
    pub image_embedding: Vec<f64>,
    pub mlp: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub report: LossReport,
    pub grads: SceneGrads,
    pub visible: Vec<bool>,
    /// Screen-space gradient norm per Gaussian in normalized device units.
    pub view_grad: Vec<f64>,
    /// Same from absolute per-pixel contributions.
    pub view_grad_abs: Vec<f64>,
    pub depth_missing: bool,
}

fn flat<const N: usize>(v: &[[f64; N]]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

/// Renders `view`, evaluates every loss term and back-propagates.
pub fn loss_and_grad(
    set: &GaussianSet,
    appearance: Option<&AppearanceModel>,
    view: &View,
    obj: &Objective,
    ctx: &StepContext,
) -> Result<StepResult> {
    let n = set.len();
    let cam = &view.camera;
    let (w, h) = (cam.width(), cam.height());
    if view.target.width != w || view.target.height != h {
        return Err(Error::Argument(format!(
            "view {} target is {}x{}, camera renders {w}x{h}",
            view.image_id, view.target.width, view.target.height
        )));
    }
    let tr = appearance.map(|a| a.transform(set, view.image_id)).transpose()?;
    let (colors, opacities) = match &tr {
        Some(t) => (t.colors.clone(), t.opacities.clone()),
        None => (set.color.clone(), set.opacities()),
    };
    let splats = project_gaussians_with(set, &colors, &opacities, cam, obj.project);
    let opts = RenderOptions {
        retain: true,
        opaque: false,
        ..obj.render
    };
    let out = render(&splats, w, h, &opts)?;
    let mask = view.mask.as_deref();
    let base = base_loss(&out.rgb, &view.target, mask, obj.weights.lambda_dssim)?;
    let mut parts = LossParts {
        l1: base.l1,
        dssim: base.dssim,
        ..Default::default()
    };
    let lambda_d = obj.weights.lambda_d(ctx.iter, ctx.total_iters);

    let mut depth_missing = false;
    let g_splats = {
        let mut depth_adj = None;
        let mut alpha_adj = None;
        let mut hard: Option<(RenderOutput, Vec<f64>, Vec<f64>)> = None;
        if let Some(target) = &view.depth {
            let (d_out, use_hard) = match ctx.depth_mode {
                DepthMode::Soft => (None, false),
                DepthMode::Hard => (
                    Some(render(
                        &splats,
                        w,
                        h,
                        &RenderOptions {
                            opaque: true,
                            ..opts
                        },
                    )?),
                    true,
                ),
            };
            let src = d_out.as_ref().unwrap_or(&out);
            let usable: Vec<bool> = src
                .alpha
                .iter()
                .enumerate()
                .map(|(i, a)| *a > DEPTH_MIN_ALPHA && mask.is_none_or(|m| m[i]))
                .collect();
            let normalized: Vec<f64> = src
                .depth
                .iter()
                .zip(&src.alpha)
                .map(|(d, a)| if *a > DEPTH_MIN_ALPHA { d / a } else { 0.0 })
                .collect();
            let dl = depth_loss(&normalized, target, Some(&usable))?;
            parts.depth = dl.value;
            depth_missing = dl.no_valid_pixels;
            let mut gd = vec![0.0; normalized.len()];
            let mut ga = vec![0.0; normalized.len()];
            for i in 0..gd.len() {
                if dl.grad[i] != 0.0 {
                    let a = src.alpha[i];
                    gd[i] = lambda_d * dl.grad[i] / a;
                    ga[i] = -lambda_d * dl.grad[i] * src.depth[i] / (a * a);
                }
            }
            if use_hard {
                hard = Some((d_out.expect("hard render"), gd, ga));
            } else {
                depth_adj = Some(gd);
                alpha_adj = Some(ga);
            }
        }
        let mut g = render_backward(
            &out,
            &RenderAdjoint {
                rgb: Some(&base.grad),
                depth: depth_adj.as_deref(),
                alpha: alpha_adj.as_deref(),
            },
        )?;
        if let Some((hout, gd, ga)) = &hard {
            let gh = render_backward(
                hout,
                &RenderAdjoint {
                    rgb: None,
                    depth: Some(gd),
                    alpha: Some(ga),
                },
            )?;
            for (a, b) in g.iter_mut().zip(&gh) {
                a.add(b);
            }
        }
        g
    };
    let pg = project_backward(set, &opacities, cam, obj.project, &splats, &g_splats);

    let mut grads = SceneGrads {
        mu: pg.mu,
        rot: pg.rot,
        log_scale: pg.log_scale,
        opacity_logit: vec![0.0; n],
        color: vec![[0.0; 3]; n],
        embedding: vec![0.0; set.embedding.len()],
        image_embedding: Vec::new(),
        mlp: Vec::new(),
    };
    let g_opacity: Vec<f64> = match (appearance, &tr) {
        (Some(app), Some(t)) => {
            let (dov, dog) = opacity_offset_reg(&t.delta_o);
            parts.delta_o = dov;
            let ag = app.backward(set, t, &pg.color, &pg.opacity, obj.weights.lambda_delta_o * dog);
            grads.color = ag.color;
            grads.embedding = ag.gaussian_embedding;
            grads.image_embedding = ag.image_embedding;
            grads.mlp = ag.mlp;
            ag.opacity
        }
        _ => {
            grads.color = pg.color;
            pg.opacity
        }
    };
    for i in 0..n {
        let o = set.opacity(i);
        grads.opacity_logit[i] = g_opacity[i] * o * (1.0 - o);
    }

    let sr = scale_reg(set, &obj.scale);
    parts.max_scale = sr.max_scale;
    parts.ratio = sr.ratio;
    for i in 0..n {
        for k in 0..3 {
            grads.log_scale[i][k] += obj.weights.lambda_s * (sr.grad_max_scale[i][k] + sr.grad_ratio[i][k]);
        }
    }

    if let (Some((anchors, k, lambda_w)), Some(_)) = (ctx.similarity, appearance) {
        let sim = similarity_reg_at(set, anchors, k, lambda_w)?;
        parts.sim = sim.value;
        for (g, s) in grads.embedding.iter_mut().zip(&sim.grad) {
            *g += obj.weights.lambda_sim * s;
        }
        for (g, s) in grads.mu.iter_mut().zip(&sim.grad_mu) {
            for c in 0..3 {
                g[c] += obj.weights.lambda_sim * s[c];
            }
        }
    }

    let report = total_loss(&parts, &obj.weights, ctx.iter, ctx.total_iters)?;
    for (name, v) in [
        ("mu", flat(&grads.mu)),
        ("rotation", flat(&grads.rot)),
        ("scale", flat(&grads.log_scale)),
        ("color", flat(&grads.color)),
    ] {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("{name} gradient"),
            });
        }
    }

    // pixel -> NDC: dL/dndc = dL/dpx · size/2
    let (hw, hh) = (0.5 * w as f64, 0.5 * h as f64);
    let view_grad = pg.center.iter().map(|c| (c[0] * hw).hypot(c[1] * hh)).collect();
    let view_grad_abs = pg.center_abs.iter().map(|c| (c[0] * hw).hypot(c[1] * hh)).collect();
    Ok(StepResult {
        report,
        grads,
        visible: pg.visible,
        view_grad,
        view_grad_abs,
        depth_missing,
    })
}

/// Total loss only, for finite-difference checks.
pub fn loss_value(
    set: &GaussianSet,
    appearance: Option<&AppearanceModel>,
    view: &View,
    obj: &Objective,
    ctx: &StepContext,
) -> Result<f64> {
    Ok(loss_and_grad(set, appearance, view, obj, ctx)?.report.total)
}
