//! Test-time image embedding fitting on one half of an image, evaluated on
//! the other half.

use serde::{Deserialize, Serialize};

use super::{AppearanceModel, Transformed};
use crate::error::{Error, Result};
use crate::losses::{base_loss, l1_with_grad, psnr, ssim};
use crate::optim::{exp_decay, Adam};
use crate::splat::{
    project_backward, project_gaussians_with, render, render_backward, Camera, GaussianSet, Image, ProjectOptions,
    RenderAdjoint, RenderOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HalfRegion {
    Left,
    Right,
}

impl HalfRegion {
    pub fn other(self) -> Self {
        match self {
            HalfRegion::Left => HalfRegion::Right,
            HalfRegion::Right => HalfRegion::Left,
        }
    }
}

/// Pixel mask selecting columns `x < width/2` (left) or the rest (right).
pub fn half_mask(width: u32, height: u32, region: HalfRegion) -> Vec<bool> {
    let split = width / 2;
    (0..height)
        .flat_map(|_| (0..width).map(move |x| (x < split) == (region == HalfRegion::Left)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub iterations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lambda_dssim: f64,
    pub project: ProjectOptions,
    pub render: RenderOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            iterations: 100,
            lr_start: 0.01,
            lr_end: 0.00025,
            lambda_dssim: 0.2,
            project: ProjectOptions::default(),
            render: RenderOptions::default(),
        }
    }
}

/// A group of Gaussians rendered together with others, optionally decoded by
/// its own appearance model.
#[derive(Debug, Clone, Copy)]
pub struct Segment<'a> {
    pub set: &'a GaussianSet,
    pub model: Option<&'a AppearanceModel>,
}

struct Combined {
    set: GaussianSet,
    colors: Vec<[f64; 3]>,
    opacities: Vec<f64>,
    transforms: Vec<Option<Transformed>>,
}

fn combine(segments: &[Segment], embeddings: &[Option<Vec<f64>>]) -> Combined {
    let mut c = Combined {
        set: GaussianSet::new(0),
        colors: Vec::new(),
        opacities: Vec::new(),
        transforms: Vec::new(),
    };
    for (seg, emb) in segments.iter().zip(embeddings) {
        for i in 0..seg.set.len() {
            let mut g = seg.set.get(i);
            g.embedding.clear();
            c.set.push(g);
        }
        match (seg.model, emb) {
            (Some(m), Some(e)) => {
                let tr = m.transform_with(seg.set, e);
                c.colors.extend_from_slice(&tr.colors);
                c.opacities.extend_from_slice(&tr.opacities);
                c.transforms.push(Some(tr));
            }
            _ => {
                c.colors.extend_from_slice(&seg.set.color);
                c.opacities.extend(seg.set.opacities());
                c.transforms.push(None);
            }
        }
    }
    c
}

/// Renders the segments, decoding each with its embedding where given.
pub fn render_segments(
    segments: &[Segment],
    embeddings: &[Option<Vec<f64>>],
    cam: &Camera,
    opts: &FitOptions,
) -> Result<Image> {
    let c = combine(segments, embeddings);
    let splats = project_gaussians_with(&c.set, &c.colors, &c.opacities, cam, opts.project);
    Ok(render(&splats, cam.width(), cam.height(), &opts.render)?.rgb)
}

/// Renders one set as seen with `embedding`.
pub fn render_with_embedding(
    set: &GaussianSet,
    model: &AppearanceModel,
    cam: &Camera,
    embedding: &[f64],
    opts: &FitOptions,
) -> Result<Image> {
    render_segments(
        &[Segment { set, model: Some(model) }],
        &[Some(embedding.to_vec())],
        cam,
        opts,
    )
}

/// Optimizes a fresh (zero) image embedding per segment that has an
/// appearance model, against `target` restricted to `region`. Scene and MLPs
/// stay untouched.
pub fn fit_test_embeddings(
    segments: &[Segment],
    cam: &Camera,
    target: &Image,
    region: HalfRegion,
    opts: &FitOptions,
) -> Result<Vec<Option<Vec<f64>>>> {
    if target.width != cam.width() || target.height != cam.height() {
        return Err(Error::Argument(format!(
            "target is {}x{} but the camera renders {}x{}",
            target.width,
            target.height,
            cam.width(),
            cam.height()
        )));
    }
    let mask = half_mask(target.width, target.height, region);
    let mut embeddings: Vec<Option<Vec<f64>>> =
        segments.iter().map(|s| s.model.map(|m| vec![0.0; m.image_dim])).collect();
    let mut adams: Vec<Option<Adam>> = embeddings.iter().map(|e| e.as_ref().map(|e| Adam::new(e.len()))).collect();
    let render_opts = RenderOptions {
        retain: true,
        ..opts.render
    };
    for it in 0..opts.iterations {
        let c = combine(segments, &embeddings);
        let splats = project_gaussians_with(&c.set, &c.colors, &c.opacities, cam, opts.project);
        let out = render(&splats, cam.width(), cam.height(), &render_opts)?;
        let loss = base_loss(&out.rgb, target, Some(&mask), opts.lambda_dssim)?;
        let g_splats = render_backward(
            &out,
            &RenderAdjoint {
                rgb: Some(&loss.grad),
                ..Default::default()
            },
        )?;
        let g = project_backward(&c.set, &c.opacities, cam, opts.project, &splats, &g_splats);
        let lr = exp_decay(opts.lr_start, opts.lr_end, it, opts.iterations);
        let mut start = 0;
        for (k, seg) in segments.iter().enumerate() {
            let end = start + seg.set.len();
            if let (Some(m), Some(tr), Some(e), Some(adam)) =
                (seg.model, &c.transforms[k], &mut embeddings[k], &mut adams[k])
            {
                let ga = m.backward(seg.set, tr, &g.color[start..end], &g.opacity[start..end], 0.0);
                adam.step(e, &ga.image_embedding, lr);
            }
            start = end;
        }
    }
    Ok(embeddings)
}

/// Single-set form of [`fit_test_embeddings`].
pub fn fit_test_embedding(
    set: &GaussianSet,
    model: &AppearanceModel,
    cam: &Camera,
    target: &Image,
    region: HalfRegion,
    opts: &FitOptions,
) -> Result<Vec<f64>> {
    let mut e = fit_test_embeddings(&[Segment { set, model: Some(model) }], cam, target, region, opts)?;
    Ok(e.remove(0).expect("segment has a model"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfEval {
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

/// Fit on the left half and score the right, then the reverse, and average.
pub fn half_embedding_eval(segments: &[Segment], cam: &Camera, target: &Image, opts: &FitOptions) -> Result<HalfEval> {
    let mut acc = HalfEval {
        psnr: 0.0,
        ssim: 0.0,
        l1: 0.0,
    };
    for fit_on in [HalfRegion::Left, HalfRegion::Right] {
        let embeddings = fit_test_embeddings(segments, cam, target, fit_on, opts)?;
        let pred = render_segments(segments, &embeddings, cam, opts)?;
        let eval_mask = half_mask(target.width, target.height, fit_on.other());
        acc.psnr += 0.5 * psnr(&pred, target, Some(&eval_mask))?;
        acc.ssim += 0.5 * ssim(&pred, target, Some(&eval_mask));
        acc.l1 += 0.5 * l1_with_grad(&pred, target, Some(&eval_mask))?.0;
    }
    Ok(acc)
}
