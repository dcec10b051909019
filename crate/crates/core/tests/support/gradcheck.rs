//! Central finite differences of the full training objective on tiny random
//! scenes, compared against the analytic gradient.
#![allow(dead_code)]

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usk::appearance::AppearanceModel;
use usk::losses::{LossWeights, ScaleRegConfig};
use usk::sfm::{CameraIntrinsics, DepthMap, Pose};
use usk::splat::{logit, ALPHA_CLAMP, project_gaussians_with, render, Camera, Gaussian, GaussianSet, Image, ProjectOptions, RenderOptions};
use usk::trainer::{loss_and_grad, DepthMode, Objective, SceneGrads, StepContext, View};

pub const H: f64 = 1e-4;
/// Relative errors use `max(|analytic|, |numeric|, FLOOR)` as denominator.
pub const FLOOR: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
pub const SIZE: u32 = 32;
const EMBED: usize = 8;
const MLP_SAMPLES: usize = 40;
const COVERED: f64 = 0.2;

/// Every splat contributes everywhere, so the blend is smooth.
fn render_options() -> RenderOptions {
    RenderOptions {
        min_alpha: 0.0,
        culling: false,
        ..Default::default()
    }
}

pub struct TinyScene {
    pub set: GaussianSet,
    pub app: AppearanceModel,
    pub view: View,
    pub depth: DepthMap,
    pub anchors: Vec<usize>,
    pub mlp_coords: Vec<usize>,
}

/// Distances every draw keeps from the kinks of the objective, each several
/// times what a probe of size `H` can move the quantity involved.
const DEPTH_GAP: f64 = 1e-3;
const RELU_MARGIN: f64 = 5e-4;
const CLAMP_MARGIN: f64 = 0.01;
/// Hard depth forces opacity to one, so α meets its clamp near every center.
const ALPHA_MARGIN: f64 = 5e-4;
/// In log-scale units.
const SCALE_MARGIN: f64 = 1e-3;
const S_MAX: f64 = 0.12;
const R_MAX: f64 = 1.5;

/// 4 to 12 anisotropic Gaussians in front of a 32×32 camera, with image and
/// depth targets a margin away from anything the scene can render.
///
/// The objective is piecewise smooth: the blend order flips when two depths
/// cross, the scale regularizer's indicator sets change when a scale crosses
/// its bounds or two scales swap rank, and ReLU, the α and color clamps and the
/// L1 terms have kinks. Draws that
/// put any of these near the current point are rejected, so a
/// central difference never straddles one.
pub fn tiny_scene(seed: u64) -> TinyScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        if let Some(scene) = draw(&mut rng) {
            return scene;
        }
    }
}

fn draw(rng: &mut ChaCha8Rng) -> Option<TinyScene> {
    let n = rng.gen_range(4..=12);
    let mut set = GaussianSet::new(EMBED);
    for _ in 0..n {
        let mut q = [0.0; 4];
        q.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        set.push(Gaussian {
            mu: [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.3..0.3)],
            rot: q.map(|v| v / norm),
            log_scale: [0; 3].map(|_| rng.gen_range(0.08f64..0.25).ln()),
            opacity_logit: logit(rng.gen_range(0.3..0.9)),
            color: [0; 3].map(|_| rng.gen_range(0.2..0.8)),
            embedding: (0..EMBED).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        });
    }
    let mut app = AppearanceModel::new(EMBED, [1], rng);
    for v in app.image_embeddings.get_mut(&1).unwrap() {
        *v = rng.gen_range(-0.3..0.3);
    }
    // the camera looks along +z, so view depth is z + 3
    for i in 0..n {
        for j in 0..i {
            if (set.mu[i][2] - set.mu[j][2]).abs() < DEPTH_GAP {
                return None;
            }
        }
    }
    for ls in &set.log_scale {
        let mut sorted = *ls;
        sorted.sort_by(f64::total_cmp);
        let near = |a: f64, b: f64| (a - b).abs() < SCALE_MARGIN;
        if ls.iter().any(|v| near(*v, S_MAX.ln()))
            || near(sorted[0], sorted[1])
            || near(sorted[1], sorted[2])
            || near(sorted[2] - sorted[1], R_MAX.ln())
        {
            return None;
        }
    }
    let mut pre = vec![0.0; app.mlp.hidden];
    for i in 0..n {
        let mut x = set.embedding_of(i).to_vec();
        x.extend_from_slice(&app.image_embeddings[&1]);
        let out = app.mlp.forward(&x, &mut pre);
        if pre.iter().any(|p| p.abs() < RELU_MARGIN) {
            return None;
        }
        if (0..3).any(|k| {
            let c = set.color[i][k] + 2.0 * (out[k] - 0.5);
            c < CLAMP_MARGIN || c > 1.0 - CLAMP_MARGIN
        }) {
            return None;
        }
    }

    let pose = Pose::look_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0));
    let half = SIZE as f64 / 2.0;
    let camera = Camera::new(CameraIntrinsics::pinhole(SIZE, SIZE, 30.0, 30.0, half, half), pose);
    let tr = app.transform(&set, 1).unwrap();
    let splats = project_gaussians_with(&set, &tr.colors, &tr.opacities, &camera, ProjectOptions::default());
    for sp in &splats {
        let [a, b, c] = sp.conic;
        for y in 0..SIZE {
            for x in 0..SIZE {
                let (dx, dy) = (x as f64 + 0.5 - sp.center[0], y as f64 + 0.5 - sp.center[1]);
                let peak = (-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)).exp();
                if (peak - ALPHA_CLAMP).abs() < ALPHA_MARGIN {
                    return None;
                }
            }
        }
    }
    let out = render(&splats, SIZE, SIZE, &render_options()).unwrap();
    // each target pixel sits 0.05 to 0.45 from the current render
    let mut target = Image::zeros(SIZE, SIZE, 3);
    for (t, p) in target.data.iter_mut().zip(&out.rgb.data) {
        let d = rng.gen_range(0.05..0.45);
        *t = if *p < 0.5 { p + d } else { p - d };
    }
    // rendered depth is a blend of Gaussian depths in [2.7, 3.3]
    let depth = DepthMap::new(
        SIZE,
        SIZE,
        (0..SIZE * SIZE)
            .map(|_| if rng.gen_bool(0.5) { rng.gen_range(2.0..2.6) } else { rng.gen_range(3.4..4.0) })
            .collect(),
    );
    // Depth only counts where α exceeds a small threshold; masking to
    // well-covered pixels keeps every ±h probe on one side of it.
    let mask: Vec<bool> = out.alpha.iter().map(|a| *a > COVERED).collect();
    let mlp_coords = (0..MLP_SAMPLES).map(|_| rng.gen_range(0..app.mlp.params.len())).collect();
    Some(TinyScene {
        anchors: (0..n).collect(),
        set,
        app,
        view: View {
            image_id: 1,
            camera,
            target,
            mask: Some(mask),
            depth: None,
        },
        depth,
        mlp_coords,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    L1,
    Dssim,
    DepthSoft,
    DepthHard,
    Scale,
    OpacityOffset,
    Similarity,
    Composite,
}

impl Term {
    pub const ALL: [Term; 8] = [
        Term::L1,
        Term::Dssim,
        Term::DepthSoft,
        Term::DepthHard,
        Term::Scale,
        Term::OpacityOffset,
        Term::Similarity,
        Term::Composite,
    ];

    /// Terms that only exist on top of the photometric loss are checked as
    /// the difference against plain L1.
    fn isolated_from_l1(self) -> bool {
        !matches!(self, Term::L1 | Term::Dssim | Term::Composite)
    }
}

struct Setup {
    obj: Objective,
    mode: DepthMode,
    depth: bool,
    similarity: bool,
}

fn setup(term: Term) -> Setup {
    let zero = LossWeights {
        lambda_dssim: 0.0,
        lambda_sim: 0.0,
        lambda_delta_o: 0.0,
        lambda_s: 0.0,
        lambda_d_start: 0.0,
        lambda_d_end: 0.0,
    };
    let weights = match term {
        Term::L1 => zero,
        Term::Dssim => LossWeights {
            lambda_dssim: 1.0,
            ..zero
        },
        Term::DepthSoft | Term::DepthHard => LossWeights {
            lambda_d_start: 1.0,
            lambda_d_end: 1.0,
            ..zero
        },
        Term::Scale => LossWeights { lambda_s: 1.0, ..zero },
        Term::OpacityOffset => LossWeights {
            lambda_delta_o: 1.0,
            ..zero
        },
        Term::Similarity => LossWeights {
            lambda_sim: 1.0,
            ..zero
        },
        Term::Composite => LossWeights::default(),
    };
    Setup {
        obj: Objective {
            weights,
            // active for the scales drawn above
            scale: ScaleRegConfig {
                s_max: S_MAX,
                r_max: R_MAX,
                delta: 1e-8,
            },
            project: ProjectOptions::default(),
            render: render_options(),
        },
        mode: if term == Term::DepthHard {
            DepthMode::Hard
        } else {
            DepthMode::Soft
        },
        depth: matches!(term, Term::DepthSoft | Term::DepthHard | Term::Composite),
        similarity: matches!(term, Term::Similarity | Term::Composite),
    }
}

fn evaluate(scene: &TinyScene, set: &GaussianSet, app: &AppearanceModel, term: Term) -> (f64, SceneGrads) {
    let s = setup(term);
    let mut view = scene.view.clone();
    if s.depth {
        view.depth = Some(scene.depth.clone());
    }
    let k = 3.min(set.len() - 1);
    let ctx = StepContext {
        iter: 0,
        total_iters: 1,
        depth_mode: s.mode,
        similarity: s.similarity.then_some((scene.anchors.as_slice(), k, 4.0)),
    };
    let r = loss_and_grad(set, Some(app), &view, &s.obj, &ctx).expect("tiny scene evaluates");
    (r.report.total, r.grads)
}

fn loss(scene: &TinyScene, set: &GaussianSet, app: &AppearanceModel, term: Term) -> f64 {
    let v = evaluate(scene, set, app, term).0;
    if term.isolated_from_l1() {
        v - evaluate(scene, set, app, Term::L1).0
    } else {
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Param {
    Mu(usize, usize),
    Rot(usize, usize),
    LogScale(usize, usize),
    Opacity(usize),
    Color(usize, usize),
    Embedding(usize),
    ImageEmbedding(usize),
    Mlp(usize),
}

impl Param {
    fn slot<'a>(self, set: &'a mut GaussianSet, app: &'a mut AppearanceModel) -> &'a mut f64 {
        match self {
            Param::Mu(i, k) => &mut set.mu[i][k],
            Param::Rot(i, k) => &mut set.rot[i][k],
            Param::LogScale(i, k) => &mut set.log_scale[i][k],
            Param::Opacity(i) => &mut set.opacity_logit[i],
            Param::Color(i, k) => &mut set.color[i][k],
            Param::Embedding(j) => &mut set.embedding[j],
            Param::ImageEmbedding(j) => &mut app.image_embeddings.get_mut(&1).unwrap()[j],
            Param::Mlp(j) => &mut app.mlp.params[j],
        }
    }

    fn read(self, g: &SceneGrads) -> f64 {
        match self {
            Param::Mu(i, k) => g.mu[i][k],
            Param::Rot(i, k) => g.rot[i][k],
            Param::LogScale(i, k) => g.log_scale[i][k],
            Param::Opacity(i) => g.opacity_logit[i],
            Param::Color(i, k) => g.color[i][k],
            Param::Embedding(j) => g.embedding[j],
            Param::ImageEmbedding(j) => g.image_embedding[j],
            Param::Mlp(j) => g.mlp[j],
        }
    }
}

fn params(scene: &TinyScene) -> Vec<Param> {
    let n = scene.set.len();
    let mut out = Vec::new();
    for i in 0..n {
        for k in 0..3 {
            out.extend([Param::Mu(i, k), Param::LogScale(i, k), Param::Color(i, k)]);
        }
        out.extend((0..4).map(|k| Param::Rot(i, k)));
        out.push(Param::Opacity(i));
    }
    out.extend((0..scene.set.embedding.len()).map(Param::Embedding));
    out.extend((0..scene.app.image_dim).map(Param::ImageEmbedding));
    out.extend(scene.mlp_coords.iter().map(|j| Param::Mlp(*j)));
    out
}

#[derive(Debug, Clone, Copy)]
pub struct CheckResult {
    pub term: Term,
    pub max_rel: f64,
    pub worst: Option<Param>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(FLOOR)
}

/// Checks every Gaussian, embedding and image-embedding coordinate plus a
/// sample of MLP weights for one term.
pub fn check(scene: &TinyScene, term: Term) -> CheckResult {
    let (_, grads) = evaluate(scene, &scene.set, &scene.app, term);
    let base = term.isolated_from_l1().then(|| evaluate(scene, &scene.set, &scene.app, Term::L1).1);
    let mut res = CheckResult {
        term,
        max_rel: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let (mut set, mut app) = (scene.set.clone(), scene.app.clone());
    for p in params(scene) {
        let a = p.read(&grads) - base.as_ref().map_or(0.0, |b| p.read(b));
        let x0 = *p.slot(&mut set, &mut app);
        *p.slot(&mut set, &mut app) = x0 + H;
        let up = loss(scene, &set, &app, term);
        *p.slot(&mut set, &mut app) = x0 - H;
        let down = loss(scene, &set, &app, term);
        *p.slot(&mut set, &mut app) = x0;
        let f = (up - down) / (2.0 * H);
        let e = relative_error(a, f);
        res.checked += 1;
        if e > res.max_rel || res.worst.is_none() {
            res.max_rel = res.max_rel.max(e);
            res.worst = Some(p);
            res.analytic = a;
            res.numeric = f;
        }
    }
    res
}
