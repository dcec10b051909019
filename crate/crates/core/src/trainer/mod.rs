//! Per-partition optimization with level-of-detail generation, plus the
//! synthetic scenes and evaluation used to check it.

mod data;
mod eval;
mod step;
mod synth;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::{AppearanceModel, SimRegConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::lod::{budget_target, default_thresholds, densify_step, reset_opacity, DensifyConfig, LevelSchedule, LodModel};
use crate::losses::{LossReport, LossWeights, ScaleRegConfig};
use crate::optim::{exp_decay, Adam};
use crate::partition::{Box2, GroundAxes, PartitionPlan};
use crate::splat::{Gaussian, GaussianSet, ProjectOptions, RenderOptions, DEFAULT_EMBED_DIM};

pub use data::{load_dataset, Dataset, DatasetOptions};
pub use eval::{evaluate, render_model, EvalOptions, Metrics, Protocol, ViewMetrics};
pub use step::{loss_and_grad, loss_value, DepthMode, Objective, SceneGrads, StepContext, StepResult, View, DEPTH_MIN_ALPHA};
pub use synth::{
    make_synthetic, occluder_city, render_truth, write_synthetic, DatasetInfo, SynthConfig, SynthView, SyntheticScene,
    CITY_WALL, DATASET_INFO, DEPTH_VALID_ALPHA, VARIANT_SHIFT,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Position step at the start of each level, times the scene extent.
    pub position: f64,
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub embedding: f64,
    pub image_embedding: f64,
    pub mlp: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 0.001,
            scale: 0.005,
            opacity: 0.05,
            color: 0.0025,
            embedding: 0.001,
            image_embedding: 0.001,
            mlp: 0.001,
        }
    }
}

impl LearningRates {
    fn validate(&self) -> Result<()> {
        let all = [
            self.position,
            self.position_final,
            self.rotation,
            self.scale,
            self.opacity,
            self.color,
            self.embedding,
            self.image_embedding,
            self.mlp,
        ];
        if all.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Argument("learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleSettings {
    /// Scale ceiling as a fraction of the scene extent.
    pub s_max_fraction: f64,
    pub r_max: f64,
}

impl Default for ScaleSettings {
    fn default() -> Self {
        Self {
            s_max_fraction: 0.1,
            r_max: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifySettings {
    pub tau_min: f64,
    pub eta: f64,
    pub d_max: Option<f64>,
    pub abs_grad: bool,
    pub split_fraction: f64,
    /// Densification runs until this fraction of each level.
    pub until_fraction: f64,
    /// Densification steps between opacity resets; 0 disables them.
    pub opacity_reset_every: usize,
}

impl Default for DensifySettings {
    fn default() -> Self {
        let d = DensifyConfig::default();
        Self {
            tau_min: d.tau_min,
            eta: d.eta,
            d_max: d.d_max,
            abs_grad: d.abs_grad,
            split_fraction: d.split_fraction,
            until_fraction: 0.8,
            opacity_reset_every: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub appearance: bool,
    /// Use depth maps when the views carry them.
    pub depth: bool,
    pub antialias: bool,
    pub culling: bool,
    pub tile: u32,
    pub init_opacity: f64,
    pub embed_dim: usize,
    /// Write a log record every this many iterations (and at level ends).
    pub log_every: usize,
    pub lr: LearningRates,
    pub loss: LossWeights,
    pub scale: ScaleSettings,
    pub similarity: SimRegConfig,
    pub densify: DensifySettings,
    pub schedule: LevelSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            appearance: true,
            depth: true,
            antialias: false,
            culling: true,
            tile: 16,
            init_opacity: 0.1,
            embed_dim: DEFAULT_EMBED_DIM,
            log_every: 10,
            lr: LearningRates::default(),
            loss: LossWeights::default(),
            scale: ScaleSettings::default(),
            similarity: SimRegConfig::default(),
            densify: DensifySettings::default(),
            schedule: LevelSchedule::desk(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.lr.validate()?;
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return Err(Error::Argument(format!("init_opacity {} not in (0, 1)", self.init_opacity)));
        }
        if self.tile == 0 {
            return Err(Error::Argument("tile size must be positive".into()));
        }
        let d = &self.densify;
        if !(d.tau_min > 0.0 && d.eta >= 1.0 && d.split_fraction > 0.0) || d.d_max.is_some_and(|v| !(v > 0.0)) {
            return Err(Error::Argument("densification needs tau_min > 0, eta >= 1, d_max > 0".into()));
        }
        if !(d.until_fraction > 0.0 && d.until_fraction <= 1.0) {
            return Err(Error::Argument("densify.until_fraction must be in (0, 1]".into()));
        }
        ScaleRegConfig {
            s_max: self.scale.s_max_fraction,
            r_max: self.scale.r_max,
            delta: 1e-8,
        }
        .validate()
    }

    fn densify_config(&self, level: usize) -> DensifyConfig {
        let lv = &self.schedule.levels[level];
        DensifyConfig {
            tau_min: lv.tau_min.unwrap_or(self.densify.tau_min),
            eta: self.densify.eta,
            d_max: self.densify.d_max,
            abs_grad: self.densify.abs_grad || lv.abs_grad,
            split_fraction: self.densify.split_fraction,
        }
    }
}

/// Everything one partition trains on.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionData {
    pub id: usize,
    pub bbox: Box2,
    pub axes: GroundAxes,
    /// Full-resolution training views.
    pub views: Vec<View>,
    /// Initialization points: position and color in [0, 1].
    pub points: Vec<([f64; 3], [f64; 3])>,
}

impl PartitionData {
    /// Training views assigned to partition `id` of `plan` and the SfM
    /// points they observe.
    pub fn from_plan(ds: &Dataset, plan: &PartitionPlan, id: usize) -> Result<Self> {
        let part = plan
            .partition(id)
            .ok_or_else(|| Error::Argument(format!("plan has no partition {id}")))?;
        let ids: Vec<u32> = part
            .image_ids()
            .into_iter()
            .filter(|i| !ds.test_ids.contains(i))
            .collect();
        Self::with_images(ds, id, part.bbox, plan.ground_axes, &ids)
    }

    /// Every training view as a single partition spanning the point cloud.
    pub fn whole(ds: &Dataset) -> Result<Self> {
        let centers: Vec<_> = ds.views.values().map(|v| v.camera.pose.center()).collect();
        let axes = GroundAxes::from_variance(&centers);
        let ground: Vec<[f64; 2]> = ds.model.points.values().map(|p| axes.project_slice(&p.position)).collect();
        let bbox = Box2::from_points(&ground).ok_or_else(|| Error::Argument("model has no points".into()))?;
        let ids: Vec<u32> = ds.train_ids().collect();
        Self::with_images(ds, 0, bbox, axes, &ids)
    }

    fn with_images(ds: &Dataset, id: usize, bbox: Box2, axes: GroundAxes, ids: &[u32]) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for i in ids {
            if let Some(img) = ds.model.images.get(i) {
                seen.extend(img.features.iter().filter_map(|f| f.point3d_id));
            }
        }
        let points = seen
            .iter()
            .filter_map(|pid| ds.model.points.get(pid))
            .map(|p| (p.position, p.color_unit()))
            .collect();
        let views = ids
            .iter()
            .map(|i| ds.views.get(i).cloned().ok_or(Error::UnknownImage(*i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id,
            bbox,
            axes,
            views,
            points,
        })
    }

    /// Camera spread used to scale step sizes and size thresholds:
    /// 1.1 × the largest camera distance from the mean camera center.
    pub fn scene_extent(&self) -> f64 {
        let centers: Vec<_> = self.views.iter().map(|v| v.camera.pose.center()).collect();
        if centers.is_empty() {
            return 1.0;
        }
        let mean = centers.iter().fold(nalgebra::Vector3::zeros(), |a, c| a + c) / centers.len() as f64;
        let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
        if r > 0.0 {
            1.1 * r
        } else {
            1.0
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        partition: usize,
        level: usize,
        iter: usize,
        image: u32,
        count: usize,
        depth_mode: DepthMode,
        #[serde(flatten)]
        loss: LossReport,
    },
    Densify {
        partition: usize,
        level: usize,
        iter: usize,
        target: usize,
        candidates: usize,
        cloned: usize,
        split: usize,
        pruned: usize,
        count: usize,
        opacity_reset: bool,
    },
    Level {
        partition: usize,
        level: usize,
        iterations: usize,
        count: usize,
        budget: usize,
        max_count: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    /// Snapshot at the end of every level.
    pub levels: Vec<Checkpoint>,
    pub log: Vec<LogRecord>,
    /// Largest count seen at any iteration of each level.
    pub max_counts: Vec<usize>,
}

/// Gaussians at the points: isotropic scale from the mean distance to the
/// three nearest neighbors, uniform opacity, small random embeddings. Points
/// beyond `budget` are thinned by even striding.
pub fn init_from_points(
    points: &[([f64; 3], [f64; 3])],
    budget: usize,
    opacity: f64,
    embed_dim: usize,
    rng: &mut impl Rng,
) -> Result<GaussianSet> {
    if points.is_empty() {
        return Err(Error::Argument("no SfM points to initialize from".into()));
    }
    let chosen: Vec<&([f64; 3], [f64; 3])> = if points.len() > budget {
        (0..budget).map(|i| &points[i * points.len() / budget]).collect()
    } else {
        points.iter().collect()
    };
    let mut set = GaussianSet::new(embed_dim);
    for (i, (p, c)) in chosen.iter().enumerate() {
        let mut d: Vec<f64> = chosen
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, (q, _))| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>().sqrt())
            .collect();
        d.sort_by(f64::total_cmp);
        let k = d.len().min(3);
        let scale = if k == 0 { 0.01 } else { d[..k].iter().sum::<f64>() / k as f64 };
        let mut g = Gaussian::isotropic(*p, scale.max(1e-7), opacity, *c);
        g.embedding = (0..embed_dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
        set.push(g);
    }
    Ok(set)
}

struct Optimizers {
    mu: Adam,
    rot: Adam,
    scale: Adam,
    opacity: Adam,
    color: Adam,
    embedding: Adam,
    mlp: Adam,
    images: BTreeMap<u32, Adam>,
}

impl Optimizers {
    fn new(set: &GaussianSet, app: Option<&AppearanceModel>) -> Self {
        let n = set.len();
        Self {
            mu: Adam::new(3 * n),
            rot: Adam::new(4 * n),
            scale: Adam::new(3 * n),
            opacity: Adam::new(n),
            color: Adam::new(3 * n),
            embedding: Adam::new(set.embedding.len()),
            mlp: Adam::new(app.map_or(0, |a| a.mlp.params.len())),
            images: app
                .map(|a| a.image_embeddings.iter().map(|(id, e)| (*id, Adam::new(e.len()))).collect())
                .unwrap_or_default(),
        }
    }

    fn remap(&mut self, sources: &[Option<usize>], embed_dim: usize) {
        self.mu.remap(sources, 3);
        self.rot.remap(sources, 4);
        self.scale.remap(sources, 3);
        self.opacity.remap(sources, 1);
        self.color.remap(sources, 3);
        self.embedding.remap(sources, embed_dim);
    }
}

struct ImageSampler {
    order: Vec<usize>,
    next: usize,
}

impl ImageSampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            next: n,
        }
    }

    /// Visits every view once per shuffled epoch.
    fn sample(&mut self, rng: &mut impl Rng) -> usize {
        if self.next >= self.order.len() {
            self.order.shuffle(rng);
            self.next = 0;
        }
        self.next += 1;
        self.order[self.next - 1]
    }
}

/// Trains every level of the schedule in turn, each resuming from the
/// previous level's final state, and snapshots each level.
pub fn train_partition(data: &PartitionData, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.views.is_empty() {
        return Err(Error::Argument(format!("partition {} has no training images", data.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (data.id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let schedule = &cfg.schedule;
    let embed_dim = if cfg.appearance { cfg.embed_dim } else { 0 };
    let mut set = init_from_points(&data.points, schedule.levels[0].budget, cfg.init_opacity, embed_dim, &mut rng)?;
    let mut app = cfg
        .appearance
        .then(|| AppearanceModel::new(embed_dim, data.views.iter().map(|v| v.image_id), &mut rng));
    let mut opt = Optimizers::new(&set, app.as_ref());
    let extent = data.scene_extent();
    let obj = Objective {
        weights: cfg.loss,
        scale: ScaleRegConfig {
            s_max: cfg.scale.s_max_fraction * extent,
            r_max: cfg.scale.r_max,
            delta: 1e-8,
        },
        project: ProjectOptions {
            antialias: cfg.antialias,
        },
        render: RenderOptions {
            tile: cfg.tile,
            culling: cfg.culling,
            ..Default::default()
        },
    };
    let n_images = data.views.len();
    let mut out = TrainOutput {
        levels: Vec::new(),
        log: Vec::new(),
        max_counts: Vec::new(),
    };

    for (l, lv) in schedule.levels.iter().enumerate() {
        let level = l + 1;
        let views: Vec<View> = data
            .views
            .iter()
            .map(|v| {
                let mut v = v.scaled(lv.downsample);
                if !cfg.depth {
                    v.depth = None;
                }
                v
            })
            .collect();
        let iters = schedule.iterations(l, n_images);
        let until = (iters as f64 * cfg.densify.until_fraction).floor() as usize;
        let steps = until / lv.interval;
        let start_count = set.len();
        let dcfg = cfg.densify_config(l);
        let mut dstep = 0;
        let mut sampler = ImageSampler::new(views.len());
        let mut max_count = set.len();
        set.reset_stats();

        for it in 0..iters {
            let view = &views[sampler.sample(&mut rng)];
            let depth_mode = DepthMode::for_iteration(it);
            let sim_cfg = cfg.similarity.clamped(set.len());
            let anchors = (app.is_some()
                && cfg.loss.lambda_sim > 0.0
                && sim_cfg.cadence > 0
                && it % sim_cfg.cadence == 0
                && sim_cfg.k >= 2
                && sim_cfg.k < set.len())
            .then(|| {
                let mut a = rand::seq::index::sample(&mut rng, set.len(), sim_cfg.sample_size.min(set.len())).into_vec();
                a.sort_unstable();
                a
            });
            let ctx = StepContext {
                iter: it,
                total_iters: iters,
                depth_mode,
                similarity: anchors.as_deref().map(|a| (a, sim_cfg.k, sim_cfg.lambda_w)),
            };
            let res = loss_and_grad(&set, app.as_ref(), view, &obj, &ctx).map_err(|e| match e {
                Error::NonFinite { term } => Error::Diverged {
                    level,
                    iteration: it,
                    detail: format!("non-finite {term}"),
                },
                other => other,
            })?;

            let stat = if dcfg.abs_grad { &res.view_grad_abs } else { &res.view_grad };
            for i in 0..set.len() {
                if res.visible[i] {
                    set.grad_accum[i] += stat[i];
                    set.grad_count[i] += 1;
                }
            }

            let g = &res.grads;
            let lr_mu = exp_decay(cfg.lr.position * extent, cfg.lr.position_final * extent, it, iters);
            opt.mu.step(set.mu.as_flattened_mut(), g.mu.as_flattened(), lr_mu);
            opt.rot.step(set.rot.as_flattened_mut(), g.rot.as_flattened(), cfg.lr.rotation);
            opt.scale.step(set.log_scale.as_flattened_mut(), g.log_scale.as_flattened(), cfg.lr.scale);
            opt.opacity.step(&mut set.opacity_logit, &g.opacity_logit, cfg.lr.opacity);
            opt.color.step(set.color.as_flattened_mut(), g.color.as_flattened(), cfg.lr.color);
            if let Some(a) = app.as_mut() {
                opt.embedding.step(&mut set.embedding, &g.embedding, cfg.lr.embedding);
                opt.mlp.step(&mut a.mlp.params, &g.mlp, cfg.lr.mlp);
                let e = a.image_embeddings.get_mut(&view.image_id).expect("embedding per view");
                let adam = opt.images.get_mut(&view.image_id).expect("optimizer per view");
                adam.step(e, &g.image_embedding, cfg.lr.image_embedding);
            }

            if (it + 1) % lv.interval == 0 && it < until && steps > 0 {
                dstep += 1;
                let target = budget_target(start_count, lv.budget, dstep, steps);
                let outcome = densify_step(&mut set, &dcfg, &data.bbox, data.axes, extent, target, &mut rng);
                opt.remap(&outcome.sources, embed_dim);
                let reset = cfg.densify.opacity_reset_every > 0
                    && dstep % cfg.densify.opacity_reset_every == 0
                    && dstep < steps;
                if reset {
                    reset_opacity(&mut set);
                    opt.opacity = Adam::new(set.len());
                }
                out.log.push(LogRecord::Densify {
                    partition: data.id,
                    level,
                    iter: it,
                    target,
                    candidates: outcome.candidates,
                    cloned: outcome.cloned,
                    split: outcome.split,
                    pruned: outcome.pruned,
                    count: set.len(),
                    opacity_reset: reset,
                });
            }
            max_count = max_count.max(set.len());
            if set.len() > lv.budget {
                return Err(Error::State(format!(
                    "level {level} holds {} Gaussians over its budget {}",
                    set.len(),
                    lv.budget
                )));
            }
            if cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == iters) {
                out.log.push(LogRecord::Step {
                    partition: data.id,
                    level,
                    iter: it,
                    image: view.image_id,
                    count: set.len(),
                    depth_mode,
                    loss: res.report,
                });
            }
        }
        set.reset_stats();
        out.log.push(LogRecord::Level {
            partition: data.id,
            level,
            iterations: iters,
            count: set.len(),
            budget: lv.budget,
            max_count,
        });
        out.max_counts.push(max_count);
        out.levels.push(Checkpoint {
            set: set.clone(),
            appearance: app.clone(),
        });
    }
    Ok(out)
}

/// Trains each partition of `plan` (or the whole scene as one partition)
/// and assembles the level-of-detail model. Partitions without training
/// images are left out. Partitions train in parallel;
/// each has its own seeded stream so the result does not depend on
/// scheduling.
pub fn train_lod(
    ds: &Dataset,
    plan: Option<&PartitionPlan>,
    cfg: &TrainConfig,
    thresholds: Option<Vec<f64>>,
) -> Result<(LodModel, Vec<TrainOutput>)> {
    use rayon::prelude::*;
    cfg.validate()?;
    let parts: Vec<PartitionData> = match plan {
        Some(plan) => plan
            .partitions
            .iter()
            .map(|p| PartitionData::from_plan(ds, plan, p.id))
            .collect::<Result<_>>()?,
        None => vec![PartitionData::whole(ds)?],
    };
    // Cells that no training camera covers have nothing to fit.
    let (parts, empty): (Vec<_>, Vec<_>) = parts.into_iter().partition(|p| !p.views.is_empty());
    for p in &empty {
        log::warn!("partition {} has no training images and is left out", p.id);
    }
    if parts.is_empty() {
        return Err(Error::Argument("no partition has training images".into()));
    }
    let (axes, bounds) = match plan {
        Some(plan) => (plan.ground_axes, plan.bounds),
        None => (parts[0].axes, parts[0].bbox),
    };
    let size = parts
        .iter()
        .map(|p| p.bbox.extent(0).max(p.bbox.extent(1)))
        .fold(0.0, f64::max);
    let thresholds = thresholds.unwrap_or_else(|| default_thresholds(cfg.schedule.levels.len(), size));
    let outputs: Vec<TrainOutput> = parts
        .par_iter()
        .map(|p| {
            log::info!("training partition {} on {} images", p.id, p.views.len());
            train_partition(p, cfg)
        })
        .collect::<Result<_>>()?;
    let mut model = LodModel::new(
        axes,
        bounds,
        cfg.schedule.clone(),
        thresholds,
        parts
            .iter()
            .zip(&outputs)
            .map(|(p, o)| (p.id, p.bbox, o.levels.clone()))
            .collect(),
    )?;
    model.manifest.antialias = cfg.antialias;
    Ok((model, outputs))
}
