//! Budget-steered densification and per-partition detail levels.

mod densify;

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::appearance::AppearanceModel;
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::partition::{Box2, GroundAxes};
use crate::splat::{Camera, GaussianSet, NEAR_PLANE};

pub use densify::{
    budget_target, densify_step, mean_gradients, ranked_candidates, reset_opacity, threshold, DensifyConfig,
    DensifyOutcome, PRUNE_OPACITY, RESET_OPACITY, SPLIT_SHRINK,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelConfig {
    pub budget: usize,
    /// Iterations between densification steps.
    pub interval: usize,
    /// Image resolution as a fraction of the full size.
    pub downsample: f64,
    /// Base iteration count before image-count scaling.
    pub iterations: usize,
    /// Overrides the densification threshold for this level.
    #[serde(default)]
    pub tau_min: Option<f64>,
    #[serde(default)]
    pub abs_grad: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSchedule {
    pub levels: Vec<LevelConfig>,
    /// Image count at which iteration counts start to scale up.
    #[serde(default = "default_images_per_scale")]
    pub images_per_scale: usize,
}

fn default_images_per_scale() -> usize {
    600
}

impl LevelSchedule {
    /// Three levels with desk-sized budgets: 41/82/164.
    pub fn desk() -> Self {
        Self::geometric(3, 164)
    }

    /// `n` levels ending at `top_budget`, each halving the budget and the
    /// resolution of the next and doubling its densification interval
    /// (100 at level 1). The last level trains 1000 iterations, the others 500.
    pub fn geometric(n: usize, top_budget: usize) -> Self {
        let levels = (1..=n)
            .map(|i| {
                let down = (n - i) as i32;
                LevelConfig {
                    budget: top_budget.div_ceil(1 << down).max(1),
                    interval: (100 >> (i - 1).min(6)).max(1),
                    downsample: 0.5f64.powi(down),
                    iterations: if i == n { 1000 } else { 500 },
                    tau_min: None,
                    abs_grad: false,
                }
            })
            .collect();
        Self {
            levels,
            images_per_scale: default_images_per_scale(),
        }
    }

    /// A single full-resolution level.
    pub fn single(budget: usize, interval: usize, iterations: usize) -> Self {
        Self {
            levels: vec![LevelConfig {
                budget,
                interval,
                downsample: 1.0,
                iterations,
                tau_min: None,
                abs_grad: false,
            }],
            images_per_scale: default_images_per_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(format!("level schedule: {m}")));
        let Some(last) = self.levels.last() else {
            return bad("no levels".into());
        };
        if self.images_per_scale == 0 {
            return bad("images_per_scale must be positive".into());
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.budget == 0 || l.interval == 0 {
                return bad(format!("level {} needs a positive budget and interval", i + 1));
            }
            if !(l.downsample > 0.0 && l.downsample <= 1.0) {
                return bad(format!("level {} downsample {} is outside (0, 1]", i + 1, l.downsample));
            }
            if l.tau_min.is_some_and(|t| !(t > 0.0)) {
                return bad(format!("level {} tau_min must be positive", i + 1));
            }
        }
        for (i, w) in self.levels.windows(2).enumerate() {
            let (a, b) = (&w[0], &w[1]);
            if b.budget <= a.budget {
                return bad(format!("budgets must increase (level {} vs {})", i + 1, i + 2));
            }
            if b.interval >= a.interval {
                return bad(format!("intervals must decrease (level {} vs {})", i + 1, i + 2));
            }
            if b.downsample <= a.downsample {
                return bad(format!("downsample factors must increase (level {} vs {})", i + 1, i + 2));
            }
        }
        if last.downsample != 1.0 {
            return bad("the last level must use full resolution".into());
        }
        Ok(())
    }

    /// `max(n_images / images_per_scale, 1)`.
    pub fn iteration_scale(&self, n_images: usize) -> f64 {
        (n_images as f64 / self.images_per_scale as f64).max(1.0)
    }

    /// Iterations of level `level` (0-based) for a partition with `n_images`.
    pub fn iterations(&self, level: usize, n_images: usize) -> usize {
        (self.levels[level].iterations as f64 * self.iteration_scale(n_images)).ceil() as usize
    }
}

/// Distance bands: `t_1 > t_2 > …`; level 1 beyond `t_1`, level `j+1` within
/// `t_j`.
pub fn default_thresholds(levels: usize, partition_size: f64) -> Vec<f64> {
    (1..levels).map(|j| (levels - j) as f64 * partition_size).collect()
}

pub fn validate_thresholds(t: &[f64]) -> Result<()> {
    if t.iter().any(|v| !(*v >= 0.0)) || t.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Argument(format!("thresholds must be non-negative and strictly decreasing: {t:?}")));
    }
    Ok(())
}

/// 1-based level for a partition at ground distance `d`.
pub fn level_for_distance(thresholds: &[f64], d: f64) -> usize {
    1 + thresholds.iter().filter(|t| d <= **t).count()
}

/// True unless the box, extruded over `height` along the up axis, lies
/// entirely outside one frustum plane.
pub fn box_in_frustum(cam: &Camera, bbox: &Box2, axes: GroundAxes, height: [f64; 2]) -> bool {
    let intr = &cam.intr;
    let (w, h) = (intr.width as f64, intr.height as f64);
    let planes = [
        (Vector3::new(0.0, 0.0, 1.0), -NEAR_PLANE),
        (Vector3::new(intr.fx, 0.0, intr.cx), 0.0),
        (Vector3::new(-intr.fx, 0.0, w - intr.cx), 0.0),
        (Vector3::new(0.0, intr.fy, intr.cy), 0.0),
        (Vector3::new(0.0, -intr.fy, h - intr.cy), 0.0),
    ];
    let mut corners = Vec::with_capacity(8);
    for &a in &[bbox.min[0], bbox.max[0]] {
        for &b in &[bbox.min[1], bbox.max[1]] {
            for &c in &height {
                let mut p = Vector3::zeros();
                p[axes.0[0]] = a;
                p[axes.0[1]] = b;
                p[axes.up()] = c;
                corners.push(cam.pose.to_camera(&p));
            }
        }
    }
    planes
        .iter()
        .all(|(n, off)| corners.iter().any(|c| n.dot(c) + off >= 0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodPartition {
    pub id: usize,
    pub bbox: Box2,
    /// Checkpoint file per level, relative to the manifest.
    pub files: Vec<String>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodManifest {
    pub version: u32,
    pub ground_axes: GroundAxes,
    /// Scene bounds; Gaussians beyond an outer side are kept when cropping.
    pub bounds: Box2,
    pub height: [f64; 2],
    /// Whether the levels were trained with the screen-space mip filter,
    /// which rendering must then match.
    #[serde(default)]
    pub antialias: bool,
    pub thresholds: Vec<f64>,
    pub schedule: LevelSchedule,
    pub partitions: Vec<LodPartition>,
}

pub const LOD_MANIFEST: &str = "lod.json";

#[derive(Debug, Clone, PartialEq)]
pub struct LodModel {
    pub manifest: LodManifest,
    /// `levels[p][l]` for partition index `p` (manifest order), level `l`.
    pub levels: Vec<Vec<Checkpoint>>,
}

/// Selected level (1-based) for one partition, or `None` when culled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub partition: usize,
    pub level: Option<usize>,
}

impl LodModel {
    /// Builds the model; the height range covers every Gaussian center.
    pub fn new(
        ground_axes: GroundAxes,
        bounds: Box2,
        schedule: LevelSchedule,
        thresholds: Vec<f64>,
        partitions: Vec<(usize, Box2, Vec<Checkpoint>)>,
    ) -> Result<Self> {
        schedule.validate()?;
        validate_thresholds(&thresholds)?;
        let up = ground_axes.up();
        let mut height = [f64::INFINITY, f64::NEG_INFINITY];
        let mut parts = Vec::new();
        let mut levels = Vec::new();
        for (id, bbox, cks) in partitions {
            if cks.len() != schedule.levels.len() {
                return Err(Error::State(format!(
                    "partition {id} has {} levels, schedule has {}",
                    cks.len(),
                    schedule.levels.len()
                )));
            }
            for ck in &cks {
                for m in &ck.set.mu {
                    height[0] = height[0].min(m[up]);
                    height[1] = height[1].max(m[up]);
                }
            }
            parts.push(LodPartition {
                id,
                bbox,
                files: (1..=cks.len()).map(|l| format!("p{id}_l{l}.ckpt")).collect(),
                counts: cks.iter().map(|c| c.set.len()).collect(),
            });
            levels.push(cks);
        }
        if height[0] > height[1] {
            height = [0.0, 0.0];
        }
        Ok(Self {
            manifest: LodManifest {
                version: 1,
                ground_axes,
                bounds,
                height,
                antialias: false,
                thresholds,
                schedule,
                partitions: parts,
            },
            levels,
        })
    }

    pub fn level_count(&self) -> usize {
        self.manifest.schedule.levels.len()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (p, cks) in self.manifest.partitions.iter().zip(&self.levels) {
            for (file, ck) in p.files.iter().zip(cks) {
                save_checkpoint(&dir.join(file), &ck.set, ck.appearance.as_ref())?;
            }
        }
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(dir.join(LOD_MANIFEST), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(LOD_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|source| Error::Load { path, source })?;
        let manifest: LodManifest = serde_json::from_str(&text)?;
        manifest.schedule.validate()?;
        validate_thresholds(&manifest.thresholds)?;
        let mut levels = Vec::new();
        for p in &manifest.partitions {
            let cks = p
                .files
                .iter()
                .map(|f| load_checkpoint(&dir.join(f)))
                .collect::<Result<Vec<_>>>()?;
            if cks.len() != manifest.schedule.levels.len() {
                return Err(Error::format("LOD manifest", format!("partition {} level count", p.id)));
            }
            levels.push(cks);
        }
        Ok(Self { manifest, levels })
    }

    /// Per partition: culled when the extruded bbox is outside the frustum,
    /// else the level picked by ground distance from the camera center.
    pub fn select_levels(&self, cam: &Camera) -> Vec<Selection> {
        let m = &self.manifest;
        let center = m.ground_axes.project(&cam.pose.center());
        m.partitions
            .iter()
            .map(|p| {
                let visible = box_in_frustum(cam, &p.bbox, m.ground_axes, m.height);
                Selection {
                    partition: p.id,
                    level: visible.then(|| level_for_distance(&m.thresholds, p.bbox.distance(center))),
                }
            })
            .collect()
    }

    /// Top level of every partition, nothing culled.
    pub fn select_all_top(&self) -> Vec<Selection> {
        let top = self.level_count();
        self.manifest
            .partitions
            .iter()
            .map(|p| Selection {
                partition: p.id,
                level: Some(top),
            })
            .collect()
    }

    /// Selected levels cropped to their partitions so neighbors do not
    /// double up, with each partition's appearance model.
    pub fn segments(&self, selections: &[Selection]) -> Result<Vec<CroppedLevel<'_>>> {
        let m = &self.manifest;
        let mut out = Vec::new();
        for sel in selections {
            let Some(level) = sel.level else { continue };
            let idx = m
                .partitions
                .iter()
                .position(|p| p.id == sel.partition)
                .ok_or_else(|| Error::Argument(format!("no partition {}", sel.partition)))?;
            if level == 0 || level > self.level_count() {
                return Err(Error::Argument(format!("no level {level}")));
            }
            let ck = &self.levels[idx][level - 1];
            let keep = crop_indices(&ck.set, &m.partitions[idx].bbox, &m.bounds, m.ground_axes);
            out.push(CroppedLevel {
                partition: sel.partition,
                set: ck.set.select(&keep),
                appearance: ck.appearance.as_ref(),
            });
        }
        Ok(out)
    }

    /// Concatenation of [`segments`](Self::segments). With `appearance_image`
    /// each partition decodes colors and opacities with that image's
    /// embedding, or the mean training embedding when it never saw the image;
    /// without it the base attributes are used.
    pub fn gather(&self, selections: &[Selection], appearance_image: Option<u32>) -> Result<Gathered> {
        let mut out = Gathered::default();
        for seg in self.segments(selections)? {
            let (colors, opacities) = appearance_attributes(&seg.set, seg.appearance, appearance_image)?;
            for i in 0..seg.set.len() {
                let mut g = seg.set.get(i);
                g.embedding.clear();
                out.set.push(g);
            }
            out.colors.extend(colors);
            out.opacities.extend(opacities);
            out.per_partition.push((seg.partition, seg.set.len()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CroppedLevel<'a> {
    pub partition: usize,
    pub set: GaussianSet,
    pub appearance: Option<&'a AppearanceModel>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gathered {
    /// Geometry only; embeddings are dropped once applied.
    pub set: GaussianSet,
    pub colors: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    pub per_partition: Vec<(usize, usize)>,
}

fn appearance_attributes(
    set: &GaussianSet,
    appearance: Option<&AppearanceModel>,
    image: Option<u32>,
) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
    match (appearance, image) {
        (Some(app), Some(id)) => {
            let tr = match app.image_embeddings.get(&id) {
                Some(e) => app.transform_with(set, e),
                None => app.transform_with(set, &app.mean_embedding()),
            };
            Ok((tr.colors, tr.opacities))
        }
        _ => Ok((set.color.clone(), set.opacities())),
    }
}

/// Indices of Gaussians whose ground position lies in `bbox`, half-open on
/// interior sides and unbounded on sides that touch the scene bounds.
pub fn crop_indices(set: &GaussianSet, bbox: &Box2, bounds: &Box2, axes: GroundAxes) -> Vec<usize> {
    (0..set.len())
        .filter(|&i| {
            let p = axes.project_slice(&set.mu[i]);
            (0..2).all(|k| {
                let lo = bbox.min[k] <= bounds.min[k] || p[k] >= bbox.min[k];
                let hi = bbox.max[k] >= bounds.max[k] || p[k] < bbox.max[k];
                lo && hi
            })
        })
        .collect()
}
