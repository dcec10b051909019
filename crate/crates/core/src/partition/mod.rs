//! Horizontal scene division with location- and visibility-based image
//! assignment, plus iterative merge/split rebalancing.

mod hull;
mod manifest;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sfm::{project_point, ImageRecord, SfmModel};

pub use hull::{convex_hull, convex_hull_area, polygon_area};
pub use manifest::{read_plan, write_plan, PlanRecord};

/// Default visibility ratio above which an out-of-partition image is kept.
pub const DEFAULT_VISIBILITY_THRESHOLD: f64 = 1.0 / 6.0;

/// The two world axes spanning the ground plane, ascending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundAxes(pub [usize; 2]);

impl GroundAxes {
    pub fn project(&self, p: &Vector3<f64>) -> [f64; 2] {
        [p[self.0[0]], p[self.0[1]]]
    }

    pub fn project_slice(&self, p: &[f64; 3]) -> [f64; 2] {
        [p[self.0[0]], p[self.0[1]]]
    }

    pub fn up(&self) -> usize {
        3 - self.0[0] - self.0[1]
    }

    /// Picks the two axes with the largest variance of `positions`.
    pub fn from_variance(positions: &[Vector3<f64>]) -> Self {
        let n = positions.len().max(1) as f64;
        let mean = positions.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
        let var = positions
            .iter()
            .fold(Vector3::zeros(), |a, p| a + (p - mean).component_mul(&(p - mean)));
        let mut axes = [0usize, 1, 2];
        axes.sort_by(|a, b| var[*b].partial_cmp(&var[*a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b)));
        let mut pair = [axes[0], axes[1]];
        pair.sort_unstable();
        GroundAxes(pair)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2 {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Box2 {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Self { min, max }
    }

    pub fn from_points<'a>(pts: impl IntoIterator<Item = &'a [f64; 2]>) -> Option<Self> {
        let mut it = pts.into_iter();
        let first = *it.next()?;
        let mut b = Box2::new(first, first);
        for p in it {
            for k in 0..2 {
                b.min[k] = b.min[k].min(p[k]);
                b.max[k] = b.max[k].max(p[k]);
            }
        }
        Some(b)
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn area(&self) -> f64 {
        self.extent(0) * self.extent(1)
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.min[0] + self.max[0]), 0.5 * (self.min[1] + self.max[1])]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// Euclidean distance from `p` to the closest point of the box; 0 inside.
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        let dx = (self.min[0] - p[0]).max(0.0).max(p[0] - self.max[0]);
        let dy = (self.min[1] - p[1]).max(0.0).max(p[1] - self.max[1]);
        dx.hypot(dy)
    }

    /// Box scaled about its center so each side grows by `fraction` of its length.
    pub fn expanded(&self, fraction: f64) -> Self {
        let mut b = *self;
        for k in 0..2 {
            let pad = 0.5 * fraction * self.extent(k);
            b.min[k] -= pad;
            b.max[k] += pad;
        }
        b
    }

    pub fn union(&self, other: &Box2) -> Self {
        Box2 {
            min: [self.min[0].min(other.min[0]), self.min[1].min(other.min[1])],
            max: [self.max[0].max(other.max[0]), self.max[1].max(other.max[1])],
        }
    }

    /// Length of the common boundary when the boxes touch along an edge.
    pub fn shared_edge(&self, other: &Box2) -> f64 {
        for k in 0..2 {
            let o = 1 - k;
            if self.max[k] == other.min[k] || other.max[k] == self.min[k] {
                let lo = self.min[o].max(other.min[o]);
                let hi = self.max[o].min(other.max[o]);
                if hi > lo {
                    return hi - lo;
                }
            }
        }
        0.0
    }

    /// True when the union of two edge-adjacent boxes is itself a box.
    pub fn merges_exactly(&self, other: &Box2) -> bool {
        self.shared_edge(other) > 0.0
            && ((self.min[0] == other.min[0] && self.max[0] == other.max[0])
                || (self.min[1] == other.min[1] && self.max[1] == other.max[1]))
    }

    fn split(&self) -> (Box2, Box2) {
        let axis = if self.extent(0) >= self.extent(1) { 0 } else { 1 };
        let mid = 0.5 * (self.min[axis] + self.max[axis]);
        let mut a = *self;
        let mut b = *self;
        a.max[axis] = mid;
        b.min[axis] = mid;
        (a, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Location,
    Visibility,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub image_id: u32,
    pub origin: Origin,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub id: usize,
    pub bbox: Box2,
    pub assignments: Vec<Assignment>,
}

impl Partition {
    pub fn image_ids(&self) -> BTreeSet<u32> {
        self.assignments.iter().map(|a| a.image_id).collect()
    }

    pub fn image_count(&self) -> usize {
        self.assignments.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibilityScore {
    pub image_id: u32,
    pub partition_id: usize,
    pub v_total: f64,
    pub v_in: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub partitions: Vec<Partition>,
    pub ground_axes: GroundAxes,
    pub bounds: Box2,
    pub visibility_threshold: f64,
    pub target_size: f64,
    /// False when rebalancing stopped at its iteration cap or could not act.
    pub balanced: bool,
}

impl PartitionPlan {
    pub fn pair_count(&self) -> usize {
        self.partitions.iter().map(Partition::image_count).sum()
    }

    pub fn partition(&self, id: usize) -> Option<&Partition> {
        self.partitions.iter().find(|p| p.id == id)
    }

    /// True when `p` lies in `part`, using half-open cells except on the outer
    /// scene boundary, so interior points land in exactly one partition.
    pub fn locates(&self, part: &Partition, p: [f64; 2]) -> bool {
        (0..2).all(|k| {
            let b = &part.bbox;
            p[k] >= b.min[k] && (p[k] < b.max[k] || (p[k] == b.max[k] && b.max[k] >= self.bounds.max[k]))
        })
    }
}

/// Per-image data reused across partitions.
struct ImageView {
    id: u32,
    center: [f64; 2],
    v_total: f64,
    /// (ground position of linked 3D point, 2D feature position)
    features: Vec<([f64; 2], [f64; 2])>,
}

fn image_view(img: &ImageRecord, model: &SfmModel, axes: GroundAxes) -> Result<ImageView> {
    let intr = model.camera_for(img)?;
    let pose = img.pose();
    let projected: Vec<[f64; 2]> = model
        .points
        .values()
        .filter_map(|p| project_point(intr, &pose, &p.position()))
        .filter(|q| q.u >= 0.0 && q.v >= 0.0 && q.u <= intr.width as f64 && q.v <= intr.height as f64)
        .map(|q| [q.u, q.v])
        .collect();
    let features = img
        .features
        .iter()
        .filter_map(|f| {
            let p = model.points.get(&f.point3d_id?)?;
            Some((axes.project_slice(&p.position), f.xy))
        })
        .collect();
    Ok(ImageView {
        id: img.id,
        center: axes.project(&pose.center()),
        v_total: convex_hull_area(&projected),
        features,
    })
}

fn score(view: &ImageView, part: &Partition) -> VisibilityScore {
    let inside: Vec<[f64; 2]> = view
        .features
        .iter()
        .filter(|(g, _)| part.bbox.contains(*g))
        .map(|(_, xy)| *xy)
        .collect();
    let v_in = convex_hull_area(&inside);
    let ratio = if view.v_total > 0.0 {
        (v_in / view.v_total).clamp(0.0, 1.0)
    } else {
        0.0
    };
    VisibilityScore {
        image_id: view.id,
        partition_id: part.id,
        v_total: view.v_total,
        v_in: v_in.min(view.v_total),
        ratio,
    }
}

/// Point-based visibility of `part` from `img`: hull area of the image's own
/// feature points whose 3D points fall in the partition, over the hull area
/// of the whole cloud projected into the image frame.
pub fn point_visibility(img: &ImageRecord, part: &Partition, model: &SfmModel, axes: GroundAxes) -> Result<VisibilityScore> {
    Ok(score(&image_view(img, model, axes)?, part))
}

struct Divider {
    views: Vec<ImageView>,
    threshold: f64,
}

impl Divider {
    fn new(model: &SfmModel, axes: GroundAxes, threshold: f64) -> Result<Self> {
        let views = model
            .images
            .values()
            .map(|img| image_view(img, model, axes))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { views, threshold })
    }

    fn assign(&self, plan: &PartitionPlan, part: &mut Partition) {
        part.assignments.clear();
        for view in &self.views {
            let s = score(view, part);
            if plan.locates(part, view.center) {
                part.assignments.push(Assignment {
                    image_id: view.id,
                    origin: Origin::Location,
                    ratio: s.ratio,
                });
            } else if s.ratio > self.threshold {
                part.assignments.push(Assignment {
                    image_id: view.id,
                    origin: Origin::Visibility,
                    ratio: s.ratio,
                });
            }
        }
    }
}

fn camera_centers(model: &SfmModel) -> Vec<Vector3<f64>> {
    model.images.values().map(|img| img.pose().center()).collect()
}

/// Ground axes and partition grid over the camera footprint.
fn grid(model: &SfmModel, target_size: f64) -> Result<(GroundAxes, Box2, Vec<Box2>)> {
    if model.images.is_empty() {
        return Err(Error::Division("model has no images".into()));
    }
    if model.points.len() < 3 {
        return Err(Error::Division("model needs at least 3 points".into()));
    }
    if !(target_size > 0.0) {
        return Err(Error::Argument(format!("target size must be positive, got {target_size}")));
    }
    let centers = camera_centers(model);
    let coincident = centers.iter().all(|c| (c - centers[0]).norm() <= 1e-12);
    if coincident && centers.len() > 1 {
        return Err(Error::Division("all cameras are coincident".into()));
    }
    let axes = if coincident {
        let pts: Vec<Vector3<f64>> = model.points.values().map(|p| p.position()).collect();
        GroundAxes::from_variance(&pts)
    } else {
        GroundAxes::from_variance(&centers)
    };
    let ground: Vec<[f64; 2]> = centers.iter().map(|c| axes.project(c)).collect();
    let mut bounds = Box2::from_points(&ground).expect("at least one image");
    for k in 0..2 {
        if bounds.extent(k) <= 0.0 {
            bounds.min[k] -= 0.5 * target_size;
            bounds.max[k] += 0.5 * target_size;
        }
    }
    // rounding noise in the footprint must not add a sliver row
    let n = [0, 1].map(|k| ((bounds.extent(k) / target_size * (1.0 - 1e-9)).ceil() as usize).max(1));
    let step = [0, 1].map(|k| bounds.extent(k) / n[k] as f64);
    let mut cells = Vec::with_capacity(n[0] * n[1]);
    for j in 0..n[1] {
        for i in 0..n[0] {
            let min = [bounds.min[0] + i as f64 * step[0], bounds.min[1] + j as f64 * step[1]];
            let max = [
                if i + 1 == n[0] { bounds.max[0] } else { bounds.min[0] + (i + 1) as f64 * step[0] },
                if j + 1 == n[1] { bounds.max[1] } else { bounds.min[1] + (j + 1) as f64 * step[1] },
            ];
            cells.push(Box2::new(min, max));
        }
    }
    Ok((axes, bounds, cells))
}

/// Grid division with location assignment plus visibility-based extras.
pub fn divide(model: &SfmModel, target_size: f64, threshold: f64) -> Result<PartitionPlan> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Argument(format!("visibility threshold {threshold} not in (0, 1]")));
    }
    let (axes, bounds, cells) = grid(model, target_size)?;
    let divider = Divider::new(model, axes, threshold)?;
    let mut plan = PartitionPlan {
        partitions: Vec::new(),
        ground_axes: axes,
        bounds,
        visibility_threshold: threshold,
        target_size,
        balanced: true,
    };
    let mut partitions: Vec<Partition> = cells
        .into_iter()
        .enumerate()
        .map(|(id, bbox)| Partition {
            id,
            bbox,
            assignments: Vec::new(),
        })
        .collect();
    for part in &mut partitions {
        divider.assign(&plan, part);
    }
    plan.partitions = partitions;
    Ok(plan)
}

/// Location-only baseline: each cell's box is enlarged by `expansion` (0.5 for
/// the 50% rule) and every camera inside the enlarged box is assigned.
pub fn divide_expanded_bbox(model: &SfmModel, target_size: f64, expansion: f64) -> Result<PartitionPlan> {
    let (axes, bounds, cells) = grid(model, target_size)?;
    let centers: Vec<(u32, [f64; 2])> = model
        .images
        .values()
        .map(|img| (img.id, axes.project(&img.pose().center())))
        .collect();
    let partitions = cells
        .into_iter()
        .enumerate()
        .map(|(id, bbox)| {
            let grown = bbox.expanded(expansion);
            let assignments = centers
                .iter()
                .filter(|(_, c)| grown.contains(*c))
                .map(|(image_id, _)| Assignment {
                    image_id: *image_id,
                    origin: Origin::Location,
                    ratio: f64::NAN,
                })
                .collect();
            Partition { id, bbox, assignments }
        })
        .collect();
    Ok(PartitionPlan {
        partitions,
        ground_axes: axes,
        bounds,
        visibility_threshold: 0.0,
        target_size,
        balanced: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RebalanceConfig {
    pub min_images: usize,
    pub max_images: usize,
    pub max_iterations: usize,
}

impl RebalanceConfig {
    /// `[0.5 · median, 2 · median]` images per partition.
    pub fn from_median(plan: &PartitionPlan) -> Self {
        let mut counts: Vec<usize> = plan.partitions.iter().map(Partition::image_count).collect();
        counts.sort_unstable();
        let median = if counts.is_empty() {
            0.0
        } else if counts.len() % 2 == 1 {
            counts[counts.len() / 2] as f64
        } else {
            0.5 * (counts[counts.len() / 2 - 1] + counts[counts.len() / 2]) as f64
        };
        let min_images = (0.5 * median).floor() as usize;
        let max_images = ((2.0 * median).ceil() as usize).max(min_images + 1);
        Self {
            min_images,
            max_images,
            max_iterations: 32,
        }
    }
}

/// Merges under-populated partitions into a neighbor and bisects
/// over-populated ones until every count is within bounds or nothing changes.
pub fn rebalance(model: &SfmModel, plan: &PartitionPlan, cfg: RebalanceConfig) -> Result<PartitionPlan> {
    if cfg.min_images >= cfg.max_images {
        return Err(Error::Argument(format!(
            "min_images {} must be below max_images {}",
            cfg.min_images, cfg.max_images
        )));
    }
    let divider = Divider::new(model, plan.ground_axes, plan.visibility_threshold)?;
    let mut plan = plan.clone();
    let mut next_id = plan.partitions.iter().map(|p| p.id + 1).max().unwrap_or(0);
    let in_bounds = |p: &Partition| (cfg.min_images..=cfg.max_images).contains(&p.image_count());

    for _ in 0..cfg.max_iterations {
        if plan.partitions.iter().all(in_bounds) {
            plan.balanced = true;
            return Ok(plan);
        }
        if !merge_smallest(&mut plan, &divider, cfg.min_images, &mut next_id)
            && !split_largest(&mut plan, &divider, cfg.max_images, &mut next_id)
        {
            plan.balanced = false;
            return Ok(plan);
        }
    }
    plan.balanced = plan.partitions.iter().all(in_bounds);
    if !plan.balanced {
        log::warn!("rebalancing hit its iteration cap of {}", cfg.max_iterations);
    }
    Ok(plan)
}

fn merge_smallest(plan: &mut PartitionPlan, divider: &Divider, min_images: usize, next_id: &mut usize) -> bool {
    let mut small: Vec<&Partition> = plan
        .partitions
        .iter()
        .filter(|p| p.image_count() < min_images)
        .collect();
    small.sort_by_key(|p| (p.image_count(), p.id));
    for part in small {
        let neighbor = plan
            .partitions
            .iter()
            .filter(|n| n.id != part.id && part.bbox.merges_exactly(&n.bbox))
            .min_by(|a, b| {
                let ea = part.bbox.shared_edge(&a.bbox);
                let eb = part.bbox.shared_edge(&b.bbox);
                eb.partial_cmp(&ea)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.image_count().cmp(&b.image_count()))
                    .then(a.id.cmp(&b.id))
            });
        if let Some(neighbor) = neighbor {
            let (a, b) = (part.id, neighbor.id);
            let bbox = part.bbox.union(&neighbor.bbox);
            let mut merged = Partition {
                id: *next_id,
                bbox,
                assignments: Vec::new(),
            };
            *next_id += 1;
            divider.assign(plan, &mut merged);
            let pos = plan.partitions.iter().position(|p| p.id == a.min(b)).unwrap_or(0);
            plan.partitions.retain(|p| p.id != a && p.id != b);
            plan.partitions.insert(pos.min(plan.partitions.len()), merged);
            return true;
        }
    }
    false
}

fn split_largest(plan: &mut PartitionPlan, divider: &Divider, max_images: usize, next_id: &mut usize) -> bool {
    let Some(pos) = plan
        .partitions
        .iter()
        .enumerate()
        .filter(|(_, p)| p.image_count() > max_images)
        .max_by(|(_, a), (_, b)| a.image_count().cmp(&b.image_count()).then(b.id.cmp(&a.id)))
        .map(|(i, _)| i)
    else {
        return false;
    };
    let (lo, hi) = plan.partitions[pos].bbox.split();
    let mut children = [lo, hi].map(|bbox| {
        let p = Partition {
            id: *next_id,
            bbox,
            assignments: Vec::new(),
        };
        *next_id += 1;
        p
    });
    plan.partitions.remove(pos);
    for child in &mut children {
        divider.assign(plan, child);
    }
    let [a, b] = children;
    plan.partitions.insert(pos, b);
    plan.partitions.insert(pos, a);
    true
}

/// Histogram of visibility ratios over all (image, partition) pairs of `plan`.
pub fn visibility_histogram(plan: &PartitionPlan, bins: usize) -> Vec<usize> {
    let mut hist = vec![0; bins.max(1)];
    for a in plan.partitions.iter().flat_map(|p| &p.assignments) {
        if a.ratio.is_finite() {
            let b = ((a.ratio * bins as f64) as usize).min(bins - 1);
            hist[b] += 1;
        }
    }
    hist
}

/// Per partition: assigned images whose visibility ratio exceeds the plan's
/// threshold.
pub fn high_visibility_counts(plan: &PartitionPlan) -> Vec<(usize, usize)> {
    plan.partitions
        .iter()
        .map(|p| {
            let n = p
                .assignments
                .iter()
                .filter(|a| a.ratio.is_finite() && a.ratio > plan.visibility_threshold)
                .count();
            (p.id, n)
        })
        .collect()
}

/// Image ids per partition id, for quick lookups.
pub fn assignment_map(plan: &PartitionPlan) -> BTreeMap<usize, BTreeSet<u32>> {
    plan.partitions.iter().map(|p| (p.id, p.image_ids())).collect()
}

#[cfg(test)]
mod tests;
