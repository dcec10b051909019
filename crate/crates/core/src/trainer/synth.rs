//! Synthetic scenes with exact ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::error::Result;
use crate::sfm::{write_colmap_binary, write_colmap_text, write_depth, CameraIntrinsics, DepthMap, ImageRecord, Point3D, Pose, SfmModel};
use crate::splat::{
    logit, project_gaussians_with, render, save_png, Camera, Gaussian, GaussianSet, Image, ProjectOptions,
    RenderOptions,
};

/// Color offset of the second appearance variant.
pub const VARIANT_SHIFT: f64 = 0.2;
/// Ground-truth depth is written where accumulated α exceeds this.
pub const DEPTH_VALID_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub gaussians: usize,
    pub cameras: usize,
    pub width: u32,
    pub height: u32,
    /// 1, or 2 for alternating color-shifted images.
    pub variants: usize,
    /// Half-size of the cube holding the Gaussian centers (height is 0.3 of it).
    pub half_extent: f64,
    pub ring_radius: f64,
    pub ring_height: f64,
    pub focal: f64,
    /// Every n-th camera is held out for testing; 0 holds out none.
    pub test_every: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gaussians: 25,
            cameras: 24,
            width: 64,
            height: 64,
            variants: 1,
            half_extent: 1.0,
            ring_radius: 4.0,
            ring_height: 2.0,
            focal: 70.0,
            test_every: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthView {
    pub image_id: u32,
    pub name: String,
    pub variant: usize,
    pub camera: Camera,
    pub image: Image,
    pub depth: DepthMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub config: SynthConfig,
    pub gt: GaussianSet,
    pub model: SfmModel,
    pub views: Vec<SynthView>,
    pub test_ids: Vec<u32>,
}

impl SyntheticScene {
    pub fn train_views(&self) -> impl Iterator<Item = &SynthView> {
        self.views.iter().filter(|v| !self.test_ids.contains(&v.image_id))
    }

    pub fn test_views(&self) -> impl Iterator<Item = &SynthView> {
        self.views.iter().filter(|v| self.test_ids.contains(&v.image_id))
    }
}

/// Descriptor written next to the emitted files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub config: SynthConfig,
    pub test_images: Vec<String>,
    pub variants: BTreeMap<String, usize>,
}

pub const DATASET_INFO: &str = "dataset.json";

fn variant_colors(set: &GaussianSet, variant: usize) -> Vec<[f64; 3]> {
    set.color
        .iter()
        .map(|c| c.map(|v| (v + VARIANT_SHIFT * variant as f64).clamp(0.0, 1.0)))
        .collect()
}

/// Renders `set` with the given colors; returns the image and the α-normalized
/// depth, valid where coverage exceeds [`DEPTH_VALID_ALPHA`].
pub fn render_truth(set: &GaussianSet, colors: &[[f64; 3]], cam: &Camera) -> Result<(Image, DepthMap)> {
    let splats = project_gaussians_with(set, colors, &set.opacities(), cam, ProjectOptions::default());
    let out = render(&splats, cam.width(), cam.height(), &RenderOptions::default())?;
    let values = out
        .depth
        .iter()
        .zip(&out.alpha)
        .map(|(d, a)| if *a > DEPTH_VALID_ALPHA { d / a } else { f64::NAN })
        .collect();
    Ok((out.rgb, DepthMap::new(cam.width(), cam.height(), values)))
}

pub fn make_synthetic(cfg: &SynthConfig) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gt = GaussianSet::new(0);
    let e = cfg.half_extent;
    for _ in 0..cfg.gaussians.max(1) {
        let mu = if cfg.gaussians <= 1 {
            [0.0; 3]
        } else {
            [rng.gen_range(-e..e), rng.gen_range(-e..e), rng.gen_range(-0.3 * e..0.3 * e)]
        };
        let mut g = Gaussian::isotropic(mu, 1.0, 0.5, [0.0; 3]);
        g.log_scale = [0; 3].map(|_| (e * rng.gen_range(0.08..0.2f64)).ln());
        let q: [f64; 4] = [1.0, rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        g.rot = q.map(|v| v / n);
        g.opacity_logit = logit(if cfg.gaussians <= 1 { 0.95 } else { rng.gen_range(0.6..0.95) });
        g.color = [0; 3].map(|_| rng.gen_range(0.1..0.7));
        gt.push(g);
    }

    let mut model = SfmModel::default();
    let (w, h) = (cfg.width, cfg.height);
    model.cameras.insert(
        1,
        CameraIntrinsics::pinhole(w, h, cfg.focal, cfg.focal, w as f64 / 2.0, h as f64 / 2.0),
    );
    for k in 0..cfg.cameras.max(1) {
        let theta = std::f64::consts::TAU * k as f64 / cfg.cameras.max(1) as f64;
        let eye = Vector3::new(cfg.ring_radius * theta.cos(), cfg.ring_radius * theta.sin(), cfg.ring_height);
        let pose = Pose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0));
        let id = k as u32 + 1;
        model.images.insert(
            id,
            ImageRecord {
                id,
                name: format!("img_{k:03}.png"),
                qvec: pose.qvec(),
                tvec: pose.tvec(),
                camera_id: 1,
                features: Vec::new(),
            },
        );
    }
    // Like triangulated points, colors average over the images that see them.
    let n_images = cfg.cameras.max(1);
    let per_variant: Vec<(usize, Vec<[f64; 3]>)> = (0..cfg.variants.clamp(1, 2))
        .map(|v| ((0..n_images).filter(|k| k % cfg.variants.clamp(1, 2) == v).count(), variant_colors(&gt, v)))
        .collect();
    for i in 0..gt.len() {
        let id = i as u64 + 1;
        let mut color = [0.0; 3];
        for (count, colors) in &per_variant {
            for c in 0..3 {
                color[c] += colors[i][c] * *count as f64 / n_images as f64;
            }
        }
        model.points.insert(
            id,
            Point3D {
                id,
                position: gt.mu[i],
                color: color.map(|v| (v * 255.0).round() as u8),
                error: 0.0,
                track: Vec::new(),
            },
        );
    }
    model.link_visible_points(|_, _| true);

    let intr = model.cameras[&1].clone();
    let mut views = Vec::new();
    let mut test_ids = Vec::new();
    for (k, img) in model.images.values().enumerate() {
        let variant = if cfg.variants >= 2 { k % 2 } else { 0 };
        let camera = Camera::new(intr.clone(), img.pose());
        let (image, depth) = render_truth(&gt, &variant_colors(&gt, variant), &camera)?;
        if cfg.test_every > 0 && k % cfg.test_every == cfg.test_every - 1 {
            test_ids.push(img.id);
        }
        views.push(SynthView {
            image_id: img.id,
            name: img.name.clone(),
            variant,
            camera,
            image,
            depth,
        });
    }
    Ok(SyntheticScene {
        config: *cfg,
        gt,
        model,
        views,
        test_ids,
    })
}

fn stem(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(s, _)| s)
}

/// Emits `images/`, `depths/`, `sparse/0` (binary), `sparse/text`,
/// `gt.ckpt` and `dataset.json` under `dir`.
pub fn write_synthetic(scene: &SyntheticScene, dir: &Path) -> Result<()> {
    for sub in ["images", "depths", "sparse/0", "sparse/text"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    write_colmap_binary(&scene.model, &dir.join("sparse/0"))?;
    write_colmap_text(&scene.model, &dir.join("sparse/text"))?;
    for v in &scene.views {
        save_png(&v.image, &dir.join("images").join(&v.name))?;
        write_depth(&v.depth, &dir.join("depths").join(format!("{}.depth", stem(&v.name))))?;
    }
    save_checkpoint(&dir.join("gt.ckpt"), &scene.gt, None)?;
    let info = DatasetInfo {
        config: scene.config,
        test_images: scene.test_views().map(|v| v.name.clone()).collect(),
        variants: scene.views.iter().map(|v| (v.name.clone(), v.variant)).collect(),
    };
    std::fs::write(dir.join(DATASET_INFO), serde_json::to_string_pretty(&info)? + "\n")?;
    Ok(())
}

/// Wall height of the occluder city.
pub const CITY_WALL: f64 = 1.5;
const CITY_CAMERA_HEIGHT: f64 = 2.0;

/// True when the segment from `a` to `b` passes below the top of a wall
/// standing on one of the interior grid lines `x, y ∈ {1, 2}` of a 3×3 block.
fn city_blocked(a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
    for axis in 0..2 {
        for wall in [1.0, 2.0] {
            let (pa, pb) = (a[axis] - wall, b[axis] - wall);
            if pa * pb >= 0.0 {
                continue;
            }
            let t = pa / (pa - pb);
            let z = a.z + t * (b.z - a.z);
            if z < CITY_WALL {
                return true;
            }
        }
    }
    false
}

/// Nadir cameras on a 13×13 grid over a 3×3 block of unit cells separated by
/// walls, with a ground point cloud on a 0.1 grid. Tracks respect the walls.
pub fn occluder_city() -> SfmModel {
    let reach = 0.5;
    let f = 32.0 * CITY_CAMERA_HEIGHT / reach;
    let mut model = SfmModel::default();
    model.cameras.insert(1, CameraIntrinsics::pinhole(64, 64, f, f, 32.0, 32.0));
    let mut id = 0u32;
    for j in 0..13 {
        for i in 0..13 {
            id += 1;
            let (x, y) = (0.25 * i as f64, 0.25 * j as f64);
            let eye = Vector3::new(x, y, CITY_CAMERA_HEIGHT);
            let pose = Pose::look_at(eye, Vector3::new(x, y, 0.0), Vector3::new(0.0, 1.0, 0.0));
            model.images.insert(
                id,
                ImageRecord {
                    id,
                    name: format!("city_{id:03}.png"),
                    qvec: pose.qvec(),
                    tvec: pose.tvec(),
                    camera_id: 1,
                    features: Vec::new(),
                },
            );
        }
    }
    let mut pid = 0u64;
    for j in 0..=30 {
        for i in 0..=30 {
            pid += 1;
            // nudged off the wall lines
            let p = [0.1 * i as f64 + 0.013, 0.1 * j as f64 + 0.007, 0.0];
            model.points.insert(
                pid,
                Point3D {
                    id: pid,
                    position: p,
                    color: [128; 3],
                    error: 0.0,
                    track: Vec::new(),
                },
            );
        }
    }
    model.link_visible_points(|c, p| !city_blocked(c, p));
    model
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_centered_blob_is_seen_by_every_camera() {
        let cfg = SynthConfig {
            gaussians: 1,
            cameras: 6,
            width: 32,
            height: 32,
            focal: 35.0,
            ..Default::default()
        };
        let scene = make_synthetic(&cfg).unwrap();
        scene.model.validate().unwrap();
        for v in &scene.views {
            let center = v.image.at(16, 16, 0);
            assert!(center > 0.1, "{}", v.name);
            assert!(v.image.at(0, 0, 0) < 0.01);
        }
        assert!(scene.model.points[&1].track.len() == 6);
    }

    #[test]
    fn peak_depth_matches_center_depth() {
        let cfg = SynthConfig {
            gaussians: 1,
            cameras: 4,
            width: 32,
            height: 32,
            focal: 35.0,
            ..Default::default()
        };
        let scene = make_synthetic(&cfg).unwrap();
        for v in &scene.views {
            let truth = v.camera.pose.to_camera(&Vector3::zeros()).z;
            let d = v.depth.get(16, 16).unwrap();
            assert!((d - truth).abs() <= 0.05 * truth, "{d} vs {truth}");
        }
    }

    #[test]
    fn second_variant_is_shifted() {
        let cfg = SynthConfig {
            variants: 2,
            cameras: 4,
            ..Default::default()
        };
        let scene = make_synthetic(&cfg).unwrap();
        assert_eq!(scene.views.iter().map(|v| v.variant).collect::<Vec<_>>(), vec![0, 1, 0, 1]);
        assert!(scene.views[1].image.mean() > scene.views[0].image.mean());
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SynthConfig {
            cameras: 3,
            ..Default::default()
        };
        let (a, b) = (make_synthetic(&cfg).unwrap(), make_synthetic(&cfg).unwrap());
        // invalid depth is NaN, so compare bit patterns
        assert_eq!(a.gt, b.gt);
        for (va, vb) in a.views.iter().zip(&b.views) {
            assert_eq!(va.image, vb.image);
            let bits = |v: &SynthView| v.depth.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(va), bits(vb));
        }
    }

    #[test]
    fn walls_hide_neighbor_cells() {
        let model = occluder_city();
        model.validate().unwrap();
        // camera at (0.5, 0.5) sees nothing beyond x = 1
        let img = model.images.values().find(|i| {
            let c = i.pose().center();
            (c.x - 0.5).abs() < 1e-9 && (c.y - 0.5).abs() < 1e-9
        });
        let img = img.unwrap();
        assert!(!img.features.is_empty());
        for f in &img.features {
            let p = model.points[&f.point3d_id.unwrap()].position;
            assert!(p[0] < 1.0 && p[1] < 1.0);
        }
    }
}
