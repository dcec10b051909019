//! Scenes and datasets shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usk::sfm::{unproject_point, CameraIntrinsics, DepthMap, Feature, ImageRecord, Point3D, Pose, SfmModel};
use usk::checkpoint::Checkpoint;
use usk::lod::{LevelConfig, LevelSchedule, LodModel};
use usk::partition::{Box2, GroundAxes};
use usk::splat::{Camera, Gaussian, GaussianSet};
use usk::trainer::{
    load_dataset, make_synthetic, train_partition, write_synthetic, Dataset, DatasetOptions, DensifySettings,
    PartitionData, SynthConfig, TrainConfig, TrainOutput,
};

/// Writes `cfg` as a synthetic dataset under `dir` and loads it back with
/// its depth maps.
pub fn synthetic_dataset(cfg: &SynthConfig, dir: &Path) -> Dataset {
    let scene = make_synthetic(cfg).unwrap();
    write_synthetic(&scene, dir).unwrap();
    load_dataset(
        dir,
        &DatasetOptions {
            depth_dir: Some(dir.join("depths")),
            mask_dir: None,
        },
    )
    .unwrap()
}

/// A 32×32 ring of 8 cameras around 12 Gaussians.
pub fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        gaussians: 12,
        cameras: 8,
        width: 32,
        height: 32,
        focal: 35.0,
        test_every: 0,
        ..Default::default()
    }
}

/// One camera at the origin with 40 linked points on distinct pixels whose
/// predicted depth is `(z − b) / a`.
pub fn planted_depth(a: f64, b: f64, seed: u64) -> (SfmModel, DepthMap, Vec<(f64, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = CameraIntrinsics::pinhole(64, 64, 50.0, 50.0, 32.0, 32.0);
    let pose = Pose::identity();
    let mut model = SfmModel::default();
    model.cameras.insert(1, intr.clone());
    let mut values = vec![1.0; 64 * 64];
    let mut features = Vec::new();
    let mut pairs = Vec::new();
    let mut used = std::collections::BTreeSet::new();
    while features.len() < 40 {
        let (x, y) = (rng.gen_range(0..64u32), rng.gen_range(0..64u32));
        if !used.insert((x, y)) {
            continue;
        }
        let z = rng.gen_range(2.0..6.0);
        let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
        let p = unproject_point(&intr, &pose, u, v, z);
        let id = features.len() as u64 + 1;
        model.points.insert(
            id,
            Point3D {
                id,
                position: [p.x, p.y, p.z],
                color: [0; 3],
                error: 0.0,
                track: Vec::new(),
            },
        );
        features.push(Feature {
            xy: [u, v],
            point3d_id: Some(id),
        });
        let pred = (z - b) / a;
        values[(y * 64 + x) as usize] = pred;
        pairs.push((pred, z));
    }
    model.images.insert(
        1,
        ImageRecord {
            id: 1,
            name: "a.png".into(),
            qvec: pose.qvec(),
            tvec: pose.tvec(),
            camera_id: 1,
            features,
        },
    );
    model.rebuild_tracks();
    (model, DepthMap::new(64, 64, values), pairs)
}


/// 1 to 3 levels with increasing budgets, decreasing densification
/// intervals, increasing resolution and short runs.
pub fn random_schedule(rng: &mut impl Rng) -> LevelSchedule {
    let n = rng.gen_range(1..=3);
    let mut budget = rng.gen_range(8..30);
    let mut intervals: Vec<usize> = rand::seq::index::sample(rng, 30, n).into_iter().map(|v| v + 1).collect();
    intervals.sort_unstable_by(|a, b| b.cmp(a));
    let mut levels = Vec::new();
    for (i, interval) in intervals.into_iter().enumerate() {
        levels.push(LevelConfig {
            budget,
            interval,
            downsample: 0.5f64.powi((n - 1 - i) as i32),
            iterations: rng.gen_range(20..80),
            tau_min: None,
            abs_grad: rng.gen_bool(0.3),
        });
        budget += rng.gen_range(5..40);
    }
    LevelSchedule {
        levels,
        images_per_scale: 600,
    }
}

/// Trains one whole-scene partition under `schedule` with a near-zero
/// gradient threshold, so densification always wants to outgrow the budget.
pub fn budget_run(ds: &Dataset, schedule: LevelSchedule, seed: u64) -> usk::Result<TrainOutput> {
    let cfg = TrainConfig {
        seed,
        schedule,
        appearance: false,
        densify: DensifySettings {
            tau_min: 1e-9,
            opacity_reset_every: 3,
            ..Default::default()
        },
        ..Default::default()
    };
    train_partition(&PartitionData::whole(ds)?, &cfg)
}

/// 300 small, randomly oriented Gaussians spread over a 4×4 plane seen
/// head-on by a 128×128 camera.
pub fn spread_scene(seed: u64) -> (GaussianSet, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = GaussianSet::new(0);
    for _ in 0..300 {
        let mut q = [0.0; 4];
        q.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        set.push(Gaussian {
            mu: [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-0.2..0.2)],
            rot: q,
            log_scale: [
                rng.gen_range(0.01f64..0.08).ln(),
                rng.gen_range(0.01f64..0.08).ln(),
                rng.gen_range(0.01f64..0.08).ln(),
            ],
            opacity_logit: usk::splat::logit(rng.gen_range(0.2..0.95)),
            color: [rng.gen(), rng.gen(), rng.gen()],
            embedding: Vec::new(),
        });
    }
    let pose = Pose::look_at(Vector3::new(0.0, 0.0, -5.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0));
    let cam = Camera::new(CameraIntrinsics::pinhole(128, 128, 140.0, 140.0, 64.0, 64.0), pose);
    (set, cam)
}

/// Four partitions of 20 Gaussians on a ground plane (z up) around the
/// origin, and a camera at the origin looking along +x with a 90° field of
/// view. Partitions 0 and 2 lie entirely behind it.
pub fn frustum_fixture() -> (LodModel, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cells = [
        Box2::new([-6.0, -3.0], [-2.0, 0.0]),
        Box2::new([2.0, -3.0], [6.0, 0.0]),
        Box2::new([-6.0, 0.0], [-2.0, 3.0]),
        Box2::new([2.0, 0.0], [6.0, 3.0]),
    ];
    let schedule = LevelSchedule::geometric(2, 40);
    let parts = cells
        .iter()
        .enumerate()
        .map(|(id, b)| {
            let levels = (0..2)
                .map(|_| {
                    let mut set = GaussianSet::new(0);
                    for _ in 0..20 {
                        let p = [rng.gen_range(b.min[0]..b.max[0]), rng.gen_range(b.min[1]..b.max[1]), 0.0];
                        set.push(Gaussian::isotropic(p, 0.05, 0.8, [0.5; 3]));
                    }
                    Checkpoint { set, appearance: None }
                })
                .collect();
            (id, *b, levels)
        })
        .collect();
    let model = LodModel::new(
        GroundAxes([0, 1]),
        Box2::new([-6.0, -3.0], [6.0, 3.0]),
        schedule,
        vec![4.0],
        parts,
    )
    .unwrap();
    let pose = Pose::look_at(Vector3::new(0.0, 0.0, 0.5), Vector3::new(1.0, 0.0, 0.5), Vector3::new(0.0, 0.0, 1.0));
    let cam = Camera::new(CameraIntrinsics::pinhole(64, 64, 32.0, 32.0, 32.0, 32.0), pose);
    (model, cam)
}

/// Default synthetic scene with two alternating appearance variants and
/// every third camera held out, so both variants are tested. Returns the
/// variant of every image id as well.
pub fn two_variant_dataset(seed: u64, dir: &Path) -> (Dataset, std::collections::BTreeMap<u32, usize>) {
    let cfg = SynthConfig {
        seed,
        variants: 2,
        test_every: 3,
        ..Default::default()
    };
    let variants = make_synthetic(&cfg)
        .unwrap()
        .views
        .iter()
        .map(|v| (v.image_id, v.variant))
        .collect();
    (synthetic_dataset(&cfg, dir), variants)
}
