use super::*;
use crate::sfm::{CameraIntrinsics, Point3D, Pose};

const HEIGHT: f64 = 2.0;

/// Downward-looking cameras at `positions` (ground x, y) seeing a disc of
/// radius `reach` on a dense ground grid covering `extent`.
fn nadir_model(positions: &[[f64; 2]], reach: f64, extent: [f64; 2]) -> SfmModel {
    let f = 32.0 * HEIGHT / reach;
    let mut model = SfmModel::default();
    model.cameras.insert(1, CameraIntrinsics::pinhole(64, 64, f, f, 32.0, 32.0));
    for (i, p) in positions.iter().enumerate() {
        let eye = Vector3::new(p[0], p[1], HEIGHT);
        let pose = Pose::look_at(eye, Vector3::new(p[0], p[1], 0.0), Vector3::new(0.0, 1.0, 0.0));
        let id = i as u32 + 1;
        model.images.insert(
            id,
            ImageRecord {
                id,
                name: format!("img{id:03}.png"),
                qvec: pose.qvec(),
                tvec: pose.tvec(),
                camera_id: 1,
                features: Vec::new(),
            },
        );
    }
    let step = 0.1;
    let (nx, ny) = ((extent[0] / step) as usize, (extent[1] / step) as usize);
    for j in 0..=ny {
        for i in 0..=nx {
            let id = (j * (nx + 1) + i) as u64 + 1;
            model.points.insert(
                id,
                Point3D {
                    id,
                    position: [i as f64 * step + 0.013, j as f64 * step + 0.007, 0.0],
                    color: [128; 3],
                    error: 0.0,
                    track: Vec::new(),
                },
            );
        }
    }
    model.link_visible_points(|_, _| true);
    model
}

fn manual_plan(cells: &[Box2]) -> PartitionPlan {
    let bounds = cells.iter().skip(1).fold(cells[0], |a, b| a.union(b));
    PartitionPlan {
        partitions: cells
            .iter()
            .enumerate()
            .map(|(id, bbox)| Partition {
                id,
                bbox: *bbox,
                assignments: Vec::new(),
            })
            .collect(),
        ground_axes: GroundAxes([0, 1]),
        bounds,
        visibility_threshold: DEFAULT_VISIBILITY_THRESHOLD,
        target_size: 1.0,
        balanced: true,
    }
}

fn assigned(model: &SfmModel, mut plan: PartitionPlan) -> PartitionPlan {
    let div = Divider::new(model, plan.ground_axes, plan.visibility_threshold).unwrap();
    let mut parts = plan.partitions.clone();
    for p in &mut parts {
        div.assign(&plan, p);
    }
    plan.partitions = parts;
    plan
}

fn assert_tiles(plan: &PartitionPlan) {
    let total: f64 = plan.partitions.iter().map(|p| p.bbox.area()).sum();
    assert!((total - plan.bounds.area()).abs() < 1e-9 * plan.bounds.area());
    for (i, a) in plan.partitions.iter().enumerate() {
        for b in &plan.partitions[i + 1..] {
            let w = a.bbox.max[0].min(b.bbox.max[0]) - a.bbox.min[0].max(b.bbox.min[0]);
            let h = a.bbox.max[1].min(b.bbox.max[1]) - a.bbox.min[1].max(b.bbox.min[1]);
            assert!(w <= 1e-12 || h <= 1e-12, "{:?} overlaps {:?}", a.bbox, b.bbox);
        }
    }
}

#[test]
fn single_camera_gives_single_partition() {
    let model = nadir_model(&[[1.0, 1.0]], 0.5, [2.0, 2.0]);
    let plan = divide(&model, 10.0, DEFAULT_VISIBILITY_THRESHOLD).unwrap();
    assert_eq!(plan.partitions.len(), 1);
    assert_eq!(plan.partitions[0].image_ids(), BTreeSet::from([1]));
    assert_eq!(plan.partitions[0].assignments[0].origin, Origin::Location);
}

#[test]
fn coincident_cameras_are_rejected() {
    let model = nadir_model(&[[1.0, 1.0], [1.0, 1.0]], 0.5, [2.0, 2.0]);
    assert!(matches!(divide(&model, 1.0, 0.5), Err(Error::Division(_))));
}

#[test]
fn every_image_located_exactly_once() {
    let positions: Vec<[f64; 2]> = (0..25).map(|i| [0.3 + (i % 5) as f64 * 0.8, 0.2 + (i / 5) as f64 * 0.9]).collect();
    let model = nadir_model(&positions, 0.6, [4.0, 4.0]);
    let plan = divide(&model, 1.1, DEFAULT_VISIBILITY_THRESHOLD).unwrap();
    assert_eq!(plan.ground_axes, GroundAxes([0, 1]));
    assert_tiles(&plan);
    for id in model.images.keys() {
        let located = plan
            .partitions
            .iter()
            .flat_map(|p| &p.assignments)
            .filter(|a| a.image_id == *id && a.origin == Origin::Location)
            .count();
        assert_eq!(located, 1, "image {id}");
    }
    for a in plan.partitions.iter().flat_map(|p| &p.assignments) {
        assert!((0.0..=1.0).contains(&a.ratio));
        if a.origin == Origin::Visibility {
            assert!(a.ratio > DEFAULT_VISIBILITY_THRESHOLD);
        }
    }
}

#[test]
fn full_and_empty_visibility() {
    let model = nadir_model(&[[1.0, 1.0]], 0.5, [2.0, 2.0]);
    let img = &model.images[&1];
    let everything = Partition {
        id: 0,
        bbox: Box2::new([-5.0, -5.0], [5.0, 5.0]),
        assignments: Vec::new(),
    };
    let s = point_visibility(img, &everything, &model, GroundAxes([0, 1])).unwrap();
    assert!((s.ratio - 1.0).abs() < 1e-12);
    assert!(s.v_total > 0.0);
    let elsewhere = Partition {
        bbox: Box2::new([3.0, 3.0], [4.0, 4.0]),
        ..everything
    };
    let s = point_visibility(img, &elsewhere, &model, GroundAxes([0, 1])).unwrap();
    assert_eq!(s.ratio, 0.0);
    assert_eq!(s.v_in, 0.0);
}

#[test]
fn enlarging_a_box_never_lowers_v_in() {
    let model = nadir_model(&[[1.0, 1.0]], 0.7, [2.0, 2.0]);
    let img = &model.images[&1];
    let mut prev = 0.0;
    for k in 0..20 {
        let r = 0.05 * k as f64;
        let part = Partition {
            id: 0,
            bbox: Box2::new([0.8 - r, 0.9 - r], [1.0 + r, 1.1 + 0.5 * r]),
            assignments: Vec::new(),
        };
        let s = point_visibility(img, &part, &model, GroundAxes([0, 1])).unwrap();
        assert!(s.v_in >= prev - 1e-12);
        assert!(s.v_in <= s.v_total);
        prev = s.v_in;
    }
}

#[test]
fn rebalance_keeps_balanced_plans() {
    let positions: Vec<[f64; 2]> = (0..8).map(|i| [0.5 + i as f64, 0.5]).collect();
    let model = nadir_model(&positions, 0.3, [8.0, 1.0]);
    let plan = assigned(
        &model,
        manual_plan(&[Box2::new([0.0, 0.0], [4.0, 1.0]), Box2::new([4.0, 0.0], [8.0, 1.0])]),
    );
    let cfg = RebalanceConfig {
        min_images: 2,
        max_images: 6,
        max_iterations: 32,
    };
    assert_eq!(rebalance(&model, &plan, cfg).unwrap(), plan);
}

#[test]
fn empty_partition_merges_into_neighbor() {
    let positions: Vec<[f64; 2]> = (0..7).map(|i| [0.5 + i as f64 * 0.5, 0.5]).collect();
    let model = nadir_model(&positions, 0.3, [8.0, 1.0]);
    let plan = assigned(
        &model,
        manual_plan(&[Box2::new([0.0, 0.0], [4.0, 1.0]), Box2::new([4.0, 0.0], [8.0, 1.0])]),
    );
    assert_eq!(plan.partitions[1].image_count(), 0);
    let cfg = RebalanceConfig {
        min_images: 2,
        max_images: 20,
        max_iterations: 32,
    };
    let out = rebalance(&model, &plan, cfg).unwrap();
    assert!(out.balanced);
    assert_eq!(out.partitions.len(), 1);
    assert_eq!(out.partitions[0].bbox, plan.bounds);
    assert_eq!(out.partitions[0].image_count(), 7);
}

#[test]
fn crowded_partition_splits_along_long_axis() {
    let positions: Vec<[f64; 2]> = (0..16).map(|i| [0.5 + i as f64, 2.0]).collect();
    let model = nadir_model(&positions, 0.3, [16.0, 4.0]);
    let plan = assigned(&model, manual_plan(&[Box2::new([0.0, 0.0], [16.0, 4.0])]));
    let cfg = RebalanceConfig {
        min_images: 1,
        max_images: 4,
        max_iterations: 32,
    };
    let out = rebalance(&model, &plan, cfg).unwrap();
    assert!(out.balanced);
    assert_eq!(out.partitions.len(), 4);
    assert_tiles(&out);
    for p in &out.partitions {
        assert_eq!(p.image_count(), 4);
        assert_eq!(p.bbox.extent(0), 4.0);
        assert_eq!(p.bbox.extent(1), 4.0);
    }
}

#[test]
fn rebalance_never_drops_images() {
    let positions: Vec<[f64; 2]> = (0..30)
        .map(|i| [0.1 + (i * 37 % 100) as f64 * 0.05, 0.1 + (i * 61 % 100) as f64 * 0.03])
        .collect();
    let model = nadir_model(&positions, 0.4, [5.0, 3.2]);
    let plan = divide(&model, 1.0, DEFAULT_VISIBILITY_THRESHOLD).unwrap();
    let cfg = RebalanceConfig::from_median(&plan);
    let out = rebalance(&model, &plan, cfg).unwrap();
    assert_tiles(&out);
    let covered: BTreeSet<u32> = out.partitions.iter().flat_map(|p| p.image_ids()).collect();
    assert_eq!(covered, model.images.keys().copied().collect());
}

#[test]
fn inverted_bounds_are_rejected() {
    let model = nadir_model(&[[0.5, 0.5], [1.5, 0.5]], 0.3, [2.0, 1.0]);
    let plan = divide(&model, 1.0, DEFAULT_VISIBILITY_THRESHOLD).unwrap();
    let cfg = RebalanceConfig {
        min_images: 3,
        max_images: 3,
        max_iterations: 1,
    };
    assert!(matches!(rebalance(&model, &plan, cfg), Err(Error::Argument(_))));
}

#[test]
fn expanded_baseline_covers_location_plan() {
    let positions: Vec<[f64; 2]> = (0..16).map(|i| [0.25 + (i % 4) as f64, 0.25 + (i / 4) as f64]).collect();
    let model = nadir_model(&positions, 0.3, [4.0, 4.0]);
    let base = divide_expanded_bbox(&model, 1.0, 0.5).unwrap();
    let vis = divide(&model, 1.0, DEFAULT_VISIBILITY_THRESHOLD).unwrap();
    assert_eq!(base.partitions.len(), vis.partitions.len());
    for (b, v) in base.partitions.iter().zip(&vis.partitions) {
        for a in v.assignments.iter().filter(|a| a.origin == Origin::Location) {
            assert!(b.image_ids().contains(&a.image_id));
        }
    }
}

#[test]
fn manifest_roundtrip() {
    let positions: Vec<[f64; 2]> = (0..9).map(|i| [0.3 + (i % 3) as f64, 0.3 + (i / 3) as f64]).collect();
    let model = nadir_model(&positions, 0.6, [3.0, 3.0]);
    let plan = divide(&model, 1.0, DEFAULT_VISIBILITY_THRESHOLD).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plan.jsonl");
    write_plan(&plan, &model, &path).unwrap();
    let back = read_plan(&path).unwrap();
    assert_eq!(back, plan);
}

#[test]
fn histogram_counts_every_pair() {
    let positions: Vec<[f64; 2]> = (0..9).map(|i| [0.3 + (i % 3) as f64, 0.3 + (i / 3) as f64]).collect();
    let model = nadir_model(&positions, 0.6, [3.0, 3.0]);
    let plan = divide(&model, 1.0, DEFAULT_VISIBILITY_THRESHOLD).unwrap();
    let hist = visibility_histogram(&plan, 10);
    assert_eq!(hist.iter().sum::<usize>(), plan.pair_count());
}
