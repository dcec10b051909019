//! Sparse structure-from-motion models in COLMAP layout.
//!
//! Only `SIMPLE_PINHOLE` and `PINHOLE` cameras are accepted; anything with a
//! distortion term must be undistorted upstream.

mod colmap;
mod depth;

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub use colmap::{write_colmap_binary, write_colmap_text, ModelFormat};
pub use depth::{align_depth, read_depth, read_pfm, write_depth, write_pfm, DepthFit, DepthMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum CameraModelKind {
    SimplePinhole,
    Pinhole,
}

impl CameraModelKind {
    pub fn colmap_id(self) -> i32 {
        match self {
            CameraModelKind::SimplePinhole => 0,
            CameraModelKind::Pinhole => 1,
        }
    }

    pub fn colmap_name(self) -> &'static str {
        match self {
            CameraModelKind::SimplePinhole => "SIMPLE_PINHOLE",
            CameraModelKind::Pinhole => "PINHOLE",
        }
    }

    pub(crate) fn from_colmap_id(id: i64) -> Result<Self> {
        match id {
            0 => Ok(CameraModelKind::SimplePinhole),
            1 => Ok(CameraModelKind::Pinhole),
            other => Err(Error::UnsupportedCameraModel {
                model_id: other,
                name: colmap_model_name(other).to_string(),
            }),
        }
    }

    pub(crate) fn from_colmap_name(name: &str) -> Result<Self> {
        match name {
            "SIMPLE_PINHOLE" => Ok(CameraModelKind::SimplePinhole),
            "PINHOLE" => Ok(CameraModelKind::Pinhole),
            other => {
                let id = (0..11)
                    .find(|&i| colmap_model_name(i) == other)
                    .unwrap_or(-1);
                Err(Error::UnsupportedCameraModel {
                    model_id: id,
                    name: other.to_string(),
                })
            }
        }
    }
}

fn colmap_model_name(id: i64) -> &'static str {
    match id {
        0 => "SIMPLE_PINHOLE",
        1 => "PINHOLE",
        2 => "SIMPLE_RADIAL",
        3 => "RADIAL",
        4 => "OPENCV",
        5 => "OPENCV_FISHEYE",
        6 => "FULL_OPENCV",
        7 => "FOV",
        8 => "SIMPLE_RADIAL_FISHEYE",
        9 => "RADIAL_FISHEYE",
        10 => "THIN_PRISM_FISHEYE",
        _ => "UNKNOWN",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub model_kind: CameraModelKind,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn pinhole(width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            model_kind: CameraModelKind::Pinhole,
            width,
            height,
            fx,
            fy,
            cx,
            cy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.width >= 1
            && self.height >= 1
            && self.fx > 0.0
            && self.fy > 0.0
            && (0.0..=self.width as f64).contains(&self.cx)
            && (0.0..=self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(Error::format("camera intrinsics", format!("{self:?}")))
        }
    }

    /// Intrinsics for the image resampled by `factor` (0 < factor ≤ 1).
    pub fn scaled(&self, factor: f64) -> Self {
        let width = ((self.width as f64 * factor).round() as u32).max(1);
        let height = ((self.height as f64 * factor).round() as u32).max(1);
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            model_kind: CameraModelKind::Pinhole,
            width,
            height,
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
        }
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_qvec_tvec(qvec: [f64; 4], tvec: [f64; 3]) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(qvec[0], qvec[1], qvec[2], qvec[3]));
        Self {
            rotation: *q.to_rotation_matrix().matrix(),
            translation: Vector3::from(tvec),
        }
    }

    /// Camera looking from `eye` towards `target`; camera +y points away from `up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self {
            rotation,
            translation: -rotation * eye,
        }
    }

    pub fn qvec(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_matrix(&self.rotation);
        let mut q = [q.w, q.i, q.j, q.k];
        if q[0] < 0.0 {
            q.iter_mut().for_each(|c| *c = -*c);
        }
        q
    }

    pub fn tvec(&self) -> [f64; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Pinhole projection; `None` when the point is on or behind the camera plane.
pub fn project_point(
    intr: &CameraIntrinsics,
    pose: &Pose,
    p: &Vector3<f64>,
) -> Option<ProjectedPoint> {
    let pc = pose.to_camera(p);
    if pc.z <= 0.0 {
        return None;
    }
    Some(ProjectedPoint {
        u: intr.fx * pc.x / pc.z + intr.cx,
        v: intr.fy * pc.y / pc.z + intr.cy,
        depth: pc.z,
    })
}

/// Inverse of [`project_point`] for a known depth.
pub fn unproject_point(intr: &CameraIntrinsics, pose: &Pose, u: f64, v: f64, depth: f64) -> Vector3<f64> {
    let pc = Vector3::new(
        (u - intr.cx) / intr.fx * depth,
        (v - intr.cy) / intr.fy * depth,
        depth,
    );
    pose.rotation.transpose() * (pc - pose.translation)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feature {
    pub xy: [f64; 2],
    pub point3d_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: u32,
    pub name: String,
    /// World-to-camera rotation (w, x, y, z).
    pub qvec: [f64; 4],
    /// World-to-camera translation.
    pub tvec: [f64; 3],
    pub camera_id: u32,
    pub features: Vec<Feature>,
}

impl ImageRecord {
    pub fn pose(&self) -> Pose {
        Pose::from_qvec_tvec(self.qvec, self.tvec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrackEntry {
    pub image_id: u32,
    pub feature_index: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point3D {
    pub id: u64,
    pub position: [f64; 3],
    pub color: [u8; 3],
    pub error: f64,
    pub track: Vec<TrackEntry>,
}

impl Point3D {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    pub fn color_unit(&self) -> [f64; 3] {
        self.color.map(|c| c as f64 / 255.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SfmModel {
    pub cameras: BTreeMap<u32, CameraIntrinsics>,
    pub images: BTreeMap<u32, ImageRecord>,
    pub points: BTreeMap<u64, Point3D>,
}

impl SfmModel {
    /// Checks referential integrity across cameras, images and points.
    pub fn validate(&self) -> Result<()> {
        for cam in self.cameras.values() {
            cam.validate()?;
        }

        let mut missing_cameras = Vec::new();
        let mut missing_points = Vec::new();
        let mut bad_quaternions = Vec::new();
        for img in self.images.values() {
            if !self.cameras.contains_key(&img.camera_id) {
                missing_cameras.push(img.camera_id);
            }
            let norm = img.qvec.iter().map(|c| c * c).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                bad_quaternions.push(img.id);
            }
            for f in &img.features {
                if let Some(pid) = f.point3d_id {
                    if !self.points.contains_key(&pid) {
                        missing_points.push(pid);
                    }
                }
            }
        }
        if !missing_cameras.is_empty() {
            missing_cameras.sort_unstable();
            missing_cameras.dedup();
            return Err(Error::Integrity(format!(
                "images reference missing camera ids {missing_cameras:?}"
            )));
        }
        if !bad_quaternions.is_empty() {
            return Err(Error::Integrity(format!(
                "images with non-unit quaternions {bad_quaternions:?}"
            )));
        }
        if !missing_points.is_empty() {
            missing_points.sort_unstable();
            missing_points.dedup();
            return Err(Error::Integrity(format!(
                "features reference missing point ids {missing_points:?}"
            )));
        }

        let mut broken_tracks = Vec::new();
        for p in self.points.values() {
            if p.position.iter().any(|c| !c.is_finite()) {
                broken_tracks.push(p.id);
                continue;
            }
            let linked = p.track.iter().all(|t| {
                self.images
                    .get(&t.image_id)
                    .and_then(|img| img.features.get(t.feature_index as usize))
                    .is_some_and(|f| f.point3d_id == Some(p.id))
            });
            if !linked {
                broken_tracks.push(p.id);
            }
        }
        if !broken_tracks.is_empty() {
            return Err(Error::Integrity(format!(
                "points with broken feature links {broken_tracks:?}"
            )));
        }
        Ok(())
    }

    pub fn camera_for(&self, img: &ImageRecord) -> Result<&CameraIntrinsics> {
        self.cameras
            .get(&img.camera_id)
            .ok_or_else(|| Error::Integrity(format!("missing camera id {}", img.camera_id)))
    }

    pub fn image_by_name(&self, name: &str) -> Option<&ImageRecord> {
        self.images.values().find(|img| img.name == name)
    }

    /// Replaces each image's features with the in-frame projections of the
    /// points for which `visible(camera_center, point)` holds, then rebuilds
    /// the tracks.
    pub fn link_visible_points(&mut self, visible: impl Fn(&Vector3<f64>, &Vector3<f64>) -> bool) {
        for img in self.images.values_mut() {
            let Some(intr) = self.cameras.get(&img.camera_id) else {
                continue;
            };
            let pose = img.pose();
            let center = pose.center();
            img.features = self
                .points
                .values()
                .filter_map(|p| {
                    let x = p.position();
                    let q = project_point(intr, &pose, &x)?;
                    let inside = q.u >= 0.0 && q.v >= 0.0 && q.u < intr.width as f64 && q.v < intr.height as f64;
                    (inside && visible(&center, &x)).then_some(Feature {
                        xy: [q.u, q.v],
                        point3d_id: Some(p.id),
                    })
                })
                .collect();
        }
        self.rebuild_tracks();
    }

    /// Rebuilds every point's track from the image feature links.
    pub fn rebuild_tracks(&mut self) {
        for p in self.points.values_mut() {
            p.track.clear();
        }
        for img in self.images.values() {
            for (idx, f) in img.features.iter().enumerate() {
                if let Some(p) = f.point3d_id.and_then(|pid| self.points.get_mut(&pid)) {
                    p.track.push(TrackEntry {
                        image_id: img.id,
                        feature_index: idx as u32,
                    });
                }
            }
        }
    }
}

/// Loads `cameras`, `images` and `points3D` from `dir` and checks integrity.
pub fn load_colmap_model(dir: &Path, format: ModelFormat) -> Result<SfmModel> {
    let model = colmap::read_model(dir, format)?;
    model.validate()?;
    Ok(model)
}
