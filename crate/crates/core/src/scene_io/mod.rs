//! Scene ingestion and artifact output.

mod colmap;
mod config;
mod images;
mod ply;

pub use colmap::{load_colmap_scene, write_colmap_scene, ColmapScene, ImageMeta};
pub use config::{MeshConfig, SamplingParams, SceneConfig};
pub use images::{load_image_records, load_scene, save_mask, save_rgb, ImageRecord, Scene};
pub use ply::{load_ply, save_ply, PlyData, PlyEncoding};

use nalgebra::{Quaternion, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::geometry::{Mat3, Ray, Vec3};
use crate::{Error, Result};

/// Pinhole camera with a world-to-camera pose `x_c = R x_w + t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::Config("principal point must lie inside the image".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Mat3::identity()).norm();
        if err > 1e-6 {
            return Err(Error::Config(format!("rotation is not orthonormal (|RtR - I| = {err:e})")));
        }
        Ok(())
    }

    /// Builds a pose from a COLMAP `(qw, qx, qy, qz)` quaternion.
    pub fn rotation_from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Mat3 {
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
            .to_rotation_matrix()
            .into_inner()
    }

    pub fn quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        [q.w, q.i, q.j, q.k]
    }

    /// Camera center `-R^T t`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Ray through pixel coordinates `(u, v)`; pixel centers sit at `+0.5`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Ray {
        let d_cam = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        Ray::new(self.center(), self.rotation.transpose() * d_cam)
    }

    /// Projects a world point; `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        let c = self.rotation * p + self.translation;
        (c.z > 0.0).then(|| (self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy))
    }

    /// Look-at pose with the camera's +z axis towards `target` and +y roughly
    /// along `-up` (image rows grow downwards).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, width: u32, height: u32, focal: f64) -> Camera {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let x = if x.iter().all(|c| c.is_finite()) { x } else { z.cross(&Vec3::x()).normalize() };
        let y = z.cross(&x);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Camera {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation: -(rotation * eye),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SfmPoint {
    pub position: Vec3,
    pub track_length: usize,
    pub reprojection_error: f64,
    pub color: [f64; 3],
}

/// Keeps points with `track_length >= min_track_len` and
/// `reprojection_error <= max_reproj`, preserving order.
pub fn filter_sfm_points(points: &[SfmPoint], min_track_len: usize, max_reproj: f64) -> Vec<SfmPoint> {
    points
        .iter()
        .filter(|p| p.track_length >= min_track_len && p.reprojection_error <= max_reproj)
        .cloned()
        .collect()
}
