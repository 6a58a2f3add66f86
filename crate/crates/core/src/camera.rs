//! Pinhole camera model.
//!
//! Pixel coordinates follow the OpenCV convention: integer coordinates are
//! pixel centers, so pixel `(x, y)` is sampled at exactly `(x, y)`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se3::PoseSE3;

pub const DEFAULT_NEAR_CLIP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_near_clip")]
    pub near_clip: f64,
}

fn default_near_clip() -> f64 {
    DEFAULT_NEAR_CLIP
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near_clip: DEFAULT_NEAR_CLIP,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidArgument(format!(
                "image must be at least 8x8, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.near_clip > 0.0) {
            return Err(Error::InvalidArgument("near_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible { u: f64, v: f64, z: f64 },
    BehindCamera,
}

impl Projection {
    pub fn visible(self) -> Option<(f64, f64, f64)> {
        match self {
            Projection::Visible { u, v, z } => Some((u, v, z)),
            Projection::BehindCamera => None,
        }
    }
}

pub fn project_point(p_world: &Vector3<f64>, pose: &PoseSE3, k: &CameraIntrinsics) -> Projection {
    project_camera_point(&pose.transform(p_world), k)
}

#[inline]
pub fn project_camera_point(pc: &Vector3<f64>, k: &CameraIntrinsics) -> Projection {
    if pc.z <= k.near_clip {
        return Projection::BehindCamera;
    }
    Projection::Visible {
        u: k.fx * pc.x / pc.z + k.cx,
        v: k.fy * pc.y / pc.z + k.cy,
        z: pc.z,
    }
}

pub fn backproject_pixel(
    u: f64,
    v: f64,
    depth: f64,
    pose: &PoseSE3,
    k: &CameraIntrinsics,
) -> Result<Vector3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "depth must be positive, got {depth}"
        )));
    }
    if !k.in_bounds(u, v) {
        return Err(Error::InvalidArgument(format!(
            "pixel ({u}, {v}) outside image"
        )));
    }
    Ok(pose
        .inverse()
        .transform(&backproject_camera(u, v, depth, k)))
}

#[inline]
pub(crate) fn backproject_camera(u: f64, v: f64, depth: f64, k: &CameraIntrinsics) -> Vector3<f64> {
    Vector3::new((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth)
}
