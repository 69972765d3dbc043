//! Pinhole camera model, UAV poses, projected bounding boxes, and the image
//! grid that partitions a frame into output cells.
//!
//! Conventions: the camera optical frame has +x right, +y down, +z forward.
//! Pixel coordinates (u, v) grow right and down, with (0, 0) at the top-left
//! image corner. Distances are Euclidean norms of camera-frame positions,
//! never raw depth.

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid target model: {0}")]
    InvalidModel(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    /// Some model corners project in front of the camera and some behind,
    /// so no finite pixel box bounds the silhouette.
    #[error("degenerate projection: {in_front} corners in front, {behind} behind the camera")]
    DegenerateProjection { in_front: usize, behind: usize },
}

/// Pinhole camera intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(cx > 0.0 && cx < width as f64) || !(cy > 0.0 && cy < height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) must lie strictly inside a {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Virtual camera for a crop window with top-left corner (x0, y0): same
    /// focal lengths, shifted principal point. The caller must keep the
    /// shifted principal point strictly inside the crop.
    pub fn crop(&self, x0: u32, y0: u32, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(
            self.fx,
            self.fy,
            self.cx - x0 as f64,
            self.cy - y0 as f64,
            width,
            height,
        )
    }
}

/// Axis-aligned box in the UAV body frame approximating the airframe.
///
/// Half-extents are ordered (x, y, z) = (right, down, forward) at identity
/// orientation, so `half_extents[1]` is half the body height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetModel {
    pub half_extents: [f64; 3],
}

impl TargetModel {
    pub fn new(half_extents: [f64; 3]) -> Result<Self, GeometryError> {
        if half_extents.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(GeometryError::InvalidModel(format!(
                "half-extents must be positive and finite, got {half_extents:?}"
            )));
        }
        Ok(Self { half_extents })
    }

    /// The eight body-frame corner points.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let [hx, hy, hz] = self.half_extents;
        let mut out = [Vector3::zeros(); 8];
        for (i, corner) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            *corner = Vector3::new(sx * hx, sy * hy, sz * hz);
        }
        out
    }

    /// Full body diagonal, the length scale used for collision separation.
    pub fn diagonal(&self) -> f64 {
        let [hx, hy, hz] = self.half_extents;
        2.0 * (hx * hx + hy * hy + hz * hz).sqrt()
    }
}

impl Default for TargetModel {
    /// A 0.45 x 0.45 m footprint, 0.25 m tall quadrotor-class body.
    fn default() -> Self {
        Self {
            half_extents: [0.225, 0.125, 0.225],
        }
    }
}

/// One UAV's position and attitude in the camera optical frame.
///
/// Angles are intrinsic roll/pitch/yaw in radians; the rotation applied to
/// body points is Rz(yaw) * Ry(pitch) * Rx(roll).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UavPose {
    /// Position in meters, camera optical frame.
    pub position: [f64; 3],
    /// Roll, pitch, yaw in radians.
    pub rpy: [f64; 3],
}

impl UavPose {
    pub fn new(position: [f64; 3], rpy: [f64; 3]) -> Self {
        Self { position, rpy }
    }

    pub fn position_vec(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.rpy[0], self.rpy[1], self.rpy[2])
    }

    /// Euclidean distance from the camera center.
    pub fn distance(&self) -> f64 {
        self.position_vec().norm()
    }
}

/// Output-grid dimensions; cells tile the image with the rightmost/bottom
/// cells absorbing any remainder pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub w_out: u32,
    pub h_out: u32,
}

impl GridSpec {
    pub fn new(w_out: u32, h_out: u32) -> Result<Self, GeometryError> {
        if w_out < 1 || h_out < 1 {
            return Err(GeometryError::InvalidGrid(format!(
                "grid must have at least one cell per axis, got {w_out}x{h_out}"
            )));
        }
        Ok(Self { w_out, h_out })
    }

    pub fn cells(&self) -> usize {
        self.w_out as usize * self.h_out as usize
    }
}

/// Axis-aligned pixel box. `clipped` records whether the raw projection
/// exceeded the image bounds before clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub clipped: bool,
}

impl PixelBox {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }
}

/// Projects a camera-frame point to pixel coordinates with its depth.
/// Points at or behind the image plane (z <= 0) project nowhere.
pub fn project_point(cam: &CameraIntrinsics, p: Vector3<f64>) -> Option<(f64, f64, f64)> {
    if p.z <= 0.0 {
        return None;
    }
    let u = cam.fx * p.x / p.z + cam.cx;
    let v = cam.fy * p.y / p.z + cam.cy;
    Some((u, v, p.z))
}

/// Axis-aligned bounding box of the projected target silhouette, clipped to
/// the image.
///
/// Returns `Ok(None)` when the whole model is behind the camera. A mixed
/// front/behind corner configuration has no finite bounding box and is an
/// error; scene generation keeps every target strictly in front, so this
/// only arises on degenerate caller-constructed poses.
pub fn target_bbox(
    cam: &CameraIntrinsics,
    pose: &UavPose,
    model: &TargetModel,
) -> Result<Option<PixelBox>, GeometryError> {
    let rotation = pose.rotation();
    let position = pose.position_vec();

    let mut in_front = 0usize;
    let mut behind = 0usize;
    let mut x0 = f64::INFINITY;
    let mut y0 = f64::INFINITY;
    let mut x1 = f64::NEG_INFINITY;
    let mut y1 = f64::NEG_INFINITY;

    for corner in model.corners() {
        let world = rotation * corner + position;
        match project_point(cam, world) {
            Some((u, v, _)) => {
                in_front += 1;
                x0 = x0.min(u);
                y0 = y0.min(v);
                x1 = x1.max(u);
                y1 = y1.max(v);
            }
            None => behind += 1,
        }
    }

    if in_front == 0 {
        return Ok(None);
    }
    if behind > 0 {
        return Err(GeometryError::DegenerateProjection { in_front, behind });
    }

    let (w, h) = (cam.width as f64, cam.height as f64);
    let clipped = x0 < 0.0 || y0 < 0.0 || x1 > w || y1 > h;
    Ok(Some(PixelBox {
        x0: x0.max(0.0),
        y0: y0.max(0.0),
        x1: x1.min(w),
        y1: y1.min(h),
        clipped,
    }))
}

/// Maps a pixel position to its grid cell as (col, row).
///
/// Cell extents are `floor(image / grid)` pixels; the last cell per axis
/// absorbs the remainder, and positions exactly on the right/bottom image
/// edge belong to the last cell. Positions outside the image map nowhere.
pub fn grid_cell_of(
    cam: &CameraIntrinsics,
    grid: &GridSpec,
    u: f64,
    v: f64,
) -> Option<(u32, u32)> {
    let (w, h) = (cam.width as f64, cam.height as f64);
    if !(0.0..=w).contains(&u) || !(0.0..=h).contains(&v) {
        return None;
    }
    let cell_w = (cam.width / grid.w_out) as f64;
    let cell_h = (cam.height / grid.h_out) as f64;
    let col = ((u / cell_w) as u32).min(grid.w_out - 1);
    let row = ((v / cell_h) as u32).min(grid.h_out - 1);
    Some((col, row))
}
