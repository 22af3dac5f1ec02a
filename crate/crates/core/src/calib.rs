//! Pinhole camera models, rig calibration I/O and the world-to-pixel maps.
//!
//! Image coordinates: origin at the top-left corner, x to the right, y down.
//! All 3D quantities are in millimeters.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed calibration file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("camera {id}: rotation is not orthonormal with determinant +1")]
    NonOrthonormal { id: u32 },
    #[error("camera {id}: invalid intrinsics ({reason})")]
    InvalidIntrinsics { id: u32, reason: &'static str },
    #[error("duplicate camera id {0}")]
    DuplicateId(u32),
    #[error("calibration contains no cameras")]
    Empty,
    #[error("non-finite input")]
    NonFinite,
}

/// Result of mapping a world point into an image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    InFront(Vector2<f64>),
    /// Camera-frame depth was not positive.
    Behind,
}

impl Projection {
    pub fn pixel(&self) -> Option<Vector2<f64>> {
        match *self {
            Projection::InFront(p) => Some(p),
            Projection::Behind => None,
        }
    }

    pub fn in_front(&self) -> bool {
        matches!(self, Projection::InFront(_))
    }
}

/// A calibrated pinhole camera with OpenCV-style radial/tangential distortion
/// `(k1, k2, p1, p2, k3)` and world-to-camera extrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: u32,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub dist: [f64; 5],
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    /// Builds a distortion-free camera at `position` looking at `target`, with
    /// world `+z` as the up direction.
    pub fn look_at(
        id: u32,
        (width, height): (u32, u32),
        focal: f64,
        position: Vector3<f64>,
        target: Vector3<f64>,
    ) -> Camera {
        let forward = (target - position).normalize();
        let mut right = forward.cross(&Vector3::z());
        if right.norm() < 1e-9 {
            right = Vector3::x();
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * position);
        Camera {
            id,
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            dist: [0.0; 5],
            rotation,
            translation,
        }
    }

    pub fn validate(&self) -> Result<(), CalibError> {
        let id = self.id;
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return Err(CalibError::InvalidIntrinsics { id, reason: "focal lengths must be positive" });
        }
        if self.width == 0 || self.height == 0 {
            return Err(CalibError::InvalidIntrinsics { id, reason: "image size must be positive" });
        }
        if !(self.cx.is_finite() && self.cy.is_finite())
            || self.dist.iter().any(|d| !d.is_finite())
            || self.translation.iter().any(|t| !t.is_finite())
        {
            return Err(CalibError::InvalidIntrinsics { id, reason: "non-finite parameter" });
        }
        let r = &self.rotation;
        let gram = r.transpose() * r;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        if !ortho_err.is_finite() || ortho_err > ORTHONORMAL_TOL || (r.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(CalibError::NonOrthonormal { id });
        }
        Ok(())
    }

    pub fn has_distortion(&self) -> bool {
        self.dist.iter().any(|&d| d != 0.0)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn image_center(&self) -> Vector2<f64> {
        Vector2::new(self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    pub fn to_camera_frame(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// Projects a world point, applying the distortion model.
    pub fn project(&self, point: &Vector3<f64>) -> Result<Projection, CalibError> {
        self.project_with(point, true)
    }

    /// Projects a world point; `distort = false` uses the ideal pinhole model
    /// (for heatmaps computed on undistorted images).
    pub fn project_with(&self, point: &Vector3<f64>, distort: bool) -> Result<Projection, CalibError> {
        if point.iter().any(|v| !v.is_finite()) {
            return Err(CalibError::NonFinite);
        }
        let pc = self.to_camera_frame(point);
        if pc.z <= 0.0 {
            return Ok(Projection::Behind);
        }
        let n = Vector2::new(pc.x / pc.z, pc.y / pc.z);
        let n = if distort && self.has_distortion() { self.distort(n) } else { n };
        Ok(Projection::InFront(Vector2::new(self.fx * n.x + self.cx, self.fy * n.y + self.cy)))
    }

    fn distort(&self, n: Vector2<f64>) -> Vector2<f64> {
        let [k1, k2, p1, p2, k3] = self.dist;
        let (x, y) = (n.x, n.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        Vector2::new(
            x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x),
            y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y,
        )
    }

    /// Normalized image coordinates of a pixel, inverting distortion by
    /// fixed-point iteration when `undistort` is set.
    pub fn normalize_pixel(&self, pixel: &Vector2<f64>, undistort: bool) -> Vector2<f64> {
        let d = Vector2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy);
        if !undistort || !self.has_distortion() {
            return d;
        }
        let mut n = d;
        for _ in 0..50 {
            let err = self.distort(n) - d;
            n -= err;
            if err.norm() < 1e-14 {
                break;
            }
        }
        n
    }

    /// World-frame unit direction of the ray through `pixel`.
    pub fn ray_direction(&self, pixel: &Vector2<f64>, undistort: bool) -> Vector3<f64> {
        let n = self.normalize_pixel(pixel, undistort);
        (self.rotation.transpose() * Vector3::new(n.x, n.y, 1.0)).normalize()
    }
}

/// Maps a pixel of the original image to the corresponding location in the
/// image rotated by `angle_deg` about `center`: `p' = R(angle)·(p − c) + c`,
/// with `R` the standard 2×2 rotation matrix applied in y-down coordinates.
pub fn rotate_pixel(pixel: &Vector2<f64>, angle_deg: f64, center: &Vector2<f64>) -> Vector2<f64> {
    if angle_deg == 0.0 {
        return *pixel;
    }
    let (s, c) = angle_deg.to_radians().sin_cos();
    let d = pixel - center;
    Vector2::new(c * d.x - s * d.y, s * d.x + c * d.y) + center
}

/// An ordered set of calibrated cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Result<CameraRig, CalibError> {
        if cameras.is_empty() {
            return Err(CalibError::Empty);
        }
        let mut seen = HashSet::new();
        for cam in &cameras {
            cam.validate()?;
            if !seen.insert(cam.id) {
                return Err(CalibError::DuplicateId(cam.id));
            }
        }
        Ok(CameraRig { cameras })
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn camera(&self, id: u32) -> Option<&Camera> {
        self.cameras.iter().find(|c| c.id == id)
    }

    /// Keeps only the cameras whose ids are listed.
    pub fn subset(&self, ids: &[u32]) -> Result<CameraRig, CalibError> {
        CameraRig::new(self.cameras.iter().filter(|c| ids.contains(&c.id)).cloned().collect())
    }

    pub fn from_json(text: &str) -> Result<CameraRig, CalibError> {
        let file: RigFile = serde_json::from_str(text)?;
        CameraRig::new(file.cameras.into_iter().map(Camera::from).collect())
    }

    pub fn to_json(&self) -> String {
        let file = RigFile { cameras: self.cameras.iter().map(CameraRecord::from).collect() };
        serde_json::to_string_pretty(&file).expect("rig serialization cannot fail")
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibError> {
        crate::io::write_atomic(path, self.to_json().as_bytes()).map_err(|source| CalibError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Loads and validates a calibration file.
pub fn load_rig(path: &Path) -> Result<CameraRig, CalibError> {
    let text = fs::read_to_string(path).map_err(|source| CalibError::Io { path: path.display().to_string(), source })?;
    CameraRig::from_json(&text)
}

#[derive(Serialize, Deserialize)]
struct RigFile {
    cameras: Vec<CameraRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    id: u32,
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    #[serde(default)]
    dist: [f64; 5],
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

impl From<CameraRecord> for Camera {
    fn from(c: CameraRecord) -> Camera {
        Camera {
            id: c.id,
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            dist: c.dist,
            rotation: Matrix3::from_row_slice(&c.r),
            translation: Vector3::from_row_slice(&c.t),
        }
    }
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> CameraRecord {
        let mut r = [0.0; 9];
        for row in 0..3 {
            for col in 0..3 {
                r[row * 3 + col] = c.rotation[(row, col)];
            }
        }
        CameraRecord {
            id: c.id,
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            dist: c.dist,
            r,
            t: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

/// Rotation about the camera's optical axis, composed onto its extrinsics.
/// Used to build rolled variants of a camera in tests and scene generation.
pub fn roll_camera(cam: &Camera, angle_deg: f64) -> Camera {
    let roll = Rotation3::from_axis_angle(&Vector3::z_axis(), angle_deg.to_radians());
    Camera {
        rotation: roll.matrix() * cam.rotation,
        translation: roll * cam.translation,
        ..cam.clone()
    }
}
