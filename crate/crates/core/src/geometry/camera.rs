use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector2;

use super::{Mat3, Vec3};
use crate::error::{Error, Result};

/// Pinhole camera. `rotation` maps camera axes to world axes (x right,
/// y down, z forward) and `translation` is the camera center in world space.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub focal: f64,
    pub principal_point: Vector2<f64>,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

/// A pixel ray. `pixel_radius` is the cone radius per unit distance along
/// the (unit) direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub pixel_radius: f64,
    pub near: f64,
    pub far: f64,
}

/// Axis-aligned Gaussian approximation of a conical frustum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrustumGaussian {
    pub mean: Vec3,
    pub diag_cov: Vec3,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rotation: Mat3,
        translation: Vec3,
        focal: f64,
        principal_point: Vector2<f64>,
        width: u32,
        height: u32,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let camera = Camera {
            rotation,
            translation,
            focal,
            principal_point,
            width,
            height,
            near,
            far,
        };
        camera.validate()?;
        Ok(camera)
    }

    /// Camera at `center` looking at `target`, with world `up` mapped to
    /// image-up. Principal point at the image center.
    pub fn look_at(
        center: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: u32,
        height: u32,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let forward = (target - center).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::OutOfRange("look_at: up is parallel to view".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        Camera::new(
            rotation,
            center,
            focal,
            Vector2::new(width as f64 / 2.0, height as f64 / 2.0),
            width,
            height,
            near,
            far,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ortho = (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max();
        if !(ortho <= 1e-9) {
            return Err(Error::OutOfRange(format!(
                "camera rotation not orthonormal (error {ortho:e})"
            )));
        }
        if !(self.focal > 0.0) {
            return Err(Error::OutOfRange(format!("focal {} <= 0", self.focal)));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(Error::OutOfRange(format!(
                "need 0 < near < far, got near {} far {}",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::OutOfRange("empty resolution".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    pub fn optical_axis(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }

    /// Ray through the center of pixel (`px`, `py`), i.e. the image-plane
    /// point (`px + 0.5`, `py + 0.5`).
    pub fn ray_for_pixel(&self, px: f64, py: f64) -> Ray {
        let d_cam = Vec3::new(
            (px + 0.5 - self.principal_point.x) / self.focal,
            (py + 0.5 - self.principal_point.y) / self.focal,
            1.0,
        );
        let len = d_cam.norm();
        let direction = (self.rotation * d_cam) / len;
        // Pixel footprint 1/f at unit depth; a unit step along the ray sits at
        // depth 1/len. Radius of the cone matches the pixel's variance.
        let pixel_radius = 2.0 / (12f64.sqrt() * self.focal * len);
        Ray {
            origin: self.translation,
            direction,
            pixel_radius,
            near: self.near,
            far: self.far,
        }
    }

    /// Projects a world point to continuous pixel coordinates (pixel centers at
    /// half-integers). `None` behind the camera.
    pub fn project(&self, point: &Vec3) -> Option<(f64, f64)> {
        let p = self.rotation.transpose() * (point - self.translation);
        if p.z <= 0.0 {
            return None;
        }
        Some((
            self.focal * p.x / p.z + self.principal_point.x,
            self.focal * p.y / p.z + self.principal_point.y,
        ))
    }
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    /// Gaussian moments of the cone segment between `t0` and `t1`.
    pub fn frustum_gaussian(&self, t0: f64, t1: f64) -> FrustumGaussian {
        let mu = 0.5 * (t0 + t1);
        let hw = 0.5 * (t1 - t0);
        let mu2 = mu * mu;
        let hw2 = hw * hw;
        let denom = 3.0 * mu2 + hw2;
        let t_mean = mu + 2.0 * mu * hw2 / denom;
        let t_var = hw2 / 3.0 - (4.0 / 15.0) * (hw2 * hw2 * (12.0 * mu2 - hw2)) / (denom * denom);
        let r2 = self.pixel_radius * self.pixel_radius;
        let r_var = r2 * (mu2 / 4.0 + (5.0 / 12.0) * hw2 - (4.0 / 15.0) * (hw2 * hw2) / denom);
        let d2 = self.direction.component_mul(&self.direction);
        let diag_cov = d2 * t_var + (Vec3::repeat(1.0) - d2) * r_var;
        FrustumGaussian {
            mean: self.at(t_mean),
            diag_cov: diag_cov.map(|v| v.max(0.0)),
        }
    }
}

/// Parses a camera file: one record per line (rotation row-major, center,
/// focal, principal point, width, height, near, far), `#` starts a comment.
pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cameras(&text).map_err(|reason| Error::malformed(path, reason))
}

pub(crate) fn parse_cameras(text: &str) -> std::result::Result<Vec<Camera>, String> {
    let mut cameras = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 19 {
            return Err(format!(
                "line {}: expected 19 fields, found {}",
                lineno + 1,
                tokens.len()
            ));
        }
        let float = |i: usize| -> std::result::Result<f64, String> {
            tokens[i]
                .parse::<f64>()
                .map_err(|e| format!("line {}: field {}: {e}", lineno + 1, i + 1))
        };
        let int = |i: usize| -> std::result::Result<u32, String> {
            tokens[i]
                .parse::<u32>()
                .map_err(|e| format!("line {}: field {}: {e}", lineno + 1, i + 1))
        };
        let mut r = [0.0; 9];
        for (i, v) in r.iter_mut().enumerate() {
            *v = float(i)?;
        }
        let camera = Camera::new(
            Mat3::from_row_slice(&r),
            Vec3::new(float(9)?, float(10)?, float(11)?),
            float(12)?,
            Vector2::new(float(13)?, float(14)?),
            int(15)?,
            int(16)?,
            float(17)?,
            float(18)?,
        )
        .map_err(|e| format!("line {}: {e}", lineno + 1))?;
        cameras.push(camera);
    }
    Ok(cameras)
}

pub(crate) fn format_cameras(cameras: &[Camera]) -> String {
    let mut out = String::from(
        "# rotation(9, row-major, world<-camera) center(3) focal cx cy width height near far\n",
    );
    for c in cameras {
        let r = &c.rotation;
        for i in 0..3 {
            for j in 0..3 {
                write!(out, "{:?} ", r[(i, j)]).unwrap();
            }
        }
        writeln!(
            out,
            "{:?} {:?} {:?} {:?} {:?} {:?} {} {} {:?} {:?}",
            c.translation.x,
            c.translation.y,
            c.translation.z,
            c.focal,
            c.principal_point.x,
            c.principal_point.y,
            c.width,
            c.height,
            c.near,
            c.far
        )
        .unwrap();
    }
    out
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    std::fs::write(path, format_cameras(cameras)).map_err(|e| Error::io(path, e))
}
