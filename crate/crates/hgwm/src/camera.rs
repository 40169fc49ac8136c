//! Pinhole camera with a world-to-camera extrinsic.
//!
//! Camera frame follows the usual vision convention: `+z` forward, `+x`
//! right, `+y` down. Pixel `(u, v)` is sampled at the continuous image
//! coordinate `(u, v)`.

use crate::error::{Error, Result};
use crate::geometry::{orthonormality_error, Mat3, Vec3};
use nalgebra::Vector2;

/// Points closer than this (camera-frame z) are culled.
pub const NEAR_PLANE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: Mat3,
    translation: Vec3,
    width: usize,
    height: usize,
}

/// Result of projecting a world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Visible { pixel: Vector2<f64>, depth: f64 },
    Culled,
}

impl Projection {
    pub fn visible(self) -> Option<(Vector2<f64>, f64)> {
        match self {
            Projection::Visible { pixel, depth } => Some((pixel, depth)),
            Projection::Culled => None,
        }
    }
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::invalid("camera", format!("focal lengths must be > 0, got ({fx}, {fy})")));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("camera", "image size must be positive"));
        }
        let err = orthonormality_error(&rotation);
        if !(err <= 1e-6) {
            return Err(Error::invalid("camera", format!("extrinsic rotation not orthonormal (error {err:e})")));
        }
        if !translation.iter().all(|v| v.is_finite()) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::invalid("camera", "non-finite extrinsics or principal point"));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target`, principal point at the image
    /// centre, horizontal field of view `fov_deg`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        let forward = (target - eye).try_normalize(1e-12).ok_or_else(|| Error::invalid("camera", "eye equals target"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("camera", "up vector parallel to viewing direction"))?;
        let down = forward.cross(&right);
        // Rows are the camera axes expressed in world coordinates.
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        Self::new(
            f,
            f,
            0.5 * (width as f64 - 1.0),
            0.5 * (height as f64 - 1.0),
            rotation,
            translation,
            width,
            height,
        )
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }
    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Pinhole projection; depth is the camera-frame z.
    pub fn project_point(&self, world: &Vec3) -> Projection {
        let pc = self.world_to_camera(world);
        self.project_camera_point(&pc)
    }

    pub fn project_camera_point(&self, pc: &Vec3) -> Projection {
        if !(pc.z > NEAR_PLANE) {
            return Projection::Culled;
        }
        let u = self.fx * pc.x / pc.z + self.cx;
        let v = self.fy * pc.y / pc.z + self.cy;
        Projection::Visible {
            pixel: Vector2::new(u, v),
            depth: pc.z,
        }
    }

    /// World point seen at pixel `(u, v)` with camera-frame depth `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let pc = Vec3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth);
        self.camera_to_world(&pc)
    }

    /// Same intrinsics and pose at a different resolution (principal point
    /// and focal scaled accordingly).
    pub fn resized(&self, width: usize, height: usize) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self::new(
            self.fx * sx,
            self.fy * sy,
            (self.cx + 0.5) * sx - 0.5,
            (self.cy + 0.5) * sy - 0.5,
            self.rotation,
            self.translation,
            width,
            height,
        )
    }

    /// Flat record used by the dataset meta file:
    /// `fx fy cx cy width height r00..r22 t0 t1 t2`.
    pub fn to_record(&self) -> Vec<f64> {
        let mut out = vec![self.fx, self.fy, self.cx, self.cy, self.width as f64, self.height as f64];
        for r in 0..3 {
            for c in 0..3 {
                out.push(self.rotation[(r, c)]);
            }
        }
        out.extend(self.translation.iter());
        out
    }

    pub fn from_record(rec: &[f64]) -> Result<Self> {
        if rec.len() != 18 {
            return Err(Error::invalid("camera record", format!("expected 18 numbers, got {}", rec.len())));
        }
        let rotation = Mat3::from_row_slice(&rec[6..15]);
        let translation = Vec3::new(rec[15], rec[16], rec[17]);
        Self::new(rec[0], rec[1], rec[2], rec[3], rotation, translation, rec[4] as usize, rec[5] as usize)
    }
}

/// Default rig: `count` cameras evenly spaced on a ring around the
/// workspace centre, looking slightly down at the table.
pub fn ring_rig(count: usize, width: usize, height: usize) -> Result<Vec<Camera>> {
    let target = Vec3::new(0.0, 0.0, 0.2);
    (0..count)
        .map(|i| {
            let az = std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * i as f64 / count as f64;
            let eye = Vec3::new(1.7 * az.cos(), 1.7 * az.sin(), 1.2);
            Camera::look_at(eye, target, Vec3::z(), 50.0, width, height)
        })
        .collect()
}
