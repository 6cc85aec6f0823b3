//! Pinhole and orthographic cameras shared by the oracle renderer and the
//! volume renderer.

use glam::DVec3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::BOX_HALF;

/// Distance of dataset cameras from the origin.
pub const CAMERA_RADIUS: f64 = 1.5;
/// Vertical field of view of dataset cameras, radians.
pub const DEFAULT_FOV_Y: f64 = 0.8;
/// Elevation clamp for sampled cameras, radians (±60°).
pub const MAX_ELEVATION: f64 = std::f64::consts::FRAC_PI_3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Projection {
    Perspective { fov_y: f64 },
    Orthographic { half_extent: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: DVec3,
    pub look_at: DVec3,
    pub up: DVec3,
    pub projection: Projection,
}

/// Orthonormal camera frame.
#[derive(Clone, Copy, Debug)]
pub struct Frame {
    pub right: DVec3,
    pub up: DVec3,
    pub forward: DVec3,
}

impl CameraPose {
    /// Camera on a sphere of `radius` around the origin, looking at it.
    pub fn orbit(azimuth: f64, elevation: f64, radius: f64, projection: Projection) -> Self {
        let (se, ce) = elevation.sin_cos();
        let (sa, ca) = azimuth.sin_cos();
        Self {
            position: DVec3::new(ce * sa, se, ce * ca) * radius,
            look_at: DVec3::ZERO,
            up: DVec3::Y,
            projection,
        }
    }

    /// Random dataset camera: azimuth uniform, elevation uniform on the sphere
    /// band `|elevation| ≤ 60°`.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
        let s = MAX_ELEVATION.sin();
        let elevation = rng.random_range(-s..s).asin();
        Self::orbit(azimuth, elevation, CAMERA_RADIUS, Projection::Perspective { fov_y: DEFAULT_FOV_Y })
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.position;
        if p.abs().max_element() <= BOX_HALF {
            return Err(Error::InvalidCamera(format!("position {p} inside the canonical box")));
        }
        let fwd = self.look_at - p;
        if fwd.length() < 1e-12 {
            return Err(Error::InvalidCamera("look_at coincides with position".into()));
        }
        if fwd.normalize().cross(self.up).length() < 1e-9 {
            return Err(Error::InvalidCamera("up vector parallel to view direction".into()));
        }
        match self.projection {
            Projection::Perspective { fov_y } if !(fov_y > 0.0 && fov_y < std::f64::consts::PI) => {
                Err(Error::InvalidCamera(format!("fov_y {fov_y} outside (0, π)")))
            }
            Projection::Orthographic { half_extent } if half_extent <= 0.0 => {
                Err(Error::InvalidCamera(format!("half_extent {half_extent} not positive")))
            }
            _ => Ok(()),
        }
    }

    pub fn frame(&self) -> Frame {
        let forward = (self.look_at - self.position).normalize();
        let right = forward.cross(self.up).normalize();
        let up = right.cross(forward);
        Frame { right, up, forward }
    }

    /// Ray through the center of pixel `(row, col)`; row 0 is the top of the image.
    pub fn pixel_ray(&self, row: usize, col: usize, height: usize, width: usize) -> (DVec3, DVec3) {
        let f = self.frame();
        let aspect = width as f64 / height as f64;
        let x = ((col as f64 + 0.5) / width as f64) * 2.0 - 1.0;
        let y = 1.0 - ((row as f64 + 0.5) / height as f64) * 2.0;
        match self.projection {
            Projection::Perspective { fov_y } => {
                let t = (fov_y * 0.5).tan();
                let dir = f.forward + f.right * (x * t * aspect) + f.up * (y * t);
                (self.position, dir.normalize())
            }
            Projection::Orthographic { half_extent } => {
                let origin = self.position + f.right * (x * half_extent * aspect) + f.up * (y * half_extent);
                (origin, f.forward)
            }
        }
    }
}
