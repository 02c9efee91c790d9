use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: Vec3,
    pub look_at: Vec3,
    /// Vertical field of view in degrees.
    pub vertical_fov: f64,
}

/// Default field of view for object renders: a unit-cube object at distance 3
/// fills roughly two thirds of the frame.
pub const OBJECT_FOV_DEG: f64 = 30.0;

/// Camera placement on a hemisphere around the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HemisphereSampler {
    pub radius: f64,
    /// Polar angle range from +z, degrees.
    pub theta_deg: (f64, f64),
    /// Azimuth range, degrees.
    pub phi_deg: (f64, f64),
    pub fov_deg: f64,
}

impl Default for HemisphereSampler {
    fn default() -> Self {
        HemisphereSampler {
            radius: 3.0,
            theta_deg: (5.0, 75.0),
            phi_deg: (-180.0, 180.0),
            fov_deg: OBJECT_FOV_DEG,
        }
    }
}

impl HemisphereSampler {
    pub fn validate(&self) -> Result<()> {
        let (t0, t1) = self.theta_deg;
        let (p0, p1) = self.phi_deg;
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config(format!("camera radius must be positive, got {}", self.radius)));
        }
        if !(t0 < t1 && t0 >= 0.0 && t1 <= 90.0) {
            return Err(Error::Config(format!("theta range [{t0}, {t1}] must be a non-empty subset of [0, 90]")));
        }
        if !(p0 < p1) {
            return Err(Error::Config(format!("phi range [{p0}, {p1}] is empty or inverted")));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Config(format!("fov {} outside (0, 180)", self.fov_deg)));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<CameraPose> {
        self.validate()?;
        let theta = rng.random_range(self.theta_deg.0..=self.theta_deg.1);
        let phi = rng.random_range(self.phi_deg.0..=self.phi_deg.1);
        Ok(camera_at(self.radius, theta, phi, self.fov_deg))
    }
}

/// `r (sin θ cos φ, sin θ sin φ, cos θ)`, looking at the origin.
pub fn hemisphere_position(r: f64, theta_deg: f64, phi_deg: f64) -> Vec3 {
    let (t, p) = (theta_deg.to_radians(), phi_deg.to_radians());
    Vec3::new(r * t.sin() * p.cos(), r * t.sin() * p.sin(), r * t.cos())
}

pub fn camera_at(r: f64, theta_deg: f64, phi_deg: f64, fov_deg: f64) -> CameraPose {
    CameraPose {
        position: hemisphere_position(r, theta_deg, phi_deg),
        look_at: Vec3::ZERO,
        vertical_fov: fov_deg,
    }
}

/// Sample a camera pose on the hemisphere of radius `r`.
pub fn sample_camera(
    rng: &mut Rng,
    r: f64,
    theta_range: (f64, f64),
    phi_range: (f64, f64),
) -> Result<CameraPose> {
    HemisphereSampler { radius: r, theta_deg: theta_range, phi_deg: phi_range, fov_deg: OBJECT_FOV_DEG }
        .sample(rng)
}

/// Orthonormal pinhole camera frame.
#[derive(Debug, Clone, Copy)]
pub struct CameraFrame {
    pub origin: Vec3,
    forward: Vec3,
    right: Vec3,
    up: Vec3,
    tan_half: f64,
}

impl CameraPose {
    pub fn validate(&self) -> Result<()> {
        if (self.position - self.look_at).length() <= 0.0 {
            return Err(Error::Geometry("camera position equals look_at".into()));
        }
        if !(self.vertical_fov > 0.0 && self.vertical_fov < 180.0) {
            return Err(Error::Geometry(format!("fov {} outside (0, 180)", self.vertical_fov)));
        }
        Ok(())
    }

    pub fn frame(&self) -> Result<CameraFrame> {
        self.validate()?;
        let forward = (self.look_at - self.position).normalized();
        let world_up = if forward.cross(Vec3::new(0.0, 0.0, 1.0)).length() < 1e-9 {
            Vec3::new(0.0, 1.0, 0.0)
        } else {
            Vec3::new(0.0, 0.0, 1.0)
        };
        let right = forward.cross(world_up).normalized();
        let up = right.cross(forward);
        Ok(CameraFrame {
            origin: self.position,
            forward,
            right,
            up,
            tan_half: (self.vertical_fov.to_radians() * 0.5).tan(),
        })
    }
}

impl CameraFrame {
    /// Unit direction through the center of pixel (`x`, `y`), row 0 at the top.
    pub fn ray_dir(&self, x: usize, y: usize, width: usize, height: usize) -> Vec3 {
        let aspect = width as f64 / height as f64;
        let sx = (2.0 * (x as f64 + 0.5) / width as f64 - 1.0) * aspect * self.tan_half;
        let sy = (1.0 - 2.0 * (y as f64 + 0.5) / height as f64) * self.tan_half;
        (self.forward + self.right * sx + self.up * sy).normalized()
    }

    pub fn forward(&self) -> Vec3 {
        self.forward
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn close(a: Vec3, b: Vec3) -> bool {
        (a - b).length() < 1e-9
    }

    #[test]
    fn closed_form_positions() {
        assert!(close(hemisphere_position(3.0, 0.0, 123.0), Vec3::new(0.0, 0.0, 3.0)));
        assert!(close(hemisphere_position(3.0, 90.0, 0.0), Vec3::new(3.0, 0.0, 0.0)));
        let p = hemisphere_position(3.0, 60.0, 90.0);
        assert!(close(p, Vec3::new(0.0, 2.598_076_211_353_316, 1.5)), "{p:?}");
    }

    #[test]
    fn bad_ranges_rejected() {
        let mut rng = rng_from(1);
        assert!(sample_camera(&mut rng, 3.0, (75.0, 5.0), (-180.0, 180.0)).is_err());
        assert!(sample_camera(&mut rng, 3.0, (5.0, 95.0), (-180.0, 180.0)).is_err());
        assert!(sample_camera(&mut rng, 3.0, (5.0, 75.0), (10.0, 10.0)).is_err());
        assert!(sample_camera(&mut rng, 0.0, (5.0, 75.0), (-180.0, 180.0)).is_err());
    }

    #[test]
    fn pole_camera_has_a_frame() {
        let cam = camera_at(3.0, 0.0, 0.0, 30.0);
        let f = cam.frame().unwrap();
        let d = f.ray_dir(4, 4, 8, 8);
        assert!(d.is_finite());
    }
}
