use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionalLight {
    /// Unit vector pointing from the surface toward the light.
    pub direction: Vec3,
    pub intensity: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightingEnv {
    pub lights: Vec<DirectionalLight>,
    pub ambient: Vec3,
    pub seed: u64,
}

impl LightingEnv {
    pub fn validate(&self) -> Result<()> {
        if self.lights.is_empty() || self.lights.len() > 3 {
            return Err(Error::Config(format!("expected 1-3 lights, got {}", self.lights.len())));
        }
        for l in &self.lights {
            if (l.direction.length() - 1.0).abs() > 1e-6 {
                return Err(Error::Config("light direction is not unit length".into()));
            }
            if l.intensity.to_array().iter().any(|c| *c < 0.0 || !c.is_finite()) {
                return Err(Error::Config("negative light intensity".into()));
            }
        }
        if self.ambient.to_array().iter().any(|c| *c < 0.0 || !c.is_finite()) {
            return Err(Error::Config("negative ambient".into()));
        }
        if !self.lights.iter().any(|l| l.intensity.max_elem() > 0.0) {
            return Err(Error::Config("no light has positive intensity".into()));
        }
        Ok(())
    }
}

fn direction(elevation_deg: f64, azimuth_deg: f64) -> Vec3 {
    let (e, a) = (elevation_deg.to_radians(), azimuth_deg.to_radians());
    Vec3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin()).normalized()
}

/// Randomized lighting: a key light within ±70° azimuth of `view_azimuth_deg`
/// (so the visible side is usually lit), up to two weaker fill lights
/// anywhere in the upper hemisphere, and a dim near-neutral ambient term.
pub fn sample_lighting(rng: &mut Rng, view_azimuth_deg: f64) -> LightingEnv {
    let seed: u64 = rng.random();
    let n = rng.random_range(1..=3usize);
    let tint = |rng: &mut Rng, k: f64| {
        Vec3::new(
            k * rng.random_range(0.85..=1.15),
            k * rng.random_range(0.85..=1.15),
            k * rng.random_range(0.85..=1.15),
        )
    };
    let mut lights = Vec::with_capacity(n);
    let key_az = view_azimuth_deg + rng.random_range(-70.0..=70.0);
    let key_el = rng.random_range(20.0..=70.0);
    let k = rng.random_range(0.9..=1.3);
    lights.push(DirectionalLight { direction: direction(key_el, key_az), intensity: tint(rng, k) });
    for _ in 1..n {
        let az = rng.random_range(-180.0..=180.0);
        let el = rng.random_range(10.0..=80.0);
        let k = rng.random_range(0.15..=0.5);
        lights.push(DirectionalLight { direction: direction(el, az), intensity: tint(rng, k) });
    }
    let a = rng.random_range(0.08..=0.2);
    let ambient = tint(rng, a);
    LightingEnv { lights, ambient, seed }
}

/// The frozen three-light rig used for every material swatch.
pub fn swatch_rig() -> LightingEnv {
    LightingEnv {
        lights: vec![
            // key: upper left, in front
            DirectionalLight { direction: direction(40.0, -135.0), intensity: Vec3::splat(1.0) },
            // fill: right, low
            DirectionalLight { direction: direction(15.0, -30.0), intensity: Vec3::splat(0.35) },
            // rim: behind, high
            DirectionalLight { direction: direction(60.0, 90.0), intensity: Vec3::splat(0.3) },
        ],
        ambient: Vec3::splat(0.12),
        seed: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn sampled_lighting_is_valid() {
        let mut rng = rng_from(3);
        for i in 0..500 {
            let env = sample_lighting(&mut rng, i as f64);
            env.validate().unwrap();
        }
        swatch_rig().validate().unwrap();
    }
}
