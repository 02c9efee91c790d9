//! Per-pixel analytic ray casting with a Lambert + normalized Blinn-Phong
//! shading model. No shadows, no indirect light.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::camera::{camera_at, CameraPose};
use super::lighting::{swatch_rig, LightingEnv};
use super::raster::{Mask, Raster};
use super::shape::{NormalizeTransform, Primitive, Shape};
use crate::error::{Error, Result};
use crate::material::{texture_at_unchecked, MaterialSpec, SurfacePoint};
use crate::math::Vec3;
use crate::par;
use crate::rng::Rng;

/// Fresnel reflectance at normal incidence for dielectrics.
const DIELECTRIC_F0: f64 = 0.04;
const MAX_EXPONENT: f64 = 1e4;

/// Perturbations that turn a clean render into a "real-photo" analog.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealStyle {
    /// Multiplier on the specular exponent (< 1 broadens highlights).
    pub exponent_scale: f64,
    /// Standard deviation of additive Gaussian sensor noise, linear units.
    pub noise_sigma: f64,
    /// Output is `c^tone_gamma` per channel before noise.
    pub tone_gamma: f64,
    pub noise_seed: u64,
}

impl Default for RealStyle {
    fn default() -> Self {
        RealStyle { exponent_scale: 0.5, noise_sigma: 0.02, tone_gamma: 0.8, noise_seed: 0 }
    }
}

impl RealStyle {
    /// A "real" style that changes nothing: same BRDF, no noise, identity tone.
    pub fn neutral() -> Self {
        RealStyle { exponent_scale: 1.0, noise_sigma: 0.0, tone_gamma: 1.0, noise_seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "style", rename_all = "lowercase")]
pub enum DomainStyle {
    Synthetic,
    Real(RealStyle),
}

impl DomainStyle {
    fn exponent_scale(&self) -> f64 {
        match self {
            DomainStyle::Synthetic => 1.0,
            DomainStyle::Real(r) => r.exponent_scale,
        }
    }
}

/// Geometry seen through one pixel.
#[derive(Debug, Clone, Copy)]
pub struct PixelGeometry {
    pub normal: Vec3,
    /// Unit vector from the surface toward the camera.
    pub view: Vec3,
    pub uv: (f64, f64),
}

/// Primary-ray hits for every pixel, row-major. `None` means background.
#[derive(Debug, Clone)]
pub struct GeometryBuffer {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Option<PixelGeometry>>,
}

impl GeometryBuffer {
    pub fn mask(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| self.pixels[y * self.width + x].is_some())
    }
}

pub fn trace_geometry(shape: &Shape, camera: &CameraPose, width: usize, height: usize) -> Result<GeometryBuffer> {
    let frame = camera.frame()?;
    if shape.sdf(camera.position) <= 0.0 {
        return Err(Error::Geometry("camera is inside the shape".into()));
    }
    let rows = par::map_range(height, |y| {
        (0..width)
            .map(|x| {
                let dir = frame.ray_dir(x, y, width, height);
                shape.intersect(frame.origin, dir).map(|hit| PixelGeometry {
                    normal: hit.normal,
                    view: -dir,
                    uv: hit.uv,
                })
            })
            .collect::<Vec<_>>()
    });
    Ok(GeometryBuffer { width, height, pixels: rows.into_iter().flatten().collect() })
}

/// Blinn-Phong exponent for a roughness value: `2 / α² - 2` with `α = r²`.
pub fn specular_exponent(roughness: f64) -> f64 {
    let alpha = (roughness * roughness).max(1e-3);
    (2.0 / (alpha * alpha) - 2.0).clamp(1.0, MAX_EXPONENT)
}

/// Outgoing radiance is affine in albedo: `albedo ⊙ scale + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineShade {
    pub scale: Vec3,
    pub offset: Vec3,
}

impl AffineShade {
    pub fn eval(&self, albedo: Vec3) -> Vec3 {
        albedo.mul_elem(self.scale) + self.offset
    }
}

pub fn shade_terms(
    normal: Vec3,
    view: Vec3,
    roughness: f64,
    metalness: f64,
    lighting: &LightingEnv,
    exponent_scale: f64,
) -> AffineShade {
    let e = specular_exponent(roughness) * exponent_scale;
    let norm = (e + 2.0) / 8.0;
    let mut scale = lighting.ambient;
    let mut offset = Vec3::ZERO;
    for light in &lighting.lights {
        let ndl = normal.dot(light.direction);
        if ndl <= 0.0 {
            continue;
        }
        let h = (light.direction + view).normalized();
        let ndh = normal.dot(h).max(0.0);
        let vdh = view.dot(h).max(0.0);
        let k = (1.0 - vdh).powi(5);
        let d = norm * ndh.powf(e);
        let w = light.intensity * ndl;
        // F0 = 0.04 (1 - m) + albedo m;  F = F0 (1 - k) + k
        scale += w * ((1.0 - metalness) + d * (1.0 - k) * metalness);
        offset += w * (d * (1.0 - k) * DIELECTRIC_F0 * (1.0 - metalness) + d * k);
    }
    AffineShade { scale, offset }
}

fn perturbed_normal(n: Vec3, perturb: Vec3) -> Vec3 {
    if perturb == Vec3::ZERO {
        return n;
    }
    let helper = if n.z.abs() < 0.9 { Vec3::new(0.0, 0.0, 1.0) } else { Vec3::new(1.0, 0.0, 0.0) };
    let t = helper.cross(n).normalized();
    let b = n.cross(t);
    (n + t * perturb.x + b * perturb.y).normalized()
}

pub fn shade_pixel(
    g: &PixelGeometry,
    material: &MaterialSpec,
    lighting: &LightingEnv,
    exponent_scale: f64,
) -> Vec3 {
    let SurfacePoint { albedo, roughness, normal_perturb } = texture_at_unchecked(material, g.uv.0, g.uv.1);
    let mut n = perturbed_normal(g.normal, normal_perturb);
    if n.dot(g.view) < 0.0 {
        // bump pushed the normal past the silhouette
        n = g.normal;
    }
    shade_terms(n, g.view, roughness, material.metalness, lighting, exponent_scale).eval(albedo)
}

pub fn shade_buffer(
    geometry: &GeometryBuffer,
    material: &MaterialSpec,
    lighting: &LightingEnv,
    style: &DomainStyle,
) -> Result<Raster> {
    let (w, h) = (geometry.width, geometry.height);
    let exponent_scale = style.exponent_scale();
    let rows = par::map_range(h, |y| {
        let mut row = Vec::with_capacity(w * 3);
        for px in &geometry.pixels[y * w..(y + 1) * w] {
            let c = px.map_or(Vec3::ZERO, |g| shade_pixel(&g, material, lighting, exponent_scale));
            row.extend_from_slice(&[c.x as f32, c.y as f32, c.z as f32]);
        }
        row
    });
    let mut raster = Raster::new(w, h)?;
    for (dst, src) in raster.data_mut().chunks_mut(w * 3).zip(rows) {
        dst.copy_from_slice(&src);
    }
    if let DomainStyle::Real(style) = style {
        apply_sensor(&mut raster, style);
    }
    Ok(raster)
}

/// Tone curve then additive noise, in a fixed row-major order.
fn apply_sensor(raster: &mut Raster, style: &RealStyle) {
    let mut rng = Rng::seed_from_u64(style.noise_seed);
    let noise = (style.noise_sigma > 0.0).then(|| Normal::new(0.0, style.noise_sigma).expect("sigma > 0"));
    for v in raster.data_mut() {
        let mut c = f64::from(*v).max(0.0).powf(style.tone_gamma);
        if let Some(n) = &noise {
            c += n.sample(&mut rng);
        }
        *v = c.max(0.0) as f32;
    }
}

/// Render one view of a shape with a material. The mask marks pixels whose
/// primary ray hits the shape.
pub fn render_view(
    shape: &Shape,
    material: &MaterialSpec,
    camera: &CameraPose,
    lighting: &LightingEnv,
    style: &DomainStyle,
    resolution: usize,
) -> Result<(Raster, Mask)> {
    lighting.validate()?;
    let geometry = trace_geometry(shape, camera, resolution, resolution)?;
    let raster = shade_buffer(&geometry, material, lighting, style)?;
    Ok((raster, geometry.mask()))
}

/// Canonical swatch camera: distance 3.6, 70° from the pole, in front of
/// the key light, 38° field of view.
pub fn swatch_camera() -> CameraPose {
    camera_at(3.6, 70.0, -90.0, 38.0)
}

/// The radius-1 sphere at the origin that every swatch is rendered on.
pub fn swatch_sphere() -> Shape {
    Shape {
        primitive: Primitive::Sphere { radius: 1.0 },
        transform: NormalizeTransform { center: Vec3::ZERO, scale: 1.0 },
    }
}

pub const MIN_SWATCH_RESOLUTION: usize = 32;

pub fn swatch_geometry(resolution: usize) -> Result<GeometryBuffer> {
    if resolution < MIN_SWATCH_RESOLUTION {
        return Err(Error::Config(format!(
            "swatch resolution {resolution} below minimum {MIN_SWATCH_RESOLUTION}"
        )));
    }
    trace_geometry(&swatch_sphere(), &swatch_camera(), resolution, resolution)
}

/// Material sphere rendered with the frozen camera and light rig.
pub fn render_sphere_swatch(material: &MaterialSpec, resolution: usize) -> Result<Raster> {
    let geometry = swatch_geometry(resolution)?;
    shade_buffer(&geometry, material, &swatch_rig(), &DomainStyle::Synthetic)
}
