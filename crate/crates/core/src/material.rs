//! Procedural PBR materials: the category taxonomy, per-category parameter
//! priors, and closed-form texture programs evaluated at surface uv.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{smoothstep, Vec3};
use crate::rng::{self, hash3, hash_unit, Rng};

/// The eight material categories used for class-level evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Wood,
    Metal,
    Plastic,
    Leather,
    Fabric,
    Stone,
    Ceramic,
    Rubber,
}

impl Category {
    /// Taxonomy order. Gallery builders cycle through categories in this order.
    pub const ALL: [Category; 8] = [
        Category::Wood,
        Category::Metal,
        Category::Plastic,
        Category::Leather,
        Category::Fabric,
        Category::Stone,
        Category::Ceramic,
        Category::Rubber,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Wood => "wood",
            Category::Metal => "metal",
            Category::Plastic => "plastic",
            Category::Leather => "leather",
            Category::Fabric => "fabric",
            Category::Stone => "stone",
            Category::Ceramic => "ceramic",
            Category::Rubber => "rubber",
        }
    }

    pub fn index(self) -> usize {
        Category::ALL.iter().position(|c| *c == self).expect("in taxonomy")
    }

    pub fn prior(self) -> &'static CategoryPrior {
        &PRIORS[self.index()]
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownCategory(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureKind {
    Solid,
    Checker,
    Stripes,
    ValueNoise,
    Marble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureProgram {
    pub kind: TextureKind,
    /// Pattern periods per unit of uv.
    pub uv_scale: f64,
    pub secondary_color: [f64; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSpec {
    pub id: String,
    pub category: Category,
    pub base_color: [f64; 3],
    pub roughness: f64,
    pub metalness: f64,
    pub texture: TextureProgram,
    pub normal_strength: f64,
}

/// Parameter ranges a category's materials are drawn from. Colors are given
/// in HSV with hue in degrees.
#[derive(Debug)]
pub struct CategoryPrior {
    pub hue: (f64, f64),
    pub saturation: (f64, f64),
    pub value: (f64, f64),
    pub roughness: (f64, f64),
    pub metalness: (f64, f64),
    pub textures: &'static [TextureKind],
}

use TextureKind::*;

/// Indexed by `Category::index`.
pub static PRIORS: [CategoryPrior; 8] = [
    // wood
    CategoryPrior {
        hue: (18.0, 40.0),
        saturation: (0.45, 0.8),
        value: (0.3, 0.8),
        roughness: (0.4, 0.8),
        metalness: (0.0, 0.05),
        textures: &[Stripes, ValueNoise, Marble],
    },
    // metal
    CategoryPrior {
        hue: (0.0, 60.0),
        saturation: (0.0, 0.6),
        value: (0.55, 0.98),
        roughness: (0.1, 0.5),
        metalness: (0.7, 1.0),
        textures: &[Solid, ValueNoise],
    },
    // plastic
    CategoryPrior {
        hue: (0.0, 360.0),
        saturation: (0.5, 0.95),
        value: (0.4, 0.95),
        roughness: (0.2, 0.6),
        metalness: (0.0, 0.05),
        textures: &[Solid, Checker],
    },
    // leather
    CategoryPrior {
        hue: (0.0, 35.0),
        saturation: (0.4, 0.85),
        value: (0.12, 0.55),
        roughness: (0.5, 0.8),
        metalness: (0.0, 0.05),
        textures: &[ValueNoise, Solid],
    },
    // fabric
    CategoryPrior {
        hue: (0.0, 360.0),
        saturation: (0.2, 0.8),
        value: (0.3, 0.9),
        roughness: (0.7, 1.0),
        metalness: (0.0, 0.1),
        textures: &[Checker, Stripes, ValueNoise],
    },
    // stone
    CategoryPrior {
        hue: (20.0, 220.0),
        saturation: (0.0, 0.2),
        value: (0.3, 0.85),
        roughness: (0.6, 1.0),
        metalness: (0.0, 0.05),
        textures: &[Marble, ValueNoise],
    },
    // ceramic
    CategoryPrior {
        hue: (0.0, 360.0),
        saturation: (0.0, 0.45),
        value: (0.75, 1.0),
        roughness: (0.05, 0.35),
        metalness: (0.0, 0.0),
        textures: &[Solid, Marble],
    },
    // rubber
    CategoryPrior {
        hue: (0.0, 360.0),
        saturation: (0.0, 0.7),
        value: (0.05, 0.4),
        roughness: (0.6, 0.95),
        metalness: (0.0, 0.0),
        textures: &[Solid, ValueNoise],
    },
];

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m).clamp(0.0, 1.0), (g + m).clamp(0.0, 1.0), (b + m).clamp(0.0, 1.0)]
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Draw a material from the category's prior.
pub fn sample_material(rng: &mut Rng, category: Category) -> MaterialSpec {
    let prior = category.prior();
    let hue = uniform(rng, prior.hue);
    let sat = uniform(rng, prior.saturation);
    let val = uniform(rng, prior.value);
    let base_color = hsv_to_rgb(hue, sat, val);
    let kind = prior.textures[rng.random_range(0..prior.textures.len())];
    // secondary color: a darker or lighter variant of the base hue
    let shift = if rng.random_bool(0.5) { 0.45 } else { 1.6 };
    let secondary_color =
        hsv_to_rgb(hue + uniform(rng, (-15.0, 15.0)), sat, (val * shift).clamp(0.02, 1.0));
    let texture = TextureProgram {
        kind,
        uv_scale: uniform(rng, (1.0, 6.0)),
        secondary_color,
        seed: rng.random(),
    };
    let tag: u64 = rng.random();
    MaterialSpec {
        id: format!("{}-{:016x}", category.name(), tag),
        category,
        base_color,
        roughness: uniform(rng, prior.roughness),
        metalness: uniform(rng, prior.metalness),
        texture,
        normal_strength: uniform(rng, (0.0, 0.4)),
    }
}

/// Sample by category name, rejecting names outside the taxonomy.
pub fn sample_material_named(rng: &mut Rng, category: &str) -> Result<MaterialSpec> {
    Ok(sample_material(rng, category.parse()?))
}

/// A gallery of `n` materials cycling through the taxonomy, with stable
/// indexed ids of the form `{category}-{prefix}{index}`.
pub fn sample_gallery(seed: u64, n: usize, prefix: &str) -> Vec<MaterialSpec> {
    (0..n)
        .map(|i| {
            let category = Category::ALL[i % Category::ALL.len()];
            let mut rng = rng::rng_from(rng::fork_seed_indexed(seed, "material", i as u64));
            let mut spec = sample_material(&mut rng, category);
            spec.id = format!("{}-{prefix}{i:04}", category.name());
            spec
        })
        .collect()
}

impl MaterialSpec {
    pub fn base(&self) -> Vec3 {
        Vec3::from_array(self.base_color)
    }

    pub fn secondary(&self) -> Vec3 {
        Vec3::from_array(self.texture.secondary_color)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = self.base_color.iter().all(|v| unit(*v))
            && self.texture.secondary_color.iter().all(|v| unit(*v))
            && unit(self.roughness)
            && unit(self.metalness)
            && unit(self.normal_strength)
            && self.texture.uv_scale > 0.0
            && self.texture.uv_scale.is_finite();
        if ok && !self.id.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("material `{}` has out-of-range parameters", self.id)))
        }
    }

    /// Whether the material satisfies its category's metalness/roughness prior.
    pub fn satisfies_prior(&self) -> bool {
        let p = self.category.prior();
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo - 1e-12 && v <= hi + 1e-12;
        within(self.roughness, p.roughness) && within(self.metalness, p.metalness)
    }
}

pub fn validate_gallery(gallery: &[MaterialSpec]) -> Result<()> {
    let mut seen = HashSet::new();
    for m in gallery {
        m.validate()?;
        if !seen.insert(m.id.as_str()) {
            return Err(Error::DuplicateId(m.id.clone()));
        }
    }
    Ok(())
}

/// Shading inputs at one surface point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub albedo: Vec3,
    pub roughness: f64,
    /// Tangent-space normal offset; its length never exceeds the material's
    /// `normal_strength`.
    pub normal_perturb: Vec3,
}

/// Bilinear value noise on the integer lattice, smoothstep-interpolated.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (smoothstep(x - x0), smoothstep(y - y0));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let corner = |dx: i64, dy: i64| hash_unit(hash3(seed, ix + dx, iy + dy));
    let top = corner(0, 0) + (corner(1, 0) - corner(0, 0)) * fx;
    let bottom = corner(0, 1) + (corner(1, 1) - corner(0, 1)) * fx;
    top + (bottom - top) * fy
}

/// Three-octave fractal sum of value noise, normalized to [0, 1].
fn fbm(seed: u64, x: f64, y: f64) -> f64 {
    let mut sum = 0.0;
    let mut amp = 0.5;
    let mut freq = 1.0;
    let mut norm = 0.0;
    for octave in 0..3u64 {
        sum += amp * value_noise(seed.wrapping_add(octave), x * freq, y * freq);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / norm
}

/// Pattern mix factor in [0, 1]: 0 selects the base color, 1 the secondary.
fn pattern(tex: &TextureProgram, u: f64, v: f64) -> f64 {
    let s = tex.uv_scale;
    match tex.kind {
        TextureKind::Solid => 0.0,
        TextureKind::Checker => {
            // two cells per period
            let cell = (2.0 * u * s).floor() as i64 + (2.0 * v * s).floor() as i64;
            if cell.rem_euclid(2) == 0 {
                0.0
            } else {
                1.0
            }
        }
        TextureKind::Stripes => {
            if (u * s).fract() < 0.5 {
                0.0
            } else {
                1.0
            }
        }
        TextureKind::ValueNoise => fbm(tex.seed, u * s * 4.0, v * s * 4.0),
        TextureKind::Marble => {
            let turb = fbm(tex.seed, u * s * 3.0, v * s * 3.0);
            0.5 + 0.5 * (std::f64::consts::TAU * (u * s + 2.5 * turb)).sin()
        }
    }
}

fn check_uv(axis: char, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::UvOutOfRange { axis, value })
    }
}

/// Evaluate the material's texture program at `uv`.
pub fn texture_at(spec: &MaterialSpec, uv: (f64, f64)) -> Result<SurfacePoint> {
    check_uv('u', uv.0)?;
    check_uv('v', uv.1)?;
    Ok(texture_at_unchecked(spec, uv.0, uv.1))
}

pub(crate) fn texture_at_unchecked(spec: &MaterialSpec, u: f64, v: f64) -> SurfacePoint {
    let t = pattern(&spec.texture, u, v);
    let albedo = spec.base().lerp(spec.secondary(), t).map(|c| c.clamp(0.0, 1.0));
    let roughness = (spec.roughness * (0.9 + 0.2 * t)).clamp(0.0, 1.0);

    let normal_perturb = if spec.normal_strength > 0.0 {
        // bump gradient of a fine noise field
        let bump_seed = spec.texture.seed ^ 0x5bd1_e995;
        let f = 24.0;
        let h = 1e-3;
        let gx = (value_noise(bump_seed, (u + h) * f, v * f) - value_noise(bump_seed, (u - h) * f, v * f))
            / (2.0 * h * f);
        let gy = (value_noise(bump_seed, u * f, (v + h) * f) - value_noise(bump_seed, u * f, (v - h) * f))
            / (2.0 * h * f);
        let g = Vec3::new(gx, gy, 0.0);
        let len = g.length();
        let scale = if len > 1.0 { spec.normal_strength / len } else { spec.normal_strength };
        g * scale
    } else {
        Vec3::ZERO
    };

    SurfacePoint { albedo, roughness, normal_perturb }
}
