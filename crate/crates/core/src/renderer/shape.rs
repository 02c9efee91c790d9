use std::f64::consts::{PI, TAU};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::rng::Rng;

/// Uniform rescale and recentering that maps a bounding box into the
/// origin-centered unit cube: `p' = scale * (p - center)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizeTransform {
    pub center: Vec3,
    pub scale: f64,
}

impl NormalizeTransform {
    pub fn from_points(points: &[Vec3]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::DegenerateGeometry(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        let (lo, hi) = points.iter().fold(
            (Vec3::splat(f64::INFINITY), Vec3::splat(f64::NEG_INFINITY)),
            |(lo, hi), p| (lo.min(*p), hi.max(*p)),
        );
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::DegenerateGeometry("non-finite coordinates".into()));
        }
        let extent = (hi - lo).max_elem();
        if extent <= 0.0 {
            return Err(Error::DegenerateGeometry("all points coincide".into()));
        }
        Ok(NormalizeTransform { center: (hi + lo) * 0.5, scale: 1.0 / extent })
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        (p - self.center) * self.scale
    }

    pub fn invert(&self, p: Vec3) -> Vec3 {
        p / self.scale + self.center
    }
}

/// Center a point set's bounding box at the origin and scale it uniformly so
/// the largest axis extent is 1.
pub fn normalize_model(points: &[Vec3]) -> Result<Vec<Vec3>> {
    let t = NormalizeTransform::from_points(points)?;
    Ok(points.iter().map(|p| t.apply(*p)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Torus,
    Capsule,
    Blob,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] =
        [ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Torus, ShapeKind::Capsule, ShapeKind::Blob];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Torus => "torus",
            ShapeKind::Capsule => "capsule",
            ShapeKind::Blob => "blob",
        }
    }
}

/// Local-space primitive parameters. Every primitive is modelled around the
/// origin, then normalized into the unit cube by [`Shape::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Sphere { radius: f64 },
    Cube { half_extents: Vec3 },
    Torus { major: f64, minor: f64 },
    Capsule { half_length: f64, radius: f64 },
    Blob { centers: Vec<Vec3>, radii: Vec<f64> },
}

impl Primitive {
    pub fn default_for(kind: ShapeKind) -> Self {
        match kind {
            ShapeKind::Sphere => Primitive::Sphere { radius: 1.0 },
            ShapeKind::Cube => Primitive::Cube { half_extents: Vec3::new(1.0, 0.8, 0.65) },
            ShapeKind::Torus => Primitive::Torus { major: 1.0, minor: 0.4 },
            ShapeKind::Capsule => Primitive::Capsule { half_length: 0.7, radius: 0.45 },
            ShapeKind::Blob => Primitive::Blob {
                centers: vec![
                    Vec3::new(-0.45, 0.0, 0.0),
                    Vec3::new(0.4, 0.15, 0.1),
                    Vec3::new(0.0, -0.1, 0.45),
                ],
                radii: vec![0.55, 0.5, 0.45],
            },
        }
    }

    pub fn kind(&self) -> ShapeKind {
        match self {
            Primitive::Sphere { .. } => ShapeKind::Sphere,
            Primitive::Cube { .. } => ShapeKind::Cube,
            Primitive::Torus { .. } => ShapeKind::Torus,
            Primitive::Capsule { .. } => ShapeKind::Capsule,
            Primitive::Blob { .. } => ShapeKind::Blob,
        }
    }

    fn bounds(&self) -> (Vec3, Vec3) {
        match self {
            Primitive::Sphere { radius } => (Vec3::splat(-radius), Vec3::splat(*radius)),
            Primitive::Cube { half_extents } => (-*half_extents, *half_extents),
            Primitive::Torus { major, minor } => {
                let r = major + minor;
                (Vec3::new(-r, -r, -minor), Vec3::new(r, r, *minor))
            }
            Primitive::Capsule { half_length, radius } => {
                let r = *radius;
                (Vec3::new(-r, -r, -half_length - r), Vec3::new(r, r, half_length + r))
            }
            Primitive::Blob { centers, radii } => centers.iter().zip(radii).fold(
                (Vec3::splat(f64::INFINITY), Vec3::splat(f64::NEG_INFINITY)),
                |(lo, hi), (c, r)| (lo.min(*c - Vec3::splat(*r)), hi.max(*c + Vec3::splat(*r))),
            ),
        }
    }

    /// Exact signed distance (the blob is a hard union, so its SDF is exact
    /// outside the surface).
    fn sdf(&self, q: Vec3) -> f64 {
        match self {
            Primitive::Sphere { radius } => q.length() - radius,
            Primitive::Cube { half_extents } => {
                let d = q.abs() - *half_extents;
                d.max(Vec3::ZERO).length() + d.max_elem().min(0.0)
            }
            Primitive::Torus { major, minor } => {
                let ring = (q.x * q.x + q.y * q.y).sqrt() - major;
                (ring * ring + q.z * q.z).sqrt() - minor
            }
            Primitive::Capsule { half_length, radius } => {
                let z = q.z.clamp(-half_length, *half_length);
                (q - Vec3::new(0.0, 0.0, z)).length() - radius
            }
            Primitive::Blob { centers, radii } => centers
                .iter()
                .zip(radii)
                .map(|(c, r)| (q - *c).length() - r)
                .fold(f64::INFINITY, f64::min),
        }
    }

    fn normal(&self, q: Vec3) -> Vec3 {
        match self {
            Primitive::Sphere { .. } => q.normalized(),
            Primitive::Cube { half_extents } => {
                let r = Vec3::new(q.x / half_extents.x, q.y / half_extents.y, q.z / half_extents.z);
                let a = r.abs();
                if a.x >= a.y && a.x >= a.z {
                    Vec3::new(r.x.signum(), 0.0, 0.0)
                } else if a.y >= a.z {
                    Vec3::new(0.0, r.y.signum(), 0.0)
                } else {
                    Vec3::new(0.0, 0.0, r.z.signum())
                }
            }
            Primitive::Torus { major, .. } => {
                let rho = (q.x * q.x + q.y * q.y).sqrt().max(1e-12);
                let ring = Vec3::new(q.x / rho * major, q.y / rho * major, 0.0);
                (q - ring).normalized()
            }
            Primitive::Capsule { half_length, .. } => {
                let z = q.z.clamp(-half_length, *half_length);
                (q - Vec3::new(0.0, 0.0, z)).normalized()
            }
            Primitive::Blob { centers, radii } => {
                let (c, _) = centers
                    .iter()
                    .zip(radii)
                    .map(|(c, r)| (*c, (q - *c).length() - r))
                    .fold((Vec3::ZERO, f64::INFINITY), |best, x| if x.1 < best.1 { x } else { best });
                (q - c).normalized()
            }
        }
    }

    /// Ray-surface intersection in local space; `dir` must be unit length.
    fn intersect(&self, origin: Vec3, dir: Vec3, t_max: f64) -> Option<f64> {
        match self {
            Primitive::Sphere { radius } => {
                let b = origin.dot(dir);
                let c = origin.dot(origin) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t0 = -b - s;
                let t = if t0 > 0.0 { t0 } else { -b + s };
                (t > 0.0 && t <= t_max).then_some(t)
            }
            Primitive::Cube { half_extents } => {
                let (t0, t1) = slab(origin, dir, -*half_extents, *half_extents)?;
                let t = if t0 > 0.0 { t0 } else { t1 };
                (t > 0.0 && t <= t_max).then_some(t)
            }
            _ => {
                let (lo, hi) = self.bounds();
                let pad = Vec3::splat(1e-3);
                let (t_in, t_out) = slab(origin, dir, lo - pad, hi + pad)?;
                let mut t = t_in.max(0.0);
                let t_end = t_out.min(t_max);
                for _ in 0..1024 {
                    if t > t_end {
                        return None;
                    }
                    let d = self.sdf(origin + dir * t);
                    if d < HIT_EPS {
                        return Some(t);
                    }
                    t += d;
                }
                None
            }
        }
    }

    fn sample_surface(&self, rng: &mut Rng) -> Vec3 {
        match self {
            Primitive::Sphere { radius } => random_unit(rng) * *radius,
            Primitive::Cube { half_extents: h } => {
                let axis = rng.random_range(0..3);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let mut p = Vec3::new(
                    rng.random_range(-h.x..=h.x),
                    rng.random_range(-h.y..=h.y),
                    rng.random_range(-h.z..=h.z),
                );
                match axis {
                    0 => p.x = sign * h.x,
                    1 => p.y = sign * h.y,
                    _ => p.z = sign * h.z,
                }
                p
            }
            Primitive::Torus { major, minor } => {
                let (u, v) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
                let rho = major + minor * v.cos();
                Vec3::new(rho * u.cos(), rho * u.sin(), minor * v.sin())
            }
            Primitive::Capsule { half_length, radius } => {
                let d = random_unit(rng) * *radius;
                let z = rng.random_range(-half_length..=*half_length);
                let cap = if d.z >= 0.0 { *half_length } else { -half_length };
                if rng.random_bool(0.5) {
                    Vec3::new(d.x, d.y, cap + d.z)
                } else {
                    let rho = (d.x * d.x + d.y * d.y).sqrt().max(1e-12);
                    Vec3::new(d.x / rho * radius, d.y / rho * radius, z)
                }
            }
            Primitive::Blob { centers, radii } => loop {
                let i = rng.random_range(0..centers.len());
                let p = centers[i] + random_unit(rng) * radii[i];
                if self.sdf(p) > -1e-9 {
                    return p;
                }
            },
        }
    }
}

const HIT_EPS: f64 = 1e-6;

fn random_unit(rng: &mut Rng) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..TAU);
    let s = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(s * phi.cos(), s * phi.sin(), z)
}

/// Slab test against an axis-aligned box. Returns the entry/exit parameters.
pub(crate) fn slab(origin: Vec3, dir: Vec3, lo: Vec3, hi: Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for ((o, d), (l, h)) in origin
        .to_array()
        .into_iter()
        .zip(dir.to_array())
        .zip(lo.to_array().into_iter().zip(hi.to_array()))
    {
        if d.abs() < 1e-300 {
            if o < l || o > h {
                return None;
            }
            continue;
        }
        let (a, b) = ((l - o) / d, (h - o) / d);
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        t0 = t0.max(a);
        t1 = t1.min(b);
    }
    (t0 <= t1 && t1 > 0.0).then_some((t0, t1))
}

/// A primitive placed in the scene after unit-cube normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub primitive: Primitive,
    pub transform: NormalizeTransform,
}

#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub t: f64,
    pub position: Vec3,
    pub normal: Vec3,
    /// Spherical surface parameterization about the shape center.
    pub uv: (f64, f64),
}

impl Shape {
    pub fn new(primitive: Primitive) -> Result<Self> {
        let (lo, hi) = primitive.bounds();
        let corners: Vec<Vec3> = (0..8)
            .map(|i| {
                Vec3::new(
                    if i & 1 == 0 { lo.x } else { hi.x },
                    if i & 2 == 0 { lo.y } else { hi.y },
                    if i & 4 == 0 { lo.z } else { hi.z },
                )
            })
            .collect();
        let transform = NormalizeTransform::from_points(&corners)?;
        let (ext_lo, ext_hi) = (transform.apply(lo), transform.apply(hi));
        if (ext_hi - ext_lo).to_array().iter().any(|e| *e <= 1e-6) {
            return Err(Error::DegenerateGeometry(format!(
                "{} has zero extent along an axis",
                primitive.kind().name()
            )));
        }
        Ok(Shape { primitive, transform })
    }

    pub fn of_kind(kind: ShapeKind) -> Self {
        Shape::new(Primitive::default_for(kind)).expect("default primitives are non-degenerate")
    }

    /// The first `n` shape kinds, cycling if `n` exceeds the kind count.
    pub fn default_set(n: usize) -> Vec<Shape> {
        (0..n).map(|i| Shape::of_kind(ShapeKind::ALL[i % ShapeKind::ALL.len()])).collect()
    }

    pub fn kind(&self) -> ShapeKind {
        self.primitive.kind()
    }

    /// Signed distance in world units.
    pub fn sdf(&self, p: Vec3) -> f64 {
        self.primitive.sdf(self.transform.invert(p)) * self.transform.scale
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let (lo, hi) = self.primitive.bounds();
        (self.transform.apply(lo), self.transform.apply(hi))
    }

    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<Hit> {
        let s = self.transform.scale;
        let local_origin = self.transform.invert(origin);
        let t_local = self.primitive.intersect(local_origin, dir, f64::INFINITY)?;
        let q = local_origin + dir * t_local;
        let normal = self.primitive.normal(q);
        let len = q.length().max(1e-12);
        let u = q.y.atan2(q.x) / TAU + 0.5;
        let v = (q.z / len).clamp(-1.0, 1.0).acos() / PI;
        Some(Hit {
            t: t_local * s,
            position: self.transform.apply(q),
            normal,
            uv: (u.clamp(0.0, 1.0), v.clamp(0.0, 1.0)),
        })
    }

    /// Points on the surface, in world units.
    pub fn sample_surface(&self, rng: &mut Rng, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| self.transform.apply(self.primitive.sample_surface(rng))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn symmetric_cube_corners() {
        let out = normalize_model(&[Vec3::splat(-2.0), Vec3::splat(2.0)]).unwrap();
        assert_eq!(out, vec![Vec3::splat(-0.5), Vec3::splat(0.5)]);
    }

    #[test]
    fn asymmetric_box_corner() {
        let out = normalize_model(&[Vec3::ZERO, Vec3::new(4.0, 2.0, 1.0)]).unwrap();
        let p = out[1];
        assert!((p.x - 0.5).abs() < 1e-12);
        assert!((p.y - 0.25).abs() < 1e-12);
        assert!((p.z - 0.125).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            normalize_model(&[Vec3::splat(1.0); 5]),
            Err(Error::DegenerateGeometry(_))
        ));
        assert!(normalize_model(&[Vec3::ZERO]).is_err());
        // flat along two axes is fine as long as one axis has extent
        assert!(normalize_model(&[Vec3::ZERO, Vec3::new(0.0, 0.0, 3.0)]).is_ok());
    }

    #[test]
    fn shapes_fit_unit_cube_and_surface_samples_lie_on_surface() {
        let mut rng = rng_from(5);
        for kind in ShapeKind::ALL {
            let shape = Shape::of_kind(kind);
            let (lo, hi) = shape.bounds();
            assert!(((hi - lo).max_elem() - 1.0).abs() < 1e-12, "{kind:?}");
            assert!(((hi + lo) * 0.5).length() < 1e-12);
            for p in shape.sample_surface(&mut rng, 200) {
                assert!(shape.sdf(p).abs() < 1e-9, "{kind:?} {p:?} {}", shape.sdf(p));
            }
        }
    }

    #[test]
    fn intersection_lands_on_surface() {
        let mut rng = rng_from(9);
        let origin = Vec3::new(0.3, -3.0, 1.2);
        for kind in ShapeKind::ALL {
            let shape = Shape::of_kind(kind);
            for target in shape.sample_surface(&mut rng, 50) {
                let dir = (target - origin).normalized();
                let hit = shape.intersect(origin, dir).expect("aimed at a surface point");
                assert!(hit.t <= (target - origin).length() + 1e-6);
                assert!(shape.sdf(hit.position).abs() < 1e-5, "{kind:?}");
                assert!((hit.normal.length() - 1.0).abs() < 1e-9);
                assert!(hit.normal.dot(dir) <= 1e-9, "{kind:?} normal faces the camera");
            }
        }
    }
}
