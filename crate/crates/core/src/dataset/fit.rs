//! Inverse rendering of a solid material from one masked image.

use crate::error::{Error, Result};
use crate::material::{Category, MaterialSpec, TextureKind, TextureProgram};
use crate::math::Vec3;
use crate::renderer::{
    shade_terms, swatch_geometry, swatch_rig, trace_geometry, CameraPose, GeometryBuffer, LightingEnv, Mask, Raster,
    Shape,
};

/// Roughness of a solid texture is rendered at this fraction of the material value.
const SOLID_ROUGHNESS_FACTOR: f64 = 0.9;
const MIN_COVERAGE: f64 = 0.01;

/// Geometry and lighting the observed image is explained with.
#[derive(Debug, Clone)]
pub struct FitScene {
    pub geometry: GeometryBuffer,
    pub lighting: LightingEnv,
}

impl FitScene {
    /// The canonical swatch sphere and light rig.
    pub fn swatch(resolution: usize) -> Result<Self> {
        Ok(FitScene { geometry: swatch_geometry(resolution)?, lighting: swatch_rig() })
    }

    /// A known object, camera and lighting.
    pub fn view(shape: &Shape, camera: &CameraPose, lighting: &LightingEnv, resolution: usize) -> Result<Self> {
        Ok(FitScene {
            geometry: trace_geometry(shape, camera, resolution, resolution)?,
            lighting: lighting.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub scene: FitScene,
    /// Coarse grid points per axis before refinement.
    pub grid: usize,
    /// Cap on coordinate-descent sweeps.
    pub max_iters: usize,
    /// Refinement stops once the search step falls below this.
    pub tolerance: f64,
    /// Id and category given to the fitted spec.
    pub id: String,
    pub category: Category,
}

impl FitConfig {
    pub fn new(scene: FitScene) -> Self {
        FitConfig { scene, grid: 11, max_iters: 60, tolerance: 1e-4, id: "fit".into(), category: Category::Plastic }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub spec: MaterialSpec,
    /// Mean squared error per masked pixel channel.
    pub residual: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit before the step shrank below
    /// the tolerance.
    pub converged: bool,
}

struct Observation {
    normal: Vec3,
    view: Vec3,
    color: Vec3,
}

/// Best clamped albedo and its error for fixed roughness and metalness.
fn solve(obs: &[Observation], lighting: &LightingEnv, roughness: f64, metalness: f64) -> (Vec3, f64) {
    let eff = roughness * SOLID_ROUGHNESS_FACTOR;
    let terms: Vec<_> = obs.iter().map(|o| shade_terms(o.normal, o.view, eff, metalness, lighting, 1.0)).collect();
    let mut albedo = [0.0; 3];
    for (c, a) in albedo.iter_mut().enumerate() {
        let (mut num, mut den) = (0.0, 0.0);
        for (t, o) in terms.iter().zip(obs) {
            let s = t.scale.to_array()[c];
            num += s * (o.color.to_array()[c] - t.offset.to_array()[c]);
            den += s * s;
        }
        // one-dimensional convex problem: clamping the free optimum is exact
        *a = if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 0.0 };
    }
    let albedo = Vec3::from_array(albedo);
    let err: f64 = terms
        .iter()
        .zip(obs)
        .map(|(t, o)| {
            let d = t.eval(albedo) - o.color;
            d.dot(d)
        })
        .sum();
    (albedo, err / (3 * obs.len()) as f64)
}

/// Fit a solid, unbumped material to the masked pixels of `image` by least
/// squares under the scene's geometry and lighting. Base color is solved in
/// closed form; roughness and metalness come from a grid search refined by
/// coordinate descent.
pub fn fit_material(image: &Raster, mask: &Mask, config: &FitConfig) -> Result<FitResult> {
    let g = &config.scene.geometry;
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(Error::Shape("image and mask dimensions differ".into()));
    }
    if g.width != image.width() || g.height != image.height() {
        return Err(Error::Shape("fit scene resolution differs from the image".into()));
    }
    if mask.coverage() < MIN_COVERAGE {
        return Err(Error::Empty(format!("mask covers {:.3}% of the image, need 1%", 100.0 * mask.coverage())));
    }
    let obs: Vec<Observation> = g
        .pixels
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.bits()[*i])
        .filter_map(|(i, px)| {
            px.map(|p| {
                let [r, gg, b] = image.get(i % g.width, i / g.width);
                Observation { normal: p.normal, view: p.view, color: Vec3::new(r.into(), gg.into(), b.into()) }
            })
        })
        .collect();
    if obs.is_empty() {
        return Err(Error::Empty("no masked pixel hits the fit geometry".into()));
    }
    let lighting = &config.scene.lighting;
    let eval = |r: f64, m: f64| solve(&obs, lighting, r, m).1;

    let n = config.grid.max(2);
    let axis = |k: usize| k as f64 / (n - 1) as f64;
    let (mut r, mut m, mut best) = (0.0, 0.0, f64::INFINITY);
    for i in 0..n {
        for j in 0..n {
            let e = eval(axis(i), axis(j));
            if e < best {
                (r, m, best) = (axis(i), axis(j), e);
            }
        }
    }

    let mut step = 1.0 / (n - 1) as f64;
    let mut iterations = 0;
    while step >= config.tolerance && iterations < config.max_iters {
        iterations += 1;
        let mut moved = false;
        for (dr, dm) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
            let (cr, cm) = ((r + dr).clamp(0.0, 1.0), (m + dm).clamp(0.0, 1.0));
            let e = eval(cr, cm);
            if e < best {
                (r, m, best) = (cr, cm, e);
                moved = true;
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    let converged = step < config.tolerance;
    let (albedo, residual) = solve(&obs, lighting, r, m);
    let spec = MaterialSpec {
        id: config.id.clone(),
        category: config.category,
        base_color: albedo.to_array(),
        roughness: r,
        metalness: m,
        texture: TextureProgram { kind: TextureKind::Solid, uv_scale: 1.0, secondary_color: albedo.to_array(), seed: 0 },
        normal_strength: 0.0,
    };
    Ok(FitResult { spec, residual, iterations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::sample_material;
    use crate::renderer::{render_sphere_swatch, DirectionalLight};
    use crate::rng::rng_from;

    fn solid(base: [f64; 3], roughness: f64, metalness: f64) -> MaterialSpec {
        MaterialSpec {
            id: "known".into(),
            category: Category::Plastic,
            base_color: base,
            roughness,
            metalness,
            texture: TextureProgram { kind: TextureKind::Solid, uv_scale: 1.0, secondary_color: base, seed: 0 },
            normal_strength: 0.0,
        }
    }

    fn linf(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn recovers_clean_swatch() {
        let scene = FitScene::swatch(48).unwrap();
        let mask = scene.geometry.mask();
        let cfg = FitConfig::new(scene);
        for (base, r, m) in [
            ([0.2, 0.4, 0.6], 0.35, 0.1),
            ([0.8, 0.5, 0.2], 0.6, 0.9),
            ([0.1, 0.1, 0.1], 0.8, 0.0),
            ([0.7, 0.7, 0.75], 0.2, 1.0),
        ] {
            let truth = solid(base, r, m);
            let img = render_sphere_swatch(&truth, 48).unwrap();
            let fit = fit_material(&img, &mask, &cfg).unwrap();
            let got = [fit.spec.base_color.as_slice(), &[fit.spec.roughness, fit.spec.metalness]].concat();
            let want = [base.as_slice(), &[r, m]].concat();
            assert!(linf(&got, &want) <= 0.02, "{got:?} vs {want:?}");
            assert!(fit.residual < 1e-8);
        }
    }

    #[test]
    fn ambient_only_black_gives_zero_albedo() {
        let mut scene = FitScene::swatch(32).unwrap();
        scene.lighting = LightingEnv { lights: Vec::<DirectionalLight>::new(), ambient: Vec3::splat(0.2), seed: 0 };
        let mask = scene.geometry.mask();
        let img = Raster::new(32, 32).unwrap();
        let fit = fit_material(&img, &mask, &FitConfig::new(scene)).unwrap();
        assert!(fit.spec.base_color.iter().all(|c| c.abs() <= 0.02));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let scene = FitScene::swatch(32).unwrap();
        let img = Raster::new(32, 32).unwrap();
        let err = fit_material(&img, &Mask::new(32, 32), &FitConfig::new(scene));
        assert!(matches!(err, Err(Error::Empty(_))));
    }

    #[test]
    fn iteration_cap_reports_unconverged() {
        let scene = FitScene::swatch(32).unwrap();
        let mask = scene.geometry.mask();
        let spec = sample_material(&mut rng_from(2), Category::Wood);
        let img = render_sphere_swatch(&spec, 32).unwrap();
        let cfg = FitConfig { max_iters: 1, ..FitConfig::new(scene) };
        let fit = fit_material(&img, &mask, &cfg).unwrap();
        assert!(!fit.converged && fit.iterations == 1);
        assert!(fit.residual.is_finite());
    }
}
