//! Synthetic and real-analog datasets of (image, mask, material) triples,
//! and their on-disk layout:
//!
//! ```text
//! <dir>/header.json      dataset header, swatch checksums
//! <dir>/gallery.json     JSON array of material specs
//! <dir>/manifest.jsonl   one sample record per line, sorted by id
//! <dir>/images/<id>.ppm
//! <dir>/masks/<id>.pgm
//! <dir>/spheres/<material id>.ppm
//! ```

mod fit;
mod store;

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{patchify, EncoderConfig};
use crate::error::{Error, Result};
use crate::material::{validate_gallery, Category, MaterialSpec};
use crate::par;
use crate::renderer::{
    render_sphere_swatch, render_view, sample_lighting, DomainStyle, HemisphereSampler, Mask, Raster, RealStyle, Shape,
    ShapeKind,
};
use crate::rng::{self, Rng};
use crate::training::{apply_mask, is_train_sample, PairSet};

pub use fit::{fit_material, FitConfig, FitResult, FitScene};
pub use store::{load_gallery, load_manifest, save_manifest};

pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Synthetic,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub material_id: String,
    pub category: Category,
    pub domain: Domain,
    pub shape: ShapeKind,
    pub view_index: usize,
    pub split: Split,
    pub image: String,
    pub mask: String,
    pub image_sha256: String,
    pub mask_sha256: String,
    /// Real-analog only: the material the image was rendered with, before
    /// fitting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_material_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format: u32,
    pub dataset_id: String,
    pub domain: Domain,
    pub gallery: String,
    pub seed: u64,
    pub train_fraction: f64,
    pub resolution: usize,
    pub n_samples: usize,
    /// Checksum of each swatch file, keyed by material id.
    pub spheres: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub gallery: Vec<MaterialSpec>,
    pub samples: Vec<SampleRecord>,
}

/// A manifest together with the rasters it references, index-aligned with
/// `manifest.samples` and `manifest.gallery`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Raster>,
    pub masks: Vec<Mask>,
    pub swatches: Vec<Raster>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn image_path(id: &str) -> String {
    format!("images/{id}.ppm")
}

pub fn mask_path(id: &str) -> String {
    format!("masks/{id}.pgm")
}

pub fn sphere_path(material_id: &str) -> String {
    format!("spheres/{material_id}.ppm")
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn material_index(&self) -> BTreeMap<&str, usize> {
        self.manifest.gallery.iter().enumerate().map(|(i, m)| (m.id.as_str(), i)).collect()
    }

    /// Check the structural invariants tying samples, rasters and gallery.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        validate_gallery(&m.gallery)?;
        let n = m.samples.len();
        if self.images.len() != n || self.masks.len() != n || self.swatches.len() != m.gallery.len() {
            return Err(Error::Shape("dataset rasters do not line up with the manifest".into()));
        }
        let index = self.material_index();
        for (k, s) in m.samples.iter().enumerate() {
            if !index.contains_key(s.material_id.as_str()) {
                return Err(Error::Config(format!("sample {} refers to unknown material {}", s.id, s.material_id)));
            }
            let (img, mask) = (&self.images[k], &self.masks[k]);
            if img.width() != mask.width() || img.height() != mask.height() {
                return Err(Error::Shape(format!("sample {} has mismatched image and mask", s.id)));
            }
        }
        Ok(())
    }

    /// Masked, patchified pairs for training. Swatches must already be at
    /// the encoder resolution.
    pub fn pair_set(&self, encoder: &EncoderConfig) -> Result<PairSet> {
        let index = self.material_index();
        let images = par::map_range(self.len(), |k| patchify(encoder, &apply_mask(&self.images[k], &self.masks[k])?));
        let materials = par::map(&self.swatches, |s| patchify(encoder, s));
        Ok(PairSet {
            sample_ids: self.manifest.samples.iter().map(|s| s.id.clone()).collect(),
            images: images.into_iter().collect::<Result<_>>()?,
            material_of: self.manifest.samples.iter().map(|s| index[s.material_id.as_str()]).collect(),
            material_ids: self.manifest.gallery.iter().map(|m| m.id.clone()).collect(),
            materials: materials.into_iter().collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub dataset_id: String,
    pub seed: u64,
    pub resolution: usize,
    pub train_fraction: f64,
    pub camera: HemisphereSampler,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            dataset_id: "dataset".into(),
            seed: 0,
            resolution: 32,
            train_fraction: 0.9,
            camera: HemisphereSampler::default(),
        }
    }
}

struct RenderedView {
    image: Raster,
    mask: Mask,
    shape: usize,
    camera: crate::renderer::CameraPose,
    lighting: crate::renderer::LightingEnv,
}

fn azimuth_deg(p: crate::math::Vec3) -> f64 {
    p.y.atan2(p.x).to_degrees()
}

/// One view of `material` on `shapes[shape]` (or a random shape when
/// `shape` is `None`) with a fresh camera and lighting.
fn render_one(
    rng: &mut Rng,
    material: &MaterialSpec,
    shapes: &[Shape],
    shape: Option<usize>,
    camera: &HemisphereSampler,
    style: Option<RealStyle>,
    resolution: usize,
) -> Result<RenderedView> {
    let shape = shape.unwrap_or_else(|| rng.random_range(0..shapes.len()));
    let cam = camera.sample(rng)?;
    let lighting = sample_lighting(rng, azimuth_deg(cam.position));
    let style = match style {
        Some(s) => DomainStyle::Real(RealStyle { noise_seed: rng.random(), ..s }),
        None => DomainStyle::Synthetic,
    };
    let (image, mask) = render_view(&shapes[shape], material, &cam, &lighting, &style, resolution)?;
    Ok(RenderedView { image: image.quantized(), mask, shape, camera: cam, lighting })
}

fn check_inputs(gallery: &[MaterialSpec], shapes: &[Shape]) -> Result<()> {
    if gallery.is_empty() {
        return Err(Error::Config("gallery is empty".into()));
    }
    if shapes.is_empty() {
        return Err(Error::Config("no shapes given".into()));
    }
    validate_gallery(gallery)
}

fn record(
    id: String,
    material: &MaterialSpec,
    domain: Domain,
    shape: ShapeKind,
    view_index: usize,
    image: &Raster,
    mask: &Mask,
    config: &RenderConfig,
) -> Result<SampleRecord> {
    Ok(SampleRecord {
        split: if is_train_sample(&id, config.seed, config.train_fraction) { Split::Train } else { Split::Val },
        image: image_path(&id),
        mask: mask_path(&id),
        image_sha256: sha256_hex(&image.encode_ppm()?),
        mask_sha256: sha256_hex(&mask.encode_pgm()?),
        material_id: material.id.clone(),
        category: material.category,
        domain,
        shape,
        view_index,
        id,
        source_material_id: None,
        fit_residual: None,
    })
}

fn assemble(
    domain: Domain,
    gallery: Vec<MaterialSpec>,
    mut samples: Vec<(SampleRecord, Raster, Mask)>,
    config: &RenderConfig,
) -> Result<Dataset> {
    samples.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    let swatches = par::map(&gallery, |m| render_sphere_swatch(m, config.resolution).map(|r| r.quantized()));
    let swatches: Vec<Raster> = swatches.into_iter().collect::<Result<_>>()?;
    let mut spheres = BTreeMap::new();
    for (m, s) in gallery.iter().zip(&swatches) {
        spheres.insert(m.id.clone(), sha256_hex(&s.encode_ppm()?));
    }
    let header = ManifestHeader {
        format: MANIFEST_FORMAT,
        dataset_id: config.dataset_id.clone(),
        domain,
        gallery: "gallery.json".into(),
        seed: config.seed,
        train_fraction: config.train_fraction,
        resolution: config.resolution,
        n_samples: samples.len(),
        spheres,
    };
    let mut records = Vec::with_capacity(samples.len());
    let mut images = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for (r, i, m) in samples {
        records.push(r);
        images.push(i);
        masks.push(m);
    }
    let ds = Dataset { manifest: DatasetManifest { header, gallery, samples: records }, images, masks, swatches };
    ds.validate()?;
    Ok(ds)
}

/// Number of samples `build_synthetic` produces.
pub fn synthetic_count(materials: usize, shapes: usize, views_per_combo: usize) -> usize {
    materials * shapes * views_per_combo
}

/// Number of (material, shape) combinations behind `n_samples` renders at
/// `views_per_combo` views each, if it divides evenly.
pub fn combinations_for(n_samples: usize, views_per_combo: usize) -> Option<usize> {
    (views_per_combo > 0 && n_samples % views_per_combo == 0).then(|| n_samples / views_per_combo)
}

/// Render every (material, shape) combination from `views_per_combo` random
/// cameras with fresh lighting.
pub fn build_synthetic(
    gallery: &[MaterialSpec],
    shapes: &[Shape],
    views_per_combo: usize,
    config: &RenderConfig,
) -> Result<Dataset> {
    check_inputs(gallery, shapes)?;
    if views_per_combo == 0 {
        return Err(Error::Config("views_per_combo must be at least 1".into()));
    }
    let total = synthetic_count(gallery.len(), shapes.len(), views_per_combo);
    let samples = par::map_range(total, |idx| {
        let v = idx % views_per_combo;
        let s = (idx / views_per_combo) % shapes.len();
        let m = &gallery[idx / (views_per_combo * shapes.len())];
        let mut rng = rng::rng_from(rng::fork_seed_indexed(config.seed, "synthetic-view", idx as u64));
        let view = render_one(&mut rng, m, shapes, Some(s), &config.camera, None, config.resolution)?;
        let kind = shapes[s].kind();
        let id = format!("syn-{}-{}-{v:02}", m.id, kind.name());
        let rec = record(id, m, Domain::Synthetic, kind, v, &view.image, &view.mask, config)?;
        Ok((rec, view.image, view.mask))
    });
    let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;
    assemble(Domain::Synthetic, gallery.to_vec(), samples, config)
}

/// How fits with a large residual are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rejection {
    /// Threshold = `factor` times the median residual of a calibration run
    /// of `samples` fits.
    Calibrated { factor: f64, samples: usize },
    Fixed(f64),
    Disabled,
}

impl Default for Rejection {
    fn default() -> Self {
        Rejection::Calibrated { factor: 3.0, samples: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RealConfig {
    pub render: RenderConfig,
    pub style: RealStyle,
    pub rejection: Rejection,
    pub fit_grid: usize,
    pub fit_max_iters: usize,
}

impl Default for RealConfig {
    fn default() -> Self {
        RealConfig {
            render: RenderConfig { dataset_id: "real".into(), ..RenderConfig::default() },
            style: RealStyle::default(),
            rejection: Rejection::default(),
            fit_grid: 11,
            fit_max_iters: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedSample {
    pub id: String,
    pub source_material_id: String,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct RealBuild {
    pub dataset: Dataset,
    pub rejected: Vec<RejectedSample>,
    pub threshold: f64,
}

struct FittedView {
    view: RenderedView,
    source: usize,
    fit: FitResult,
}

fn real_view(
    label: &str,
    k: usize,
    gallery: &[MaterialSpec],
    shapes: &[Shape],
    config: &RealConfig,
) -> Result<(RenderedView, usize)> {
    let seed = rng::fork_seed_indexed(config.render.seed, label, k as u64);
    let mut rng = rng::rng_from(seed);
    let source = k % gallery.len();
    let view = render_one(
        &mut rng,
        &gallery[source],
        shapes,
        None,
        &config.render.camera,
        Some(config.style),
        config.render.resolution,
    )?;
    Ok((view, source))
}

fn fit_view(
    label: &str,
    k: usize,
    gallery: &[MaterialSpec],
    shapes: &[Shape],
    config: &RealConfig,
) -> Result<FittedView> {
    let (view, source) = real_view(label, k, gallery, shapes, config)?;
    let scene = FitScene::view(&shapes[view.shape], &view.camera, &view.lighting, config.render.resolution)?;
    let fit_cfg = FitConfig {
        grid: config.fit_grid,
        max_iters: config.fit_max_iters,
        id: format!("fit-{k:05}"),
        category: gallery[source].category,
        ..FitConfig::new(scene)
    };
    let fit = fit_material(&view.image, &view.mask, &fit_cfg)?;
    Ok(FittedView { view, source, fit })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Render "real-style" images of source materials, fit a solid material to
/// each and use the fitted material's swatch as the sample's target.
/// Materials cycle through `source_gallery` so categories stay balanced.
/// Fits above the rejection threshold are dropped and replaced by further
/// draws, up to four attempts per requested sample.
pub fn build_real_analog(
    source_gallery: &[MaterialSpec],
    shapes: &[Shape],
    n_samples: usize,
    config: &RealConfig,
) -> Result<RealBuild> {
    check_inputs(source_gallery, shapes)?;
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let threshold = match config.rejection {
        Rejection::Disabled => f64::INFINITY,
        Rejection::Fixed(t) => t,
        Rejection::Calibrated { factor, samples } => {
            let fits = par::map_range(samples.max(1), |k| fit_view("real-calibration", k, source_gallery, shapes, config));
            let residuals = fits.into_iter().map(|f| f.map(|f| f.fit.residual)).collect::<Result<Vec<_>>>()?;
            factor * median(residuals)
        }
    };
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    let mut next = 0;
    let cap = 4 * n_samples;
    while accepted.len() < n_samples && next < cap {
        let want = (n_samples - accepted.len()).min(cap - next);
        let batch = par::map_range(want, |i| fit_view("real-sample", next + i, source_gallery, shapes, config));
        for (i, f) in batch.into_iter().enumerate() {
            let f = f?;
            let k = next + i;
            if f.fit.residual > threshold || !f.fit.residual.is_finite() {
                tracing::warn!(sample = k, residual = f.fit.residual, threshold, "fit rejected");
                rejected.push(RejectedSample {
                    id: format!("real-{k:05}"),
                    source_material_id: source_gallery[f.source].id.clone(),
                    residual: f.fit.residual,
                });
            } else {
                accepted.push((k, f));
            }
        }
        next += want;
    }
    if accepted.len() < n_samples {
        tracing::warn!(accepted = accepted.len(), n_samples, "stopped after the attempt cap");
    }
    let mut gallery = Vec::with_capacity(accepted.len());
    let mut samples = Vec::with_capacity(accepted.len());
    for (k, f) in accepted {
        let spec = f.fit.spec.clone();
        let id = format!("real-{k:05}");
        let shape = shapes[f.view.shape].kind();
        let mut rec = record(id, &spec, Domain::Real, shape, 0, &f.view.image, &f.view.mask, &config.render)?;
        rec.source_material_id = Some(source_gallery[f.source].id.clone());
        rec.fit_residual = Some(f.fit.residual);
        samples.push((rec, f.view.image, f.view.mask));
        gallery.push(spec);
    }
    let dataset = assemble(Domain::Real, gallery, samples, &config.render)?;
    Ok(RealBuild { dataset, rejected, threshold })
}

/// Real-style renders labelled with their generating material, without
/// fitting. Used as retrieval queries against the source gallery.
pub fn build_real_views(
    gallery: &[MaterialSpec],
    shapes: &[Shape],
    n_samples: usize,
    config: &RealConfig,
) -> Result<Dataset> {
    check_inputs(gallery, shapes)?;
    let samples = par::map_range(n_samples, |k| {
        let (view, source) = real_view("real-query", k, gallery, shapes, config)?;
        let m = &gallery[source];
        let id = format!("rq-{k:05}");
        let rec = record(id, m, Domain::Real, shapes[view.shape].kind(), 0, &view.image, &view.mask, &config.render)?;
        Ok((rec, view.image, view.mask))
    });
    let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;
    assemble(Domain::Real, gallery.to_vec(), samples, &config.render)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::sample_gallery;

    #[test]
    fn synthetic_cardinality_and_determinism() {
        let gallery = sample_gallery(1, 4, "t");
        let shapes = Shape::default_set(2);
        let cfg = RenderConfig { resolution: 32, ..Default::default() };
        let a = build_synthetic(&gallery, &shapes, 8, &cfg).unwrap();
        assert_eq!(a.len(), 64);
        assert!(a.manifest.samples.iter().all(|s| s.domain == Domain::Synthetic));
        let b = build_synthetic(&gallery, &shapes, 8, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.masks.iter().all(|m| m.count() > 0));
    }

    #[test]
    fn full_scale_counting() {
        assert_eq!(combinations_for(394_560, 8), Some(49_320));
        assert_eq!(synthetic_count(49_320, 1, 8), 394_560);
        assert_eq!(combinations_for(10, 3), None);
    }

    #[test]
    fn real_analog_without_rejection_keeps_every_sample() {
        let gallery = sample_gallery(2, 8, "t");
        let shapes = Shape::default_set(2);
        let cfg = RealConfig { rejection: Rejection::Disabled, ..RealConfig::default() };
        let a = build_real_analog(&gallery, &shapes, 100, &cfg).unwrap();
        assert_eq!(a.dataset.len(), 100);
        assert!(a.rejected.is_empty());
        for (s, m) in a.dataset.manifest.samples.iter().zip(&a.dataset.manifest.gallery) {
            assert_eq!(s.domain, Domain::Real);
            assert_eq!(s.material_id, m.id);
            assert!(s.fit_residual.is_some_and(|r| r.is_finite() && r >= 0.0));
            let source = s.source_material_id.as_deref().unwrap();
            let src = gallery.iter().find(|g| g.id == source).unwrap();
            assert_eq!(m.category, src.category);
        }
        let b = build_real_analog(&gallery, &shapes, 100, &cfg).unwrap();
        assert_eq!(a.dataset, b.dataset);
    }

    #[test]
    fn fixed_threshold_splits_fits() {
        let gallery = sample_gallery(3, 4, "t");
        let shapes = Shape::default_set(1);
        let open = RealConfig { rejection: Rejection::Disabled, ..RealConfig::default() };
        let all = build_real_analog(&gallery, &shapes, 12, &open).unwrap();
        let residuals: Vec<f64> = all.dataset.manifest.samples.iter().map(|s| s.fit_residual.unwrap()).collect();
        let cut = median(residuals.clone());
        let strict = RealConfig { rejection: Rejection::Fixed(cut), ..open };
        let some = build_real_analog(&gallery, &shapes, 12, &strict).unwrap();
        assert_eq!(some.threshold, cut);
        assert!(some.rejected.iter().all(|r| r.residual > cut));
        assert!(some.dataset.manifest.samples.iter().all(|s| s.fit_residual.unwrap() <= cut));
        assert!(some.dataset.len() + some.rejected.len() <= 48);
        assert!(!some.rejected.is_empty());
    }

    #[test]
    fn empty_inputs_rejected() {
        let shapes = Shape::default_set(1);
        assert!(matches!(build_synthetic(&[], &shapes, 1, &RenderConfig::default()), Err(Error::Config(_))));
        let gallery = sample_gallery(1, 1, "t");
        assert!(matches!(build_synthetic(&gallery, &[], 1, &RenderConfig::default()), Err(Error::Config(_))));
    }
}
