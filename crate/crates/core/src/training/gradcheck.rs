use serde::{Deserialize, Serialize};

use super::{apply_mask, batch_objective, similarity, LossKind, TrainConfig};
use crate::encoder::{forward_input, init_params, patchify, EncoderConfig, EncoderParams, Input, ParamGrads};
use crate::error::{Error, Result};
use crate::material::{sample_material, Category};
use crate::renderer::{
    camera_at, render_view, sample_lighting, swatch_camera, swatch_rig, swatch_sphere, DomainStyle, Shape, ShapeKind,
};
use crate::rng;

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
/// Denominator floor. Some gradients vanish exactly by shift invariance of
/// the loss; their finite differences are pure roundoff, about
/// `eps * |S| / (tau * step)` ~ 1e-12 per element.
const ZERO_FLOOR: f64 = 1e-6;
const ELEMENT_FLOOR: f64 = ZERO_FLOOR;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub encoder: EncoderConfig,
    pub loss: LossKind,
    pub temperature: f64,
    pub batch: usize,
    /// Central-difference step.
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { encoder: EncoderConfig::tiny(), loss: LossKind::Infonce, temperature: 0.07, batch: 2, step: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: LossKind,
    pub n_checked: usize,
    /// Largest `|a - n| / max(|a|, |n|)` over parameter tensors (2-norms).
    pub max_rel_error: f64,
    pub worst_tensor: String,
    /// Largest per-element relative error, for diagnosis only.
    pub max_element_rel_error: f64,
    pub worst_element: String,
    pub passed: bool,
}

struct Fixture {
    image_encoder: EncoderParams,
    material_encoder: EncoderParams,
    images: Vec<Input>,
    materials: Vec<Input>,
    negatives: Vec<usize>,
    train: TrainConfig,
}

impl Fixture {
    fn new(cfg: &GradCheckConfig) -> Result<Self> {
        let enc = &cfg.encoder;
        if enc.output_dim > 8 || enc.resolution > 16 {
            return Err(Error::Config("gradient check needs d <= 8 and resolution <= 16".into()));
        }
        if cfg.batch < 2 {
            return Err(Error::Config("gradient check needs a batch of at least 2".into()));
        }
        let res = enc.resolution;
        let mut r = rng::forked_rng(cfg.seed, "gradcheck-fixture");
        let mut images = Vec::new();
        let mut materials = Vec::new();
        for k in 0..cfg.batch {
            let cat = Category::ALL[k % Category::ALL.len()];
            let spec = sample_material(&mut r, cat);
            let shape = Shape::of_kind(ShapeKind::ALL[k % ShapeKind::ALL.len()]);
            let cam = camera_at(3.0, 30.0 + 10.0 * k as f64, -60.0 + 50.0 * k as f64, 30.0);
            let light = sample_lighting(&mut r, 0.0);
            let (img, mask) = render_view(&shape, &spec, &cam, &light, &DomainStyle::Synthetic, res)?;
            // Quantized like every stored dataset image, so inputs lie in [0, 1].
            images.push(patchify(enc, &apply_mask(&img.quantized(), &mask)?)?);
            let (sw, _) = render_view(&swatch_sphere(), &spec, &swatch_camera(), &swatch_rig(), &DomainStyle::Synthetic, res)?;
            materials.push(patchify(enc, &sw.quantized())?);
        }
        let image_encoder = init_params(enc, &mut rng::forked_rng(cfg.seed, "gradcheck-image"))?;
        let material_encoder = init_params(enc, &mut rng::forked_rng(cfg.seed, "gradcheck-material"))?;
        let negatives: Vec<usize> = (0..cfg.batch).map(|k| (k + 1) % cfg.batch).collect();
        let mut train = TrainConfig { temperature: cfg.temperature, loss: cfg.loss, ..TrainConfig::default() };
        if cfg.loss == LossKind::Triplet {
            // A margin well above every similarity gap keeps all hinges active
            // and far from their corners.
            let zi: Vec<_> = images.iter().map(|x| forward_input(&image_encoder, x).map(|o| o.0)).collect::<Result<_>>()?;
            let zm: Vec<_> =
                materials.iter().map(|x| forward_input(&material_encoder, x).map(|o| o.0)).collect::<Result<_>>()?;
            let mut gap: f64 = 0.0;
            for (k, &j) in negatives.iter().enumerate() {
                gap = gap.max(similarity(&zi[k], &zm[k])? - similarity(&zi[k], &zm[j])?);
            }
            train.triplet_margin = gap + 0.5;
        }
        Ok(Fixture { image_encoder, material_encoder, images, materials, negatives, train })
    }

    fn loss(&self, ei: &EncoderParams, em: &EncoderParams) -> Result<f64> {
        let images: Vec<&Input> = self.images.iter().collect();
        let materials: Vec<&Input> = self.materials.iter().collect();
        Ok(batch_objective(ei, em, &images, &materials, &self.negatives, &self.train, false)?.loss)
    }
}

/// Compare every parameter tensor's analytic gradient of the full batch
/// objective (both encoders) with central differences. The error of a
/// tensor is `|a - n| / max(|a|, |n|)` in the 2-norm.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    grad_check_with(cfg, |_, _| {})
}

/// As [`grad_check`], letting `tamper` edit the analytic gradients first.
pub fn grad_check_with(
    cfg: &GradCheckConfig,
    tamper: impl FnOnce(&mut ParamGrads, &mut ParamGrads),
) -> Result<GradCheckReport> {
    let fx = Fixture::new(cfg)?;
    let images: Vec<&Input> = fx.images.iter().collect();
    let materials: Vec<&Input> = fx.materials.iter().collect();
    let mut out =
        batch_objective(&fx.image_encoder, &fx.material_encoder, &images, &materials, &fx.negatives, &fx.train, true)?;
    tamper(&mut out.image_grads, &mut out.material_grads);

    let h = cfg.step;
    let mut report = GradCheckReport {
        loss: cfg.loss,
        n_checked: 0,
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        max_element_rel_error: 0.0,
        worst_element: String::new(),
        passed: false,
    };
    for (which, grads) in [("image", &out.image_grads), ("material", &out.material_grads)] {
        for g in &grads.tensors() {
            let numeric = (0..g.data.len())
                .map(|i| {
                    let eval = |delta: f64| -> Result<f64> {
                        let (mut ei, mut em) = (fx.image_encoder.clone(), fx.material_encoder.clone());
                        let target = if which == "image" { &mut ei } else { &mut em };
                        let mut ts: Vec<_> = target.tensors_mut().into_iter().filter(|t| t.name == g.name).collect();
                        ts[0].data[i] += delta;
                        fx.loss(&ei, &em)
                    };
                    Ok((eval(h)? - eval(-h)?) / (2.0 * h))
                })
                .collect::<Result<Vec<f64>>>()?;
            let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
            let diff = norm(&mut g.data.iter().zip(&numeric).map(|(a, n)| a - n));
            let scale = norm(&mut g.data.iter().copied()).max(norm(&mut numeric.iter().copied()));
            let rel = diff / scale.max(ZERO_FLOOR);
            if rel > report.max_rel_error || report.worst_tensor.is_empty() {
                report.max_rel_error = rel;
                report.worst_tensor = format!("{which}.{}", g.name);
            }
            for (i, (a, n)) in g.data.iter().zip(&numeric).enumerate() {
                let e = (a - n).abs() / a.abs().max(n.abs()).max(ELEMENT_FLOOR);
                if e > report.max_element_rel_error {
                    report.max_element_rel_error = e;
                    report.worst_element = format!("{which}.{}[{i}]", g.name);
                }
            }
            report.n_checked += g.data.len();
        }
    }
    report.passed = report.max_rel_error <= GRAD_CHECK_TOLERANCE;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_from_seed;

    #[test]
    fn rejects_large_configs() {
        let cfg = GradCheckConfig { encoder: EncoderConfig::default(), ..Default::default() };
        assert!(grad_check(&cfg).is_err());
    }

    #[test]
    fn infonce_and_triplet_pass() {
        for loss in [LossKind::Infonce, LossKind::Triplet] {
            let r = grad_check(&GradCheckConfig { loss, ..Default::default() }).unwrap();
            assert!(r.passed, "{r:?}");
            assert_eq!(r.n_checked, 2 * init_from_seed(&EncoderConfig::tiny()).unwrap().n_params());
        }
    }

    #[test]
    fn element_error_shrinks_with_step() {
        let coarse = grad_check(&GradCheckConfig::default()).unwrap();
        let fine = grad_check(&GradCheckConfig { step: 1e-4, ..Default::default() }).unwrap();
        assert!(fine.max_element_rel_error < coarse.max_element_rel_error / 10.0, "{coarse:?} {fine:?}");
        assert!(fine.max_element_rel_error < 1e-4);
    }

    #[test]
    fn sign_flip_is_caught() {
        let r = grad_check_with(&GradCheckConfig::default(), |gi, _| {
            let mut ts = gi.tensors_mut();
            let last = ts.last_mut().unwrap();
            last.data.iter_mut().for_each(|v| *v = -*v);
        })
        .unwrap();
        assert!(!r.passed, "{r:?}");
    }
}
