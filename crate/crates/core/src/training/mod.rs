//! Masked dual encoding, contrastive objectives, Adam and the staged
//! training loop.

mod adam;
mod gradcheck;
mod loss;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoder::{backward, forward_input, EncoderParams, Input, ParamGrads};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, Rng};

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_with, GradCheckConfig, GradCheckReport, GRAD_CHECK_TOLERANCE};
pub use loss::{
    apply_mask, cosine, infonce_loss, similarity, similarity_backward, triplet_loss, SimilarityMatrix, TripletGrads,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Infonce,
    Triplet,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Infonce => "infonce",
            LossKind::Triplet => "triplet",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infonce" => Ok(LossKind::Infonce),
            "triplet" => Ok(LossKind::Triplet),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSelector {
    Synthetic,
    Real,
}

impl DatasetSelector {
    pub fn name(self) -> &'static str {
        match self {
            DatasetSelector::Synthetic => "synthetic",
            DatasetSelector::Real => "real",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub dataset: DatasetSelector,
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub triplet_margin: f64,
    pub last_block_only: bool,
    pub dual_encoder: bool,
    pub stages: Vec<Stage>,
    pub adam: AdamConfig,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            temperature: 0.07,
            batch_size: 8,
            loss: LossKind::Infonce,
            triplet_margin: 0.2,
            last_block_only: true,
            dual_encoder: true,
            stages: vec![
                Stage { dataset: DatasetSelector::Synthetic, epochs: 1, lr: 1e-4 },
                Stage { dataset: DatasetSelector::Real, epochs: 50, lr: 1e-5 },
            ],
            adam: AdamConfig::default(),
            train_fraction: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.triplet_margin >= 0.0) {
            return Err(Error::Config(format!("triplet_margin must be non-negative, got {}", self.triplet_margin)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!("train_fraction must be in (0, 1], got {}", self.train_fraction)));
        }
        for s in &self.stages {
            if !(s.lr > 0.0) {
                return Err(Error::Config(format!("stage learning rate must be positive, got {}", s.lr)));
            }
        }
        self.adam.validate()
    }
}

/// Train/val assignment as a pure function of `(sample id, seed)`.
pub fn is_train_sample(sample_id: &str, seed: u64, train_fraction: f64) -> bool {
    rng::hash_unit(rng::fork_seed(seed, sample_id)) < train_fraction
}

/// Encoder-ready pairs: masked images, each pointing at one material swatch.
#[derive(Debug, Clone, Default)]
pub struct PairSet {
    pub sample_ids: Vec<String>,
    pub images: Vec<Input>,
    pub material_of: Vec<usize>,
    pub material_ids: Vec<String>,
    pub materials: Vec<Input>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.images.len();
        if self.sample_ids.len() != n || self.material_of.len() != n || self.material_ids.len() != self.materials.len() {
            return Err(Error::Shape("pair set columns have different lengths".into()));
        }
        if let Some(bad) = self.material_of.iter().find(|m| **m >= self.materials.len()) {
            return Err(Error::Shape(format!("material index {bad} out of range")));
        }
        Ok(())
    }

    /// Keep only the listed samples (materials are kept whole).
    pub fn subset(&self, keep: &[usize]) -> PairSet {
        PairSet {
            sample_ids: keep.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            images: keep.iter().map(|&i| self.images[i].clone()).collect(),
            material_of: keep.iter().map(|&i| self.material_of[i]).collect(),
            material_ids: self.material_ids.clone(),
            materials: self.materials.clone(),
        }
    }

    pub fn split(&self, seed: u64, train_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| is_train_sample(&self.sample_ids[i], seed, train_fraction))
    }

    fn distinct_materials(&self, idx: &[usize]) -> usize {
        let mut seen = vec![false; self.materials.len()];
        idx.iter().filter(|&&i| !std::mem::replace(&mut seen[self.material_of[i]], true)).count()
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub synthetic: Option<PairSet>,
    pub real: Option<PairSet>,
}

impl TrainData {
    pub fn get(&self, which: DatasetSelector) -> Option<&PairSet> {
        match which {
            DatasetSelector::Synthetic => self.synthetic.as_ref(),
            DatasetSelector::Real => self.real.as_ref(),
        }
    }
}

/// Pack samples (in the given order) into batches whose materials are
/// pairwise distinct. A sample that collides with the open batch waits for a
/// later one. Batches smaller than two are dropped.
pub fn make_batches(order: &[usize], material_of: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut pending: Vec<usize> = order.to_vec();
    let mut batches = Vec::new();
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut rest = Vec::with_capacity(pending.len());
        for &i in &pending {
            if batch.len() < batch_size && !batch.iter().any(|&j: &usize| material_of[j] == material_of[i]) {
                batch.push(i);
            } else {
                rest.push(i);
            }
        }
        pending = rest;
        if batch.len() >= 2 {
            batches.push(batch);
        } else {
            break;
        }
    }
    batches
}

/// Batch members plus, for the triplet loss, the in-batch negative position
/// paired with each anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl Batch {
    pub fn new(items: Vec<usize>, rng: &mut Rng) -> Self {
        let n = items.len();
        let negatives = (0..n)
            .map(|k| {
                let j = rng.random_range(0..n - 1);
                if j >= k {
                    j + 1
                } else {
                    j
                }
            })
            .collect();
        Batch { items, negatives }
    }
}

/// Loss of one batch and its gradients for each encoder.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub loss: f64,
    pub image_grads: ParamGrads,
    pub material_grads: ParamGrads,
}

/// Evaluate the configured objective on paired inputs: position `k` of
/// `images` matches position `k` of `materials`.
pub fn batch_objective(
    image_encoder: &EncoderParams,
    material_encoder: &EncoderParams,
    images: &[&Input],
    materials: &[&Input],
    negatives: &[usize],
    config: &TrainConfig,
    with_grads: bool,
) -> Result<BatchOutcome> {
    let fi = par::map(images, |x| forward_input(image_encoder, x));
    let fm = par::map(materials, |x| forward_input(material_encoder, x));
    let fi: Vec<_> = fi.into_iter().collect::<Result<_>>()?;
    let fm: Vec<_> = fm.into_iter().collect::<Result<_>>()?;
    let zi: Vec<_> = fi.iter().map(|(z, _)| z.clone()).collect();
    let zm: Vec<_> = fm.iter().map(|(z, _)| z.clone()).collect();
    let (loss, gzi, gzm) = match config.loss {
        LossKind::Infonce => {
            let s = SimilarityMatrix::from_embeddings(&zi, &zm)?;
            let (loss, gs) = infonce_loss(&s, config.temperature)?;
            let (gi, gm) = similarity_backward(&zi, &zm, &gs);
            (loss, gi, gm)
        }
        LossKind::Triplet => {
            let neg: Vec<_> = negatives.iter().map(|&j| zm[j].clone()).collect();
            let (loss, g) = triplet_loss(&zi, &zm, &neg, config.triplet_margin)?;
            let mut gm = g.positive;
            for (k, &j) in negatives.iter().enumerate() {
                for (a, b) in gm[j].0.iter_mut().zip(&g.negative[k].0) {
                    *a += b;
                }
            }
            (loss, g.anchor, gm)
        }
    };
    if !with_grads {
        return Ok(BatchOutcome {
            loss,
            image_grads: ParamGrads::zeros_for(image_encoder),
            material_grads: ParamGrads::zeros_for(material_encoder),
        });
    }
    let gi = par::map_range(zi.len(), |k| backward(image_encoder, &fi[k].1, &gzi[k]));
    let gm = par::map_range(zm.len(), |k| backward(material_encoder, &fm[k].1, &gzm[k]));
    let mut image_grads = ParamGrads::zeros_for(image_encoder);
    for g in gi {
        image_grads.accumulate(&g?)?;
    }
    let mut material_grads = ParamGrads::zeros_for(material_encoder);
    for g in gm {
        material_grads.accumulate(&g?)?;
    }
    Ok(BatchOutcome { loss, image_grads, material_grads })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Per-epoch losses. Row zero holds the validation loss before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
}

fn fmt_loss(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

impl History {
    pub fn final_val_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,stage,train_loss,val_loss\n");
        let _ = writeln!(out, "0,0,,{}", fmt_loss(self.initial_val_loss));
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.stage, fmt_loss(e.train_loss), fmt_loss(e.val_loss));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Optimizer state for one or two encoders. With `dual_encoder` off a single
/// parameter set serves both roles and receives the summed gradients.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    image: EncoderParams,
    material: Option<EncoderParams>,
    image_state: AdamState,
    material_state: AdamState,
}

impl Trainer {
    pub fn new(mut image: EncoderParams, material: EncoderParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if image.config.output_dim != material.config.output_dim {
            return Err(Error::Config("image and material encoders have different output dims".into()));
        }
        let freeze = |p: &mut EncoderParams| {
            if config.last_block_only {
                p.set_last_block_only();
            } else {
                p.set_all_trainable(true);
            }
        };
        freeze(&mut image);
        let material = if config.dual_encoder {
            let mut m = material;
            freeze(&mut m);
            Some(m)
        } else {
            None
        };
        Ok(Trainer { config, image, material, image_state: AdamState::new(), material_state: AdamState::new() })
    }

    pub fn image_encoder(&self) -> &EncoderParams {
        &self.image
    }

    pub fn material_encoder(&self) -> &EncoderParams {
        self.material.as_ref().unwrap_or(&self.image)
    }

    pub fn into_encoders(self) -> (EncoderParams, EncoderParams) {
        match self.material {
            Some(m) => (self.image, m),
            None => (self.image.clone(), self.image),
        }
    }

    fn objective(&self, set: &PairSet, batch: &Batch, with_grads: bool) -> Result<BatchOutcome> {
        let images: Vec<&Input> = batch.items.iter().map(|&i| &set.images[i]).collect();
        let materials: Vec<&Input> = batch.items.iter().map(|&i| &set.materials[set.material_of[i]]).collect();
        batch_objective(
            &self.image,
            self.material_encoder(),
            &images,
            &materials,
            &batch.negatives,
            &self.config,
            with_grads,
        )
    }

    pub fn batch_loss(&self, set: &PairSet, batch: &Batch) -> Result<f64> {
        Ok(self.objective(set, batch, false)?.loss)
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    pub fn step(&mut self, set: &PairSet, batch: &Batch, lr: f64) -> Result<f64> {
        let mut out = self.objective(set, batch, true)?;
        if !out.image_grads.is_finite() || !out.material_grads.is_finite() {
            return Err(Error::Shape("non-finite gradient".into()));
        }
        let adam = self.config.adam;
        match &mut self.material {
            Some(m) => {
                adam_step(&mut self.image, &out.image_grads, &mut self.image_state, lr, &adam)?;
                adam_step(m, &out.material_grads, &mut self.material_state, lr, &adam)?;
            }
            None => {
                out.image_grads.accumulate(&out.material_grads)?;
                adam_step(&mut self.image, &out.image_grads, &mut self.image_state, lr, &adam)?;
            }
        }
        Ok(out.loss)
    }

    /// Mean batch loss over `idx` in a fixed packing.
    pub fn mean_loss(&self, set: &PairSet, idx: &[usize]) -> Result<f64> {
        let mut rng = rng::forked_rng(self.config.seed, "val-negatives");
        let mut total = 0.0;
        let mut count = 0usize;
        for items in make_batches(idx, &set.material_of, self.config.batch_size) {
            let b = Batch::new(items, &mut rng);
            total += self.batch_loss(set, &b)? * b.items.len() as f64;
            count += b.items.len();
        }
        Ok(if count == 0 { f64::NAN } else { total / count as f64 })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub image_encoder: EncoderParams,
    pub material_encoder: EncoderParams,
    pub history: History,
}

/// Run every scheduled stage in order.
pub fn train(image: EncoderParams, material: EncoderParams, data: &TrainData, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(image, material, config.clone())?;
    let mut splits = Vec::new();
    for (k, stage) in config.stages.iter().enumerate() {
        let set = data
            .get(stage.dataset)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Config(format!("stage {} needs the {} dataset", k + 1, stage.dataset.name())))?;
        set.validate()?;
        let (tr, va) = set.split(config.seed, config.train_fraction);
        let distinct = set.distinct_materials(&tr);
        if distinct < config.batch_size {
            return Err(Error::Config(format!(
                "stage {} ({}) has {distinct} distinct training materials, fewer than batch_size {}",
                k + 1,
                stage.dataset.name(),
                config.batch_size
            )));
        }
        splits.push((set, tr, va));
    }
    let initial_val_loss = match splits.first() {
        Some((set, _, va)) => trainer.mean_loss(set, va)?,
        None => f64::NAN,
    };
    let mut rng = rng::forked_rng(config.seed, "train-batches");
    let mut epochs = Vec::new();
    for (k, (stage, (set, tr, va))) in config.stages.iter().zip(&splits).enumerate() {
        for _ in 0..stage.epochs {
            let mut order = tr.clone();
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut count = 0usize;
            for items in make_batches(&order, &set.material_of, config.batch_size) {
                let b = Batch::new(items, &mut rng);
                total += trainer.step(set, &b, stage.lr)? * b.items.len() as f64;
                count += b.items.len();
            }
            let rec = EpochRecord {
                epoch: epochs.len() + 1,
                stage: k + 1,
                train_loss: if count == 0 { f64::NAN } else { total / count as f64 },
                val_loss: trainer.mean_loss(set, va)?,
            };
            tracing::debug!(epoch = rec.epoch, stage = rec.stage, train = rec.train_loss, val = rec.val_loss, "epoch");
            epochs.push(rec);
        }
    }
    let (image_encoder, material_encoder) = trainer.into_encoders();
    Ok(TrainOutcome { image_encoder, material_encoder, history: History { initial_val_loss, epochs } })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_have_distinct_materials() {
        let material_of: Vec<usize> = (0..40).map(|i| i % 5).collect();
        let order: Vec<usize> = (0..40).collect();
        let batches = make_batches(&order, &material_of, 4);
        assert_eq!(batches.len(), 10);
        for b in &batches {
            let mut m: Vec<_> = b.iter().map(|&i| material_of[i]).collect();
            m.sort();
            m.dedup();
            assert_eq!(m.len(), b.len());
        }
        let all: usize = batches.iter().map(Vec::len).sum();
        assert_eq!(all, 40);
    }

    #[test]
    fn batches_drop_singletons() {
        let material_of = vec![0, 0, 0];
        assert!(make_batches(&[0, 1, 2], &material_of, 2).is_empty());
    }

    #[test]
    fn negatives_differ_from_anchor() {
        let mut rng = rng::rng_from(3);
        for n in 2..10 {
            let b = Batch::new((0..n).collect(), &mut rng);
            assert!(b.negatives.iter().enumerate().all(|(k, &j)| j != k && j < n));
        }
    }

    #[test]
    fn split_is_stable() {
        let ids: Vec<String> = (0..2000).map(|i| format!("s{i}")).collect();
        let a: Vec<bool> = ids.iter().map(|id| is_train_sample(id, 5, 0.9)).collect();
        let b: Vec<bool> = ids.iter().map(|id| is_train_sample(id, 5, 0.9)).collect();
        assert_eq!(a, b);
        let frac = a.iter().filter(|x| **x).count() as f64 / 2000.0;
        assert!((frac - 0.9).abs() < 0.03, "{frac}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        let mut c = TrainConfig::default();
        c.stages[0].lr = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn history_csv_layout() {
        let h = History {
            initial_val_loss: 2.0,
            epochs: vec![EpochRecord { epoch: 1, stage: 1, train_loss: 1.5, val_loss: 1.25 }],
        };
        assert_eq!(h.to_csv(), "epoch,stage,train_loss,val_loss\n0,0,,2\n1,1,1.5,1.25\n");
    }
}
