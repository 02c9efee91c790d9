//! Toy-scale end-to-end runs: dataset synthesis, two-stage training and
//! evaluation on held-out views, real-analog queries and an unseen gallery,
//! all derived from one seed.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{build_real_analog, build_real_views, build_synthetic, RealConfig, RenderConfig};
use crate::encoder::{init_params, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport, QuerySet};
use crate::index::{build_index, SimilarityMode};
use crate::material::sample_gallery;
use crate::renderer::Shape;
use crate::rng::{fork_seed, hash_unit, rng_from};
use crate::training::{train, DatasetSelector, History, LossKind, TrainConfig, TrainData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub seed: u64,
    pub materials: usize,
    pub shapes: usize,
    pub views: usize,
    pub real_samples: usize,
    /// Fresh synthetic views per (material, shape) used as queries.
    pub heldout_views: usize,
    pub real_queries: usize,
    pub unseen_materials: usize,
    /// Fraction of synthetic training samples kept.
    pub synthetic_fraction: f64,
    pub use_synthetic: bool,
    pub use_real: bool,
    pub resolution: usize,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub real: RealConfig,
    pub mode: SimilarityMode,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 0,
            materials: 32,
            shapes: 4,
            views: 8,
            real_samples: 256,
            heldout_views: 1,
            real_queries: 128,
            unseen_materials: 32,
            synthetic_fraction: 1.0,
            use_synthetic: true,
            use_real: true,
            resolution: 32,
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            real: RealConfig::default(),
            mode: SimilarityMode::ScaledDot,
        }
    }
}

impl ToyConfig {
    /// The training schedule with stages for disabled datasets removed.
    pub fn stages(&self) -> Result<TrainConfig> {
        let mut train = self.train.clone();
        train.stages.retain(|s| match s.dataset {
            DatasetSelector::Synthetic => self.use_synthetic,
            DatasetSelector::Real => self.use_real,
        });
        if train.stages.is_empty() {
            return Err(Error::Config("no training stage left with the selected datasets".into()));
        }
        Ok(train)
    }
}

#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub image_encoder: EncoderParams,
    pub material_encoder: EncoderParams,
    pub history: History,
    /// Fresh synthetic views of gallery materials.
    pub heldout: MetricsReport,
    /// Real-style renders of gallery materials.
    pub real: MetricsReport,
    /// Real-style renders of a disjoint gallery never seen in training.
    pub unseen: MetricsReport,
    pub seconds: f64,
}

/// Both encoders start from the same initialization, as two copies of one
/// pretrained backbone would.
pub fn initial_encoders(config: &EncoderConfig, seed: u64) -> Result<(EncoderParams, EncoderParams)> {
    let p = init_params(config, &mut rng_from(fork_seed(seed, "encoder-init")))?;
    Ok((p.clone(), p))
}

pub fn run_toy(config: &ToyConfig) -> Result<ToyOutcome> {
    let start = Instant::now();
    let seed = config.seed;
    let train_cfg = TrainConfig { seed: fork_seed(seed, "train"), ..config.stages()? };
    let gallery = sample_gallery(fork_seed(seed, "gallery"), config.materials, "g");
    let shapes = Shape::default_set(config.shapes);
    let render = |label: &str| RenderConfig {
        dataset_id: label.into(),
        seed: fork_seed(seed, label),
        resolution: config.resolution,
        ..RenderConfig::default()
    };
    let real_cfg = |label: &str| RealConfig { render: render(label), ..config.real.clone() };

    let mut data = TrainData::default();
    if config.use_synthetic {
        let syn = build_synthetic(&gallery, &shapes, config.views, &render("synthetic"))?;
        let mut set = syn.pair_set(&config.encoder)?;
        if config.synthetic_fraction < 1.0 {
            let keep_seed = fork_seed(seed, "synthetic-fraction");
            let keep: Vec<usize> = (0..set.len())
                .filter(|&i| hash_unit(fork_seed(keep_seed, &set.sample_ids[i])) < config.synthetic_fraction)
                .collect();
            set = set.subset(&keep);
        }
        data.synthetic = Some(set);
    }
    if config.use_real {
        let real = build_real_analog(&gallery, &shapes, config.real_samples, &real_cfg("real"))?;
        data.real = Some(real.dataset.pair_set(&config.encoder)?);
    }
    let (image, material) = initial_encoders(&config.encoder, seed)?;
    let out = train(image, material, &data, &train_cfg)?;

    let index = build_index(&out.material_encoder, &gallery, config.mode)?;
    let heldout = build_synthetic(&gallery, &shapes, config.heldout_views, &render("heldout"))?;
    let heldout = evaluate(&index, &out.image_encoder, &QuerySet::from_dataset(&heldout, None), 5)?.report;
    let real_q = build_real_views(&gallery, &shapes, config.real_queries, &real_cfg("real-queries"))?;
    let real = evaluate(&index, &out.image_encoder, &QuerySet::from_dataset(&real_q, None), 5)?.report;

    let unseen_gallery = sample_gallery(fork_seed(seed, "unseen-gallery"), config.unseen_materials, "u");
    let unseen_index = build_index(&out.material_encoder, &unseen_gallery, config.mode)?;
    let unseen_q = build_real_views(&unseen_gallery, &shapes, config.real_queries, &real_cfg("unseen-queries"))?;
    let unseen = evaluate(&unseen_index, &out.image_encoder, &QuerySet::from_dataset(&unseen_q, None), 5)?.report;

    Ok(ToyOutcome {
        image_encoder: out.image_encoder,
        material_encoder: out.material_encoder,
        history: out.history,
        heldout,
        real,
        unseen,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Axes of an ablation grid; the grid is their cartesian product, run once
/// per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub base: ToyConfig,
    pub seeds: Vec<u64>,
    pub synthetic_fraction: Vec<f64>,
    pub dual_encoder: Vec<bool>,
    pub real_data: Vec<bool>,
    pub synthetic_data: Vec<bool>,
    pub last_block_only: Vec<bool>,
    pub loss: Vec<LossKind>,
}

impl Default for GridConfig {
    fn default() -> Self {
        let base = ToyConfig::default();
        GridConfig {
            seeds: vec![base.seed],
            synthetic_fraction: vec![base.synthetic_fraction],
            dual_encoder: vec![base.train.dual_encoder],
            real_data: vec![base.use_real],
            synthetic_data: vec![base.use_synthetic],
            last_block_only: vec![base.train.last_block_only],
            loss: vec![base.train.loss],
            base,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSettings {
    pub seed: u64,
    pub synthetic_fraction: f64,
    pub dual_encoder: bool,
    pub real_data: bool,
    pub synthetic_data: bool,
    pub last_block_only: bool,
    pub loss: LossKind,
}

impl CellSettings {
    pub fn apply(&self, base: &ToyConfig) -> ToyConfig {
        let mut c = base.clone();
        c.seed = self.seed;
        c.synthetic_fraction = self.synthetic_fraction;
        c.use_real = self.real_data;
        c.use_synthetic = self.synthetic_data;
        c.train.dual_encoder = self.dual_encoder;
        c.train.last_block_only = self.last_block_only;
        c.train.loss = self.loss;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Done {
        /// Real-analog queries against the training gallery.
        real: MetricsReport,
        heldout: MetricsReport,
        unseen: MetricsReport,
        seconds: f64,
    },
    Skipped {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub settings: CellSettings,
    pub status: CellStatus,
}

impl CellResult {
    pub fn real(&self) -> Option<&MetricsReport> {
        match &self.status {
            CellStatus::Done { real, .. } => Some(real),
            CellStatus::Skipped { .. } => None,
        }
    }

    pub fn heldout(&self) -> Option<&MetricsReport> {
        match &self.status {
            CellStatus::Done { heldout, .. } => Some(heldout),
            CellStatus::Skipped { .. } => None,
        }
    }
}

impl GridConfig {
    pub fn cells(&self) -> Vec<CellSettings> {
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for &synthetic_fraction in &self.synthetic_fraction {
                for &dual_encoder in &self.dual_encoder {
                    for &real_data in &self.real_data {
                        for &synthetic_data in &self.synthetic_data {
                            for &last_block_only in &self.last_block_only {
                                for &loss in &self.loss {
                                    out.push(CellSettings {
                                        seed,
                                        synthetic_fraction,
                                        dual_encoder,
                                        real_data,
                                        synthetic_data,
                                        last_block_only,
                                        loss,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Trains and evaluates every cell. Configuration errors (such as a cell
/// with no dataset left) skip the cell; other errors abort the grid.
pub fn run_ablation_grid(grid: &GridConfig) -> Result<Vec<CellResult>> {
    let mut results = Vec::new();
    for settings in grid.cells() {
        let status = match run_toy(&settings.apply(&grid.base)) {
            Ok(o) => CellStatus::Done { real: o.real, heldout: o.heldout, unseen: o.unseen, seconds: o.seconds },
            Err(Error::Config(reason)) => CellStatus::Skipped { reason },
            Err(e) => return Err(e),
        };
        tracing::info!(?settings, "ablation cell finished");
        results.push(CellResult { settings, status });
    }
    Ok(results)
}

pub const ABLATION_CSV_HEADER: &str = "seed,data_fraction,DE,RD,SD,LBO,loss,\
T1I,T5I,T1C,T3IoU,unseen-T1I,unseen-T5I,heldout-T1I,heldout-T5I,status";

/// One row per cell. Main metric columns are real-analog queries; skipped
/// cells leave them empty and give the reason in `status`.
pub fn ablation_csv(results: &[CellResult]) -> String {
    let on = |b: bool| if b { "on" } else { "off" };
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in results {
        let s = &r.settings;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},",
            s.seed,
            s.synthetic_fraction,
            on(s.dual_encoder),
            on(s.real_data),
            on(s.synthetic_data),
            on(s.last_block_only),
            s.loss.name()
        ));
        match &r.status {
            CellStatus::Done { real, heldout, unseen, .. } => out.push_str(&format!(
                "{},{},{},{},{},{},{},{},ok\n",
                real.t1i, real.t5i, real.t1c, real.t3iou, unseen.t1i, unseen.t5i, heldout.t1i, heldout.t5i
            )),
            CellStatus::Skipped { reason } => {
                out.push_str(&format!(",,,,,,,,skipped: {}\n", reason.replace([',', '\n'], ";")))
            }
        }
    }
    out
}
