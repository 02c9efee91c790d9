use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use matret_core::dataset::{
    build_real_analog, build_synthetic, load_gallery, load_manifest, save_manifest, RealConfig, Rejection, RenderConfig,
    Split,
};
use matret_core::encoder::{load_checkpoint, save_checkpoint, EncoderConfig};
use matret_core::eval::{evaluate, QuerySet};
use matret_core::experiment::{ablation_csv, initial_encoders, run_ablation_grid, GridConfig, ToyConfig};
use matret_core::index::{self, load_index, save_index, SimilarityMode};
use matret_core::material::sample_gallery;
use matret_core::renderer::{Mask, Raster, Shape};
use matret_core::rng::fork_seed;
use matret_core::training::{self, grad_check, DatasetSelector, GradCheckConfig, LossKind, TrainConfig, TrainData};
use matret_service::ServeConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::overlay;

/// Global options shared by every subcommand.
pub struct Ctx {
    pub seed: u64,
    pub config: Option<PathBuf>,
    pub data_dir: PathBuf,
}

impl Ctx {
    fn data(&self, rel: &str) -> PathBuf {
        self.data_dir.join(rel)
    }

    /// Apply the config file and print the result.
    fn resolve<T: Serialize + DeserializeOwned>(&self, command: &str, job: T) -> Result<T> {
        let job = overlay(job, self.config.as_deref())?;
        eprintln!("{command} config: {}", serde_json::to_string(&job)?);
        Ok(job)
    }
}

/// A failure that is not a core library error.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn render_config(label: &str, seed: u64, resolution: usize) -> RenderConfig {
    RenderConfig { dataset_id: label.into(), seed: fork_seed(seed, label), resolution, ..RenderConfig::default() }
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSyntheticArgs {
    #[arg(long, default_value_t = 32)]
    pub materials: usize,
    #[arg(long, default_value_t = 4)]
    pub shapes: usize,
    /// Views per (material, shape) combination.
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    /// Output directory [default: <data-dir>/synthetic]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(skip)]
    #[serde(default)]
    pub seed: u64,
}

pub fn gen_synthetic(ctx: &Ctx, mut a: GenSyntheticArgs) -> Result<()> {
    a.seed = ctx.seed;
    a.out.get_or_insert_with(|| ctx.data("synthetic"));
    let a = ctx.resolve("gen-synthetic", a)?;
    let out = a.out.as_deref().expect("set above");
    let gallery = sample_gallery(fork_seed(a.seed, "gallery"), a.materials, "g");
    let shapes = Shape::default_set(a.shapes);
    let ds = build_synthetic(&gallery, &shapes, a.views, &render_config("synthetic", a.seed, a.resolution))?;
    save_manifest(&ds, out)?;
    println!("samples {} materials {} out {}", ds.len(), gallery.len(), out.display());
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenRealArgs {
    /// Source gallery size, ignored with --gallery.
    #[arg(long, default_value_t = 32)]
    pub materials: usize,
    /// Take the source gallery from this dataset directory instead of sampling one.
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub shapes: usize,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    /// Keep every fit regardless of its residual.
    #[arg(long)]
    pub no_rejection: bool,
    /// Output directory [default: <data-dir>/real]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(skip)]
    #[serde(default)]
    pub seed: u64,
}

pub fn gen_real(ctx: &Ctx, mut a: GenRealArgs) -> Result<()> {
    a.seed = ctx.seed;
    a.out.get_or_insert_with(|| ctx.data("real"));
    let a = ctx.resolve("gen-real", a)?;
    let out = a.out.as_deref().expect("set above");
    let gallery = match &a.gallery {
        Some(dir) => load_gallery(dir)?,
        None => sample_gallery(fork_seed(a.seed, "gallery"), a.materials, "g"),
    };
    let shapes = Shape::default_set(a.shapes);
    let cfg = RealConfig {
        render: render_config("real", a.seed, a.resolution),
        rejection: if a.no_rejection { Rejection::Disabled } else { Rejection::default() },
        ..RealConfig::default()
    };
    let built = build_real_analog(&gallery, &shapes, a.samples, &cfg)?;
    save_manifest(&built.dataset, out)?;
    write_file(&out.join("rejected.json"), serde_json::to_vec_pretty(&built.rejected)?)?;
    println!(
        "samples {} rejected {} threshold {} out {}",
        built.dataset.len(),
        built.rejected.len(),
        built.threshold,
        out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Synthetic dataset directory [default: <data-dir>/synthetic]
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    /// Real-analog dataset directory [default: <data-dir>/real]
    #[arg(long)]
    pub real: Option<PathBuf>,
    /// Drop the synthetic stage.
    #[arg(long)]
    pub no_synthetic: bool,
    /// Drop the real-analog stage.
    #[arg(long)]
    pub no_real: bool,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Train every layer instead of only the last block and head.
    #[arg(long)]
    pub full_unfreeze: bool,
    /// One encoder for both images and swatches.
    #[arg(long)]
    pub shared_encoder: bool,
    /// Output directory for checkpoints and history [default: <data-dir>/model]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    pub seed: u64,
    pub synthetic: PathBuf,
    pub real: PathBuf,
    pub use_synthetic: bool,
    pub use_real: bool,
    pub out: PathBuf,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

pub fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let mut train = TrainConfig::default();
    if let Some(l) = a.loss {
        train.loss = l;
    }
    if let Some(b) = a.batch_size {
        train.batch_size = b;
    }
    train.last_block_only = !a.full_unfreeze;
    train.dual_encoder = !a.shared_encoder;
    let job = TrainJob {
        seed: ctx.seed,
        synthetic: a.synthetic.unwrap_or_else(|| ctx.data("synthetic")),
        real: a.real.unwrap_or_else(|| ctx.data("real")),
        use_synthetic: !a.no_synthetic,
        use_real: !a.no_real,
        out: a.out.unwrap_or_else(|| ctx.data("model")),
        encoder: EncoderConfig::default(),
        train,
    };
    let job = ctx.resolve("train", job)?;
    // the toy driver owns the stage filtering rule
    let toy = ToyConfig { use_synthetic: job.use_synthetic, use_real: job.use_real, train: job.train.clone(), ..ToyConfig::default() };
    let train_cfg = TrainConfig { seed: fork_seed(job.seed, "train"), ..toy.stages()? };
    let mut data = TrainData::default();
    for stage in &train_cfg.stages {
        let (slot, dir) = match stage.dataset {
            DatasetSelector::Synthetic => (&mut data.synthetic, &job.synthetic),
            DatasetSelector::Real => (&mut data.real, &job.real),
        };
        if slot.is_none() {
            *slot = Some(load_manifest(dir)?.pair_set(&job.encoder)?);
        }
    }
    let (image, material) = initial_encoders(&job.encoder, job.seed)?;
    let out = training::train(image, material, &data, &train_cfg)?;
    std::fs::create_dir_all(&job.out).with_context(|| format!("creating {}", job.out.display()))?;
    save_checkpoint(&out.image_encoder, &job.out.join("image.ckpt"))?;
    save_checkpoint(&out.material_encoder, &job.out.join("material.ckpt"))?;
    out.history.write_csv(&job.out.join("history.csv"))?;
    println!(
        "epochs {} final_val_loss {} out {}",
        out.history.epochs.len(),
        out.history.final_val_loss().unwrap_or(f64::NAN),
        job.out.display()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckArgs {
    /// Losses to check.
    #[arg(long, value_delimiter = ',', default_value = "infonce,triplet")]
    pub loss: Vec<LossKind>,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-3)]
    pub step: f64,
    #[arg(skip)]
    #[serde(default)]
    pub seed: u64,
}

pub fn gradcheck(ctx: &Ctx, mut a: GradcheckArgs) -> Result<()> {
    a.seed = ctx.seed;
    let a = ctx.resolve("gradcheck", a)?;
    let mut failed = Vec::new();
    for &loss in &a.loss {
        let r = grad_check(&GradCheckConfig { loss, step: a.step, seed: a.seed, ..GradCheckConfig::default() })?;
        println!(
            "{} max_rel_error {:.3e} worst {} checked {} {}",
            loss.name(),
            r.max_rel_error,
            r.worst_tensor,
            r.n_checked,
            if r.passed { "PASS" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(loss.name());
        }
    }
    if !failed.is_empty() {
        return Err(Failure { kind: "gradcheck_failed", message: format!("gradient check failed for {}", failed.join(", ")) }.into());
    }
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildIndexArgs {
    /// Material encoder checkpoint [default: <data-dir>/model/material.ckpt]
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Dataset directory whose gallery is indexed [default: <data-dir>/synthetic]
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    #[arg(long, default_value = "scaled_dot")]
    pub mode: SimilarityMode,
    /// [default: <data-dir>/model/index.bin]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn build_index(ctx: &Ctx, mut a: BuildIndexArgs) -> Result<()> {
    a.ckpt.get_or_insert_with(|| ctx.data("model/material.ckpt"));
    a.gallery.get_or_insert_with(|| ctx.data("synthetic"));
    a.out.get_or_insert_with(|| ctx.data("model/index.bin"));
    let a = ctx.resolve("build-index", a)?;
    let (ckpt, gallery, out) = (a.ckpt.as_deref().unwrap(), a.gallery.as_deref().unwrap(), a.out.as_deref().unwrap());
    let encoder = load_checkpoint(ckpt)?;
    let idx = index::build_index(&encoder, &load_gallery(gallery)?, a.mode)?;
    create_parent(out)?;
    save_index(&idx, out)?;
    println!("entries {} dim {} mode {} checksum {} out {}", idx.len(), idx.dim, idx.mode.name(), idx.checksum_hex(), out.display());
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryArgs {
    /// [default: <data-dir>/model/index.bin]
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Image encoder checkpoint [default: <data-dir>/model/image.ckpt]
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// PPM or BMP query image.
    #[arg(long)]
    pub image: PathBuf,
    /// PGM mask; all pixels when absent.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(short, long, default_value_t = 5)]
    pub k: usize,
}

pub fn query(ctx: &Ctx, mut a: QueryArgs) -> Result<()> {
    a.index.get_or_insert_with(|| ctx.data("model/index.bin"));
    a.ckpt.get_or_insert_with(|| ctx.data("model/image.ckpt"));
    let a = ctx.resolve("query", a)?;
    let idx = load_index(a.index.as_deref().unwrap())?;
    let encoder = load_checkpoint(a.ckpt.as_deref().unwrap())?;
    let image = Raster::read_image(&a.image)?;
    let mask = match &a.mask {
        Some(p) => Mask::read(p)?,
        None => Mask::full(image.width(), image.height()),
    };
    let result = index::query_topk(&idx, &encoder, &image, &mask, a.k)?;
    for (rank, r) in result.results.iter().enumerate() {
        println!("{} {} {} {}", rank + 1, r.material_id, r.category, r.score);
    }
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    /// [default: <data-dir>/model/index.bin]
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Image encoder checkpoint [default: <data-dir>/model/image.ckpt]
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// JSON query list (id, image, mask, material_id, category).
    #[arg(long, conflicts_with = "data")]
    pub queries: Option<PathBuf>,
    /// Use the samples of a dataset directory as queries.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Restrict --data to one split.
    #[arg(long)]
    pub split: Option<Split>,
    /// Directory for report.json, report.csv and results.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval(ctx: &Ctx, mut a: EvalArgs) -> Result<()> {
    a.index.get_or_insert_with(|| ctx.data("model/index.bin"));
    a.ckpt.get_or_insert_with(|| ctx.data("model/image.ckpt"));
    let a = ctx.resolve("eval", a)?;
    let idx = load_index(a.index.as_deref().unwrap())?;
    let encoder = load_checkpoint(a.ckpt.as_deref().unwrap())?;
    let queries = match (&a.queries, &a.data) {
        (Some(q), _) => QuerySet::load(q)?,
        (None, Some(d)) => QuerySet::from_dataset(&load_manifest(d)?, a.split),
        (None, None) => {
            return Err(Failure { kind: "usage", message: "one of --queries or --data is required".into() }.into())
        }
    };
    let ev = evaluate(&idx, &encoder, &queries, 5)?;
    let json = ev.report.to_json()?;
    if let Some(dir) = &a.out {
        write_file(&dir.join("report.json"), &json)?;
        write_file(&dir.join("report.csv"), ev.report.to_csv())?;
        write_file(&dir.join("results.json"), serde_json::to_vec_pretty(&ev.results)?)?;
    }
    println!("{json}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub synthetic_fraction: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub dual_encoder: Option<Vec<bool>>,
    #[arg(long, value_delimiter = ',')]
    pub real_data: Option<Vec<bool>>,
    #[arg(long, value_delimiter = ',')]
    pub synthetic_data: Option<Vec<bool>>,
    #[arg(long, value_delimiter = ',')]
    pub last_block_only: Option<Vec<bool>>,
    #[arg(long, value_delimiter = ',')]
    pub loss: Option<Vec<LossKind>>,
    /// Results table [default: <data-dir>/ablation.csv]; a JSON copy is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateJob {
    pub out: PathBuf,
    pub grid: GridConfig,
}

pub fn ablate(ctx: &Ctx, a: AblateArgs) -> Result<()> {
    let mut grid = GridConfig::default();
    grid.seeds = a.seeds.unwrap_or_else(|| vec![ctx.seed]);
    macro_rules! axis {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { grid.$f = v; })* };
    }
    axis!(synthetic_fraction, dual_encoder, real_data, synthetic_data, last_block_only, loss);
    let job = AblateJob { out: a.out.unwrap_or_else(|| ctx.data("ablation.csv")), grid };
    let job = ctx.resolve("ablate", job)?;
    let results = run_ablation_grid(&job.grid)?;
    let csv = ablation_csv(&results);
    write_file(&job.out, &csv)?;
    write_file(&job.out.with_extension("json"), serde_json::to_vec_pretty(&results)?)?;
    print!("{csv}");
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Image encoder checkpoint [default: <data-dir>/model/image.ckpt]
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// [default: <data-dir>/model/index.bin]
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Dataset directory holding the indexed gallery [default: <data-dir>/synthetic]
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    /// Material encoder checkpoint to verify against the index checksum.
    #[arg(long)]
    pub material_ckpt: Option<PathBuf>,
}

pub fn serve(ctx: &Ctx, mut a: ServeArgs) -> Result<()> {
    a.ckpt.get_or_insert_with(|| ctx.data("model/image.ckpt"));
    a.index.get_or_insert_with(|| ctx.data("model/index.bin"));
    a.gallery.get_or_insert_with(|| ctx.data("synthetic"));
    let a = ctx.resolve("serve", a)?;
    let config = ServeConfig {
        host: a.host,
        port: a.port,
        checkpoint: a.ckpt.unwrap(),
        index: a.index.unwrap(),
        data_dir: a.gallery.unwrap(),
        material_checkpoint: a.material_ckpt,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(matret_service::serve(config)).map_err(|e| match e.downcast::<matret_core::Error>() {
        Ok(core) => anyhow::Error::from(*core),
        Err(other) => anyhow::anyhow!(other),
    })
}
