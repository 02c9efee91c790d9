mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use commands::Ctx;

#[derive(Debug, Parser)]
#[command(name = "matret", version, about = "Material retrieval from images: data generation, training, indexing, evaluation and serving")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// TOML or JSON file; its keys override the corresponding flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Default root for inputs and outputs.
    #[arg(long, global = true, env = "MARI_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render every (material, shape) combination from several views.
    GenSynthetic(commands::GenSyntheticArgs),
    /// Build the real-analog dataset: styled renders paired with fitted swatches.
    GenReal(commands::GenRealArgs),
    /// Two-stage contrastive training of the image and material encoders.
    Train(commands::TrainArgs),
    /// Compare analytic gradients with central differences on a tiny encoder.
    Gradcheck(commands::GradcheckArgs),
    /// Embed a gallery's swatches into a retrieval index.
    BuildIndex(commands::BuildIndexArgs),
    /// Rank gallery materials for one image.
    Query(commands::QueryArgs),
    /// Score a query set against an index.
    Eval(commands::EvalArgs),
    /// Train and evaluate every cell of an ablation grid.
    Ablate(commands::AblateArgs),
    /// Serve the HTTP retrieval API.
    Serve(commands::ServeArgs),
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(c) = e.downcast_ref::<matret_core::Error>() {
        c.kind()
    } else if let Some(c) = e.downcast_ref::<commands::Failure>() {
        c.kind
    } else {
        "runtime"
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { tracing::Level::INFO } else { tracing::Level::WARN };
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_max_level(level).init();
    let ctx = Ctx { seed: cli.seed, config: cli.config, data_dir: cli.data_dir };
    let result = match cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(&ctx, a),
        Command::GenReal(a) => commands::gen_real(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
        Command::BuildIndex(a) => commands::build_index(&ctx, a),
        Command::Query(a) => commands::query(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Ablate(a) => commands::ablate(&ctx, a),
        Command::Serve(a) => commands::serve(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": error_kind(&e), "message": format!("{e:#}") });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
