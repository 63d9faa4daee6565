use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use egn::config::RunConfig;
use egn::train;

#[derive(Parser)]
#[command(name = "egn", about = "Exemplar-guided gene expression prediction from slide image windows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the model variant (full, backbone_only, wo_eb, wo_projector).
    #[arg(long)]
    variant: Option<String>,
    /// Individual config overrides, e.g. --set train.lr=1e-3.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    GenData(Common),
    /// Train the global-view extractor on the bundle.
    TrainExtractor(Common),
    /// Encode every window and build the exemplar index.
    BuildIndex(Common),
    /// Print the nearest exemplars for one window.
    Retrieve {
        #[command(flatten)]
        common: Common,
        /// Window id to query (defaults to the first window).
        #[arg(long)]
        window: Option<u64>,
    },
    /// Cross-validated model training.
    Train(Common),
    /// Recompute metrics from saved checkpoints.
    Eval(Common),
    /// Finite-difference gradient check at a toy model size.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Parameter coordinates to sample.
        #[arg(long, default_value_t = 500)]
        coords: usize,
    },
}

fn load_config(common: &Common) -> egn::Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    cfg = cfg.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(variant) = &common.variant {
        cfg.variant = variant.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> egn::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(c) => println!("{}", train::cmd_gen_data(&load_config(&c)?)?),
        Command::TrainExtractor(c) => println!("{}", train::cmd_train_extractor(&load_config(&c)?)?),
        Command::BuildIndex(c) => println!("{}", train::cmd_build_index(&load_config(&c)?)?),
        Command::Retrieve { common, window } => {
            print!("{}", train::cmd_retrieve(&load_config(&common)?, window)?)
        }
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let outcome = train::cmd_train(&cfg)?;
            println!(
                "variant {}: MSE {:.5}  PCC@F {:.4}  PCC@S {:.4}  PCC@M {:.4}",
                outcome.variant,
                outcome.overall.mse,
                outcome.overall.pcc_at_f,
                outcome.overall.pcc_at_s,
                outcome.overall.pcc_at_m
            );
            println!("metrics written to {}", cfg.run_dir.display());
        }
        Command::Eval(c) => {
            let cfg = load_config(&c)?;
            let outcome = train::cmd_eval(&cfg)?;
            println!(
                "variant {}: MSE {:.5}  PCC@F {:.4}  PCC@S {:.4}  PCC@M {:.4}",
                outcome.variant,
                outcome.overall.mse,
                outcome.overall.pcc_at_f,
                outcome.overall.pcc_at_s,
                outcome.overall.pcc_at_m
            );
        }
        Command::Gradcheck { common, coords } => {
            let cfg = load_config(&common)?;
            let report = train::cmd_gradcheck(&cfg, coords)?;
            print!("{report}");
            if !report.pass() {
                return Err(egn::EgnError::Contract(format!(
                    "gradient check failed: max relative error {:.3e} exceeds rtol {:.1e}",
                    report.max_rel_err(),
                    report.rtol
                )));
            }
            println!("gradcheck passed ({} coordinates)", report.coords_checked);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
