use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tryon_core::evalmetrics::Setting;
use tryon_core::pipeline::{Run, RunConfig, SampleRequest, OUTPUT_ROOT_ENV};
use tryon_core::sampler::InitMode;
use tryon_core::{Error, Result};

/// Flow-guided latent diffusion try-on on a synthetic toy dataset.
#[derive(Parser, Debug)]
#[command(name = "tryon", version)]
struct Cli {
    /// Run config (JSON). Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; overrides the config's `output_root`.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    out: Option<PathBuf>,
    /// Dataset directory (default: `<out>/data`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the latent autoencoder.
    TrainAutoencoder,
    /// Train the garment warping network.
    TrainWarp,
    /// Train the flattening network.
    TrainFlatten,
    /// Train the try-on diffusion model.
    TrainDiffusion,
    /// Sample one try-on image.
    Sample {
        /// Sample id, or a directory with P_a.png, m.png and pose_map.f32.
        #[arg(long)]
        person: String,
        /// Sample id, or a flat garment PNG (mask = non-zero pixels).
        #[arg(long)]
        garment: String,
        #[arg(long)]
        init: Option<Init>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        freeu: Option<Toggle>,
        /// Write the decoded x0 estimate of every step here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate the trained model on the test split.
    Eval {
        #[arg(long, value_enum)]
        setting: SettingArg,
    },
    /// Train and compare the ablation lattice.
    Ablate,
    /// Print the effective config.
    ShowConfig,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Init {
    Gaussian,
    Posterior,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Toggle {
    On,
    Off,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SettingArg {
    Paired,
    Unpaired,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(p) if !p.is_file() => return Err(Error::Argument(format!("config file {} not found", p.display()))),
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.output_root = out.clone();
    }
    Ok(config)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    if let Command::ShowConfig = cli.command {
        println!("{}", config.to_json()?);
        return Ok(());
    }
    let mut run = Run::new(config)?;
    if let Some(d) = &cli.data {
        run = run.with_data_dir(d);
    }
    match cli.command {
        Command::GenData => {
            let m = run.gen_data()?;
            println!(
                "{} samples ({} train, {} test) in {}",
                m.count,
                m.train.len(),
                m.test.len(),
                run.layout.data.display()
            );
        }
        Command::TrainAutoencoder => print_json(&serde_json::json!({
            "heldout_l1": run.train_autoencoder()?.heldout_l1,
        }))?,
        Command::TrainWarp => print_json(&run.train_warp()?)?,
        Command::TrainFlatten => print_json(&run.train_flatten()?)?,
        Command::TrainDiffusion => {
            let r = run.train_diffusion()?;
            print_json(&serde_json::json!({
                "initial_diff_average": r.initial_diff_average,
                "final_diff_average": r.final_diff_average,
                "freeze_audit_passed": r.freeze_audit.passed(),
            }))?
        }
        Command::Sample {
            person,
            garment,
            init,
            steps,
            seed,
            freeu,
            trace,
        } => {
            let req = SampleRequest {
                person,
                garment,
                init: init.map(|i| match i {
                    Init::Gaussian => InitMode::Gaussian,
                    Init::Posterior => InitMode::ClothesPosterior,
                }),
                steps,
                seed,
                freeu: freeu.map(|t| matches!(t, Toggle::On)),
                trace,
            };
            println!("{}", run.sample(&req)?.display());
        }
        Command::Eval { setting } => {
            let setting = match setting {
                SettingArg::Paired => Setting::Paired,
                SettingArg::Unpaired => Setting::Unpaired,
            };
            print_json(&run.eval(setting)?.aggregates)?
        }
        Command::Ablate => {
            let r = run.ablate()?;
            print_json(&r.rows)?;
            println!(
                "posterior init closer to C^w on {}/{} unpaired queries",
                r.posterior_wins, r.unpaired_queries
            );
        }
        Command::ShowConfig => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
