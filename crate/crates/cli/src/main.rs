use std::path::PathBuf;
use std::process::ExitCode;

use adacal::EnergyMode;
use adacal_cli::{run, Command, EnergyTarget, Overrides, RunConfig, SensitivityTarget};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adacal", version, about = "Training-free ANN-to-SNN conversion pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    shared: Shared,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Train the reference network on the training split.
    Train,
    /// Fit thresholds and write the converted network with its calibration cache.
    Convert,
    /// Search per-layer burst caps under the energy target.
    SearchPhi,
    /// Search per-layer compression ratios under the sensitivity target.
    SearchRho,
    /// Fit the adaptive exit boundaries.
    FitExit,
    /// Evaluate every configuration on the evaluation split.
    Eval,
    /// Run the five-row technique ablation.
    Ablate,
    /// Write accuracy-vs-T curves, frontiers and exit histograms.
    Report,
}

#[derive(Args)]
struct Shared {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for artifacts and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    timesteps: Option<usize>,
    /// Energy per spike in joules.
    #[arg(long, global = true)]
    mu: Option<f64>,
    /// spike_count or synop.
    #[arg(long, global = true, value_parser = parse_via::<EnergyMode>)]
    energy_mode: Option<EnergyMode>,
    /// Absolute energy cap or uniform-phi:<n>.
    #[arg(long, global = true, value_parser = parse_via::<EnergyTarget>)]
    e_target: Option<EnergyTarget>,
    /// Absolute sensitivity cap or <m>x of the uncompressed sum.
    #[arg(long, global = true, value_parser = parse_via::<SensitivityTarget>)]
    s_target: Option<SensitivityTarget>,
    #[arg(long, global = true)]
    alpha_base: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    delta: Option<f64>,
}

fn parse_via<T>(s: &str) -> Result<T, String>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let s = cli.shared;
    let overrides = Overrides {
        seed: s.seed,
        out: s.out,
        timesteps: s.timesteps,
        mu: s.mu,
        energy_mode: s.energy_mode,
        e_target: s.e_target,
        s_target: s.s_target,
        alpha_base: s.alpha_base,
        beta: s.beta,
        delta: s.delta,
    };
    let command = match cli.command {
        Cmd::Train => Command::Train,
        Cmd::Convert => Command::Convert,
        Cmd::SearchPhi => Command::SearchPhi,
        Cmd::SearchRho => Command::SearchRho,
        Cmd::FitExit => Command::FitExit,
        Cmd::Eval => Command::Eval,
        Cmd::Ablate => Command::Ablate,
        Cmd::Report => Command::Report,
    };
    let result = RunConfig::load(s.config.as_deref()).and_then(|mut cfg| {
        cfg.apply(&overrides);
        run(command, &cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
