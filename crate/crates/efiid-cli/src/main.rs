use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use efiid::experiments::{describe, run, ExperimentConfig, ExperimentKind};

/// Exit status when a run completes but one of its checks fails.
const EXIT_FAILED: u8 = 1;
/// Exit status for unusable configs or arguments.
const EXIT_CONFIG: u8 = 2;
/// Exit status for errors during computation.
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "efiid", version, about = "Exact sampling and coarse-graining experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config; keys not given take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Run the property and oracle suite.
    Consistency,
    /// Coupling probabilities against box size.
    MixingCurve,
    /// Matching-tree statistics.
    MatchingTree,
    /// Coarse-field density sweep and cluster tails.
    ThetaTails,
    /// Thermodynamic integration of the free energy.
    FreeEnergy,
    /// Resampling the external complement of the cluster.
    Decoupling,
    /// Recompute the oracle fixtures used by the tests.
    RegenFixtures,
}

impl Command {
    fn kind(self) -> ExperimentKind {
        match self {
            Self::Consistency => ExperimentKind::Consistency,
            Self::MixingCurve => ExperimentKind::MixingCurve,
            Self::MatchingTree => ExperimentKind::MatchingTree,
            Self::ThetaTails => ExperimentKind::ThetaTails,
            Self::FreeEnergy => ExperimentKind::FreeEnergy,
            Self::Decoupling => ExperimentKind::Decoupling,
            Self::RegenFixtures => ExperimentKind::RegenFixtures,
        }
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig, String> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_json::from_str::<ExperimentConfig>(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    cfg.experiment = cli.command.kind();
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(w) = cli.workers {
        if w == 0 || rayon::ThreadPoolBuilder::new().num_threads(w).build_global().is_err() {
            eprintln!("error: cannot start {w} workers");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let report = match run(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    match report.write(&dir) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    print!("{}", describe(&report));
    if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAILED)
    }
}
