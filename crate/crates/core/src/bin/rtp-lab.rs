use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rtp_lab::experiments::{self, Experiment, ExperimentConfig, GridSpec, OutputFormat, Verdict};
use rtp_lab::tensor_model::MomentModel;
use rtp_lab::Error;

/// Random tensor product spectra: simulations and numerical checks.
#[derive(Parser)]
#[command(name = "rtp-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sampled spectra against the limit law.
    Esd(Flags),
    /// KS distance and norm variance across degrees d.
    ThresholdScan(Flags),
    /// Exact norm variance against its bounds and Monte Carlo.
    VarianceCheck(Flags),
    /// Tensor moments against their bounds.
    MomentsCheck(Flags),
    /// Randomized resolvent identity checks.
    IdentitySuite(Flags),
    /// Fixed-point Stieltjes transform along a real grid.
    Fixpoint(Flags),
}

#[derive(Args)]
struct Flags {
    /// JSON config file; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    /// Tensor degree; repeat for scans.
    #[arg(long)]
    d: Vec<usize>,
    #[arg(long, conflicts_with = "gamma")]
    p: Option<usize>,
    /// Aspect ratio N/p; p is rounded from it.
    #[arg(long)]
    gamma: Option<f64>,
    /// rademacher | gaussian | threepoint:B
    #[arg(long)]
    dist: Option<MomentModel>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    z_im_floor: Option<f64>,
    /// lo:hi:steps
    #[arg(long)]
    grid: Option<GridSpec>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
    /// Population eigenvalues, comma separated.
    #[arg(long, value_delimiter = ',')]
    population: Option<Vec<f64>>,
    /// Output directory.
    #[arg(long, default_value = "rtp-out")]
    out: PathBuf,
    /// csv | json
    #[arg(long)]
    format: Option<OutputFormat>,
    /// Cap on N*p for sampled matrices.
    #[arg(long, env = "RTP_MAX_ENTRIES", hide_env_values = true)]
    max_entries: Option<u64>,
}

impl Flags {
    fn resolve(self) -> Result<(ExperimentConfig, PathBuf), Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Validation(format!("reading {}: {e}", path.display()))
                })?;
                ExperimentConfig::from_json(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if self.n.is_some() {
            cfg.n = self.n;
        }
        if !self.d.is_empty() {
            cfg.d = self.d;
        }
        if self.p.is_some() {
            cfg.p = self.p;
            cfg.gamma = None;
        }
        if self.gamma.is_some() {
            cfg.gamma = self.gamma;
            cfg.p = None;
        }
        if let Some(v) = self.dist {
            cfg.dist = v;
        }
        if self.trials.is_some() {
            cfg.trials = self.trials;
        }
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if let Some(v) = self.z_im_floor {
            cfg.z_im_floor = v;
        }
        if self.grid.is_some() {
            cfg.grid = self.grid;
        }
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
        if let Some(v) = self.bins {
            cfg.bins = v;
        }
        if self.population.is_some() {
            cfg.population = self.population;
        }
        if let Some(v) = self.format {
            cfg.format = v;
        }
        if let Some(v) = self.max_entries {
            cfg.max_entries = v;
        }
        Ok((cfg, self.out))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let (experiment, flags) = match cli.command {
        Command::Esd(f) => (Experiment::Esd, f),
        Command::ThresholdScan(f) => (Experiment::ThresholdScan, f),
        Command::VarianceCheck(f) => (Experiment::VarianceCheck, f),
        Command::MomentsCheck(f) => (Experiment::MomentsCheck, f),
        Command::IdentitySuite(f) => (Experiment::IdentitySuite, f),
        Command::Fixpoint(f) => (Experiment::Fixpoint, f),
    };
    let result = flags
        .resolve()
        .and_then(|(cfg, out)| Ok((experiments::run(experiment, &cfg)?, out)));
    let (outcome, out) = match result {
        Ok(v) => v,
        Err(e) => {
            eprintln!("rtp-lab {}: {e}", experiment.name());
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    if let Err(e) = outcome.write_to(&out) {
        eprintln!("rtp-lab {}: writing {}: {e}", experiment.name(), out.display());
        return ExitCode::from(1);
    }
    for a in &outcome.artifacts {
        println!("{}", out.join(&a.name).display());
    }
    match &outcome.verdict {
        Verdict::Ok => {}
        Verdict::BoundViolation(msg) | Verdict::NonConvergence(msg) => eprintln!("{msg}"),
    }
    ExitCode::from(outcome.exit_code() as u8)
}
