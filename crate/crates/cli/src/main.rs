use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mmfl::config::{parse_config, RunConfig};
use mmfl::engine::MethodKind;
use mmfl::experiment;
use mmfl::verify::{run_suite, SUITES};

/// Multi-model federated learning simulator.
#[derive(Debug, Parser)]
#[command(name = "mmfl", version)]
struct Cli {
    /// Log progress (same as RUST_LOG=info).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one method for every configured seed.
    Run {
        #[command(flatten)]
        common: Common,
        /// Method to run; overrides the config.
        #[arg(long)]
        method: Option<MethodKind>,
    },
    /// Run several methods on identical seeds, data and initial weights.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "random,lvr,stalevr,full")]
        methods: Vec<MethodKind>,
    },
    /// Run oracle suites and report pass/fail with numbers.
    Verify {
        /// Suite to run, or `all`.
        #[arg(default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export the topology and synthetic datasets of one seed.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single seed; overrides the config's seed list.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds; overrides the config's seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of rounds; overrides the config.
    #[arg(long)]
    rounds: Option<usize>,
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => parse_config(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = load_config(self.config.as_ref())?;
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(r) = self.rounds {
            cfg.rounds = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn fmt_vec(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { common, method } => {
            let cfg = common.resolve()?;
            let method = match method {
                Some(m) => m,
                None => cfg.method_kind()?,
            };
            let out = experiment::run_experiment(&cfg, method)?;
            let s = &out.summary;
            println!("{method}: final accuracy mean [{}] std [{}]", fmt_vec(&s.mean_final_accuracy), fmt_vec(&s.std_final_accuracy));
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            Ok(true)
        }
        Command::Compare { common, methods } => {
            if methods.is_empty() {
                bail!("no methods given");
            }
            let cfg = common.resolve()?;
            let out = experiment::compare(&cfg, &methods)?;
            for m in &out.summary.methods {
                let rel = m.relative_accuracy.map_or_else(|| "-".to_string(), |r| format!("{r:.4}"));
                println!(
                    "{:<16} accuracy [{}] relative {rel} step-size variance {:.4}",
                    m.method,
                    fmt_vec(&m.mean_final_accuracy),
                    m.mean_step_size_time_variance
                );
            }
            println!("wrote {}", cfg.output_dir.display());
            Ok(true)
        }
        Command::Verify { suite, seed } => {
            let names: Vec<&str> = if suite == "all" { SUITES.to_vec() } else { vec![suite.as_str()] };
            let mut all = true;
            for name in names {
                let report = run_suite(name, seed)?;
                println!("{report}");
                all &= report.passed;
            }
            Ok(all)
        }
        Command::GenData { config, seed, out } => {
            let cfg = load_config(config.as_ref())?;
            let files = experiment::export_data(&cfg, seed, &out)?;
            println!("wrote {} files under {}", files.len(), out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
