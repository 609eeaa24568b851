//! Scenario runner for the trial-design optimization toolkit.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trialopt::cli::config::RunConfig;
use trialopt::cli::runner::{self, DistStats, SummaryFile};
use trialopt::optimizer::Method;

#[derive(Parser)]
#[command(name = "trialopt", version, about = "Power-maximizing search over two-stage adaptive seamless trial designs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonFlags {
    /// Override the master seed of the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: TRIALOPT_WORKERS or all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Override the output directory of the config file.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override the Monte Carlo iterations per evaluation everywhere.
    #[arg(long)]
    nsim_override: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every scenario x method x replication of a config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        flags: CommonFlags,
    },
    /// Run only the grid methods of a config file and emit power curves.
    Grid {
        config: PathBuf,
        #[command(flatten)]
        flags: CommonFlags,
    },
    /// Re-validate a chosen design recorded in a summary file.
    Validate {
        summary: PathBuf,
        design_id: String,
        /// Validation replicates (default: as recorded).
        #[arg(long)]
        reps: Option<usize>,
        #[command(flatten)]
        flags: CommonFlags,
    },
    /// Emit power-curve tables from an evaluation history file.
    Curves {
        history: PathBuf,
        #[command(flatten)]
        flags: CommonFlags,
    },
}

fn init_workers(flags: &CommonFlags) {
    let from_env = std::env::var("TRIALOPT_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    if let Some(n) = flags.workers.or(from_env) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn load_config(path: &PathBuf, flags: &CommonFlags) -> trialopt::Result<trialopt::cli::config::ResolvedConfig> {
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = flags.seed {
        config.master_seed = seed;
        for sc in &mut config.scenarios {
            sc.master_seed = None;
        }
    }
    if let Some(dir) = &flags.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(nsim) = flags.nsim_override {
        config.defaults.nsim = nsim;
        for sc in &mut config.scenarios {
            sc.nsim = Some(nsim);
        }
    }
    config.resolve()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    let status = match &cli.command {
        Command::Run { config, flags } => {
            init_workers(flags);
            load_config(config, flags).and_then(|resolved| {
                let failures = runner::run_scenarios(&resolved, false)?;
                report_done(&resolved, failures);
                Ok(failures)
            })
        }
        Command::Grid { config, flags } => {
            init_workers(flags);
            load_config(config, flags).and_then(|mut resolved| {
                for sc in &mut resolved.scenarios {
                    sc.methods.retain(|m| matches!(m, Method::Grid | Method::GridSmall));
                    if sc.methods.is_empty() {
                        sc.methods.push(Method::Grid);
                    }
                }
                let failures = runner::run_scenarios(&resolved, true)?;
                report_done(&resolved, failures);
                Ok(failures)
            })
        }
        Command::Validate {
            summary,
            design_id,
            reps,
            flags,
        } => {
            init_workers(flags);
            (|| {
                let text = std::fs::read_to_string(summary)?;
                let file: SummaryFile = serde_json::from_str(&text)
                    .map_err(|e| trialopt::Error::Config(format!("{}: {e}", summary.display())))?;
                let (entry, estimates) = runner::revalidate(&file, design_id, *reps, flags.seed)?;
                let values: Vec<f64> = estimates.iter().map(|p| p.value).collect();
                let stats = DistStats::from_values(&values);
                println!("design {design_id}: {:?}", entry.chosen);
                println!(
                    "fresh validation over {} replicates at nsim = {}:",
                    values.len(),
                    entry.scenario_spec.consts.nsim
                );
                println!(
                    "  mean {:.4}  sd {:.4}  min {:.4}  median {:.4}  max {:.4}",
                    stats.mean, stats.sd, stats.min, stats.median, stats.max
                );
                println!("  recorded validated power was {:.4}", entry.validated_power);
                Ok(0usize)
            })()
        }
        Command::Curves { history, flags } => (|| {
            let out_dir = flags
                .output_dir
                .clone()
                .or_else(|| history.parent().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("."));
            let out = out_dir.join("curves.csv");
            let count = runner::curves_from_history_file(history, &out)?;
            println!("wrote {count} curve rows to {}", out.display());
            Ok(0usize)
        })(),
    };

    match status {
        Ok(0) => ExitCode::SUCCESS,
        Ok(failures) => {
            eprintln!("{failures} run(s) failed; see summary.json for details");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn report_done(config: &trialopt::cli::config::ResolvedConfig, failures: usize) {
    let total: usize = config
        .scenarios
        .iter()
        .map(|s| s.methods.len() * s.replications)
        .sum();
    println!(
        "{} of {} runs succeeded; artifacts in {}",
        total - failures,
        total,
        config.output_dir.display()
    );
}
