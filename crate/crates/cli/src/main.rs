use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cograd_cli::commands::ProbeData;
use cograd_cli::{cmd_capacity_sweep, cmd_probe, cmd_train, cmd_validate_approx, CliError, ExperimentConfig};
use cograd_core::trainer::ProbeConfig;

#[derive(Parser)]
#[command(name = "cograd", version, about = "Multi-task training with coordinated gradients")]
struct Cli {
    /// Runs executed in parallel.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Overrides the config's output_dir.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Added to every configured seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed_offset: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every strategy for every seed and write a comparison table.
    Train { config: PathBuf },
    /// Compare the Hessian surrogate and first-order transference with finite differences.
    ValidateApprox { config: PathBuf },
    /// Fit frozen-trunk probes on a checkpoint. DATA is a CSV file or an experiment config.
    Probe {
        checkpoint: PathBuf,
        data: PathBuf,
        /// CSV data start with a group-id column.
        #[arg(long)]
        groups: bool,
        /// Standardize trunk activations before fitting (CSV data only).
        #[arg(long)]
        standardize: bool,
    },
    /// Compare base width against a doubled first shared layer.
    CapacitySweep { config: PathBuf },
}

fn load(cli: &Cli, path: &PathBuf) -> Result<ExperimentConfig, CliError> {
    Ok(ExperimentConfig::load(path)?.with_overrides(cli.output_dir.clone(), cli.seed_offset))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train { config } => {
            let cfg = load(cli, config)?;
            let report = cmd_train(&cfg, cli.jobs)?;
            for row in &report.comparison {
                println!(
                    "{:<20} task {} {} {:.4} ± {:.4}{}",
                    row.strategy,
                    row.task,
                    row.metric,
                    row.mean,
                    row.std,
                    row.delta_vs_sum.map_or(String::new(), |d| format!("  Δ {d:+.4}"))
                );
            }
            println!("wrote {}", cfg.output_dir.join("comparison.csv").display());
        }
        Command::ValidateApprox { config } => {
            let cfg = load(cli, config)?;
            let rows = cmd_validate_approx(&cfg)?;
            for r in &rows {
                println!(
                    "step {:>6} {}→{} cos {:.4} ratio {:.4} gap ratio {:.2}",
                    r.step, r.source_task, r.target_task, r.hvp_cosine, r.hvp_norm_ratio, r.gap_ratio
                );
            }
            println!("wrote {}", cfg.output_dir.join("approx_report.csv").display());
        }
        Command::Probe {
            checkpoint,
            data,
            groups,
            standardize,
        } => {
            let is_config = data.extension().is_some_and(|e| e == "json");
            let cfg = if is_config { Some(load(cli, data)?) } else { None };
            let source = match &cfg {
                Some(cfg) => ProbeData::Config(cfg),
                None => ProbeData::Csv {
                    path: data,
                    has_group_column: *groups,
                    probe: ProbeConfig {
                        standardize: *standardize,
                        ..ProbeConfig::default()
                    },
                },
            };
            let out_dir = cli.output_dir.clone().unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            let report = cmd_probe(checkpoint, source, &out_dir)?;
            println!("general-knowledge share {:.4}", report.general_share);
            println!("wrote {}", out_dir.join("probe_histogram.csv").display());
        }
        Command::CapacitySweep { config } => {
            let cfg = load(cli, config)?;
            let rows = cmd_capacity_sweep(&cfg, cli.jobs)?;
            for r in &rows {
                let cells: Vec<String> = r
                    .means
                    .iter()
                    .zip(&r.deltas_vs_base)
                    .map(|(m, d)| format!("{m:.4} ({d:+.4})"))
                    .collect();
                println!("{:<20} width {:>4} {}", r.strategy, r.first_width, cells.join("  "));
            }
            println!("wrote {}", cfg.output_dir.join("capacity.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
