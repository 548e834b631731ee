use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use modecfg::evaluation::{knn_predict_partition, ResponseMatrix};
use modecfg::interface::{self, report, ExperimentConfig, ExperimentOutcome, SynthConfig};
use modecfg::strategies::{posthoc_from_matrix, PartitionMethod, Strategy};
use modecfg::Error;

#[derive(Parser)]
#[command(name = "modecfg", version, about = "Multi-configuration algorithm tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tune an external algorithm through a worker process.
    Tune {
        #[arg(long)]
        space: PathBuf,
        /// Worker command line, split on whitespace.
        #[arg(long)]
        worker: String,
        /// Dataset list, one instance id per line.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        strategy: Strategy,
        #[arg(short = 'k', long = "partitions")]
        k: usize,
        /// Budget in optimizer generations.
        #[arg(long)]
        budget: usize,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "exact")]
        partition_method: PartitionMethod,
        #[arg(long)]
        warm_start: bool,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Partition a precomputed configuration-by-instance cost matrix.
    Partition {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(short = 'k', long = "partitions")]
        k: usize,
        #[arg(long, default_value = "exact")]
        method: PartitionMethod,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-instance assignment CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run strategies on the synthetic multi-modal benchmark.
    Synth {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        modes: usize,
        #[arg(long)]
        per_mode: usize,
        #[arg(long)]
        budget: usize,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, num_args = 1.., value_delimiter = ',', default_value = "single,posthoc,staged,online")]
        strategies: Vec<Strategy>,
        /// Partitions for multi-configuration strategies; defaults to --modes.
        #[arg(short = 'k', long = "partitions")]
        k: Option<usize>,
        #[arg(long, default_value = "exact")]
        partition_method: PartitionMethod,
        #[arg(long)]
        warm_start: bool,
        /// Initial step size of the optimizer.
        #[arg(long, default_value_t = modecfg::synthbench::DEFAULT_SIGMA0)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Recompute the aggregate report from run logs.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Assign query instances to partitions by their nearest labelled neighbour.
    Predict {
        #[arg(long)]
        train_features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        query: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Argument(_) => Failure::Usage(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn summarize(outcome: &ExperimentOutcome) -> Result<(), Failure> {
    eprintln!("{} runs written", outcome.logs.len());
    if outcome.succeeded() {
        return Ok(());
    }
    for (strategy, seed, reason) in &outcome.failures {
        eprintln!("run {strategy} seed {seed} failed: {reason}");
    }
    Err(Failure::Run(format!("{} runs failed", outcome.failures.len())))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Tune {
            space,
            worker,
            data,
            strategy,
            k,
            budget,
            seeds,
            out,
            partition_method,
            warm_start,
            parallel,
            svg,
        } => {
            let cfg = ExperimentConfig {
                strategy,
                partitions: k,
                budget,
                seeds,
                method: partition_method,
                warm_start,
                space_path: space,
                data_path: data,
                out_dir: out,
                worker_command: worker,
                parallel,
                svg,
            };
            cfg.validate()?;
            let outcome = interface::run_experiment(&cfg).map_err(|e| Failure::Run(e.to_string()))?;
            summarize(&outcome)
        }
        Command::Partition {
            matrix,
            k,
            method,
            seed,
            out,
        } => {
            let m = ResponseMatrix::load(&matrix).map_err(|e| Failure::Run(e.to_string()))?;
            let p = posthoc_from_matrix(&m, k, method, seed)?;
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            let sizes = p.group_sizes();
            let _ = writeln!(w, "mean {}", p.mean_cost());
            for (g, &rep) in p.representatives.iter().enumerate() {
                let _ = writeln!(
                    w,
                    "partition {g}: config {} instances {} mean {}",
                    m.row_ids()[rep],
                    sizes[g],
                    if sizes[g] > 0 {
                        p.per_partition_cost[g] / sizes[g] as f64
                    } else {
                        f64::NAN
                    }
                );
            }
            if let Some(out) = out {
                let mut writer = csv::WriterBuilder::new()
                    .terminator(csv::Terminator::Any(b'\n'))
                    .from_path(&out)
                    .map_err(|e| Failure::Run(e.to_string()))?;
                let write = |writer: &mut csv::Writer<std::fs::File>| -> csv::Result<()> {
                    writer.write_record(["instance_id", "partition", "config_id"])?;
                    for (j, &g) in p.assignment.iter().enumerate() {
                        writer.write_record([
                            m.instance_ids()[j].as_str(),
                            &g.to_string(),
                            m.row_ids()[p.representatives[g]].as_str(),
                        ])?;
                    }
                    writer.flush()?;
                    Ok(())
                };
                write(&mut writer).map_err(|e| Failure::Run(e.to_string()))?;
            }
            Ok(())
        }
        Command::Synth {
            dim,
            modes,
            per_mode,
            budget,
            seeds,
            strategies,
            k,
            partition_method,
            warm_start,
            sigma,
            out,
            svg,
        } => {
            let mut cfg = SynthConfig::new(dim, modes, per_mode, budget, seeds, out);
            cfg.strategies = strategies;
            cfg.partitions = k;
            cfg.method = partition_method;
            cfg.warm_start = warm_start;
            cfg.svg = svg;
            cfg.sigma0 = sigma;
            let outcome = interface::run_synth(&cfg)?;
            summarize(&outcome)
        }
        Command::Report { runs, out, svg } => {
            let (_, agg) = interface::report_from_runs(&runs)?;
            report::save_rows(&agg, &out).map_err(|e| Failure::Run(e.to_string()))?;
            if let Some(svg) = svg {
                std::fs::write(svg, report::render_svg(&agg)).map_err(|e| Failure::Run(e.to_string()))?;
            }
            Ok(())
        }
        Command::Predict {
            train_features,
            labels,
            query,
        } => {
            let (train_ids, train) = interface::read_feature_csv(&train_features)?;
            let label_map = interface::read_label_csv(&labels)?;
            let train_labels = train_ids
                .iter()
                .map(|id| {
                    label_map
                        .get(id)
                        .copied()
                        .ok_or_else(|| Failure::Usage(format!("no label for training instance `{id}`")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let (query_ids, queries) = interface::read_feature_csv(&query)?;
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            let _ = writeln!(w, "instance_id,partition");
            for (id, q) in query_ids.iter().zip(&queries) {
                let label = knn_predict_partition(&train, &train_labels, q)?;
                let _ = writeln!(w, "{id},{label}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
