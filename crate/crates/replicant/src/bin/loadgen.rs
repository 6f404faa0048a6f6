use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use replicant::loadgen::{
    find_max_throughput, load_phase, report, run_closed_loop, run_open_loop, write_cdf_csv,
    Mode, RunConfig, SearchConfig, WorkloadSpec,
};

/// Workload generator and latency reporter for the kv line protocol.
#[derive(Parser)]
#[command(name = "loadgen")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, clap::Args)]
struct Common {
    /// Comma-separated client addresses of the cluster.
    #[arg(long, value_delimiter = ',', required = true)]
    cluster: Vec<String>,
    /// A = 50% reads, B = 95% reads.
    #[arg(long, default_value = "A")]
    workload: String,
    #[arg(long, default_value_t = 1000)]
    records: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Populate every record.
    Load {
        #[command(flatten)]
        common: Common,
    },
    /// Run the workload and report latency percentiles (and a CDF CSV).
    Run {
        #[command(flatten)]
        common: Common,
        /// open = scheduled arrivals (intended latency), closed = next op on
        /// completion of the last.
        #[arg(long, default_value = "open")]
        mode: String,
        /// Target ops/s (open mode).
        #[arg(long)]
        rate: Option<u64>,
        /// Thread count (closed mode).
        #[arg(long)]
        threads: Option<usize>,
        /// Dispatch pool size (open mode); default sizes from the rate.
        #[arg(long)]
        workers: Option<usize>,
        /// Exponential interarrivals instead of a constant schedule.
        #[arg(long)]
        poisson: bool,
        /// Plain integers are seconds; "500ms" works too.
        #[arg(long, default_value = "60")]
        duration: String,
        #[arg(long, default_value = "20")]
        warmup: String,
        /// Where to write the latency CDF CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Binary-search the highest rate whose intended p99 meets the target.
    Search {
        #[command(flatten)]
        common: Common,
        /// Target 99th-percentile intended latency, in milliseconds.
        #[arg(long)]
        target_p99: u64,
        #[arg(long, default_value_t = 50)]
        floor: u64,
        #[arg(long, default_value_t = 25)]
        resolution: u64,
        /// Per-probe trial length (plain integers are seconds).
        #[arg(long, default_value = "3")]
        trial: String,
        #[arg(long, default_value = "500ms")]
        trial_warmup: String,
    },
}

fn parse_secs(text: &str) -> Result<Duration, String> {
    let text = text.trim();
    let (digits, scale) = if let Some(d) = text.strip_suffix("ms") {
        (d, 0.001)
    } else if let Some(d) = text.strip_suffix('s') {
        (d, 1.0)
    } else {
        (text, 1.0)
    };
    let n: f64 = digits.trim().parse().map_err(|e| format!("bad duration {text:?}: {e}"))?;
    Ok(Duration::from_secs_f64(n * scale))
}

fn workload(common: &Common) -> Result<WorkloadSpec, String> {
    match common.workload.as_str() {
        "A" | "a" => Ok(WorkloadSpec::workload_a(common.records)),
        "B" | "b" => Ok(WorkloadSpec::workload_b(common.records)),
        other => Err(format!("unknown workload {other:?} (expected A or B)")),
    }
}

fn run_cmd(args: Args) -> Result<(), String> {
    match args.command {
        Cmd::Load { common } => {
            let spec = workload(&common)?;
            load_phase(&common.cluster, &spec, common.seed).map_err(|e| e.to_string())?;
            println!("loaded {} records", spec.record_count);
            Ok(())
        }
        Cmd::Run { common, mode, rate, threads, workers, poisson, duration, warmup, out } => {
            let spec = workload(&common)?;
            let mode = match mode.as_str() {
                "open" => {
                    let rate = rate.ok_or("open mode needs --rate")?;
                    let Mode::Open { workers: default_workers, .. } = Mode::open(rate) else {
                        unreachable!()
                    };
                    Mode::Open { rate, workers: workers.unwrap_or(default_workers), poisson }
                }
                "closed" => Mode::Closed { threads: threads.ok_or("closed mode needs --threads")? },
                other => return Err(format!("unknown mode {other:?}")),
            };
            let config = RunConfig {
                mode,
                duration: parse_secs(&duration)?,
                warmup: parse_secs(&warmup)?,
                cluster: common.cluster,
                seed: common.seed,
            };
            config.validate()?;
            let samples = match config.mode {
                Mode::Open { .. } => run_open_loop(&config, &spec),
                Mode::Closed { .. } => run_closed_loop(&config, &spec),
            };
            print!("{}", report(&samples));
            if let Some(path) = out {
                let file = std::fs::File::create(&path)
                    .map_err(|e| format!("cannot create {}: {e}", path.display()))?;
                write_cdf_csv(&samples, file).map_err(|e| e.to_string())?;
                println!("cdf written to {}", path.display());
            }
            Ok(())
        }
        Cmd::Search { common, target_p99, floor, resolution, trial, trial_warmup } => {
            let spec = workload(&common)?;
            let search = SearchConfig {
                floor,
                resolution,
                trial: parse_secs(&trial)?,
                trial_warmup: parse_secs(&trial_warmup)?,
                seed: common.seed,
            };
            let rate = find_max_throughput(
                &common.cluster,
                &spec,
                Duration::from_millis(target_p99),
                &search,
            )
            .map_err(|e| e.to_string())?;
            println!("max throughput at p99 <= {target_p99} ms: {rate} ops/s");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run_cmd(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
