use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use replicant::simharness::{run, SimParams};

/// Deterministic protocol simulation: runs a full cluster on a virtual
/// network, checks every safety oracle after every event, and emits the run
/// report as JSON. Exits nonzero if any oracle fired or the history failed
/// the linearizability check.
#[derive(Parser)]
#[command(name = "simrun")]
struct Args {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    peers: Option<u8>,
    /// Per-leg message drop probability in [0, 1).
    #[arg(long)]
    drop: Option<f64>,
    /// One-way delay lower bound, e.g. 1, 1ms, or 1000000ns.
    #[arg(long)]
    delay_min: Option<String>,
    #[arg(long)]
    delay_max: Option<String>,
    /// Virtual run length (plain integers are milliseconds).
    #[arg(long)]
    horizon: Option<String>,
    /// JSON file of full SimParams (client script, outages, checker budget);
    /// the flags above override its fields.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Pretty-print the report.
    #[arg(long)]
    pretty: bool,
}

/// "450" and "450ms" are milliseconds; "2s" is seconds; "5000000ns" is exact.
fn parse_ms(text: &str) -> Result<u64, String> {
    let text = text.trim();
    let (digits, scale) = if let Some(d) = text.strip_suffix("ns") {
        (d, 0.000_001)
    } else if let Some(d) = text.strip_suffix("ms") {
        (d, 1.0)
    } else if let Some(d) = text.strip_suffix('s') {
        (d, 1000.0)
    } else {
        (text, 1.0)
    };
    let n: f64 = digits.trim().parse().map_err(|e| format!("bad duration {text:?}: {e}"))?;
    Ok((n * scale).round() as u64)
}

fn build_params(args: &Args) -> Result<SimParams, String> {
    let mut params = match &args.scenario {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("scenario parse error: {e}"))?
        }
        None => SimParams::default(),
    };
    if let Some(seed) = args.seed {
        params.seed = seed;
    }
    if let Some(peers) = args.peers {
        params.n_peers = peers;
    }
    if let Some(drop) = args.drop {
        if !(0.0..1.0).contains(&drop) {
            return Err(format!("drop probability {drop} outside [0, 1)"));
        }
        params.drop_prob = drop;
    }
    if let Some(min) = &args.delay_min {
        params.delay_ms.0 = parse_ms(min)?;
    }
    if let Some(max) = &args.delay_max {
        params.delay_ms.1 = parse_ms(max)?;
    }
    if params.delay_ms.0 > params.delay_ms.1 {
        return Err(format!(
            "delay bounds inverted: {} > {}",
            params.delay_ms.0, params.delay_ms.1
        ));
    }
    if let Some(horizon) = &args.horizon {
        params.horizon_ms = parse_ms(horizon)?;
    }
    Ok(params)
}

fn main() -> ExitCode {
    env_logger::init();
    let args = Args::parse();
    let params = match build_params(&args) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let report = run(&params);
    let json = if args.pretty {
        serde_json::to_string_pretty(&report)
    } else {
        serde_json::to_string(&report)
    }
    .expect("report serializes");
    println!("{json}");
    if report.passing() {
        eprintln!(
            "seed {}: ok ({} events, {} leaders, {} ops completed)",
            report.seed,
            report.events,
            report.leaders.len(),
            report.ops_completed
        );
        ExitCode::SUCCESS
    } else {
        eprintln!("seed {}: VIOLATION", report.seed);
        ExitCode::FAILURE
    }
}
