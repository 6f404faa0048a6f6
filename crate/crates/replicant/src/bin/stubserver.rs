use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::Parser;
use replicant::loadgen::stub::{spawn_stub, ServiceProfile};

/// A strictly serial kv stub for latency-methodology demonstrations: by
/// default it answers 96 of every 100 requests in 1 ms and the other 4 in
/// 250 ms, the classic profile that fools closed-loop load generators.
#[derive(Parser)]
#[command(name = "stubserver")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    /// Constant service time instead of the hiccup profile.
    #[arg(long)]
    service_ms: Option<u64>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let profile = match args.service_ms {
        Some(ms) => ServiceProfile::Constant(Duration::from_millis(ms)),
        None => ServiceProfile::hiccup(),
    };
    match spawn_stub(&args.listen, profile, Arc::new(AtomicBool::new(false))) {
        Ok(addr) => {
            println!("{addr}");
            loop {
                std::thread::park();
            }
        }
        Err(e) => {
            eprintln!("bind {}: {e}", args.listen);
            ExitCode::FAILURE
        }
    }
}
