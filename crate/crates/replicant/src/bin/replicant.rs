use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use replicant::server::{Server, ServerConfig};

/// One replicated key-value store node.
#[derive(Parser)]
#[command(name = "replicant")]
struct Args {
    /// JSON config: my_id, peers, client_addrs, optional timing overrides.
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    env_logger::init();
    let args = Args::parse();
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let mut config = match ServerConfig::from_json(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    config.resolve_env();

    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    runtime.block_on(async move {
        let server = match Server::start(config).await {
            Ok(s) => s,
            Err(e) => {
                eprintln!("startup failed: {e}");
                return ExitCode::FAILURE;
            }
        };
        log::info!(
            "serving clients on {}, peers on {}",
            server.client_addr(),
            server.peer_addr()
        );
        tokio::signal::ctrl_c().await.expect("signal handler");
        // Exit report: whether every connection this process established or
        // accepted read TCP_NODELAY back as enabled. Written to stdout so a
        // supervisor can scrape it.
        let (client, peer_accept, peer_dial) = server.nodelay_confirmed();
        println!("nodelay client={client} peer_accept={peer_accept} peer_dial={peer_dial}");
        log::info!("shutting down");
        server.shutdown();
        ExitCode::SUCCESS
    })
}
