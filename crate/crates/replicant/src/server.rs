//! The server process: glues one consensus engine to real sockets. Owns the
//! client sessions, the single executor loop that applies committed commands
//! to the store, and response routing back to the session that asked.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;

use crate::clock::TokioClock;
use crate::kvstore::{Command, CommandResult, MemKvStore};
use crate::multipaxos::{MultiPaxos, PeerConfig, ReplicateOutcome};
use crate::replog::{ExecuteOutcome, Log, PeerId};
use crate::transport::tcp::{serve, NodelayCheck, TcpTransport};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerConfig {
    pub my_id: PeerId,
    /// Peer-to-peer listen addresses; `my_id` indexes both lists.
    pub peers: Vec<String>,
    /// Client-facing listen addresses, used for "retry <addr>" redirects.
    pub client_addrs: Vec<String>,
    #[serde(default)]
    pub commit_interval_ms: Option<u64>,
    #[serde(default)]
    pub election_timeout_base_ms: Option<u64>,
    #[serde(default)]
    pub election_jitter_max_ms: Option<u64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ServerConfig {
    pub fn from_json(text: &str) -> Result<ServerConfig, String> {
        let config: ServerConfig =
            serde_json::from_str(text).map_err(|e| format!("config parse error: {e}"))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.peers.is_empty() {
            return Err("peers must not be empty".into());
        }
        if self.peers.len() != self.client_addrs.len() {
            return Err("peers and client_addrs must have the same length".into());
        }
        if (self.my_id as usize) >= self.peers.len() {
            return Err(format!("my_id {} out of range", self.my_id));
        }
        for list in [&self.peers, &self.client_addrs] {
            let mut seen = std::collections::HashSet::new();
            for addr in list {
                if !seen.insert(addr) {
                    return Err(format!("duplicate address in config: {addr}"));
                }
            }
        }
        for ms in [self.commit_interval_ms, self.election_timeout_base_ms] {
            if ms == Some(0) {
                return Err("durations must be positive".into());
            }
        }
        Ok(())
    }

    /// Listen addresses may come from the environment when the config holds
    /// an empty string for this peer's slot; explicit config values win.
    pub fn resolve_env(&mut self) {
        let slot = self.my_id as usize;
        if self.peers[slot].is_empty() {
            if let Ok(addr) = std::env::var("REPLICANT_PEER_ADDR") {
                self.peers[slot] = addr;
            }
        }
        if self.client_addrs[slot].is_empty() {
            if let Ok(addr) = std::env::var("REPLICANT_CLIENT_ADDR") {
                self.client_addrs[slot] = addr;
            }
        }
    }

    fn peer_config(&self) -> PeerConfig {
        let mut pc = PeerConfig::new(self.my_id, self.peers.clone());
        if let Some(ms) = self.commit_interval_ms {
            pc.commit_interval = Duration::from_millis(ms);
            pc.election_timeout_base = 3 * pc.commit_interval;
            pc.election_jitter_max = pc.commit_interval;
        }
        if let Some(ms) = self.election_timeout_base_ms {
            pc.election_timeout_base = Duration::from_millis(ms);
        }
        if let Some(ms) = self.election_jitter_max_ms {
            pc.election_jitter_max = Duration::from_millis(ms);
        }
        pc.seed = self.seed.unwrap_or_else(|| rand::random::<u64>() ^ self.my_id as u64);
        pc
    }
}

type Sessions = Mutex<HashMap<u64, mpsc::UnboundedSender<String>>>;

pub struct Server {
    engine: Arc<MultiPaxos>,
    log: Arc<Log>,
    sessions: Arc<Sessions>,
    tasks: Vec<tokio::task::JoinHandle<()>>,
    client_addr: SocketAddr,
    peer_addr: SocketAddr,
    client_nodelay: Arc<NodelayCheck>,
    peer_accept_nodelay: Arc<NodelayCheck>,
    peer_dial_nodelay: Arc<NodelayCheck>,
}

impl Server {
    pub async fn start(config: ServerConfig) -> Result<Server, String> {
        config.validate()?;
        let slot = config.my_id as usize;
        let peer_listener = TcpListener::bind(&config.peers[slot])
            .await
            .map_err(|e| format!("bind peer address {}: {e}", config.peers[slot]))?;
        let client_listener = TcpListener::bind(&config.client_addrs[slot])
            .await
            .map_err(|e| format!("bind client address {}: {e}", config.client_addrs[slot]))?;
        let peer_addr = peer_listener.local_addr().map_err(|e| e.to_string())?;
        let client_addr = client_listener.local_addr().map_err(|e| e.to_string())?;

        let log = Arc::new(Log::new());
        let transport = TcpTransport::new(config.my_id, &config.peers);
        let peer_dial_nodelay = transport.nodelay_check();
        let engine = MultiPaxos::new(
            config.peer_config(),
            log.clone(),
            Arc::new(transport),
            Arc::new(TokioClock::new()),
        );
        let sessions: Arc<Sessions> = Arc::new(Mutex::new(HashMap::new()));
        let peer_accept_nodelay = NodelayCheck::new();
        let client_nodelay = NodelayCheck::new();

        let mut tasks = Vec::new();
        tasks.push(tokio::spawn(serve(
            peer_listener,
            engine.clone(),
            peer_accept_nodelay.clone(),
        )));
        {
            let e = engine.clone();
            tasks.push(tokio::spawn(async move { e.prepare_worker_loop().await }));
        }
        {
            let e = engine.clone();
            tasks.push(tokio::spawn(async move { e.commit_worker_loop().await }));
        }
        {
            let log = log.clone();
            let sessions = sessions.clone();
            tasks.push(tokio::spawn(executor_loop(log, sessions)));
        }
        {
            let engine = engine.clone();
            let sessions = sessions.clone();
            let client_nodelay = client_nodelay.clone();
            let redirects = config.client_addrs.clone();
            let my_id = config.my_id;
            tasks.push(tokio::spawn(accept_clients(
                client_listener,
                engine,
                sessions,
                redirects,
                my_id,
                client_nodelay,
            )));
        }

        Ok(Server {
            engine,
            log,
            sessions,
            tasks,
            client_addr,
            peer_addr,
            client_nodelay,
            peer_accept_nodelay,
            peer_dial_nodelay,
        })
    }

    pub fn client_addr(&self) -> SocketAddr {
        self.client_addr
    }

    pub fn peer_addr(&self) -> SocketAddr {
        self.peer_addr
    }

    pub fn is_leader(&self) -> bool {
        self.engine.is_leader()
    }

    pub fn leader_hint(&self) -> Option<PeerId> {
        self.engine.leader_hint()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    pub fn log(&self) -> &Arc<Log> {
        &self.log
    }

    pub fn nodelay_confirmed(&self) -> (bool, bool, bool) {
        (
            self.client_nodelay.confirmed(),
            self.peer_accept_nodelay.confirmed(),
            self.peer_dial_nodelay.confirmed(),
        )
    }

    /// Stops the engine, unblocks the executor, and tears down all tasks.
    pub fn shutdown(&self) {
        self.engine.stop();
        self.log.shutdown();
        for t in &self.tasks {
            t.abort();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// The sole consumer of the log: applies committed commands in order and
/// routes each result to the session that issued it, if it is still here.
/// Instances replicated from other peers carry foreign client ids and are
/// dropped silently after execution.
async fn executor_loop(log: Arc<Log>, sessions: Arc<Sessions>) {
    let mut store = MemKvStore::new();
    loop {
        match log.execute_next(&mut store).await {
            ExecuteOutcome::Executed { client_id, result, .. } => {
                let tx = sessions.lock().unwrap().get(&client_id).cloned();
                if let Some(tx) = tx {
                    let _ = tx.send(format_result(&result));
                }
            }
            ExecuteOutcome::Stopped => return,
        }
    }
}

fn format_result(result: &CommandResult) -> String {
    if !result.ok {
        return "notfound".into();
    }
    match &result.value {
        Some(v) => format!("ok {}", String::from_utf8_lossy(v)),
        None => "ok".into(),
    }
}

async fn accept_clients(
    listener: TcpListener,
    engine: Arc<MultiPaxos>,
    sessions: Arc<Sessions>,
    redirects: Vec<String>,
    my_id: PeerId,
    nodelay: Arc<NodelayCheck>,
) {
    // Client ids ride inside replicated instances, so they must be unique
    // cluster-wide: peer id in the high byte, a process counter below.
    let counter = AtomicU64::new(1);
    loop {
        let (stream, _) = match listener.accept().await {
            Ok(conn) => conn,
            Err(_) => continue,
        };
        nodelay.apply(&stream);
        let client_id =
            ((my_id as u64) << 56) | (counter.fetch_add(1, Ordering::Relaxed) & ((1u64 << 56) - 1));
        tokio::spawn(client_session(
            stream,
            client_id,
            engine.clone(),
            sessions.clone(),
            redirects.clone(),
        ));
    }
}

async fn client_session(
    stream: TcpStream,
    client_id: u64,
    engine: Arc<MultiPaxos>,
    sessions: Arc<Sessions>,
    redirects: Vec<String>,
) {
    let (r, mut w) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<String>();
    sessions.lock().unwrap().insert(client_id, tx.clone());

    // One writer drains the response channel, so executor results and
    // immediate replies share an ordered path to the socket.
    let writer = tokio::spawn(async move {
        while let Some(line) = rx.recv().await {
            let mut line = line;
            line.push('\n');
            if w.write_all(line.as_bytes()).await.is_err() {
                return;
            }
        }
    });

    let mut reader = BufReader::new(r);
    let mut line = String::new();
    loop {
        line.clear();
        match reader.read_line(&mut line).await {
            Ok(0) | Err(_) => break,
            Ok(_) => {}
        }
        let reply = handle_client_line(&engine, client_id, line.trim_end(), &redirects).await;
        if let Some(reply) = reply {
            if tx.send(reply).is_err() {
                break;
            }
        }
    }

    sessions.lock().unwrap().remove(&client_id);
    writer.abort();
}

/// Parses one request line and drives it through replication. Returns the
/// immediate reply, or None when the executor will answer later (the command
/// committed and its result routes back via the session map).
pub async fn handle_client_line(
    engine: &MultiPaxos,
    client_id: u64,
    line: &str,
    redirects: &[String],
) -> Option<String> {
    let Some(command) = parse_client_command(line) else {
        return Some("err bad-command".into());
    };
    match engine.replicate(command, client_id).await {
        ReplicateOutcome::Ok { .. } => None,
        ReplicateOutcome::NotLeader { hint: Some(h), .. } => {
            match redirects.get(h as usize) {
                Some(addr) => Some(format!("retry {addr}")),
                None => Some("retry".into()),
            }
        }
        ReplicateOutcome::NotLeader { hint: None, .. } | ReplicateOutcome::Retry { .. } => {
            Some("retry".into())
        }
    }
}

pub fn parse_client_command(line: &str) -> Option<Command> {
    let mut it = line.split_ascii_whitespace();
    let cmd = match it.next()? {
        "get" => Command::Get { key: it.next()?.as_bytes().to_vec() },
        "put" => Command::Put {
            key: it.next()?.as_bytes().to_vec(),
            value: it.next()?.as_bytes().to_vec(),
        },
        "del" => Command::Del { key: it.next()?.as_bytes().to_vec() },
        _ => return None,
    };
    if it.next().is_some() {
        return None; // trailing junk
    }
    Some(cmd)
}
