//! Three real servers on loopback sockets: elections, redirects, failover,
//! and an end-to-end linearizability check of concurrent client histories.

use std::net::TcpListener;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use replicant::kvstore::{Command, CommandResult};
use replicant::loadgen::client::{KvClient, Settled};
use replicant::server::{Server, ServerConfig};
use replicant::simharness::checker::{check_linearizable, CheckerBudget, Verdict};
use replicant::simharness::HistoryEvent;

fn free_ports(n: usize) -> Vec<u16> {
    let listeners: Vec<TcpListener> =
        (0..n).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    listeners.iter().map(|l| l.local_addr().unwrap().port()).collect()
}

struct Cluster {
    runtime: tokio::runtime::Runtime,
    servers: Vec<Option<Server>>,
    client_addrs: Vec<String>,
}

impl Cluster {
    fn start(n: usize, seed: u64) -> Cluster {
        let ports = free_ports(2 * n);
        let peers: Vec<String> =
            (0..n).map(|i| format!("127.0.0.1:{}", ports[i])).collect();
        let client_addrs: Vec<String> =
            (0..n).map(|i| format!("127.0.0.1:{}", ports[n + i])).collect();
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        let mut servers = Vec::new();
        for i in 0..n {
            let config = ServerConfig {
                my_id: i as u8,
                peers: peers.clone(),
                client_addrs: client_addrs.clone(),
                commit_interval_ms: Some(30),
                election_timeout_base_ms: None,
                election_jitter_max_ms: None,
                seed: Some(seed + i as u64),
            };
            let server = runtime.block_on(Server::start(config)).expect("server starts");
            servers.push(Some(server));
        }
        Cluster { runtime, servers, client_addrs }
    }

    fn leader_index(&self) -> Option<usize> {
        self.servers
            .iter()
            .position(|s| s.as_ref().map(|s| s.is_leader()).unwrap_or(false))
    }

    fn wait_for_leader(&self) -> usize {
        let deadline = Instant::now() + Duration::from_secs(10);
        while Instant::now() < deadline {
            if let Some(i) = self.leader_index() {
                return i;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        panic!("no leader emerged within 10 s");
    }

    fn client(&self) -> KvClient {
        KvClient::new(self.client_addrs.clone())
    }

    fn stop(&mut self, i: usize) {
        if let Some(server) = self.servers[i].take() {
            server.shutdown();
        }
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        for i in 0..self.servers.len() {
            self.stop(i);
        }
        // Server tasks were aborted; give the runtime a beat to unwind them.
        self.runtime.block_on(async {
            tokio::time::sleep(Duration::from_millis(20)).await;
        });
    }
}

fn put(kv: &mut KvClient, key: &str, value: &str) -> Settled {
    kv.execute(&format!("put {key} {value}"), 20).0
}

fn get(kv: &mut KvClient, key: &str) -> Settled {
    kv.execute(&format!("get {key}"), 20).0
}

#[test]
fn cluster_elects_serves_and_redirects() {
    let mut cluster = Cluster::start(3, 7000);
    cluster.wait_for_leader();
    // The client starts at peer 0's address regardless of who leads, so this
    // exercises the retry/redirect path whenever 0 is a follower.
    let mut kv = cluster.client();
    assert_eq!(put(&mut kv, "alpha", "1"), Settled::Ok(None));
    assert_eq!(get(&mut kv, "alpha"), Settled::Ok(Some("1".into())));
    assert_eq!(kv.execute("del alpha", 20).0, Settled::Ok(None));
    assert_eq!(get(&mut kv, "alpha"), Settled::NotFound);
    assert_eq!(kv.execute("frobnicate", 5).0, Settled::Failed);
    for i in 0..3 {
        cluster.stop(i);
    }
}

#[test]
fn failover_preserves_committed_data() {
    let mut cluster = Cluster::start(3, 7100);
    let first = cluster.wait_for_leader();
    let mut kv = cluster.client();
    for i in 0..20 {
        assert_eq!(put(&mut kv, &format!("key{i}"), &format!("v{i}")), Settled::Ok(None));
    }
    cluster.stop(first);
    let deadline = Instant::now() + Duration::from_secs(10);
    let second = loop {
        if let Some(i) = cluster.leader_index() {
            if i != first {
                break i;
            }
        }
        assert!(Instant::now() < deadline, "no successor leader within 10 s");
        std::thread::sleep(Duration::from_millis(20));
    };
    assert_ne!(first, second);
    // A fresh client must find every pre-failover write, and new writes work.
    let mut kv = cluster.client();
    for i in 0..20 {
        assert_eq!(
            get(&mut kv, &format!("key{i}")),
            Settled::Ok(Some(format!("v{i}"))),
            "key{i} lost in failover"
        );
    }
    assert_eq!(put(&mut kv, "post-failover", "yes"), Settled::Ok(None));
    for i in 0..3 {
        cluster.stop(i);
    }
}

#[test]
fn concurrent_client_histories_are_linearizable() {
    let mut cluster = Cluster::start(3, 7200);
    cluster.wait_for_leader();
    let t0 = Instant::now();
    let history: Arc<Mutex<Vec<HistoryEvent>>> = Arc::new(Mutex::new(Vec::new()));
    let op_counter = Arc::new(AtomicU64::new(0));

    let mut handles = Vec::new();
    for client in 0..3usize {
        let addrs = cluster.client_addrs.clone();
        let history = history.clone();
        let op_counter = op_counter.clone();
        handles.push(std::thread::spawn(move || {
            let mut kv = KvClient::new(addrs);
            for i in 0..12 {
                let key = format!("k{}", (client + i) % 4);
                let op_id = op_counter.fetch_add(1, Ordering::SeqCst);
                let unique = format!("c{client}i{i}");
                let (command, line) = match i % 3 {
                    0 => (
                        Command::Put { key: key.clone().into_bytes(), value: unique.clone().into_bytes() },
                        format!("put {key} {unique}"),
                    ),
                    1 => (Command::Get { key: key.clone().into_bytes() }, format!("get {key}")),
                    _ => (Command::Del { key: key.clone().into_bytes() }, format!("del {key}")),
                };
                let invoked_ns = t0.elapsed().as_nanos() as u64;
                let (settled, _) = kv.execute(&line, 20);
                let completed_ns = t0.elapsed().as_nanos() as u64;
                let result = match settled {
                    Settled::Ok(Some(v)) => CommandResult::ok_value(v.into_bytes()),
                    Settled::Ok(None) => CommandResult::ok(),
                    Settled::NotFound => CommandResult::not_found(),
                    Settled::Failed => panic!("op failed on a healthy cluster"),
                };
                history.lock().unwrap().push(HistoryEvent {
                    op_id,
                    client,
                    invoked_ns,
                    completed_ns: Some(completed_ns.max(invoked_ns + 1)),
                    command,
                    result: Some(result),
                });
            }
        }));
    }
    for h in handles {
        h.join().unwrap();
    }
    let mut history = Arc::try_unwrap(history).unwrap().into_inner().unwrap();
    history.sort_by_key(|h| h.op_id);
    match check_linearizable(&history, CheckerBudget::default()) {
        Verdict::Linearizable { .. } => {}
        v => panic!("real-cluster history not linearizable: {v:?}"),
    }
    for i in 0..3 {
        cluster.stop(i);
    }
}

#[test]
fn sessions_disappear_on_disconnect() {
    let mut cluster = Cluster::start(1, 7300);
    cluster.wait_for_leader();
    let server = cluster.servers[0].as_ref().unwrap();
    assert_eq!(server.session_count(), 0);
    {
        let mut kv = cluster.client();
        assert_eq!(put(&mut kv, "x", "1"), Settled::Ok(None));
        assert_eq!(server.session_count(), 1);
    }
    let deadline = Instant::now() + Duration::from_secs(5);
    while server.session_count() != 0 {
        assert!(Instant::now() < deadline, "session lingered after disconnect");
        std::thread::sleep(Duration::from_millis(10));
    }
    cluster.stop(0);
}
