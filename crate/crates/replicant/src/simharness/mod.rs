//! Seeded, deterministic discrete-event simulator: N consensus engines — the
//! production code, not a model — run over a fault-injectable virtual
//! network on a single-threaded executor, with global safety oracles checked
//! after every event and a linearizability verdict over the recorded client
//! history. Identical parameters yield byte-identical reports.

pub mod checker;
pub mod vnet;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures::channel::oneshot;
use futures::executor::LocalPool;
use futures::task::LocalSpawnExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::kvstore::{Command, CommandResult, MemKvStore};
use crate::multipaxos::{MultiPaxos, PeerConfig, ReplicateOutcome};
use crate::replog::{ExecuteOutcome, Log, LogFrontiers, PeerId};

pub use checker::{check_linearizable, CheckerBudget, Verdict};
pub use vnet::{Outage, OutageTarget, SimClock, SimNet, SimTransport};
use vnet::{Event, SimTime};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub seed: u64,
    pub n_peers: u8,
    /// Independent loss probability per message leg.
    pub drop_prob: f64,
    /// Uniform one-way delivery delay, virtual milliseconds (min, max).
    pub delay_ms: (u64, u64),
    pub outages: Vec<Outage>,
    pub horizon_ms: u64,
    pub clients: ClientScript,
    pub commit_interval_ms: u64,
    pub election_timeout_base_ms: u64,
    pub election_jitter_max_ms: u64,
    /// Capture (time, per-peer frontier) snapshots whenever they change.
    pub record_frontiers: bool,
    /// Skippable for bulk sweeps where only the safety oracles matter.
    pub check_history: bool,
    pub checker: CheckerBudget,
    /// Hard cap on processed events, guarding against runaway schedules.
    pub max_events: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            seed: 0,
            n_peers: 3,
            drop_prob: 0.0,
            delay_ms: (1, 10),
            outages: Vec::new(),
            horizon_ms: 10_000,
            clients: ClientScript::default(),
            commit_interval_ms: 150,
            election_timeout_base_ms: 450,
            election_jitter_max_ms: 150,
            record_frontiers: false,
            check_history: true,
            checker: CheckerBudget::default(),
            max_events: 2_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientScript {
    pub n_clients: usize,
    pub ops_per_client: usize,
    /// Keys are drawn uniformly from k0..k{keyspace-1}.
    pub keyspace: u64,
    pub put_frac: f64,
    pub del_frac: f64,
    pub think_ms: (u64, u64),
    /// Redirect/retry attempts per op before giving up.
    pub max_attempts: u32,
    pub backoff_ms: u64,
    /// How long to wait for an accepted op's execution result before
    /// recording it as pending and moving on.
    pub result_wait_ms: u64,
}

impl Default for ClientScript {
    fn default() -> Self {
        ClientScript {
            n_clients: 3,
            ops_per_client: 8,
            keyspace: 6,
            put_frac: 0.55,
            del_frac: 0.1,
            think_ms: (10, 250),
            max_attempts: 30,
            backoff_ms: 120,
            result_wait_ms: 2_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub op_id: u64,
    pub client: usize,
    pub invoked_ns: u64,
    /// None: the op may or may not have taken effect (pending).
    pub completed_ns: Option<u64>,
    pub command: Command,
    pub result: Option<CommandResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeerFrontier {
    pub last_index: u64,
    pub last_executed: u64,
    pub global_last_executed: u64,
    pub log_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierSnapshot {
    pub at_ms: u64,
    pub peers: Vec<PeerFrontier>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub seed: u64,
    pub n_peers: u8,
    /// Every ballot under which some peer acted as leader, and who.
    pub leaders: BTreeMap<u64, PeerId>,
    pub agreement_violations: Vec<String>,
    pub trim_violations: Vec<String>,
    pub prefix_divergences: Vec<String>,
    pub ballot_violations: Vec<String>,
    pub liveness_violations: Vec<String>,
    pub notes: Vec<String>,
    pub events: u64,
    pub virtual_end_ms: u64,
    pub ops_completed: usize,
    pub ops_pending: usize,
    pub ops_abandoned: usize,
    pub executed_per_peer: Vec<usize>,
    pub history: Vec<HistoryEvent>,
    pub history_verdict: Option<Verdict>,
    pub frontier_timeline: Vec<FrontierSnapshot>,
}

impl SimReport {
    fn new(params: &SimParams) -> SimReport {
        SimReport {
            seed: params.seed,
            n_peers: params.n_peers,
            leaders: BTreeMap::new(),
            agreement_violations: Vec::new(),
            trim_violations: Vec::new(),
            prefix_divergences: Vec::new(),
            ballot_violations: Vec::new(),
            liveness_violations: Vec::new(),
            notes: Vec::new(),
            events: 0,
            virtual_end_ms: 0,
            ops_completed: 0,
            ops_pending: 0,
            ops_abandoned: 0,
            executed_per_peer: Vec::new(),
            history: Vec::new(),
            history_verdict: None,
            frontier_timeline: Vec::new(),
        }
    }

    /// True if any safety or liveness oracle fired; the run halts on this.
    pub fn halted(&self) -> bool {
        !self.agreement_violations.is_empty()
            || !self.trim_violations.is_empty()
            || !self.prefix_divergences.is_empty()
            || !self.ballot_violations.is_empty()
            || !self.liveness_violations.is_empty()
    }

    pub fn passing(&self) -> bool {
        !self.halted()
            && !matches!(
                self.history_verdict,
                Some(Verdict::NotLinearizable { .. }) | Some(Verdict::BudgetExceeded { .. })
            )
    }
}

struct Shared {
    /// Per peer, the (index, client_id) sequence in execution order.
    exec_trace: Vec<Vec<(u64, u64)>>,
    /// (peer, client_id) → where to deliver that op's execution result.
    routes: BTreeMap<(PeerId, u64), oneshot::Sender<CommandResult>>,
    history: Vec<HistoryEvent>,
    abandoned: usize,
}

pub fn run(params: &SimParams) -> SimReport {
    assert!(params.n_peers >= 1, "need at least one peer");
    let n = params.n_peers;
    let net = SimNet::new(params.seed ^ 0xD15C0, params.drop_prob, params.delay_ms);

    let mut logs: Vec<Arc<Log>> = Vec::new();
    let mut engines: Vec<Arc<MultiPaxos>> = Vec::new();
    for p in 0..n {
        let mut cfg = PeerConfig::new(p, vec!["sim".into(); n as usize]);
        cfg.commit_interval = Duration::from_millis(params.commit_interval_ms);
        cfg.election_timeout_base = Duration::from_millis(params.election_timeout_base_ms);
        cfg.election_jitter_max = Duration::from_millis(params.election_jitter_max_ms);
        cfg.seed = params.seed.wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(p as u64 + 1));
        let log = Arc::new(Log::new());
        let engine = MultiPaxos::new(
            cfg,
            log.clone(),
            Arc::new(SimTransport { src: p, net: net.clone() }),
            Arc::new(SimClock { net: net.clone() }),
        );
        net.register(p, engine.clone());
        logs.push(log);
        engines.push(engine);
    }

    // Fixed-target outages go straight in; leader-targeted ones resolve when
    // their window opens, so drop a marker to regain control then.
    let mut dynamics: Vec<Outage> = Vec::new();
    for o in &params.outages {
        if o.target == OutageTarget::CurrentLeader {
            net.add_marker(o.start_ms);
            dynamics.push(o.clone());
        } else {
            net.add_outage(o.start_ms, o.duration_ms, o.target.clone());
        }
    }

    let shared = Arc::new(Mutex::new(Shared {
        exec_trace: vec![Vec::new(); n as usize],
        routes: BTreeMap::new(),
        history: Vec::new(),
        abandoned: 0,
    }));
    let stopped = Arc::new(AtomicBool::new(false));

    let mut pool = LocalPool::new();
    let sp = pool.spawner();
    for p in 0..n as usize {
        let e = engines[p].clone();
        sp.spawn_local(async move { e.prepare_worker_loop().await }).unwrap();
        let e = engines[p].clone();
        sp.spawn_local(async move { e.commit_worker_loop().await }).unwrap();
        sp.spawn_local(executor_task(p as PeerId, logs[p].clone(), shared.clone())).unwrap();
    }
    let engines_arc = Arc::new(engines);
    for c in 0..params.clients.n_clients {
        sp.spawn_local(client_task(
            c,
            params.clone(),
            engines_arc.clone(),
            net.clone(),
            shared.clone(),
            stopped.clone(),
        ))
        .unwrap();
    }

    let mut report = SimReport::new(params);
    let mut oracle = Oracle::new(params);
    let horizon = params.horizon_ms * 1_000_000;

    pool.run_until_stalled();
    oracle.scan(0, &engines_arc, &logs, &net, &shared, params, &mut report);

    while let Some(t) = net.next_event_time() {
        if t > horizon || report.halted() || report.events >= params.max_events {
            break;
        }
        dynamics.retain(|o| {
            if o.start_ms * 1_000_000 > t {
                return true;
            }
            match current_connected_leader(&engines_arc, &net) {
                Some(leader) => {
                    net.add_outage(o.start_ms, o.duration_ms, OutageTarget::Peer(leader));
                    report
                        .notes
                        .push(format!("outage at {}ms targets leader peer {}", o.start_ms, leader));
                }
                None => report
                    .notes
                    .push(format!("outage at {}ms skipped: no connected leader", o.start_ms)),
            }
            false
        });
        let Some((now, ev)) = net.pop() else { break };
        match ev {
            Event::Timer(cell) => cell.complete(()),
            Event::Resolve { cell, outcome } => cell.complete(outcome),
            Event::Deliver { src, dest, msg, reply } => {
                // The link may have gone down while the message was in
                // flight; an isolated peer processes nothing.
                if net.link_up(src, dest) {
                    if let Some(h) = net.handler(dest) {
                        let resp = h.handle(msg);
                        net.finish_delivery(src, dest, resp, &reply);
                    }
                }
            }
        }
        pool.run_until_stalled();
        report.events += 1;
        oracle.scan(now, &engines_arc, &logs, &net, &shared, params, &mut report);
    }
    if report.events >= params.max_events {
        report.notes.push(format!("halted at the {}-event cap", params.max_events));
    }
    report.virtual_end_ms = net.now_ns() / 1_000_000;

    // Teardown: stop the engines, then drop all result routes so clients
    // parked on them record their ops as pending and exit.
    stopped.store(true, Ordering::SeqCst);
    for e in engines_arc.iter() {
        e.stop();
    }
    for l in &logs {
        l.shutdown();
    }
    shared.lock().unwrap().routes.clear();
    pool.run_until_stalled();

    {
        let mut sh = shared.lock().unwrap();
        sh.history.sort_by_key(|h| h.op_id);
        report.history = std::mem::take(&mut sh.history);
        report.ops_abandoned = sh.abandoned;
        report.executed_per_peer = sh.exec_trace.iter().map(|t| t.len()).collect();
    }
    report.ops_completed = report.history.iter().filter(|h| h.completed_ns.is_some()).count();
    report.ops_pending = report.history.len() - report.ops_completed;
    if params.check_history {
        report.history_verdict = Some(check_linearizable(&report.history, params.checker));
    }
    report.leaders = oracle.leaders;
    report
}

/// Lowest-id peer that both claims leadership and is reachable right now.
fn current_connected_leader(engines: &[Arc<MultiPaxos>], net: &SimNet) -> Option<PeerId> {
    engines
        .iter()
        .enumerate()
        .find(|(p, e)| e.is_leader() && !net.isolated(*p as PeerId))
        .map(|(p, _)| p as PeerId)
}

async fn executor_task(peer: PeerId, log: Arc<Log>, shared: Arc<Mutex<Shared>>) {
    let mut store = MemKvStore::new();
    loop {
        match log.execute_next(&mut store).await {
            ExecuteOutcome::Executed { client_id, index, result } => {
                let mut sh = shared.lock().unwrap();
                sh.exec_trace[peer as usize].push((index, client_id));
                if let Some(tx) = sh.routes.remove(&(peer, client_id)) {
                    let _ = tx.send(result);
                }
            }
            ExecuteOutcome::Stopped => return,
        }
    }
}

async fn client_task(
    client: usize,
    params: SimParams,
    engines: Arc<Vec<Arc<MultiPaxos>>>,
    net: Arc<SimNet>,
    shared: Arc<Mutex<Shared>>,
    stopped: Arc<AtomicBool>,
) {
    let script = &params.clients;
    let clock = SimClock { net: net.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ (0xC11E47 + client as u64));
    let n = engines.len();
    let mut preferred = rng.gen_range(0..n);

    for i in 0..script.ops_per_client {
        if stopped.load(Ordering::SeqCst) {
            return;
        }
        let think = rng.gen_range(script.think_ms.0..=script.think_ms.1.max(script.think_ms.0));
        clock.sleep(Duration::from_millis(think)).await;
        if stopped.load(Ordering::SeqCst) {
            return;
        }

        let op_id = (client as u64) * 10_000 + i as u64;
        let key = format!("k{}", rng.gen_range(0..script.keyspace)).into_bytes();
        let kind: f64 = rng.gen();
        let command = if kind < script.put_frac {
            // Values are unique per op so a read can only be explained by
            // the one write that actually produced what it saw.
            Command::Put { key, value: format!("v{op_id}").into_bytes() }
        } else if kind < script.put_frac + script.del_frac {
            Command::Del { key }
        } else {
            Command::Get { key }
        };

        let mut attempt: u32 = 0;
        loop {
            attempt += 1;
            if attempt > script.max_attempts || stopped.load(Ordering::SeqCst) {
                shared.lock().unwrap().abandoned += 1;
                break;
            }
            let peer = preferred as PeerId;
            let client_id = op_id * 100 + attempt as u64;
            let (tx, rx) = oneshot::channel();
            shared.lock().unwrap().routes.insert((peer, client_id), tx);
            let invoked = net.now_ns();
            let outcome = engines[preferred].replicate(command.clone(), client_id).await;
            match outcome {
                // An instance exists (maybe even committed): the op is now in
                // play and must never be retried. Wait a bounded time for its
                // execution result; a superseded instance never executes, so
                // on timeout record the op as pending and move on.
                ReplicateOutcome::Ok { .. }
                | ReplicateOutcome::Retry { attempted: true }
                | ReplicateOutcome::NotLeader { attempted: true, .. } => {
                    let wait = clock.sleep(Duration::from_millis(script.result_wait_ms));
                    let (completed_ns, result) =
                        match futures::future::select(rx, wait).await {
                            futures::future::Either::Left((Ok(res), _)) => {
                                (Some(net.now_ns().max(invoked + 1)), Some(res))
                            }
                            _ => (None, None),
                        };
                    let mut sh = shared.lock().unwrap();
                    if completed_ns.is_none() {
                        sh.routes.remove(&(peer, client_id));
                    }
                    sh.history.push(HistoryEvent {
                        op_id,
                        client,
                        invoked_ns: invoked,
                        completed_ns,
                        command: command.clone(),
                        result,
                    });
                    break;
                }
                ReplicateOutcome::Retry { attempted: false } => {
                    shared.lock().unwrap().routes.remove(&(peer, client_id));
                    clock.sleep(Duration::from_millis(script.backoff_ms)).await;
                }
                ReplicateOutcome::NotLeader { hint, attempted: false } => {
                    shared.lock().unwrap().routes.remove(&(peer, client_id));
                    preferred = match hint {
                        Some(h) => h as usize,
                        None => rng.gen_range(0..n),
                    };
                    clock.sleep(Duration::from_millis(script.backoff_ms / 4)).await;
                }
            }
        }
    }
}

/// Full pairwise agreement check over committed instances, as used by the
/// incremental oracle; exposed for fixture-driven tests and post-hoc audits.
pub fn check_agreement(logs: &[Arc<Log>]) -> Vec<String> {
    let mut agreed: BTreeMap<u64, (usize, u64, Command)> = BTreeMap::new();
    let mut violations = Vec::new();
    for (p, log) in logs.iter().enumerate() {
        for inst in log.instances_snapshot() {
            if !inst.is_committed() {
                continue;
            }
            match agreed.get(&inst.index) {
                None => {
                    agreed.insert(inst.index, (p, inst.client_id, inst.command));
                }
                Some((q, cid, cmd)) => {
                    if *cid != inst.client_id || *cmd != inst.command {
                        violations.push(format!(
                            "index {}: peer {q} committed client {cid} but peer {p} committed client {}",
                            inst.index, inst.client_id
                        ));
                    }
                }
            }
        }
    }
    violations
}

/// No peer may believe the cluster trimmed past what some peer has executed.
pub fn check_trim_safety(frontiers: &[LogFrontiers]) -> Vec<String> {
    let Some(min_le) = frontiers.iter().map(|f| f.last_executed).min() else {
        return Vec::new();
    };
    frontiers
        .iter()
        .enumerate()
        .filter(|(_, f)| f.global_last_executed > min_le)
        .map(|(p, f)| {
            format!(
                "peer {p} holds global_last_executed {} but some peer has executed only {min_le}",
                f.global_last_executed
            )
        })
        .collect()
}

struct Oracle {
    /// index → first committed (peer, client_id, command) seen there.
    agreed: BTreeMap<u64, (usize, u64, Command)>,
    /// Global execution order; position k must hold index k+1 everywhere.
    prefix: Vec<(u64, u64)>,
    prefix_cursor: Vec<usize>,
    leaders: BTreeMap<u64, PeerId>,
    leaderless_since: Option<SimTime>,
    fair_since: Option<SimTime>,
    liveness_bound: SimTime,
    drop_fair: bool,
    majority: usize,
    last_frontiers: Option<Vec<PeerFrontier>>,
}

impl Oracle {
    fn new(params: &SimParams) -> Oracle {
        Oracle {
            agreed: BTreeMap::new(),
            prefix: Vec::new(),
            prefix_cursor: vec![0; params.n_peers as usize],
            leaders: BTreeMap::new(),
            leaderless_since: None,
            fair_since: None,
            liveness_bound: params.election_timeout_base_ms * 1_000_000 * 10,
            drop_fair: params.drop_prob <= 0.3,
            majority: params.n_peers as usize / 2 + 1,
            last_frontiers: None,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn scan(
        &mut self,
        now: SimTime,
        engines: &[Arc<MultiPaxos>],
        logs: &[Arc<Log>],
        net: &SimNet,
        shared: &Mutex<Shared>,
        params: &SimParams,
        report: &mut SimReport,
    ) {
        // Ballot uniqueness: one acting leader per ballot, ever.
        for (p, e) in engines.iter().enumerate() {
            if !e.is_leader() {
                continue;
            }
            let b = e.ballot().raw();
            match self.leaders.get(&b) {
                None => {
                    self.leaders.insert(b, p as PeerId);
                }
                Some(q) if *q != p as PeerId => report
                    .ballot_violations
                    .push(format!("ballot {b} led by both peer {q} and peer {p}")),
                Some(_) => {}
            }
        }

        // Agreement: committed instances are immutable, so each index is
        // pinned by its first committed appearance and compared ever after.
        for (p, log) in logs.iter().enumerate() {
            for inst in log.instances_snapshot() {
                if !inst.is_committed() {
                    continue;
                }
                match self.agreed.get(&inst.index) {
                    None => {
                        self.agreed.insert(inst.index, (p, inst.client_id, inst.command));
                    }
                    Some((q, cid, cmd)) => {
                        if *cid != inst.client_id || *cmd != inst.command {
                            report.agreement_violations.push(format!(
                                "index {}: peer {q} committed client {cid} but peer {p} committed client {}",
                                inst.index, inst.client_id
                            ));
                        }
                    }
                }
            }
        }

        // Executed prefixes: every peer applies the same (index, client)
        // sequence, gap-free from 1.
        {
            let sh = shared.lock().unwrap();
            for (p, trace) in sh.exec_trace.iter().enumerate() {
                while self.prefix_cursor[p] < trace.len() {
                    let pos = self.prefix_cursor[p];
                    let (idx, cid) = trace[pos];
                    if idx != (pos + 1) as u64 {
                        report.prefix_divergences.push(format!(
                            "peer {p} executed index {idx} at position {pos}"
                        ));
                    }
                    if self.prefix.len() <= pos {
                        self.prefix.push((idx, cid));
                    } else if self.prefix[pos] != (idx, cid) {
                        report.prefix_divergences.push(format!(
                            "peer {p} executed client {cid} at index {idx} where client {} was executed",
                            self.prefix[pos].1
                        ));
                    }
                    self.prefix_cursor[p] += 1;
                }
            }
        }

        // Trim safety.
        let frontiers: Vec<LogFrontiers> = logs.iter().map(|l| l.frontiers()).collect();
        let min_le = frontiers.iter().map(|f| f.last_executed).min().unwrap_or(0);
        for (p, f) in frontiers.iter().enumerate() {
            if f.global_last_executed > min_le {
                report.trim_violations.push(format!(
                    "at {now}ns peer {p} trimmed to {} but the slowest peer executed only {min_le}",
                    f.global_last_executed
                ));
            }
        }

        // Election liveness, measured only across fair stretches.
        let fair = self.drop_fair
            && !net.link_outage_active()
            && (params.n_peers as usize - net.isolated_count(params.n_peers)) >= self.majority;
        self.fair_since = if fair { self.fair_since.or(Some(now)) } else { None };
        let led = engines
            .iter()
            .enumerate()
            .any(|(p, e)| e.is_leader() && !net.isolated(p as PeerId));
        self.leaderless_since = if led { None } else { self.leaderless_since.or(Some(now)) };
        if let (Some(ls), Some(fs)) = (self.leaderless_since, self.fair_since) {
            let deadline = ls.max(fs) + self.liveness_bound;
            if now > deadline {
                report.liveness_violations.push(format!(
                    "leaderless since {}ms under fair conditions since {}ms, still no leader at {}ms",
                    ls / 1_000_000,
                    fs / 1_000_000,
                    now / 1_000_000
                ));
            }
        }

        if params.record_frontiers {
            let snap: Vec<PeerFrontier> = logs
                .iter()
                .map(|l| {
                    let f = l.frontiers();
                    PeerFrontier {
                        last_index: f.last_index,
                        last_executed: f.last_executed,
                        global_last_executed: f.global_last_executed,
                        log_len: l.instances_snapshot().len(),
                    }
                })
                .collect();
            if self.last_frontiers.as_ref() != Some(&snap) {
                report
                    .frontier_timeline
                    .push(FrontierSnapshot { at_ms: now / 1_000_000, peers: snap.clone() });
                self.last_frontiers = Some(snap);
            }
        }
    }
}
