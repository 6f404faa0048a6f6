pub mod client;
pub mod histogram;
pub mod stub;
pub mod zipf;

use std::io;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::distributions::Alphanumeric;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use client::{KvClient, Settled};
use histogram::LatencyHistogram;
use zipf::Zipfian;

#[derive(Debug, Error, PartialEq)]
pub enum LoadgenError {
    #[error("no samples outside the warmup window")]
    EmptySample,
    #[error("rate {rate} ops/s already misses the target tail latency")]
    ZeroCapacity { rate: u64 },
    #[error("record {key} not confirmed after {retries} retries")]
    LoadFailed { key: String, retries: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Read,
    Update,
}

/// A YCSB-style read/update mix over zipfian-popular records.
#[derive(Clone, Debug)]
pub struct WorkloadSpec {
    pub read_fraction: f64,
    pub record_count: u64,
    pub key_len: usize,
    pub value_len: usize,
    pub theta: f64,
}

impl WorkloadSpec {
    /// 50% reads / 50% updates.
    pub fn workload_a(record_count: u64) -> WorkloadSpec {
        WorkloadSpec { read_fraction: 0.5, ..WorkloadSpec::base(record_count) }
    }

    /// 95% reads / 5% updates.
    pub fn workload_b(record_count: u64) -> WorkloadSpec {
        WorkloadSpec { read_fraction: 0.95, ..WorkloadSpec::base(record_count) }
    }

    fn base(record_count: u64) -> WorkloadSpec {
        WorkloadSpec {
            read_fraction: 0.5,
            record_count,
            key_len: 23,
            value_len: 500,
            theta: 0.99,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return Err(format!("read fraction {} outside [0, 1]", self.read_fraction));
        }
        if self.key_len <= 4 || self.key_len > 4 + 20 {
            return Err(format!("key length {} cannot hold \"user\" plus an id", self.key_len));
        }
        if self.value_len == 0 {
            return Err("zero value length".into());
        }
        Ok(())
    }

    /// "user" followed by the id zero-padded to exactly key_len bytes.
    pub fn key(&self, id: u64) -> String {
        assert!(id < self.record_count.max(1), "id {id} outside the record space");
        format!("user{:0width$}", id, width = self.key_len - 4)
    }
}

/// One operation's client-side timing, all in nanoseconds since the run
/// origin. Open-loop runs keep the planned `scheduled_start` even when
/// dispatch lags, so `intended` charges queueing to the server; closed-loop
/// runs set scheduled_start = actual_start, which is exactly the coordinated
/// omission they exist to demonstrate.
#[derive(Clone, Debug)]
pub struct LatencySample {
    pub kind: OpKind,
    pub scheduled_start: u64,
    pub actual_start: u64,
    pub completion: u64,
    pub outcome: Outcome,
    pub warmup: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok { retries: u32 },
    Error,
}

impl LatencySample {
    pub fn intended(&self) -> u64 {
        self.completion - self.scheduled_start
    }

    pub fn service(&self) -> u64 {
        self.completion - self.actual_start
    }

    pub fn is_ok(&self) -> bool {
        matches!(self.outcome, Outcome::Ok { .. })
    }
}

/// Which latency definition a percentile is computed over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatencyKind {
    Intended,
    Service,
}

#[derive(Clone, Debug)]
pub enum Mode {
    /// Arrivals on a fixed schedule, dispatched by a worker pool.
    Open { rate: u64, workers: usize, poisson: bool },
    /// Each thread issues its next op when the previous one completes.
    Closed { threads: usize },
}

impl Mode {
    /// Pool sized for roughly 100 ms of in-flight ops, clamped to something
    /// an OS thread per worker can sustain.
    pub fn open(rate: u64) -> Mode {
        Mode::Open { rate, workers: (rate as usize / 10).clamp(16, 256), poisson: false }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub mode: Mode,
    pub duration: Duration,
    pub warmup: Duration,
    pub cluster: Vec<String>,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(mode: Mode, cluster: Vec<String>) -> RunConfig {
        RunConfig { mode, duration: Duration::from_secs(60), warmup: Duration::from_secs(20), cluster, seed: 1 }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.mode {
            Mode::Open { rate: 0, .. } => return Err("open-loop rate must be positive".into()),
            Mode::Open { workers: 0, .. } => return Err("need at least one worker".into()),
            Mode::Closed { threads: 0 } => return Err("need at least one thread".into()),
            _ => {}
        }
        if self.duration.is_zero() {
            return Err("zero duration".into());
        }
        if self.cluster.is_empty() {
            return Err("no cluster addresses".into());
        }
        Ok(())
    }
}

/// The deterministic op sequence: kinds, keys and update values all derive
/// from the seed, independent of timing or which worker runs the op.
pub struct OpStream {
    spec: WorkloadSpec,
    zipf: Zipfian,
    rng: ChaCha8Rng,
}

pub struct Op {
    pub kind: OpKind,
    pub line: String,
}

impl OpStream {
    pub fn new(spec: &WorkloadSpec, seed: u64) -> OpStream {
        OpStream {
            spec: spec.clone(),
            zipf: Zipfian::new(spec.record_count, spec.theta, seed ^ KEYS_STREAM),
            rng: ChaCha8Rng::seed_from_u64(seed ^ KINDS_STREAM),
        }
    }

    pub fn next_op(&mut self) -> Op {
        let key = self.spec.key(self.zipf.next_key_id());
        if self.rng.gen::<f64>() < self.spec.read_fraction {
            Op { kind: OpKind::Read, line: format!("get {key}") }
        } else {
            let value = random_value(&mut self.rng, self.spec.value_len);
            Op { kind: OpKind::Update, line: format!("put {key} {value}") }
        }
    }
}

const KEYS_STREAM: u64 = 0x7a69_95aa_11;
const KINDS_STREAM: u64 = 0x7a69_95aa_22;
const LOAD_STREAM: u64 = 0x7a69_95aa_33;
const ARRIVAL_STREAM: u64 = 0x7a69_95aa_44;

/// Alphanumeric so the value is a single whitespace-free protocol token.
fn random_value(rng: &mut ChaCha8Rng, len: usize) -> String {
    rng.sample_iter(&Alphanumeric).take(len).map(char::from).collect()
}

/// Arrival i of an open-loop run, in ns after the origin: exact integer
/// arithmetic, so the schedule never accumulates drift.
pub fn constant_arrival_ns(rate: u64, i: u64) -> u64 {
    (i as u128 * 1_000_000_000u128 / rate as u128) as u64
}

enum ArrivalSchedule {
    Constant { rate: u64 },
    Poisson { mean_ns: f64, acc: f64, rng: ChaCha8Rng },
}

impl ArrivalSchedule {
    fn new(rate: u64, poisson: bool, seed: u64) -> ArrivalSchedule {
        if poisson {
            ArrivalSchedule::Poisson {
                mean_ns: 1e9 / rate as f64,
                acc: 0.0,
                rng: ChaCha8Rng::seed_from_u64(seed ^ ARRIVAL_STREAM),
            }
        } else {
            ArrivalSchedule::Constant { rate }
        }
    }

    fn nth(&mut self, i: u64) -> u64 {
        match self {
            ArrivalSchedule::Constant { rate } => constant_arrival_ns(*rate, i),
            ArrivalSchedule::Poisson { mean_ns, acc, rng } => {
                let u: f64 = rng.gen();
                *acc += -(1.0 - u).ln() * *mean_ns;
                *acc as u64
            }
        }
    }
}

fn now_ns(t0: Instant) -> u64 {
    t0.elapsed().as_nanos() as u64
}

/// Sleep until `at` ns past t0; coarse sleep first, then a short spin so the
/// dispatch edge lands within microseconds of the schedule.
fn sleep_until(t0: Instant, at: u64) {
    loop {
        let now = now_ns(t0);
        if now >= at {
            return;
        }
        let remaining = at - now;
        if remaining > 2_000_000 {
            std::thread::sleep(Duration::from_nanos(remaining - 1_000_000));
        } else {
            std::hint::spin_loop();
        }
    }
}

const OP_RETRY_BUDGET: u32 = 8;

struct Arrival {
    scheduled: u64,
    kind: OpKind,
    line: String,
}

/// Issues ops on the configured schedule regardless of completions. Ops still
/// queued when the run ends (plus a bounded drain) are discarded unsampled;
/// every completed op keeps its planned start time.
pub fn run_open_loop(config: &RunConfig, spec: &WorkloadSpec) -> Vec<LatencySample> {
    config.validate().expect("invalid run config");
    spec.validate().expect("invalid workload");
    let Mode::Open { rate, workers, poisson } = config.mode else {
        panic!("run_open_loop needs an open mode");
    };
    let duration_ns = config.duration.as_nanos() as u64;
    let warmup_ns = config.warmup.as_nanos() as u64;

    let (tx, rx) = crossbeam_channel::unbounded::<Arrival>();
    let samples: Arc<Mutex<Vec<LatencySample>>> = Arc::new(Mutex::new(Vec::new()));
    let stop = Arc::new(AtomicBool::new(false));
    let t0 = Instant::now();

    let mut pool = Vec::new();
    for _ in 0..workers {
        let rx = rx.clone();
        let samples = samples.clone();
        let stop = stop.clone();
        let cluster = config.cluster.clone();
        pool.push(std::thread::spawn(move || {
            let mut kv = KvClient::new(cluster);
            while let Ok(arrival) = rx.recv() {
                if stop.load(Ordering::SeqCst) {
                    continue; // drain-discard the backlog at shutdown
                }
                let actual_start = now_ns(t0);
                let (settled, retries) = kv.execute(&arrival.line, OP_RETRY_BUDGET);
                let completion = now_ns(t0);
                let outcome = match settled {
                    Settled::Ok(_) | Settled::NotFound => Outcome::Ok { retries },
                    Settled::Failed => Outcome::Error,
                };
                samples.lock().unwrap().push(LatencySample {
                    kind: arrival.kind,
                    scheduled_start: arrival.scheduled,
                    actual_start,
                    completion,
                    outcome,
                    warmup: arrival.scheduled < warmup_ns,
                });
            }
        }));
    }

    let mut ops = OpStream::new(spec, config.seed);
    let mut schedule = ArrivalSchedule::new(rate, poisson, config.seed);
    for i in 0.. {
        let at = schedule.nth(i);
        if at >= duration_ns {
            break;
        }
        sleep_until(t0, at);
        let op = ops.next_op();
        tx.send(Arrival { scheduled: at, kind: op.kind, line: op.line }).unwrap();
    }
    drop(tx);

    // Give in-flight and briefly queued ops a chance to land, then cut the
    // rest loose: an over-capacity run would otherwise drain for minutes.
    let drain_deadline = Instant::now() + Duration::from_secs(1);
    while !rx.is_empty() && Instant::now() < drain_deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    stop.store(true, Ordering::SeqCst);
    drop(rx);
    for worker in pool {
        worker.join().unwrap();
    }

    let mut samples = Arc::try_unwrap(samples).unwrap().into_inner().unwrap();
    samples.sort_by_key(|s| s.scheduled_start);
    samples
}

/// Fixed worker count, each issuing its next op on completion of the last;
/// scheduled_start is defined as actual_start because a closed loop has no
/// schedule independent of the server.
pub fn run_closed_loop(config: &RunConfig, spec: &WorkloadSpec) -> Vec<LatencySample> {
    config.validate().expect("invalid run config");
    spec.validate().expect("invalid workload");
    let Mode::Closed { threads } = config.mode else {
        panic!("run_closed_loop needs a closed mode");
    };
    let duration_ns = config.duration.as_nanos() as u64;
    let warmup_ns = config.warmup.as_nanos() as u64;
    let t0 = Instant::now();

    let mut pool = Vec::new();
    for t in 0..threads {
        let cluster = config.cluster.clone();
        let spec = spec.clone();
        let seed = config.seed.wrapping_add(t as u64);
        pool.push(std::thread::spawn(move || {
            let mut kv = KvClient::new(cluster);
            let mut ops = OpStream::new(&spec, seed);
            let mut samples = Vec::new();
            loop {
                let actual_start = now_ns(t0);
                if actual_start >= duration_ns {
                    return samples;
                }
                let op = ops.next_op();
                let (settled, retries) = kv.execute(&op.line, OP_RETRY_BUDGET);
                let completion = now_ns(t0);
                let outcome = match settled {
                    Settled::Ok(_) | Settled::NotFound => Outcome::Ok { retries },
                    Settled::Failed => Outcome::Error,
                };
                samples.push(LatencySample {
                    kind: op.kind,
                    scheduled_start: actual_start,
                    actual_start,
                    completion,
                    outcome,
                    warmup: actual_start < warmup_ns,
                });
            }
        }));
    }
    let mut samples: Vec<LatencySample> =
        pool.into_iter().flat_map(|h| h.join().unwrap()).collect();
    samples.sort_by_key(|s| s.scheduled_start);
    samples
}

/// Writes every record (zero-padded key, seed-derived value) and fails loud
/// if any record cannot be confirmed.
pub fn load_phase(cluster: &[String], spec: &WorkloadSpec, seed: u64) -> Result<(), LoadgenError> {
    spec.validate().expect("invalid workload");
    if spec.record_count == 0 {
        return Ok(());
    }
    let mut kv = KvClient::new(cluster.to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ LOAD_STREAM);
    for id in 0..spec.record_count {
        let key = spec.key(id);
        let value = random_value(&mut rng, spec.value_len);
        let (settled, retries) = kv.execute(&format!("put {key} {value}"), 16);
        if !matches!(settled, Settled::Ok(_)) {
            return Err(LoadgenError::LoadFailed { key, retries });
        }
    }
    Ok(())
}

/// Nearest-rank percentile over successful post-warmup samples via the
/// log-scaled histogram.
pub fn percentile(
    samples: &[LatencySample],
    p: f64,
    kind: LatencyKind,
) -> Result<u64, LoadgenError> {
    let mut hist = LatencyHistogram::new();
    for s in samples.iter().filter(|s| !s.warmup && s.is_ok()) {
        hist.record(match kind {
            LatencyKind::Intended => s.intended(),
            LatencyKind::Service => s.service(),
        });
    }
    hist.percentile(p).ok_or(LoadgenError::EmptySample)
}

#[derive(Clone, Copy, Debug)]
pub struct SearchConfig {
    /// Lowest rate worth probing; missing the target here is ZeroCapacity.
    pub floor: u64,
    /// Stop once the good/bad bracket is this tight.
    pub resolution: u64,
    pub trial: Duration,
    pub trial_warmup: Duration,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> SearchConfig {
        SearchConfig {
            floor: 50,
            resolution: 25,
            trial: Duration::from_secs(3),
            trial_warmup: Duration::from_millis(500),
            seed: 1,
        }
    }
}

/// Highest open-loop rate whose intended p99 stays within `target_p99`:
/// doubles from the floor until a probe misses, then bisects the bracket to
/// the configured resolution.
pub fn find_max_throughput(
    cluster: &[String],
    spec: &WorkloadSpec,
    target_p99: Duration,
    search: &SearchConfig,
) -> Result<u64, LoadgenError> {
    assert!(search.floor > 0 && search.resolution > 0);
    let target_ns = target_p99.as_nanos() as u64;
    let mut probe_count = 0u64;
    let mut probe = |rate: u64| -> bool {
        probe_count += 1;
        let config = RunConfig {
            mode: Mode::open(rate),
            duration: search.trial,
            warmup: search.trial_warmup,
            cluster: cluster.to_vec(),
            seed: search.seed.wrapping_add(probe_count),
        };
        let samples = run_open_loop(&config, spec);
        match percentile(&samples, 0.99, LatencyKind::Intended) {
            Ok(p99) => p99 <= target_ns,
            Err(_) => false, // nothing completed: treat as a miss
        }
    };

    if !probe(search.floor) {
        return Err(LoadgenError::ZeroCapacity { rate: search.floor });
    }
    let mut good = search.floor;
    let mut bad = loop {
        let candidate = good * 2;
        if probe(candidate) {
            good = candidate;
        } else {
            break candidate;
        }
        if good > 10_000_000 {
            return Ok(good); // beyond any capacity this tool can drive
        }
    };
    while bad - good > search.resolution {
        let mid = good + (bad - good) / 2;
        if probe(mid) {
            good = mid;
        } else {
            bad = mid;
        }
    }
    Ok(good)
}

/// Percentile table plus counts for one latency definition.
#[derive(Clone, Copy, Debug)]
pub struct PercentileTable {
    pub p50: u64,
    pub p90: u64,
    pub p95: u64,
    pub p99: u64,
    pub p999: u64,
}

fn table(hist: &LatencyHistogram) -> Option<PercentileTable> {
    Some(PercentileTable {
        p50: hist.percentile(0.50)?,
        p90: hist.percentile(0.90)?,
        p95: hist.percentile(0.95)?,
        p99: hist.percentile(0.99)?,
        p999: hist.percentile(0.999)?,
    })
}

#[derive(Clone, Debug)]
pub struct Report {
    pub measured: usize,
    pub ok: usize,
    pub errors: usize,
    pub retries: u64,
    pub throughput: f64,
    pub intended: Option<PercentileTable>,
    pub service: Option<PercentileTable>,
    pub warning: Option<String>,
}

/// Summarizes the post-warmup window. An empty window produces an empty
/// report carrying a warning instead of an error: a run that was all warmup
/// is a configuration smell, not a crash.
pub fn report(samples: &[LatencySample]) -> Report {
    let measured: Vec<&LatencySample> = samples.iter().filter(|s| !s.warmup).collect();
    let ok: Vec<&&LatencySample> = measured.iter().filter(|s| s.is_ok()).collect();
    let mut intended = LatencyHistogram::new();
    let mut service = LatencyHistogram::new();
    let mut retries = 0u64;
    for s in &ok {
        intended.record(s.intended());
        service.record(s.service());
        if let Outcome::Ok { retries: r } = s.outcome {
            retries += r as u64;
        }
    }
    let throughput = match (ok.first(), ok.last()) {
        (Some(first), Some(last)) if last.completion > first.scheduled_start => {
            ok.len() as f64 / ((last.completion - first.scheduled_start) as f64 / 1e9)
        }
        _ => 0.0,
    };
    Report {
        measured: measured.len(),
        ok: ok.len(),
        errors: measured.len() - ok.len(),
        retries,
        throughput,
        intended: table(&intended),
        service: table(&service),
        warning: if measured.is_empty() {
            Some("no samples outside the warmup window".into())
        } else {
            None
        },
    }
}

impl std::fmt::Display for Report {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let Some(w) = &self.warning {
            writeln!(f, "warning: {w}")?;
        }
        writeln!(
            f,
            "ops {} ok {} errors {} retries {} throughput {:.1} ops/s",
            self.measured, self.ok, self.errors, self.retries, self.throughput
        )?;
        let ms = |v: u64| v as f64 / 1e6;
        if let Some(t) = self.intended {
            writeln!(
                f,
                "intended ms  p50 {:.3}  p90 {:.3}  p95 {:.3}  p99 {:.3}  p99.9 {:.3}",
                ms(t.p50),
                ms(t.p90),
                ms(t.p95),
                ms(t.p99),
                ms(t.p999)
            )?;
        }
        if let Some(t) = self.service {
            writeln!(
                f,
                "service  ms  p50 {:.3}  p90 {:.3}  p95 {:.3}  p99 {:.3}  p99.9 {:.3}",
                ms(t.p50),
                ms(t.p90),
                ms(t.p95),
                ms(t.p99),
                ms(t.p999)
            )?;
        }
        Ok(())
    }
}

/// Full latency CDFs as CSV rows `kind,latency_ns,cumulative_fraction`,
/// one block per latency definition, fractions ending at 1.0.
pub fn write_cdf_csv<W: io::Write>(samples: &[LatencySample], out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kind", "latency_ns", "cumulative_fraction"])?;
    for (name, kind) in [("intended", LatencyKind::Intended), ("service", LatencyKind::Service)] {
        let mut hist = LatencyHistogram::new();
        for s in samples.iter().filter(|s| !s.warmup && s.is_ok()) {
            hist.record(match kind {
                LatencyKind::Intended => s.intended(),
                LatencyKind::Service => s.service(),
            });
        }
        for (latency, fraction) in hist.cdf() {
            w.write_record([name, &latency.to_string(), &fraction.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
