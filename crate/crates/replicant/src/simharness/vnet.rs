//! Virtual time and a fault-injectable in-memory network. One shared core
//! owns a merged (time, sequence) event queue covering timers, message
//! deliveries, and rpc resolutions; nothing here reads the wall clock, so a
//! run's behavior is a pure function of its parameters.

use std::cmp::Ordering as CmpOrdering;
use std::collections::{BTreeMap, BinaryHeap};
use std::future::Future;
use std::pin::Pin;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Waker};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{BoxFuture, Clock};
use crate::replog::PeerId;
use crate::transport::wire::PeerMessage;
use crate::transport::{PeerHandler, RpcOutcome, Transport};

/// Virtual nanoseconds since the start of the run.
pub type SimTime = u64;

/// One-shot completion slot shared between the event queue and a waiting
/// future. The first completion wins; later ones are silently ignored, which
/// is how an rpc deadline and a response race each other.
pub struct Cell<T> {
    slot: Mutex<CellState<T>>,
}

struct CellState<T> {
    value: Option<T>,
    done: bool,
    waker: Option<Waker>,
}

impl<T> Default for Cell<T> {
    fn default() -> Self {
        Cell { slot: Mutex::new(CellState { value: None, done: false, waker: None }) }
    }
}

impl<T> Cell<T> {
    pub fn complete(&self, value: T) {
        let mut g = self.slot.lock().unwrap();
        if g.done {
            return;
        }
        g.done = true;
        g.value = Some(value);
        if let Some(w) = g.waker.take() {
            drop(g);
            w.wake();
        }
    }
}

pub struct CellFuture<T>(pub Arc<Cell<T>>);

impl<T> Future for CellFuture<T> {
    type Output = T;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<T> {
        let mut g = self.0.slot.lock().unwrap();
        if g.done {
            if let Some(v) = g.value.take() {
                return Poll::Ready(v);
            }
        }
        g.waker = Some(cx.waker().clone());
        Poll::Pending
    }
}

/// What a fault window disables. `CurrentLeader` is resolved by the driver
/// when the window opens, against whoever leads at that instant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutageTarget {
    /// All links touching this peer: the crash/disconnect model (state and
    /// timers keep running; only the network is gone).
    Peer(PeerId),
    /// One link, both directions.
    Link(PeerId, PeerId),
    CurrentLeader,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outage {
    pub start_ms: u64,
    pub duration_ms: u64,
    pub target: OutageTarget,
}

#[derive(Clone, Debug)]
enum ResolvedTarget {
    Peer(PeerId),
    Link(PeerId, PeerId),
}

#[derive(Clone, Debug)]
struct ResolvedOutage {
    start: SimTime,
    end: SimTime,
    target: ResolvedTarget,
}

impl ResolvedOutage {
    fn blocks(&self, now: SimTime, a: PeerId, b: PeerId) -> bool {
        if now < self.start || now >= self.end {
            return false;
        }
        match self.target {
            ResolvedTarget::Peer(p) => a == p || b == p,
            ResolvedTarget::Link(x, y) => (a, b) == (x, y) || (a, b) == (y, x),
        }
    }

    fn isolates(&self, now: SimTime, p: PeerId) -> bool {
        now >= self.start
            && now < self.end
            && matches!(self.target, ResolvedTarget::Peer(q) if q == p)
    }
}

pub enum Event {
    /// Wake one sleeper (also used as a bare scheduling marker).
    Timer(Arc<Cell<()>>),
    /// A request reached the destination: run its handler, then put the
    /// response (if any) on the return path.
    Deliver { src: PeerId, dest: PeerId, msg: PeerMessage, reply: Arc<Cell<RpcOutcome>> },
    /// An rpc future resolves: deadline expiry or response arrival.
    Resolve { cell: Arc<Cell<RpcOutcome>>, outcome: RpcOutcome },
}

struct Scheduled {
    at: SimTime,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Reversed so the BinaryHeap pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> CmpOrdering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

struct NetCore {
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    rng: ChaCha8Rng,
    drop_prob: f64,
    delay_min: SimTime,
    delay_max: SimTime,
    outages: Vec<ResolvedOutage>,
    handlers: BTreeMap<PeerId, Arc<dyn PeerHandler>>,
    events_scheduled: u64,
}

impl NetCore {
    fn schedule(&mut self, at: SimTime, event: Event) {
        self.seq += 1;
        self.events_scheduled += 1;
        self.queue.push(Scheduled { at: at.max(self.now), seq: self.seq, event });
    }

    fn sample_delay(&mut self) -> SimTime {
        if self.delay_max <= self.delay_min {
            return self.delay_min;
        }
        self.rng.gen_range(self.delay_min..=self.delay_max)
    }

    fn blocked(&self, a: PeerId, b: PeerId) -> bool {
        self.outages.iter().any(|o| o.blocks(self.now, a, b))
    }

    /// One loss decision for one message leg (request or response).
    fn leg_delivered(&mut self, a: PeerId, b: PeerId) -> bool {
        if self.blocked(a, b) {
            return false;
        }
        self.drop_prob <= 0.0 || self.rng.gen::<f64>() >= self.drop_prob
    }
}

pub struct SimNet {
    core: Mutex<NetCore>,
}

impl SimNet {
    pub fn new(seed: u64, drop_prob: f64, delay_ms: (u64, u64)) -> Arc<SimNet> {
        Arc::new(SimNet {
            core: Mutex::new(NetCore {
                now: 0,
                seq: 0,
                queue: BinaryHeap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                drop_prob,
                delay_min: delay_ms.0 * 1_000_000,
                delay_max: delay_ms.1 * 1_000_000,
                outages: Vec::new(),
                handlers: BTreeMap::new(),
                events_scheduled: 0,
            }),
        })
    }

    pub fn register(&self, peer: PeerId, handler: Arc<dyn PeerHandler>) {
        self.core.lock().unwrap().handlers.insert(peer, handler);
    }

    pub fn now_ns(&self) -> SimTime {
        self.core.lock().unwrap().now
    }

    pub fn add_outage(&self, start_ms: u64, duration_ms: u64, target: OutageTarget) {
        let target = match target {
            OutageTarget::Peer(p) => ResolvedTarget::Peer(p),
            OutageTarget::Link(a, b) => ResolvedTarget::Link(a, b),
            OutageTarget::CurrentLeader => panic!("resolve CurrentLeader before scheduling"),
        };
        let start = start_ms * 1_000_000;
        self.core.lock().unwrap().outages.push(ResolvedOutage {
            start,
            end: start + duration_ms * 1_000_000,
            target,
        });
    }

    /// Schedules a bare marker event so the driver regains control at `at_ms`
    /// even if nothing else is due then.
    pub fn add_marker(&self, at_ms: u64) {
        let mut core = self.core.lock().unwrap();
        core.schedule(at_ms * 1_000_000, Event::Timer(Arc::new(Cell::default())));
    }

    pub fn isolated(&self, peer: PeerId) -> bool {
        let core = self.core.lock().unwrap();
        core.outages.iter().any(|o| o.isolates(core.now, peer))
    }

    pub fn isolated_count(&self, n_peers: u8) -> usize {
        let core = self.core.lock().unwrap();
        (0..n_peers).filter(|&p| core.outages.iter().any(|o| o.isolates(core.now, p))).count()
    }

    pub fn link_outage_active(&self) -> bool {
        let core = self.core.lock().unwrap();
        core.outages.iter().any(|o| {
            core.now >= o.start && core.now < o.end && matches!(o.target, ResolvedTarget::Link(..))
        })
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.core.lock().unwrap().queue.peek().map(|s| s.at)
    }

    pub fn events_scheduled(&self) -> u64 {
        self.core.lock().unwrap().events_scheduled
    }

    /// Pops the earliest event and advances virtual time to it.
    pub fn pop(&self) -> Option<(SimTime, Event)> {
        let mut core = self.core.lock().unwrap();
        let s = core.queue.pop()?;
        core.now = core.now.max(s.at);
        Some((core.now, s.event))
    }

    /// Second half of a `Deliver` event: the handler already ran (outside the
    /// core lock); send its response back across the lossy return leg.
    pub fn finish_delivery(
        &self,
        src: PeerId,
        dest: PeerId,
        response: Option<PeerMessage>,
        reply: &Arc<Cell<RpcOutcome>>,
    ) {
        let Some(resp) = response else { return };
        let mut core = self.core.lock().unwrap();
        if !core.leg_delivered(dest, src) {
            return;
        }
        let at = core.now + core.sample_delay();
        core.schedule(at, Event::Resolve { cell: reply.clone(), outcome: RpcOutcome::Reply(resp) });
    }

    pub fn handler(&self, peer: PeerId) -> Option<Arc<dyn PeerHandler>> {
        self.core.lock().unwrap().handlers.get(&peer).cloned()
    }

    pub fn link_up(&self, a: PeerId, b: PeerId) -> bool {
        !self.core.lock().unwrap().blocked(a, b)
    }
}

/// Per-peer transport facade over the shared net.
pub struct SimTransport {
    pub src: PeerId,
    pub net: Arc<SimNet>,
}

impl Transport for SimTransport {
    fn rpc(&self, dest: PeerId, msg: PeerMessage, deadline: Duration) -> BoxFuture<RpcOutcome> {
        let cell: Arc<Cell<RpcOutcome>> = Arc::new(Cell::default());
        let mut core = self.net.core.lock().unwrap();
        let now = core.now;
        let expiry = now + deadline.as_nanos() as SimTime;
        core.schedule(
            expiry,
            Event::Resolve { cell: cell.clone(), outcome: RpcOutcome::Timeout },
        );
        if core.leg_delivered(self.src, dest) {
            let at = now + core.sample_delay();
            core.schedule(at, Event::Deliver { src: self.src, dest, msg, reply: cell.clone() });
        }
        drop(core);
        Box::pin(CellFuture(cell))
    }
}

/// Clock backed by the event queue: `now` is the last processed event's
/// timestamp and sleeps are queue entries.
pub struct SimClock {
    pub net: Arc<SimNet>,
}

impl Clock for SimClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.net.now_ns())
    }

    fn sleep(&self, d: Duration) -> BoxFuture<()> {
        let cell: Arc<Cell<()>> = Arc::new(Cell::default());
        let mut core = self.net.core.lock().unwrap();
        let at = core.now + d.as_nanos() as SimTime;
        core.schedule(at, Event::Timer(cell.clone()));
        drop(core);
        Box::pin(CellFuture(cell))
    }
}
