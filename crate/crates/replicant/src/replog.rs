//! The replicated log: a thread-safe, unbounded producer-consumer structure
//! holding consensus instances, tracking the committed/executed frontiers, and
//! supporting prefix trimming. Many producers (accept paths, peer message
//! handlers) and exactly one consumer (the executor) share it.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Notify;

use crate::kvstore::{Command, CommandResult, MemKvStore};

pub type PeerId = u8;

/// Leadership token: `raw = round * 256 + peer_id`, totally ordered by raw
/// value. Raw 0 is reserved for "no leader yet" (real ballots start at round
/// 1), so the leader is extractable from any nonzero ballot.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ballot(u64);

impl Ballot {
    pub const NONE: Ballot = Ballot(0);

    pub fn new(round: u64, peer: PeerId) -> Ballot {
        Ballot(round * 256 + peer as u64)
    }

    pub fn from_raw(raw: u64) -> Ballot {
        Ballot(raw)
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn round(self) -> u64 {
        self.0 / 256
    }

    pub fn leader(self) -> Option<PeerId> {
        if self.0 == 0 {
            None
        } else {
            Some((self.0 % 256) as PeerId)
        }
    }
}

impl fmt::Debug for Ballot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == 0 {
            write!(f, "Ballot(none)")
        } else {
            write!(f, "Ballot({} r{} p{})", self.0, self.round(), self.0 % 256)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceState {
    InProgress,
    Committed,
    Executed,
}

/// One slot of the replicated log. `index` is immutable; once the state
/// reaches Committed, `ballot`, `command` and `client_id` are frozen too.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub ballot: Ballot,
    pub index: u64,
    pub client_id: u64,
    pub command: Command,
    pub state: InstanceState,
}

impl Instance {
    pub fn inprogress(ballot: Ballot, index: u64, client_id: u64, command: Command) -> Instance {
        Instance { ballot, index, client_id, command, state: InstanceState::InProgress }
    }

    pub fn is_committed(&self) -> bool {
        matches!(self.state, InstanceState::Committed | InstanceState::Executed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogFrontiers {
    pub last_index: u64,
    pub last_executed: u64,
    pub global_last_executed: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogError {
    #[error("safety violation: committed instance at index {index} contradicted")]
    SafetyViolation { index: u64 },
    #[error("no instance at index {0}")]
    MissingInstance(u64),
    #[error("trim to {requested} beyond executed frontier {last_executed}")]
    TrimBeyondExecuted { requested: u64, last_executed: u64 },
}

#[derive(Debug, PartialEq, Eq)]
pub enum ExecuteOutcome {
    Executed { client_id: u64, index: u64, result: CommandResult },
    Stopped,
}

#[derive(Default)]
struct Inner {
    // Sparse index->instance map: trimming removes prefixes and followers can
    // hold gaps, so a dense array does not fit.
    entries: BTreeMap<u64, Instance>,
    last_index: u64,
    last_executed: u64,
    global_last_executed: u64,
    stopped: bool,
}

#[derive(Default)]
pub struct Log {
    inner: Mutex<Inner>,
    // Wakes the single executor. notify_one stores a permit, so a commit that
    // lands between the executor's condition check and its await is never
    // lost; the executor re-checks the condition on every wake.
    work: Notify,
}

impl Log {
    pub fn new() -> Log {
        Log::default()
    }

    /// Reserve the next index for a leader-side append. Successive calls
    /// return consecutive indexes; indexes observed via the receive path
    /// count as reserved (next call returns max(seen)+1).
    pub fn advance_index(&self) -> u64 {
        let mut g = self.inner.lock().unwrap();
        g.last_index += 1;
        g.last_index
    }

    /// Bump last_index so future advance_index calls start above `index`.
    /// Used by a fresh leader to place new commands after the merged log.
    pub fn reserve_up_to(&self, index: u64) {
        let mut g = self.inner.lock().unwrap();
        g.last_index = g.last_index.max(index);
    }

    /// Leader-side append: reserves the next index and stores the instance
    /// under one lock, so nothing can interleave between reservation and
    /// insertion — the chosen slot is always fresh. Returns the index.
    pub fn append_as_leader(&self, ballot: Ballot, client_id: u64, command: Command) -> u64 {
        let mut g = self.inner.lock().unwrap();
        g.last_index += 1;
        let index = g.last_index;
        g.entries.insert(index, Instance::inprogress(ballot, index, client_id, command));
        drop(g);
        self.work.notify_one();
        index
    }

    pub fn append(&self, inst: Instance) -> Result<(), LogError> {
        assert!(inst.index >= 1, "instance index must be positive");
        debug_assert_eq!(inst.state, InstanceState::InProgress);
        let index = inst.index;
        let mut g = self.inner.lock().unwrap();
        if index <= g.global_last_executed {
            // Already trimmed: this instance was executed everywhere.
            return Ok(());
        }
        match g.entries.get_mut(&index) {
            None => {
                g.entries.insert(index, inst);
            }
            Some(existing) if existing.is_committed() => {
                // Committed entries are frozen; a contradicting redelivery is
                // a protocol bug, not a recoverable condition.
                if existing.command != inst.command || existing.client_id != inst.client_id {
                    return Err(LogError::SafetyViolation { index });
                }
            }
            Some(existing) => {
                if inst.ballot > existing.ballot {
                    *existing = inst;
                }
                // Equal ballot: idempotent redelivery, keep. Lower: ignore.
            }
        }
        g.last_index = g.last_index.max(index);
        drop(g);
        self.work.notify_one();
        Ok(())
    }

    pub fn commit(&self, index: u64) -> Result<(), LogError> {
        let mut g = self.inner.lock().unwrap();
        if index <= g.global_last_executed {
            return Ok(()); // trimmed, therefore long since executed
        }
        let e = g
            .entries
            .get_mut(&index)
            .ok_or(LogError::MissingInstance(index))?;
        if e.state == InstanceState::InProgress {
            e.state = InstanceState::Committed;
        }
        drop(g);
        self.work.notify_one();
        Ok(())
    }

    /// Follower-side commit: everything at or below the leader's executed
    /// frontier is known committed, but only instances accepted under the
    /// message's own ballot. An instance left over from an older ballot may be
    /// a value the current leader never chose (a preempted leader's orphan),
    /// so it stays in progress until an election replay re-proposes the index.
    /// Absent indexes are skipped — gaps, like stale instances, stall
    /// execution until a replay fills them.
    pub fn commit_until(&self, leader_last_executed: u64, ballot: Ballot) {
        let mut g = self.inner.lock().unwrap();
        let start = g.last_executed + 1;
        for index in start..=leader_last_executed {
            if let Some(e) = g.entries.get_mut(&index) {
                if e.ballot == ballot && e.state == InstanceState::InProgress {
                    e.state = InstanceState::Committed;
                }
            }
        }
        drop(g);
        self.work.notify_one();
    }

    /// Block until the next instance (last_executed + 1) is committed, apply
    /// it to the store, mark it executed. Exactly one caller may consume.
    pub async fn execute_next(&self, store: &mut MemKvStore) -> ExecuteOutcome {
        loop {
            {
                let mut g = self.inner.lock().unwrap();
                if g.stopped {
                    return ExecuteOutcome::Stopped;
                }
                let next = g.last_executed + 1;
                if let Some(e) = g.entries.get_mut(&next) {
                    if e.state == InstanceState::Committed {
                        let result = store.execute(&e.command);
                        let client_id = e.client_id;
                        e.state = InstanceState::Executed;
                        g.last_executed = next;
                        return ExecuteOutcome::Executed { client_id, index: next, result };
                    }
                }
            }
            self.work.notified().await;
        }
    }

    /// Drop every instance at or below `gle` (executed by all peers).
    pub fn trim_until(&self, gle: u64) -> Result<(), LogError> {
        let mut g = self.inner.lock().unwrap();
        if gle > g.last_executed {
            return Err(LogError::TrimBeyondExecuted {
                requested: gle,
                last_executed: g.last_executed,
            });
        }
        if gle > g.global_last_executed {
            g.entries = g.entries.split_off(&(gle + 1));
            g.global_last_executed = gle;
        }
        Ok(())
    }

    /// All retained instances, ascending by index; a consistent point-in-time
    /// view (the full-log prepare response).
    pub fn instances_snapshot(&self) -> Vec<Instance> {
        let g = self.inner.lock().unwrap();
        g.entries.values().cloned().collect()
    }

    pub fn at(&self, index: u64) -> Option<Instance> {
        let g = self.inner.lock().unwrap();
        g.entries.get(&index).cloned()
    }

    pub fn frontiers(&self) -> LogFrontiers {
        let g = self.inner.lock().unwrap();
        LogFrontiers {
            last_index: g.last_index,
            last_executed: g.last_executed,
            global_last_executed: g.global_last_executed,
        }
    }

    pub fn last_executed(&self) -> u64 {
        self.inner.lock().unwrap().last_executed
    }

    pub fn global_last_executed(&self) -> u64 {
        self.inner.lock().unwrap().global_last_executed
    }

    pub fn shutdown(&self) {
        self.inner.lock().unwrap().stopped = true;
        self.work.notify_one();
    }

    pub fn is_stopped(&self) -> bool {
        self.inner.lock().unwrap().stopped
    }
}
