//! Exhaustive linearizability checker over recorded histories, against the
//! sequential semantics of the in-memory store: a history passes if some
//! total order of its operations (a) respects real time — an operation may
//! only be ordered before another if it was invoked before that other
//! completed — and (b) replays through a single map producing exactly the
//! results each operation observed.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, HashSet};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::kvstore::{Command, CommandResult};

use super::HistoryEvent;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    /// A valid total order was found; `witness` lists op ids in that order
    /// (pending operations appear only if the order needed their effect).
    Linearizable { witness: Vec<u64> },
    /// No valid order exists. `conflict` describes the deepest frontier the
    /// search reached and why each eligible next operation was rejected.
    NotLinearizable { conflict: String },
    BudgetExceeded { reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckerBudget {
    pub max_ops: usize,
    pub max_concurrency: usize,
    pub max_nodes: u64,
}

impl Default for CheckerBudget {
    fn default() -> Self {
        CheckerBudget { max_ops: 200, max_concurrency: 8, max_nodes: 2_000_000 }
    }
}

struct Op {
    id: u64,
    invoked: u64,
    /// u64::MAX for pending operations: they constrain nobody.
    completed: u64,
    command: Command,
    result: Option<CommandResult>,
    /// Completed ops must appear in the witness; pending ones may.
    mandatory: bool,
}

pub fn check_linearizable(history: &[HistoryEvent], budget: CheckerBudget) -> Verdict {
    let mut ops: Vec<Op> = Vec::new();
    for ev in history {
        match ev.completed_ns {
            Some(c) => ops.push(Op {
                id: ev.op_id,
                invoked: ev.invoked_ns,
                completed: c,
                command: ev.command.clone(),
                result: ev.result.clone(),
                mandatory: true,
            }),
            // A pending write may have taken effect, so the search may place
            // it; a pending read constrains nothing and proves nothing.
            None if !matches!(ev.command, Command::Get { .. }) => ops.push(Op {
                id: ev.op_id,
                invoked: ev.invoked_ns,
                completed: u64::MAX,
                command: ev.command.clone(),
                result: None,
                mandatory: false,
            }),
            None => {}
        }
    }

    if ops.len() > budget.max_ops {
        return Verdict::BudgetExceeded {
            reason: format!("{} ops exceed the {}-op budget", ops.len(), budget.max_ops),
        };
    }
    let concurrency = peak_concurrency(&ops);
    if concurrency > budget.max_concurrency {
        return Verdict::BudgetExceeded {
            reason: format!(
                "peak concurrency {concurrency} exceeds the {}-op budget",
                budget.max_concurrency
            ),
        };
    }

    let mut search = Search {
        ops: &ops,
        state: BTreeMap::new(),
        linearized: vec![false; ops.len()],
        order: Vec::new(),
        seen: HashSet::new(),
        nodes: 0,
        max_nodes: budget.max_nodes,
        deepest: 0,
        deepest_conflict: String::new(),
    };
    match search.dfs() {
        SearchOutcome::Found => Verdict::Linearizable {
            witness: search.order.iter().map(|&i| ops[i].id).collect(),
        },
        SearchOutcome::Exhausted => Verdict::NotLinearizable {
            conflict: if search.deepest_conflict.is_empty() {
                "empty candidate set at the start".into()
            } else {
                search.deepest_conflict
            },
        },
        SearchOutcome::OutOfNodes => Verdict::BudgetExceeded {
            reason: format!("search exceeded {} states", budget.max_nodes),
        },
    }
}

fn peak_concurrency(ops: &[Op]) -> usize {
    // Sweep invocation/completion edges over completed ops. Pending ops are
    // excluded: their intervals never close, so one lossy client would push
    // any long history over the budget even though the search only touches a
    // pending op when it is needed to explain a read. Runaway search cost is
    // bounded by max_nodes regardless.
    let mut edges: Vec<(u64, i64)> = Vec::new();
    for op in ops {
        if op.completed == u64::MAX {
            continue;
        }
        edges.push((op.invoked, 1));
        edges.push((op.completed, -1));
    }
    // Completions sort before invocations at equal times (invoked < completed
    // holds per op, so ties across ops close first).
    edges.sort_by_key(|&(t, d)| (t, d));
    let mut cur = 0i64;
    let mut peak = 0i64;
    for (_, d) in edges {
        cur += d;
        peak = peak.max(cur);
    }
    peak as usize
}

enum SearchOutcome {
    Found,
    Exhausted,
    OutOfNodes,
}

struct Search<'a> {
    ops: &'a [Op],
    state: BTreeMap<Vec<u8>, Vec<u8>>,
    linearized: Vec<bool>,
    order: Vec<usize>,
    /// Visited (linearized-set, state) pairs; re-entering one cannot reach a
    /// new outcome, which is what makes 200-op histories tractable.
    seen: HashSet<(Vec<u64>, u64)>,
    nodes: u64,
    max_nodes: u64,
    deepest: usize,
    deepest_conflict: String,
}

enum Undo {
    None,
    Insert(Vec<u8>),
    Overwrite(Vec<u8>, Vec<u8>),
    Remove(Vec<u8>, Vec<u8>),
}

impl<'a> Search<'a> {
    fn dfs(&mut self) -> SearchOutcome {
        if self.ops.iter().enumerate().all(|(i, op)| !op.mandatory || self.linearized[i]) {
            return SearchOutcome::Found;
        }
        self.nodes += 1;
        if self.nodes > self.max_nodes {
            return SearchOutcome::OutOfNodes;
        }

        // An op may go next only if every other unlinearized op's interval
        // reaches it: nothing still open completed strictly before it began.
        let min_completion = self
            .ops
            .iter()
            .enumerate()
            .filter(|&(i, _)| !self.linearized[i])
            .map(|(_, op)| op.completed)
            .min()
            .unwrap_or(u64::MAX);

        let mut conflicts: Vec<String> = Vec::new();
        for i in 0..self.ops.len() {
            if self.linearized[i] || self.ops[i].invoked > min_completion {
                continue;
            }
            let op = &self.ops[i];
            let (produced, undo) = self.apply(&op.command);
            let consistent = match &op.result {
                Some(expected) => produced == *expected,
                None => true,
            };
            if !consistent {
                self.revert(undo);
                if self.order.len() >= self.deepest {
                    conflicts.push(format!(
                        "op {} {} expected {:?} but the state here yields {:?}",
                        op.id,
                        op.command.kind(),
                        op.result,
                        produced
                    ));
                }
                continue;
            }
            self.linearized[i] = true;
            self.order.push(i);
            let key = (self.mask(), self.state_digest());
            let explored = !self.seen.insert(key);
            if !explored {
                match self.dfs() {
                    SearchOutcome::Found => return SearchOutcome::Found,
                    SearchOutcome::OutOfNodes => return SearchOutcome::OutOfNodes,
                    SearchOutcome::Exhausted => {}
                }
            }
            self.order.pop();
            self.linearized[i] = false;
            self.revert(undo);
        }

        if self.order.len() >= self.deepest && !conflicts.is_empty() {
            self.deepest = self.order.len();
            self.deepest_conflict = format!(
                "after {} linearized ops: {}",
                self.order.len(),
                conflicts.join("; ")
            );
        }
        SearchOutcome::Exhausted
    }

    /// Same semantics as MemKvStore::execute, with undo information.
    fn apply(&mut self, command: &Command) -> (CommandResult, Undo) {
        match command {
            Command::Get { key } => {
                let r = match self.state.get(key) {
                    Some(v) => CommandResult::ok_value(v.clone()),
                    None => CommandResult::not_found(),
                };
                (r, Undo::None)
            }
            Command::Put { key, value } => match self.state.entry(key.clone()) {
                Entry::Occupied(mut e) => {
                    let old = e.insert(value.clone());
                    (CommandResult::ok(), Undo::Overwrite(key.clone(), old))
                }
                Entry::Vacant(e) => {
                    e.insert(value.clone());
                    (CommandResult::ok(), Undo::Insert(key.clone()))
                }
            },
            Command::Del { key } => match self.state.remove(key) {
                Some(old) => (CommandResult::ok(), Undo::Remove(key.clone(), old)),
                None => (CommandResult::not_found(), Undo::None),
            },
        }
    }

    fn revert(&mut self, undo: Undo) {
        match undo {
            Undo::None => {}
            Undo::Insert(k) => {
                self.state.remove(&k);
            }
            Undo::Overwrite(k, v) | Undo::Remove(k, v) => {
                self.state.insert(k, v);
            }
        }
    }

    fn mask(&self) -> Vec<u64> {
        let mut words = vec![0u64; self.linearized.len().div_ceil(64)];
        for (i, &m) in self.linearized.iter().enumerate() {
            if m {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        words
    }

    fn state_digest(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (k, v) in &self.state {
            k.hash(&mut h);
            v.hash(&mut h);
        }
        h.finish()
    }
}
