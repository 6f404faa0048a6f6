//! Peer-to-peer wire format: one JSON object per message, newline-framed.
//! Every request carries a `tag` the responder echoes back, so a single
//! connection can multiplex any number of in-flight RPCs.

use serde::{Deserialize, Serialize};

use crate::kvstore::Command;
use crate::replog::{Ballot, Instance, PeerId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PeerMessage {
    Prepare {
        tag: u64,
        from: PeerId,
        ballot: Ballot,
    },
    PrepareResp {
        tag: u64,
        from: PeerId,
        status: Status,
        ballot: Ballot,
        instances: Vec<Instance>,
    },
    Accept {
        tag: u64,
        from: PeerId,
        ballot: Ballot,
        index: u64,
        client_id: u64,
        command: Command,
    },
    AcceptResp {
        tag: u64,
        from: PeerId,
        status: Status,
        ballot: Ballot,
    },
    Commit {
        tag: u64,
        from: PeerId,
        ballot: Ballot,
        last_executed: u64,
        global_last_executed: u64,
    },
    CommitResp {
        tag: u64,
        from: PeerId,
        status: Status,
        ballot: Ballot,
        last_executed: u64,
    },
}

impl PeerMessage {
    pub fn tag(&self) -> u64 {
        match self {
            PeerMessage::Prepare { tag, .. }
            | PeerMessage::PrepareResp { tag, .. }
            | PeerMessage::Accept { tag, .. }
            | PeerMessage::AcceptResp { tag, .. }
            | PeerMessage::Commit { tag, .. }
            | PeerMessage::CommitResp { tag, .. } => *tag,
        }
    }

    pub fn set_tag(&mut self, new_tag: u64) {
        match self {
            PeerMessage::Prepare { tag, .. }
            | PeerMessage::PrepareResp { tag, .. }
            | PeerMessage::Accept { tag, .. }
            | PeerMessage::AcceptResp { tag, .. }
            | PeerMessage::Commit { tag, .. }
            | PeerMessage::CommitResp { tag, .. } => *tag = new_tag,
        }
    }

    pub fn from_peer(&self) -> PeerId {
        match self {
            PeerMessage::Prepare { from, .. }
            | PeerMessage::PrepareResp { from, .. }
            | PeerMessage::Accept { from, .. }
            | PeerMessage::AcceptResp { from, .. }
            | PeerMessage::Commit { from, .. }
            | PeerMessage::CommitResp { from, .. } => *from,
        }
    }

    /// True for the three request kinds a server expects to receive.
    pub fn is_request(&self) -> bool {
        matches!(
            self,
            PeerMessage::Prepare { .. } | PeerMessage::Accept { .. } | PeerMessage::Commit { .. }
        )
    }
}

/// Serializes a message as a single line, newline terminator included.
pub fn encode_line(msg: &PeerMessage) -> String {
    let mut s = serde_json::to_string(msg).expect("peer message serializes");
    debug_assert!(!s.contains('\n'), "encoded message must stay on one line");
    s.push('\n');
    s
}

pub fn decode_line(line: &[u8]) -> Result<PeerMessage, serde_json::Error> {
    serde_json::from_slice(line)
}

/// Incremental newline-delimited decoder. Feed it raw reads in any chunking;
/// it yields every complete message and buffers the trailing partial line.
/// A malformed line is an error — the caller is expected to drop the
/// connection rather than resynchronize.
#[derive(Default)]
pub struct LineDecoder {
    buf: Vec<u8>,
}

impl LineDecoder {
    pub fn new() -> Self {
        LineDecoder::default()
    }

    pub fn feed(&mut self, chunk: &[u8]) -> Result<Vec<PeerMessage>, serde_json::Error> {
        self.buf.extend_from_slice(chunk);
        let mut out = Vec::new();
        let mut consumed = 0;
        while let Some(rel) = self.buf[consumed..].iter().position(|&b| b == b'\n') {
            let end = consumed + rel;
            let parsed = decode_line(&self.buf[consumed..end]);
            consumed = end + 1;
            match parsed {
                Ok(msg) => out.push(msg),
                Err(e) => {
                    self.buf.drain(..consumed);
                    return Err(e);
                }
            }
        }
        self.buf.drain(..consumed);
        Ok(out)
    }

    /// Bytes held for an incomplete line.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }
}
