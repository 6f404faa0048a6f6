//! Peer-to-peer messaging. The consensus engine talks to an abstract
//! `Transport`; production uses persistent TCP connections (`tcp` module),
//! the simulator substitutes a virtual network with the same semantics.

pub mod tcp;
pub mod wire;

use std::ops::ControlFlow;
use std::time::Duration;

use crate::clock::BoxFuture;
use crate::replog::PeerId;
use wire::PeerMessage;

/// What became of one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RpcOutcome {
    Reply(PeerMessage),
    /// No response within the deadline; the request may still have been
    /// delivered and processed.
    Timeout,
    /// The connection was down or dropped before a response arrived.
    Disconnected,
}

pub trait Transport: Send + Sync {
    /// Sends one request to `peer`; the returned future resolves with the
    /// matching response, or Timeout after `deadline`. The request must be
    /// dispatched at call time, not at first poll: quorum loops drop the
    /// futures they no longer care about, and an undispatched request would
    /// silently starve the slow peers. The transport assigns the tag.
    fn rpc(&self, peer: PeerId, msg: PeerMessage, deadline: Duration) -> BoxFuture<RpcOutcome>;
}

/// Serving side: turns one inbound request into its response. `None` means
/// the message was not a valid request and the connection should be closed.
pub trait PeerHandler: Send + Sync {
    fn handle(&self, msg: PeerMessage) -> Option<PeerMessage>;
}

/// Fans one request out to `others`, feeding each outcome to `decide` as it
/// lands. `decide` short-circuits the whole broadcast by returning
/// `Break(v)`; if every outcome arrives without a break, returns `None` and
/// the caller inspects whatever state `decide` accumulated. The caller
/// accounts for its own vote before calling this.
pub async fn broadcast<T>(
    transport: &dyn Transport,
    others: &[PeerId],
    build: impl Fn(PeerId) -> PeerMessage,
    deadline: Duration,
    mut decide: impl FnMut(PeerId, RpcOutcome) -> ControlFlow<T>,
) -> Option<T> {
    use futures::stream::{FuturesUnordered, StreamExt};
    use futures::FutureExt;

    // rpc() dispatches at call time, so every peer has its request on the
    // wire before the first outcome is examined — breaking early only stops
    // the waiting, not the sending.
    let mut inflight: FuturesUnordered<_> = others
        .iter()
        .map(|&peer| transport.rpc(peer, build(peer), deadline).map(move |o| (peer, o)))
        .collect();
    while let Some((peer, outcome)) = inflight.next().await {
        if let ControlFlow::Break(v) = decide(peer, outcome) {
            return Some(v);
        }
    }
    None
}
