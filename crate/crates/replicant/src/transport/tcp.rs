//! TCP realization of the transport: one persistent connection per peer
//! pair, established lazily and redialed with bounded backoff. Requests are
//! pipelined; responses are matched back to callers by tag, so a slow RPC
//! never blocks the ones behind it.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};

use super::wire::{encode_line, LineDecoder, PeerMessage};
use super::{PeerHandler, RpcOutcome, Transport};
use crate::clock::BoxFuture;
use crate::replog::PeerId;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(1);
const INITIAL_BACKOFF: Duration = Duration::from_millis(20);
const MAX_BACKOFF: Duration = Duration::from_millis(500);

/// Sets TCP_NODELAY on a socket and remembers whether the kernel read it
/// back as enabled, so tests can assert the option actually took effect on
/// every connection instead of trusting the setter.
#[derive(Default)]
pub struct NodelayCheck {
    established: AtomicU64,
    all_ok: AtomicBool,
}

impl NodelayCheck {
    pub fn new() -> Arc<Self> {
        Arc::new(NodelayCheck { established: AtomicU64::new(0), all_ok: AtomicBool::new(true) })
    }

    pub fn apply(&self, stream: &TcpStream) {
        let ok = stream.set_nodelay(true).is_ok() && stream.nodelay().unwrap_or(false);
        self.established.fetch_add(1, Ordering::Relaxed);
        if !ok {
            self.all_ok.store(false, Ordering::Relaxed);
        }
    }

    /// True once at least one connection was established and every one of
    /// them read NODELAY back as set.
    pub fn confirmed(&self) -> bool {
        self.established.load(Ordering::Relaxed) > 0 && self.all_ok.load(Ordering::Relaxed)
    }

    pub fn connections(&self) -> u64 {
        self.established.load(Ordering::Relaxed)
    }
}

struct Outbound {
    tag: u64,
    line: String,
    reply: oneshot::Sender<RpcOutcome>,
}

pub struct TcpTransport {
    links: HashMap<PeerId, mpsc::UnboundedSender<Outbound>>,
    next_tag: AtomicU64,
    nodelay: Arc<NodelayCheck>,
    tasks: Vec<tokio::task::JoinHandle<()>>,
}

impl TcpTransport {
    /// `peers[i]` is peer i's listen address; the slot for `me` is ignored.
    /// Must be called within a tokio runtime.
    pub fn new(me: PeerId, peers: &[String]) -> Self {
        let nodelay = NodelayCheck::new();
        let mut links = HashMap::new();
        let mut tasks = Vec::new();
        for (i, addr) in peers.iter().enumerate() {
            let peer = i as PeerId;
            if peer == me {
                continue;
            }
            let (tx, rx) = mpsc::unbounded_channel();
            links.insert(peer, tx);
            tasks.push(tokio::spawn(link_task(addr.clone(), rx, nodelay.clone())));
        }
        TcpTransport { links, next_tag: AtomicU64::new(1), nodelay, tasks }
    }

    pub fn nodelay_check(&self) -> Arc<NodelayCheck> {
        self.nodelay.clone()
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

impl Transport for TcpTransport {
    fn rpc(&self, peer: PeerId, mut msg: PeerMessage, deadline: Duration) -> BoxFuture<RpcOutcome> {
        // Hand the request to the link before returning, so it goes out even
        // if the caller never polls (or drops) the returned future.
        let Some(link) = self.links.get(&peer) else {
            return Box::pin(std::future::ready(RpcOutcome::Disconnected));
        };
        let tag = self.next_tag.fetch_add(1, Ordering::Relaxed);
        msg.set_tag(tag);
        let (tx, rx) = oneshot::channel();
        if link.send(Outbound { tag, line: encode_line(&msg), reply: tx }).is_err() {
            return Box::pin(std::future::ready(RpcOutcome::Disconnected));
        }
        Box::pin(async move {
            match tokio::time::timeout(deadline, rx).await {
                Ok(Ok(outcome)) => outcome,
                Ok(Err(_)) => RpcOutcome::Disconnected,
                Err(_) => RpcOutcome::Timeout,
            }
        })
    }
}

/// Owns the connection to one peer: dials (and redials) it, writes queued
/// requests, and routes responses back by tag. Requests queue while a dial
/// is in flight; between failed attempts (during backoff) they fail fast
/// with `Disconnected` instead of piling up against a dead peer.
async fn link_task(
    addr: String,
    mut rx: mpsc::UnboundedReceiver<Outbound>,
    nodelay: Arc<NodelayCheck>,
) {
    let mut backoff = INITIAL_BACKOFF;
    loop {
        let dialed = tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(&addr)).await;
        let stream = match dialed.ok().and_then(|r| r.ok()) {
            Some(s) => {
                backoff = INITIAL_BACKOFF;
                s
            }
            None => {
                // Flush whatever queued during the attempt, then keep failing
                // fast until the next one.
                loop {
                    match rx.try_recv() {
                        Ok(out) => drop(out.reply.send(RpcOutcome::Disconnected)),
                        Err(mpsc::error::TryRecvError::Empty) => break,
                        Err(mpsc::error::TryRecvError::Disconnected) => return,
                    }
                }
                let sleep = tokio::time::sleep(backoff);
                tokio::pin!(sleep);
                loop {
                    tokio::select! {
                        _ = &mut sleep => break,
                        req = rx.recv() => match req {
                            Some(out) => drop(out.reply.send(RpcOutcome::Disconnected)),
                            None => return,
                        },
                    }
                }
                backoff = (backoff * 2).min(MAX_BACKOFF);
                continue;
            }
        };
        nodelay.apply(&stream);

        // Up. Pump requests out and match responses back until the socket
        // breaks; `read` is cancel-safe so the select loses no bytes.
        let (mut r, mut w) = stream.into_split();
        let mut pending: HashMap<u64, oneshot::Sender<RpcOutcome>> = HashMap::new();
        let mut decoder = LineDecoder::new();
        let mut rbuf = vec![0u8; 64 * 1024];
        'up: loop {
            tokio::select! {
                req = rx.recv() => match req {
                    Some(out) => {
                        pending.insert(out.tag, out.reply);
                        if w.write_all(out.line.as_bytes()).await.is_err() {
                            break 'up;
                        }
                    }
                    None => return,
                },
                n = r.read(&mut rbuf) => {
                    let n = match n {
                        Ok(0) | Err(_) => break 'up,
                        Ok(n) => n,
                    };
                    let msgs = match decoder.feed(&rbuf[..n]) {
                        Ok(msgs) => msgs,
                        // Peer speaking garbage: drop the connection.
                        Err(_) => break 'up,
                    };
                    for msg in msgs {
                        if let Some(tx) = pending.remove(&msg.tag()) {
                            let _ = tx.send(RpcOutcome::Reply(msg));
                        }
                    }
                }
            }
        }
        for (_, tx) in pending.drain() {
            let _ = tx.send(RpcOutcome::Disconnected);
        }
    }
}

/// Accepts peer connections forever, answering each request line with the
/// handler's response. Malformed input closes the offending connection.
pub async fn serve(
    listener: TcpListener,
    handler: Arc<dyn PeerHandler>,
    nodelay: Arc<NodelayCheck>,
) {
    loop {
        let (stream, _) = match listener.accept().await {
            Ok(conn) => conn,
            Err(_) => continue,
        };
        nodelay.apply(&stream);
        let handler = handler.clone();
        tokio::spawn(async move {
            let (mut r, mut w) = stream.into_split();
            let mut decoder = LineDecoder::new();
            let mut rbuf = vec![0u8; 64 * 1024];
            loop {
                let n = match r.read(&mut rbuf).await {
                    Ok(0) | Err(_) => return,
                    Ok(n) => n,
                };
                let msgs = match decoder.feed(&rbuf[..n]) {
                    Ok(msgs) => msgs,
                    Err(_) => return,
                };
                for msg in msgs {
                    let tag = msg.tag();
                    let Some(mut resp) = handler.handle(msg) else {
                        return;
                    };
                    resp.set_tag(tag);
                    if w.write_all(encode_line(&resp).as_bytes()).await.is_err() {
                        return;
                    }
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replog::Ballot;
    use crate::transport::wire::Status;

    struct CommitEcho(PeerId);
    impl PeerHandler for CommitEcho {
        fn handle(&self, msg: PeerMessage) -> Option<PeerMessage> {
            match msg {
                PeerMessage::Commit { tag, ballot, last_executed, .. } => {
                    Some(PeerMessage::CommitResp {
                        tag,
                        from: self.0,
                        status: Status::Ok,
                        ballot,
                        last_executed,
                    })
                }
                _ => None,
            }
        }
    }

    fn commit_with_le(le: u64) -> PeerMessage {
        PeerMessage::Commit {
            tag: 0,
            from: 0,
            ballot: Ballot::new(1, 0),
            last_executed: le,
            global_last_executed: 0,
        }
    }

    async fn spawn_echo_server() -> (String, Arc<NodelayCheck>) {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let check = NodelayCheck::new();
        tokio::spawn(serve(listener, Arc::new(CommitEcho(1)), check.clone()));
        (addr, check)
    }

    #[tokio::test]
    async fn rpc_roundtrip_and_nodelay_on_both_ends() {
        let (addr, server_check) = spawn_echo_server().await;
        let t = TcpTransport::new(0, &["unused".into(), addr]);
        let out = t.rpc(1, commit_with_le(7), Duration::from_secs(2)).await;
        match out {
            RpcOutcome::Reply(PeerMessage::CommitResp { last_executed, status, .. }) => {
                assert_eq!(last_executed, 7);
                assert_eq!(status, Status::Ok);
            }
            other => panic!("unexpected outcome: {other:?}"),
        }
        assert!(t.nodelay_check().confirmed());
        assert!(server_check.confirmed());
    }

    #[tokio::test]
    async fn concurrent_rpcs_correlate_by_tag() {
        let (addr, _check) = spawn_echo_server().await;
        let t = Arc::new(TcpTransport::new(0, &["unused".into(), addr]));
        let mut handles = Vec::new();
        for le in 0..64u64 {
            let t = t.clone();
            handles.push(tokio::spawn(async move {
                (le, t.rpc(1, commit_with_le(le), Duration::from_secs(5)).await)
            }));
        }
        for h in handles {
            let (le, out) = h.await.unwrap();
            match out {
                RpcOutcome::Reply(PeerMessage::CommitResp { last_executed, .. }) => {
                    assert_eq!(last_executed, le, "response matched to wrong request");
                }
                other => panic!("unexpected outcome: {other:?}"),
            }
        }
    }

    #[tokio::test]
    async fn responses_out_of_order_still_correlate() {
        // Hand-rolled server that answers the first two requests in reverse.
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        tokio::spawn(async move {
            let (mut stream, _) = listener.accept().await.unwrap();
            let mut decoder = LineDecoder::new();
            let mut got = Vec::new();
            let mut buf = vec![0u8; 4096];
            while got.len() < 2 {
                let n = stream.read(&mut buf).await.unwrap();
                got.extend(decoder.feed(&buf[..n]).unwrap());
            }
            got.reverse();
            for msg in got {
                let (tag, le) = match msg {
                    PeerMessage::Commit { tag, last_executed, .. } => (tag, last_executed),
                    _ => unreachable!(),
                };
                let resp = PeerMessage::CommitResp {
                    tag,
                    from: 1,
                    status: Status::Ok,
                    ballot: Ballot::new(1, 0),
                    last_executed: le,
                };
                stream.write_all(encode_line(&resp).as_bytes()).await.unwrap();
            }
        });

        let t = Arc::new(TcpTransport::new(0, &["unused".into(), addr]));
        let t1 = t.clone();
        let a = tokio::spawn(async move { t1.rpc(1, commit_with_le(11), Duration::from_secs(5)).await });
        tokio::time::sleep(Duration::from_millis(50)).await;
        let b = t.rpc(1, commit_with_le(22), Duration::from_secs(5)).await;
        let a = a.await.unwrap();
        for (out, want) in [(a, 11), (b, 22)] {
            match out {
                RpcOutcome::Reply(PeerMessage::CommitResp { last_executed, .. }) => {
                    assert_eq!(last_executed, want);
                }
                other => panic!("unexpected outcome: {other:?}"),
            }
        }
    }

    #[tokio::test]
    async fn silent_server_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        tokio::spawn(async move {
            let (stream, _) = listener.accept().await.unwrap();
            // Hold the connection open without answering.
            tokio::time::sleep(Duration::from_secs(60)).await;
            drop(stream);
        });
        let t = TcpTransport::new(0, &["unused".into(), addr]);
        let start = std::time::Instant::now();
        let out = t.rpc(1, commit_with_le(1), Duration::from_millis(100)).await;
        assert_eq!(out, RpcOutcome::Timeout);
        assert!(start.elapsed() < Duration::from_secs(2));
    }

    #[tokio::test]
    async fn down_peer_fails_fast_then_reconnects() {
        // Reserve a port, then close the listener so the first dial fails.
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        drop(listener);

        let t = TcpTransport::new(0, &["unused".into(), addr.clone()]);
        let out = t.rpc(1, commit_with_le(1), Duration::from_secs(2)).await;
        assert_eq!(out, RpcOutcome::Disconnected);

        // Bring a server up on the same port; the link task should redial.
        let listener = TcpListener::bind(&addr).await.unwrap();
        tokio::spawn(serve(listener, Arc::new(CommitEcho(1)), NodelayCheck::new()));
        let mut ok = false;
        for _ in 0..50 {
            if let RpcOutcome::Reply(_) = t.rpc(1, commit_with_le(2), Duration::from_millis(200)).await {
                ok = true;
                break;
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        assert!(ok, "link never recovered after the peer came back");
    }

    #[tokio::test]
    async fn malformed_response_drops_connection() {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        tokio::spawn(async move {
            let (mut stream, _) = listener.accept().await.unwrap();
            let mut buf = vec![0u8; 4096];
            let _ = stream.read(&mut buf).await;
            stream.write_all(b"this is not json\n").await.unwrap();
            tokio::time::sleep(Duration::from_secs(60)).await;
        });
        let t = TcpTransport::new(0, &["unused".into(), addr]);
        let out = t.rpc(1, commit_with_le(1), Duration::from_secs(2)).await;
        assert_eq!(out, RpcOutcome::Disconnected);
    }

    #[tokio::test]
    async fn malformed_request_closes_served_connection() {
        let (addr, _check) = spawn_echo_server().await;
        let mut stream = TcpStream::connect(&addr).await.unwrap();
        stream.write_all(b"garbage\n").await.unwrap();
        let mut buf = [0u8; 16];
        let n = stream.read(&mut buf).await.unwrap();
        assert_eq!(n, 0, "server should close on malformed input");
    }
}
