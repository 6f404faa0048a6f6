use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::Duration;

/// One reply line from a server, parsed.
#[derive(Debug, PartialEq)]
pub enum Reply {
    Ok(Option<String>),
    NotFound,
    /// Busy or not the leader; the hint names where to go next.
    Retry(Option<String>),
    Err(String),
}

/// What a command ultimately came back as, after the client's retry loop.
#[derive(Debug, PartialEq)]
pub enum Settled {
    Ok(Option<String>),
    NotFound,
    Failed,
}

/// Blocking line-protocol client. Holds one connection; every "retry" (and
/// every transport error) tears it down and dials fresh — reusing a session
/// across a retry could surface the earlier attempt's late result as a stray
/// reply line, whereas a new connection gets a new server-side session that
/// late result can't reach.
pub struct KvClient {
    cluster: Vec<String>,
    conn: Option<BufReader<TcpStream>>,
    /// Redirect target to dial next, trusted even if not in `cluster`.
    hinted: Option<String>,
    next: usize,
    timeout: Duration,
}

impl KvClient {
    pub fn new(cluster: Vec<String>) -> KvClient {
        assert!(!cluster.is_empty(), "need at least one server address");
        KvClient { cluster, conn: None, hinted: None, next: 0, timeout: Duration::from_secs(5) }
    }

    fn dial(&mut self, addr: &str) -> io::Result<()> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        self.conn = Some(BufReader::new(stream));
        Ok(())
    }

    /// Kernel-reported NODELAY state of the live connection, if any.
    pub fn nodelay(&self) -> Option<bool> {
        self.conn.as_ref().and_then(|c| c.get_ref().nodelay().ok())
    }

    fn ensure_connected(&mut self) -> io::Result<()> {
        if self.conn.is_none() {
            let addr = match self.hinted.take() {
                Some(addr) => addr,
                None => {
                    let addr = self.cluster[self.next % self.cluster.len()].clone();
                    self.next += 1;
                    addr
                }
            };
            self.dial(&addr)?;
        }
        Ok(())
    }

    /// One request/reply exchange on the current connection.
    fn exchange(&mut self, line: &str) -> io::Result<Reply> {
        self.ensure_connected()?;
        let conn = self.conn.as_mut().unwrap();
        conn.get_mut().write_all(line.as_bytes())?;
        conn.get_mut().write_all(b"\n")?;
        let mut reply = String::new();
        if conn.read_line(&mut reply)? == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "server closed"));
        }
        let reply = reply.trim_end();
        Ok(match reply.split_once(' ') {
            Some(("ok", v)) => Reply::Ok(Some(v.to_string())),
            Some(("retry", addr)) => Reply::Retry(Some(addr.to_string())),
            Some(("err", m)) => Reply::Err(m.to_string()),
            None if reply == "ok" => Reply::Ok(None),
            None if reply == "notfound" => Reply::NotFound,
            None if reply == "retry" => Reply::Retry(None),
            _ => Reply::Err(format!("unparseable reply {reply:?}")),
        })
    }

    /// Issues the command, following "retry" hints on fresh connections until
    /// it settles or the retry budget runs out. Returns the settled reply and
    /// how many retries it took; the caller charges the whole affair to one
    /// latency sample.
    pub fn execute(&mut self, line: &str, max_retries: u32) -> (Settled, u32) {
        let mut retries = 0;
        loop {
            match self.exchange(line) {
                Ok(Reply::Ok(v)) => return (Settled::Ok(v), retries),
                Ok(Reply::NotFound) => return (Settled::NotFound, retries),
                Ok(Reply::Retry(hint)) => {
                    self.conn = None;
                    self.hinted = hint;
                }
                Ok(Reply::Err(_)) => return (Settled::Failed, retries),
                Err(_) => {
                    self.conn = None;
                    std::thread::sleep(Duration::from_millis(5));
                }
            }
            if retries >= max_retries {
                return (Settled::Failed, retries);
            }
            retries += 1;
        }
    }
}
