use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

/// Per-request service time as a function of the server's global request
/// counter. The cyclic profile is the classic hiccup demonstration: a server
/// handling 100 req/s answers requests 1-96 of each hundred in 1 ms and
/// requests 97-100 in 250 ms, so a closed-loop generator sees p95 = 1 ms
/// while an open-loop one correctly reports 250 ms or more.
#[derive(Clone, Copy, Debug)]
pub enum ServiceProfile {
    /// 96 fast requests then 4 slow ones, repeating.
    Hiccup { fast: Duration, slow: Duration },
    Constant(Duration),
}

impl ServiceProfile {
    pub fn hiccup() -> ServiceProfile {
        ServiceProfile::Hiccup { fast: Duration::from_millis(1), slow: Duration::from_millis(250) }
    }

    pub fn service_time(&self, request_index: u64) -> Duration {
        match *self {
            ServiceProfile::Hiccup { fast, slow } => {
                if request_index % 100 < 96 {
                    fast
                } else {
                    slow
                }
            }
            ServiceProfile::Constant(d) => d,
        }
    }
}

/// A strictly serial stub server: one request is in service at a time across
/// all connections, each taking the profile's time for its global arrival
/// index. Replies speak the kv line protocol so the load generator needs no
/// special mode. Returns the bound address; serves until `stop` flips.
pub fn spawn_stub(
    listen: &str,
    profile: ServiceProfile,
    stop: Arc<AtomicBool>,
) -> std::io::Result<String> {
    let listener = TcpListener::bind(listen)?;
    let addr = listener.local_addr()?.to_string();
    // The single service lock is the whole point: it serializes requests
    // from every connection, making queueing visible to open-loop clients.
    let service = Arc::new(Mutex::new(0u64));
    std::thread::spawn(move || {
        loop {
            let (stream, _) = match listener.accept() {
                Ok(conn) => conn,
                Err(_) => return,
            };
            if stop.load(Ordering::SeqCst) {
                return;
            }
            let service = service.clone();
            let stop = stop.clone();
            std::thread::spawn(move || serve_conn(stream, profile, service, stop));
        }
    });
    Ok(addr)
}

fn serve_conn(
    stream: TcpStream,
    profile: ServiceProfile,
    service: Arc<Mutex<u64>>,
    stop: Arc<AtomicBool>,
) {
    stream.set_nodelay(true).ok();
    let mut reader = BufReader::new(match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    });
    let mut writer = stream;
    let mut line = String::new();
    loop {
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) | Err(_) => return,
            Ok(_) => {}
        }
        if stop.load(Ordering::SeqCst) {
            return;
        }
        {
            let mut counter = service.lock().unwrap();
            let wait = profile.service_time(*counter);
            *counter += 1;
            std::thread::sleep(wait);
        }
        let reply = match line.split_whitespace().next() {
            Some("get") => "ok stubvalue\n",
            Some("put") | Some("del") => "ok\n",
            _ => "err bad-command\n",
        };
        if writer.write_all(reply.as_bytes()).is_err() {
            return;
        }
    }
}
