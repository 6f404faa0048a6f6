//! Time-source abstraction. The consensus engine only ever asks "what time is
//! it" and "wake me after d", so the same engine code runs against the real
//! clock in production and a virtual clock in the deterministic simulator.

use std::future::Future;
use std::pin::Pin;
use std::time::Duration;

pub type BoxFuture<T> = Pin<Box<dyn Future<Output = T> + Send>>;

pub trait Clock: Send + Sync {
    /// Monotonic time elapsed since this clock's epoch.
    fn now(&self) -> Duration;
    fn sleep(&self, duration: Duration) -> BoxFuture<()>;
}

/// Wall-clock realization backed by the tokio timer.
pub struct TokioClock {
    epoch: tokio::time::Instant,
}

impl TokioClock {
    pub fn new() -> Self {
        TokioClock { epoch: tokio::time::Instant::now() }
    }
}

impl Default for TokioClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for TokioClock {
    fn now(&self) -> Duration {
        self.epoch.elapsed()
    }

    fn sleep(&self, duration: Duration) -> BoxFuture<()> {
        Box::pin(tokio::time::sleep(duration))
    }
}
