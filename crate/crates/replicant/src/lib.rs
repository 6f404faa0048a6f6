pub mod clock;
pub mod kvstore;
pub mod loadgen;
pub mod multipaxos;
pub mod replog;
pub mod server;
pub mod simharness;
pub mod transport;
