//! Discrepancy-simulation harness: a payload corpus, a raw-byte client, an
//! independent two-hop verdict oracle, chain runners (in-process threads or
//! separate processes over loopback), scenario configs with expectations,
//! and a latency benchmark.

pub mod client;
pub mod corpus;
pub mod bench;
pub mod oracle;
pub mod runner;
pub mod scenario;
