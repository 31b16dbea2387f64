//! Hop-by-hop HTTP request synchronization.
//!
//! Every request that crosses a chain of proxies is parsed once per hop, and
//! no two hops are guaranteed to parse it the same way. This crate makes the
//! disagreement observable and fatal: each participating hop records what it
//! honored — path, host, body length — in an authenticated `HTTP-Sync`
//! header, and each subsequent hop compares that record against its own
//! interpretation before acting. A mismatch anywhere terminates the
//! connection instead of letting a cache, router, or backend act on bytes
//! its neighbors read differently.
//!
//! The crate splits into:
//!
//! - [`wire`]: request parsing under configurable "personalities" that
//!   reproduce real-world parser disagreements (framing precedence,
//!   duplicate hosts, path decoding, fat GETs).
//! - [`sync`]: the canonical history encoding, HMAC authentication, and the
//!   validation rules, including transition rules that license deliberate
//!   rewrites.
//! - [`body`]: framed body transport and the in-stream length record that
//!   lets streaming hops agree on byte counts without buffering.
//! - [`node`]: the runnable hop — proxy, origin, or sync-oblivious relay.
//! - [`harness`]: attack corpus, verdict oracle, chain runners, scenario
//!   configs, and the latency benchmark.
//!
//! The `examples/` directory is the front door: each example is a runnable
//! walkthrough of one capability, from parsing disagreements to full
//! defended chains.

pub mod body;
pub mod cli;
pub mod harness;
pub mod node;
pub mod sync;
pub mod wire;
