//! Spawn a three-hop chain (two proxies and an origin) inside this process,
//! send one benign request through it, and print every record the hops
//! emitted: READY lines, history snapshots at each boundary, and the
//! origin's view of the fully accumulated chain.
//!
//!     cargo run --example chain_of_hops

use httpsync::harness::runner::{drive_payload, spawn_chain, HopSpec, LiveVerdict};
use httpsync::sync::{SyncKey, ValidationPolicy};
use std::time::Duration;

fn main() {
    let key = SyncKey::generate();
    let specs = [
        HopSpec::sync_preset("cl-preferring-proxy"),
        HopSpec::sync_preset("host-header-router"),
        HopSpec::sync_preset("te-sanitizing-origin"),
    ];
    let chain = spawn_chain(&specs, &key, &ValidationPolicy::default(), Duration::from_secs(5), true)
        .expect("chain spawns");
    println!("chain entry point: {}\n", chain.entry);

    let payload = b"POST /submit HTTP/1.1\r\n\
                    Host: www.example.com\r\n\
                    Content-Length: 13\r\n\r\n\
                    potatoandeggs";
    let verdict = drive_payload(&chain, payload, Duration::from_secs(2)).expect("client io");

    match &verdict {
        LiveVerdict::Pass(resp) => {
            println!("client got {}:", resp.status);
            for line in String::from_utf8_lossy(&resp.body).lines() {
                println!("   {line}");
            }
        }
        LiveVerdict::Blocked(record) => println!("blocked: {record:?}"),
    }

    println!("\nrecords emitted along the way:");
    for record in chain.sink.snapshot() {
        println!("   {}", record.to_line());
    }
    chain.stop();

    assert!(verdict.passed(), "a benign request must pass a homogeneous chain");
}
