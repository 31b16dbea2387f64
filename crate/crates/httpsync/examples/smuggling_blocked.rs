//! The classic request-smuggling shape: a Content-Length that one hop
//! honors, and a Transfer-Encoding value the next hop repairs and prefers.
//! Undefended, the leftover bytes become a second request to /admin that the
//! front proxy never saw. With synchronization on, the length mismatch is
//! caught at the second hop and the connection dies before /admin exists.
//!
//!     cargo run --example smuggling_blocked

use httpsync::harness::corpus::listing1;
use httpsync::harness::runner::{drive_payload, spawn_chain, HopSpec, LiveVerdict};
use httpsync::node::Record;
use httpsync::sync::{SyncKey, ValidationPolicy};
use std::time::Duration;

fn main() {
    let key = SyncKey::generate();
    let policy = ValidationPolicy::default();
    let payload = listing1();
    println!("attack payload:\n{}", String::from_utf8_lossy(&payload));

    // Undefended: both hops forward obliviously.
    let naive = spawn_chain(
        &[
            HopSpec::oblivious_preset("cl-preferring-proxy"),
            HopSpec::oblivious_preset("te-sanitizing-origin"),
        ],
        &key,
        &policy,
        Duration::from_secs(5),
        false,
    )
    .unwrap();
    let verdict = drive_payload(&naive, &payload, Duration::from_secs(2)).unwrap();
    assert!(verdict.passed(), "the oblivious chain does not notice anything");
    // Give the origin a moment to process the smuggled leftover.
    std::thread::sleep(Duration::from_millis(200));
    let served: Vec<String> = naive
        .sink
        .snapshot()
        .into_iter()
        .filter_map(|r| match r {
            Record::Request { target, .. } => Some(String::from_utf8_lossy(&target).into_owned()),
            _ => None,
        })
        .collect();
    naive.stop();
    println!("oblivious chain: client saw one 200, but the origin served: {served:?}");
    assert!(
        served.iter().any(|t| t == "/admin"),
        "undefended, the smuggled /admin request reaches the origin"
    );

    // Defended: same personalities, now exchanging authenticated history.
    let defended = spawn_chain(
        &[
            HopSpec::sync_preset("cl-preferring-proxy"),
            HopSpec::sync_preset("te-sanitizing-origin"),
        ],
        &key,
        &policy,
        Duration::from_secs(5),
        false,
    )
    .unwrap();
    let verdict = drive_payload(&defended, &payload, Duration::from_secs(2)).unwrap();
    let LiveVerdict::Blocked(Some(Record::Terminate { hop, cause, field, expected, observed })) =
        &verdict
    else {
        panic!("expected a decisive termination, got {verdict:?}");
    };
    println!(
        "defended chain: blocked at hop {hop} ({}, field {:?}: chain said {:?}, hop observed {:?})",
        cause.code(),
        field,
        String::from_utf8_lossy(expected),
        String::from_utf8_lossy(observed),
    );
    let smuggled: Vec<_> = defended
        .sink
        .snapshot()
        .into_iter()
        .filter(|r| matches!(r, Record::Request { target, .. } if target == b"/admin"))
        .collect();
    defended.stop();
    assert!(smuggled.is_empty(), "no /admin request may survive the defended chain");
    println!("defended chain: /admin never reached the origin");
}
