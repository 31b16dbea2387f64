//! Not every hop in a real deployment will participate. An oblivious hop
//! forwards request heads verbatim — unknown headers included — so the
//! authenticated history tunnels through it untouched and the next aware hop
//! verifies against the last aware hop. Attacks that confuse the oblivious
//! hop itself are still caught downstream, because the history describes
//! what the *aware* hops honored.
//!
//!     cargo run --example oblivious_interop

use httpsync::harness::corpus::listing1;
use httpsync::harness::runner::{drive_payload, spawn_chain, HopSpec, LiveVerdict};
use httpsync::node::{Dir, Record};
use httpsync::sync::{SyncKey, ValidationPolicy};
use std::time::Duration;

fn main() {
    let key = SyncKey::generate();
    let specs = [
        HopSpec::sync_preset("cl-preferring-proxy"),
        HopSpec::oblivious_preset("te-sanitizing-origin"), // a legacy middlebox
        HopSpec::sync_preset("te-sanitizing-origin"),
    ];
    let chain =
        spawn_chain(&specs, &key, &ValidationPolicy::default(), Duration::from_secs(5), true)
            .unwrap();

    // A benign chunked request flows through all three.
    let benign = b"POST /submit HTTP/1.1\r\n\
                   Host: www.example.com\r\n\
                   Transfer-Encoding: chunked\r\n\r\n\
                   6\r\npotato\r\n3\r\nand\r\n4\r\neggs\r\n0\r\n\r\n";
    let verdict = drive_payload(&chain, benign, Duration::from_secs(2)).unwrap();
    assert!(verdict.passed());

    // The history value the first hop sent is byte-identical to the one the
    // last hop received: the middle hop changed nothing.
    let records = chain.sink.snapshot();
    let sent: Vec<&Vec<u8>> = records
        .iter()
        .filter_map(|r| match r {
            Record::Snapshot { dir: Dir::Fwd, value, .. } => Some(value),
            _ => None,
        })
        .collect();
    let received: Vec<&Vec<u8>> = records
        .iter()
        .filter_map(|r| match r {
            Record::Snapshot { dir: Dir::Recv, value, .. } => Some(value),
            _ => None,
        })
        .collect();
    assert_eq!(sent.len(), 1, "one aware hop forwards");
    assert_eq!(received.len(), 1, "one aware hop receives");
    assert_eq!(sent[0], received[0], "history tunnels through byte-identical");
    println!("benign request passed; history tunneled verbatim through the oblivious hop:");
    println!("   {}", String::from_utf8_lossy(sent[0]));

    // The smuggling payload is still blocked: the aware origin sees the
    // front hop's declared 51 bytes against its own chunked count of 0.
    let mark = chain.sink.len();
    let verdict = drive_payload(&chain, &listing1(), Duration::from_secs(2)).unwrap();
    let LiveVerdict::Blocked(Some(Record::Terminate { hop, cause, expected, observed, .. })) =
        verdict
    else {
        panic!("expected decisive termination");
    };
    let _ = mark;
    println!(
        "\nsmuggling payload blocked at aware-hop position {hop} ({}): {} vs {}",
        cause.code(),
        String::from_utf8_lossy(&expected),
        String::from_utf8_lossy(&observed),
    );
    assert_eq!(hop, 2, "the oblivious hop does not count as a position");
    chain.stop();
}
