//! The harness ships an independent model of two-hop processing: given a
//! payload and two personalities, it predicts pass-or-blocked without
//! running any sockets. This example compares those predictions against a
//! live chain for a few interesting personality pairs.
//!
//!     cargo run --example discrepancy_oracle

use httpsync::harness::corpus::corpus;
use httpsync::harness::oracle::{predict_two_hop, Verdict};
use httpsync::harness::runner::{drive_payload, spawn_chain, HopSpec};
use httpsync::sync::{SyncKey, ValidationPolicy};
use httpsync::wire::ParserPersonality;
use std::time::Duration;

fn main() {
    let pairs = [
        ("cl-preferring-proxy", "te-sanitizing-origin"),
        ("raw-path-cache", "decoding-framework-origin"),
        ("fat-get-forwarder", "fat-get-ignorer"),
        ("strict-gateway", "strict-gateway"),
    ];
    let key = SyncKey::generate();
    let policy = ValidationPolicy::default();
    let entries = corpus();

    for (front, back) in pairs {
        println!("== {front} -> {back}");
        let chain = spawn_chain(
            &[HopSpec::sync_preset(front), HopSpec::sync_preset(back)],
            &key,
            &policy,
            Duration::from_secs(3),
            false,
        )
        .unwrap();
        let mut agreements = 0;
        let mut disagreements = Vec::new();
        for entry in &entries {
            let fp = ParserPersonality::preset(front).unwrap();
            let bp = ParserPersonality::preset(back).unwrap();
            let predicted = predict_two_hop(&entry.bytes, &fp, &bp);
            let live = drive_payload(&chain, &entry.bytes, Duration::from_secs(2)).unwrap();
            let live_verdict = if live.passed() { Verdict::Pass } else { Verdict::Blocked };
            if live_verdict == predicted.verdict {
                agreements += 1;
            } else {
                disagreements.push(entry.name);
            }
            if predicted.verdict == Verdict::Blocked {
                println!("   {:<22} blocked: {}", entry.name, predicted.reason);
            }
        }
        chain.stop();
        println!("   model agreed with the live chain on {agreements}/{} payloads", entries.len());
        assert!(disagreements.is_empty(), "model diverged on: {disagreements:?}");
    }
}
