//! By default any difference between adjacent hops is a discrepancy — but
//! real deployments rewrite things on purpose. A transition rule licenses
//! exactly one rewrite of one field at one position; everything else still
//! fails closed. Length has no rule type at all: no policy can waive a body
//! that changed size.
//!
//!     cargo run --example policy_rules

use httpsync::harness::client::parse_echo;
use httpsync::harness::runner::{drive_payload, spawn_chain, HopSpec, LiveVerdict};
use httpsync::node::{PathRewrite, Record};
use httpsync::sync::{
    validate_sync, FieldSnapshot, HopLength, RuleField, SyncHistory, SyncKey, TransitionRule,
    ValidationOutcome, ValidationPolicy,
};
use std::time::Duration;

fn main() {
    // Pure data-level view first: a two-entry history where hop 1 rewrote
    // the path.
    let history = SyncHistory {
        hosts: vec![b"api.example.com".to_vec(), b"api.example.com".to_vec()],
        length: HopLength::Declared(0),
        paths: vec![b"/public".to_vec(), b"/internal".to_vec()],
    };
    let own = FieldSnapshot::new("/internal", "api.example.com");
    let strict = ValidationPolicy::default();
    match validate_sync(&history, &own, HopLength::Declared(0), &strict) {
        ValidationOutcome::Invalid(d) => println!(
            "no rules: rewrite flagged at hop {} ({:?} -> {:?})",
            d.at_hop,
            String::from_utf8_lossy(&d.expected),
            String::from_utf8_lossy(&d.observed),
        ),
        ValidationOutcome::Valid { .. } => unreachable!(),
    }

    let licensed = ValidationPolicy::with_rules(vec![TransitionRule {
        field: RuleField::Path,
        at_hop: 1,
        from: "/public".into(),
        to: "/internal".into(),
    }]);
    match validate_sync(&history, &own, HopLength::Declared(0), &licensed) {
        ValidationOutcome::Valid { .. } => println!("with the rule: the same history validates"),
        ValidationOutcome::Invalid(d) => unreachable!("{d:?}"),
    }

    // The rule is exact: a different target path is still flagged.
    let wrong = SyncHistory { paths: vec![b"/public".to_vec(), b"/interna1".to_vec()], ..history };
    let own_wrong = FieldSnapshot::new("/interna1", "api.example.com");
    assert!(matches!(
        validate_sync(&wrong, &own_wrong, HopLength::Declared(0), &licensed),
        ValidationOutcome::Invalid(_)
    ));
    println!("a near-miss rewrite (/interna1) is still refused\n");

    // Now live: a front hop that rewrites /public to /internal on the wire.
    let key = SyncKey::generate();
    let mut front = HopSpec::sync_preset("raw-path-cache");
    front.rewrite_path = Some(PathRewrite { from: "/public".into(), to: "/internal".into() });
    let specs = [front, HopSpec::sync_preset("raw-path-cache")];

    let chain = spawn_chain(&specs, &key, &licensed, Duration::from_secs(5), false).unwrap();
    let payload = b"GET /public HTTP/1.1\r\nHost: api.example.com\r\n\r\n";
    match drive_payload(&chain, payload, Duration::from_secs(2)).unwrap() {
        LiveVerdict::Pass(resp) => {
            let echo = parse_echo(&resp.body).unwrap();
            println!(
                "licensed chain: origin served {:?}",
                String::from_utf8_lossy(&echo.path)
            );
            assert_eq!(echo.path, b"/internal");
        }
        LiveVerdict::Blocked(r) => unreachable!("licensed rewrite blocked: {r:?}"),
    }
    chain.stop();

    // The same chain under the no-rules policy refuses the rewrite.
    let mut front = HopSpec::sync_preset("raw-path-cache");
    front.rewrite_path = Some(PathRewrite { from: "/public".into(), to: "/internal".into() });
    let specs = [front, HopSpec::sync_preset("raw-path-cache")];
    let chain = spawn_chain(&specs, &key, &strict, Duration::from_secs(5), false).unwrap();
    match drive_payload(&chain, payload, Duration::from_secs(2)).unwrap() {
        LiveVerdict::Blocked(Some(Record::Terminate { hop, field, expected, observed, .. })) => {
            println!(
                "unlicensed chain: blocked at hop {hop}, field {:?} ({:?} vs {:?})",
                field,
                String::from_utf8_lossy(&expected),
                String::from_utf8_lossy(&observed),
            );
        }
        other => unreachable!("expected a termination, got {other:?}"),
    }
    chain.stop();
}
