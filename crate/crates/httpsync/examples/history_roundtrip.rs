//! Build a processing history hop by hop, encode it canonically, tag it with
//! the keyed hash, then play the receiving side: verify the tag, decode, and
//! validate own processing against the chain — including what happens when a
//! middlebox tampers with the value.
//!
//!     cargo run --example history_roundtrip

use httpsync::sync::{
    append_history, compute_hmac, decode_sync, encode_sync, init_history, validate_sync,
    FieldSnapshot, HopLength, SyncKey, ValidationOutcome, ValidationPolicy,
};

fn main() {
    let key = SyncKey::generate();

    // Hop 1: a front proxy that honored /public on www.example.com with a
    // 13-byte declared body.
    let hop1 = FieldSnapshot::new("/public", "www.example.com");
    let history = init_history(&hop1, HopLength::Declared(13));
    let value = encode_sync(&history);
    let tag = compute_hmac(&key, &value);
    println!("hop 1 sends:");
    println!("   HTTP-Sync: {}", String::from_utf8_lossy(&value));
    println!("   HTTP-Sync-HMAC: {tag}\n");

    // Hop 2 verifies, decodes, and compares its own interpretation.
    assert!(httpsync::sync::verify_hmac(&key, &value, tag.as_bytes()));
    let received = decode_sync(&value).expect("canonical value");
    let own = FieldSnapshot::new("/public", "www.example.com");
    match validate_sync(&received, &own, HopLength::Declared(13), &ValidationPolicy::default()) {
        ValidationOutcome::Valid { length_duty } => {
            println!("hop 2 agrees (length duty: {length_duty:?})")
        }
        ValidationOutcome::Invalid(d) => unreachable!("unexpected discrepancy: {d:?}"),
    }

    // Hop 2 appends itself and forwards.
    let history2 = append_history(&received, &own, HopLength::Declared(13));
    let value2 = encode_sync(&history2);
    println!("hop 2 sends:");
    println!("   HTTP-Sync: {}\n", String::from_utf8_lossy(&value2));

    // A confused hop 3 honors a different path: the mismatch is pinpointed.
    let confused = FieldSnapshot::new("/public/..%2fadmin", "www.example.com");
    match validate_sync(
        &decode_sync(&value2).unwrap(),
        &confused,
        HopLength::Declared(13),
        &ValidationPolicy::default(),
    ) {
        ValidationOutcome::Valid { .. } => unreachable!("must not validate"),
        ValidationOutcome::Invalid(d) => println!(
            "hop 3 disagrees with hop {}'s record: field={:?} (chain said {:?}, hop 3 observed {:?})",
            d.at_hop,
            d.field,
            String::from_utf8_lossy(&d.expected),
            String::from_utf8_lossy(&d.observed),
        ),
    }

    // Tampering with one byte of the value kills the tag.
    let mut forged = value2.clone();
    let flip = forged.iter().position(|&b| b == b'3').unwrap();
    forged[flip] = b'4';
    let tag2 = compute_hmac(&key, &value2);
    assert!(!httpsync::sync::verify_hmac(&key, &forged, tag2.as_bytes()));
    println!("\nflipping one byte of the history invalidates the keyed hash, as it should");

    // And a value signed under the wrong key is rejected too.
    let other_key = SyncKey::generate();
    let wrong_tag = compute_hmac(&other_key, &value2);
    assert!(!httpsync::sync::verify_hmac(&key, &value2, wrong_tag.as_bytes()));
    println!("a tag minted under a different key is rejected as well");
}
