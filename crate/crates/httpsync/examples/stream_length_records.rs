//! Chunked bodies have no up-front length, so a streaming hop cannot declare
//! one in its history. Instead it counts payload bytes as they flow through
//! and appends the observed total as a penultimate marker chunk; the next
//! hop strips that marker, verifies its own count against it, and repeats.
//!
//!     cargo run --example stream_length_records

use httpsync::body::{
    parse_length_record, BodyEvent, BodyReader, ChunkedWriter, LengthStripper,
};
use httpsync::wire::FramingDecision;
use std::io::BufReader;

fn main() {
    // Hop 1 streams three chunks out and appends its count.
    let mut writer = ChunkedWriter::new(Vec::new());
    let mut counted = 0u64;
    for part in [&b"potato"[..], b"and", b"eggs"] {
        counted += part.len() as u64;
        writer.write_chunk(part).unwrap();
    }
    let wire = writer.finish_with_record(counted).unwrap();
    println!("hop 1 wire bytes ({counted} payload bytes counted):");
    println!("{:?}\n", String::from_utf8_lossy(&wire));

    // Hop 2 reads that stream: the marker is withheld while streaming, so
    // the payload it forwards is exactly the original bytes.
    let mut reader = BodyReader::new(BufReader::new(&wire[..]), FramingDecision::Chunked);
    let mut stripper = LengthStripper::new();
    let mut forwarded: Vec<u8> = Vec::new();
    let mut recorded = None;
    loop {
        let ev = reader.next_event().unwrap();
        let done = matches!(ev, BodyEvent::End);
        let (release, strip) = stripper.on_event(ev).unwrap();
        for part in release {
            forwarded.extend_from_slice(&part);
        }
        if let Some(result) = strip {
            recorded = Some(result);
        }
        if done {
            break;
        }
    }
    let result = recorded.expect("stream carried a length record");
    println!("hop 2 recovered record: declared={} counted={}", result.declared, result.counted);
    println!("hop 2 forwards payload: {:?}", String::from_utf8_lossy(&forwarded));
    assert_eq!(result.declared, 13);
    assert_eq!(result.counted, 13);
    assert_eq!(forwarded, b"potatoandeggs");

    // The record payload itself is a tiny fixed grammar.
    assert_eq!(parse_length_record(b"Length: 13"), Some(13));
    assert_eq!(parse_length_record(b"Length: 013"), None, "leading zeros are not canonical");
    assert_eq!(parse_length_record(b"length: 13"), None, "case matters");

    // A hop that lies about its count is caught by the next counter.
    let mut liar = ChunkedWriter::new(Vec::new());
    liar.write_chunk(b"potatoandeggs").unwrap();
    let lying_wire = liar.finish_with_record(9999).unwrap();
    let mut reader = BodyReader::new(BufReader::new(&lying_wire[..]), FramingDecision::Chunked);
    let mut stripper = LengthStripper::new();
    let mut caught = None;
    loop {
        let ev = reader.next_event().unwrap();
        let done = matches!(ev, BodyEvent::End);
        let (_, strip) = stripper.on_event(ev).unwrap();
        if let Some(result) = strip {
            caught = Some(result);
        }
        if done {
            break;
        }
    }
    let caught = caught.unwrap();
    assert_ne!(caught.declared, caught.counted);
    println!(
        "\na lying upstream (declared {} but sent {}) is caught before the body completes",
        caught.declared, caught.counted
    );
}
