//! Go/no-go acceptance checks for the synchronized-chain defense, one test
//! per criterion. Each test prints a `CRITERION <n> (<name>): PASS|FAIL`
//! verdict line (visible with `cargo test --test acceptance -- --nocapture`);
//! the test names carry the same numbering, so the standard harness output
//! doubles as the checklist.
//!
//! The checks cover: the three confusion case studies end-to-end (1), the
//! exact termination for the classic framing-split smuggle (2), oracle/live
//! verdict equivalence over every ordered personality pair (3), HMAC tamper
//! resistance plus reference vectors (4), the length-record inject/strip
//! inverse (5), streaming preservation by event order (6), loopback overhead
//! bounds (7), and tunneling through an oblivious hop (8).

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::panic::AssertUnwindSafe;
use std::path::Path;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use hmac::{Hmac, Mac};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::Sha256;

use httpsync::body::{BodyEvent, BodyReader, ChunkedWriter, LengthStripper};
use httpsync::harness::bench;
use httpsync::harness::client::{send_request, ClientOutcome};
use httpsync::harness::corpus;
use httpsync::harness::oracle::{predict_two_hop, Verdict};
use httpsync::harness::runner::{drive_payload, spawn_chain, Chain, HopSpec, LiveVerdict};
use httpsync::harness::scenario::{
    run_scenario, PayloadReport, RunOptions, ScenarioConfig, ScenarioReport,
};
use httpsync::node::{spawn_node, Cause, Dir, MemorySink, NodeConfig, Record, RecordSink, TransferMode};
use httpsync::sync::{
    append_history, compute_hmac, encode_sync, init_history, verify_hmac, DiscrepancyField,
    FieldSnapshot, HopLength, SyncKey, ValidationPolicy,
};
use httpsync::wire::{FramingDecision, ParserPersonality};

/// The checks share ports, process spawns, and (for the benchmark) timing
/// quietness, so they run one at a time regardless of harness threading.
static GATE: Mutex<()> = Mutex::new(());

fn gate() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

/// Run one criterion body and print its verdict line either way.
fn criterion(n: u32, name: &str, body: impl FnOnce()) {
    match std::panic::catch_unwind(AssertUnwindSafe(body)) {
        Ok(()) => println!("CRITERION {n} ({name}): PASS"),
        Err(cause) => {
            println!("CRITERION {n} ({name}): FAIL");
            std::panic::resume_unwind(cause);
        }
    }
}

// ---------------------------------------------------------------- scenarios

fn load_fixture(name: &str) -> ScenarioConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name);
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("parsing {}: {e}", path.display()))
}

fn run_fixture(cfg: &ScenarioConfig, defended: bool) -> ScenarioReport {
    let opts = RunOptions {
        binary: Path::new(env!("CARGO_BIN_EXE_httpsync")),
        defended,
        verbose: false,
        client_timeout: Duration::from_secs(2),
    };
    let report = run_scenario(cfg, &opts)
        .unwrap_or_else(|e| panic!("running scenario {}: {e}", cfg.name));
    assert!(
        report.all_met,
        "scenario {} ({}) missed expectations:\n{}",
        cfg.name,
        report.mode,
        httpsync::harness::scenario::render_summary(&report),
    );
    report
}

fn payload_report<'a>(report: &'a ScenarioReport, name: &str) -> &'a PayloadReport {
    report
        .results
        .iter()
        .find(|r| r.payload == name)
        .unwrap_or_else(|| panic!("scenario {} has no payload {name}", report.scenario))
}

fn assert_blocked_at(report: &ScenarioReport, payload: &str, hop: usize, field: &str) {
    let r = payload_report(report, payload);
    assert_eq!(r.observed.kind, "blocked", "{payload} should be blocked");
    let t = r
        .observed
        .terminate
        .as_ref()
        .unwrap_or_else(|| panic!("{payload} blocked without a termination record"));
    assert_eq!(t.hop, hop, "{payload}: wrong hop");
    assert_eq!(t.cause, "sync-invalid", "{payload}: wrong cause");
    assert_eq!(t.field.as_deref(), Some(field), "{payload}: wrong field");
}

/// Criterion 1: each confusion case study demonstrably works against the
/// undefended chain and is blocked by the defended chain at the expected
/// hop and field.
#[test]
fn criterion_1_confusion_case_studies() {
    let _g = gate();
    criterion(1, "confusion-case-studies", || {
        let started = Instant::now();

        // Cache deception: a path-suffix URL that a raw-path cache treats as
        // an image while the decoding origin serves the account page.
        let cfg = load_fixture("path-confusion.json");
        let baseline = run_fixture(&cfg, false);
        let r = payload_report(&baseline, "wcd-path-style");
        assert_eq!(
            r.observed.echo_path.as_deref(),
            Some("/account.php"),
            "undefended origin must honor the account path for the image-looking URL",
        );
        let defended = run_fixture(&cfg, true);
        // Two-node chain: position 2 is the origin.
        assert_blocked_at(&defended, "wcd-path-style", 2, "path");
        assert_blocked_at(&defended, "wcd-encoded-query", 2, "path");

        // Host confusion: an absolute-form target whose authority contradicts
        // the Host header, routed by hops that honor different sources.
        let cfg = load_fixture("host-confusion.json");
        let baseline = run_fixture(&cfg, false);
        let r = payload_report(&baseline, "absolute-uri-conflict");
        assert_eq!(
            r.observed.echo_host.as_deref(),
            Some("admin.example.com"),
            "undefended routing must honor the smuggled authority",
        );
        let defended = run_fixture(&cfg, true);
        assert_blocked_at(&defended, "absolute-uri-conflict", 2, "host");

        // Fat GET: a GET body one hop forwards and the next ignores, leaving
        // a complete second request in the stream.
        let cfg = load_fixture("fat-get.json");
        let baseline = run_fixture(&cfg, false);
        let r = payload_report(&baseline, "fat-get-smuggle");
        assert!(
            r.observed.origin_targets.iter().any(|t| t == "/smuggled"),
            "undefended chain must surface the smuggled second request, saw {:?}",
            r.observed.origin_targets,
        );
        let defended = run_fixture(&cfg, true);
        assert_blocked_at(&defended, "fat-get-13", 2, "length");
        assert_blocked_at(&defended, "fat-get-smuggle", 2, "length");

        let elapsed = started.elapsed();
        println!("   three case studies, both modes, in {elapsed:.2?}");
        assert!(elapsed < Duration::from_secs(60), "case studies took {elapsed:?}");
    });
}

/// Criterion 2: the classic framing-split payload (declared length 51
/// carrying an immediately-terminal chunk stream) terminates with exactly
/// expected=51 observed=0 at the chunked-honoring sync origin.
#[test]
fn criterion_2_framing_split_exact_termination() {
    let _g = gate();
    criterion(2, "framing-split-termination", || {
        let cfg = load_fixture("cl-te-smuggle.json");
        let defended = run_fixture(&cfg, true);
        let r = payload_report(&defended, "smuggle-cl-te");
        assert_eq!(r.observed.kind, "blocked");
        let t = r.observed.terminate.as_ref().expect("decisive termination record");
        assert_eq!(t.hop, 2);
        assert_eq!(t.cause, "sync-invalid");
        assert_eq!(t.field.as_deref(), Some("length"));
        assert_eq!(t.expected, "51", "exact declared length");
        assert_eq!(t.observed, "0", "exact chunk-counted length");
        println!(
            "   terminated at hop {} on {}: expected={} observed={}",
            t.hop,
            t.field.as_deref().unwrap(),
            t.expected,
            t.observed,
        );
    });
}

// ------------------------------------------------------------------ oracle

/// Verdict of a live request judged purely on the client outcome: a 200
/// passes, anything else (error status, close, stall) is blocked. The oracle
/// predicts the same binary outcome, so agreement is judged on it.
fn live_verdict(entry: std::net::SocketAddr, payload: &[u8]) -> Verdict {
    match send_request(entry, payload, Duration::from_secs(2)).expect("client io") {
        ClientOutcome::Response(r) if r.status == 200 => Verdict::Pass,
        _ => Verdict::Blocked,
    }
}

/// Criterion 3: the honored-tuple oracle and a live two-hop sync chain reach
/// the same verdict for every corpus payload under every ordered pair of
/// shipped personalities.
#[test]
fn criterion_3_oracle_equivalence() {
    let _g = gate();
    criterion(3, "oracle-equivalence", || {
        let started = Instant::now();
        let names = ParserPersonality::preset_names();
        let entries = corpus::corpus();
        assert!(entries.len() >= 20, "corpus too small: {}", entries.len());
        let key = SyncKey::generate();
        let policy = ValidationPolicy::default();

        let mut checked = 0usize;
        let mut disagreements: Vec<String> = Vec::new();
        for front in names {
            let fp = ParserPersonality::preset(front).unwrap();
            for back in names {
                let bp = ParserPersonality::preset(back).unwrap();
                let chain = spawn_chain(
                    &[HopSpec::sync_preset(front), HopSpec::sync_preset(back)],
                    &key,
                    &policy,
                    Duration::from_secs(1),
                    false,
                )
                .expect("spawn chain");
                for entry in &entries {
                    let predicted = predict_two_hop(&entry.bytes, &fp, &bp).verdict;
                    let lived = live_verdict(chain.entry, &entry.bytes);
                    checked += 1;
                    if predicted != lived {
                        disagreements.push(format!(
                            "{front} -> {back} on {}: oracle {predicted:?}, live {lived:?}",
                            entry.name,
                        ));
                    }
                }
                chain.stop();
            }
        }

        let elapsed = started.elapsed();
        println!(
            "   {} personality pairs x {} payloads = {checked} verdicts compared in {elapsed:.2?}",
            names.len() * names.len(),
            entries.len(),
        );
        assert!(
            disagreements.is_empty(),
            "oracle and live chain disagree on {} of {checked}:\n{}",
            disagreements.len(),
            disagreements.join("\n"),
        );
        assert!(elapsed < Duration::from_secs(300), "oracle sweep took {elapsed:?}");
    });
}

// -------------------------------------------------------------------- hmac

/// From-scratch reference computation, independent of the key-caching path
/// the production code uses.
fn reference_hmac(key: &[u8], message: &[u8]) -> String {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("any key length");
    mac.update(message);
    hex::encode(mac.finalize().into_bytes())
}

/// Criterion 4: the MAC implementation matches the published HMAC-SHA256
/// reference vectors exactly, every genuine tag verifies, and ten thousand
/// randomized tamper attempts (history flips, tag flips, wrong key) are all
/// rejected.
#[test]
fn criterion_4_hmac_integrity() {
    let _g = gate();
    criterion(4, "hmac-integrity", || {
        // Reference vectors for HMAC-SHA256 (the seven standard test cases).
        let vectors: &[(Vec<u8>, Vec<u8>, &str)] = &[
            (
                vec![0x0b; 20],
                b"Hi There".to_vec(),
                "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7",
            ),
            (
                b"Jefe".to_vec(),
                b"what do ya want for nothing?".to_vec(),
                "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843",
            ),
            (
                vec![0xaa; 20],
                vec![0xdd; 50],
                "773ea91e36800e46854db8ebd09181a72959098b3ef8c122d9635514ced565fe",
            ),
            (
                (0x01..=0x19).collect(),
                vec![0xcd; 50],
                "82558a389a443c0ea4cc819899f2083a85f0faa3e578f8077a2e3ff46729665b",
            ),
            (
                vec![0xaa; 131],
                b"Test Using Larger Than Block-Size Key - Hash Key First".to_vec(),
                "60e431591ee0b67f0d8a26aacbf5b77f8e0bc6213728c5140546040f0ee37f54",
            ),
            (
                vec![0xaa; 131],
                b"This is a test using a larger than block-size key and a larger \
than block-size data. The key needs to be hashed before being used by the \
HMAC algorithm."
                    .to_vec(),
                "9b09ffa71b942fcb27635fbcd5b0e944bfdc63644f0713938a7f51535c3a35e2",
            ),
        ];
        for (key, msg, want) in vectors {
            assert_eq!(&reference_hmac(key, msg), want, "reference vector mismatch");
        }
        let truncated = reference_hmac(&[0x0c; 20], b"Test With Truncation");
        assert_eq!(&truncated[..32], "a3b6167473100ee06e0c796c2955552b");

        // The production path (cached key schedule) must agree with the
        // reference computation for 32-byte keys.
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
        for _ in 0..64 {
            let kb: [u8; 32] = rng.gen();
            let mut msg = vec![0u8; rng.gen_range(0..512)];
            rng.fill_bytes(&mut msg);
            assert_eq!(compute_hmac(&SyncKey::from_bytes(kb), &msg), reference_hmac(&kb, &msg));
        }

        // Randomized tamper trials over realistic encoded histories.
        let hexdigits = b"0123456789abcdef";
        let alphabet = b"abcdefghijklmnopqrstuvwxyz0123456789/.-%";
        let random_text = |rng: &mut ChaCha8Rng, max: usize| -> Vec<u8> {
            let len = rng.gen_range(1..=max);
            (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
        };

        let trials = 12_000u32;
        let mut rejected = [0u32; 3];
        for i in 0..trials {
            let kb: [u8; 32] = rng.gen();
            let key = SyncKey::from_bytes(kb);
            let length = if rng.gen_ratio(1, 5) {
                HopLength::Stream
            } else {
                HopLength::Declared(rng.gen_range(0..=10_000_000))
            };
            let mut hist = init_history(
                &FieldSnapshot::new(random_text(&mut rng, 40), random_text(&mut rng, 30)),
                length,
            );
            for _ in 0..rng.gen_range(0..3) {
                hist = append_history(
                    &hist,
                    &FieldSnapshot::new(random_text(&mut rng, 40), random_text(&mut rng, 30)),
                    length,
                );
            }
            let value = encode_sync(&hist);
            let tag = compute_hmac(&key, &value);
            assert!(verify_hmac(&key, &value, tag.as_bytes()), "genuine tag rejected");

            match i % 3 {
                0 => {
                    // Flip one byte of the authenticated history value.
                    let mut forged = value.clone();
                    let at = rng.gen_range(0..forged.len());
                    forged[at] ^= rng.gen_range(1..=255u8);
                    assert!(
                        !verify_hmac(&key, &forged, tag.as_bytes()),
                        "history flip accepted at byte {at}",
                    );
                    rejected[0] += 1;
                }
                1 => {
                    // Replace one tag character with a different hex digit.
                    let mut forged = tag.clone().into_bytes();
                    let at = rng.gen_range(0..forged.len());
                    let old = forged[at];
                    loop {
                        let candidate = hexdigits[rng.gen_range(0..16)];
                        if candidate != old {
                            forged[at] = candidate;
                            break;
                        }
                    }
                    assert!(!verify_hmac(&key, &value, &forged), "tag flip accepted at {at}");
                    rejected[1] += 1;
                }
                _ => {
                    // Same value and tag, one key byte off.
                    let mut wrong = kb;
                    let at = rng.gen_range(0..wrong.len());
                    wrong[at] ^= rng.gen_range(1..=255u8);
                    assert!(
                        !verify_hmac(&SyncKey::from_bytes(wrong), &value, tag.as_bytes()),
                        "wrong key accepted (byte {at})",
                    );
                    rejected[2] += 1;
                }
            }
        }
        println!(
            "   {} reference vectors exact; {trials} genuine tags accepted; \
{}/{}/{} history/tag/key tampers rejected",
            vectors.len() + 1,
            rejected[0],
            rejected[1],
            rejected[2],
        );
    });
}

// ------------------------------------------------------------ length record

/// Criterion 5: for a thousand random bodies (sizes spanning 0 to 10 MiB,
/// chunk counts 1 to 10^4), stripping the injected length record recovers
/// the original bytes and both counts equal the body length.
#[test]
fn criterion_5_length_record_roundtrip() {
    let _g = gate();
    criterion(5, "length-record-roundtrip", || {
        let started = Instant::now();
        const MIB10: usize = 10 * 1024 * 1024;
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);

        // Deliberate edge cases first, then log-uniform random sizes so every
        // magnitude gets coverage without the sum exploding.
        let mut cases: Vec<(usize, usize)> = vec![
            (0, 7),
            (1, 1),
            (2, 2),
            (3, 10_000),
            (65_535, 64),
            (65_536, 1),
            (65_537, 1_000),
            (102_400, 100),
            (102_400, 10_000),
            (1_048_576, 10_000),
            (MIB10, 1),
            (MIB10, 10_000),
        ];
        while cases.len() < 1_000 {
            let u: f64 = rng.gen();
            let size = (MIB10 as f64).powf(u).floor() as usize;
            cases.push((size.min(MIB10), rng.gen_range(1..=10_000)));
        }

        let mut total_bytes = 0usize;
        for (case_no, &(size, chunks)) in cases.iter().enumerate() {
            let mut body = vec![0u8; size];
            rng.fill_bytes(&mut body);
            total_bytes += size;

            // Inject: write the body as roughly `chunks` pieces, then close
            // with the record carrying the written count.
            let mut writer = ChunkedWriter::new(Vec::with_capacity(size + 64));
            let mut counted = 0u64;
            if size > 0 {
                let piece = size.div_ceil(chunks).max(1);
                for slice in body.chunks(piece) {
                    writer.write_chunk(slice).unwrap();
                    counted += slice.len() as u64;
                }
            }
            let wire = writer.finish_with_record(counted).unwrap();

            // Strip: read the wire back as a chunk stream, remove the record,
            // and compare the forwarded payload byte-for-byte.
            let mut reader = BodyReader::new(wire.as_slice(), FramingDecision::Chunked);
            let mut stripper = LengthStripper::new();
            let mut offset = 0usize;
            let result = loop {
                let event = reader.next_event().unwrap_or_else(|e| {
                    panic!("case {case_no} (size {size}, chunks {chunks}): framing error {e}")
                });
                let finished = matches!(event, BodyEvent::End);
                let (slices, result) = stripper.on_event(event).unwrap_or_else(|e| {
                    panic!("case {case_no} (size {size}, chunks {chunks}): strip error {e:?}")
                });
                for s in slices {
                    assert_eq!(
                        &body[offset..offset + s.len()],
                        &s[..],
                        "case {case_no}: payload diverges at offset {offset}",
                    );
                    offset += s.len();
                }
                if finished {
                    break result.expect("strip result on end of body");
                }
            };
            assert_eq!(offset, size, "case {case_no}: payload truncated");
            assert_eq!(result.declared, size as u64, "case {case_no}: declared count");
            assert_eq!(result.counted, size as u64, "case {case_no}: observed count");
        }

        println!(
            "   {} bodies ({:.1} MiB total) round-tripped byte-exactly in {:.2?}",
            cases.len(),
            total_bytes as f64 / (1024.0 * 1024.0),
            started.elapsed(),
        );
    });
}

// -------------------------------------------------------------- streaming

/// Criterion 6: a streaming sync hop forwards body bytes before the client
/// finishes sending. Asserted by event order in a single thread: the
/// upstream read of the first chunk *completes* strictly before the final
/// chunk is written. The socket timeout only bounds the failure case.
#[test]
fn criterion_6_streaming_preserved() {
    let _g = gate();
    criterion(6, "streaming-preserved", || {
        let upstream = TcpListener::bind("127.0.0.1:0").expect("bind upstream");
        let upstream_addr = upstream.local_addr().unwrap();
        upstream.set_nonblocking(true).unwrap();

        let mut cfg = NodeConfig::proxy(
            upstream_addr,
            ParserPersonality::preset("strict-gateway").unwrap(),
        )
        .with_label("streaming-hop")
        .with_sync(SyncKey::generate(), ValidationPolicy::default());
        cfg.transfer_mode = TransferMode::Streaming;
        cfg.read_timeout = Duration::from_secs(10);
        let sink = MemorySink::new();
        let node = spawn_node(cfg, sink.clone() as std::sync::Arc<dyn RecordSink>).unwrap();

        // Send the head and the first chunk, then stall with the connection
        // open: the body is nowhere near complete.
        let mut client = TcpStream::connect(node.addr()).unwrap();
        client.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        client
            .write_all(
                b"POST /submit HTTP/1.1\r\n\
                  Host: www.example.com\r\n\
                  Transfer-Encoding: chunked\r\n\r\n\
                  6\r\npotato\r\n",
            )
            .unwrap();
        client.flush().unwrap();

        // The hop must contact the upstream and forward the first chunk while
        // the client is still mid-body. If forwarding were gated on body
        // completion, this accept/read would never finish.
        let deadline = Instant::now() + Duration::from_secs(10);
        let mut conn = loop {
            match upstream.accept() {
                Ok((conn, _)) => break conn,
                Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    assert!(
                        Instant::now() < deadline,
                        "upstream never contacted while the client was mid-body: \
forwarding is gated on completion",
                    );
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => panic!("accept: {e}"),
            }
        };
        conn.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        let mut seen = Vec::new();
        let mut buf = [0u8; 4096];
        while !seen.windows(6).any(|w| w == b"potato") {
            let n = conn.read(&mut buf).expect(
                "reading forwarded bytes while the client stalls mid-body \
(stall means forwarding is gated on completion)",
            );
            assert!(n > 0, "upstream connection closed before the first chunk arrived");
            seen.extend_from_slice(&buf[..n]);
        }
        let first_chunk_seen_at = seen.len();

        // Event order is now fixed: the upstream observed the first forwarded
        // body byte, and only after that does the client send the rest.
        client.write_all(b"3\r\nand\r\n4\r\neggs\r\n0\r\n\r\n").unwrap();
        client.flush().unwrap();

        // Drain the remainder (trailing record chunk, then terminal chunk).
        while !seen.ends_with(b"\r\n0\r\n\r\n") {
            let n = conn.read(&mut buf).expect("reading remainder");
            assert!(n > 0, "upstream closed mid-stream");
            seen.extend_from_slice(&buf[..n]);
        }

        let head_text = String::from_utf8_lossy(&seen);
        assert!(
            head_text.contains("HTTP-Sync: "),
            "forwarded head must carry the history header",
        );
        assert!(
            head_text.contains("\"length\":\"stream\""),
            "header-before-length ordering requires the stream marker, got:\n{head_text}",
        );
        assert!(
            head_text.contains("Length: 13"),
            "the counted total must ride the stream as the penultimate chunk",
        );

        conn.write_all(b"HTTP/1.1 200 OK\r\nContent-Length: 2\r\n\r\nok").unwrap();
        conn.flush().unwrap();

        let mut response = Vec::new();
        let mut tmp = [0u8; 1024];
        while !response.ends_with(b"ok") {
            match client.read(&mut tmp) {
                Ok(0) => break,
                Ok(n) => response.extend_from_slice(&tmp[..n]),
                Err(e) => panic!("client read: {e}"),
            }
        }
        assert!(response.starts_with(b"HTTP/1.1 200"), "client must see the 200");

        println!(
            "   upstream held {first_chunk_seen_at} forwarded bytes (head + first chunk) \
before the client sent its final chunk",
        );
        node.stop();
    });
}

// -------------------------------------------------------------- benchmark

/// Criterion 7: loopback round-trip overhead of the defense. (a) every
/// declared-length cell up to 1 MiB stays within 25% mean overhead over
/// 1000 iterations; (b) at a fixed 100 KiB chunked body, overhead at 10^4
/// chunks exceeds overhead at 10^2 chunks by at most 10 points.
#[test]
fn criterion_7_overhead_bounds() {
    let _g = gate();
    criterion(7, "overhead-bounds", || {
        let started = Instant::now();
        let grid = bench::acceptance_grid();
        let results = bench::run_bench(&grid).expect("bench run");
        let elapsed = started.elapsed();
        for line in bench::render_bench_table(&results).lines() {
            println!("   {line}");
        }
        println!("   measured in {elapsed:.2?}");

        for r in results.iter().filter(|r| r.chunks.is_none() && r.body_size <= 1_048_576) {
            assert!(
                r.overhead_pct <= 25.0,
                "{}: mean overhead {:.1}% exceeds 25% ({:.1}us baseline vs {:.1}us synced)",
                r.label,
                r.overhead_pct,
                r.baseline_mean_us,
                r.sync_mean_us,
            );
        }

        let chunked = |count: usize| {
            results
                .iter()
                .find(|r| r.chunks == Some(count))
                .unwrap_or_else(|| panic!("no {count}-chunk cell in the grid"))
        };
        let low = chunked(100);
        let high = chunked(10_000);
        assert!(
            high.overhead_pct <= low.overhead_pct + 10.0,
            "overhead grows with chunk count: {:.1}% at 100 chunks vs {:.1}% at 10000",
            low.overhead_pct,
            high.overhead_pct,
        );

        assert!(elapsed < Duration::from_secs(900), "benchmark took {elapsed:?}");
    });
}

// ---------------------------------------------------------- oblivious hop

fn fwd_and_recv_snapshots(chain: &Chain) -> (Vec<Vec<u8>>, Vec<Vec<u8>>) {
    let records = chain.sink.snapshot();
    let mut fwd = Vec::new();
    let mut recv = Vec::new();
    for r in records {
        if let Record::Snapshot { dir, value, .. } = r {
            match dir {
                Dir::Fwd => fwd.push(value),
                Dir::Recv => recv.push(value),
            }
        }
    }
    (fwd, recv)
}

/// Criterion 8: with an oblivious hop between two sync hops, a benign
/// request passes and the history header crosses the oblivious leg
/// byte-identical; a payload the oblivious hop splits the framing of is
/// terminated at the downstream sync hop.
#[test]
fn criterion_8_oblivious_interop() {
    let _g = gate();
    criterion(8, "oblivious-interop", || {
        let key = SyncKey::generate();
        let chain = spawn_chain(
            &[
                HopSpec::sync_preset("cl-preferring-proxy"),
                HopSpec::oblivious_preset("te-sanitizing-origin"),
                HopSpec::sync_preset("te-sanitizing-origin"),
            ],
            &key,
            &ValidationPolicy::default(),
            Duration::from_secs(3),
            true,
        )
        .unwrap();

        // Benign chunked request: passes end to end, and the single history
        // value forwarded by the front hop arrives at the aware origin with
        // not one byte changed by the middle hop.
        let benign = corpus::request(
            "POST /submit HTTP/1.1",
            &[("Host", "www.example.com"), ("Transfer-Encoding", "chunked")],
            b"6\r\npotato\r\n3\r\nand\r\n4\r\neggs\r\n0\r\n\r\n",
        );
        let verdict = drive_payload(&chain, &benign, Duration::from_secs(2)).unwrap();
        assert!(verdict.passed(), "benign chunked request failed: {verdict:?}");
        let (fwd, recv) = fwd_and_recv_snapshots(&chain);
        assert_eq!(fwd.len(), 1, "exactly one aware hop forwards history");
        assert_eq!(recv.len(), 1, "exactly one aware hop receives history");
        assert_eq!(fwd[0], recv[0], "history must tunnel byte-identical");

        // The framing-split payload: the front hop honors the declared 51
        // bytes, the oblivious middle honors the chunk stream and forwards a
        // zero-length body. The downstream sync hop (position 2 in the
        // history; oblivious hops hold no position) catches 51 vs 0.
        let verdict = drive_payload(&chain, &corpus::listing1(), Duration::from_secs(2)).unwrap();
        match verdict {
            LiveVerdict::Blocked(Some(Record::Terminate {
                hop,
                cause,
                field,
                expected,
                observed,
                ..
            })) => {
                assert_eq!(hop, 2, "terminates at the downstream sync hop");
                assert_eq!(cause, Cause::SyncInvalid);
                assert_eq!(field, Some(DiscrepancyField::Length));
                assert_eq!(expected, b"51".to_vec());
                assert_eq!(observed, b"0".to_vec());
            }
            other => panic!("expected decisive termination, got {other:?}"),
        }

        println!(
            "   history tunneled byte-identical ({} bytes); framing split caught at hop 2",
            fwd[0].len(),
        );
        chain.stop();
    });
}
