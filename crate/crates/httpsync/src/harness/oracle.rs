//! Brute-force verdict oracle for two-hop chains.
//!
//! Given one payload and an ordered personality pair, the oracle computes
//! each hop's honored tuple directly and predicts pass/blocked from first
//! principles: tuples must agree field by field, and the second hop must be
//! able to finish reading the body bytes the first hop would actually
//! forward. It deliberately reimplements chunk decoding rather than calling
//! the transport code it is checking.

use crate::wire::{parse_request, FramingDecision, ParserPersonality, RawRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Blocked,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub verdict: Verdict,
    /// Human-readable cause, for diagnostics only — agreement is judged on
    /// the verdict.
    pub reason: String,
}

impl Prediction {
    fn pass() -> Self {
        Prediction { verdict: Verdict::Pass, reason: "tuples agree, body complete".into() }
    }

    fn blocked(reason: impl Into<String>) -> Self {
        Prediction { verdict: Verdict::Blocked, reason: reason.into() }
    }
}

enum ChunkDecode {
    Complete { payload: Vec<u8> },
    /// Ran out of bytes mid-stream: a live hop would block waiting for more.
    Incomplete,
    Malformed,
}

/// Minimal chunked decoder, independent of the production body reader.
fn decode_chunked(bytes: &[u8]) -> ChunkDecode {
    fn find_crlf(bytes: &[u8], from: usize) -> Option<usize> {
        bytes[from..]
            .windows(2)
            .position(|w| w == b"\r\n")
            .map(|p| from + p)
    }
    let mut i = 0;
    let mut payload = Vec::new();
    loop {
        let Some(line_end) = find_crlf(bytes, i) else { return ChunkDecode::Incomplete };
        let line = &bytes[i..line_end];
        let size_part = line.split(|&b| b == b';').next().unwrap_or(b"");
        if size_part.is_empty() || size_part.len() > 16 {
            return ChunkDecode::Malformed;
        }
        let Ok(size_str) = std::str::from_utf8(size_part) else { return ChunkDecode::Malformed };
        let Ok(size) = u64::from_str_radix(size_str, 16) else { return ChunkDecode::Malformed };
        i = line_end + 2;
        if size == 0 {
            loop {
                let Some(le) = find_crlf(bytes, i) else { return ChunkDecode::Incomplete };
                if le == i {
                    return ChunkDecode::Complete { payload };
                }
                if !bytes[i..le].contains(&b':') {
                    return ChunkDecode::Malformed;
                }
                i = le + 2;
            }
        }
        let size = size as usize;
        if bytes.len() < i + size + 2 {
            return ChunkDecode::Incomplete;
        }
        payload.extend_from_slice(&bytes[i..i + size]);
        if &bytes[i + size..i + size + 2] != b"\r\n" {
            return ChunkDecode::Malformed;
        }
        i += size + 2;
    }
}

/// Predict the verdict of `payload` through a two-hop sync chain where the
/// first hop parses with `front` and the origin parses with `back`. Both
/// hops stream.
pub fn predict_two_hop(
    payload: &[u8],
    front: &ParserPersonality,
    back: &ParserPersonality,
) -> Prediction {
    let Some(head_end) = payload.windows(4).position(|w| w == b"\r\n\r\n").map(|p| p + 4)
    else {
        return Prediction::blocked("no head terminator");
    };
    let head = RawRequest::new(payload[..head_end].to_vec());
    let body = &payload[head_end..];

    let first = match parse_request(&head, front) {
        Ok(r) => r,
        Err(e) => return Prediction::blocked(format!("hop 1 parse: {e}")),
    };

    // What the first hop forwards as the body, and the length it records.
    enum Forwarded {
        /// Raw bytes relayed under a declared count.
        Declared(Vec<u8>),
        /// Chunk payload relayed as a fresh chunk stream plus length record.
        Stream,
    }
    let forwarded = match first.framing {
        FramingDecision::NoBody => Forwarded::Declared(Vec::new()),
        FramingDecision::ContentLength(n) => {
            if (body.len() as u64) < n {
                return Prediction::blocked("hop 1 stalls: declared body incomplete");
            }
            Forwarded::Declared(body[..n as usize].to_vec())
        }
        FramingDecision::Chunked => match decode_chunked(body) {
            ChunkDecode::Complete { .. } => Forwarded::Stream,
            ChunkDecode::Incomplete => {
                return Prediction::blocked("hop 1 stalls: chunk stream incomplete")
            }
            ChunkDecode::Malformed => return Prediction::blocked("hop 1 framing violation"),
        },
    };

    // The second hop parses the same head (sync headers are additions, not
    // edits, and cannot change what a personality honors).
    let second = match parse_request(&head, back) {
        Ok(r) => r,
        Err(e) => return Prediction::blocked(format!("hop 2 parse: {e}")),
    };

    if first.honored_path != second.honored_path {
        return Prediction::blocked(format!(
            "path: {:?} vs {:?}",
            String::from_utf8_lossy(&first.honored_path),
            String::from_utf8_lossy(&second.honored_path),
        ));
    }
    if first.honored_host != second.honored_host {
        return Prediction::blocked(format!(
            "host: {:?} vs {:?}",
            String::from_utf8_lossy(&first.honored_host),
            String::from_utf8_lossy(&second.honored_host),
        ));
    }

    // Length agreement, including whether hop 2 can finish reading what hop 1
    // actually sends.
    match (&forwarded, second.framing) {
        (Forwarded::Declared(sent), FramingDecision::NoBody) => {
            if sent.is_empty() {
                Prediction::pass()
            } else {
                Prediction::blocked(format!("length: {} vs 0", sent.len()))
            }
        }
        (Forwarded::Declared(sent), FramingDecision::ContentLength(k)) => {
            if sent.len() as u64 == k {
                Prediction::pass()
            } else {
                Prediction::blocked(format!("length: {} vs {}", sent.len(), k))
            }
        }
        (Forwarded::Declared(sent), FramingDecision::Chunked) => {
            // Hop 2 re-reads the declared bytes as a chunk stream.
            match decode_chunked(sent) {
                ChunkDecode::Complete { payload } => {
                    if payload.len() == sent.len() {
                        // Impossible in practice (chunk overhead is nonzero),
                        // but the comparison is what matters.
                        Prediction::pass()
                    } else {
                        Prediction::blocked(format!(
                            "length: declared {} vs chunk count {}",
                            sent.len(),
                            payload.len()
                        ))
                    }
                }
                ChunkDecode::Incomplete => {
                    Prediction::blocked("hop 2 stalls: chunk stream incomplete")
                }
                ChunkDecode::Malformed => Prediction::blocked("hop 2 framing violation"),
            }
        }
        // Hop 1 streams with an embedded record; a declared-count reader at
        // hop 2 cannot locate it. The defense fails closed here.
        (Forwarded::Stream, FramingDecision::NoBody | FramingDecision::ContentLength(_)) => {
            Prediction::blocked("length: stream then declared")
        }
        // Both stream: the record is injected and stripped by construction,
        // and the counts are the same bytes counted twice.
        (Forwarded::Stream, FramingDecision::Chunked) => Prediction::pass(),
    }
}
