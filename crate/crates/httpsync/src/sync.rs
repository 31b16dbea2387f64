//! The synchronization layer: an authenticated record of how every previous
//! hop interpreted the request, carried in a pair of request headers.
//!
//! Each hop appends its honored path and host to the history and replaces the
//! length entry with its own honored length (only the most recent length is
//! kept so bodies can stream). The history is serialized with a canonical,
//! injective encoding and authenticated with HMAC-SHA256 under a key shared
//! by the deployment, then validated by the next hop against that hop's own
//! interpretation of the same bytes.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

/// Request header carrying the encoded processing history.
pub const SYNC_HEADER: &str = "HTTP-Sync";
/// Request header carrying the HMAC tag over the history header's value.
pub const SYNC_HMAC_HEADER: &str = "HTTP-Sync-HMAC";
/// Upper bound on an encoded history accepted or emitted by a hop.
pub const MAX_SYNC_VALUE_BYTES: usize = 8 * 1024;

/// The per-hop honored fields that must stay consistent across the chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSnapshot {
    pub path: Vec<u8>,
    pub host: Vec<u8>,
}

impl FieldSnapshot {
    pub fn new(path: impl Into<Vec<u8>>, host: impl Into<Vec<u8>>) -> Self {
        FieldSnapshot {
            path: path.into(),
            host: host.into(),
        }
    }
}

/// How a hop honored the request's length: a concrete byte count from
/// Content-Length framing (or zero for bodyless requests), or a streaming
/// body whose count is only known once the final chunk arrives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HopLength {
    Declared(u64),
    Stream,
}

impl fmt::Display for HopLength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HopLength::Declared(n) => write!(f, "{n}"),
            HopLength::Stream => f.write_str("stream"),
        }
    }
}

/// The processing history accumulated along the chain. Paths and hosts carry
/// one entry per hop; the length entry is the most recent hop's only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncHistory {
    pub hosts: Vec<Vec<u8>>,
    pub length: HopLength,
    pub paths: Vec<Vec<u8>>,
}

impl SyncHistory {
    /// Number of hops that have recorded their interpretation.
    pub fn hop_count(&self) -> usize {
        self.paths.len()
    }
}

/// Start a history at the first synchronization-aware hop.
pub fn init_history(fields: &FieldSnapshot, length: HopLength) -> SyncHistory {
    SyncHistory {
        hosts: vec![fields.host.clone()],
        length,
        paths: vec![fields.path.clone()],
    }
}

/// Extend the history with this hop's interpretation. Path and host append;
/// the length entry is replaced, since earlier counts are already verified
/// and keeping only the newest one is what lets chunked bodies stream.
pub fn append_history(history: &SyncHistory, fields: &FieldSnapshot, length: HopLength) -> SyncHistory {
    let mut next = history.clone();
    next.hosts.push(fields.host.clone());
    next.paths.push(fields.path.clone());
    next.length = length;
    next
}

/// Decode failure: the bytes are not the canonical encoding of any history.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SyncError {
    #[error("not canonical: {0}")]
    NotCanonical(&'static str),
    #[error("history lists must carry one entry per hop")]
    ListLengthMismatch,
    #[error("history must record at least one hop")]
    EmptyHistory,
    #[error("encoded history exceeds {MAX_SYNC_VALUE_BYTES} bytes")]
    ValueTooLarge,
}

fn encode_string(out: &mut Vec<u8>, bytes: &[u8]) {
    out.push(b'"');
    for &b in bytes {
        match b {
            b'"' => out.extend_from_slice(b"\\\""),
            b'\\' => out.extend_from_slice(b"\\\\"),
            0x20..=0x7e => out.push(b),
            _ => {
                out.extend_from_slice(b"\\u00");
                const HEX: &[u8; 16] = b"0123456789abcdef";
                out.push(HEX[(b >> 4) as usize]);
                out.push(HEX[(b & 0xf) as usize]);
            }
        }
    }
    out.push(b'"');
}

fn encode_string_list(out: &mut Vec<u8>, list: &[Vec<u8>]) {
    out.push(b'[');
    for (i, s) in list.iter().enumerate() {
        if i > 0 {
            out.push(b',');
        }
        encode_string(out, s);
    }
    out.push(b']');
}

/// Serialize a history to its canonical byte encoding: keys in sorted order,
/// no whitespace, and exactly one escape form per byte, so equal histories
/// encode to equal bytes and distinct histories never collide.
pub fn encode_sync(history: &SyncHistory) -> Vec<u8> {
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(b"{\"host\":");
    encode_string_list(&mut out, &history.hosts);
    out.extend_from_slice(b",\"length\":");
    match history.length {
        HopLength::Declared(n) => out.extend_from_slice(n.to_string().as_bytes()),
        HopLength::Stream => out.extend_from_slice(b"\"stream\""),
    }
    out.extend_from_slice(b",\"path\":");
    encode_string_list(&mut out, &history.paths);
    out.push(b'}');
    out
}

struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn eat(&mut self, lit: &[u8], what: &'static str) -> Result<(), SyncError> {
        if self.bytes[self.pos..].starts_with(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            Err(SyncError::NotCanonical(what))
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn next(&mut self) -> Result<u8, SyncError> {
        let b = self.peek().ok_or(SyncError::NotCanonical("truncated"))?;
        self.pos += 1;
        Ok(b)
    }

    fn parse_string(&mut self) -> Result<Vec<u8>, SyncError> {
        self.eat(b"\"", "expected string")?;
        let mut out = Vec::new();
        loop {
            match self.next()? {
                b'"' => return Ok(out),
                b'\\' => match self.next()? {
                    b'"' => out.push(b'"'),
                    b'\\' => out.push(b'\\'),
                    b'u' => {
                        self.eat(b"00", "escape outside byte range")?;
                        let hi = hex_digit(self.next()?)?;
                        let lo = hex_digit(self.next()?)?;
                        let byte = (hi << 4) | lo;
                        // Bytes with a shorter form must use it.
                        if (0x20..=0x7e).contains(&byte) {
                            return Err(SyncError::NotCanonical("needless unicode escape"));
                        }
                        out.push(byte);
                    }
                    _ => return Err(SyncError::NotCanonical("unknown escape")),
                },
                b @ 0x20..=0x7e => out.push(b),
                _ => return Err(SyncError::NotCanonical("unescaped byte in string")),
            }
        }
    }

    fn parse_string_list(&mut self) -> Result<Vec<Vec<u8>>, SyncError> {
        self.eat(b"[", "expected list")?;
        let mut out = Vec::new();
        if self.peek() == Some(b']') {
            self.pos += 1;
            return Ok(out);
        }
        loop {
            out.push(self.parse_string()?);
            match self.next()? {
                b']' => return Ok(out),
                b',' => continue,
                _ => return Err(SyncError::NotCanonical("expected , or ] in list")),
            }
        }
    }

    fn parse_length(&mut self) -> Result<HopLength, SyncError> {
        if self.peek() == Some(b'"') {
            self.eat(b"\"stream\"", "expected \"stream\"")?;
            return Ok(HopLength::Stream);
        }
        let start = self.pos;
        while self.peek().is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        let digits = &self.bytes[start..self.pos];
        if digits.is_empty() {
            return Err(SyncError::NotCanonical("expected length"));
        }
        if digits.len() > 1 && digits[0] == b'0' {
            return Err(SyncError::NotCanonical("leading zero in length"));
        }
        std::str::from_utf8(digits)
            .unwrap()
            .parse::<u64>()
            .map(HopLength::Declared)
            .map_err(|_| SyncError::NotCanonical("length out of range"))
    }
}

fn hex_digit(b: u8) -> Result<u8, SyncError> {
    match b {
        b'0'..=b'9' => Ok(b - b'0'),
        // Lowercase only: uppercase hex would give a byte two encodings.
        b'a'..=b'f' => Ok(b - b'a' + 10),
        _ => Err(SyncError::NotCanonical("bad hex digit in escape")),
    }
}

/// Parse a canonical history encoding. Anything [`encode_sync`] would not
/// have produced — reordered keys, whitespace, alternate escapes, leading
/// zeros — is rejected, so for every accepted input
/// `encode_sync(decode_sync(x)) == x`.
pub fn decode_sync(bytes: &[u8]) -> Result<SyncHistory, SyncError> {
    if bytes.len() > MAX_SYNC_VALUE_BYTES {
        return Err(SyncError::ValueTooLarge);
    }
    let mut d = Decoder { bytes, pos: 0 };
    d.eat(b"{\"host\":", "expected host key")?;
    let hosts = d.parse_string_list()?;
    d.eat(b",\"length\":", "expected length key")?;
    let length = d.parse_length()?;
    d.eat(b",\"path\":", "expected path key")?;
    let paths = d.parse_string_list()?;
    d.eat(b"}", "expected closing brace")?;
    if d.pos != bytes.len() {
        return Err(SyncError::NotCanonical("trailing bytes"));
    }
    if hosts.is_empty() || paths.is_empty() {
        return Err(SyncError::EmptyHistory);
    }
    if hosts.len() != paths.len() {
        return Err(SyncError::ListLengthMismatch);
    }
    Ok(SyncHistory { hosts, length, paths })
}

/// Key loading or generation failure.
#[derive(Debug, thiserror::Error)]
pub enum KeyError {
    #[error("reading key file: {0}")]
    Io(#[from] std::io::Error),
    #[error("key must be 64 hex characters (32 bytes), got {0} characters")]
    BadLength(usize),
    #[error("key must be hex")]
    BadHex,
}

/// Shared 256-bit HMAC key. The debug form never prints key material.
///
/// The keyed HMAC state is derived once at construction and cloned per
/// operation, so per-request tagging skips the key schedule.
#[derive(Clone)]
pub struct SyncKey {
    bytes: [u8; 32],
    keyed: Hmac<Sha256>,
}

impl PartialEq for SyncKey {
    fn eq(&self, other: &Self) -> bool {
        self.bytes == other.bytes
    }
}

impl Eq for SyncKey {}

impl fmt::Debug for SyncKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SyncKey(..)")
    }
}

impl SyncKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        let keyed = Hmac::<Sha256>::new_from_slice(&bytes).expect("hmac accepts any key length");
        SyncKey { bytes, keyed }
    }

    pub fn from_hex(s: &str) -> Result<Self, KeyError> {
        let s = s.trim();
        if s.len() != 64 {
            return Err(KeyError::BadLength(s.len()));
        }
        let raw = hex::decode(s).map_err(|_| KeyError::BadHex)?;
        Ok(Self::from_bytes(raw.try_into().unwrap()))
    }

    /// Load from a key file: 64 hex characters, optionally newline-terminated.
    pub fn from_file(path: &Path) -> Result<Self, KeyError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_hex(&text)
    }

    /// Generate a fresh random key from the operating system RNG.
    pub fn generate() -> Self {
        use rand::RngCore;
        let mut bytes = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut bytes);
        Self::from_bytes(bytes)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.bytes)
    }

    /// Write the key as a hex line, owner-readable only.
    pub fn write_to_file(&self, path: &Path) -> Result<(), KeyError> {
        let mut opts = std::fs::OpenOptions::new();
        opts.write(true).create(true).truncate(true);
        #[cfg(unix)]
        {
            use std::os::unix::fs::OpenOptionsExt;
            opts.mode(0o600);
        }
        let mut f = opts.open(path)?;
        f.write_all(self.to_hex().as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

#[cfg(test)]
fn hmac_hex(key: &[u8], message: &[u8]) -> String {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(message);
    hex::encode(mac.finalize().into_bytes())
}

/// HMAC-SHA256 over the encoded history, as 64 lowercase hex characters.
pub fn compute_hmac(key: &SyncKey, value: &[u8]) -> String {
    let mut mac = key.keyed.clone();
    mac.update(value);
    hex::encode(mac.finalize().into_bytes())
}

/// Check a received tag against the encoded history. The tag must be exactly
/// the 64-lowercase-hex form [`compute_hmac`] emits; comparison of the
/// underlying MAC is constant-time.
pub fn verify_hmac(key: &SyncKey, value: &[u8], tag: &[u8]) -> bool {
    if tag.len() != 64 || !tag.iter().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
        return false;
    }
    let raw = hex::decode(tag).expect("checked hex");
    let mut mac = key.keyed.clone();
    mac.update(value);
    mac.verify_slice(&raw).is_ok()
}

/// Field a transition rule may license a change on. Length is deliberately
/// not representable: a length change is never legitimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleField {
    Path,
    Host,
}

/// Declares that the hop at 1-based position `at_hop` is allowed to have
/// rewritten `field` from `from` to `to` (observed at position `at_hop + 1`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRule {
    pub field: RuleField,
    pub at_hop: usize,
    pub from: String,
    pub to: String,
}

/// Validation policy: with no rules, any difference between adjacent
/// observations is a discrepancy; each rule licenses exactly one expected
/// rewrite.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationPolicy {
    #[serde(default)]
    pub rules: Vec<TransitionRule>,
}

impl ValidationPolicy {
    /// Bitwise equality across all hops, no licensed rewrites.
    pub fn strict() -> Self {
        ValidationPolicy::default()
    }

    pub fn with_rules(rules: Vec<TransitionRule>) -> Self {
        ValidationPolicy { rules }
    }

    fn licenses(&self, field: RuleField, at_hop: usize, from: &[u8], to: &[u8]) -> bool {
        self.rules.iter().any(|r| {
            r.field == field
                && r.at_hop == at_hop
                && r.from.as_bytes() == from
                && r.to.as_bytes() == to
        })
    }
}

/// Field named in a discrepancy report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscrepancyField {
    Path,
    Host,
    Length,
}

impl fmt::Display for DiscrepancyField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiscrepancyField::Path => "path",
            DiscrepancyField::Host => "host",
            DiscrepancyField::Length => "length",
        })
    }
}

/// A detected disagreement: the value recorded at `at_hop` versus the value
/// at the following position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Discrepancy {
    pub field: DiscrepancyField,
    pub at_hop: usize,
    pub expected: Vec<u8>,
    pub observed: Vec<u8>,
}

/// What the body phase must still check before the request may be considered
/// synchronized. Path and host are settled at header time; the length
/// comparison can involve a count that only exists once the body has passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthDuty {
    /// Nothing left: lengths were comparable at header time and matched.
    None,
    /// Our framing streams but the previous hop declared a count; the bytes
    /// we relay must total exactly this.
    VerifyCountEquals(u64),
    /// The previous hop streamed too and embedded its count in the stream;
    /// strip that record and check it against our own count.
    StripAndVerifyRecord,
}

/// Outcome of validating our own interpretation against the carried history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationOutcome {
    Valid { length_duty: LengthDuty },
    Invalid(Discrepancy),
}

/// Compare this hop's honored fields against every prior hop's. Adjacent
/// observations must be bitwise equal unless a rule licenses that exact
/// rewrite. Length is compared to the previous hop's entry only (earlier
/// ones were checked upstream) and no rule can waive it.
pub fn validate_sync(
    history: &SyncHistory,
    own: &FieldSnapshot,
    own_length: HopLength,
    policy: &ValidationPolicy,
) -> ValidationOutcome {
    let check_chain = |field: RuleField,
                       recorded: &[Vec<u8>],
                       observed_now: &[u8]|
     -> Option<Discrepancy> {
        let mut seq: Vec<&[u8]> = recorded.iter().map(|v| v.as_slice()).collect();
        seq.push(observed_now);
        for i in 0..seq.len() - 1 {
            if seq[i] != seq[i + 1] && !policy.licenses(field, i + 1, seq[i], seq[i + 1]) {
                return Some(Discrepancy {
                    field: match field {
                        RuleField::Path => DiscrepancyField::Path,
                        RuleField::Host => DiscrepancyField::Host,
                    },
                    at_hop: i + 1,
                    expected: seq[i].to_vec(),
                    observed: seq[i + 1].to_vec(),
                });
            }
        }
        None
    };

    if let Some(d) = check_chain(RuleField::Path, &history.paths, &own.path) {
        return ValidationOutcome::Invalid(d);
    }
    if let Some(d) = check_chain(RuleField::Host, &history.hosts, &own.host) {
        return ValidationOutcome::Invalid(d);
    }

    let length_mismatch = |expected: HopLength, observed: HopLength| {
        ValidationOutcome::Invalid(Discrepancy {
            field: DiscrepancyField::Length,
            at_hop: history.hop_count(),
            expected: expected.to_string().into_bytes(),
            observed: observed.to_string().into_bytes(),
        })
    };

    match (history.length, own_length) {
        (HopLength::Declared(m), HopLength::Declared(n)) => {
            if m == n {
                ValidationOutcome::Valid { length_duty: LengthDuty::None }
            } else {
                length_mismatch(HopLength::Declared(m), HopLength::Declared(n))
            }
        }
        (HopLength::Declared(m), HopLength::Stream) => ValidationOutcome::Valid {
            length_duty: LengthDuty::VerifyCountEquals(m),
        },
        (HopLength::Stream, HopLength::Stream) => ValidationOutcome::Valid {
            length_duty: LengthDuty::StripAndVerifyRecord,
        },
        // The previous hop streamed (its count rides inside a chunked body)
        // but we framed the body by a declared count, so the embedded record
        // cannot be located by chunk boundary. The transports are out of
        // sync; fail closed.
        (HopLength::Stream, HopLength::Declared(n)) => {
            length_mismatch(HopLength::Stream, HopLength::Declared(n))
        }
    }
}
