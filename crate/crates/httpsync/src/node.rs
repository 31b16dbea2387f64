//! The per-hop node: accept a connection, parse with this hop's personality,
//! verify and extend the synchronization history, and forward — or terminate
//! the connection on any discrepancy. Origin mode validates and answers with
//! a deterministic echo instead of forwarding. Oblivious mode forwards
//! without touching sync headers, standing in for infrastructure that has
//! never heard of the scheme.
//!
//! Nodes emit single-line machine-readable records (`READY`, `REQUEST`,
//! `SNAPSHOT`, `TERMINATE`) through a [`RecordSink`]; the CLI prints them to
//! stdout and the harness parses them back.

use std::fmt;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::body::{
    BodyEvent, BodyReader, ChunkedWriter, FramingError, LengthStripper, MAX_BUFFERED_BODY_BYTES,
};
use crate::sync::{
    append_history, compute_hmac, decode_sync, encode_sync, init_history, validate_sync,
    verify_hmac, DiscrepancyField, FieldSnapshot, HopLength, LengthDuty, SyncHistory, SyncKey,
    ValidationOutcome, ValidationPolicy, MAX_SYNC_VALUE_BYTES, SYNC_HEADER, SYNC_HMAC_HEADER,
};
use crate::wire::{
    parse_request, serialize_head_filtered, FramingDecision, Header, ParserPersonality,
    RawRequest,
    Request, MAX_HEAD_BYTES,
};

/// Whether a hop participates in synchronization or merely relays.
#[derive(Clone)]
pub enum SyncMode {
    Enabled { key: SyncKey, policy: ValidationPolicy },
    Oblivious,
}

impl SyncMode {
    pub fn is_enabled(&self) -> bool {
        matches!(self, SyncMode::Enabled { .. })
    }
}

/// Whether bodies are relayed as they arrive or collected first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferMode {
    Streaming,
    Buffering,
}

impl TransferMode {
    pub fn label(&self) -> &'static str {
        match self {
            TransferMode::Streaming => "streaming",
            TransferMode::Buffering => "buffering",
        }
    }
}

/// Reaction to a detected discrepancy (or any other fatal condition).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnInvalid {
    CloseConnection,
    Respond400ThenClose,
}

/// Exact-match path rewrite applied after validation, standing in for a
/// gateway that legitimately rewrites URLs. The hop records the path it
/// honored (pre-rewrite); the next hop needs a transition rule licensing the
/// change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathRewrite {
    pub from: Vec<u8>,
    pub to: Vec<u8>,
}

/// Application-layer validation hook, invoked at the origin with the full
/// accumulated history (own entry included) after transport-level checks
/// pass. Returning an error terminates the connection.
pub type AppHook = Arc<dyn Fn(&SyncHistory) -> Result<(), String> + Send + Sync>;

/// Everything a node needs to serve. Shared immutably across connections.
#[derive(Clone)]
pub struct NodeConfig {
    pub listen: SocketAddr,
    /// `None` makes this node the origin.
    pub upstream: Option<SocketAddr>,
    pub personality: ParserPersonality,
    /// Name shown in the READY line (preset name or "custom").
    pub personality_label: String,
    pub sync: SyncMode,
    pub transfer_mode: TransferMode,
    pub on_invalid: OnInvalid,
    /// Emit SNAPSHOT (and proxy REQUEST) records.
    pub verbose: bool,
    pub rewrite_path: Option<PathRewrite>,
    pub app_hook: Option<AppHook>,
    pub read_timeout: Duration,
}

impl NodeConfig {
    fn base(personality: ParserPersonality) -> Self {
        NodeConfig {
            listen: "127.0.0.1:0".parse().unwrap(),
            upstream: None,
            personality,
            personality_label: "custom".to_string(),
            sync: SyncMode::Oblivious,
            transfer_mode: TransferMode::Streaming,
            on_invalid: OnInvalid::CloseConnection,
            verbose: false,
            rewrite_path: None,
            app_hook: None,
            read_timeout: Duration::from_secs(10),
        }
    }

    /// A forwarding hop.
    pub fn proxy(upstream: SocketAddr, personality: ParserPersonality) -> Self {
        NodeConfig { upstream: Some(upstream), ..Self::base(personality) }
    }

    /// A terminal hop that answers instead of forwarding.
    pub fn origin(personality: ParserPersonality) -> Self {
        Self::base(personality)
    }

    pub fn with_sync(mut self, key: SyncKey, policy: ValidationPolicy) -> Self {
        self.sync = SyncMode::Enabled { key, policy };
        self
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.personality_label = label.to_string();
        self
    }

    pub fn is_origin(&self) -> bool {
        self.upstream.is_none()
    }
}

/// Why a connection was terminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cause {
    /// The bytes were not an acceptable request under this personality
    /// (includes strict personalities rejecting ambiguity).
    ParseError,
    /// Sync headers present but not authentic: bad or missing tag, duplicate
    /// headers, an orphaned tag, or a non-canonical history encoding.
    ForgedHistory,
    /// Authentic history disagreeing with this hop's interpretation.
    SyncInvalid,
    /// A promised in-stream length record was missing or malformed.
    StripError,
    /// Body framing violation on the wire.
    FramingError,
    /// The origin's application-layer hook rejected the history.
    AppPolicy,
    /// Appending this hop's entry would exceed the history size cap.
    HistoryOverflow,
    UpstreamUnreachable,
    UpstreamClosed,
}

impl Cause {
    pub fn code(&self) -> &'static str {
        match self {
            Cause::ParseError => "parse-error",
            Cause::ForgedHistory => "forged-history",
            Cause::SyncInvalid => "sync-invalid",
            Cause::StripError => "strip-error",
            Cause::FramingError => "framing-error",
            Cause::AppPolicy => "app-policy",
            Cause::HistoryOverflow => "history-overflow",
            Cause::UpstreamUnreachable => "upstream-unreachable",
            Cause::UpstreamClosed => "upstream-closed",
        }
    }

    pub fn from_code(code: &str) -> Option<Cause> {
        let c = match code {
            "parse-error" => Cause::ParseError,
            "forged-history" => Cause::ForgedHistory,
            "sync-invalid" => Cause::SyncInvalid,
            "strip-error" => Cause::StripError,
            "framing-error" => Cause::FramingError,
            "app-policy" => Cause::AppPolicy,
            "history-overflow" => Cause::HistoryOverflow,
            "upstream-unreachable" => Cause::UpstreamUnreachable,
            "upstream-closed" => Cause::UpstreamClosed,
            _ => return None,
        };
        Some(c)
    }

    /// Whether this cause is a verdict about the request itself, as opposed
    /// to collateral damage from a peer already having terminated.
    pub fn is_decisive(&self) -> bool {
        !matches!(self, Cause::UpstreamUnreachable | Cause::UpstreamClosed)
    }
}

/// Direction of a SNAPSHOT record: the history as received or as forwarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dir {
    Recv,
    Fwd,
}

impl Dir {
    fn label(&self) -> &'static str {
        match self {
            Dir::Recv => "recv",
            Dir::Fwd => "fwd",
        }
    }
}

/// One machine-readable log record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Ready {
        addr: SocketAddr,
        origin: bool,
        sync: bool,
        mode: TransferMode,
        personality: String,
    },
    /// Emitted by the origin for every request it answers (and by proxies
    /// when verbose).
    Request {
        method: String,
        target: Vec<u8>,
        host: Vec<u8>,
    },
    /// The raw HTTP-Sync value at a hop boundary (verbose only).
    Snapshot { hop: usize, dir: Dir, value: Vec<u8> },
    Terminate {
        hop: usize,
        cause: Cause,
        field: Option<DiscrepancyField>,
        expected: Vec<u8>,
        observed: Vec<u8>,
    },
}

/// Values inside record lines are space-free tokens: visible ASCII except
/// `%` stays literal, everything else is percent-encoded. Empty or absent
/// values print as `-`.
pub fn encode_token(bytes: &[u8]) -> String {
    if bytes.is_empty() {
        return "-".to_string();
    }
    let mut out = String::with_capacity(bytes.len());
    for &b in bytes {
        if (0x21..=0x7e).contains(&b) && b != b'%' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

pub fn decode_token(s: &str) -> Vec<u8> {
    if s == "-" {
        return Vec::new();
    }
    let raw = s.as_bytes();
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        if raw[i] == b'%' && i + 2 < raw.len() {
            if let Ok(b) = u8::from_str_radix(&s[i + 1..i + 3], 16) {
                out.push(b);
                i += 3;
                continue;
            }
        }
        out.push(raw[i]);
        i += 1;
    }
    out
}

fn field_label(f: Option<DiscrepancyField>) -> String {
    f.map(|f| f.to_string()).unwrap_or_else(|| "-".to_string())
}

impl Record {
    pub fn to_line(&self) -> String {
        match self {
            Record::Ready { addr, origin, sync, mode, personality } => format!(
                "READY addr={} role={} sync={} mode={} personality={}",
                addr,
                if *origin { "origin" } else { "proxy" },
                if *sync { "on" } else { "off" },
                mode.label(),
                encode_token(personality.as_bytes()),
            ),
            Record::Request { method, target, host } => format!(
                "REQUEST method={} target={} host={}",
                encode_token(method.as_bytes()),
                encode_token(target),
                encode_token(host),
            ),
            Record::Snapshot { hop, dir, value } => format!(
                "SNAPSHOT hop={} dir={} value={}",
                hop,
                dir.label(),
                encode_token(value),
            ),
            Record::Terminate { hop, cause, field, expected, observed } => format!(
                "TERMINATE hop={} cause={} field={} expected={} observed={}",
                hop,
                cause.code(),
                field_label(*field),
                encode_token(expected),
                encode_token(observed),
            ),
        }
    }

    /// Parse a line produced by [`Record::to_line`]. Unknown or malformed
    /// lines yield `None`.
    pub fn parse(line: &str) -> Option<Record> {
        let mut parts = line.split(' ');
        let kind = parts.next()?;
        let mut kv = std::collections::HashMap::new();
        for p in parts {
            let (k, v) = p.split_once('=')?;
            kv.insert(k, v);
        }
        match kind {
            "READY" => Some(Record::Ready {
                addr: kv.get("addr")?.parse().ok()?,
                origin: *kv.get("role")? == "origin",
                sync: *kv.get("sync")? == "on",
                mode: match *kv.get("mode")? {
                    "streaming" => TransferMode::Streaming,
                    "buffering" => TransferMode::Buffering,
                    _ => return None,
                },
                personality: String::from_utf8(decode_token(kv.get("personality")?)).ok()?,
            }),
            "REQUEST" => Some(Record::Request {
                method: String::from_utf8(decode_token(kv.get("method")?)).ok()?,
                target: decode_token(kv.get("target")?),
                host: decode_token(kv.get("host")?),
            }),
            "SNAPSHOT" => Some(Record::Snapshot {
                hop: kv.get("hop")?.parse().ok()?,
                dir: match *kv.get("dir")? {
                    "recv" => Dir::Recv,
                    "fwd" => Dir::Fwd,
                    _ => return None,
                },
                value: decode_token(kv.get("value")?),
            }),
            "TERMINATE" => Some(Record::Terminate {
                hop: kv.get("hop")?.parse().ok()?,
                cause: Cause::from_code(kv.get("cause")?)?,
                field: match *kv.get("field")? {
                    "-" => None,
                    "path" => Some(DiscrepancyField::Path),
                    "host" => Some(DiscrepancyField::Host),
                    "length" => Some(DiscrepancyField::Length),
                    _ => return None,
                },
                expected: decode_token(kv.get("expected")?),
                observed: decode_token(kv.get("observed")?),
            }),
            _ => None,
        }
    }
}

/// Where a node's records go.
pub trait RecordSink: Send + Sync {
    fn emit(&self, record: Record);
}

/// Prints records as lines, flushing each so process supervisors see them
/// promptly.
pub struct StdoutSink;

impl RecordSink for StdoutSink {
    fn emit(&self, record: Record) {
        let mut out = io::stdout().lock();
        let _ = writeln!(out, "{}", record.to_line());
        let _ = out.flush();
    }
}

/// Collects records in memory for in-process harnesses and tests.
#[derive(Default)]
pub struct MemorySink {
    records: Mutex<Vec<Record>>,
}

impl MemorySink {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn snapshot(&self) -> Vec<Record> {
        self.records.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl RecordSink for MemorySink {
    fn emit(&self, record: Record) {
        self.records.lock().unwrap().push(record);
    }
}

/// A running node. Dropping (or calling [`NodeHandle::stop`]) shuts the
/// accept loop down; in-flight connections finish on their own.
pub struct NodeHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl NodeHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Poke the listener so a blocking accept returns.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        if self.accept_thread.is_some() {
            self.shutdown();
        }
    }
}

/// Start a node on its configured address (port 0 picks a free one) and
/// serve in background threads. The READY record carries the actual address.
pub fn spawn_node(cfg: NodeConfig, sink: Arc<dyn RecordSink>) -> io::Result<NodeHandle> {
    let listener = TcpListener::bind(cfg.listen)?;
    let addr = listener.local_addr()?;
    emit_ready(&cfg, addr, &sink);
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = stop.clone();
    let cfg = Arc::new(cfg);
    let accept_thread = std::thread::spawn(move || {
        accept_loop(listener, cfg, sink, stop_flag);
    });
    Ok(NodeHandle { addr, stop, accept_thread: Some(accept_thread) })
}

/// Serve forever on the current thread (the CLI entry point).
pub fn run_node(cfg: NodeConfig, sink: Arc<dyn RecordSink>) -> io::Result<()> {
    let listener = TcpListener::bind(cfg.listen)?;
    emit_ready(&cfg, listener.local_addr()?, &sink);
    accept_loop(listener, Arc::new(cfg), sink, Arc::new(AtomicBool::new(false)));
    Ok(())
}

fn emit_ready(cfg: &NodeConfig, addr: SocketAddr, sink: &Arc<dyn RecordSink>) {
    sink.emit(Record::Ready {
        addr,
        origin: cfg.is_origin(),
        sync: cfg.sync.is_enabled(),
        mode: cfg.transfer_mode,
        personality: cfg.personality_label.clone(),
    });
}

fn accept_loop(
    listener: TcpListener,
    cfg: Arc<NodeConfig>,
    sink: Arc<dyn RecordSink>,
    stop: Arc<AtomicBool>,
) {
    for conn in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = conn else { continue };
        let cfg = cfg.clone();
        let sink = sink.clone();
        std::thread::spawn(move || serve_connection(stream, cfg, sink));
    }
}

enum Step {
    Continue,
    Close,
}

struct Upstream {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

struct Conn {
    cfg: Arc<NodeConfig>,
    sink: Arc<dyn RecordSink>,
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    upstream: Option<Upstream>,
}

fn serve_connection(stream: TcpStream, cfg: Arc<NodeConfig>, sink: Arc<dyn RecordSink>) {
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(cfg.read_timeout));
    let Ok(write_half) = stream.try_clone() else { return };
    let mut conn = Conn {
        cfg,
        sink,
        reader: BufReader::new(stream),
        writer: write_half,
        upstream: None,
    };
    loop {
        match read_head(&mut conn.reader) {
            Ok(Some(head)) => match conn.handle_one(head) {
                Step::Continue => continue,
                Step::Close => break,
            },
            // Clean close, idle timeout, or mid-head disconnect: just drop.
            Ok(None) | Err(_) => break,
        }
    }
    let _ = conn.writer.shutdown(Shutdown::Both);
    if let Some(up) = conn.upstream.take() {
        let _ = up.writer.shutdown(Shutdown::Both);
    }
}

/// Read one message head (through the blank line), leaving body bytes
/// unconsumed. `None` on clean EOF before any byte.
pub(crate) fn read_head<R: BufRead>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut head: Vec<u8> = Vec::with_capacity(512);
    loop {
        let buf = r.fill_buf()?;
        if buf.is_empty() {
            return if head.is_empty() {
                Ok(None)
            } else {
                Err(io::ErrorKind::UnexpectedEof.into())
            };
        }
        let mut used = 0;
        for &b in buf {
            head.push(b);
            used += 1;
            if head.ends_with(b"\r\n\r\n") {
                r.consume(used);
                return Ok(Some(head));
            }
        }
        r.consume(used);
        if head.len() > MAX_HEAD_BYTES + 4 {
            // Oversized: hand it to the parser, which reports the cap breach.
            return Ok(Some(head));
        }
    }
}

fn hop_length_of(framing: FramingDecision) -> HopLength {
    match framing {
        FramingDecision::NoBody => HopLength::Declared(0),
        FramingDecision::ContentLength(n) => HopLength::Declared(n),
        FramingDecision::Chunked => HopLength::Stream,
    }
}

/// Best-effort hop index when the request could not be processed normally:
/// scan the raw head for a decodable history and use its length, else assume
/// first hop.
fn best_effort_hop(raw: &[u8]) -> usize {
    for line in raw.split(|&b| b == b'\n') {
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        if let Some(colon) = line.iter().position(|&b| b == b':') {
            if line[..colon].eq_ignore_ascii_case(SYNC_HEADER.as_bytes()) {
                let mut value = &line[colon + 1..];
                while value.first() == Some(&b' ') || value.first() == Some(&b'\t') {
                    value = &value[1..];
                }
                if let Ok(h) = decode_sync(value) {
                    return h.hop_count() + 1;
                }
            }
        }
    }
    1
}

enum BodyPlan {
    None,
    /// Relay exactly this many raw bytes.
    Raw(u64),
    /// Decode chunks and re-encode, injecting our length record at the end.
    Stream,
    /// Already drained; send as-is (headers adjusted by the caller).
    Buffered(Vec<u8>),
}

impl Conn {
    fn handle_one(&mut self, head: Vec<u8>) -> Step {
        let raw = RawRequest::new(head);
        let req = match parse_request(&raw, &self.cfg.personality) {
            Ok(r) => r,
            Err(e) => {
                let hop = if self.cfg.sync.is_enabled() { best_effort_hop(raw.as_bytes()) } else { 0 };
                return self.terminate(Record::Terminate {
                    hop,
                    cause: Cause::ParseError,
                    field: None,
                    expected: Vec::new(),
                    observed: e.to_string().into_bytes(),
                });
            }
        };
        match self.cfg.sync.clone() {
            SyncMode::Oblivious => {
                if self.cfg.is_origin() {
                    self.oblivious_origin(&req)
                } else {
                    self.oblivious_forward(&raw, &req)
                }
            }
            SyncMode::Enabled { key, policy } => self.sync_process(&req, &key, &policy),
        }
    }

    // ---- sync-aware path -------------------------------------------------

    fn sync_process(&mut self, req: &Request, key: &SyncKey, policy: &ValidationPolicy) -> Step {
        let values: Vec<&Header> = req.headers_named(SYNC_HEADER).collect();
        let tags: Vec<&Header> = req.headers_named(SYNC_HMAC_HEADER).collect();
        let incoming: Option<(SyncHistory, Vec<u8>)> = match (values.len(), tags.len()) {
            (0, 0) => None,
            (1, 1) => {
                let value = &values[0].value;
                let tag = &tags[0].value;
                if !verify_hmac(key, value, tag) {
                    return self.terminate(Record::Terminate {
                        hop: decode_sync(value).map(|h| h.hop_count() + 1).unwrap_or(1),
                        cause: Cause::ForgedHistory,
                        field: None,
                        expected: Vec::new(),
                        observed: b"hmac-verification-failed".to_vec(),
                    });
                }
                match decode_sync(value) {
                    Ok(h) => Some((h, value.clone())),
                    Err(e) => {
                        return self.terminate(Record::Terminate {
                            hop: 1,
                            cause: Cause::ForgedHistory,
                            field: None,
                            expected: Vec::new(),
                            observed: e.to_string().into_bytes(),
                        })
                    }
                }
            }
            (v, t) => {
                // Duplicates or an orphaned half of the pair: never
                // reinitialize, never pick one — refuse.
                return self.terminate(Record::Terminate {
                    hop: values
                        .first()
                        .and_then(|h| decode_sync(&h.value).ok())
                        .map(|h| h.hop_count() + 1)
                        .unwrap_or(1),
                    cause: Cause::ForgedHistory,
                    field: None,
                    expected: Vec::new(),
                    observed: format!("sync-header-count-{v}-{t}").into_bytes(),
                });
            }
        };

        let hop = incoming.as_ref().map(|(h, _)| h.hop_count() + 1).unwrap_or(1);
        let own = req.honored_fields();
        let own_length = hop_length_of(req.framing);

        if self.cfg.verbose {
            if let Some((_, value)) = &incoming {
                self.sink.emit(Record::Snapshot { hop, dir: Dir::Recv, value: value.clone() });
            }
        }

        let duty = match &incoming {
            None => LengthDuty::None,
            Some((history, _)) => match validate_sync(history, &own, own_length, policy) {
                ValidationOutcome::Valid { length_duty } => length_duty,
                ValidationOutcome::Invalid(d) => {
                    return self.terminate(Record::Terminate {
                        hop,
                        cause: Cause::SyncInvalid,
                        field: Some(d.field),
                        expected: d.expected,
                        observed: d.observed,
                    });
                }
            },
        };

        if self.cfg.is_origin() {
            self.sync_origin(req, incoming.map(|(h, _)| h), hop, own, duty, key)
        } else {
            self.sync_forward(req, incoming.map(|(h, _)| h), hop, own, duty, key)
        }
    }

    fn sync_forward(
        &mut self,
        req: &Request,
        incoming: Option<SyncHistory>,
        hop: usize,
        own: FieldSnapshot,
        duty: LengthDuty,
        key: &SyncKey,
    ) -> Step {
        if let Some(step) = self.ensure_upstream(hop) {
            return step;
        }

        let mut out_target = req.target.clone();
        if let Some(rw) = &self.cfg.rewrite_path {
            if own.path == rw.from {
                out_target = rw.to.clone();
            }
        }

        // Decide the outgoing transport. Buffering drains (and fully checks)
        // the body before a single byte goes upstream; a buffered chunked
        // body is converted to a declared length on the way out.
        let mut convert_to_declared: Option<String> = None;
        let plan = match (req.framing, self.cfg.transfer_mode) {
            (FramingDecision::NoBody, _) => BodyPlan::None,
            (FramingDecision::ContentLength(n), TransferMode::Streaming) => BodyPlan::Raw(n),
            (FramingDecision::ContentLength(n), TransferMode::Buffering) => {
                match self.drain_counted(n, true, hop) {
                    Ok((body, _)) => BodyPlan::Buffered(body),
                    Err(step) => return step,
                }
            }
            (FramingDecision::Chunked, TransferMode::Streaming) => BodyPlan::Stream,
            (FramingDecision::Chunked, TransferMode::Buffering) => {
                let body = match self.drain_chunked(duty, hop, true) {
                    Ok((body, _)) => body,
                    Err(step) => return step,
                };
                convert_to_declared = Some(body.len().to_string());
                BodyPlan::Buffered(body)
            }
        };

        let out_length = match &plan {
            BodyPlan::None => HopLength::Declared(0),
            BodyPlan::Raw(n) => HopLength::Declared(*n),
            BodyPlan::Buffered(b) => HopLength::Declared(b.len() as u64),
            BodyPlan::Stream => HopLength::Stream,
        };

        let out_history = match &incoming {
            Some(h) => append_history(h, &own, out_length),
            None => init_history(&own, out_length),
        };
        let value = encode_sync(&out_history);
        if value.len() > MAX_SYNC_VALUE_BYTES {
            return self.terminate(Record::Terminate {
                hop,
                cause: Cause::HistoryOverflow,
                field: None,
                expected: Vec::new(),
                observed: value.len().to_string().into_bytes(),
            });
        }
        let tag = compute_hmac(key, &value);
        if self.cfg.verbose {
            self.sink.emit(Record::Snapshot { hop, dir: Dir::Fwd, value: value.clone() });
            self.sink.emit(Record::Request {
                method: req.method.clone(),
                target: out_target.clone(),
                host: own.host.clone(),
            });
        }

        // Rebuild the head in one pass from borrowed parts: strip any
        // inbound sync headers, drop the framing headers when converting to
        // a declared length, and append this hop's history and tag.
        let converting = convert_to_declared.is_some();
        let mut extra: [(&str, &[u8]); 3] = [("", b""); 3];
        let mut extra_n = 0;
        if let Some(decl) = &convert_to_declared {
            extra[extra_n] = ("Content-Length", decl.as_bytes());
            extra_n += 1;
        }
        extra[extra_n] = (SYNC_HEADER, &value);
        extra[extra_n + 1] = (SYNC_HMAC_HEADER, tag.as_bytes());
        let head = serialize_head_filtered(
            &req.method,
            &out_target,
            &req.version,
            &req.headers,
            |h| {
                h.name_is(SYNC_HEADER)
                    || h.name_is(SYNC_HMAC_HEADER)
                    || (converting
                        && (h.name_is("transfer-encoding") || h.name_is("content-length")))
            },
            &extra[..extra_n + 2],
        );
        if self.write_upstream(&head).is_err() {
            return self.terminate(self.upstream_closed(hop));
        }

        let pumped = match plan {
            BodyPlan::None => Ok(()),
            BodyPlan::Buffered(body) => self.write_upstream(&body).map_err(|_| None),
            BodyPlan::Raw(n) => self.pump_raw(n, hop),
            BodyPlan::Stream => self.pump_stream(duty, hop),
        };
        match pumped {
            Ok(()) => {}
            // The pump already emitted its own record when it had one;
            // otherwise the upstream went away under us.
            Err(Some(record)) => return self.terminate(record),
            Err(None) => return self.terminate(self.upstream_closed(hop)),
        }
        if self.flush_upstream().is_err() {
            return self.terminate(self.upstream_closed(hop));
        }

        match self.relay_response(req.method == "HEAD") {
            Ok(keep_alive) => {
                if keep_alive {
                    Step::Continue
                } else {
                    Step::Close
                }
            }
            Err(_) => self.terminate(self.upstream_closed(hop)),
        }
    }

    fn sync_origin(
        &mut self,
        req: &Request,
        incoming: Option<SyncHistory>,
        hop: usize,
        own: FieldSnapshot,
        duty: LengthDuty,
        _key: &SyncKey,
    ) -> Step {
        let final_length = match req.framing {
            FramingDecision::NoBody => 0,
            FramingDecision::ContentLength(n) => match self.drain_counted(n, false, hop) {
                Ok((_, counted)) => counted,
                Err(step) => return step,
            },
            FramingDecision::Chunked => match self.drain_chunked(duty, hop, false) {
                Ok((_, counted)) => counted,
                Err(step) => return step,
            },
        };

        if let Some(hook) = &self.cfg.app_hook {
            let full_history = match &incoming {
                Some(h) => append_history(h, &own, HopLength::Declared(final_length)),
                None => init_history(&own, HopLength::Declared(final_length)),
            };
            if let Err(reason) = hook(&full_history) {
                return self.terminate(Record::Terminate {
                    hop,
                    cause: Cause::AppPolicy,
                    field: None,
                    expected: Vec::new(),
                    observed: reason.into_bytes(),
                });
            }
        }

        self.sink.emit(Record::Request {
            method: req.method.clone(),
            target: req.target.clone(),
            host: own.host.clone(),
        });
        match self.write_echo(&own.path, &own.host, final_length, req.method == "HEAD") {
            Ok(()) => Step::Continue,
            Err(_) => Step::Close,
        }
    }

    // ---- oblivious path --------------------------------------------------

    fn oblivious_forward(&mut self, raw: &RawRequest, req: &Request) -> Step {
        if let Some(step) = self.ensure_upstream(0) {
            return step;
        }
        // Forward the head byte-for-byte: unknown headers (sync headers
        // included) pass through untouched.
        if self.write_upstream(raw.as_bytes()).is_err() {
            return self.terminate(self.upstream_closed(0));
        }
        let pumped = match req.framing {
            FramingDecision::NoBody => Ok(()),
            FramingDecision::ContentLength(n) => self.pump_raw(n, 0),
            FramingDecision::Chunked => self.pump_oblivious_chunks(),
        };
        match pumped {
            Ok(()) => {}
            Err(Some(record)) => return self.terminate(record),
            Err(None) => return self.terminate(self.upstream_closed(0)),
        }
        if self.flush_upstream().is_err() {
            return self.terminate(self.upstream_closed(0));
        }
        match self.relay_response(req.method == "HEAD") {
            Ok(true) => Step::Continue,
            Ok(false) => Step::Close,
            Err(_) => self.terminate(self.upstream_closed(0)),
        }
    }

    fn oblivious_origin(&mut self, req: &Request) -> Step {
        let mut reader = BodyReader::new(&mut self.reader, req.framing);
        let mut length = 0u64;
        loop {
            match reader.next_event() {
                Ok(BodyEvent::Data { bytes, .. }) => length += bytes.len() as u64,
                Ok(BodyEvent::End) => break,
                Err(e) => return self.framing_terminate(0, e),
            }
        }
        self.sink.emit(Record::Request {
            method: req.method.clone(),
            target: req.target.clone(),
            host: req.honored_host.clone(),
        });
        match self.write_echo(&req.honored_path, &req.honored_host, length, req.method == "HEAD") {
            Ok(()) => Step::Continue,
            Err(_) => Step::Close,
        }
    }

    // ---- body pumps ------------------------------------------------------

    /// Relay `n` raw bytes to the upstream. `Err(Some)` carries a record to
    /// terminate with; `Err(None)` means the upstream write side failed.
    fn pump_raw(&mut self, n: u64, hop: usize) -> Result<(), Option<Record>> {
        let up = self.upstream.as_mut().expect("upstream connected");
        let mut reader = BodyReader::new(&mut self.reader, FramingDecision::ContentLength(n));
        loop {
            match reader.next_event() {
                Ok(BodyEvent::Data { bytes, .. }) => {
                    up.writer.write_all(&bytes).map_err(|_| None)?;
                    if reader.source().buffer().is_empty() {
                        up.writer.flush().map_err(|_| None)?;
                    }
                }
                Ok(BodyEvent::End) => return Ok(()),
                Err(e) => {
                    return Err(Some(framing_record(hop, &e)));
                }
            }
        }
    }

    /// Relay a chunked body with our length record appended, enforcing the
    /// validation duty at end-of-body. On a length mismatch the upstream
    /// stream is abandoned *without* a terminal chunk, so the upstream can
    /// never treat the partial body as a complete request.
    fn pump_stream(&mut self, duty: LengthDuty, hop: usize) -> Result<(), Option<Record>> {
        let up = self.upstream.as_mut().expect("upstream connected");
        let mut reader = BodyReader::new(&mut self.reader, FramingDecision::Chunked);
        let mut writer = ChunkedWriter::new(&mut up.writer);
        let mut stripper = match duty {
            LengthDuty::StripAndVerifyRecord => Some(LengthStripper::new()),
            _ => None,
        };
        let mut counted: u64 = 0;
        loop {
            let ev = match reader.next_event() {
                Ok(ev) => ev,
                Err(e) => {
                    writer.abort();
                    return Err(Some(framing_record(hop, &e)));
                }
            };
            let done = match &mut stripper {
                Some(stripper) => match stripper.on_event(ev) {
                    Ok((slices, result)) => {
                        for s in &slices {
                            counted += s.len() as u64;
                            writer.write_chunk(s).map_err(|_| None)?;
                        }
                        match result {
                            Some(r) => {
                                if r.declared != r.counted {
                                    writer.abort();
                                    return Err(Some(length_mismatch_record(
                                        hop, r.declared, r.counted,
                                    )));

                                }
                                true
                            }
                            None => false,
                        }
                    }
                    Err(e) => {
                        writer.abort();
                        return Err(Some(Record::Terminate {
                            hop,
                            cause: Cause::StripError,
                            field: Some(DiscrepancyField::Length),
                            expected: Vec::new(),
                            observed: e.to_string().into_bytes(),
                        }));
                    }
                },
                None => match ev {
                    BodyEvent::Data { bytes, .. } => {
                        counted += bytes.len() as u64;
                        writer.write_chunk(&bytes).map_err(|_| None)?;
                        false
                    }
                    BodyEvent::End => true,
                },
            };
            if done {
                if let LengthDuty::VerifyCountEquals(expected) = duty {
                    if counted != expected {
                        writer.abort();
                        return Err(Some(length_mismatch_record(hop, expected, counted)));
                    }
                }
                writer.finish_with_record(counted).map_err(|_| None)?;
                return Ok(());
            }
            if reader.source().buffer().is_empty() {
                // Input drained: push what we have before blocking again.
                writer.flush_inner().map_err(|_| None)?;
            }
        }
    }

    /// Oblivious chunk relay: decode and re-encode one-for-one, no record.
    /// Slices map to chunks, so any chunk small enough to matter downstream
    /// (in particular an embedded length record) keeps its boundaries.
    fn pump_oblivious_chunks(&mut self) -> Result<(), Option<Record>> {
        let up = self.upstream.as_mut().expect("upstream connected");
        let mut reader = BodyReader::new(&mut self.reader, FramingDecision::Chunked);
        let mut writer = ChunkedWriter::new(&mut up.writer);
        loop {
            match reader.next_event() {
                Ok(BodyEvent::Data { bytes, .. }) => {
                    writer.write_chunk(&bytes).map_err(|_| None)?;
                    if reader.source().buffer().is_empty() {
                        writer.flush_inner().map_err(|_| None)?;
                    }
                }
                Ok(BodyEvent::End) => {
                    writer.finish().map_err(|_| None)?;
                    return Ok(());
                }
                Err(e) => {
                    writer.abort();
                    return Err(Some(framing_record(0, &e)));
                }
            }
        }
    }

    // ---- body drains (buffering / origin) ---------------------------------

    /// Read a Content-Length body to completion. Returns `(payload, count)`;
    /// with `keep` false the payload stays empty and memory stays flat.
    fn drain_counted(&mut self, n: u64, keep: bool, hop: usize) -> Result<(Vec<u8>, u64), Step> {
        let mut reader = BodyReader::new(&mut self.reader, FramingDecision::ContentLength(n));
        let mut body = Vec::new();
        let mut counted: u64 = 0;
        loop {
            match reader.next_event() {
                Ok(BodyEvent::Data { bytes, .. }) => {
                    counted += bytes.len() as u64;
                    if keep {
                        if body.len() + bytes.len() > MAX_BUFFERED_BODY_BYTES {
                            return Err(self.framing_terminate(hop, FramingError::BodyTooLarge));
                        }
                        body.extend_from_slice(&bytes);
                    }
                }
                Ok(BodyEvent::End) => return Ok((body, counted)),
                Err(e) => return Err(self.framing_terminate(hop, e)),
            }
        }
    }

    /// Drain a chunked body while enforcing the length duty. Returns
    /// `(payload, count)` with any length record already stripped; with
    /// `keep` false only the count is collected.
    fn drain_chunked(
        &mut self,
        duty: LengthDuty,
        hop: usize,
        keep: bool,
    ) -> Result<(Vec<u8>, u64), Step> {
        let mut reader = BodyReader::new(&mut self.reader, FramingDecision::Chunked);
        let mut stripper = match duty {
            LengthDuty::StripAndVerifyRecord => Some(LengthStripper::new()),
            _ => None,
        };
        let mut body = Vec::new();
        let mut counted: u64 = 0;
        loop {
            let ev = match reader.next_event() {
                Ok(ev) => ev,
                Err(e) => return Err(self.framing_terminate(hop, e)),
            };
            let (slices, done) = match &mut stripper {
                Some(stripper) => match stripper.on_event(ev) {
                    Ok((slices, result)) => {
                        if let Some(r) = &result {
                            if r.declared != r.counted {
                                return Err(self.terminate(length_mismatch_record(
                                    hop, r.declared, r.counted,
                                )));
                            }
                        }
                        (slices, result.is_some())
                    }
                    Err(e) => {
                        return Err(self.terminate(Record::Terminate {
                            hop,
                            cause: Cause::StripError,
                            field: Some(DiscrepancyField::Length),
                            expected: Vec::new(),
                            observed: e.to_string().into_bytes(),
                        }));
                    }
                },
                None => match ev {
                    BodyEvent::Data { bytes, .. } => (vec![bytes], false),
                    BodyEvent::End => (Vec::new(), true),
                },
            };
            for s in &slices {
                counted += s.len() as u64;
                if keep {
                    if body.len() + s.len() > MAX_BUFFERED_BODY_BYTES {
                        return Err(self.framing_terminate(hop, FramingError::BodyTooLarge));
                    }
                    body.extend_from_slice(s);
                }
            }
            if done {
                if let LengthDuty::VerifyCountEquals(expected) = duty {
                    if counted != expected {
                        return Err(self.terminate(length_mismatch_record(hop, expected, counted)));
                    }
                }
                return Ok((body, counted));
            }
        }
    }

    // ---- response relay ----------------------------------------------------

    /// Copy one response from upstream to the client. Returns whether the
    /// connection can serve another request.
    fn relay_response(&mut self, head_request: bool) -> io::Result<bool> {
        let up = self.upstream.as_mut().expect("upstream connected");
        let head = read_head(&mut up.reader)?
            .ok_or_else(|| io::Error::from(io::ErrorKind::UnexpectedEof))?;
        let meta = parse_response_meta(&head)
            .ok_or_else(|| io::Error::from(io::ErrorKind::InvalidData))?;
        self.writer.write_all(&head)?;
        if head_request || meta.status == 204 || meta.status == 304 {
            self.writer.flush()?;
            return Ok(true);
        }
        if meta.chunked {
            let mut reader = BodyReader::new(&mut up.reader, FramingDecision::Chunked);
            let mut writer = ChunkedWriter::new(&mut self.writer);
            loop {
                match reader.next_event() {
                    Ok(BodyEvent::Data { bytes, .. }) => writer.write_chunk(&bytes)?,
                    Ok(BodyEvent::End) => {
                        writer.finish()?;
                        break;
                    }
                    Err(FramingError::Io(e)) => return Err(e),
                    Err(_) => return Err(io::ErrorKind::InvalidData.into()),
                }
            }
            self.writer.flush()?;
            return Ok(true);
        }
        if let Some(n) = meta.content_length {
            let mut reader = BodyReader::new(&mut up.reader, FramingDecision::ContentLength(n));
            loop {
                match reader.next_event() {
                    Ok(BodyEvent::Data { bytes, .. }) => self.writer.write_all(&bytes)?,
                    Ok(BodyEvent::End) => break,
                    Err(FramingError::Io(e)) => return Err(e),
                    Err(_) => return Err(io::ErrorKind::InvalidData.into()),
                }
            }
            self.writer.flush()?;
            return Ok(true);
        }
        // No framing: body runs to EOF, after which the connection is spent.
        let mut buf = [0u8; 16 * 1024];
        loop {
            let n = up.reader.read(&mut buf)?;
            if n == 0 {
                break;
            }
            self.writer.write_all(&buf[..n])?;
        }
        self.writer.flush()?;
        Ok(false)
    }

    // ---- plumbing ----------------------------------------------------------

    /// Connect the upstream if not yet connected. `Some(step)` on failure.
    fn ensure_upstream(&mut self, hop: usize) -> Option<Step> {
        if self.upstream.is_some() {
            return None;
        }
        let addr = self.cfg.upstream.expect("proxy has an upstream");
        match TcpStream::connect_timeout(&addr, Duration::from_secs(3)) {
            Ok(stream) => {
                let _ = stream.set_nodelay(true);
                let _ = stream.set_read_timeout(Some(self.cfg.read_timeout));
                match stream.try_clone() {
                    Ok(writer) => {
                        self.upstream = Some(Upstream { reader: BufReader::new(stream), writer });
                        None
                    }
                    Err(_) => Some(self.terminate(self.unreachable_record(hop))),
                }
            }
            Err(_) => Some(self.terminate(self.unreachable_record(hop))),
        }
    }

    fn unreachable_record(&self, hop: usize) -> Record {
        Record::Terminate {
            hop,
            cause: Cause::UpstreamUnreachable,
            field: None,
            expected: Vec::new(),
            observed: self
                .cfg
                .upstream
                .map(|a| a.to_string().into_bytes())
                .unwrap_or_default(),
        }
    }

    fn upstream_closed(&self, hop: usize) -> Record {
        Record::Terminate {
            hop,
            cause: Cause::UpstreamClosed,
            field: None,
            expected: Vec::new(),
            observed: Vec::new(),
        }
    }

    fn write_upstream(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.upstream
            .as_mut()
            .expect("upstream connected")
            .writer
            .write_all(bytes)
    }

    fn flush_upstream(&mut self) -> io::Result<()> {
        self.upstream.as_mut().expect("upstream connected").writer.flush()
    }

    fn framing_terminate(&mut self, hop: usize, e: FramingError) -> Step {
        self.terminate(framing_record(hop, &e))
    }

    fn write_echo(&mut self, path: &[u8], host: &[u8], length: u64, head_only: bool) -> io::Result<()> {
        let mut body = Vec::with_capacity(path.len() + host.len() + 32);
        body.extend_from_slice(b"path=");
        body.extend_from_slice(path);
        body.push(b'\n');
        body.extend_from_slice(b"host=");
        body.extend_from_slice(host);
        body.push(b'\n');
        body.extend_from_slice(format!("length={length}\n").as_bytes());
        let head = format!(
            "HTTP/1.1 200 OK\r\nContent-Type: text/plain\r\nContent-Length: {}\r\n\r\n",
            body.len()
        );
        self.writer.write_all(head.as_bytes())?;
        if !head_only {
            self.writer.write_all(&body)?;
        }
        self.writer.flush()
    }

    /// Emit the record, optionally answer 400, and tear the connection down
    /// in both directions. Nothing of the request survives into the next
    /// read: residual bytes die with the connection.
    fn terminate(&mut self, record: Record) -> Step {
        let decisive = match &record {
            Record::Terminate { cause, .. } => cause.is_decisive(),
            _ => true,
        };
        if decisive && self.cfg.on_invalid == OnInvalid::Respond400ThenClose {
            let _ = self
                .writer
                .write_all(b"HTTP/1.1 400 Bad Request\r\nContent-Length: 0\r\nConnection: close\r\n\r\n");
            let _ = self.writer.flush();
        }
        self.sink.emit(record);
        if let Some(up) = self.upstream.take() {
            let _ = up.writer.shutdown(Shutdown::Both);
        }
        Step::Close
    }
}

fn framing_record(hop: usize, e: &FramingError) -> Record {
    Record::Terminate {
        hop,
        cause: Cause::FramingError,
        field: None,
        expected: Vec::new(),
        observed: e.to_string().into_bytes(),
    }
}

fn length_mismatch_record(hop: usize, expected: u64, observed: u64) -> Record {
    Record::Terminate {
        hop,
        cause: Cause::SyncInvalid,
        field: Some(DiscrepancyField::Length),
        expected: expected.to_string().into_bytes(),
        observed: observed.to_string().into_bytes(),
    }
}

pub(crate) struct ResponseMeta {
    pub(crate) status: u16,
    pub(crate) content_length: Option<u64>,
    pub(crate) chunked: bool,
}

pub(crate) fn parse_response_meta(head: &[u8]) -> Option<ResponseMeta> {
    let mut lines = head.split(|&b| b == b'\n');
    let status_line = lines.next()?;
    let status_line = status_line.strip_suffix(b"\r").unwrap_or(status_line);
    let mut parts = status_line.split(|&b| b == b' ');
    let version = parts.next()?;
    if !version.starts_with(b"HTTP/1.") {
        return None;
    }
    let status: u16 = std::str::from_utf8(parts.next()?).ok()?.parse().ok()?;
    let mut content_length = None;
    let mut chunked = false;
    for line in lines {
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        if line.is_empty() {
            break;
        }
        let colon = line.iter().position(|&b| b == b':')?;
        let name = &line[..colon];
        let mut value = &line[colon + 1..];
        while value.first() == Some(&b' ') || value.first() == Some(&b'\t') {
            value = &value[1..];
        }
        if name.eq_ignore_ascii_case(b"content-length") {
            content_length = std::str::from_utf8(value).ok()?.trim().parse().ok();
        } else if name.eq_ignore_ascii_case(b"transfer-encoding")
            && value.trim_ascii().eq_ignore_ascii_case(b"chunked")
        {
            chunked = true;
        }
    }
    Some(ResponseMeta { status, content_length, chunked })
}

impl fmt::Debug for NodeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NodeConfig")
            .field("listen", &self.listen)
            .field("upstream", &self.upstream)
            .field("personality", &self.personality_label)
            .field("sync", &self.sync.is_enabled())
            .field("mode", &self.transfer_mode)
            .finish()
    }
}
