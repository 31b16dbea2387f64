//! Scenario configs and the process-mode runner.
//!
//! A scenario is a chain description, a list of payloads, and one
//! expectation per payload. The runner launches every hop as a separate
//! process on loopback, drives each payload on a fresh client connection,
//! and grades what actually happened — response fields for passes, the
//! first decisive TERMINATE for blocks — against the expectation. Running
//! the same scenario in baseline mode makes every hop sync-oblivious and
//! grades against `baseline_expectations`, which is how a config captures
//! both "the attack works undefended" and "the defense stops it at hop N".

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::harness::client::{parse_echo, send_request, ClientOutcome};
use crate::harness::corpus::{chunk_split, request};
use crate::node::{decode_token, Record};
use crate::sync::{decode_sync, SyncKey, TransitionRule, ValidationPolicy};
use crate::wire::ParserPersonality;

// ---- configuration ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Client-facing hop first; the last entry is the origin.
    pub chain: Vec<ChainNodeConfig>,
    /// Transition rules shared by every sync-aware hop.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rules: Vec<TransitionRule>,
    pub payloads: Vec<PayloadConfig>,
    /// Expectation per payload name for the defended run.
    pub expectations: BTreeMap<String, Expectation>,
    /// Expectation per payload name when every hop runs oblivious.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub baseline_expectations: BTreeMap<String, Expectation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainNodeConfig {
    pub personality: String,
    /// A hop that never participates in sync, even in defended mode.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub oblivious: bool,
    /// "streaming" (default) or "buffering".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrite_path: Option<RewriteConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewriteConfig {
    pub from: String,
    pub to: String,
}

/// A payload is either inline bytes or a generated request.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayloadConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<PayloadTemplate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayloadTemplate {
    pub method: String,
    pub target: String,
    pub host: String,
    #[serde(default)]
    pub size_bytes: u64,
    /// Absent or `"none"` sends a Content-Length body; `{"chunks": n}`
    /// sends the same bytes chunk-encoded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunking: Option<ChunkingConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChunkingConfig {
    Mode(String),
    Chunks { chunks: usize },
}

impl PayloadConfig {
    pub fn to_bytes(&self) -> io::Result<Vec<u8>> {
        match (&self.base64, &self.template) {
            (Some(b64), None) => base64::engine::general_purpose::STANDARD
                .decode(b64.trim())
                .map_err(|e| bad_config(format!("payload {}: bad base64: {e}", self.name))),
            (None, Some(t)) => t.to_bytes(),
            _ => Err(bad_config(format!(
                "payload {}: exactly one of base64/template required",
                self.name
            ))),
        }
    }
}

impl PayloadTemplate {
    fn to_bytes(&self) -> io::Result<Vec<u8>> {
        let body = pattern_bytes(self.size_bytes as usize);
        let line = format!("{} {} HTTP/1.1", self.method, self.target);
        match &self.chunking {
            None => Ok(plain(&line, &self.host, &body)),
            Some(ChunkingConfig::Mode(m)) if m == "none" => Ok(plain(&line, &self.host, &body)),
            Some(ChunkingConfig::Mode(m)) => {
                Err(bad_config(format!("unknown chunking mode {m:?}")))
            }
            Some(ChunkingConfig::Chunks { chunks }) => {
                if *chunks == 0 {
                    return Err(bad_config("chunks must be at least 1"));
                }
                Ok(request(
                    &line,
                    &[("Host", &self.host), ("Transfer-Encoding", "chunked")],
                    &chunk_split(&body, *chunks),
                ))
            }
        }
    }
}

fn plain(line: &str, host: &str, body: &[u8]) -> Vec<u8> {
    if body.is_empty() {
        request(line, &[("Host", host)], b"")
    } else {
        let cl = body.len().to_string();
        request(line, &[("Host", host), ("Content-Length", &cl)], body)
    }
}

/// Deterministic filler so generated payloads are reproducible.
pub fn pattern_bytes(len: usize) -> Vec<u8> {
    (0..len).map(|i| ((i.wrapping_mul(31)).wrapping_add(7) % 251) as u8).collect()
}

fn bad_config(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidInput, msg.into())
}

// ---- expectations -----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub enum Expectation {
    #[serde(rename = "pass")]
    Pass(PassExpectation),
    #[serde(rename = "blocked")]
    Blocked(BlockedExpectation),
}

fn default_status() -> u16 {
    200
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct PassExpectation {
    #[serde(default = "default_status")]
    pub status: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echo_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echo_host: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echo_length: Option<u64>,
    /// Every request target the origin must have answered, in order — the
    /// way a smuggled second request shows up in an undefended run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_targets: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct BlockedExpectation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hop: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed: Option<String>,
}

// ---- report -----------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub mode: String,
    pub all_met: bool,
    pub results: Vec<PayloadReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PayloadReport {
    pub payload: String,
    pub met: bool,
    pub expected: Expectation,
    pub observed: ObservedOutcome,
    /// HTTP-Sync values seen at each sync hop boundary, in emission order.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sync_snapshots: Vec<SnapshotReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ObservedOutcome {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub echo_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub echo_host: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub echo_length: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terminate: Option<TerminateReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub origin_targets: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TerminateReport {
    pub hop: usize,
    pub cause: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub expected: String,
    pub observed: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SnapshotReport {
    /// Position of the emitting node in the chain (0 = client-facing).
    pub node: usize,
    pub hop: usize,
    pub dir: String,
    /// The raw header value as text.
    pub value: String,
    /// The decoded history when the value is canonical; absent otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoded: Option<serde_json::Value>,
}

// ---- process chain ----------------------------------------------------------

/// A chain of node processes wired over loopback. Children are killed on
/// drop.
pub struct ProcessChain {
    pub entry: SocketAddr,
    children: Vec<Child>,
    records: Arc<Mutex<Vec<(usize, Record)>>>,
    _readers: Vec<JoinHandle<()>>,
}

impl ProcessChain {
    pub fn records(&self) -> Vec<(usize, Record)> {
        self.records.lock().unwrap().clone()
    }

    pub fn record_count(&self) -> usize {
        self.records.lock().unwrap().len()
    }
}

impl Drop for ProcessChain {
    fn drop(&mut self) {
        for c in &mut self.children {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

pub struct SpawnOptions<'a> {
    /// Path to the node binary (the CLI passes itself).
    pub binary: &'a Path,
    /// When false, every hop runs oblivious regardless of config.
    pub defended: bool,
    pub key_file: &'a Path,
    pub policy_file: Option<&'a Path>,
    pub verbose: bool,
}

/// Launch every hop of `cfg.chain` as its own process, origin first, each
/// proxy pointed at the address the next process reported in its READY line.
pub fn spawn_process_chain(cfg: &ScenarioConfig, opts: &SpawnOptions) -> io::Result<ProcessChain> {
    if cfg.chain.is_empty() {
        return Err(bad_config("chain must have at least one node"));
    }
    for node in &cfg.chain {
        if ParserPersonality::preset(&node.personality).is_none() {
            return Err(bad_config(format!("unknown personality {:?}", node.personality)));
        }
    }
    let records: Arc<Mutex<Vec<(usize, Record)>>> = Arc::new(Mutex::new(Vec::new()));
    let mut children = Vec::new();
    let mut readers = Vec::new();
    let mut next_addr: Option<SocketAddr> = None;

    for (idx, node) in cfg.chain.iter().enumerate().rev() {
        let is_origin = idx == cfg.chain.len() - 1;
        let sync_on = opts.defended && !node.oblivious;
        let mut cmd = Command::new(opts.binary);
        cmd.arg(if is_origin { "run-origin" } else { "run-node" });
        cmd.args(["--listen", "127.0.0.1:0"]);
        if let Some(up) = next_addr {
            cmd.args(["--upstream", &up.to_string()]);
        }
        cmd.args(["--personality", &node.personality]);
        if sync_on {
            cmd.arg("--key-file").arg(opts.key_file);
            if let Some(policy) = opts.policy_file {
                cmd.arg("--policy-file").arg(policy);
            }
        } else {
            cmd.arg("--oblivious");
        }
        if let Some(mode) = &node.mode {
            cmd.args(["--mode", mode]);
        }
        if let Some(rw) = &node.rewrite_path {
            cmd.args(["--rewrite-path", &format!("{}={}", rw.from, rw.to)]);
        }
        if opts.verbose {
            cmd.arg("--verbose");
        }
        cmd.stdin(Stdio::null()).stdout(Stdio::piped()).stderr(Stdio::null());

        let mut child = cmd.spawn()?;
        let stdout = child.stdout.take().expect("stdout piped");
        children.push(child);

        let (tx, rx) = mpsc::channel::<SocketAddr>();
        let sink = records.clone();
        readers.push(std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            let mut announced = false;
            for line in reader.lines() {
                let Ok(line) = line else { break };
                let Some(record) = Record::parse(&line) else { continue };
                if !announced {
                    if let Record::Ready { addr, .. } = &record {
                        let _ = tx.send(*addr);
                        announced = true;
                    }
                }
                sink.lock().unwrap().push((idx, record));
            }
        }));

        let addr = rx.recv_timeout(Duration::from_secs(10)).map_err(|_| {
            io::Error::new(
                io::ErrorKind::TimedOut,
                format!("node {idx} ({}) never reported READY", node.personality),
            )
        })?;
        next_addr = Some(addr);
    }

    Ok(ProcessChain {
        entry: next_addr.expect("non-empty chain"),
        children,
        records,
        _readers: readers,
    })
}

// ---- scenario execution -------------------------------------------------------

pub struct RunOptions<'a> {
    pub binary: &'a Path,
    pub defended: bool,
    pub verbose: bool,
    pub client_timeout: Duration,
}

/// Run every payload of the scenario through a freshly spawned process
/// chain and grade the outcomes. Key and policy files are created in a
/// temporary directory that lives for the duration of the run.
pub fn run_scenario(cfg: &ScenarioConfig, opts: &RunOptions) -> io::Result<ScenarioReport> {
    let expectations = if opts.defended { &cfg.expectations } else { &cfg.baseline_expectations };
    for p in &cfg.payloads {
        if !expectations.contains_key(&p.name) {
            return Err(bad_config(format!(
                "payload {:?} has no {} expectation",
                p.name,
                if opts.defended { "defended" } else { "baseline" }
            )));
        }
    }

    let dir = tempfile::tempdir()?;
    let key_file: PathBuf = dir.path().join("sync.key");
    SyncKey::generate()
        .write_to_file(&key_file)
        .map_err(|e| io::Error::other(format!("writing scenario key: {e}")))?;
    let policy_file = if cfg.rules.is_empty() {
        None
    } else {
        let path = dir.path().join("policy.json");
        let policy = ValidationPolicy::with_rules(cfg.rules.clone());
        std::fs::write(&path, serde_json::to_vec_pretty(&policy)?)?;
        Some(path)
    };

    let chain = spawn_process_chain(
        cfg,
        &SpawnOptions {
            binary: opts.binary,
            defended: opts.defended,
            key_file: &key_file,
            policy_file: policy_file.as_deref(),
            verbose: opts.verbose,
        },
    )?;

    let origin_idx = cfg.chain.len() - 1;
    let mut results = Vec::with_capacity(cfg.payloads.len());
    for payload in &cfg.payloads {
        let expected = expectations[&payload.name].clone();
        let bytes = payload.to_bytes()?;
        let mark = chain.record_count();
        let outcome = send_request(chain.entry, &bytes, opts.client_timeout)?;
        let observed = grade_outcome(&chain, mark, origin_idx, &expected, outcome);
        let sync_snapshots = collect_snapshots(&chain, mark);
        let met = meets(&expected, &observed);
        results.push(PayloadReport {
            payload: payload.name.clone(),
            met,
            expected,
            observed,
            sync_snapshots,
        });
    }

    let all_met = results.iter().all(|r| r.met);
    Ok(ScenarioReport {
        scenario: cfg.name.clone(),
        mode: if opts.defended { "defended" } else { "baseline" }.to_string(),
        all_met,
        results,
    })
}

fn grade_outcome(
    chain: &ProcessChain,
    mark: usize,
    origin_idx: usize,
    expected: &Expectation,
    outcome: ClientOutcome,
) -> ObservedOutcome {
    match outcome {
        ClientOutcome::Response(resp) if resp.status == 200 => {
            let echo = parse_echo(&resp.body);
            let origin_targets = match expected {
                Expectation::Pass(p) if p.origin_targets.is_some() => {
                    let want = p.origin_targets.as_ref().unwrap().len();
                    poll_origin_targets(chain, mark, origin_idx, want)
                }
                _ => Vec::new(),
            };
            ObservedOutcome {
                kind: "pass".into(),
                status: Some(resp.status),
                echo_path: echo.as_ref().map(|e| String::from_utf8_lossy(&e.path).into_owned()),
                echo_host: echo.as_ref().map(|e| String::from_utf8_lossy(&e.host).into_owned()),
                echo_length: echo.as_ref().map(|e| e.length),
                terminate: None,
                origin_targets,
            }
        }
        ClientOutcome::Response(resp) => ObservedOutcome {
            kind: "blocked".into(),
            status: Some(resp.status),
            echo_path: None,
            echo_host: None,
            echo_length: None,
            terminate: poll_terminate(chain, mark),
            origin_targets: Vec::new(),
        },
        ClientOutcome::ConnectionClosed => ObservedOutcome {
            kind: "blocked".into(),
            status: None,
            echo_path: None,
            echo_host: None,
            echo_length: None,
            terminate: poll_terminate(chain, mark),
            origin_targets: Vec::new(),
        },
    }
}

/// First decisive TERMINATE from any node after `mark`, waiting briefly for
/// process stdout to surface it.
fn poll_terminate(chain: &ProcessChain, mark: usize) -> Option<TerminateReport> {
    let deadline = Instant::now() + Duration::from_millis(2500);
    loop {
        for (_, record) in chain.records().into_iter().skip(mark) {
            if let Record::Terminate { hop, cause, field, expected, observed } = record {
                if cause.is_decisive() {
                    return Some(TerminateReport {
                        hop,
                        cause: cause.code().to_string(),
                        field: field.map(|f| f.to_string()),
                        expected: String::from_utf8_lossy(&expected).into_owned(),
                        observed: String::from_utf8_lossy(&observed).into_owned(),
                    });
                }
            }
        }
        if Instant::now() >= deadline {
            return None;
        }
        std::thread::sleep(Duration::from_millis(40));
    }
}

/// Request targets the origin answered after `mark`, polling until `want`
/// arrived or patience ran out — a smuggled request surfaces asynchronously.
fn poll_origin_targets(
    chain: &ProcessChain,
    mark: usize,
    origin_idx: usize,
    want: usize,
) -> Vec<String> {
    let deadline = Instant::now() + Duration::from_millis(1500);
    loop {
        let targets: Vec<String> = chain
            .records()
            .into_iter()
            .skip(mark)
            .filter_map(|(idx, r)| match r {
                Record::Request { target, .. } if idx == origin_idx => {
                    Some(String::from_utf8_lossy(&target).into_owned())
                }
                _ => None,
            })
            .collect();
        if targets.len() >= want || Instant::now() >= deadline {
            return targets;
        }
        std::thread::sleep(Duration::from_millis(40));
    }
}

fn collect_snapshots(chain: &ProcessChain, mark: usize) -> Vec<SnapshotReport> {
    chain
        .records()
        .into_iter()
        .skip(mark)
        .filter_map(|(node, r)| match r {
            Record::Snapshot { hop, dir, value } => Some(SnapshotReport {
                node,
                hop,
                dir: match dir {
                    crate::node::Dir::Recv => "recv".into(),
                    crate::node::Dir::Fwd => "fwd".into(),
                },
                decoded: decode_sync(&value)
                    .ok()
                    .and_then(|_| serde_json::from_slice(&value).ok()),
                value: String::from_utf8_lossy(&value).into_owned(),
            }),
            _ => None,
        })
        .collect()
}

fn meets(expected: &Expectation, observed: &ObservedOutcome) -> bool {
    match expected {
        Expectation::Pass(want) => {
            observed.kind == "pass"
                && observed.status == Some(want.status)
                && opt_matches(&want.echo_path, &observed.echo_path)
                && opt_matches(&want.echo_host, &observed.echo_host)
                && want.echo_length.map_or(true, |l| observed.echo_length == Some(l))
                && want
                    .origin_targets
                    .as_ref()
                    .map_or(true, |t| &observed.origin_targets == t)
        }
        Expectation::Blocked(want) => {
            if observed.kind != "blocked" {
                return false;
            }
            let Some(t) = &observed.terminate else {
                // A silent stall only satisfies a fully unconstrained block.
                return want.hop.is_none() && want.cause.is_none();
            };
            want.hop.map_or(true, |h| t.hop == h)
                && want.cause.as_ref().map_or(true, |c| &t.cause == c)
                && opt_matches(&want.field, &t.field)
                && want.expected.as_ref().map_or(true, |e| &t.expected == e)
                && want.observed.as_ref().map_or(true, |o| &t.observed == o)
        }
    }
}

fn opt_matches(want: &Option<String>, got: &Option<String>) -> bool {
    match want {
        None => true,
        Some(w) => got.as_deref() == Some(w.as_str()),
    }
}

/// Human summary, one line per payload plus a tail line, mirroring the
/// shape of the machine report.
pub fn render_summary(report: &ScenarioReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("scenario {} [{}]\n", report.scenario, report.mode));
    for r in &report.results {
        let expected = match &r.expected {
            Expectation::Pass(p) => {
                let mut parts = vec![format!("pass status={}", p.status)];
                if let Some(v) = &p.echo_path {
                    parts.push(format!("path={v}"));
                }
                if let Some(v) = &p.echo_host {
                    parts.push(format!("host={v}"));
                }
                if let Some(v) = p.echo_length {
                    parts.push(format!("length={v}"));
                }
                if let Some(t) = &p.origin_targets {
                    parts.push(format!("origin-targets={}", t.join(",")));
                }
                parts.join(" ")
            }
            Expectation::Blocked(b) => {
                let mut parts = vec!["blocked".to_string()];
                if let Some(h) = b.hop {
                    parts.push(format!("hop={h}"));
                }
                if let Some(c) = &b.cause {
                    parts.push(format!("cause={c}"));
                }
                if let Some(f) = &b.field {
                    parts.push(format!("field={f}"));
                }
                parts.join(" ")
            }
        };
        let observed = match &r.observed.terminate {
            Some(t) => format!(
                "blocked hop={} cause={}{} expected={} observed={}",
                t.hop,
                t.cause,
                t.field.as_ref().map(|f| format!(" field={f}")).unwrap_or_default(),
                t.expected,
                t.observed
            ),
            None if r.observed.kind == "pass" => format!(
                "pass status={}{}{}{}{}",
                r.observed.status.unwrap_or(0),
                r.observed
                    .echo_path
                    .as_ref()
                    .map(|p| format!(" path={p}"))
                    .unwrap_or_default(),
                r.observed
                    .echo_host
                    .as_ref()
                    .map(|h| format!(" host={h}"))
                    .unwrap_or_default(),
                r.observed
                    .echo_length
                    .map(|l| format!(" length={l}"))
                    .unwrap_or_default(),
                (!r.observed.origin_targets.is_empty())
                    .then(|| format!(" origin-targets={}", r.observed.origin_targets.join(",")))
                    .unwrap_or_default(),
            ),
            None => "blocked (no decisive record)".to_string(),
        };
        out.push_str(&format!(
            "  {}: expected [{}] observed [{}] -> {}\n",
            r.payload,
            expected,
            observed,
            if r.met { "MET" } else { "UNMET" }
        ));
    }
    out.push_str(&format!(
        "{}: {}\n",
        report.scenario,
        if report.all_met { "all expectations met" } else { "EXPECTATIONS UNMET" }
    ));
    out
}

/// The `decode_token` helper is re-exported for report tooling that reads
/// raw record lines.
pub fn token_to_string(token: &str) -> String {
    String::from_utf8_lossy(&decode_token(token)).into_owned()
}
