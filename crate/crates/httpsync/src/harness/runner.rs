//! In-process chains: every hop is a thread in this process, sharing one
//! in-memory record sink. This is the cheap way to stand up a topology for
//! oracle sweeps, benchmarks, and examples; scenario configs that want real
//! process isolation use the process runner instead.

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use crate::harness::client::{send_request, ClientOutcome, ClientResponse};
use crate::node::{
    spawn_node, MemorySink, NodeConfig, NodeHandle, PathRewrite, Record, RecordSink, TransferMode,
};
use crate::sync::{SyncKey, ValidationPolicy};
use crate::wire::ParserPersonality;

/// One hop in a chain description. The last spec in a chain is the origin.
#[derive(Clone)]
pub struct HopSpec {
    pub personality: ParserPersonality,
    pub label: String,
    pub sync: bool,
    pub transfer_mode: TransferMode,
    pub rewrite_path: Option<PathRewrite>,
}

impl HopSpec {
    pub fn sync_preset(name: &str) -> Self {
        HopSpec {
            personality: ParserPersonality::preset(name)
                .unwrap_or_else(|| panic!("unknown preset {name}")),
            label: name.to_string(),
            sync: true,
            transfer_mode: TransferMode::Streaming,
            rewrite_path: None,
        }
    }

    pub fn oblivious_preset(name: &str) -> Self {
        HopSpec { sync: false, ..Self::sync_preset(name) }
    }
}

/// A running in-process chain. Nodes share the sink; drop stops them.
pub struct Chain {
    pub entry: SocketAddr,
    pub sink: Arc<MemorySink>,
    handles: Vec<NodeHandle>,
}

impl Chain {
    pub fn stop(mut self) {
        for h in self.handles.drain(..) {
            h.stop();
        }
    }
}

/// Spawn `specs` as a chain, last hop being the origin. All sync-enabled
/// hops share `key` and `policy`.
pub fn spawn_chain(
    specs: &[HopSpec],
    key: &SyncKey,
    policy: &ValidationPolicy,
    read_timeout: Duration,
    verbose: bool,
) -> io::Result<Chain> {
    assert!(!specs.is_empty(), "a chain needs at least an origin");
    let sink = MemorySink::new();
    let mut handles: Vec<NodeHandle> = Vec::with_capacity(specs.len());
    let mut next: Option<SocketAddr> = None;
    for spec in specs.iter().rev() {
        let mut cfg = match next {
            Some(up) => NodeConfig::proxy(up, spec.personality),
            None => NodeConfig::origin(spec.personality),
        }
        .with_label(&spec.label);
        if spec.sync {
            cfg = cfg.with_sync(key.clone(), policy.clone());
        }
        cfg.transfer_mode = spec.transfer_mode;
        cfg.rewrite_path = spec.rewrite_path.clone();
        cfg.read_timeout = read_timeout;
        cfg.verbose = verbose;
        let handle = spawn_node(cfg, sink.clone() as Arc<dyn RecordSink>)?;
        next = Some(handle.addr());
        handles.push(handle);
    }
    Ok(Chain { entry: next.expect("non-empty chain"), sink, handles })
}

/// The outcome of driving one payload through a chain, from the client's
/// point of view plus the first decisive termination record (if any).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LiveVerdict {
    Pass(ClientResponse),
    /// No usable response. Carries the first decisive TERMINATE emitted
    /// after the payload went in, when one surfaced in time; a silent stall
    /// carries `None`.
    Blocked(Option<Record>),
}

impl LiveVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, LiveVerdict::Pass(_))
    }
}

/// Send `payload` on a fresh connection and classify what happened. Records
/// are scoped to this payload by position in the shared sink.
pub fn drive_payload(
    chain: &Chain,
    payload: &[u8],
    timeout: Duration,
) -> io::Result<LiveVerdict> {
    let mark = chain.sink.len();
    let outcome = send_request(chain.entry, payload, timeout)?;
    match outcome {
        ClientOutcome::Response(resp) if resp.status == 200 => Ok(LiveVerdict::Pass(resp)),
        ClientOutcome::Response(_) | ClientOutcome::ConnectionClosed => {
            Ok(LiveVerdict::Blocked(poll_decisive(&chain.sink, mark, Duration::from_secs(2))))
        }
    }
}

/// Wait briefly for a decisive TERMINATE at or after `mark`. Node threads
/// emit records asynchronously, so give them a moment.
pub fn poll_decisive(sink: &MemorySink, mark: usize, patience: Duration) -> Option<Record> {
    let deadline = std::time::Instant::now() + patience;
    loop {
        let records = sink.snapshot();
        for r in records.iter().skip(mark) {
            if let Record::Terminate { cause, .. } = r {
                if cause.is_decisive() {
                    return Some(r.clone());
                }
            }
        }
        if std::time::Instant::now() >= deadline {
            return None;
        }
        std::thread::sleep(Duration::from_millis(25));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::corpus;
    use crate::node::Cause;
    use crate::sync::DiscrepancyField;

    #[test]
    fn chain_runner_reports_pass_and_block() {
        let key = SyncKey::from_bytes([7; 32]);
        let chain = spawn_chain(
            &[
                HopSpec::sync_preset("cl-preferring-proxy"),
                HopSpec::sync_preset("te-sanitizing-origin"),
            ],
            &key,
            &ValidationPolicy::strict(),
            Duration::from_secs(3),
            false,
        )
        .unwrap();

        let benign = corpus::request("GET / HTTP/1.1", &[("Host", "h")], b"");
        let v = drive_payload(&chain, &benign, Duration::from_secs(3)).unwrap();
        assert!(v.passed(), "benign: {v:?}");

        let v = drive_payload(&chain, &corpus::listing1(), Duration::from_secs(3)).unwrap();
        match v {
            LiveVerdict::Blocked(Some(Record::Terminate { hop, cause, field, .. })) => {
                assert_eq!(hop, 2);
                assert_eq!(cause, Cause::SyncInvalid);
                assert_eq!(field, Some(DiscrepancyField::Length));
            }
            other => panic!("expected decisive block, got {other:?}"),
        }
        chain.stop();
    }
}
