//! Round-trip overhead measurement: synchronized chain vs oblivious chain.
//!
//! Each cell in the grid describes one request shape (body size and
//! transport). The bench drives that shape through two otherwise identical
//! two-hop chains — one forwarding obliviously, one carrying and verifying
//! processing history — on a persistent client connection, and reports the
//! mean round-trip of each together with the relative overhead.

use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::harness::corpus::{chunk_split, request};
use crate::harness::runner::{spawn_chain, Chain, HopSpec};
use crate::harness::scenario::pattern_bytes;
use crate::node::{parse_response_meta, read_head};
use crate::sync::{SyncKey, ValidationPolicy};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BenchCell {
    pub label: String,
    pub transport: Transport,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
pub enum Transport {
    ContentLength { size: u64 },
    Chunked { size: u64, chunks: usize },
}

impl Transport {
    pub fn body_size(&self) -> u64 {
        match self {
            Transport::ContentLength { size } | Transport::Chunked { size, .. } => *size,
        }
    }

    pub fn chunks(&self) -> Option<usize> {
        match self {
            Transport::ContentLength { .. } => None,
            Transport::Chunked { chunks, .. } => Some(*chunks),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Timed iterations per cell.
    #[serde(default = "default_iterations")]
    pub iterations: u32,
    #[serde(default = "default_warmup")]
    pub warmup: u32,
    /// Scale iterations down for cells that move a lot of bytes (keeps the
    /// full grid fast). Off means every cell runs exactly `iterations`.
    #[serde(default = "default_true")]
    pub scale_large_cells: bool,
    pub cells: Vec<BenchCell>,
}

fn default_iterations() -> u32 {
    400
}

fn default_warmup() -> u32 {
    40
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub label: String,
    pub body_size: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chunks: Option<usize>,
    pub iterations: u32,
    pub baseline_mean_us: f64,
    pub sync_mean_us: f64,
    pub overhead_pct: f64,
}

/// The full measurement grid: empty plus 100B/100KB/1MB/10MB bodies under
/// Content-Length, and every chunk-count variant that fits the body.
pub fn default_grid() -> BenchConfig {
    let sizes: [u64; 4] = [100, 100_000, 1_000_000, 10_000_000];
    let chunk_counts: [usize; 3] = [100, 1000, 10_000];
    let mut cells = vec![cell_cl(0)];
    for &s in &sizes {
        cells.push(cell_cl(s));
    }
    for &s in &sizes {
        for &c in &chunk_counts {
            if (c as u64) <= s {
                cells.push(cell_chunked(s, c));
            }
        }
    }
    BenchConfig {
        iterations: default_iterations(),
        warmup: default_warmup(),
        scale_large_cells: true,
        cells,
    }
}

/// The grid behind the performance claims: Content-Length bodies up to
/// 1MiB and a fixed 100KiB body across a 100x chunk-count spread, every
/// cell at its full iteration count.
pub fn acceptance_grid() -> BenchConfig {
    BenchConfig {
        iterations: 1000,
        warmup: 50,
        scale_large_cells: false,
        cells: vec![
            cell_cl(0),
            cell_cl(100),
            cell_cl(100_000),
            cell_cl(1_048_576),
            cell_chunked(102_400, 100),
            cell_chunked(102_400, 1000),
            cell_chunked(102_400, 10_000),
        ],
    }
}

fn cell_cl(size: u64) -> BenchCell {
    BenchCell {
        label: format!("cl-{}", human_size(size)),
        transport: Transport::ContentLength { size },
    }
}

fn cell_chunked(size: u64, chunks: usize) -> BenchCell {
    BenchCell {
        label: format!("te-{}-x{}", human_size(size), chunks),
        transport: Transport::Chunked { size, chunks },
    }
}

fn human_size(size: u64) -> String {
    match size {
        0 => "0b".into(),
        s if s % 1_048_576 == 0 => format!("{}mib", s / 1_048_576),
        s if s % 1_000_000 == 0 => format!("{}mb", s / 1_000_000),
        s if s % 1_000 == 0 => format!("{}kb", s / 1_000),
        s => format!("{s}b"),
    }
}

fn payload_for(transport: &Transport) -> Vec<u8> {
    let line = "POST /bench HTTP/1.1";
    let host = ("Host", "bench.example.com");
    match transport {
        Transport::ContentLength { size: 0 } => request(line, &[host], b""),
        Transport::ContentLength { size } => {
            let body = pattern_bytes(*size as usize);
            let cl = body.len().to_string();
            request(line, &[host, ("Content-Length", &cl)], &body)
        }
        Transport::Chunked { size, chunks } => {
            let body = pattern_bytes(*size as usize);
            request(
                line,
                &[host, ("Transfer-Encoding", "chunked")],
                &chunk_split(&body, (*chunks).max(1)),
            )
        }
    }
}

/// Fewer timed iterations for shapes that move a lot of bytes, so a full
/// grid finishes in minutes without starving the big cells of samples.
fn scaled_iterations(base: u32, transport: &Transport) -> u32 {
    let size = transport.body_size();
    let by_size = if size >= 4 * 1_048_576 {
        (base / 20).max(15)
    } else if size >= 256 * 1024 {
        (base / 5).max(40)
    } else {
        base
    };
    match transport.chunks() {
        Some(c) if c >= 10_000 => by_size.min(120).max(15),
        _ => by_size,
    }
}

struct BenchClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl BenchClient {
    fn connect(addr: SocketAddr) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(Duration::from_secs(60)))?;
        let reader = BufReader::new(stream.try_clone()?);
        let writer = BufWriter::with_capacity(64 * 1024, stream);
        Ok(BenchClient { reader, writer })
    }

    /// One request-response exchange on the persistent connection.
    fn round_trip(&mut self, payload: &[u8]) -> io::Result<()> {
        self.writer.write_all(payload)?;
        self.writer.flush()?;
        let head = read_head(&mut self.reader)?
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "server closed"))?;
        let meta = parse_response_meta(&head)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "bad response head"))?;
        if meta.status != 200 {
            return Err(io::Error::other(format!("status {}", meta.status)));
        }
        if let Some(n) = meta.content_length {
            let mut body = vec![0u8; n as usize];
            self.reader.read_exact(&mut body)?;
        } else if meta.chunked {
            self.drain_chunked_body()?;
        }
        Ok(())
    }

    fn drain_chunked_body(&mut self) -> io::Result<()> {
        loop {
            let mut line = Vec::new();
            read_crlf_line(&mut self.reader, &mut line)?;
            let hex = line.split(|&b| b == b';').next().unwrap_or(&line);
            let text = std::str::from_utf8(hex)
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "chunk size"))?;
            let size = u64::from_str_radix(text.trim(), 16)
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "chunk size"))?;
            if size == 0 {
                // Trailers until the blank line.
                loop {
                    let mut t = Vec::new();
                    read_crlf_line(&mut self.reader, &mut t)?;
                    if t.is_empty() {
                        return Ok(());
                    }
                }
            }
            let mut chunk = vec![0u8; size as usize];
            self.reader.read_exact(&mut chunk)?;
            let mut crlf = [0u8; 2];
            self.reader.read_exact(&mut crlf)?;
        }
    }
}

fn read_crlf_line<R: BufRead>(r: &mut R, out: &mut Vec<u8>) -> io::Result<()> {
    r.read_until(b'\n', out)?;
    while out.last() == Some(&b'\n') || out.last() == Some(&b'\r') {
        out.pop();
    }
    Ok(())
}

/// Time both variants with paired, alternating iterations on two persistent
/// connections. Host drift (scheduler churn, thermal shifts, background
/// load) then lands on both chains almost identically, which is what makes
/// the overhead ratio stable enough to assert on.
fn time_pair(
    baseline_addr: SocketAddr,
    sync_addr: SocketAddr,
    payload: &[u8],
    warmup: u32,
    iterations: u32,
) -> io::Result<(f64, f64)> {
    let mut baseline = BenchClient::connect(baseline_addr)?;
    let mut synced = BenchClient::connect(sync_addr)?;
    for _ in 0..warmup {
        baseline.round_trip(payload)?;
        synced.round_trip(payload)?;
    }
    let mut baseline_total = Duration::ZERO;
    let mut sync_total = Duration::ZERO;
    let timed = |client: &mut BenchClient| -> io::Result<Duration> {
        let start = Instant::now();
        client.round_trip(payload)?;
        Ok(start.elapsed())
    };
    for i in 0..iterations {
        // Alternate which variant goes first so neither always pays the
        // wake-from-idle cost.
        if i % 2 == 0 {
            baseline_total += timed(&mut baseline)?;
            sync_total += timed(&mut synced)?;
        } else {
            sync_total += timed(&mut synced)?;
            baseline_total += timed(&mut baseline)?;
        }
    }
    let mean = |total: Duration| total.as_secs_f64() * 1e6 / iterations as f64;
    Ok((mean(baseline_total), mean(sync_total)))
}

fn two_hop(sync: bool) -> Vec<HopSpec> {
    let make = if sync { HopSpec::sync_preset } else { HopSpec::oblivious_preset };
    vec![make("strict-gateway"), make("strict-gateway")]
}

/// Run the grid. Both chains are spawned once and reused across cells.
pub fn run_bench(cfg: &BenchConfig) -> io::Result<Vec<BenchResult>> {
    let key = SyncKey::generate();
    let policy = ValidationPolicy::default();
    let timeout = Duration::from_secs(60);
    let baseline = spawn_chain(&two_hop(false), &key, &policy, timeout, false)?;
    let synced = spawn_chain(&two_hop(true), &key, &policy, timeout, false)?;
    let results = run_cells(cfg, &baseline, &synced);
    baseline.stop();
    synced.stop();
    results
}

fn run_cells(cfg: &BenchConfig, baseline: &Chain, synced: &Chain) -> io::Result<Vec<BenchResult>> {
    let mut results = Vec::with_capacity(cfg.cells.len());
    for cell in &cfg.cells {
        let payload = payload_for(&cell.transport);
        let iterations = if cfg.scale_large_cells {
            scaled_iterations(cfg.iterations, &cell.transport)
        } else {
            cfg.iterations.max(1)
        };
        let warmup = cfg.warmup.min(iterations);
        let (baseline_mean_us, sync_mean_us) =
            time_pair(baseline.entry, synced.entry, &payload, warmup, iterations)?;
        results.push(BenchResult {
            label: cell.label.clone(),
            body_size: cell.transport.body_size(),
            chunks: cell.transport.chunks(),
            iterations,
            baseline_mean_us,
            sync_mean_us,
            overhead_pct: (sync_mean_us - baseline_mean_us) / baseline_mean_us * 100.0,
        });
    }
    Ok(results)
}

pub fn render_bench_table(results: &[BenchResult]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<18} {:>12} {:>8} {:>6} {:>14} {:>14} {:>10}\n",
        "cell", "body", "chunks", "iters", "baseline (us)", "synced (us)", "overhead"
    ));
    for r in results {
        out.push_str(&format!(
            "{:<18} {:>12} {:>8} {:>6} {:>14.1} {:>14.1} {:>9.1}%\n",
            r.label,
            r.body_size,
            r.chunks.map(|c| c.to_string()).unwrap_or_else(|| "-".into()),
            r.iterations,
            r.baseline_mean_us,
            r.sync_mean_us,
            r.overhead_pct
        ));
    }
    out
}
