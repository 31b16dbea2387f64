//! Measure what synchronization costs: the same request shapes are timed
//! against an oblivious two-hop chain and a fully synchronized one, both
//! in-process over loopback. This example runs a reduced grid; the `bench`
//! subcommand of the binary runs the full one.
//!
//!     cargo run --release --example overhead_bench

use httpsync::harness::bench::{render_bench_table, run_bench, BenchCell, BenchConfig, Transport};

fn main() {
    let cfg = BenchConfig {
        iterations: 200,
        warmup: 20,
        scale_large_cells: true,
        cells: vec![
            BenchCell { label: "cl-0b".into(), transport: Transport::ContentLength { size: 0 } },
            BenchCell {
                label: "cl-100b".into(),
                transport: Transport::ContentLength { size: 100 },
            },
            BenchCell {
                label: "cl-100kb".into(),
                transport: Transport::ContentLength { size: 100_000 },
            },
            BenchCell {
                label: "te-100kb-x100".into(),
                transport: Transport::Chunked { size: 100_000, chunks: 100 },
            },
            BenchCell {
                label: "te-100kb-x1000".into(),
                transport: Transport::Chunked { size: 100_000, chunks: 1000 },
            },
        ],
    };
    let results = run_bench(&cfg).expect("bench runs");
    print!("{}", render_bench_table(&results));
    println!(
        "\nthe synchronized chain parses, validates, and re-signs history on every hop;\n\
         the oblivious chain just shovels bytes — the delta is the cost of the defense"
    );
}
