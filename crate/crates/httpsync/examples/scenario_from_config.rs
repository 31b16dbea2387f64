//! Scenario configs drive full process chains: every hop is launched as its
//! own OS process speaking real TCP on loopback, payloads are graded against
//! per-payload expectations, and the same file also describes the undefended
//! baseline. This example loads a shipped fixture and runs both modes.
//!
//! The hops are spawned from the crate's own binary, so build it first:
//!
//!     cargo build
//!     cargo run --example scenario_from_config

use httpsync::harness::scenario::{render_summary, run_scenario, RunOptions, ScenarioConfig};
use std::path::PathBuf;
use std::time::Duration;

fn main() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let config_path = manifest.join("fixtures/cl-te-smuggle.json");
    let cfg: ScenarioConfig =
        serde_json::from_slice(&std::fs::read(&config_path).expect("fixture readable"))
            .expect("fixture parses");

    // Examples are built next to the binary: target/debug/examples/<this>,
    // target/debug/httpsync.
    let binary = std::env::current_exe()
        .expect("own path")
        .parent()
        .and_then(|p| p.parent())
        .map(|p| p.join("httpsync"))
        .filter(|p| p.exists())
        .expect("node binary not found — run `cargo build` first");

    for defended in [true, false] {
        let report = run_scenario(
            &cfg,
            &RunOptions {
                binary: &binary,
                defended,
                verbose: false,
                client_timeout: Duration::from_secs(2),
            },
        )
        .expect("scenario runs");
        print!("{}", render_summary(&report));
        println!();
        assert!(report.all_met, "shipped fixtures must meet their expectations");
    }
    println!("same config, two verdicts: the attack travels only when hops stay silent");
}
