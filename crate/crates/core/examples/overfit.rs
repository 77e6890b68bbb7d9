//! Memorise a handful of synthetic pairs; a network that cannot do this has
//! a broken forward or backward pass.
//!
//! cargo run --release --example overfit [-- path/to/config.toml]

use std::path::PathBuf;

use mctnet::config::RunConfig;
use mctnet::experiments::overfit;

fn main() -> mctnet::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/overfit.toml")));
    let cfg = RunConfig::load(&path)?;
    let report = overfit(&cfg, Some(&mut std::io::stdout()))?;
    let m = report.train.metrics;
    println!(
        "epochs={} train_f1={:.4} precision={:.4} recall={:.4} seconds={:.0}",
        report.records.len(),
        m.f1,
        m.precision,
        m.recall,
        report.seconds
    );
    Ok(())
}
