//! Trains the full network and its local-only ablation on the same data and
//! compares region recall per change size on the test split.
//!
//! cargo run --release --example multiscale [-- path/to/config.toml]

use std::path::PathBuf;

use mctnet::config::RunConfig;
use mctnet::data::SizeClass;
use mctnet::experiments::global_branch_ablation;

fn main() -> mctnet::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/multiscale.toml")));
    let cfg = RunConfig::load(&path)?;
    let report = global_branch_ablation(&cfg, Some(&mut std::io::stdout()))?;
    println!("size     full    local-only  margin");
    for class in SizeClass::ALL {
        println!(
            "{:<7}  {:.4}  {:.4}      {:+.4}",
            class.name(),
            report.full.region_recall(class),
            report.local_only.region_recall(class),
            report.margin(class)
        );
    }
    for (name, arm) in [("full", &report.full), ("local-only", &report.local_only)] {
        let m = arm.test.metrics;
        println!(
            "{name}: best_epoch={} f1={:.4} oa={:.4} seconds={:.0}",
            arm.best_epoch, m.f1, m.oa, arm.seconds
        );
    }
    Ok(())
}
