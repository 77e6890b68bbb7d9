//! Generate a small dataset, train the tiny network on it and score the
//! best checkpoint on the test split.
//!
//! cargo run --release --example train_tiny [-- path/to/config.toml]

use std::path::PathBuf;

use mctnet::cli::{cmd_eval, cmd_gen, cmd_train};
use mctnet::config::RunConfig;
use mctnet::data::synth::Split;

fn main() -> mctnet::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/tiny.toml")));
    let cfg = RunConfig::load(&path)?;
    cmd_gen(&cfg)?;
    let report = cmd_train(&cfg, Some(&mut std::io::stdout()))?;
    println!("best_epoch={} best_val_f1={:.4}", report.best_epoch, report.best_f1);
    let test = cmd_eval(&cfg, &cfg.paths.checkpoint, Split::Test)?;
    print!("{}", test.table());
    Ok(())
}
