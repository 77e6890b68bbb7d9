//! Generate a synthetic change-detection dataset and summarise its regions.
//!
//! cargo run --release --example gen_dataset [-- out_dir]

use std::collections::BTreeMap;
use std::path::PathBuf;

use mctnet::data::dataset::write_dataset;
use mctnet::data::synth::{generate, SynthConfig};

fn main() -> mctnet::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../target/example-data")));
    let cfg = SynthConfig {
        image_size: 64,
        ..SynthConfig::default()
    };
    let samples = generate(&cfg, 7)?;
    let entries = write_dataset(&dir, &samples, &cfg.splits)?;
    println!("wrote {} samples to {}", entries.len(), dir.display());

    let mut by_class: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut by_kind: BTreeMap<&str, usize> = BTreeMap::new();
    let mut changed = 0usize;
    for s in &samples {
        changed += s.mask.iter().filter(|&&m| m == 1).count();
        for r in &s.regions {
            let e = by_class.entry(r.size_class.name()).or_default();
            e.0 += 1;
            e.1 += r.pixels;
            *by_kind.entry(r.kind.name()).or_default() += 1;
        }
    }
    let total: usize = samples.iter().map(|s| s.pixels()).sum();
    println!("changed pixels {:.2}%", 100.0 * changed as f64 / total as f64);
    for (class, (n, px)) in by_class {
        println!("{class:<6} regions={n:<4} mean_pixels={:.1}", px as f64 / n as f64);
    }
    for (kind, n) in by_kind {
        println!("{kind:<12} {n}");
    }
    Ok(())
}
