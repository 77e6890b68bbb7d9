//! Pixel metrics and size-stratified region recall for a hand-made
//! prediction.
//!
//! cargo run --release --example metrics

use mctnet::data::synth::{generate, SynthConfig};
use mctnet::metrics::{confusion, metrics, size_stratified_metrics};

fn main() -> mctnet::Result<()> {
    let cfg = SynthConfig {
        image_size: 64,
        ..SynthConfig::default()
    };
    let samples = generate(&cfg, 11)?;
    let sample = samples.iter().max_by_key(|s| s.regions.len()).expect("samples").clone();
    // Keep the true mask except for the first region, and add a stray block.
    let mut pred = sample.mask.clone();
    for i in sample.region_pixels(0) {
        pred[i] = 0;
    }
    for y in 0..4 {
        for x in 0..4 {
            pred[y * sample.width + x] = 1;
        }
    }
    let c = confusion(&pred, &sample.mask)?;
    let m = metrics(&c);
    println!("tp={} fp={} fn={} tn={}", c.tp, c.fp, c.fn_, c.tn);
    println!("precision={:.4} recall={:.4} f1={:.4} oa={:.4}", m.precision, m.recall, m.f1, m.oa);
    let by_size = size_stratified_metrics(&[pred], std::slice::from_ref(&sample))?;
    for (class, r) in &by_size {
        println!("{:<6} regions={} detected={} recall={:.3}", class.name(), r.regions, r.detected, r.recall());
    }
    Ok(())
}
