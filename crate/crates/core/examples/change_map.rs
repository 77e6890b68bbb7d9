//! Predict a change map for one pair and write the binary and colour-coded
//! rasters next to the inputs.
//!
//! cargo run --release --example change_map [-- out_dir]

use std::path::PathBuf;

use mctnet::data::raster::{image_raster, write_change_map};
use mctnet::data::synth::{generate_one, SynthConfig};
use mctnet::metrics::{confusion, metrics};
use mctnet::network::{Mctnet, NetworkConfig};
use mctnet::training::predict_masks;

fn main() -> mctnet::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../target/example-maps")));
    std::fs::create_dir_all(&dir).map_err(|source| mctnet::Error::Io { path: dir.clone(), source })?;
    let cfg = SynthConfig {
        image_size: 64,
        ..SynthConfig::default()
    };
    let s = generate_one(&cfg, 5, 0)?;
    // Untrained weights: the map is noise, but the plumbing is the same.
    let (net, store) = Mctnet::build(NetworkConfig::tiny(), 5)?;
    let pred = predict_masks(&net, &store, std::slice::from_ref(&s), 1)?.remove(0);

    image_raster(&s.image_t1, s.width, s.height).write(&dir.join("t1.ppm"))?;
    image_raster(&s.image_t2, s.width, s.height).write(&dir.join("t2.ppm"))?;
    write_change_map(&pred, None, s.width, s.height, &dir.join("change.pgm"))?;
    write_change_map(&pred, Some(&s.mask), s.width, s.height, &dir.join("errors.ppm"))?;
    let m = metrics(&confusion(&pred, &s.mask)?);
    println!("wrote maps to {} (f1={:.4})", dir.display(), m.f1);
    Ok(())
}
