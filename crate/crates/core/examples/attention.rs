//! Multi-head self-attention on the tape against a direct evaluation, and
//! what the attention rows look like.
//!
//! cargo run --release --example attention

use mctnet::oracle;
use mctnet::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mctnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (tokens, heads, dim) = (6, 2, 8);
    let mut draw = || Tensor::from_fn(&[1, tokens, dim], |_| rng.gen_range(-1.0..1.0));
    let (q, k, v) = (draw(), draw(), draw());

    let mut t = Tape::new();
    let (qv, kv, vv) = (t.constant(q.clone())?, t.constant(k.clone())?, t.constant(v.clone())?);
    let y = t.multi_head_attention(qv, kv, vv, heads)?;
    let probs = t.attention_probs(y).expect("attention output");
    let (want, want_probs) = oracle::attention(&q, &k, &v, heads);

    let diff = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    println!("output max |diff| = {:.2e}", diff(t.value(y), &want));
    println!("probs  max |diff| = {:.2e}", diff(&probs, &want_probs));
    for (h, head) in probs.data().chunks(tokens * tokens).enumerate() {
        println!("head {h}");
        for row in head.chunks(tokens) {
            let cells: Vec<String> = row.iter().map(|p| format!("{p:.3}")).collect();
            println!("  {}  sum={:.12}", cells.join(" "), row.iter().sum::<f64>());
        }
    }
    Ok(())
}
