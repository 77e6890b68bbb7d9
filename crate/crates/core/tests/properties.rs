mod common;

use common::*;
use mctnet::blocks::AdaptiveFusion;
use mctnet::config::RunConfig;
use mctnet::data::synth::{generate_one, SplitCounts, SynthConfig};
use mctnet::data::tile::{anchors, tile, untile};
use mctnet::metrics::{confusion, metrics};
use mctnet::network::{inverse_frequency_weights, Mctnet, NetworkConfig};
use mctnet::nn::{Ctx, Mode};
use mctnet::oracle;
use mctnet::tensor::{Tape, Tensor};
use mctnet::training::{lr_at, OptimConfig};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    random(&shape, &mut rng(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(n in 1usize..4, k in 1usize..6, m in 1usize..4, scale in 0.1f64..60.0, seed: u64) {
        let x = tensor(vec![n, k, m], seed);
        let x = Tensor::from_fn(x.shape(), |i| x.data()[i] * scale);
        let mut t = Tape::new();
        let xv = t.constant(x).unwrap();
        let y = t.softmax(xv, 1).unwrap();
        let y = t.value(y);
        for b in 0..n {
            for j in 0..m {
                let col: Vec<f64> = (0..k).map(|c| y.data()[(b * k + c) * m + j]).collect();
                prop_assert!(col.iter().all(|&p| p >= 0.0));
                prop_assert!((col.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn conv_matches_nested_loops(
        n in 1usize..=2, cin in 1usize..=4, cout in 1usize..=4,
        h in 3usize..=9, w in 3usize..=9, k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..=2, pad in 0usize..=1, bias: bool, seed: u64,
    ) {
        let x = tensor(vec![n, cin, h, w], seed);
        let wt = tensor(vec![cout, cin, k, k], seed ^ 1);
        let b = bias.then(|| tensor(vec![cout], seed ^ 2));
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()).unwrap(), t.constant(wt.clone()).unwrap());
        let bv = b.clone().map(|b| t.constant(b).unwrap());
        let y = t.conv2d(xv, wv, bv, stride, pad).unwrap();
        prop_assert!(max_abs_diff(t.value(y), &oracle::conv2d(&x, &wt, b.as_ref(), stride, pad)) <= 1e-12);
    }

    #[test]
    fn depthwise_matches_block_diagonal_conv(
        n in 1usize..=2, c in 1usize..=4, h in 3usize..=9, w in 3usize..=9, stride in 1usize..=2, seed: u64,
    ) {
        let x = tensor(vec![n, c, h, w], seed);
        let wt = tensor(vec![c, 1, 3, 3], seed ^ 3);
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()).unwrap(), t.constant(wt.clone()).unwrap());
        let y = t.depthwise_conv2d(xv, wv, stride, 1).unwrap();
        let want = oracle::conv2d(&x, &oracle::depthwise_as_dense(&wt), None, stride, 1);
        prop_assert!(max_abs_diff(t.value(y), &want) <= 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one(n in 1usize..=2, l in 1usize..=10, heads in 1usize..=3, d in 1usize..=3, seed: u64) {
        let shape = vec![n, l, heads * d];
        let (q, k, v) = (tensor(shape.clone(), seed), tensor(shape.clone(), seed ^ 4), tensor(shape, seed ^ 5));
        let mut t = Tape::new();
        let (qv, kv, vv) = (t.constant(q).unwrap(), t.constant(k).unwrap(), t.constant(v).unwrap());
        let y = t.multi_head_attention(qv, kv, vv, heads).unwrap();
        let probs = t.attention_probs(y).unwrap();
        for row in probs.data().chunks(l) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn fusion_stays_inside_the_branch_envelope(c in 1usize..=5, n in 2usize..=3, seed: u64) {
        let (fuse, mut store) = build(seed, |b| AdaptiveFusion::build(b, c, 2, 2));
        randomize(&mut store, &mut rng(seed ^ 6));
        let (local, global) = (tensor(vec![n, c, 2, 3], seed ^ 7), tensor(vec![n, c, 2, 3], seed ^ 8));
        let mut ctx = Ctx::new(&store, Mode::Train);
        let (a, b) = (ctx.input(local.clone()).unwrap(), ctx.input(global.clone()).unwrap());
        let fused = fuse.forward_gates(&mut ctx, a, b).unwrap();
        for (i, &y) in ctx.value(fused.output).data().iter().enumerate() {
            let (lo, hi) = (local.data()[i].min(global.data()[i]), local.data()[i].max(global.data()[i]));
            prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
        }
        let (wl, wg) = (ctx.value(fused.w_local).data(), ctx.value(fused.w_global).data());
        for (a, b) in wl.iter().zip(wg) {
            prop_assert!((0.0..=1.0).contains(a) && (0.0..=1.0).contains(b));
            prop_assert!((a + b - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn metrics_are_bounded_and_harmonic(
        pairs in prop::collection::vec((0u8..=1, 0u8..=1), 1..200),
    ) {
        let (pred, truth): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let m = metrics(&confusion(&pred, &truth).unwrap());
        for v in [m.precision, m.recall, m.f1, m.oa] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.f1 <= 2.0 * m.precision.min(m.recall) + 1e-15);
        if m.precision + m.recall > 0.0 {
            let h = 2.0 * m.precision * m.recall / (m.precision + m.recall);
            prop_assert!((m.f1 - h).abs() <= 1e-15);
        }
    }

    #[test]
    fn confusion_ignores_pixel_order(
        pairs in prop::collection::vec((0u8..=1, 0u8..=1), 1..200),
        seed: u64,
    ) {
        use rand::seq::SliceRandom;
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rng(seed));
        let (p1, t1): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let (p2, t2): (Vec<u8>, Vec<u8>) = shuffled.into_iter().unzip();
        prop_assert_eq!(confusion(&p1, &t1).unwrap(), confusion(&p2, &t2).unwrap());
    }

    #[test]
    fn schedule_has_one_step(total in 1usize..600, lr0 in 1e-5f64..1.0) {
        let cfg = OptimConfig { total_epochs: total, lr0, ..OptimConfig::default() };
        let lrs: Vec<f64> = (0..total).map(|e| lr_at(e, &cfg)).collect();
        let jumps: Vec<usize> = (1..total).filter(|&e| lrs[e] != lrs[e - 1]).collect();
        let d = total / 3;
        if d == 0 {
            prop_assert!(jumps.is_empty());
            prop_assert!(lrs.iter().all(|&l| l == lr0 * 0.1));
        } else {
            prop_assert_eq!(jumps, vec![d]);
            prop_assert_eq!(lrs[0], lr0);
            prop_assert_eq!(lrs[d], lr0 * 0.1);
        }
    }

    #[test]
    fn class_weights_stay_clamped(mask in prop::collection::vec(0u8..=1, 1..500)) {
        let w = inverse_frequency_weights(&mask);
        prop_assert!(w.iter().all(|&x| (0.1..=10.0).contains(&x)));
    }

    #[test]
    fn anchors_cover_the_extent(extent in 1usize..700, size in 1usize..300, stride in 1usize..300) {
        prop_assume!(size <= extent);
        let a = anchors(extent, size, stride).unwrap();
        prop_assert_eq!(a[0], 0);
        prop_assert_eq!(*a.last().unwrap(), extent - size);
        prop_assert!(a.windows(2).all(|w| w[0] < w[1] && w[1] - w[0] <= stride));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mask_is_exactly_the_union_of_regions(seed: u64, size in 24usize..80, lo in 0usize..3, extra in 0usize..3) {
        let cfg = SynthConfig {
            image_size: size,
            changes: [lo, lo + extra],
            size_mix: [1.0, 1.0, 0.0],
            splits: SplitCounts { train: 1, val: 0, test: 0 },
            ..SynthConfig::default()
        };
        let s = generate_one(&cfg, seed, 0).unwrap();
        let mut union = vec![0u8; s.pixels()];
        for k in 0..s.regions.len() {
            for i in s.region_pixels(k) {
                union[i] = 1;
            }
            prop_assert_eq!(s.region_pixels(k).count(), s.regions[k].pixels);
        }
        prop_assert_eq!(union, s.mask);
    }

    #[test]
    fn tiles_reassemble(seed: u64, size in 20usize..70, tile_size in 8usize..20, stride in 4usize..20) {
        let cfg = SynthConfig {
            image_size: size,
            size_mix: [1.0, 0.0, 0.0],
            splits: SplitCounts { train: 1, val: 0, test: 0 },
            ..SynthConfig::default()
        };
        let s = generate_one(&cfg, seed, 0).unwrap();
        prop_assume!(stride <= tile_size);
        let tiles = tile(&s, tile_size, stride).unwrap();
        let (t1, t2, mask) = untile(&tiles, size, size);
        prop_assert_eq!(t1, s.image_t1);
        prop_assert_eq!(t2, s.image_t2);
        prop_assert_eq!(mask, s.mask);
    }

    #[test]
    fn config_round_trips(seed in 0..=i64::MAX as u64, epochs in 1usize..100, batch in 1usize..16, size in prop::sample::select(vec![32usize, 64, 96])) {
        let mut cfg = RunConfig { seed, ..RunConfig::default() };
        cfg.optim.total_epochs = epochs;
        cfg.optim.batch_size = batch;
        cfg.synth.image_size = size;
        cfg.synth.small_radius = [2, 4];
        cfg.synth.size_mix = [1.0, 0.0, 0.0];
        prop_assert!(cfg.validate().is_ok());
        let text = cfg.resolved();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.resolved(), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn forward_is_bit_reproducible(seed: u64) {
        let (net, store) = Mctnet::build(NetworkConfig::tiny(), seed).unwrap();
        let (a, b) = (tensor(vec![1, 3, 32, 32], seed), tensor(vec![1, 3, 32, 32], seed ^ 9));
        let run = || {
            let mut ctx = Ctx::new(&store, Mode::Train);
            let (av, bv) = (ctx.input(a.clone()).unwrap(), ctx.input(b.clone()).unwrap());
            let y = net.forward(&mut ctx, av, bv).unwrap();
            ctx.value(y).to_le_bytes()
        };
        prop_assert_eq!(run(), run());
    }
}
