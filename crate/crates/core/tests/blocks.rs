mod common;

use common::*;
use mctnet::blocks::{
    AdaptiveFusion, BasicBlock, ConvTransBlock, EncoderLayer, MultiHeadAttention, Shortcut, StageSpec,
    TokenEmbed,
};
use mctnet::nn::{Ctx, Mode, NORM_EPS};
use mctnet::oracle;
use mctnet::tensor::{Tensor, TensorError};

fn spec(cin: usize, cout: usize, global_branch: bool) -> StageSpec {
    StageSpec {
        in_channels: cin,
        out_channels: cout,
        stride: 2,
        heads: 2,
        depth: 1,
        mlp_ratio: 2,
        fuse_reduction: 2,
        fuse_min_hidden: 2,
        global_branch,
    }
}

#[test]
fn basic_block_zero_weights_is_relu() {
    let (block, mut store) = build(1, |b| BasicBlock::build(b, 3, 3, 1));
    assert!(matches!(block.shortcut, Shortcut::Identity));
    fill(&mut store, block.conv1.weight, 0.0);
    fill(&mut store, block.conv2.weight, 0.0);
    let x = random(&[2, 3, 5, 5], &mut rng(2));
    let relu = Tensor::from_fn(x.shape(), |i| x.data()[i].max(0.0));
    for mode in [Mode::Train, Mode::Eval] {
        let mut ctx = Ctx::new(&store, mode);
        let xv = ctx.input(x.clone()).unwrap();
        let y = block.forward(&mut ctx, xv).unwrap();
        assert_eq!(ctx.value(y), &relu, "{mode:?}");
    }
}

#[test]
fn basic_block_projects_when_shape_changes() {
    let (block, store) = build(1, |b| BasicBlock::build(b, 3, 5, 2));
    let Shortcut::Projection(conv) = &block.shortcut else {
        panic!("expected a projection shortcut");
    };
    assert_eq!(store.get(conv.weight).value.shape(), &[5, 3, 1, 1]);
    assert!(conv.bias.is_none());
    let mut ctx = Ctx::new(&store, Mode::Train);
    let x = ctx.input(random(&[1, 3, 8, 6], &mut rng(3))).unwrap();
    let y = block.forward(&mut ctx, x).unwrap();
    assert_eq!(ctx.tape.shape(y), &[1, 5, 4, 3]);
    assert!(ctx.value(y).data().iter().all(|&v| v >= 0.0));
}

#[test]
fn basic_block_matches_composed_oracle() {
    let mut r = rng(4);
    for case in 0..100 {
        let (cin, cout, stride) = match case % 3 {
            0 => (3, 3, 1),
            1 => (2, 4, 2),
            _ => (4, 2, 1),
        };
        let (block, mut store) = build(case, |b| BasicBlock::build(b, cin, cout, stride));
        randomize(&mut store, &mut r);
        let x = random(&[2, cin, 6, 4], &mut r);
        let mut ctx = Ctx::new(&store, Mode::Train);
        let xv = ctx.input(x.clone()).unwrap();
        let y = block.forward(&mut ctx, xv).unwrap();

        let w = |id| value(&store, id);
        let bn = |t: &Tensor, bn: &mctnet::nn::BatchNorm| {
            oracle::batch_norm(t, w(bn.gamma).data(), w(bn.beta).data(), NORM_EPS)
        };
        let relu = |t: Tensor| Tensor::from_fn(t.shape(), |i| t.data()[i].max(0.0));
        let h = relu(bn(&oracle::conv2d(&x, &w(block.conv1.weight), None, stride, 1), &block.bn1));
        let h = bn(&oracle::conv2d(&h, &w(block.conv2.weight), None, 1, 1), &block.bn2);
        let s = match &block.shortcut {
            Shortcut::Identity => x.clone(),
            Shortcut::Projection(c) => oracle::conv2d(&x, &w(c.weight), None, stride, 0),
        };
        let want = relu(Tensor::from_fn(h.shape(), |i| h.data()[i] + s.data()[i]));
        assert!(max_abs_diff(ctx.value(y), &want) <= 1e-12, "case {case}");
    }
}

#[test]
fn single_token_attention_is_value_then_output_projection() {
    let mut r = rng(5);
    for heads in [1, 2, 4] {
        let (mha, mut store) = build(6, |b| MultiHeadAttention::build(b, 4, heads).unwrap());
        randomize(&mut store, &mut r);
        let t = random(&[3, 1, 4], &mut r);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let tv = ctx.input(t.clone()).unwrap();
        let y = mha.forward(&mut ctx, tv).unwrap();
        let v = oracle::linear(&t, &value(&store, mha.wv.weight), None);
        let bias = value(&store, mha.wo.bias.unwrap());
        let want = oracle::linear(&v, &value(&store, mha.wo.weight), Some(&bias));
        assert!(max_abs_diff(ctx.value(y), &want) <= 1e-12);
    }
}

#[test]
fn zero_query_key_weights_give_uniform_attention() {
    let mut r = rng(7);
    let (mha, mut store) = build(8, |b| MultiHeadAttention::build(b, 6, 3).unwrap());
    randomize(&mut store, &mut r);
    fill(&mut store, mha.wq.weight, 0.0);
    fill(&mut store, mha.wk.weight, 0.0);
    let l = 5;
    let t = random(&[2, l, 6], &mut r);
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let tv = ctx.input(t.clone()).unwrap();
    let (y, heads) = mha.forward_with_attention(&mut ctx, tv).unwrap();
    let probs = ctx.tape.attention_probs(heads).unwrap();
    assert!(probs.data().iter().all(|&p| (p - 1.0 / l as f64).abs() <= 1e-15));

    // every token receives the mean of the value projections
    let v = oracle::linear(&t, &value(&store, mha.wv.weight), None);
    let mean = Tensor::from_fn([2, 1, 6], |i| {
        let (n, c) = (i / 6, i % 6);
        (0..l).map(|j| v.data()[(n * l + j) * 6 + c]).sum::<f64>() / l as f64
    });
    let mean = Tensor::from_fn([2, l, 6], |i| mean.data()[(i / (l * 6)) * 6 + i % 6]);
    let bias = value(&store, mha.wo.bias.unwrap());
    let want = oracle::linear(&mean, &value(&store, mha.wo.weight), Some(&bias));
    assert!(max_abs_diff(ctx.value(y), &want) <= 1e-12);
}

#[test]
fn attention_is_permutation_equivariant() {
    let mut r = rng(9);
    let (mha, mut store) = build(10, |b| MultiHeadAttention::build(b, 4, 2).unwrap());
    randomize(&mut store, &mut r);
    let l = 6;
    let perm = [3, 0, 5, 1, 4, 2];
    let t = random(&[1, l, 4], &mut r);
    let permuted = Tensor::from_fn([1, l, 4], |i| t.data()[perm[i / 4] * 4 + i % 4]);
    let run = |x: &Tensor| {
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let xv = ctx.input(x.clone()).unwrap();
        let y = mha.forward(&mut ctx, xv).unwrap();
        ctx.value(y).clone()
    };
    let (y, yp) = (run(&t), run(&permuted));
    let want = Tensor::from_fn([1, l, 4], |i| y.data()[perm[i / 4] * 4 + i % 4]);
    assert!(max_abs_diff(&yp, &want) <= 1e-12);
}

#[test]
fn zeroed_residual_branches_pass_tokens_through() {
    let mut r = rng(11);
    let (layer, mut store) = build(12, |b| EncoderLayer::build(b, 4, 2, 2).unwrap());
    randomize(&mut store, &mut r);
    for id in [
        layer.attention.wo.weight,
        layer.attention.wo.bias.unwrap(),
        layer.mlp.compress.weight,
        layer.mlp.compress.bias.unwrap(),
    ] {
        fill(&mut store, id, 0.0);
    }
    let t = random(&[2, 6, 4], &mut r);
    let mut ctx = Ctx::new(&store, Mode::Train);
    let tv = ctx.input(t.clone()).unwrap();
    let y = layer.forward(&mut ctx, tv, (2, 3)).unwrap();
    assert_eq!(ctx.value(y), &t);
}

#[test]
fn token_embed_shapes_and_divisibility() {
    let (embed, store) = build(13, |b| TokenEmbed::build(b, 3, 8, 2));
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let x = ctx.input(Tensor::zeros([2, 3, 8, 6])).unwrap();
    let (tokens, grid) = embed.forward(&mut ctx, x).unwrap();
    assert_eq!(grid, (4, 3));
    assert_eq!(ctx.tape.shape(tokens), &[2, 12, 8]);
    let odd = ctx.input(Tensor::zeros([1, 3, 7, 6])).unwrap();
    assert!(matches!(embed.forward(&mut ctx, odd), Err(TensorError::Config(_))));
}

#[test]
fn fusion_of_equal_inputs_is_the_input() {
    let mut r = rng(14);
    let (fuse, mut store) = build(15, |b| AdaptiveFusion::build(b, 5, 2, 2));
    randomize(&mut store, &mut r);
    let x = random(&[3, 5, 2, 3], &mut r);
    let mut ctx = Ctx::new(&store, Mode::Train);
    let (a, b) = (ctx.input(x.clone()).unwrap(), ctx.input(x.clone()).unwrap());
    let fused = fuse.forward_gates(&mut ctx, a, b).unwrap();
    assert!(max_abs_diff(ctx.value(fused.output), &x) <= 1e-12);
    let (wl, wg) = (ctx.value(fused.w_local).data(), ctx.value(fused.w_global).data());
    assert!(wl.iter().zip(wg).all(|(a, b)| (a + b - 1.0).abs() <= 1e-12 && *a > 0.0 && *b > 0.0));
}

#[test]
fn forced_gates_select_one_branch() {
    let mut r = rng(16);
    let (fuse, mut store) = build(17, |b| AdaptiveFusion::build(b, 4, 2, 2));
    randomize(&mut store, &mut r);
    fill(&mut store, fuse.fc_local.weight, 0.0);
    fill(&mut store, fuse.fc_global.weight, 0.0);
    fill(&mut store, fuse.fc_local.bias.unwrap(), 50.0);
    fill(&mut store, fuse.fc_global.bias.unwrap(), -50.0);
    let (local, global) = (random(&[2, 4, 3, 3], &mut r), random(&[2, 4, 3, 3], &mut r));
    let mut ctx = Ctx::new(&store, Mode::Train);
    let (a, b) = (ctx.input(local.clone()).unwrap(), ctx.input(global).unwrap());
    let fused = fuse.forward_gates(&mut ctx, a, b).unwrap();
    assert!(max_abs_diff(ctx.value(fused.output), &local) <= 1e-12);
    assert!(ctx.value(fused.w_local).data().iter().all(|&w| (w - 1.0).abs() <= 1e-12));
}

#[test]
fn fusion_rejects_mismatched_branches() {
    let (fuse, store) = build(18, |b| AdaptiveFusion::build(b, 4, 2, 2));
    let mut ctx = Ctx::new(&store, Mode::Train);
    let a = ctx.input(Tensor::zeros([2, 4, 3, 3])).unwrap();
    let b = ctx.input(Tensor::zeros([2, 4, 3, 2])).unwrap();
    assert!(matches!(fuse.forward(&mut ctx, a, b), Err(TensorError::Shape { .. })));
}

#[test]
fn local_only_stage_equals_its_local_branch() {
    let (block, store) = build(19, |b| ConvTransBlock::build(b, &spec(4, 8, false)).unwrap());
    assert!(block.global.is_none());
    let x = random(&[2, 4, 8, 8], &mut rng(20));
    let mut ctx = Ctx::new(&store, Mode::Train);
    let xv = ctx.input(x).unwrap();
    let (a, b) = (block.forward(&mut ctx, xv).unwrap(), block.forward_local(&mut ctx, xv).unwrap());
    assert_eq!(ctx.value(a), ctx.value(b));
    assert_eq!(ctx.tape.shape(a), &[2, 8, 4, 4]);
}

#[test]
fn conv_trans_block_branches_agree_in_shape() {
    let (block, store) = build(21, |b| ConvTransBlock::build(b, &spec(4, 8, true)).unwrap());
    let mut ctx = Ctx::new(&store, Mode::Train);
    let x = ctx.input(random(&[2, 4, 8, 8], &mut rng(22))).unwrap();
    let (branch, _) = block.global.as_ref().unwrap();
    let g = branch.forward(&mut ctx, x).unwrap();
    let l = block.forward_local(&mut ctx, x).unwrap();
    assert_eq!(ctx.tape.shape(g), ctx.tape.shape(l));
    let y = block.forward(&mut ctx, x).unwrap();
    assert_eq!(ctx.tape.shape(y), &[2, 8, 4, 4]);
}

#[test]
fn indivisible_heads_are_a_config_error() {
    let mut s = spec(4, 6, true);
    s.heads = 4;
    let (result, _) = build(23, |b| ConvTransBlock::build(b, &s).map(|_| ()));
    assert!(matches!(result, Err(TensorError::Config(_))));
}

#[test]
fn block_gradients_match_finite_differences() {
    let mut r = rng(24);
    let tol = 1e-5;

    let (block, mut store) = build(25, |b| BasicBlock::build(b, 2, 3, 2));
    let x = random(&[2, 2, 4, 4], &mut r);
    let err = module_grad_error(&mut store, &x, &|ctx, x| block.forward(ctx, x), &mut r);
    assert!(err <= tol, "basic block {err:e}");

    let (layer, mut store) = build(26, |b| EncoderLayer::build(b, 4, 2, 2).unwrap());
    let t = random(&[2, 6, 4], &mut r);
    let err = module_grad_error(&mut store, &t, &|ctx, x| layer.forward(ctx, x, (2, 3)), &mut r);
    assert!(err <= tol, "encoder layer {err:e}");

    let (fuse, mut store) = build(27, |b| AdaptiveFusion::build(b, 3, 1, 2));
    let pair = random(&[4, 3, 3, 3], &mut r);
    let other = random(&[4, 3, 3, 3], &mut r);
    let err = module_grad_error(
        &mut store,
        &pair,
        &|ctx, x| {
            let g = ctx.input(other.clone())?;
            fuse.forward(ctx, x, g)
        },
        &mut r,
    );
    assert!(err <= tol, "fusion {err:e}");

    let (stage, mut store) = build(28, |b| ConvTransBlock::build(b, &spec(2, 4, true)).unwrap());
    let x = random(&[4, 2, 4, 4], &mut r);
    let err = module_grad_error(&mut store, &x, &|ctx, x| stage.forward(ctx, x), &mut r);
    assert!(err <= tol, "conv-trans block {err:e}");
}
