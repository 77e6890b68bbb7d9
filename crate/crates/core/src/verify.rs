//! Self-check suite: fast operators against the naive oracles, and
//! reverse-mode gradients against central finite differences, from single
//! operators up to the whole network.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::AdaptiveFusion;
use crate::gradcheck::{relative_error, REL_FLOOR, STEP};
use crate::network::{Mctnet, NetworkConfig};
use crate::nn::{Builder, Ctx, Mode, NORM_EPS};
use crate::oracle;
use crate::tensor::{Family, ParamStore, Result, Tape, Tensor, Var};

/// Oracle agreement required of the fast operators.
pub const ORACLE_TOL: f64 = 1e-12;
/// Finite-difference agreement for isolated operators.
pub const OP_GRAD_TOL: f64 = 1e-5;
/// Finite-difference agreement through the full network.
pub const NETWORK_GRAD_TOL: f64 = 1e-4;
/// Draws of batch and jitter considered for the point where network
/// gradients are checked; the one whose smallest relu or abs input is
/// farthest from zero is kept, so that the larger steps stay usable.
pub const POINT_DRAWS: usize = 8;
/// Steps tried in turn by [`kink_free_difference`].
pub const NETWORK_STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];

/// Absolute rounding noise assumed in one evaluation of the network loss,
/// with an order of magnitude of margin.
pub const LOSS_NOISE: f64 = 1e-14;

/// Relative-error floor for a central difference at step `h`. The quotient
/// carries about `LOSS_NOISE / h` of noise, and the floor keeps that at the
/// tolerance for coordinates whose true gradient is tiny or zero (for
/// example biases that feed a batch norm).
pub fn network_floor(h: f64) -> f64 {
    LOSS_NOISE / (h * NETWORK_GRAD_TOL)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    /// Worst error observed.
    pub worst: f64,
    pub tolerance: f64,
    /// Number of cases or coordinates compared.
    pub samples: usize,
    /// Coordinates set aside because the loss is not differentiable there
    /// at the resolution of the finite-difference steps.
    pub kinks: usize,
}

impl Check {
    /// Within tolerance, with kinks at most a fifth of the compared
    /// coordinates.
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance && self.kinks * 5 <= self.samples
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<34} worst={:.3e} tol={:.0e} n={}{}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.samples,
            if self.kinks > 0 { format!(" kinks={}", self.kinks) } else { String::new() }
        )
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random cases per operator oracle.
    pub cases: usize,
    pub coords_per_family: usize,
    pub image_size: usize,
    pub batch: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            cases: 100,
            coords_per_family: 50,
            image_size: 32,
            batch: 2,
        }
    }
}

pub fn run_suite(network: &NetworkConfig, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut out = operator_oracles(opts.cases, opts.seed)?;
    out.extend(operator_gradients(opts.seed)?);
    out.extend(network_gradients(network, opts)?);
    Ok(out)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn worst_of(name: &str, tolerance: f64, errs: &[f64]) -> Check {
    Check {
        name: name.to_string(),
        worst: errs.iter().cloned().fold(0.0, f64::max),
        tolerance,
        samples: errs.len(),
        kinks: 0,
    }
}

/// Convolution, depthwise convolution, projection, attention and fusion,
/// each on `cases` random shapes.
pub fn operator_oracles(cases: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0c0ffee);
    let mut conv = Vec::new();
    let mut depthwise = Vec::new();
    let mut linear = Vec::new();
    let mut attention = Vec::new();
    let mut softmax_rows = Vec::new();
    let mut fusion = Vec::new();
    let mut convexity = Vec::new();
    for _ in 0..cases {
        // dense convolution
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let (stride, padding) = (rng.gen_range(1..=2), rng.gen_range(0..=2));
        let (h, w) = (rng.gen_range(k.max(3)..=9), rng.gen_range(k.max(3)..=9));
        let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let x = random(&[n, cin, h, w], &mut rng);
        let wt = random(&[cout, cin, k, k], &mut rng);
        let b = rng.gen::<bool>().then(|| random(&[cout], &mut rng));
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone())?, t.constant(wt.clone())?);
        let bv = b.clone().map(|b| t.constant(b)).transpose()?;
        let y = t.conv2d(xv, wv, bv, stride, padding)?;
        conv.push(max_abs_diff(t.value(y), &oracle::conv2d(&x, &wt, b.as_ref(), stride, padding)));

        // depthwise convolution against the block-diagonal dense kernel
        let c = rng.gen_range(1..=5);
        let x = random(&[n, c, h, w], &mut rng);
        let wt = random(&[c, 1, k, k], &mut rng);
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone())?, t.constant(wt.clone())?);
        let y = t.depthwise_conv2d(xv, wv, stride, k / 2)?;
        depthwise.push(max_abs_diff(t.value(y), &oracle::conv2d(&x, &oracle::depthwise_as_dense(&wt), None, stride, k / 2)));

        // projection
        let (rows, ci, co) = (rng.gen_range(1..=6), rng.gen_range(1..=7), rng.gen_range(1..=7));
        let x = random(&[2, rows, ci], &mut rng);
        let wt = random(&[ci, co], &mut rng);
        let b = random(&[co], &mut rng);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone())?, t.constant(wt.clone())?, t.constant(b.clone())?);
        let y = t.linear(xv, wv, Some(bv))?;
        linear.push(max_abs_diff(t.value(y), &oracle::linear(&x, &wt, Some(&b))));

        // multi-head attention
        let (heads, d, l) = (rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=12));
        let shape = [rng.gen_range(1..=2), l, heads * d];
        let (q, kk, v) = (random(&shape, &mut rng), random(&shape, &mut rng), random(&shape, &mut rng));
        let mut t = Tape::new();
        let (qv, kv, vv) = (t.constant(q.clone())?, t.constant(kk.clone())?, t.constant(v.clone())?);
        let y = t.multi_head_attention(qv, kv, vv, heads)?;
        let (want, probs) = oracle::attention(&q, &kk, &v, heads);
        let got_probs = t.attention_probs(y).expect("attention saves probabilities");
        attention.push(max_abs_diff(t.value(y), &want).max(max_abs_diff(got_probs, &probs)));
        softmax_rows.push(
            got_probs
                .data()
                .chunks(l)
                .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max),
        );

        // adaptive fusion, parameters drawn at random
        let (c, n) = (rng.gen_range(1..=6), rng.gen_range(2..=3));
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let fuse = AdaptiveFusion::build(&mut Builder::new(&mut store, &mut init_rng), c, 2, 2);
        for id in store.learnable().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            let shape = p.value.shape().to_vec();
            p.value = random(&shape, &mut rng);
        }
        let (local, global) = (random(&[n, c, 3, 4], &mut rng), random(&[n, c, 3, 4], &mut rng));
        let mut ctx = Ctx::new(&store, Mode::Train);
        let (lv, gv) = (ctx.input(local.clone())?, ctx.input(global.clone())?);
        let fused = fuse.forward_gates(&mut ctx, lv, gv)?;
        let val = |id| store.get(id).value.clone();
        let params = (
            val(fuse.compact.weight),
            val(fuse.compact_bn.gamma),
            val(fuse.compact_bn.beta),
            val(fuse.fc_local.weight),
            val(fuse.fc_local.bias.unwrap()),
            val(fuse.fc_global.weight),
            val(fuse.fc_global.bias.unwrap()),
        );
        let fp = oracle::FusionParams {
            compact: &params.0,
            bn_gamma: params.1.data(),
            bn_beta: params.2.data(),
            fc_local: &params.3,
            fc_local_bias: &params.4,
            fc_global: &params.5,
            fc_global_bias: &params.6,
        };
        let (want, wl, wg) = oracle::adaptive_fusion(&local, &global, &fp, NORM_EPS);
        let gl = ctx.value(fused.w_local).data().to_vec();
        let gg = ctx.value(fused.w_global).data().to_vec();
        let gate_err = gl.iter().zip(&wl).chain(gg.iter().zip(&wg)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        fusion.push(max_abs_diff(ctx.value(fused.output), &want).max(gate_err));
        convexity.push(
            gl.iter()
                .zip(&gg)
                .map(|(a, b)| if *a < 0.0 || *b < 0.0 { f64::INFINITY } else { (a + b - 1.0).abs() })
                .fold(0.0, f64::max),
        );
    }
    Ok(vec![
        worst_of("oracle conv2d", ORACLE_TOL, &conv),
        worst_of("oracle depthwise conv", ORACLE_TOL, &depthwise),
        worst_of("oracle linear", ORACLE_TOL, &linear),
        worst_of("oracle multi-head attention", ORACLE_TOL, &attention),
        worst_of("attention rows sum to one", ORACLE_TOL, &softmax_rows),
        worst_of("oracle adaptive fusion", ORACLE_TOL, &fusion),
        worst_of("fusion gates convex", ORACLE_TOL, &convexity),
    ])
}

type OpFn = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Worst relative error between backward and central differences for
/// `L = sum(op(inputs) * R)` with a fixed random `R`, or `L = op(inputs)`
/// when the operator already returns a scalar.
pub fn op_gradient_error(inputs: &[Tensor], op: &OpFn, rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let probe_shape = {
        let mut t = Tape::new();
        let vars = inputs.iter().map(|x| t.constant(x.clone())).collect::<Result<Vec<_>>>()?;
        let y = op(&mut t, &vars)?;
        t.shape(y).to_vec()
    };
    let weights = (!probe_shape.is_empty()).then(|| random(&probe_shape, rng));
    let loss = |t: &mut Tape, vars: &[Var]| -> Result<Var> {
        let y = op(t, vars)?;
        match &weights {
            Some(r) => {
                let r = t.constant(r.clone())?;
                let p = t.mul(y, r)?;
                t.sum(p)
            }
            None => Ok(y),
        }
    };
    let mut t = Tape::new();
    let vars = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect::<Result<Vec<_>>>()?;
    let l = loss(&mut t, &vars)?;
    t.backward(l)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| t.grad(v).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec))
        .collect();
    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vars = probe.iter().map(|x| t.constant(x.clone())).collect::<Result<Vec<_>>>()?;
        let l = loss(&mut t, &vars)?;
        Ok(t.value(l).item().expect("scalar loss"))
    };
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut probe = inputs.to_vec();
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.numel() {
            let orig = x.data()[i];
            probe[k].data_mut()[i] = orig + STEP;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - STEP;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[k][i], numeric, REL_FLOOR));
            count += 1;
        }
    }
    Ok((worst, count))
}

/// Finite-difference sweeps over every differentiable operator.
pub fn operator_gradients(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let r = |shape: &[usize], rng: &mut ChaCha8Rng| random(shape, rng);
    // Inputs kept away from the kinks of relu and abs.
    let away = |shape: &[usize], rng: &mut ChaCha8Rng| {
        Tensor::from_fn(shape, |_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
    };
    let labels: Vec<u8> = (0..2 * 3 * 3).map(|i| (i % 3 == 0) as u8).collect();
    let mut cases: Vec<(&str, Vec<Tensor>, Box<OpFn>)> = vec![
        (
            "conv2d",
            vec![r(&[2, 2, 5, 5], &mut rng), r(&[3, 2, 3, 3], &mut rng), r(&[3], &mut rng)],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
        ),
        (
            "conv2d 1x1",
            vec![r(&[2, 3, 3, 3], &mut rng), r(&[2, 3, 1, 1], &mut rng)],
            Box::new(|t, v| t.conv2d(v[0], v[1], None, 1, 0)),
        ),
        (
            "depthwise conv",
            vec![r(&[2, 3, 4, 4], &mut rng), r(&[3, 1, 3, 3], &mut rng)],
            Box::new(|t, v| t.depthwise_conv2d(v[0], v[1], 1, 1)),
        ),
        (
            "linear",
            vec![r(&[2, 3, 4], &mut rng), r(&[4, 3], &mut rng), r(&[3], &mut rng)],
            Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
        ),
        (
            "batch norm (train)",
            vec![r(&[3, 2, 2, 2], &mut rng), r(&[2], &mut rng), r(&[2], &mut rng)],
            Box::new(|t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], NORM_EPS)?.0)),
        ),
        (
            "batch norm (eval)",
            vec![r(&[2, 2, 3], &mut rng), r(&[2], &mut rng), r(&[2], &mut rng)],
            Box::new(|t, v| t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], NORM_EPS)),
        ),
        (
            "layer norm",
            vec![r(&[2, 3, 5], &mut rng), r(&[5], &mut rng), r(&[5], &mut rng)],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], NORM_EPS)),
        ),
        ("relu", vec![away(&[2, 7], &mut rng)], Box::new(|t, v| t.relu(v[0]))),
        ("abs", vec![away(&[2, 7], &mut rng)], Box::new(|t, v| t.abs(v[0]))),
        ("gelu", vec![r(&[2, 7], &mut rng)], Box::new(|t, v| t.gelu(v[0]))),
        ("softmax", vec![r(&[2, 3, 4], &mut rng)], Box::new(|t, v| t.softmax(v[0], 1))),
        (
            "multi-head attention",
            vec![r(&[2, 5, 4], &mut rng), r(&[2, 5, 4], &mut rng), r(&[2, 5, 4], &mut rng)],
            Box::new(|t, v| t.multi_head_attention(v[0], v[1], v[2], 2)),
        ),
        ("bilinear upsample", vec![r(&[1, 2, 3, 4], &mut rng)], Box::new(|t, v| t.upsample_bilinear2x(v[0]))),
        ("global average pool", vec![r(&[2, 3, 2, 3], &mut rng)], Box::new(|t, v| t.global_avg_pool(v[0]))),
        (
            "channel scaling",
            vec![r(&[2, 3, 2, 2], &mut rng), r(&[2, 3], &mut rng)],
            Box::new(|t, v| t.scale_channels(v[0], v[1])),
        ),
        (
            "concat and narrow",
            vec![r(&[2, 2, 3], &mut rng), r(&[2, 1, 3], &mut rng)],
            Box::new(|t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                t.narrow(c, 1, 1, 2)
            }),
        ),
        (
            "token flatten and unflatten",
            vec![r(&[2, 3, 2, 2], &mut rng)],
            Box::new(|t, v| {
                let f = t.flatten_tokens(v[0])?;
                let g = t.gelu(f)?;
                t.unflatten_tokens(g, 2, 2)
            }),
        ),
        (
            "weighted cross-entropy",
            vec![r(&[2, 2, 3, 3], &mut rng)],
            Box::new(move |t, v| t.weighted_cross_entropy(v[0], &labels, &[0.7, 2.5])),
        ),
    ];
    cases
        .drain(..)
        .map(|(name, inputs, op)| {
            let (worst, samples) = op_gradient_error(&inputs, op.as_ref(), &mut rng)?;
            Ok(Check {
                name: format!("gradient {name}"),
                worst,
                tolerance: OP_GRAD_TOL,
                samples,
                kinks: 0,
            })
        })
        .collect()
}

/// Random bi-temporal batch with both classes present in the mask.
pub fn random_batch(config: &NetworkConfig, size: usize, batch: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Vec<u8>) {
    let shape = [batch, config.in_channels, size, size];
    let a = Tensor::from_fn(shape, |_| rng.gen());
    let b = Tensor::from_fn(shape, |_| rng.gen());
    let mut mask: Vec<u8> = (0..batch * size * size).map(|_| (rng.gen::<f64>() < 0.3) as u8).collect();
    mask[0] = 1;
    mask[1] = 0;
    (a, b, mask)
}

fn network_loss(net: &Mctnet, store: &ParamStore, a: &Tensor, b: &Tensor, mask: &[u8]) -> Result<(f64, Tape, Var)> {
    let mut ctx = Ctx::new(store, Mode::Train);
    let (av, bv) = (ctx.input(a.clone())?, ctx.input(b.clone())?);
    let logits = net.forward(&mut ctx, av, bv)?;
    let loss = net.loss(&mut ctx, logits, mask)?;
    let value = ctx.value(loss).item().expect("scalar loss");
    let (tape, _) = ctx.into_parts();
    Ok((value, tape, loss))
}

/// Per layer family, the worst relative error over `coords_per_family`
/// parameter coordinates sampled without replacement. Coordinates where
/// every step crosses a kink are replaced by fresh ones and counted.
pub fn network_gradients(config: &NetworkConfig, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let (net, init) = Mctnet::build(config.clone(), opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6e6574);
    let mut best: Option<(f64, ParamStore, (Tensor, Tensor, Vec<u8>))> = None;
    for _ in 0..POINT_DRAWS {
        let mut store = init.clone();
        move_off_kinks(&mut store, &mut rng);
        let batch = random_batch(config, opts.image_size, opts.batch, &mut rng);
        let margin = network_loss(&net, &store, &batch.0, &batch.1, &batch.2)?.1.kink_margin();
        if best.as_ref().map_or(true, |b| margin > b.0) {
            best = Some((margin, store, batch));
        }
    }
    let (_, store, (a, b, mask)) = best.expect("at least one draw");
    let (_, mut tape, loss) = network_loss(&net, &store, &a, &b, &mask)?;
    let pattern = tape.sign_pattern();
    tape.backward(loss)?;
    let grads: BTreeMap<usize, Vec<f64>> = tape.param_grads().map(|(id, g)| (id.index(), g.to_vec())).collect();
    drop(tape);

    let mut checks = Vec::new();
    for family in Family::ALL {
        if family == Family::Statistic {
            continue;
        }
        let coords: Vec<(crate::tensor::ParamId, usize)> = store
            .learnable()
            .filter(|&id| store.get(id).family == family)
            .flat_map(|id| (0..store.get(id).value.numel()).map(move |i| (id, i)))
            .collect();
        if coords.is_empty() {
            continue;
        }
        let n = opts.coords_per_family.min(coords.len());
        let order = sample(&mut rng, coords.len(), coords.len());
        let mut probe = store.clone();
        let mut errs = Vec::with_capacity(n);
        let mut kinks = 0;
        for k in order.iter() {
            if errs.len() == n {
                break;
            }
            let (id, i) = coords[k];
            let orig = store.get(id).value.data()[i];
            let mut loss_at = |x: f64| {
                probe.get_mut(id).value.data_mut()[i] = x;
                network_loss(&net, &probe, &a, &b, &mask).map(|(v, t, _)| (v, t.sign_pattern()))
            };
            let numeric = kink_free_difference(&mut loss_at, orig, pattern)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let analytic = grads.get(&id.index()).map_or(0.0, |g| g[i]);
            match numeric {
                Some((d, h)) => errs.push(relative_error(analytic, d, network_floor(h))),
                None => kinks += 1,
            }
        }
        let mut check = worst_of(&format!("network gradient {family:?}"), NETWORK_GRAD_TOL, &errs);
        check.kinks = kinks;
        checks.push(check);
    }
    Ok(checks)
}

/// Central difference and its step, at the largest step whose two
/// evaluations keep every relu and abs input on the same side of zero as at
/// `x` (equal sign patterns). Along such a segment the loss is smooth, so
/// the quotient carries only truncation and rounding error. `None` marks a
/// coordinate where even the smallest step crosses a kink.
pub fn kink_free_difference(
    f: &mut impl FnMut(f64) -> Result<(f64, u64)>,
    x: f64,
    pattern: u64,
) -> Result<Option<(f64, f64)>> {
    for h in NETWORK_STEPS {
        let (up, up_pattern) = f(x + h)?;
        let (down, down_pattern) = f(x - h)?;
        if up_pattern == pattern && down_pattern == pattern {
            return Ok(Some(((up - down) / (2.0 * h), h)));
        }
    }
    Ok(None)
}

/// Biases and shifts start at exactly zero, which puts ReLU and abs inputs
/// on their kinks wherever upstream activations vanish (a dead pixel feeds
/// the classifier exactly its bias). Jittering every zero-initialised
/// learnable moves the check to a generic point where the loss is
/// differentiable.
pub fn move_off_kinks(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.learnable().collect::<Vec<_>>() {
        let p = store.get_mut(id);
        if p.value.data().iter().all(|&v| v == 0.0) {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
        }
    }
}
