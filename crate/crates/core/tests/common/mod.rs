#![allow(dead_code)]

use mctnet::gradcheck::relative_error;
use mctnet::nn::{Builder, Ctx, Mode};
use mctnet::tensor::{ParamId, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Builds a module into a fresh store.
pub fn build<T>(seed: u64, f: impl FnOnce(&mut Builder<'_>) -> T) -> (T, ParamStore) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let module = f(&mut Builder::new(&mut store, &mut r));
    (module, store)
}

pub fn fill(store: &mut ParamStore, id: ParamId, value: f64) {
    store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = value);
}

pub fn value(store: &ParamStore, id: ParamId) -> Tensor {
    store.get(id).value.clone()
}

/// Replaces every learnable tensor with uniform draws from `[-1, 1)`.
pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.learnable().collect::<Vec<_>>() {
        let shape = store.get(id).value.shape().to_vec();
        store.get_mut(id).value = random(&shape, rng);
    }
}

/// Worst relative error between backward and central differences over
/// every learnable coordinate, for `L = sum(forward(input) * R)`.
pub fn module_grad_error(
    store: &mut ParamStore,
    input: &Tensor,
    forward: &dyn Fn(&mut Ctx<'_>, Var) -> Result<Var>,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let run = |store: &ParamStore, weights: Option<&Tensor>| {
        let mut ctx = Ctx::new(store, Mode::Train);
        let x = ctx.input(input.clone()).unwrap();
        let y = forward(&mut ctx, x).unwrap();
        let r = weights.cloned().unwrap_or_else(|| Tensor::zeros(ctx.tape.shape(y)));
        let r = ctx.tape.constant(r).unwrap();
        let p = ctx.tape.mul(y, r).unwrap();
        let l = ctx.tape.sum(p).unwrap();
        (ctx.tape, l, y)
    };
    let shape = {
        let (tape, _, y) = run(store, None);
        tape.shape(y).to_vec()
    };
    let weights = random(&shape, rng);
    let (mut tape, l, _) = run(store, Some(&weights));
    tape.backward(l).unwrap();
    let grads: Vec<(ParamId, Vec<f64>)> = store
        .learnable()
        .map(|id| {
            let g = tape.param_var(id).and_then(|v| tape.grad(v)).map(<[f64]>::to_vec);
            (id, g.unwrap_or_else(|| vec![0.0; store.get(id).value.numel()]))
        })
        .collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (id, analytic) in grads {
        for i in 0..analytic.len() {
            let orig = store.get(id).value.data()[i];
            let mut eval = |x: f64| {
                store.get_mut(id).value.data_mut()[i] = x;
                let (tape, l, _) = run(store, Some(&weights));
                tape.value(l).item().unwrap()
            };
            let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            store.get_mut(id).value.data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic[i], numeric, 1e-6));
        }
    }
    worst
}
