//! Parameterised layers on top of the tape: convolutions, projections and
//! normalisation, plus the forward context that binds a [`ParamStore`] to a
//! fresh [`Tape`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{
    BatchStats, Family, ParamId, ParamKind, ParamStore, Result, Tape, Tensor, Var,
};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running estimates updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Running-statistic update produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch: BatchStats,
}

/// One forward pass: a tape plus read access to the parameters.
pub struct Ctx<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    mode: Mode,
    updates: Vec<StatUpdate>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode,
            updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        self.tape.param(self.store, id)
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.updates
    }

    pub fn into_parts(self) -> (Tape, Vec<StatUpdate>) {
        (self.tape, self.updates)
    }
}

/// Folds batch statistics into the running estimates, in recording order.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate], momentum: f64) {
    for u in updates {
        for (id, batch) in [(u.mean, &u.batch.mean), (u.var, &u.batch.var)] {
            let running = store.get_mut(id).value.data_mut();
            for (r, b) in running.iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}

/// Registers named parameters with seeded initialisation.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Child builder whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| dist.sample(rng))
    }

    pub fn learnable(&mut self, leaf: &str, value: Tensor, family: Family) -> ParamId {
        let name = self.name(leaf);
        self.store.insert(name, value, ParamKind::Learnable, family)
    }

    pub fn buffer(&mut self, leaf: &str, value: Tensor) -> ParamId {
        let name = self.name(leaf);
        self.store.insert(name, value, ParamKind::Buffer, Family::Statistic)
    }

    /// He-normal initialised convolution.
    pub fn conv(
        &mut self,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        family: Family,
    ) -> Conv2d {
        let std = (2.0 / (cin * kernel * kernel) as f64).sqrt();
        let w = self.normal(&[cout, cin, kernel, kernel], std);
        let weight = self.learnable("weight", w, family);
        let bias = bias.then(|| self.learnable("bias", Tensor::zeros([cout]), family));
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn depthwise(&mut self, channels: usize, kernel: usize, stride: usize, padding: usize) -> DepthwiseConv {
        let std = (2.0 / (kernel * kernel) as f64).sqrt();
        let w = self.normal(&[channels, 1, kernel, kernel], std);
        DepthwiseConv {
            weight: self.learnable("weight", w, Family::Depthwise),
            stride,
            padding,
        }
    }

    /// Glorot-normal initialised projection.
    pub fn linear(&mut self, cin: usize, cout: usize, bias: bool, family: Family) -> Linear {
        let std = (2.0 / (cin + cout) as f64).sqrt();
        let w = self.normal(&[cin, cout], std);
        let weight = self.learnable("weight", w, family);
        let bias = bias.then(|| self.learnable("bias", Tensor::zeros([cout]), family));
        Linear { weight, bias }
    }

    pub fn batch_norm(&mut self, channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: self.learnable("gamma", Tensor::full([channels], 1.0), Family::Norm),
            beta: self.learnable("beta", Tensor::zeros([channels]), Family::Norm),
            running_mean: self.buffer("running_mean", Tensor::zeros([channels])),
            running_var: self.buffer("running_var", Tensor::full([channels], 1.0)),
        }
    }

    pub fn layer_norm(&mut self, channels: usize) -> LayerNorm {
        LayerNorm {
            gamma: self.learnable("gamma", Tensor::full([channels], 1.0), Family::Norm),
            beta: self.learnable("beta", Tensor::zeros([channels]), Family::Norm),
        }
    }

    pub fn conv_bn_relu(&mut self, cin: usize, cout: usize, kernel: usize, stride: usize, bias: bool) -> ConvBnRelu {
        let conv = self.scope("conv").conv(cin, cout, kernel, stride, kernel / 2, bias, Family::Conv);
        let bn = self.scope("bn").batch_norm(cout);
        ConvBnRelu { conv, bn }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight)?;
        let b = self.bias.map(|b| ctx.param(b)).transpose()?;
        ctx.tape.conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl DepthwiseConv {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight)?;
        ctx.tape.depthwise_conv2d(x, w, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight)?;
        let b = self.bias.map(|b| ctx.param(b)).transpose()?;
        ctx.tape.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma)?;
        let b = ctx.param(self.beta)?;
        match ctx.mode {
            Mode::Train => {
                let (y, batch) = ctx.tape.batch_norm_train(x, g, b, NORM_EPS)?;
                ctx.updates.push(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch,
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store;
                let mean = store.get(self.running_mean).value.data();
                let var = store.get(self.running_var).value.data();
                ctx.tape.batch_norm_eval(x, g, b, mean, var, NORM_EPS)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma)?;
        let b = ctx.param(self.beta)?;
        ctx.tape.layer_norm(x, g, b, NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        ctx.tape.relu(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn builder_scopes_names() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        let conv = b.scope("stage2").scope("conv1").conv(3, 4, 3, 1, 1, true, Family::Conv);
        assert_eq!(store.get(conv.weight).name, "stage2.conv1.weight");
        assert_eq!(store.get(conv.bias.unwrap()).name, "stage2.conv1.bias");
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bn = Builder::new(&mut store, &mut rng).batch_norm(1);
        let u = StatUpdate {
            mean: bn.running_mean,
            var: bn.running_var,
            batch: BatchStats {
                mean: vec![2.0],
                var: vec![3.0],
            },
        };
        apply_stat_updates(&mut store, &[u.clone(), u], BN_MOMENTUM);
        let m = store.get(bn.running_mean).value.data()[0];
        let v = store.get(bn.running_var).value.data()[0];
        assert!((m - (0.1 * 2.0 * 0.9 + 0.1 * 2.0)).abs() < 1e-15);
        assert!((v - ((0.9 * 1.0 + 0.3) * 0.9 + 0.3)).abs() < 1e-15);
    }
}
