//! SGD with momentum and coupled L2 decay, the single-step learning-rate
//! schedule, evaluation, and the epoch loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{images_to_tensor, masks_of, ChangeSample, Date, SizeClass};
use crate::metrics::{confusion, metrics, size_stratified_metrics, ConfusionCounts, Metrics, RegionRecall};
use crate::network::{argmax_mask, Mctnet};
use crate::nn::{apply_stat_updates, Ctx, Mode, BN_MOMENTUM};
use crate::tensor::{ParamKind, ParamStore, TensorError};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_epochs: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    /// Rescales the gradient of each step to at most this global L2 norm.
    /// Off unless set.
    pub max_grad_norm: Option<f64>,
    /// Shuffling seed; in a run config it comes from the top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            momentum: 0.99,
            weight_decay: 0.001,
            total_epochs: 30,
            decay_factor: 0.1,
            batch_size: 8,
            max_grad_norm: None,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn decay_epoch(&self) -> usize {
        self.total_epochs / 3
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor must lie in (0, 1]");
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad("weight_decay must be nonnegative");
        }
        if self.total_epochs == 0 || self.batch_size == 0 {
            return bad("total_epochs and batch_size must be positive");
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0) || !m.is_finite()) {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }
}

/// Scales learnable gradients down so their global L2 norm is at most
/// `max_norm`, returning the norm before scaling.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let ids: Vec<_> = store.learnable().collect();
    let norm = ids
        .iter()
        .flat_map(|&id| store.get(id).grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for id in ids {
            store.get_mut(id).grad.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// `lr0` before `floor(total_epochs / 3)`, `lr0 * decay_factor` from then on.
pub fn lr_at(epoch: usize, cfg: &OptimConfig) -> f64 {
    if epoch < cfg.decay_epoch() {
        cfg.lr0
    } else {
        cfg.lr0 * cfg.decay_factor
    }
}

/// Momentum buffers, one per learnable parameter, created zeroed.
#[derive(Clone, Debug)]
pub struct Sgd {
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            velocity: store
                .iter()
                .map(|(_, p)| (p.kind == ParamKind::Learnable).then(|| vec![0.0; p.value.numel()]))
                .collect(),
        }
    }

    pub fn velocity(&self, id: crate::tensor::ParamId) -> Option<&[f64]> {
        self.velocity.get(id.index())?.as_deref()
    }

    /// `v = momentum * v + (g + weight_decay * p)`, then `p -= lr * v`, using
    /// the gradients accumulated in the store.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
        if self.velocity.len() != store.len() {
            return Err(TensorError::Usage("optimizer was built for a different parameter store".into()).into());
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(v) = self.velocity[id.index()].as_mut() else { continue };
            let p = store.get_mut(id);
            if p.grad.len() != v.len() {
                return Err(TensorError::Usage(format!("{} has no gradient buffer", p.name)).into());
            }
            let grad = std::mem::take(&mut p.grad);
            for ((w, g), vi) in p.value.data_mut().iter_mut().zip(&grad).zip(v.iter_mut()) {
                *vi = momentum * *vi + (g + weight_decay * *w);
                *w -= lr * *vi;
            }
            p.grad = grad;
        }
        Ok(())
    }
}

/// Optimizer and loop state carried across epochs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub epoch: usize,
    pub sgd: Sgd,
    pub rng: ChaCha8Rng,
    pub losses: Vec<f64>,
}

impl TrainState {
    pub fn new(store: &ParamStore, cfg: &OptimConfig) -> Self {
        Self {
            epoch: 0,
            sgd: Sgd::new(store),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            losses: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    pub by_size: std::collections::BTreeMap<SizeClass, RegionRecall>,
}

/// Eval-mode masks, `batch_size` samples per forward pass.
pub fn predict_masks(model: &Mctnet, store: &ParamStore, samples: &[ChangeSample], batch_size: usize) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(samples.len());
    let refs: Vec<&ChangeSample> = samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let a = ctx.input(images_to_tensor(chunk, Date::T1))?;
        let b = ctx.input(images_to_tensor(chunk, Date::T2))?;
        let logits = model.forward(&mut ctx, a, b)?;
        let flat = argmax_mask(ctx.value(logits));
        out.extend(flat.chunks(chunk[0].pixels()).map(<[u8]>::to_vec));
    }
    Ok(out)
}

pub fn score(preds: &[Vec<u8>], samples: &[ChangeSample]) -> Result<Evaluation> {
    let mut counts = ConfusionCounts::default();
    for (p, s) in preds.iter().zip(samples) {
        counts += confusion(p, &s.mask)?;
    }
    Ok(Evaluation {
        counts,
        metrics: metrics(&counts),
        by_size: size_stratified_metrics(preds, samples)?,
    })
}

pub fn evaluate(model: &Mctnet, store: &ParamStore, samples: &[ChangeSample], batch_size: usize) -> Result<Evaluation> {
    score(&predict_masks(model, store, samples, batch_size)?, samples)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Metrics,
}

impl EpochRecord {
    /// One `key=value` line; floats use the shortest exact representation.
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} lr={} train_loss={} val_precision={} val_recall={} val_f1={} val_oa={}",
            self.epoch, self.lr, self.train_loss, self.val.precision, self.val.recall, self.val.f1, self.val.oa
        )
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Stop once validation F1 reaches this value.
    pub target_f1: Option<f64>,
    pub log: Option<&'a mut dyn Write>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_f1: f64,
    /// Parameters and running statistics after the best epoch.
    pub best: ParamStore,
}

/// One pass over `train` in a freshly shuffled order.
pub fn train_epoch(
    model: &Mctnet,
    store: &mut ParamStore,
    state: &mut TrainState,
    train: &[ChangeSample],
    cfg: &OptimConfig,
) -> Result<f64> {
    let lr = lr_at(state.epoch, cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut state.rng);
    let mut loss_sum = 0.0;
    let mut batches = 0;
    for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
        let chunk: Vec<&ChangeSample> = idx.iter().map(|&i| &train[i]).collect();
        let epoch = state.epoch;
        let diverged = |detail: String| Error::Diverged {
            epoch,
            batch,
            detail,
        };
        let mut ctx = Ctx::new(store, Mode::Train);
        let step = (|| -> Result<f64> {
            let a = ctx.input(images_to_tensor(&chunk, Date::T1))?;
            let b = ctx.input(images_to_tensor(&chunk, Date::T2))?;
            let logits = model.forward(&mut ctx, a, b)?;
            let loss = model.loss(&mut ctx, logits, &masks_of(&chunk))?;
            ctx.tape.backward(loss)?;
            Ok(ctx.value(loss).item().expect("scalar loss"))
        })();
        let loss = match step {
            Ok(l) => l,
            Err(Error::Tensor(TensorError::NonFinite { op })) => {
                let culprit = first_non_finite(store).unwrap_or_else(|| format!("largest parameter {}", largest(store)));
                return Err(diverged(format!("non-finite value in {op} ({culprit})")));
            }
            Err(e) => return Err(e),
        };
        let (tape, updates) = ctx.into_parts();
        store.zero_grad();
        store.accumulate_grads(&tape);
        drop(tape);
        if let Some((_, p)) = store.iter().find(|(_, p)| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(diverged(format!("non-finite gradient for {}", p.name)));
        }
        if let Some(max) = cfg.max_grad_norm {
            clip_grad_norm(store, max);
        }
        state.sgd.step(store, lr, cfg.momentum, cfg.weight_decay)?;
        apply_stat_updates(store, &updates, BN_MOMENTUM);
        if let Some(name) = first_non_finite(store) {
            return Err(diverged(format!("non-finite value after update in {name}")));
        }
        loss_sum += loss;
        batches += 1;
    }
    state.epoch += 1;
    let mean = loss_sum / batches as f64;
    state.losses.push(mean);
    Ok(mean)
}

/// Name and peak magnitude of the learnable with the largest absolute value.
fn largest(store: &ParamStore) -> String {
    store
        .learnable()
        .map(|id| {
            let p = store.get(id);
            (p.value.data().iter().fold(0.0f64, |m, v| m.max(v.abs())), &p.name)
        })
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map_or_else(|| "none".into(), |(m, name)| format!("{name} |w|={m:e}"))
}

fn first_non_finite(store: &ParamStore) -> Option<String> {
    store
        .iter()
        .find(|(_, p)| p.value.data().iter().any(|v| !v.is_finite()))
        .map(|(_, p)| p.name.clone())
}

/// Trains for `cfg.total_epochs`, validating after every epoch and keeping
/// the parameters with the best validation F1 (earliest epoch wins ties).
pub fn train(
    model: &Mctnet,
    store: &mut ParamStore,
    train: &[ChangeSample],
    val: &[ChangeSample],
    cfg: &OptimConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    let mut state = TrainState::new(store, cfg);
    let mut report = TrainReport {
        records: Vec::new(),
        best_epoch: 0,
        best_f1: -1.0,
        best: store.clone(),
    };
    while state.epoch < cfg.total_epochs {
        let epoch = state.epoch;
        let lr = lr_at(epoch, cfg);
        let train_loss = train_epoch(model, store, &mut state, train, cfg)?;
        let val_metrics = evaluate(model, store, val, cfg.batch_size)?.metrics;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            val: val_metrics,
        };
        if let Some(w) = opts.log.as_mut() {
            writeln!(w, "{}", record.log_line()).map_err(|source| Error::Io {
                path: "<training log>".into(),
                source,
            })?;
        }
        if val_metrics.f1 > report.best_f1 {
            report.best_f1 = val_metrics.f1;
            report.best_epoch = epoch;
            report.best = store.clone();
        }
        report.records.push(record);
        if opts.target_f1.is_some_and(|t| val_metrics.f1 >= t) {
            break;
        }
    }
    Ok(report)
}
