//! Batch and layer normalisation.

use super::tape::{Backward, Grads, Values};
use super::{shape_err, Result, Tape, Tensor, Var};

/// Per-channel batch statistics from a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (Bessel-corrected) variance, used for running estimates.
    pub var: Vec<f64>,
}

fn nc_s(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(op, format!("need at least [N, C], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

struct BatchNormRule {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    n: usize,
    c: usize,
    s: usize,
    /// Train mode differentiates through the batch statistics.
    batch_stats: bool,
}

impl Backward for BatchNormRule {
    fn backward(&self, values: &Values<'_>, grads: &mut Grads<'_>, grad_out: &[f64]) {
        let (n, c, s) = (self.n, self.c, self.s);
        let m = (n * s) as f64;
        let idx = |b: usize, ch: usize| (b * c + ch) * s;
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let o = idx(b, ch);
                for k in o..o + s {
                    sum_g[ch] += grad_out[k];
                    sum_gx[ch] += grad_out[k] * self.xhat[k];
                }
            }
        }
        if let Some(dg) = grads.slot(self.gamma) {
            dg.iter_mut().zip(&sum_gx).for_each(|(d, v)| *d += v);
        }
        if let Some(db) = grads.slot(self.beta) {
            db.iter_mut().zip(&sum_g).for_each(|(d, v)| *d += v);
        }
        if grads.wants(self.x) {
            let gamma = values.get(self.gamma).data();
            let dx = grads.slot(self.x).unwrap();
            for b in 0..n {
                for ch in 0..c {
                    let o = idx(b, ch);
                    let scale = gamma[ch] * self.inv_std[ch];
                    for k in o..o + s {
                        dx[k] += if self.batch_stats {
                            scale / m * (m * grad_out[k] - sum_g[ch] - self.xhat[k] * sum_gx[ch])
                        } else {
                            scale * grad_out[k]
                        };
                    }
                }
            }
        }
    }
}

struct LayerNormRule {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    c: usize,
}

impl Backward for LayerNormRule {
    fn backward(&self, values: &Values<'_>, grads: &mut Grads<'_>, grad_out: &[f64]) {
        let c = self.c;
        let gamma = values.get(self.gamma).data();
        if let Some(dg) = grads.slot(self.gamma) {
            for (g, xh) in grad_out.chunks_exact(c).zip(self.xhat.chunks_exact(c)) {
                for k in 0..c {
                    dg[k] += g[k] * xh[k];
                }
            }
        }
        if let Some(db) = grads.slot(self.beta) {
            for g in grad_out.chunks_exact(c) {
                db.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
        }
        if let Some(dx) = grads.slot(self.x) {
            let cf = c as f64;
            for (row, ((g, xh), dxr)) in grad_out
                .chunks_exact(c)
                .zip(self.xhat.chunks_exact(c))
                .zip(dx.chunks_exact_mut(c))
                .enumerate()
            {
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for k in 0..c {
                    let d = g[k] * gamma[k];
                    sum_d += d;
                    sum_dx += d * xh[k];
                }
                let inv = self.inv_std[row];
                for k in 0..c {
                    let d = g[k] * gamma[k];
                    dxr[k] += inv / cf * (cf * d - sum_d - xh[k] * sum_dx);
                }
            }
        }
    }
}

impl Tape {
    /// Batch norm with statistics over every axis except the channel axis 1.
    /// Returns the output and the batch statistics for running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        const OP: &str = "batch_norm";
        let (n, c, s) = nc_s(OP, self.shape(x))?;
        check_affine(self, OP, gamma, beta, c)?;
        let xd = self.value(x).data();
        let m = n * s;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for b in 0..n {
                sum += xd[(b * c + ch) * s..][..s].iter().sum::<f64>();
            }
            let mu = sum / m as f64;
            let mut sq = 0.0;
            for b in 0..n {
                sq += xd[(b * c + ch) * s..][..s].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = sq / m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = normalize(xd, &mean, &inv_std, self.value(gamma).data(), self.value(beta).data(), n, c, s);
        let unbiased = var
            .iter()
            .map(|v| if m > 1 { v * m as f64 / (m - 1) as f64 } else { *v })
            .collect();
        let shape = self.shape(x).to_vec();
        let rule = BatchNormRule {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            n,
            c,
            s,
            batch_stats: true,
        };
        let y = self.record(OP, Tensor::new(shape, out)?, &[x, gamma, beta], rule)?;
        Ok((y, BatchStats { mean, var: unbiased }))
    }

    /// Batch norm using fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        const OP: &str = "batch_norm";
        let (n, c, s) = nc_s(OP, self.shape(x))?;
        check_affine(self, OP, gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err(OP, "running statistics length mismatch"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = normalize(
            self.value(x).data(),
            mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
            s,
        );
        let shape = self.shape(x).to_vec();
        let rule = BatchNormRule {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            n,
            c,
            s,
            batch_stats: false,
        };
        self.record(OP, Tensor::new(shape, out)?, &[x, gamma, beta], rule)
    }

    /// Normalises each row of the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        const OP: &str = "layer_norm";
        let shape = self.shape(x).to_vec();
        let Some(&c) = shape.last() else {
            return Err(shape_err(OP, "scalar input"));
        };
        check_affine(self, OP, gamma, beta, c)?;
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xd.len() / c;
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for k in 0..c {
                let xh = (row[k] - mu) * inv;
                xhat[r * c + k] = xh;
                out[r * c + k] = g[k] * xh + b[k];
            }
        }
        let rule = LayerNormRule {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            c,
        };
        self.record(OP, Tensor::new(shape, out)?, &[x, gamma, beta], rule)
    }
}

fn check_affine(tape: &Tape, op: &'static str, gamma: Var, beta: Var, c: usize) -> Result<()> {
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] {
        return Err(shape_err(op, format!("affine parameters must have shape [{c}]")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn normalize(
    xd: &[f64],
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
    n: usize,
    c: usize,
    s: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * s;
            for k in o..o + s {
                let xh = (xd[k] - mean[ch]) * inv_std[ch];
                xhat[k] = xh;
                out[k] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (xhat, out)
}
