//! Fused multi-head scaled dot-product attention.

use super::gemm::{gemm, MatRef};
use super::tape::{Backward, Grads, Values};
use super::{shape_err, Result, Tape, Tensor, TensorError, Var};

#[derive(Copy, Clone)]
struct Dims {
    n: usize,
    l: usize,
    c: usize,
    heads: usize,
}

impl Dims {
    fn d_head(&self) -> usize {
        self.c / self.heads
    }

    /// Strided view of head `h` of sample `b` in an `[N, L, C]` buffer.
    fn head<'a>(&self, data: &'a [f64], b: usize, h: usize) -> MatRef<'a> {
        MatRef {
            data: &data[b * self.l * self.c + h * self.d_head()..],
            rows: self.l,
            cols: self.d_head(),
            row_stride: self.c,
            col_stride: 1,
        }
    }

    fn head_offset(&self, b: usize, h: usize) -> usize {
        b * self.l * self.c + h * self.d_head()
    }
}

struct AttentionRule {
    q: Var,
    k: Var,
    v: Var,
    dims: Dims,
    /// Softmax probabilities, `[N, heads, L, L]`.
    probs: Tensor,
}

impl Backward for AttentionRule {
    fn backward(&self, values: &Values<'_>, grads: &mut Grads<'_>, grad_out: &[f64]) {
        let d = self.dims;
        let (l, c) = (d.l, d.c);
        let scale = 1.0 / (d.d_head() as f64).sqrt();
        let (q, k, v) = (
            values.get(self.q).data(),
            values.get(self.k).data(),
            values.get(self.v).data(),
        );
        let mut dp = vec![0.0; l * l];
        for b in 0..d.n {
            for h in 0..d.heads {
                let p = &self.probs.data()[(b * d.heads + h) * l * l..][..l * l];
                let pm = MatRef::row_major(p, l, l);
                let go = d.head(grad_out, b, h);
                let off = d.head_offset(b, h);
                if let Some(dv) = grads.slot(self.v) {
                    gemm(1.0, pm.t(), go, 1.0, &mut dv[off..], c);
                }
                if !grads.wants(self.q) && !grads.wants(self.k) {
                    continue;
                }
                gemm(1.0, go, d.head(v, b, h).t(), 0.0, &mut dp, l);
                for (prow, drow) in p.chunks_exact(l).zip(dp.chunks_exact_mut(l)) {
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for (x, &pv) in drow.iter_mut().zip(prow) {
                        *x = pv * (*x - dot);
                    }
                }
                let ds = MatRef::row_major(&dp, l, l);
                if let Some(dq) = grads.slot(self.q) {
                    gemm(scale, ds, d.head(k, b, h), 1.0, &mut dq[off..], c);
                }
                if let Some(dk) = grads.slot(self.k) {
                    gemm(scale, ds.t(), d.head(q, b, h), 1.0, &mut dk[off..], c);
                }
            }
        }
    }

    fn saved_attention(&self) -> Option<&Tensor> {
        Some(&self.probs)
    }
}

impl Tape {
    /// `softmax(Q_j K_j^T / sqrt(d_head)) V_j` for each head `j`, heads
    /// concatenated back along the channel axis. Inputs are `[N, L, C]`.
    pub fn multi_head_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        const OP: &str = "attention";
        let &[n, l, c] = self.shape(q) else {
            return Err(shape_err(OP, format!("expected [N, L, C], got {:?}", self.shape(q))));
        };
        if self.shape(k) != [n, l, c] || self.shape(v) != [n, l, c] {
            return Err(shape_err(OP, "query, key and value shapes differ"));
        }
        if heads == 0 || c % heads != 0 {
            return Err(TensorError::Config(format!(
                "{c} channels cannot be split into {heads} heads"
            )));
        }
        let dims = Dims { n, l, c, heads };
        let scale = 1.0 / (dims.d_head() as f64).sqrt();
        let mut probs = vec![0.0; n * heads * l * l];
        let mut out = vec![0.0; n * l * c];
        {
            let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for b in 0..n {
                for h in 0..heads {
                    let p = &mut probs[(b * heads + h) * l * l..][..l * l];
                    gemm(scale, dims.head(qd, b, h), dims.head(kd, b, h).t(), 0.0, p, l);
                    for row in p.chunks_exact_mut(l) {
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut total = 0.0;
                        for x in row.iter_mut() {
                            *x = (*x - max).exp();
                            total += *x;
                        }
                        row.iter_mut().for_each(|x| *x /= total);
                    }
                    let pm = MatRef::row_major(p, l, l);
                    gemm(1.0, pm, dims.head(vd, b, h), 0.0, &mut out[dims.head_offset(b, h)..], c);
                }
            }
        }
        let rule = AttentionRule {
            q,
            k,
            v,
            dims,
            probs: Tensor::new([n, heads, l, l], probs)?,
        };
        self.record(OP, Tensor::new([n, l, c], out)?, &[q, k, v], rule)
    }
}
