//! Pointwise nonlinearities and softmax.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::tape::{Backward, Grads, Values};
use super::{shape_err, Result, Tape, Tensor, Var};

#[derive(Copy, Clone)]
enum Pointwise {
    Relu,
    Gelu,
    Abs,
}

impl Pointwise {
    fn name(self) -> &'static str {
        match self {
            Pointwise::Relu => "relu",
            Pointwise::Gelu => "gelu",
            Pointwise::Abs => "abs",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Pointwise::Relu => x.max(0.0),
            Pointwise::Gelu => 0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2)),
            Pointwise::Abs => x.abs(),
        }
    }

    /// Derivative; kinks at zero take the zero subgradient.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Pointwise::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Pointwise::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
                cdf + x * pdf
            }
            Pointwise::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

struct PointwiseRule {
    x: Var,
    f: Pointwise,
}

impl Backward for PointwiseRule {
    fn backward(&self, values: &Values<'_>, grads: &mut Grads<'_>, grad_out: &[f64]) {
        let x = values.get(self.x).data();
        if let Some(dx) = grads.slot(self.x) {
            for ((d, &xv), g) in dx.iter_mut().zip(x).zip(grad_out) {
                *d += g * self.f.derivative(xv);
            }
        }
    }
}

struct SoftmaxRule {
    x: Var,
    outer: usize,
    len: usize,
    inner: usize,
}

impl Backward for SoftmaxRule {
    fn backward(&self, values: &Values<'_>, grads: &mut Grads<'_>, grad_out: &[f64]) {
        let y = values.output().data();
        let (len, inner) = (self.len, self.inner);
        if let Some(dx) = grads.slot(self.x) {
            for o in 0..self.outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let dot: f64 = (0..len).map(|k| y[at(k)] * grad_out[at(k)]).sum();
                    for k in 0..len {
                        dx[at(k)] += y[at(k)] * (grad_out[at(k)] - dot);
                    }
                }
            }
        }
    }
}

impl Tape {
    fn pointwise(&mut self, x: Var, f: Pointwise) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&a| f.apply(a)).collect())?;
        let kinks = matches!(f, Pointwise::Relu | Pointwise::Abs).then(|| self.fold_kinks(v.data()));
        if let Some(k) = kinks {
            self.set_kinks(k);
        }
        self.record(f.name(), out, &[x], PointwiseRule { x, f })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Pointwise::Relu)
    }

    /// Exact (erf-based) Gaussian error linear unit.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Pointwise::Gelu)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Pointwise::Abs)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (xd[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let rule = SoftmaxRule { x, outer, len, inner };
        self.record("softmax", Tensor::new(shape, out)?, &[x], rule)
    }
}
