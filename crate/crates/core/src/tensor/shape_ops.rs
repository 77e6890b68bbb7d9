//! Elementwise arithmetic, reductions and layout changes.

use super::tape::{Backward, Grads, Values};
use super::{shape_err, Result, Tape, Tensor, Var};

#[derive(Copy, Clone)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryRule {
    a: Var,
    b: Var,
    op: Binary,
}

impl Backward for BinaryRule {
    fn backward(&self, values: &Values<'_>, grads: &mut Grads<'_>, grad_out: &[f64]) {
        match self.op {
            Binary::Add => {
                grads.add(self.a, grad_out);
                grads.add(self.b, grad_out);
            }
            Binary::Sub => {
                grads.add(self.a, grad_out);
                if let Some(db) = grads.slot(self.b) {
                    db.iter_mut().zip(grad_out).for_each(|(d, g)| *d -= g);
                }
            }
            Binary::Mul => {
                let (av, bv) = (values.get(self.a).data(), values.get(self.b).data());
                if let Some(da) = grads.slot(self.a) {
                    for ((d, g), y) in da.iter_mut().zip(grad_out).zip(bv) {
                        *d += g * y;
                    }
                }
                if let Some(db) = grads.slot(self.b) {
                    for ((d, g), x) in db.iter_mut().zip(grad_out).zip(av) {
                        *d += g * x;
                    }
                }
            }
        }
    }
}

struct ScaleRule {
    x: Var,
    factor: f64,
}

impl Backward for ScaleRule {
    fn backward(&self, _values: &Values<'_>, grads: &mut Grads<'_>, grad_out: &[f64]) {
        if let Some(dx) = grads.slot(self.x) {
            dx.iter_mut().zip(grad_out).for_each(|(d, g)| *d += g * self.factor);
        }
    }
}

struct ScaleChannelsRule {
    x: Var,
    s: Var,
    spatial: usize,
}

impl Backward for ScaleChannelsRule {
    fn backward(&self, values: &Values<'_>, grads: &mut Grads<'_>, grad_out: &[f64]) {
        let sp = self.spatial;
        let sv = values.get(self.s).data();
        if grads.wants(self.s) {
            let xv = values.get(self.x).data();
            let ds = grads.slot(self.s).unwrap();
            for (nc, d) in ds.iter_mut().enumerate() {
                let r = nc * sp..(nc + 1) * sp;
                *d += xv[r.clone()].iter().zip(&grad_out[r]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        if let Some(dx) = grads.slot(self.x) {
            for (nc, &scale) in sv.iter().enumerate() {
                let r = nc * sp..(nc + 1) * sp;
                dx[r.clone()].iter_mut().zip(&grad_out[r]).for_each(|(d, g)| *d += g * scale);
            }
        }
    }
}

struct SumRule {
    x: Var,
    scale: f64,
}

impl Backward for SumRule {
    fn backward(&self, _values: &Values<'_>, grads: &mut Grads<'_>, grad_out: &[f64]) {
        let g = grad_out[0] * self.scale;
        if let Some(dx) = grads.slot(self.x) {
            dx.iter_mut().for_each(|d| *d += g);
        }
    }
}

struct ReshapeRule {
    x: Var,
}

impl Backward for ReshapeRule {
    fn backward(&self, _values: &Values<'_>, grads: &mut Grads<'_>, grad_out: &[f64]) {
        grads.add(self.x, grad_out);
    }
}

/// Concatenation and narrowing share the same block copy pattern:
/// `outer` blocks, each with a contiguous run of `inner * len` values.
struct ConcatRule {
    parts: Vec<(Var, usize)>,
    outer: usize,
    inner: usize,
    total: usize,
}

impl Backward for ConcatRule {
    fn backward(&self, _values: &Values<'_>, grads: &mut Grads<'_>, grad_out: &[f64]) {
        let mut offset = 0;
        for &(v, len) in &self.parts {
            let run = len * self.inner;
            if let Some(dv) = grads.slot(v) {
                for o in 0..self.outer {
                    let src = &grad_out[o * self.total * self.inner + offset..][..run];
                    dv[o * run..(o + 1) * run].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                }
            }
            offset += run;
        }
    }
}

struct NarrowRule {
    x: Var,
    outer: usize,
    inner: usize,
    total: usize,
    start: usize,
    len: usize,
}

impl Backward for NarrowRule {
    fn backward(&self, _values: &Values<'_>, grads: &mut Grads<'_>, grad_out: &[f64]) {
        let run = self.len * self.inner;
        if let Some(dx) = grads.slot(self.x) {
            for o in 0..self.outer {
                let dst = &mut dx[(o * self.total + self.start) * self.inner..][..run];
                dst.iter_mut().zip(&grad_out[o * run..(o + 1) * run]).for_each(|(d, g)| *d += g);
            }
        }
    }
}

/// `[N, A, B] <-> [N, B, A]` transpose of the two trailing axes.
fn swap_last(data: &[f64], n: usize, a: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..n {
        let src = &data[i * a * b..(i + 1) * a * b];
        let dst = &mut out[i * a * b..(i + 1) * a * b];
        for r in 0..a {
            for c in 0..b {
                dst[c * a + r] = src[r * b + c];
            }
        }
    }
    out
}

struct TransposeRule {
    x: Var,
    n: usize,
    a: usize,
    b: usize,
}

impl Backward for TransposeRule {
    fn backward(&self, _values: &Values<'_>, grads: &mut Grads<'_>, grad_out: &[f64]) {
        if grads.wants(self.x) {
            let back = swap_last(grad_out, self.n, self.b, self.a);
            grads.add(self.x, &back);
        }
    }
}

impl Tape {
    fn binary(&mut self, a: Var, b: Var, op: Binary, name: &'static str) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = match op {
            Binary::Add => x.iter().zip(y).map(|(p, q)| p + q).collect(),
            Binary::Sub => x.iter().zip(y).map(|(p, q)| p - q).collect(),
            Binary::Mul => x.iter().zip(y).map(|(p, q)| p * q).collect(),
        };
        let value = Tensor::new(self.shape(a), out)?;
        self.record(name, value, &[a, b], BinaryRule { a, b, op })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = self.value(x);
        let value = Tensor::new(v.shape(), v.data().iter().map(|a| a * factor).collect())?;
        self.record("scale", value, &[x], ScaleRule { x, factor })
    }

    /// `x[N, C, ...] * s[N, C]`, broadcast over the trailing axes.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(s) != &xs[..2] {
            return Err(shape_err(
                "scale_channels",
                format!("{:?} cannot scale {:?}", self.shape(s), xs),
            ));
        }
        let spatial: usize = xs[2..].iter().product();
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (nc, &scale) in sv.iter().enumerate() {
            out[nc * spatial..(nc + 1) * spatial].iter_mut().for_each(|v| *v *= scale);
        }
        self.record("scale_channels", Tensor::new(xs, out)?, &[x, s], ScaleChannelsRule { x, s, spatial })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.record("sum", Tensor::scalar(total), &[x], SumRule { x, scale: 1.0 })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let scale = 1.0 / n as f64;
        let total: f64 = self.value(x).data().iter().sum();
        self.record("mean", Tensor::scalar(total * scale), &[x], SumRule { x, scale })
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.record("reshape", value, &[x], ReshapeRule { x })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        const OP: &str = "concat";
        let Some(&first) = parts.first() else {
            return Err(shape_err(OP, "no inputs"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err(OP, format!("axis {axis} out of range for {base:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err(OP, format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let run = len * inner;
                out.extend_from_slice(&self.value(p).data()[o * run..(o + 1) * run]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rule = ConcatRule {
            parts: parts.iter().copied().zip(lens).collect(),
            outer,
            inner,
            total,
        };
        self.record(OP, Tensor::new(shape, out)?, parts, rule)
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("narrow", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let total = shape[axis];
        let run = len * inner;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * run);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * total + start) * inner..][..run]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rule = NarrowRule {
            x,
            outer,
            inner,
            total,
            start,
            len,
        };
        self.record("narrow", Tensor::new(new_shape, out)?, &[x], rule)
    }

    /// `[N, C, H, W] -> [N, H*W, C]`, tokens in row-major pixel order.
    pub fn flatten_tokens(&mut self, x: Var) -> Result<Var> {
        let &[n, c, h, w] = self.shape(x) else {
            return Err(shape_err("flatten_tokens", format!("expected NCHW, got {:?}", self.shape(x))));
        };
        let data = swap_last(self.value(x).data(), n, c, h * w);
        let rule = TransposeRule { x, n, a: c, b: h * w };
        self.record("flatten_tokens", Tensor::new([n, h * w, c], data)?, &[x], rule)
    }

    /// `[N, H*W, C] -> [N, C, H, W]`.
    pub fn unflatten_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let &[n, l, c] = self.shape(x) else {
            return Err(shape_err("unflatten_tokens", format!("expected [N, L, C], got {:?}", self.shape(x))));
        };
        if l != h * w {
            return Err(shape_err("unflatten_tokens", format!("{l} tokens cannot form {h}x{w}")));
        }
        let data = swap_last(self.value(x).data(), n, l, c);
        let rule = TransposeRule { x, n, a: l, b: c };
        self.record("unflatten_tokens", Tensor::new([n, c, h, w], data)?, &[x], rule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_and_narrow_are_inverse() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_fn([2, 1, 2], |i| i as f64), true).unwrap();
        let b = t.leaf(Tensor::from_fn([2, 2, 2], |i| 10.0 + i as f64), true).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[2, 3, 2]);
        assert_eq!(
            t.value(c).data(),
            &[0.0, 1.0, 10.0, 11.0, 12.0, 13.0, 2.0, 3.0, 14.0, 15.0, 16.0, 17.0]
        );
        let back = t.narrow(c, 1, 1, 2).unwrap();
        assert_eq!(t.value(back), t.value(b));
    }

    #[test]
    fn flatten_tokens_row_major() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn([1, 2, 2, 2], |i| i as f64), false).unwrap();
        let tok = t.flatten_tokens(x).unwrap();
        assert_eq!(t.shape(tok), &[1, 4, 2]);
        assert_eq!(t.value(tok).data(), &[0.0, 4.0, 1.0, 5.0, 2.0, 6.0, 3.0, 7.0]);
        let back = t.unflatten_tokens(tok, 2, 2).unwrap();
        assert_eq!(t.value(back), t.value(x));
    }

    #[test]
    fn scale_channels_broadcasts() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full([1, 2, 1, 2], 1.0), true).unwrap();
        let s = t.leaf(Tensor::new([1, 2], vec![2.0, -1.0]).unwrap(), true).unwrap();
        let y = t.scale_channels(x, s).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 2.0, -1.0, -1.0]);
        let l = t.sum(y).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(s).unwrap(), &[2.0, 2.0]);
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0, -1.0, -1.0]);
    }

    #[test]
    fn mismatched_add_fails() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros([2]), false).unwrap();
        let b = t.leaf(Tensor::zeros([3]), false).unwrap();
        assert!(t.add(a, b).is_err());
    }
}
