use super::gemm::{gemm, MatRef};
use super::tape::{Backward, Grads, Values};
use super::{shape_err, Result, Tape, Tensor, Var};

struct LinearRule {
    x: Var,
    w: Var,
    b: Option<Var>,
    rows: usize,
    cin: usize,
    cout: usize,
}

impl Backward for LinearRule {
    fn backward(&self, values: &Values<'_>, grads: &mut Grads<'_>, grad_out: &[f64]) {
        let (rows, cin, cout) = (self.rows, self.cin, self.cout);
        let dy = MatRef::row_major(grad_out, rows, cout);
        if let Some(dx) = grads.slot(self.x) {
            let w = MatRef::row_major(values.get(self.w).data(), cin, cout);
            gemm(1.0, dy, w.t(), 1.0, dx, cin);
        }
        if let Some(dw) = grads.slot(self.w) {
            let x = MatRef::row_major(values.get(self.x).data(), rows, cin);
            gemm(1.0, x.t(), dy, 1.0, dw, cout);
        }
        if let Some(b) = self.b {
            if let Some(db) = grads.slot(b) {
                for row in grad_out.chunks_exact(cout) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
            }
        }
    }
}

impl Tape {
    /// Affine map over the last axis: `x[..., Cin] @ w[Cin, Cout] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let xs = self.shape(x).to_vec();
        let &[cin, cout] = self.shape(w) else {
            return Err(shape_err(OP, format!("weight must be 2-d, got {:?}", self.shape(w))));
        };
        if xs.last() != Some(&cin) {
            return Err(shape_err(OP, format!("input {xs:?} does not end in {cin}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err(OP, format!("bias {:?}, expected [{cout}]", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / cin;
        let mut out = vec![0.0; rows * cout];
        gemm(
            1.0,
            MatRef::row_major(self.value(x).data(), rows, cin),
            MatRef::row_major(self.value(w).data(), cin, cout),
            0.0,
            &mut out,
            cout,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                for (o, bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record(OP, Tensor::new(shape, out)?, &inputs, LinearRule { x, w, b, rows, cin, cout })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap(), false).unwrap();
        let w = t.leaf(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false).unwrap();
        let y = t.linear(x, w, None).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn hand_sum_with_bias() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new([2], vec![1.0, 1.0]).unwrap(), false).unwrap();
        let w = t.leaf(Tensor::new([2, 1], vec![1.0, 1.0]).unwrap(), false).unwrap();
        let b = t.leaf(Tensor::new([1], vec![0.5]).unwrap(), false).unwrap();
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y).data(), &[2.5]);
    }

    #[test]
    fn rejects_trailing_mismatch() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros([3, 5]), false).unwrap();
        let w = t.leaf(Tensor::zeros([4, 6]), false).unwrap();
        assert!(t.linear(x, w, None).is_err());
    }
}
