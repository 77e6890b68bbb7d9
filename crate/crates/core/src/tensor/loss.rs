use super::tape::{Backward, Grads, Values};
use super::{shape_err, Result, Tape, Tensor, TensorError, Var};

struct WeightedCeRule {
    logits: Var,
    /// Softmax probabilities in the logits layout.
    probs: Vec<f64>,
    labels: Vec<u8>,
    weights: Vec<f64>,
    weight_total: f64,
    classes: usize,
    spatial: usize,
}

impl Backward for WeightedCeRule {
    fn backward(&self, _values: &Values<'_>, grads: &mut Grads<'_>, grad_out: &[f64]) {
        let (k, s) = (self.classes, self.spatial);
        let g0 = grad_out[0] / self.weight_total;
        if let Some(dx) = grads.slot(self.logits) {
            for (pix, &y) in self.labels.iter().enumerate() {
                let (b, i) = (pix / s, pix % s);
                let w = self.weights[y as usize] * g0;
                for c in 0..k {
                    let at = (b * k + c) * s + i;
                    let target = if c == y as usize { 1.0 } else { 0.0 };
                    dx[at] += w * (self.probs[at] - target);
                }
            }
        }
    }
}

impl Tape {
    /// Class-weighted cross-entropy over every pixel of `[N, K, H, W]` logits,
    /// normalised by the sum of the applied weights.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[u8], weights: &[f64]) -> Result<Var> {
        const OP: &str = "weighted_cross_entropy";
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 {
            return Err(shape_err(OP, format!("expected [N, K, ...], got {shape:?}")));
        }
        let (n, k) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if labels.len() != n * s {
            return Err(shape_err(OP, format!("{} labels for {} pixels", labels.len(), n * s)));
        }
        if weights.len() != k || weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(TensorError::Config(format!("need {k} positive class weights, got {weights:?}")));
        }
        if let Some(bad) = labels.iter().find(|&&y| y as usize >= k) {
            return Err(TensorError::Data(format!("label {bad} outside 0..{k}")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        let mut weight_total = 0.0;
        for (pix, &y) in labels.iter().enumerate() {
            let (b, i) = (pix / s, pix % s);
            let at = |c: usize| (b * k + c) * s + i;
            let max = (0..k).map(|c| x[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..k).map(|c| (x[at(c)] - max).exp()).sum::<f64>().ln();
            for c in 0..k {
                probs[at(c)] = (x[at(c)] - lse).exp();
            }
            let w = weights[y as usize];
            loss += w * (lse - x[at(y as usize)]);
            weight_total += w;
        }
        let rule = WeightedCeRule {
            logits,
            probs,
            labels: labels.to_vec(),
            weights: weights.to_vec(),
            weight_total,
            classes: k,
            spatial: s,
        };
        self.record(OP, Tensor::scalar(loss / weight_total), &[logits], rule)
    }
}
