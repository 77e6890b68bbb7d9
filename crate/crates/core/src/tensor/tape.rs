use std::collections::HashMap;

use super::param::{ParamId, ParamKind, ParamStore};
use super::{check_finite, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Read access to recorded values during the backward sweep.
pub(crate) struct Values<'a> {
    nodes: &'a [Node],
    out: usize,
}

impl<'a> Values<'a> {
    pub fn get(&self, v: Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    pub fn output(&self) -> &'a Tensor {
        &self.nodes[self.out].value
    }
}

/// Write access to input gradient slots during the backward sweep.
pub(crate) struct Grads<'a> {
    nodes: &'a [Node],
    slots: &'a mut [Option<Vec<f64>>],
}

impl Grads<'_> {
    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Zero-initialised accumulator for `v`, or `None` when `v` needs no gradient.
    pub fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.slots[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    pub fn add(&mut self, v: Var, g: &[f64]) {
        if let Some(slot) = self.slot(v) {
            for (s, x) in slot.iter_mut().zip(g) {
                *s += x;
            }
        }
    }
}

/// Backward rule of one recorded operation.
pub(crate) trait Backward {
    fn backward(&self, values: &Values<'_>, grads: &mut Grads<'_>, grad_out: &[f64]);

    /// Attention probabilities kept by the fused attention op.
    fn saved_attention(&self) -> Option<&Tensor> {
        None
    }
}

enum NodeKind {
    Leaf,
    Op(Box<dyn Backward>),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    kind: NodeKind,
}

/// Ordered record of a forward computation.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a single reverse sweep visits each node once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
    kink_margin: Option<f64>,
    sign_pattern: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Smallest nonzero input to relu or abs over the recorded forward pass;
    /// infinite when there is none. Exact zeros are left out: they come from
    /// inputs that are identically zero nearby, such as the difference of
    /// two rectified features that are both dead.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin.unwrap_or(f64::INFINITY)
    }

    /// Hash of the sign of every input to relu or abs. Two forward passes
    /// with equal patterns lie on the same smooth piece of the computation.
    pub fn sign_pattern(&self) -> u64 {
        self.sign_pattern
    }

    /// Sign pattern and kink margin after also seeing `inputs`.
    pub(crate) fn fold_kinks(&self, inputs: &[f64]) -> (u64, f64) {
        const PRIME: u64 = 0x100_0000_01b3;
        let mut h = self.sign_pattern ^ 0xcbf2_9ce4_8422_2325;
        let mut margin = self.kink_margin();
        for &x in inputs {
            let sign = (x > 0.0) as u64 | (((x < 0.0) as u64) << 1);
            h = (h ^ sign).wrapping_mul(PRIME);
            if x != 0.0 {
                margin = margin.min(x.abs());
            }
        }
        (h, margin)
    }

    pub(crate) fn set_kinks(&mut self, (pattern, margin): (u64, f64)) {
        self.sign_pattern = pattern;
        self.kink_margin = Some(margin);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", value.data())?;
        self.nodes.push(Node {
            value,
            requires_grad,
            kind: NodeKind::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter. Repeated requests return the same
    /// variable, so every use of a parameter within one forward pass shares
    /// a node and its gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.kind == ParamKind::Learnable)?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub(crate) fn record(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: &[Var],
        rule: impl Backward + 'static,
    ) -> Result<Var> {
        check_finite(op, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            kind: NodeKind::Op(Box::new(rule)),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter leaf touched by this tape.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn attention_probs(&self, v: Var) -> Option<&Tensor> {
        match &self.nodes[v.0].kind {
            NodeKind::Op(rule) => rule.saved_attention(),
            NodeKind::Leaf => None,
        }
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.nodes[loss.0].value.numel();
        if n != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }
        let mut slots: Vec<Option<Vec<f64>>> = Vec::new();
        slots.resize_with(loss.0 + 1, || None);
        slots[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.kind {
                NodeKind::Leaf => {
                    let acc = self.leaf_grads[i].get_or_insert_with(|| vec![0.0; g.len()]);
                    for (a, x) in acc.iter_mut().zip(&g) {
                        *a += x;
                    }
                }
                NodeKind::Op(rule) => {
                    let values = Values {
                        nodes: &self.nodes,
                        out: i,
                    };
                    let mut grads = Grads {
                        nodes: &self.nodes,
                        slots: &mut slots,
                    };
                    rule.backward(&values, &mut grads, &g);
                }
            }
        }
        Ok(())
    }
}
