//! Named, ordered parameter storage.

use std::collections::HashMap;

use super::{Tape, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learnable parameters receive gradients; buffers (BN running statistics)
/// are persisted but never optimised.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Learnable,
    Buffer,
}

/// Coarse layer family, used to stratify gradient checks and reports.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Conv,
    Depthwise,
    Linear,
    Norm,
    Fusion,
    Classifier,
    Statistic,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Conv,
        Family::Depthwise,
        Family::Linear,
        Family::Norm,
        Family::Fusion,
        Family::Classifier,
        Family::Statistic,
    ];
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub kind: ParamKind,
    pub family: Family,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        kind: ParamKind,
        family: Family,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let grad = vec![0.0; value.numel()];
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad,
            kind,
            family,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn learnable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter()
            .filter(|(_, p)| p.kind == ParamKind::Learnable)
            .map(|(id, _)| id)
    }

    pub fn num_learnable_values(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Learnable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the parameter-leaf gradients recorded on `tape` into the store.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (id, g) in tape.param_grads() {
            for (acc, x) in self.params[id.0].grad.iter_mut().zip(g) {
                *acc += x;
            }
        }
    }
}
