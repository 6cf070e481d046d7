//! Minimal reverse-mode differentiation over dense double-precision tensors.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value
//! and whatever it needs for the reverse pass. Because nodes are only ever
//! appended, creation order is a topological order and `backward` is a single
//! reverse sweep. Trainable tensors live in a [`ParamStore`] outside the
//! graph; a forward pass copies them in as leaves and the gradients reaching
//! those leaves are folded back with [`ParamStore::accumulate`].

pub mod checkpoint;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

use thiserror::Error;

pub use gradcheck::{check_gradients, relative_error, GradCheckReport};
pub use graph::{
    sigmoid_scalar, BatchStats, ConvKind, ConvRecord, ConvSpec, Graph, ProductKind, ProductRecord, Var, BN_EPS, BN_MOMENTUM,
    PROB_CLAMP,
};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("bce targets must lie in [0, 1]")]
    TargetRange,
    #[error("domain error: {0}")]
    Domain(&'static str),
    #[error("resolution mismatch: width {width} is not divisible by alpha {alpha}")]
    ResolutionMismatch { width: usize, alpha: usize },
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Buffers such as running statistics are stored alongside parameters
    /// (and checkpointed with them) but are never optimised or counted.
    pub trainable: bool,
}

/// Named registry of trainable tensors and persistent buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId, AutodiffError> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(AutodiffError::DuplicateName(name));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry { name, value, grad, trainable });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the gradients that reached parameter leaves of `graph`.
    pub fn accumulate(&mut self, graph: &Graph) {
        for (id, g) in graph.param_grads() {
            let e = &mut self.entries[id.0];
            e.grad.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}
