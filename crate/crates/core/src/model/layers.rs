use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{AutodiffError, BatchStats, ConvSpec, Graph, ParamId, ParamStore, Tensor, Var};

/// Whether batch norms use batch statistics (and report them) or their
/// running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
}

/// One forward pass: the graph being built plus the parameter values it
/// reads from.
pub struct Session<'a> {
    pub graph: &'a mut Graph,
    store: &'a ParamStore,
    mode: Mode,
    updates: Vec<BnUpdate>,
}

impl<'a> Session<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a ParamStore, mode: Mode) -> Self {
        Self { graph, store, mode, updates: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var, AutodiffError> {
        self.graph.param(id, self.store.value(id))
    }

    /// Batch-norm updates collected so far.
    pub fn into_updates(self) -> Vec<BnUpdate> {
        self.updates
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    /// Normal with variance 2 / fan_in (for layers followed by LeakyReLU).
    Kaiming,
    /// Normal with variance 1 / fan_in.
    Linear,
    Zero,
}

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
    pub transposed: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: ConvSpec,
        transposed: bool,
        init: Init,
    ) -> Result<Self, AutodiffError> {
        let fan_in = if transposed {
            (cin * k * k / (spec.stride * spec.stride)).max(1)
        } else {
            cin * k * k
        };
        let std = match init {
            Init::Kaiming => (2.0 / fan_in as f64).sqrt(),
            Init::Linear => (1.0 / fan_in as f64).sqrt(),
            Init::Zero => 0.0,
        };
        let shape = if transposed { [cin, cout, k, k] } else { [cout, cin, k, k] };
        let weight = if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("valid std");
            Tensor::from_fn(&shape, |_| normal.sample(rng))
        } else {
            Tensor::zeros(&shape)
        };
        let w = store.add(format!("{name}.weight"), weight, true)?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true)?;
        Ok(Self { w, b, spec, transposed })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, AutodiffError> {
        let w = s.param(self.w)?;
        let b = s.param(self.b)?;
        if self.transposed {
            s.graph.conv_transpose2d(x, w, Some(b), self.spec.stride, self.spec.pad)
        } else {
            s.graph.conv2d(x, w, Some(b), self.spec)
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self, AutodiffError> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[channels], 1.0), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::filled(&[channels], 1.0), false)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, AutodiffError> {
        let gamma = s.param(self.gamma)?;
        let beta = s.param(self.beta)?;
        match s.mode {
            Mode::Train => {
                let (y, stats) = s.graph.batchnorm2d_train(x, gamma, beta)?;
                s.updates.push(BnUpdate { running_mean: self.running_mean, running_var: self.running_var, stats });
                Ok(y)
            }
            Mode::Eval => {
                let (rm, rv) = (s.store.value(self.running_mean).clone(), s.store.value(self.running_var).clone());
                s.graph.batchnorm2d_eval(x, gamma, beta, rm.data(), rv.data())
            }
        }
    }
}

/// Convolution, optional batch norm, optional LeakyReLU(0.2).
#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub conv: Conv,
    pub bn: Option<BatchNorm>,
    pub act: bool,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Block {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, AutodiffError> {
        let mut h = self.conv.forward(s, x)?;
        if let Some(bn) = &self.bn {
            h = bn.forward(s, h)?;
        }
        if self.act {
            h = s.graph.leaky_relu(h, LEAKY_SLOPE)?;
        }
        Ok(h)
    }

    /// Parameter ids of this block, in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.conv.w, self.conv.b];
        if let Some(bn) = &self.bn {
            ids.extend([bn.gamma, bn.beta]);
        }
        ids
    }
}

pub(crate) fn fork_rng(rng: &mut ChaCha8Rng) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(rng.gen())
}
