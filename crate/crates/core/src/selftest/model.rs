//! Whole-model checks: parameter registry and instrumented MAC counts
//! against the analytic cost model, and finite differences through the full
//! training objective.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::reference::{self, MacCounter};
use super::CheckResult;
use crate::autodiff::{relative_error, ConvKind, Graph, ProductKind, Tensor};
use crate::cost;
use crate::losses::LossWeights;
use crate::model::{Mode, ModelConfig, VSlowFast};
use crate::train::{batch_loss, Batch, TrainError};

/// Trainable scalars per (module, layer) read off a built model, next to the
/// analytic rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamAudit {
    pub registry_total: u64,
    pub analytic_total: u64,
    /// (module, layer, registry, analytic) for every row that differs.
    pub mismatches: Vec<(String, String, u64, u64)>,
}

impl ParamAudit {
    pub fn agrees(&self) -> bool {
        self.registry_total == self.analytic_total && self.mismatches.is_empty()
    }
}

pub fn audit_params(cfg: &ModelConfig) -> Result<ParamAudit, TrainError> {
    let model = VSlowFast::new(cfg.clone(), 0)?;
    let store = model.store();
    let (analytic_total, rows) = cost::count_params(cfg)?;
    let layers = model.layer_params();
    let mut mismatches = Vec::new();
    for (module, layer, ids) in &layers {
        let registry: u64 = ids.iter().filter(|&&id| store.entry(id).trainable).map(|&id| store.value(id).len() as u64).sum();
        let analytic = rows.iter().find(|r| &r.module == module && &r.layer == layer).map_or(0, |r| r.params);
        if registry != analytic {
            mismatches.push((module.clone(), layer.clone(), registry, analytic));
        }
    }
    for r in &rows {
        if !layers.iter().any(|(m, l, _)| *m == r.module && *l == r.layer) {
            mismatches.push((r.module.clone(), r.layer.clone(), 0, r.params));
        }
    }
    Ok(ParamAudit { registry_total: store.num_trainable() as u64, analytic_total, mismatches })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacAudit {
    pub instrumented: u64,
    pub analytic: u64,
    /// Largest deviation between a recorded graph convolution or product
    /// and its loop re-execution.
    pub max_value_error: f64,
}

impl MacAudit {
    pub fn agrees(&self) -> bool {
        self.instrumented == self.analytic
    }
}

/// Runs one source through the model, then re-executes every recorded
/// convolution and matrix product with the counting loop oracles.
pub fn audit_macs(cfg: &ModelConfig, input_shape: (usize, usize)) -> Result<MacAudit, TrainError> {
    let (analytic, _) = cost::count_macs(cfg, input_shape)?;
    let model = VSlowFast::new(cfg.clone(), 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, w) = input_shape;
    let s = cfg.image_size;
    let mag = Tensor::from_fn(&[1, 1, h, w], |_| rng.gen_range(0.0..1.0));
    let img = Tensor::from_fn(&[1, 3, s, s], |_| rng.gen_range(0.0..1.0));
    let mut g = Graph::new();
    let mut sess = model.session(&mut g, Mode::Eval);
    model.forward(&mut sess, &mag, &img)?;
    drop(sess);

    let mut counter = MacCounter::default();
    let mut max_value_error = 0.0f64;
    let mut diff = |a: &Tensor, b: &Tensor| {
        let e = if a.shape() == b.shape() {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        max_value_error = max_value_error.max(e);
    };
    for r in g.conv_records() {
        let (x, wt, b) = (g.value(r.input), g.value(r.weight), r.bias.map(|b| g.value(b)));
        let y = match r.kind {
            ConvKind::Conv => reference::conv2d(x, wt, b, r.spec.stride, r.spec.pad, r.spec.dilation, &mut counter),
            ConvKind::Transposed => reference::conv_transpose2d(x, wt, b, r.spec.stride, r.spec.pad, &mut counter),
        };
        diff(&y, g.value(r.output));
    }
    for r in g.product_records() {
        let (a, b) = (g.value(r.a), g.value(r.b));
        match r.kind {
            ProductKind::MatMul => {
                let y = reference::matmul(a, b, &mut counter);
                diff(&y, g.value(r.output));
            }
            ProductKind::Outer => {
                counter.0 += (a.len() * b.len()) as u64;
            }
        }
    }
    Ok(MacAudit { instrumented: counter.0, analytic, max_value_error })
}

/// A model small enough for finite differences over all of its layers.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        category_count: 2,
        vision_channels: vec![3, 3, 3, 2],
        slow_layers: 4,
        fast_layers: 4,
        slow_alpha: 2,
        fast_alpha: 1,
        unet_channels: vec![3, 3],
        image_size: 16,
        zero_init_final: false,
        ..ModelConfig::default()
    }
}

fn micro_batch(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n_sources: usize, mixtures: usize) -> Batch {
    let b = n_sources * mixtures;
    let (h, w) = (16, 16 * cfg.max_alpha());
    let s = cfg.image_size;
    let mut mags = Vec::with_capacity(b * h * w);
    let mut targets = Vec::with_capacity(b * h * w);
    for _ in 0..mixtures {
        let mag: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..2.0)).collect();
        let owner: Vec<usize> = (0..h * w).map(|_| rng.gen_range(0..n_sources)).collect();
        for n in 0..n_sources {
            mags.extend_from_slice(&mag);
            targets.extend(owner.iter().map(|&o| if o == n { 1.0 } else { 0.0 }));
        }
    }
    Batch {
        magnitudes: Tensor::new(&[b, 1, h, w], mags).expect("sized"),
        images: Tensor::from_fn(&[b, 3, s, s], |_| rng.gen_range(0.0..1.0)),
        targets: Tensor::new(&[b, 1, h, w], targets).expect("sized"),
        partner_images: Tensor::from_fn(&[b, 3, s, s], |_| rng.gen_range(0.0..1.0)),
        labels: (0..b).map(|i| (i % 2) as f64).collect(),
        n_sources,
    }
}

/// Outcome of [`end_to_end_gradient`].
#[derive(Debug, Clone)]
pub struct GradientAudit {
    pub result: CheckResult,
    pub probed: usize,
    /// Coordinates whose difference quotients never settled because a
    /// LeakyReLU, hinge or max kink lies within every probed interval.
    pub kinks: usize,
}

impl GradientAudit {
    /// Passes when the error is within tolerance and at most one probe in
    /// ten had to be discarded at a kink. Batch-norm scales and shifts move
    /// every activation of a channel at once, so they meet kinks far more
    /// often than single weights do.
    pub fn passed(&self) -> bool {
        self.result.passed() && self.kinks * 10 <= self.probed
    }
}

/// Central differences of the total training loss (separation plus both
/// contrastive terms) with respect to sampled coordinates of every trainable
/// tensor of a freshly initialised micro model.
///
/// Each coordinate is probed at `eps` and then at halved steps until two
/// consecutive quotients agree to a tenth of `tolerance`; the settled value
/// is compared with the analytic gradient.
pub fn end_to_end_gradient(seed: u64, eps: f64, coords_per_tensor: usize, tolerance: f64) -> Result<GradientAudit, TrainError> {
    let cfg = micro_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = VSlowFast::new(cfg.clone(), seed)?;
    let batch = micro_batch(&mut rng, &cfg, 2, 2);
    // A margin above the typical embedding distance keeps both hinge
    // branches active.
    let weights = LossWeights { r1: 0.5, r2: 0.5, margin: 2.0 };
    let loss = |m: &VSlowFast| -> Result<f64, TrainError> {
        let mut g = Graph::new();
        let (parts, _) = batch_loss(m, &mut g, &batch, &weights, true, Mode::Train)?;
        Ok(g.value(parts.total).item())
    };

    let mut g = Graph::new();
    let (parts, _) = batch_loss(&model, &mut g, &batch, &weights, true, Mode::Train)?;
    g.backward(parts.total)?;
    // A parameter read more than once has one leaf per read.
    let mut analytic: Vec<Vec<f64>> = model.store().entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
    for (id, grad) in g.param_grads() {
        analytic[id.index()].iter_mut().zip(grad).for_each(|(a, b)| *a += b);
    }

    let (mut worst, mut probed, mut kinks) = (0.0f64, 0, 0);
    let ids: Vec<_> = model.store().ids().filter(|&id| model.store().entry(id).trainable).collect();
    for id in ids {
        let len = model.store().value(id).len();
        let coords = sample(&mut rng, len, coords_per_tensor.min(len)).into_vec();
        for i in coords {
            let orig = model.store().value(id).data()[i];
            let mut quotient = |step: f64| -> Result<f64, TrainError> {
                model.store_mut().value_mut(id).data_mut()[i] = orig + step;
                let up = loss(&model)?;
                model.store_mut().value_mut(id).data_mut()[i] = orig - step;
                let down = loss(&model)?;
                model.store_mut().value_mut(id).data_mut()[i] = orig;
                Ok((up - down) / (2.0 * step))
            };
            probed += 1;
            let mut step = eps;
            let mut prev = quotient(step)?;
            let mut settled = None;
            for _ in 0..4 {
                step /= 2.0;
                let cur = quotient(step)?;
                if relative_error(prev, cur) < tolerance / 10.0 {
                    settled = Some(cur);
                    break;
                }
                prev = cur;
            }
            match settled {
                Some(numeric) => worst = worst.max(relative_error(analytic[id.index()][i], numeric)),
                None => kinks += 1,
            }
        }
    }
    let result = CheckResult { name: "end_to_end_loss".into(), seed, error: worst, tolerance };
    Ok(GradientAudit { result, probed, kinks })
}
