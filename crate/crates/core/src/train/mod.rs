//! Training loop, optimizer, checkpoints and evaluation.

mod eval;
mod sgd;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::checkpoint::{self, CheckpointError};
use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::data::{parallel_ordered, DataConfig, DataError, Dataset, MixtureItem, Pool, SplitSizes};
use crate::dsp::DspError;
use crate::losses::{contrast_loss, separation_loss, total_loss, LossWeights};
use crate::metrics::MetricsError;
use crate::model::{stack, BnUpdate, Mode, ModelConfig, ModelError, VSlowFast};

pub use eval::{evaluate, masks_for, reconstruct, score_item, separate, EvalReport, ItemScores, MaskSource, Separated};
pub use sgd::{sgd_step, OptimizerState, SgdConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.ckpt";
pub const LOG_FILE: &str = "train.ndjson";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("optimizer error: {0}")]
    Optimizer(String),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Everything a run needs: data, model, objective and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Mixtures per step.
    pub batch_size: usize,
    pub steps: usize,
    #[serde(default)]
    pub optimizer: SgdConfig,
    pub seed: u64,
    /// Checkpoint every this many steps (0: only at the end).
    #[serde(default)]
    pub eval_every: usize,
    pub n_sources: usize,
    /// Whether the contrastive terms are part of the objective.
    #[serde(default = "yes")]
    pub contrast: bool,
    #[serde(default)]
    pub weights: LossWeights,
    /// Threads used to build each batch; results do not depend on it.
    #[serde(default = "one")]
    pub workers: usize,
    /// Test mixtures scored by [`evaluate`].
    #[serde(default = "default_eval_mixtures")]
    pub eval_mixtures: usize,
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    /// Per-category sample counts of the generated dataset.
    #[serde(default)]
    pub split_sizes: SplitSizes,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

fn default_eval_mixtures() -> usize {
    40
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            steps: 2000,
            optimizer: SgdConfig::default(),
            seed: 0,
            eval_every: 0,
            n_sources: 2,
            contrast: true,
            weights: LossWeights::default(),
            workers: 1,
            eval_mixtures: default_eval_mixtures(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            split_sizes: SplitSizes::default(),
        }
    }
}

impl TrainConfig {
    /// The desk-scale setup used for the toy experiments.
    pub fn toy() -> Self {
        Self {
            batch_size: 6,
            optimizer: SgdConfig { lr: 2.5e-2, ..SgdConfig::default() },
            eval_every: 500,
            model: ModelConfig::toy(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.data.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(2..=4).contains(&self.n_sources) {
            return Err(TrainError::Config(format!("n_sources must be 2..=4, got {}", self.n_sources)));
        }
        if self.n_sources > self.data.categories {
            return Err(TrainError::Config("n_sources exceeds the number of categories".into()));
        }
        if self.model.category_count != self.data.categories {
            return Err(TrainError::Config(format!(
                "model predicts {} categories, data has {}",
                self.model.category_count, self.data.categories
            )));
        }
        if self.model.image_size != self.data.image_size {
            return Err(TrainError::Config("model and data image sizes differ".into()));
        }
        let (h, w) = self.data.spec_shape();
        self.model.check_input(h, w)?;
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite() && (0.0..1.0).contains(&o.momentum) && o.weight_decay >= 0.0) {
            return Err(TrainError::Config("optimizer needs lr ≥ 0, momentum in [0, 1), weight_decay ≥ 0".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// Tensors of one step: `B = mixtures · N` source items.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub magnitudes: Tensor,
    pub images: Tensor,
    pub targets: Tensor,
    pub partner_images: Tensor,
    pub labels: Vec<f64>,
    pub n_sources: usize,
}

impl Batch {
    pub fn from_items(items: &[MixtureItem]) -> Result<Self, TrainError> {
        let n_sources = items.first().map(|i| i.sources.len()).ok_or_else(|| TrainError::Config("empty batch".into()))?;
        let (mut mags, mut images, mut targets, mut partners, mut labels) = (vec![], vec![], vec![], vec![], vec![]);
        for item in items {
            if item.sources.len() != n_sources {
                return Err(TrainError::Config("mixtures in a batch must share N".into()));
            }
            let mag = item.spectrogram.magnitude().into_grid();
            let (h, w) = mag.shape();
            for (n, pair) in item.contrast_pairs.iter().enumerate() {
                mags.push(Tensor::new(&[1, h, w], mag.data().to_vec())?);
                images.push(item.sources[n].image.clone());
                targets.push(Tensor::new(&[1, h, w], item.gt_masks[n].bits().data().to_vec())?);
                partners.push(item.partners[pair.partner_index].image.clone());
                labels.push(pair.label as f64);
            }
        }
        Ok(Self {
            magnitudes: stack(&mags)?,
            images: stack(&images)?,
            targets: stack(&targets)?,
            partner_images: stack(&partners)?,
            labels,
            n_sources,
        })
    }
}

/// Graph handles of one step's objective.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub sep: Var,
    pub l_e: Var,
    pub l_m: Var,
}

/// Builds the full objective for `batch` on `g`. Returns the batch-norm
/// updates collected in training mode.
pub fn batch_loss(
    model: &VSlowFast,
    g: &mut Graph,
    batch: &Batch,
    weights: &LossWeights,
    contrast: bool,
    mode: Mode,
) -> Result<(LossParts, Vec<BnUpdate>), TrainError> {
    let mut s = model.session(g, mode);
    let out = model.forward(&mut s, &batch.magnitudes, &batch.images)?;
    let partner = if contrast {
        let img = s.graph.constant(batch.partner_images.clone())?;
        Some(model.vision_forward(&mut s, img)?.embedding)
    } else {
        None
    };
    let sep = separation_loss(s.graph, &out.slow, out.fast.as_ref(), &batch.targets, batch.n_sources)?;
    let ct = contrast_loss(
        s.graph,
        partner,
        Some(out.vision.embedding),
        Some(out.vision.fmap),
        if contrast { &batch.labels } else { &[] },
        weights,
    )?;
    let total = total_loss(s.graph, sep, ct.total)?;
    Ok((LossParts { total, sep, l_e: ct.l_e, l_m: ct.l_m }, s.into_updates()))
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub l_sep: f64,
    pub l_e: f64,
    #[serde(rename = "l_M")]
    pub l_m: f64,
    pub total: f64,
}

/// Model, optimizer and data of a run in progress.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: VSlowFast,
    pub optimizer: OptimizerState,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let mut model = VSlowFast::new(config.model.clone(), config.seed)?;
        if config.model.zero_init_final {
            model.zero_final_layers();
        }
        let optimizer = OptimizerState::new(config.optimizer, model.store());
        Ok(Self { config, model, optimizer, step: 0 })
    }

    pub fn batch(&self, pool: &Pool, step: usize) -> Result<Batch, TrainError> {
        let c = &self.config;
        let items = parallel_ordered(c.batch_size, c.workers, |j| {
            pool.mixture(c.data.framing(), c.n_sources, c.seed, (step * c.batch_size + j) as u64)
        })?;
        Batch::from_items(&items)
    }

    /// Runs one optimisation step on mixtures from `pool`.
    pub fn step(&mut self, pool: &Pool) -> Result<LogRecord, TrainError> {
        let step = self.step;
        let batch = self.batch(pool, step)?;
        let mut g = Graph::new();
        let nonfinite = |detail: String| TrainError::NonFiniteLoss { step, detail };
        let (parts, updates) = batch_loss(&self.model, &mut g, &batch, &self.config.weights, self.config.contrast, Mode::Train)
            .map_err(|e| match e {
                TrainError::Model(ModelError::Autodiff(AutodiffError::NonFinite(op))) => {
                    nonfinite(format!("forward pass produced a non-finite value in {op}"))
                }
                e => e,
            })?;
        let rec = LogRecord {
            step,
            l_sep: g.value(parts.sep).item(),
            l_e: g.value(parts.l_e).item(),
            l_m: g.value(parts.l_m).item(),
            total: g.value(parts.total).item(),
        };
        if !rec.total.is_finite() {
            return Err(nonfinite(serde_json::to_string(&rec).expect("record serialises")));
        }
        g.backward(parts.total)?;
        let store = self.model.store_mut();
        store.zero_grads();
        store.accumulate(&g);
        sgd_step(store, &mut self.optimizer)?;
        self.model.apply_bn_updates(&updates);
        self.step += 1;
        Ok(rec)
    }
}

/// Writes `config.json` and `weights.ckpt` into `dir`.
pub fn save_checkpoint(config: &TrainConfig, model: &VSlowFast, dir: impl AsRef<Path>) -> Result<(), TrainError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, config.to_json()).map_err(io_err(&cfg_path))?;
    let w = dir.join(WEIGHTS_FILE);
    checkpoint::save(model.store(), &w).map_err(|source| TrainError::Checkpoint { path: w, source })
}

/// Loads a checkpoint directory written by [`save_checkpoint`]. A config
/// given explicitly replaces the stored one and must match the weights.
pub fn load_checkpoint(dir: impl AsRef<Path>, config: Option<TrainConfig>) -> Result<(TrainConfig, VSlowFast), TrainError> {
    let dir = dir.as_ref();
    let config = match config {
        Some(c) => c,
        None => TrainConfig::load(dir.join(CONFIG_FILE))?,
    };
    config.model.validate()?;
    let mut model = VSlowFast::new(config.model.clone(), config.seed)?;
    let w = dir.join(WEIGHTS_FILE);
    checkpoint::load_into(model.store_mut(), &w).map_err(|source| TrainError::Checkpoint { path: w, source })?;
    Ok((config, model))
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub model: VSlowFast,
    pub trace: Vec<LogRecord>,
}

/// Runs `config.steps` steps on the dataset's train split. Each record is
/// written to `log` as one JSON line; with `out_dir`, checkpoints are
/// written every `eval_every` steps and at the end.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
    mut log: impl Write,
) -> Result<TrainOutcome, TrainError> {
    if dataset.config != config.data {
        return Err(TrainError::Config("dataset was generated with a different data config".into()));
    }
    let mut trainer = Trainer::new(config.clone())?;
    let mut trace = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let rec = trainer.step(&dataset.train)?;
        let line = serde_json::to_string(&rec).expect("record serialises");
        writeln!(log, "{line}").map_err(io_err(Path::new("<log>")))?;
        trace.push(rec);
        if let Some(dir) = out_dir {
            if config.eval_every > 0 && trainer.step % config.eval_every == 0 && trainer.step < config.steps {
                save_checkpoint(config, &trainer.model, dir.join(format!("step{:06}", trainer.step)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(config, &trainer.model, dir)?;
    }
    Ok(TrainOutcome { model: trainer.model, trace })
}

/// Generates the dataset described by `config` (deterministic in its seed).
pub fn generate_dataset(config: &TrainConfig) -> Result<Dataset, TrainError> {
    Ok(Dataset::generate(&config.data, config.seed, config.split_sizes, config.workers)?)
}

/// Scores `model` on the test split of `dataset`.
pub fn evaluate_model(model: &VSlowFast, config: &TrainConfig, dataset: &Dataset) -> Result<EvalReport, TrainError> {
    evaluate(MaskSource::Model(model), &dataset.test, config.data.framing(), config.n_sources, config.eval_mixtures, config.seed)
}
