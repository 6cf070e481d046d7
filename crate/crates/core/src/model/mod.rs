//! The separation network: vision encoder, attention fusion, and the two
//! spectrogram streams.

mod config;
mod layers;
mod network;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor};
use crate::dsp::{ComplexSpectrogram, Grid};

pub use config::{ModelConfig, Ordering};
pub use layers::{BnUpdate, Mode, Session, LEAKY_SLOPE};
pub use network::{avga, localization_map, ModelOutput, SpecInput, StreamOutput, VSlowFast, VisionFeatures};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("resolution mismatch: spectrogram width {width} is not a multiple of {multiple}")]
    ResolutionMismatch { width: usize, multiple: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Inference result for one (mixture, image) item.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Final soft mask (residual stream when present), `H×W`.
    pub mask: Grid,
    pub slow_mask: Grid,
    pub fast_mask: Option<Grid>,
    /// Localisation map of the image against its own embedding.
    pub localization: Grid,
    pub embedding: Vec<f64>,
}

fn item_grid(t: &Tensor, i: usize, rows: usize, cols: usize) -> Grid {
    let n = rows * cols;
    Grid::from_vec(rows, cols, t.data()[i * n..(i + 1) * n].to_vec()).expect("grid extent")
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack(items: &[Tensor]) -> Result<Tensor, ModelError> {
    let first = items.first().ok_or_else(|| ModelError::Input("nothing to stack".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(ModelError::Input(format!("cannot stack {:?} with {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(&shape, data)?)
}

/// Repeats a magnitude grid as a `count×1×H×W` batch.
pub fn magnitude_batch(mag: &Grid, count: usize) -> Tensor {
    let (h, w) = mag.shape();
    let mut data = Vec::with_capacity(count * h * w);
    for _ in 0..count {
        data.extend_from_slice(mag.data());
    }
    Tensor::new(&[count, 1, h, w], data).expect("batch extent")
}

impl VSlowFast {
    /// Eval-mode masks for one mixture and one image per requested source.
    pub fn predict(&self, mixture: &ComplexSpectrogram, images: &[Tensor]) -> Result<Vec<Prediction>, ModelError> {
        let mag = mixture.magnitude();
        let (h, w) = mag.shape();
        let images = stack(images)?;
        let b = images.shape()[0];
        let mut g = Graph::new();
        let mut s = self.session(&mut g, Mode::Eval);
        let out = self.forward(&mut s, &magnitude_batch(mag.grid(), b), &images)?;
        let (loc, _) = localization_map(s.graph, out.vision.embedding, out.vision.fmap)?;
        drop(s);
        let fmap_shape = g.shape(out.vision.fmap).to_vec();
        let (lh, lw) = (fmap_shape[2], fmap_shape[3]);
        let c = self.config().category_count;
        Ok((0..b)
            .map(|i| {
                let slow_mask = item_grid(g.value(out.slow.mask), i, h, w);
                let fast_mask = out.fast.map(|f| item_grid(g.value(f.mask), i, h, w));
                Prediction {
                    mask: fast_mask.clone().unwrap_or_else(|| slow_mask.clone()),
                    slow_mask,
                    fast_mask,
                    localization: item_grid(g.value(loc), i, lh, lw),
                    embedding: g.value(out.vision.embedding).data()[i * c..(i + 1) * c].to_vec(),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests;
