use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::Tensor;
use crate::data::{MixtureItem, Pool};
use crate::dsp::{apply_mask, istft, stft_with, Framing, Grid, Waveform};
use crate::metrics::{aggregate, bss_eval, EvalScores, ScoreSummary};
use crate::model::VSlowFast;

/// Where the masks applied to each test mixture come from.
#[derive(Debug, Clone, Copy)]
pub enum MaskSource<'a> {
    Model(&'a VSlowFast),
    /// Ground-truth ideal binary masks.
    Oracle,
    /// The same constant everywhere, e.g. 0.5.
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScores {
    pub index: u64,
    pub source: usize,
    pub category: usize,
    pub separated: EvalScores,
    pub copy_paste: EvalScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mixtures: usize,
    pub n_sources: usize,
    pub separated: ScoreSummary,
    pub copy_paste: ScoreSummary,
    /// Mean SDR of the separated estimates minus that of copy-paste, both
    /// over uncapped entries.
    pub sdr_gain: Option<f64>,
    pub items: Vec<ItemScores>,
}

impl EvalReport {
    /// Mean SDR over every estimate, capped values included.
    pub fn mean_sdr(&self) -> f64 {
        self.items.iter().map(|i| i.separated.sdr).sum::<f64>() / self.items.len() as f64
    }

    pub fn mean_copy_paste_sdr(&self) -> f64 {
        self.items.iter().map(|i| i.copy_paste.sdr).sum::<f64>() / self.items.len() as f64
    }
}

/// Masks for every source of `item`.
pub fn masks_for(source: MaskSource, item: &MixtureItem) -> Result<Vec<Grid>, TrainError> {
    let (h, w) = item.spectrogram.shape();
    Ok(match source {
        MaskSource::Model(model) => {
            let images: Vec<Tensor> = item.sources.iter().map(|s| s.image.clone()).collect();
            model.predict(&item.spectrogram, &images)?.into_iter().map(|p| p.mask).collect()
        }
        MaskSource::Oracle => item.gt_masks.iter().map(|m| m.bits().clone()).collect(),
        MaskSource::Constant(c) => vec![Grid::filled(h, w, c); item.sources.len()],
    })
}

/// Masked mixture magnitude with mixture phase, inverted to a waveform.
pub fn reconstruct(mask: &Grid, item: &MixtureItem) -> Result<Waveform, TrainError> {
    Ok(istft(&apply_mask(mask, &item.spectrogram)?)?)
}

/// Scores one mixture: each source estimate and the unprocessed mixture
/// against the reference sources. The copy-paste estimate is the mixture
/// passed through the same analysis and synthesis as the masked estimates
/// (an all-ones mask), so any mask that is a constant scaling of it scores
/// identically.
pub fn score_item(source: MaskSource, item: &MixtureItem, index: u64) -> Result<Vec<ItemScores>, TrainError> {
    let refs: Vec<Waveform> = item.sources.iter().map(|s| s.waveform.clone()).collect();
    let masks = masks_for(source, item)?;
    let (h, w) = item.spectrogram.shape();
    let copy = reconstruct(&Grid::filled(h, w, 1.0), item)?;
    masks
        .iter()
        .enumerate()
        .map(|(n, mask)| {
            let est = reconstruct(mask, item)?;
            Ok(ItemScores {
                index,
                source: n,
                category: item.sources[n].category,
                separated: bss_eval(&est, &refs, n)?,
                copy_paste: bss_eval(&copy, &refs, n)?,
            })
        })
        .collect()
}

/// Scores `count` deterministic test mixtures of `pool`.
pub fn evaluate(
    source: MaskSource,
    pool: &Pool,
    framing: Framing,
    n_sources: usize,
    count: usize,
    seed: u64,
) -> Result<EvalReport, TrainError> {
    if count == 0 {
        return Err(TrainError::Config("evaluation needs at least one mixture".into()));
    }
    let mut items = Vec::new();
    for i in 0..count as u64 {
        let item = pool.mixture(framing, n_sources, seed, i)?;
        items.extend(score_item(source, &item, i)?);
    }
    let sep: Vec<EvalScores> = items.iter().map(|i| i.separated).collect();
    let cp: Vec<EvalScores> = items.iter().map(|i| i.copy_paste).collect();
    let separated = aggregate(&sep)?;
    let copy_paste = aggregate(&cp)?;
    let sdr_gain = separated.sdr.zip(copy_paste.sdr).map(|(a, b)| a - b);
    Ok(EvalReport { mixtures: count, n_sources, separated, copy_paste, sdr_gain, items })
}

/// One separated source from [`separate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Separated {
    pub waveform: Waveform,
    pub mask: Grid,
    pub localization: Grid,
}

/// Separates one mixture into one source per image. The mixture is
/// zero-padded to a frame count the model accepts and the outputs are
/// cropped back to its length.
pub fn separate(model: &VSlowFast, mixture: &Waveform, images: &[Tensor], framing: Framing) -> Result<Vec<Separated>, TrainError> {
    if mixture.sample_rate() != framing.sample_rate {
        return Err(TrainError::Config(format!(
            "mixture is {} Hz, model expects {} Hz",
            mixture.sample_rate(),
            framing.sample_rate
        )));
    }
    let multiple = 16 * model.config().max_alpha();
    let needed = 1 + mixture.len().saturating_sub(framing.window_len).div_ceil(framing.hop_len);
    let frames = needed.div_ceil(multiple) * multiple;
    let mut samples = mixture.samples().to_vec();
    samples.resize(framing.len_for_frames(frames), 0.0);
    let padded = Waveform::new(samples, mixture.sample_rate())?;
    let spec = stft_with(&padded, framing)?;
    model
        .predict(&spec, images)?
        .into_iter()
        .map(|p| {
            let est = istft(&apply_mask(&p.mask, &spec)?)?;
            let waveform = Waveform::new(est.samples()[..mixture.len()].to_vec(), mixture.sample_rate())?;
            Ok(Separated { waveform, mask: p.mask, localization: p.localization })
        })
        .collect()
}
