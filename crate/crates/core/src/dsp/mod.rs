//! Signal-processing layer: waveforms, STFT/iSTFT, temporal resampling of
//! spectrogram grids, mixing and ideal-binary-mask construction.

mod grid;
mod mask;
mod stft;
pub mod wav;

use thiserror::Error;

pub use grid::{temporal_downsample, temporal_upsample, Grid};
pub use mask::{apply_mask, ideal_binary_mask, ideal_binary_masks, BinaryMask};
pub use stft::{
    hann_window, istft, stft, stft_with, ComplexSpectrogram, Framing, MagnitudeSpectrogram, WSUM_FLOOR,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("signal too short: {len} samples, window needs {window_len}")]
    SignalTooShort { len: usize, window_len: usize },
    #[error("non-invertible framing: zero window sum at sample {position}")]
    NonInvertibleFraming { position: usize },
    #[error("invalid framing: {0}")]
    InvalidFraming(String),
    #[error("resolution mismatch: width {width} is not divisible by alpha {alpha}")]
    ResolutionMismatch { width: usize, alpha: usize },
    #[error("temporal factor must be at least 1, got {0}")]
    InvalidAlpha(usize),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: (usize, usize), found: (usize, usize) },
    #[error("length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),
    #[error("sample rate must be positive")]
    InvalidSampleRate,
    #[error("waveform contains non-finite samples")]
    NonFinite,
    #[error("magnitudes must be finite and non-negative")]
    NegativeMagnitude,
    #[error("mask values must lie in [0, 1]")]
    MaskOutOfRange,
    #[error("no sources given")]
    NoSources,
    #[error("source index {index} out of range for {count} sources")]
    SourceIndex { index: usize, count: usize },
}

/// Sampled mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, DspError> {
        if sample_rate == 0 {
            return Err(DspError::InvalidSampleRate);
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(DspError::NonFinite);
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    pub fn scaled(&self, c: f64) -> Waveform {
        Waveform { samples: self.samples.iter().map(|x| x * c).collect(), sample_rate: self.sample_rate }
    }
}

/// Samplewise sum of equally long sources, without renormalisation.
pub fn mix(sources: &[Waveform]) -> Result<Waveform, DspError> {
    let first = sources.first().ok_or(DspError::NoSources)?;
    let mut out = first.samples.clone();
    for s in &sources[1..] {
        if s.sample_rate != first.sample_rate {
            return Err(DspError::SampleRateMismatch(first.sample_rate, s.sample_rate));
        }
        if s.len() != out.len() {
            return Err(DspError::LengthMismatch(out.len(), s.len()));
        }
        for (o, x) in out.iter_mut().zip(&s.samples) {
            *o += x;
        }
    }
    Waveform::new(out, first.sample_rate)
}
