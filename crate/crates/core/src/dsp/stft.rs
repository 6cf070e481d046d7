use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{DspError, Grid, Waveform};

/// Framing parameters shared by analysis and synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Framing {
    pub window_len: usize,
    pub hop_len: usize,
    pub sample_rate: u32,
}

impl Framing {
    pub fn new(window_len: usize, hop_len: usize, sample_rate: u32) -> Result<Self, DspError> {
        let f = Self { window_len, hop_len, sample_rate };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), DspError> {
        if self.window_len < 2 || self.window_len % 2 != 0 {
            return Err(DspError::InvalidFraming(format!(
                "window length {} must be even and at least 2",
                self.window_len
            )));
        }
        if self.hop_len == 0 || self.hop_len > self.window_len / 2 {
            return Err(DspError::InvalidFraming(format!(
                "hop length {} must be in 1..={}",
                self.hop_len,
                self.window_len / 2
            )));
        }
        if self.sample_rate == 0 {
            return Err(DspError::InvalidSampleRate);
        }
        Ok(())
    }

    pub fn freq_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Number of complete frames that fit in `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            (len - self.window_len) / self.hop_len + 1
        }
    }

    /// Signal length whose analysis yields exactly `frames` frames with no
    /// dropped tail.
    pub fn len_for_frames(&self, frames: usize) -> usize {
        (frames.max(1) - 1) * self.hop_len + self.window_len
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Complex STFT grid, frequency rows by time columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    freq_bins: usize,
    frames: usize,
    bins: Vec<Complex64>,
    framing: Framing,
}

impl ComplexSpectrogram {
    pub fn from_bins(
        freq_bins: usize,
        frames: usize,
        bins: Vec<Complex64>,
        framing: Framing,
    ) -> Result<Self, DspError> {
        framing.validate()?;
        if freq_bins != framing.freq_bins() || frames == 0 || bins.len() != freq_bins * frames {
            return Err(DspError::ShapeMismatch {
                expected: (framing.freq_bins(), frames),
                found: (freq_bins, bins.len() / freq_bins.max(1)),
            });
        }
        Ok(Self { freq_bins, frames, bins, framing })
    }

    pub fn zeros(framing: Framing, frames: usize) -> Self {
        let h = framing.freq_bins();
        Self { freq_bins: h, frames, bins: vec![Complex64::new(0.0, 0.0); h * frames], framing }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.freq_bins, self.frames)
    }

    pub fn framing(&self) -> Framing {
        self.framing
    }

    #[inline]
    pub fn get(&self, f: usize, t: usize) -> Complex64 {
        self.bins[f * self.frames + t]
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    pub fn magnitude(&self) -> MagnitudeSpectrogram {
        let data = self.bins.iter().map(|c| c.norm()).collect();
        MagnitudeSpectrogram {
            grid: Grid::from_vec(self.freq_bins, self.frames, data).expect("shape checked"),
            framing: self.framing,
        }
    }

    /// Elementwise complex sum; used to check mixture linearity.
    pub fn add(&self, other: &ComplexSpectrogram) -> Result<ComplexSpectrogram, DspError> {
        if self.shape() != other.shape() {
            return Err(DspError::ShapeMismatch { expected: self.shape(), found: other.shape() });
        }
        let bins = self.bins.iter().zip(&other.bins).map(|(a, b)| a + b).collect();
        Ok(Self { bins, ..self.clone() })
    }
}

/// Non-negative magnitude grid with the framing it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeSpectrogram {
    grid: Grid,
    framing: Framing,
}

impl MagnitudeSpectrogram {
    pub fn new(grid: Grid, framing: Framing) -> Result<Self, DspError> {
        if grid.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(DspError::NegativeMagnitude);
        }
        Ok(Self { grid, framing })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn into_grid(self) -> Grid {
        self.grid
    }

    pub fn framing(&self) -> Framing {
        self.framing
    }

    pub fn shape(&self) -> (usize, usize) {
        self.grid.shape()
    }
}

/// Hann-windowed analysis. Frame `t` covers samples
/// `[t * hop, t * hop + window)`; a trailing partial frame is dropped.
pub fn stft(w: &Waveform, window_len: usize, hop_len: usize) -> Result<ComplexSpectrogram, DspError> {
    let framing = Framing::new(window_len, hop_len, w.sample_rate())?;
    stft_with(w, framing)
}

pub fn stft_with(w: &Waveform, framing: Framing) -> Result<ComplexSpectrogram, DspError> {
    framing.validate()?;
    if framing.sample_rate != w.sample_rate() {
        return Err(DspError::SampleRateMismatch(framing.sample_rate, w.sample_rate()));
    }
    let n = framing.window_len;
    let samples = w.samples();
    if samples.len() < n {
        return Err(DspError::SignalTooShort { len: samples.len(), window_len: n });
    }
    let frames = framing.frames_for(samples.len());
    let h = framing.freq_bins();
    let window = hann_window(n);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut bins = vec![Complex64::new(0.0, 0.0); h * frames];
    for t in 0..frames {
        let start = t * framing.hop_len;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex64::new(samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..h {
            bins[f * frames + t] = buf[f];
        }
    }
    Ok(ComplexSpectrogram { freq_bins: h, frames, bins, framing })
}

/// Fraction of the peak squared-window sum below which the normalisation is
/// floored, so that edge samples covered by a single window tail do not
/// amplify whatever a mask did to that frame.
pub const WSUM_FLOOR: f64 = 0.1;

/// Weighted overlap-add synthesis: each inverse frame is windowed again and
/// the sum is divided by the accumulated squared window, floored at
/// [`WSUM_FLOOR`] times its peak.
pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform, DspError> {
    let framing = s.framing;
    // Synthesis only needs a well-formed window; hop coverage is checked
    // below through the window sum.
    if framing.window_len < 2 || framing.window_len % 2 != 0 || framing.hop_len == 0 {
        return Err(DspError::InvalidFraming(format!("{framing:?}")));
    }
    let n = framing.window_len;
    let hop = framing.hop_len;
    let (h, frames) = s.shape();
    let out_len = (frames - 1) * hop + n;
    let window = hann_window(n);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut out = vec![0.0; out_len];
    let mut wsum = vec![0.0; out_len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let scale = 1.0 / n as f64;
    for t in 0..frames {
        for f in 0..h {
            buf[f] = s.get(f, t);
        }
        // Real signals have Hermitian spectra; DC and Nyquist are real.
        buf[0].im = 0.0;
        buf[n / 2].im = 0.0;
        for f in 1..n / 2 {
            buf[n - f] = buf[f].conj();
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for i in 0..n {
            out[start + i] += buf[i].re * scale * window[i];
            wsum[start + i] += window[i] * window[i];
        }
    }
    let floor = WSUM_FLOOR * wsum.iter().cloned().fold(0.0, f64::max);
    for (i, (o, ws)) in out.iter_mut().zip(&wsum).enumerate() {
        if *ws > 1e-12 {
            *o /= ws.max(floor);
        } else if i == 0 {
            // The periodic Hann window vanishes at its first sample, so the
            // very first output sample carries no energy in any framing.
            *o = 0.0;
        } else {
            return Err(DspError::NonInvertibleFraming { position: i });
        }
    }
    Waveform::new(out, framing.sample_rate)
}
