use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DataConfig, DataError, Sample};
use crate::autodiff::Tensor;
use crate::dsp::Waveform;

/// Largest absolute sample value of a generated source.
pub const PEAK_LIMIT: f64 = 0.45;

/// Frequency-bin range `[lo, hi)` reserved for `category`.
pub fn band_of(category: usize, cfg: &DataConfig) -> (usize, usize) {
    let width = cfg.framing().freq_bins() / cfg.categories;
    (category * width, (category + 1) * width)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Note-onset sample positions and the tonal signal of one source.
fn tonal(category: usize, cfg: &DataConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let len = cfg.clip_len();
    let sr = cfg.sample_rate as f64;
    let df = sr / cfg.window_len as f64;
    let (lo, hi) = band_of(category, cfg);
    let width = (hi - lo) as f64;
    // Keep partials two bins inside the band so the Hann main lobe stays in it.
    let span = (width - 4.0).max(0.5);
    let mut out = vec![0.0; len];
    let mut onsets = Vec::new();
    let mut t = if rng.gen_bool(0.5) { 0 } else { (rng.gen_range(0.02..0.15) * sr) as usize };
    while t < len {
        let dur = (rng.gen_range(0.12..0.35) * sr) as usize;
        let base = lo as f64 + 2.0 + rng.gen::<f64>() * span * 0.5;
        let step = span * 0.25;
        let phase: f64 = rng.gen::<f64>() * 2.0 * PI;
        let attack = (0.005 * sr) as usize;
        let release = (0.01 * sr) as usize;
        let tau = dur as f64 * 0.5;
        onsets.push(t);
        for i in 0..dur.min(len - t) {
            let env = (i as f64 / attack as f64).min(1.0)
                * ((dur - i) as f64 / release as f64).min(1.0)
                * (-(i as f64) / tau).exp();
            let time = (t + i) as f64 / sr;
            let mut v = 0.0;
            for (j, amp) in [1.0, 0.6, 0.35].iter().enumerate() {
                let f = (base + j as f64 * step) * df;
                v += amp * (2.0 * PI * f * time + phase * (j + 1) as f64).sin();
            }
            out[t + i] += env * v;
        }
        t += dur + (rng.gen_range(0.03..0.15) * sr) as usize;
    }
    (out, onsets)
}

fn clicks(onsets: &[usize], len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    for &t in onsets {
        for i in 0..64.min(len - t) {
            out[t + i] += noise.sample(rng) * (-(i as f64) / 16.0).exp();
        }
    }
    out
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn image(category: usize, cfg: &DataConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let s = cfg.image_size;
    let color = hsv(category as f64 / cfg.categories as f64, 0.85, 0.9);
    let patch = (s / 2).max(1);
    let (py, px) = (rng.gen_range(0..=s - patch), rng.gen_range(0..=s - patch));
    let vertical = rng.gen_bool(0.5);
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let mut t = Tensor::zeros(&[3, s, s]);
    let data = t.data_mut();
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let inside = (py..py + patch).contains(&y) && (px..px + patch).contains(&x);
                let base = if inside {
                    let stripe = if vertical { x / 2 } else { y / 2 };
                    if stripe % 2 == 0 { color[c] } else { 0.5 * color[c] }
                } else {
                    0.1 + 0.25 * color[c]
                };
                data[(c * s + y) * s + x] = (base + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    t
}

/// One synthetic source of `category`: tonal notes confined to the
/// category's frequency band, short broadband clicks at note onsets and a
/// category-coloured image. Deterministic in `(category, seed)`.
pub fn generate_category(category: usize, seed: u64, cfg: &DataConfig) -> Result<Sample, DataError> {
    cfg.validate()?;
    if category >= cfg.categories {
        return Err(DataError::Config(format!("category {category} out of range for {}", cfg.categories)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(7) ^ (category as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let len = cfg.clip_len();
    let (tone, onsets) = tonal(category, cfg, &mut rng);
    let click = clicks(&onsets, len, &mut rng);
    let target = cfg.rms * cfg.rms * len as f64;
    let a = ((1.0 - cfg.click_energy) * target / energy(&tone).max(1e-300)).sqrt();
    let b = if cfg.click_energy > 0.0 { (cfg.click_energy * target / energy(&click).max(1e-300)).sqrt() } else { 0.0 };
    let mut samples: Vec<f64> = tone.iter().zip(&click).map(|(t, k)| a * t + b * k).collect();
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let norm = (target / energy(&samples).max(1e-300)).sqrt().min(PEAK_LIMIT / peak.max(1e-300));
    samples.iter_mut().for_each(|v| *v *= norm);
    let waveform = Waveform::new(samples, cfg.sample_rate)?;
    let image = image(category, cfg, &mut rng);
    Ok(Sample { waveform, image, category, id: format!("c{category}-{seed:016x}") })
}
