//! Synthetic audio-visual data, file formats and mixture sampling.

mod image;
mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::dsp::wav::{load_wav, save_wav, WavError};
use crate::dsp::{ideal_binary_masks, mix, stft_with, BinaryMask, ComplexSpectrogram, DspError, Framing, Waveform};
use crate::losses::ContrastivePair;

pub use image::{decode_pnm, load_image, load_ppm, save_pgm, save_ppm, to_tensor, ImageError, Rgb8};
pub use synth::{band_of, generate_category, PEAK_LIMIT};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("mixtures need 2 to 4 sources, got {0}")]
    SourceCount(usize),
    #[error("invalid data config: {0}")]
    Config(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("not enough samples: {0}")]
    NotEnough(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Framing and synthesis parameters of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop_len: usize,
    /// STFT frames per clip; the clip length follows from the framing.
    pub frames: usize,
    pub image_size: usize,
    pub categories: usize,
    /// RMS level every source is normalised to, unless that would push its
    /// peak past [`PEAK_LIMIT`].
    pub rms: f64,
    /// Fraction of a source's energy carried by its broadband onset clicks.
    pub click_energy: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            window_len: 62,
            hop_len: 31,
            frames: 256,
            image_size: 32,
            categories: 4,
            rms: 0.05,
            click_energy: 0.05,
        }
    }
}

impl DataConfig {
    pub fn framing(&self) -> Framing {
        Framing { window_len: self.window_len, hop_len: self.hop_len, sample_rate: self.sample_rate }
    }

    pub fn clip_len(&self) -> usize {
        self.framing().len_for_frames(self.frames)
    }

    /// `(H_S, W_S)` of every clip's spectrogram.
    pub fn spec_shape(&self) -> (usize, usize) {
        (self.framing().freq_bins(), self.frames)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        self.framing().validate()?;
        if self.categories < 2 {
            return Err(DataError::Config("need at least 2 categories".into()));
        }
        if self.frames == 0 || self.image_size == 0 {
            return Err(DataError::Config("frames and image_size must be positive".into()));
        }
        if self.framing().freq_bins() < 4 * self.categories {
            return Err(DataError::Config(format!(
                "{} frequency bins cannot hold {} disjoint bands",
                self.framing().freq_bins(),
                self.categories
            )));
        }
        if !(self.rms > 0.0 && self.rms < 0.5) || !(0.0..0.5).contains(&self.click_energy) {
            return Err(DataError::Config("rms must be in (0, 0.5) and click_energy in [0, 0.5)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub waveform: Waveform,
    /// `3 × S × S`, values in [0, 1].
    pub image: Tensor,
    pub category: usize,
    pub id: String,
}

#[derive(Debug, Clone)]
pub struct MixtureItem {
    pub mixture: Waveform,
    pub spectrogram: ComplexSpectrogram,
    pub sources: Vec<Sample>,
    pub gt_masks: Vec<BinaryMask>,
    /// `anchor_index` indexes `sources`, `partner_index` indexes `partners`.
    pub contrast_pairs: Vec<ContrastivePair>,
    pub partners: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

/// Mixes `samples`, computes per-source ideal binary masks and pairs each
/// source with the given partner sample.
pub fn build_mixture(samples: Vec<Sample>, framing: Framing, partners: Vec<Sample>) -> Result<MixtureItem, DataError> {
    let n = samples.len();
    if !(2..=4).contains(&n) {
        return Err(DataError::SourceCount(n));
    }
    if partners.len() != n {
        return Err(DataError::NotEnough(format!("{} partners for {n} sources", partners.len())));
    }
    let waves: Vec<Waveform> = samples.iter().map(|s| s.waveform.clone()).collect();
    let mixture = mix(&waves)?;
    let spectrogram = stft_with(&mixture, framing)?;
    let mags = waves
        .iter()
        .map(|w| stft_with(w, framing).map(|s| s.magnitude()))
        .collect::<Result<Vec<_>, _>>()?;
    let gt_masks = ideal_binary_masks(&mags)?;
    let contrast_pairs = samples
        .iter()
        .zip(&partners)
        .enumerate()
        .map(|(i, (s, p))| ContrastivePair { anchor_index: i, partner_index: i, label: (s.category == p.category) as u8 })
        .collect();
    Ok(MixtureItem { mixture, spectrogram, sources: samples, gt_masks, contrast_pairs, partners })
}

/// Samples of one split, grouped for mixture and partner sampling.
#[derive(Debug, Clone, Default)]
pub struct Pool {
    pub samples: Vec<Sample>,
    by_category: Vec<Vec<usize>>,
}

impl Pool {
    pub fn new(samples: Vec<Sample>, categories: usize) -> Result<Self, DataError> {
        let mut by_category = vec![Vec::new(); categories];
        for (i, s) in samples.iter().enumerate() {
            by_category
                .get_mut(s.category)
                .ok_or_else(|| DataError::Manifest(format!("sample {} has category {} of {categories}", s.id, s.category)))?
                .push(i);
        }
        Ok(Self { samples, by_category })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn pick(&self, rng: &mut ChaCha8Rng, category: usize, exclude: Option<usize>) -> Option<usize> {
        let cands: Vec<usize> = self.by_category[category].iter().copied().filter(|&i| Some(i) != exclude).collect();
        cands.choose(rng).copied()
    }

    /// Deterministic mixture `index` of this pool: `n` sources of distinct
    /// categories, each paired with a partner that is, by a fair coin,
    /// another sample of the same category or a sample of another category.
    pub fn mixture(&self, framing: Framing, n: usize, seed: u64, index: u64) -> Result<MixtureItem, DataError> {
        if !(2..=4).contains(&n) {
            return Err(DataError::SourceCount(n));
        }
        let cats: Vec<usize> = (0..self.by_category.len()).filter(|&c| !self.by_category[c].is_empty()).collect();
        if cats.len() < n {
            return Err(DataError::NotEnough(format!("{} populated categories for {n} sources", cats.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let chosen: Vec<usize> = cats.choose_multiple(&mut rng, n).copied().collect();
        let mut sources = Vec::with_capacity(n);
        let mut partners = Vec::with_capacity(n);
        for &c in &chosen {
            let si = self.pick(&mut rng, c, None).expect("populated category");
            let positive = rng.gen_bool(0.5);
            let pi = if positive {
                self.pick(&mut rng, c, Some(si))
            } else {
                let others: Vec<usize> = cats.iter().copied().filter(|&o| o != c).collect();
                let oc = *others.choose(&mut rng).expect("at least two categories");
                self.pick(&mut rng, oc, None)
            };
            // A category with a single sample cannot supply a positive partner.
            let pi = pi.unwrap_or(si);
            sources.push(self.samples[si].clone());
            partners.push(self.samples[pi].clone());
        }
        build_mixture(sources, framing, partners)
    }
}

/// Runs `f(0..count)` on `workers` threads and returns results in index
/// order. The output does not depend on the worker count.
pub fn parallel_ordered<T, E, F>(count: usize, workers: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync,
{
    let workers = workers.max(1).min(count.max(1));
    if workers == 1 {
        return (0..count).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T, E>>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, AtomicOrdering::Relaxed);
                if i >= count {
                    break;
                }
                let r = f(i);
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("no poisoned workers").into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// Seed of sample `index` within `split`; the split tag occupies the top
/// bits so splits never share a seed (or an id).
pub fn sample_seed(seed: u64, split: Split, index: u64) -> u64 {
    (split.tag() << 60) ^ (seed.wrapping_mul(0x2545_F491_4F6C_DD1D) & ((1 << 60) - 1)) ^ index
}

/// Generates `per_category` samples of every category for one split.
pub fn generate_split(
    cfg: &DataConfig,
    seed: u64,
    split: Split,
    per_category: usize,
    workers: usize,
) -> Result<Vec<Sample>, DataError> {
    cfg.validate()?;
    let total = per_category * cfg.categories;
    parallel_ordered(total, workers, |i| {
        let category = i % cfg.categories;
        generate_category(category, sample_seed(seed, split, (i / cfg.categories) as u64), cfg)
    })
}

/// In-memory dataset with one pool per split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DataConfig,
    pub train: Pool,
    pub val: Pool,
    pub test: Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { train: 24, val: 4, test: 8 }
    }
}

impl Dataset {
    /// Per-category sample counts in `sizes`.
    pub fn generate(cfg: &DataConfig, seed: u64, sizes: SplitSizes, workers: usize) -> Result<Self, DataError> {
        let k = cfg.categories;
        Ok(Self {
            config: cfg.clone(),
            train: Pool::new(generate_split(cfg, seed, Split::Train, sizes.train, workers)?, k)?,
            val: Pool::new(generate_split(cfg, seed, Split::Val, sizes.val, workers)?, k)?,
            test: Pool::new(generate_split(cfg, seed, Split::Test, sizes.test, workers)?, k)?,
        })
    }

    pub fn pool(&self, split: Split) -> &Pool {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Writes WAV and PPM files plus `manifest.json` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Manifest, DataError> {
        let dir = dir.as_ref();
        let io = |path: &Path, e: std::io::Error| DataError::Io { path: path.to_path_buf(), source: e };
        for sub in ["audio", "images"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| io(&dir.join(sub), e))?;
        }
        let mut items = Vec::new();
        for split in Split::ALL {
            for s in &self.pool(split).samples {
                let wav = format!("audio/{}.wav", s.id);
                let img = format!("images/{}.ppm", s.id);
                save_wav(&s.waveform, dir.join(&wav))?;
                save_ppm(&s.image, dir.join(&img))?;
                items.push(ManifestItem { id: s.id.clone(), category: s.category, wav, image: img, split });
            }
        }
        let manifest = Manifest { data: self.config.clone(), items };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serialises")).map_err(|e| io(&path, e))?;
        Ok(manifest)
    }

    /// Loads a dataset written by [`Dataset::save`]; file paths are relative
    /// to the manifest's directory.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = manifest_path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
        manifest.data.validate()?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut seen = HashSet::new();
        let mut splits: [Vec<Sample>; 3] = Default::default();
        for item in &manifest.items {
            if !seen.insert(item.id.clone()) {
                return Err(DataError::Manifest(format!("duplicate id {}", item.id)));
            }
            if item.category >= manifest.data.categories {
                return Err(DataError::Manifest(format!("item {} has invalid category {}", item.id, item.category)));
            }
            let waveform = load_wav(base.join(&item.wav))?;
            if waveform.len() != manifest.data.clip_len() || waveform.sample_rate() != manifest.data.sample_rate {
                return Err(DataError::Manifest(format!(
                    "{}: expected {} samples at {} Hz",
                    item.wav,
                    manifest.data.clip_len(),
                    manifest.data.sample_rate
                )));
            }
            let image = load_image(base.join(&item.image), manifest.data.image_size)?;
            let idx = Split::ALL.iter().position(|&s| s == item.split).expect("known split");
            splits[idx].push(Sample { waveform, image, category: item.category, id: item.id.clone() });
        }
        let k = manifest.data.categories;
        let [train, val, test] = splits;
        Ok(Self {
            train: Pool::new(train, k)?,
            val: Pool::new(val, k)?,
            test: Pool::new(test, k)?,
            config: manifest.data,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub id: String,
    pub category: usize,
    pub wav: String,
    pub image: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub data: DataConfig,
    pub items: Vec<ManifestItem>,
}

#[cfg(test)]
mod tests;
