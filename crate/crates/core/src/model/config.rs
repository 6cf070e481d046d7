use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Which stream runs first. The stream described by the `slow_*` fields is
/// always the one that runs first and produces the base logits; the `fast_*`
/// fields describe the residual stream that refines them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ordering {
    SlowFirst,
    FastFirst,
}

impl std::str::FromStr for Ordering {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "slow-first" => Ok(Ordering::SlowFirst),
            "fast-first" => Ok(Ordering::FastFirst),
            other => Err(ModelError::Config(format!("unknown ordering {other:?} (expected slow-first or fast-first)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of sound categories; also the channel width of the visual
    /// embedding and of the U-Net bottleneck.
    pub category_count: usize,
    /// Output channels of the four stride-2 vision stages; the last entry
    /// must equal `category_count`.
    pub vision_channels: Vec<usize>,
    /// Dilate the last two vision stages (dilation 2, padding 2).
    #[serde(default)]
    pub vision_dilation: bool,
    pub slow_layers: usize,
    /// Zero disables the residual stream (single-stream model).
    pub fast_layers: usize,
    pub slow_alpha: usize,
    pub fast_alpha: usize,
    pub ordering: Ordering,
    /// Leading encoder widths; deeper layers are padded with
    /// `category_count` and the bottleneck always has `category_count`.
    pub unet_channels: Vec<usize>,
    pub image_size: usize,
    /// Zero-initialise the final decoder layer of each stream so that an
    /// untrained model emits logits of exactly zero.
    #[serde(default = "default_true")]
    pub zero_init_final: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            category_count: 4,
            vision_channels: vec![16, 32, 64, 4],
            vision_dilation: false,
            slow_layers: 7,
            fast_layers: 7,
            slow_alpha: 2,
            fast_alpha: 1,
            ordering: Ordering::SlowFirst,
            unet_channels: vec![16, 32, 64],
            image_size: 32,
            zero_init_final: true,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by the toy experiments.
    pub fn toy() -> Self {
        Self { unet_channels: vec![8, 16, 32], ..Self::default() }
    }

    /// Single-stream model at temporal stride `alpha`.
    pub fn single_stream(mut self, alpha: usize) -> Self {
        self.fast_layers = 0;
        self.slow_alpha = alpha;
        self.fast_alpha = 1;
        self
    }

    pub fn has_fast(&self) -> bool {
        self.fast_layers > 0
    }

    /// Encoder output widths of a U-Net with `layers` layers.
    pub fn encoder_channels(&self, layers: usize) -> Vec<usize> {
        (0..layers)
            .map(|i| {
                if i + 1 == layers {
                    self.category_count
                } else {
                    self.unet_channels.get(i).copied().unwrap_or(self.category_count)
                }
            })
            .collect()
    }

    /// Largest temporal stride used by any stream.
    pub fn max_alpha(&self) -> usize {
        if self.has_fast() {
            self.slow_alpha.max(self.fast_alpha)
        } else {
            self.slow_alpha
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.category_count == 0 {
            return err("category_count must be positive".into());
        }
        if self.vision_channels.len() != 4 {
            return err(format!("vision_channels must list 4 stages, got {}", self.vision_channels.len()));
        }
        if self.vision_channels.contains(&0) || self.unet_channels.contains(&0) {
            return err("channel widths must be positive".into());
        }
        if self.vision_channels[3] != self.category_count {
            return err(format!(
                "last vision stage has {} channels but category_count is {}",
                self.vision_channels[3], self.category_count
            ));
        }
        if self.slow_layers < 4 {
            return err(format!("slow_layers must be at least 4, got {}", self.slow_layers));
        }
        if self.fast_layers != 0 && self.fast_layers < 4 {
            return err(format!("fast_layers must be 0 or at least 4, got {}", self.fast_layers));
        }
        if self.slow_alpha == 0 || self.fast_alpha == 0 {
            return err("alpha values must be at least 1".into());
        }
        if self.has_fast() {
            match self.ordering {
                Ordering::SlowFirst if self.fast_alpha >= self.slow_alpha => {
                    return err(format!(
                        "slow-first ordering needs fast_alpha < slow_alpha, got {} and {}",
                        self.fast_alpha, self.slow_alpha
                    ))
                }
                Ordering::FastFirst if self.slow_alpha >= self.fast_alpha => {
                    return err(format!(
                        "fast-first ordering needs slow_alpha < fast_alpha, got {} and {}",
                        self.slow_alpha, self.fast_alpha
                    ))
                }
                _ => {}
            }
        }
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return err(format!("image_size must be a positive multiple of 16, got {}", self.image_size));
        }
        Ok(())
    }

    /// Checks that an `h × w` spectrogram fits this configuration.
    pub fn check_input(&self, h: usize, w: usize) -> Result<(), ModelError> {
        if h == 0 || h % 16 != 0 {
            return Err(ModelError::Input(format!("spectrogram height {h} must be a positive multiple of 16")));
        }
        let m = 16 * self.max_alpha();
        if w == 0 || w % m != 0 {
            return Err(ModelError::ResolutionMismatch { width: w, multiple: m });
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ModelConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_ordering() {
        let mut v: serde_json::Value = serde_json::from_str(&ModelConfig::default().to_json()).unwrap();
        v["mystery"] = serde_json::json!(1);
        assert!(ModelConfig::from_json(&v.to_string()).is_err());

        let cfg = ModelConfig { slow_alpha: 1, fast_alpha: 2, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { ordering: Ordering::FastFirst, ..cfg };
        cfg.validate().unwrap();
    }

    #[test]
    fn channel_schedule_padding() {
        let cfg = ModelConfig::toy();
        assert_eq!(cfg.encoder_channels(5), vec![8, 16, 32, 4, 4]);
        assert_eq!(cfg.encoder_channels(7), vec![8, 16, 32, 4, 4, 4, 4]);
        assert_eq!(cfg.encoder_channels(4), vec![8, 16, 32, 4]);
    }

    #[test]
    fn input_divisibility() {
        let cfg = ModelConfig::default();
        cfg.check_input(32, 64).unwrap();
        assert!(matches!(cfg.check_input(32, 48), Err(ModelError::ResolutionMismatch { width: 48, multiple: 32 })));
        assert!(cfg.check_input(24, 64).is_err());
    }
}
