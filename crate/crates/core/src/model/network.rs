use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{fork_rng, BatchNorm, Block, BnUpdate, Conv, Init, Session};
use super::{ModelConfig, ModelError};
use crate::autodiff::{AutodiffError, ConvSpec, Graph, ParamId, ParamStore, Tensor, Var};

/// Visual feature map `B×C×h×w` and its spatial mean `B×C`.
#[derive(Debug, Clone, Copy)]
pub struct VisionFeatures {
    pub fmap: Var,
    pub embedding: Var,
}

/// Logits, mask and masked magnitudes of one stream, all `B×1×H×W`.
#[derive(Debug, Clone, Copy)]
pub struct StreamOutput {
    pub logits: Var,
    pub mask: Var,
    pub separated: Var,
}

/// Mixture magnitudes `|X|` and the log-compressed network input
/// `log(1 + |X|)`, both `B×1×H×W`.
#[derive(Debug, Clone, Copy)]
pub struct SpecInput {
    pub magnitude: Var,
    pub log_magnitude: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub vision: VisionFeatures,
    pub slow: StreamOutput,
    pub fast: Option<StreamOutput>,
}

impl ModelOutput {
    /// The stream whose mask is the model's final answer.
    pub fn final_stream(&self) -> &StreamOutput {
        self.fast.as_ref().unwrap_or(&self.slow)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct VisionNet {
    pub blocks: Vec<Block>,
}

impl VisionNet {
    fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self, AutodiffError> {
        let mut blocks = Vec::new();
        let mut cin = 3;
        for (i, &cout) in cfg.vision_channels.iter().enumerate() {
            let last = i == 3;
            let spec = if cfg.vision_dilation && i >= 2 { ConvSpec::new(2, 2, 2) } else { ConvSpec::new(2, 1, 1) };
            let name = format!("vision.conv{i}");
            let init = if last { Init::Linear } else { Init::Kaiming };
            let conv = Conv::new(store, rng, &name, cin, cout, 3, spec, false, init)?;
            let bn = if last { None } else { Some(BatchNorm::new(store, &format!("vision.bn{i}"), cout)?) };
            blocks.push(Block { conv, bn, act: !last });
            cin = cout;
        }
        Ok(Self { blocks })
    }
}

/// Encoder-decoder with skip connections and AVGA at the bottleneck.
#[derive(Debug, Clone)]
pub(crate) struct UNet {
    pub encoder: Vec<Block>,
    /// `decoder[i]` mirrors `encoder[i]`; it runs from the deepest layer out.
    pub decoder: Vec<Block>,
}

fn unet_geometry(i: usize) -> (usize, ConvSpec) {
    if i < 4 {
        (4, ConvSpec::new(2, 1, 1))
    } else {
        (3, ConvSpec::new(1, 1, 1))
    }
}

impl UNet {
    fn new(
        cfg: &ModelConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_channels: usize,
        layers: usize,
    ) -> Result<Self, AutodiffError> {
        let ch = cfg.encoder_channels(layers);
        let mut encoder = Vec::new();
        let mut cin = in_channels;
        for (i, &cout) in ch.iter().enumerate() {
            let (k, spec) = unet_geometry(i);
            let conv = Conv::new(store, rng, &format!("{prefix}.enc{i}"), cin, cout, k, spec, false, Init::Kaiming)?;
            let bn = BatchNorm::new(store, &format!("{prefix}.enc{i}.bn"), cout)?;
            encoder.push(Block { conv, bn: Some(bn), act: true });
            cin = cout;
        }
        let mut decoder = Vec::with_capacity(layers);
        for i in 0..layers {
            let (k, spec) = unet_geometry(i);
            let cin = if i + 1 == layers { ch[i] } else { 2 * ch[i] };
            let outermost = i == 0;
            let cout = if outermost { 1 } else { ch[i - 1] };
            let init = if outermost && cfg.zero_init_final {
                Init::Zero
            } else if outermost {
                Init::Linear
            } else {
                Init::Kaiming
            };
            let conv = Conv::new(store, rng, &format!("{prefix}.dec{i}"), cin, cout, k, spec, true, init)?;
            let bn = if outermost { None } else { Some(BatchNorm::new(store, &format!("{prefix}.dec{i}.bn"), cout)?) };
            decoder.push(Block { conv, bn, act: !outermost });
        }
        Ok(Self { encoder, decoder })
    }

    /// `x`: `B×cin×H×W`; `e`: `B×C`. Returns `B×1×H×W` logits.
    fn forward(&self, s: &mut Session, x: Var, e: Var) -> Result<Var, AutodiffError> {
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for block in &self.encoder {
            h = block.forward(s, h)?;
            skips.push(h);
        }
        let mut d = avga(s.graph, e, h)?;
        let last = self.decoder.len() - 1;
        for i in (0..=last).rev() {
            if i < last {
                d = s.graph.concat(&[d, skips[i]], 1)?;
            }
            d = self.decoder[i].forward(s, d)?;
        }
        Ok(d)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.encoder.iter().chain(&self.decoder).flat_map(Block::param_ids).collect()
    }
}

/// Audio-visual global attention: per item `reshape(outer(e, e) · F)`.
///
/// `e`: `B×C`, `f`: `B×C×h×w`; the output has the shape of `f`.
pub fn avga(g: &mut Graph, e: Var, f: Var) -> Result<Var, AutodiffError> {
    let (es, fs) = (g.shape(e).to_vec(), g.shape(f).to_vec());
    let (&[b, c], &[b2, c2, h, w]) = (&es[..], &fs[..]) else {
        return Err(AutodiffError::Shape(format!("avga needs B×C and B×C×H×W, got {es:?} and {fs:?}")));
    };
    if b != b2 || c != c2 {
        return Err(AutodiffError::Shape(format!("avga embedding {es:?} does not match features {fs:?}")));
    }
    let mut items = Vec::with_capacity(b);
    for i in 0..b {
        let ei = g.select(e, i)?;
        let a = g.outer(ei, ei)?;
        let fi = g.select(f, i)?;
        let fi = g.reshape(fi, &[c, h * w])?;
        let y = g.matmul(a, fi)?;
        items.push(g.reshape(y, &[1, c, h, w])?);
    }
    g.concat(&items, 0)
}

/// Localisation map `σ(⟨e_m, f_n(·, y, x)⟩)` per position, `B×1×h×w`, and
/// its spatial maximum `B×1×1×1`.
pub fn localization_map(g: &mut Graph, e: Var, f: Var) -> Result<(Var, Var), AutodiffError> {
    let (es, fs) = (g.shape(e).to_vec(), g.shape(f).to_vec());
    let (&[b, c], &[b2, c2, h, w]) = (&es[..], &fs[..]) else {
        return Err(AutodiffError::Shape(format!("localization needs B×C and B×C×H×W, got {es:?} and {fs:?}")));
    };
    if b != b2 || c != c2 {
        return Err(AutodiffError::Shape(format!("localization embedding {es:?} does not match features {fs:?}")));
    }
    if h != w {
        return Err(AutodiffError::Shape(format!("localization needs a square feature map, got {h}×{w}")));
    }
    let mut items = Vec::with_capacity(b);
    for i in 0..b {
        let ei = g.select(e, i)?;
        let fi = g.select(f, i)?;
        let fi = g.reshape(fi, &[c, h * w])?;
        let dot = g.matmul(ei, fi)?;
        items.push(g.reshape(dot, &[1, 1, h, w])?);
    }
    let dots = g.concat(&items, 0)?;
    let map = g.sigmoid(dots)?;
    let pooled = g.max_pool2d(map, h, h)?;
    Ok((map, pooled))
}

/// The full network: vision encoder, first (base) stream and optional
/// residual stream, with all parameters and running statistics.
#[derive(Debug, Clone)]
pub struct VSlowFast {
    cfg: ModelConfig,
    store: ParamStore,
    pub(crate) vision: VisionNet,
    pub(crate) slow: UNet,
    pub(crate) fast: Option<UNet>,
}

impl VSlowFast {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vision = VisionNet::new(&cfg, &mut store, &mut fork_rng(&mut rng))?;
        let slow = UNet::new(&cfg, &mut store, &mut fork_rng(&mut rng), "slow", 1, cfg.slow_layers)?;
        let fast = if cfg.has_fast() {
            Some(UNet::new(&cfg, &mut store, &mut fork_rng(&mut rng), "fast", 2, cfg.fast_layers)?)
        } else {
            None
        };
        Ok(Self { cfg, store, vision, slow, fast })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn session<'a>(&'a self, graph: &'a mut Graph, mode: super::Mode) -> Session<'a> {
        Session::new(graph, &self.store, mode)
    }

    /// `images`: `B×3×S×S`.
    pub fn vision_forward(&self, s: &mut Session, images: Var) -> Result<VisionFeatures, ModelError> {
        let shape = s.graph.shape(images).to_vec();
        let sz = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != sz || shape[3] != sz {
            return Err(ModelError::Input(format!("images must be B×3×{sz}×{sz}, got {shape:?}")));
        }
        let mut h = images;
        for block in &self.vision.blocks {
            h = block.forward(s, h)?;
        }
        let embedding = s.graph.spatial_avg_pool(h)?;
        Ok(VisionFeatures { fmap: h, embedding })
    }

    /// Wraps linear magnitudes `B×1×H×W` as network input.
    pub fn spec_input(&self, s: &mut Session, magnitude: &Tensor) -> Result<SpecInput, ModelError> {
        let shape = magnitude.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(ModelError::Input(format!("magnitudes must be B×1×H×W, got {shape:?}")));
        }
        self.cfg.check_input(shape[2], shape[3])?;
        if magnitude.data().iter().any(|&v| v < 0.0) {
            return Err(ModelError::Input("magnitudes must be non-negative".into()));
        }
        let magnitude = s.graph.constant(magnitude.clone())?;
        let log_magnitude = s.graph.log1p(magnitude)?;
        Ok(SpecInput { magnitude, log_magnitude })
    }

    fn stream(&self, s: &mut Session, net: &UNet, x: Var, alpha: usize, e: Var) -> Result<Var, ModelError> {
        let down = s.graph.temporal_downsample(x, alpha)?;
        let logits = net.forward(s, down, e)?;
        Ok(s.graph.temporal_upsample(logits, alpha)?)
    }

    /// First stream: `σ(φ⁻¹(U(φ(log(1+|X|), α_s))))`.
    pub fn slow_forward(&self, s: &mut Session, mix: &SpecInput, vf: &VisionFeatures) -> Result<StreamOutput, ModelError> {
        let logits = self.stream(s, &self.slow, mix.log_magnitude, self.cfg.slow_alpha, vf.embedding)?;
        let mask = s.graph.sigmoid(logits)?;
        let separated = s.graph.mul(mask, mix.magnitude)?;
        Ok(StreamOutput { logits, mask, separated })
    }

    /// Residual stream on `[log(1+|X|), log(1+|X̂_slow|)]`; its logits are
    /// added to the first stream's before the sigmoid.
    pub fn fast_forward(
        &self,
        s: &mut Session,
        mix: &SpecInput,
        slow: &StreamOutput,
        vf: &VisionFeatures,
    ) -> Result<StreamOutput, ModelError> {
        let net = self.fast.as_ref().ok_or_else(|| ModelError::Config("model has no residual stream".into()))?;
        if s.graph.shape(slow.logits) != s.graph.shape(mix.magnitude) {
            return Err(ModelError::Input("first-stream output does not match the mixture shape".into()));
        }
        let slow_log = s.graph.log1p(slow.separated)?;
        let x = s.graph.concat(&[mix.log_magnitude, slow_log], 1)?;
        let residual = self.stream(s, net, x, self.cfg.fast_alpha, vf.embedding)?;
        let logits = s.graph.add(slow.logits, residual)?;
        let mask = s.graph.sigmoid(logits)?;
        let separated = s.graph.mul(mask, mix.magnitude)?;
        Ok(StreamOutput { logits, mask, separated })
    }

    /// Full forward pass for a batch of (mixture magnitude, image) items.
    pub fn forward(&self, s: &mut Session, magnitude: &Tensor, images: &Tensor) -> Result<ModelOutput, ModelError> {
        if magnitude.shape().first() != images.shape().first() {
            return Err(ModelError::Input(format!(
                "batch sizes differ: magnitudes {:?}, images {:?}",
                magnitude.shape(),
                images.shape()
            )));
        }
        let mix = self.spec_input(s, magnitude)?;
        let img = s.graph.constant(images.clone())?;
        let vision = self.vision_forward(s, img)?;
        let slow = self.slow_forward(s, &mix, &vision)?;
        let fast = match self.fast {
            Some(_) => Some(self.fast_forward(s, &mix, &slow, &vision)?),
            None => None,
        };
        Ok(ModelOutput { vision, slow, fast })
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let mut rm = self.store.value(u.running_mean).clone();
            let mut rv = self.store.value(u.running_var).clone();
            u.stats.update_running(rm.data_mut(), rv.data_mut());
            *self.store.value_mut(u.running_mean) = rm;
            *self.store.value_mut(u.running_var) = rv;
        }
    }

    fn zero_params(&mut self, ids: &[ParamId]) {
        for &id in ids {
            self.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Zeroes the outermost decoder layer of every stream (logits ≡ 0).
    pub fn zero_final_layers(&mut self) {
        let mut ids = self.slow.decoder[0].param_ids();
        if let Some(f) = &self.fast {
            ids.extend(f.decoder[0].param_ids());
        }
        self.zero_params(&ids);
    }

    /// Zeroes every residual-stream decoder parameter, so the residual
    /// logits vanish identically.
    pub fn zero_fast_decoder(&mut self) {
        if let Some(f) = &self.fast {
            let ids: Vec<ParamId> = f.decoder.iter().flat_map(Block::param_ids).collect();
            self.zero_params(&ids);
        }
    }

    /// Parameter ids grouped as (module, layer, ids), in registration order.
    pub fn layer_params(&self) -> Vec<(String, String, Vec<ParamId>)> {
        let mut rows = Vec::new();
        for (i, b) in self.vision.blocks.iter().enumerate() {
            rows.push(("vision".to_string(), format!("conv{i}"), b.param_ids()));
        }
        let mut unet = |name: &str, net: &UNet| {
            for (i, b) in net.encoder.iter().enumerate() {
                rows.push((name.to_string(), format!("enc{i}"), b.param_ids()));
            }
            for (i, b) in net.decoder.iter().enumerate().rev() {
                rows.push((name.to_string(), format!("dec{i}"), b.param_ids()));
            }
        };
        unet("slow", &self.slow);
        if let Some(f) = &self.fast {
            unet("fast", f);
        }
        rows
    }

    /// Trainable ids of the residual stream (empty for single-stream models).
    pub fn fast_param_ids(&self) -> Vec<ParamId> {
        self.fast.as_ref().map(UNet::param_ids).unwrap_or_default()
    }
}
