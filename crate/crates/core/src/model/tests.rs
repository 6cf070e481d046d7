use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{sigmoid_scalar, ParamStore};
use crate::selftest::reference::{self, MacCounter};

pub(crate) fn micro_config() -> ModelConfig {
    ModelConfig {
        category_count: 2,
        vision_channels: vec![3, 4, 4, 2],
        vision_dilation: false,
        slow_layers: 5,
        fast_layers: 4,
        slow_alpha: 2,
        fast_alpha: 1,
        ordering: Ordering::SlowFirst,
        unet_channels: vec![2, 3, 3],
        image_size: 16,
        zero_init_final: false,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn inputs(seed: u64, b: usize, cfg: &ModelConfig, h: usize, w: usize) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mag = rand_tensor(&mut rng, &[b, 1, h, w], 0.0, 3.0);
    let img = rand_tensor(&mut rng, &[b, 3, cfg.image_size, cfg.image_size], 0.0, 1.0);
    (mag, img)
}

fn set_param(store: &mut ParamStore, name: &str, f: impl Fn(usize) -> f64) {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let t = store.value_mut(id);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

fn run(model: &VSlowFast, mode: Mode, mag: &Tensor, img: &Tensor) -> (Graph, ModelOutput) {
    let mut g = Graph::new();
    let out = {
        let mut s = model.session(&mut g, mode);
        model.forward(&mut s, mag, img).unwrap()
    };
    (g, out)
}

#[test]
fn vision_embedding_cases() {
    let cfg = micro_config();
    let mut model = VSlowFast::new(cfg.clone(), 1).unwrap();
    set_param(model.store_mut(), "vision.conv3.weight", |_| 0.0);
    set_param(model.store_mut(), "vision.conv3.bias", |_| 0.0);
    let zero_img = Tensor::zeros(&[1, 3, 16, 16]);
    let mut g = Graph::new();
    let mut s = model.session(&mut g, Mode::Train);
    let img = s.graph.constant(zero_img.clone()).unwrap();
    let vf = model.vision_forward(&mut s, img).unwrap();
    assert!(g.value(vf.embedding).data().iter().all(|&v| v == 0.0));

    set_param(model.store_mut(), "vision.conv3.bias", |i| [0.75, -1.25][i]);
    let mut g = Graph::new();
    let mut s = model.session(&mut g, Mode::Train);
    let img = s.graph.constant(zero_img).unwrap();
    let vf = model.vision_forward(&mut s, img).unwrap();
    assert_eq!(g.shape(vf.fmap), &[1, 2, 1, 1]);
    assert_eq!(g.value(vf.embedding).data(), &[0.75, -1.25]);
}

#[test]
fn vision_embedding_is_spatial_mean() {
    let cfg = ModelConfig { image_size: 32, ..micro_config() };
    let model = VSlowFast::new(cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = rand_tensor(&mut rng, &[2, 3, 32, 32], 0.0, 1.0);
    let mut g = Graph::new();
    let mut s = model.session(&mut g, Mode::Train);
    let iv = s.graph.constant(img).unwrap();
    let vf = model.vision_forward(&mut s, iv).unwrap();
    assert_eq!(g.shape(vf.fmap), &[2, 2, 2, 2]);
    let oracle = reference::spatial_mean(g.value(vf.fmap));
    for (a, b) in g.value(vf.embedding).data().iter().zip(oracle.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    let mut s = model.session(&mut g, Mode::Train);
    let bad = s.graph.constant(Tensor::zeros(&[1, 3, 16, 16])).unwrap();
    assert!(matches!(model.vision_forward(&mut s, bad), Err(ModelError::Input(_))));
}

#[test]
fn avga_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ft = rand_tensor(&mut rng, &[1, 3, 2, 5], -1.0, 1.0);
    let mut g = Graph::new();
    let f = g.constant(ft.clone()).unwrap();
    let e = g.constant(Tensor::new(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap()).unwrap();
    let y = avga(&mut g, e, f).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 2, 5]);
    for (i, &v) in g.value(y).data().iter().enumerate() {
        let expect = if i / 10 == 1 { ft.data()[i] } else { 0.0 };
        assert_eq!(v, expect);
    }
    let z = g.constant(Tensor::zeros(&[1, 3])).unwrap();
    let y = avga(&mut g, z, f).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let et = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let ft = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let e = g.constant(et.clone()).unwrap();
    let f = g.constant(ft.clone()).unwrap();
    let y = avga(&mut g, e, f).unwrap();
    for b in 0..2 {
        let oracle = reference::avga(&et.data()[b * 3..(b + 1) * 3], &ft.data()[b * 48..(b + 1) * 48], 4, 4, &mut MacCounter::default());
        for (a, o) in g.value(y).data()[b * 48..(b + 1) * 48].iter().zip(&oracle) {
            assert!((a - o).abs() < 1e-12);
        }
    }
    let wrong = g.constant(Tensor::zeros(&[2, 4])).unwrap();
    assert!(avga(&mut g, wrong, f).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn avga_preserves_shape_and_scales_quadratically(
        c in 1usize..5, h in 1usize..5, w in 1usize..5, scale in -3.0f64..3.0, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let et = rand_tensor(&mut rng, &[1, c], -1.0, 1.0);
        let ft = rand_tensor(&mut rng, &[1, c, h, w], -1.0, 1.0);
        let mut g = Graph::new();
        let e = g.constant(et.clone()).unwrap();
        let es = g.constant(Tensor::from_fn(&[1, c], |i| scale * et.data()[i])).unwrap();
        let f = g.constant(ft).unwrap();
        let y = avga(&mut g, e, f).unwrap();
        let ys = avga(&mut g, es, f).unwrap();
        prop_assert_eq!(g.shape(y), &[1, c, h, w]);
        for (a, b) in g.value(y).data().iter().zip(g.value(ys).data()) {
            prop_assert!((scale * scale * a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn localization_cases() {
    let mut g = Graph::new();
    let ev = [0.5, -1.0, 0.25];
    let e = g.constant(Tensor::new(&[1, 3], ev.to_vec()).unwrap()).unwrap();
    let f = g.constant(Tensor::from_fn(&[1, 3, 2, 2], |i| ev[i / 4])).unwrap();
    let (map, pooled) = localization_map(&mut g, e, f).unwrap();
    let expect = sigmoid_scalar(ev.iter().map(|v| v * v).sum());
    assert!(g.value(map).data().iter().all(|&v| (v - expect).abs() < 1e-15));
    assert!((g.value(pooled).item() - expect).abs() < 1e-15);

    let z = g.constant(Tensor::zeros(&[1, 3])).unwrap();
    let (map, _) = localization_map(&mut g, z, f).unwrap();
    assert!(g.value(map).data().iter().all(|&v| v == 0.5));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let et = rand_tensor(&mut rng, &[1, 4], -1.0, 1.0);
    let ft = rand_tensor(&mut rng, &[1, 4, 3, 3], -1.0, 1.0);
    let e = g.constant(et.clone()).unwrap();
    let f = g.constant(ft.clone()).unwrap();
    let (map, pooled) = localization_map(&mut g, e, f).unwrap();
    let oracle = reference::localization(et.data(), ft.data(), 3, 3);
    for (a, b) in g.value(map).data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-14);
    }
    let omax = oracle.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(g.value(pooled).item(), omax);
}

#[test]
fn single_stream_widths() {
    for alpha in [1, 2] {
        let cfg = micro_config().single_stream(alpha);
        let model = VSlowFast::new(cfg.clone(), 6).unwrap();
        let (mag, img) = inputs(7, 2, &cfg, 16, 64);
        let (g, out) = run(&model, Mode::Train, &mag, &img);
        assert!(out.fast.is_none());
        assert_eq!(g.shape(out.slow.logits), &[2, 1, 16, 64]);
        let l = g.value(out.slow.logits).data();
        if alpha == 2 {
            for pair in l.chunks(2) {
                assert_eq!(pair[0], pair[1]);
            }
            assert!(l.chunks(2).zip(l.chunks(2).skip(1)).any(|(a, b)| a[0] != b[0]));
        }
    }
}

#[test]
fn zero_final_layers_give_half_masks() {
    let cfg = ModelConfig { zero_init_final: true, ..micro_config() };
    let model = VSlowFast::new(cfg.clone(), 8).unwrap();
    let (mag, img) = inputs(9, 2, &cfg, 16, 32);
    let (g, out) = run(&model, Mode::Train, &mag, &img);
    for m in [out.slow.mask, out.fast.unwrap().mask] {
        assert!(g.value(m).data().iter().all(|&v| v == 0.5));
    }
    let mut model = VSlowFast::new(micro_config(), 8).unwrap();
    model.zero_final_layers();
    let (g, out) = run(&model, Mode::Train, &mag, &img);
    assert!(g.value(out.final_stream().mask).data().iter().all(|&v| v == 0.5));
}

#[test]
fn zero_residual_decoder_reproduces_slow_mask() {
    let cfg = micro_config();
    let mut model = VSlowFast::new(cfg.clone(), 10).unwrap();
    model.zero_fast_decoder();
    let (mag, img) = inputs(11, 2, &cfg, 16, 32);
    let (g, out) = run(&model, Mode::Train, &mag, &img);
    let fast = out.fast.unwrap();
    assert_eq!(g.value(fast.mask), g.value(out.slow.mask));
    assert!(g.value(out.slow.mask).data().iter().any(|&v| v != 0.5));
}

#[test]
fn zero_slow_logits_leave_sigmoid_of_residual() {
    let cfg = micro_config();
    let mut model = VSlowFast::new(cfg.clone(), 12).unwrap();
    set_param(model.store_mut(), "slow.dec0.weight", |_| 0.0);
    set_param(model.store_mut(), "slow.dec0.bias", |_| 0.0);
    let (mag, img) = inputs(13, 2, &cfg, 16, 32);
    let (g, out) = run(&model, Mode::Train, &mag, &img);
    let fast = out.fast.unwrap();
    assert!(g.value(out.slow.logits).data().iter().all(|&v| v == 0.0));
    for (m, z) in g.value(fast.mask).data().iter().zip(g.value(fast.logits).data()) {
        assert_eq!(*m, sigmoid_scalar(*z));
    }
}

/// Rebuilds one stream from graph primitives and the documented parameter
/// naming, independently of the model's layer structs.
fn hand_stream(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, e: Var, layers: usize) -> Var {
    let p = |g: &mut Graph, name: String| {
        let id = store.find(&name).unwrap();
        g.constant(store.value(id).clone()).unwrap()
    };
    let mut skips = Vec::new();
    let mut h = x;
    for i in 0..layers {
        let (w, b) = (p(g, format!("{prefix}.enc{i}.weight")), p(g, format!("{prefix}.enc{i}.bias")));
        let spec = if i < 4 { ConvSpec::new(2, 1, 1) } else { ConvSpec::new(1, 1, 1) };
        h = g.conv2d(h, w, Some(b), spec).unwrap();
        let (ga, be) = (p(g, format!("{prefix}.enc{i}.bn.gamma")), p(g, format!("{prefix}.enc{i}.bn.beta")));
        h = g.batchnorm2d_train(h, ga, be).unwrap().0;
        h = g.leaky_relu(h, 0.2).unwrap();
        skips.push(h);
    }
    let mut d = avga(g, e, h).unwrap();
    for i in (0..layers).rev() {
        if i + 1 < layers {
            d = g.concat(&[d, skips[i]], 1).unwrap();
        }
        let (w, b) = (p(g, format!("{prefix}.dec{i}.weight")), p(g, format!("{prefix}.dec{i}.bias")));
        let (stride, pad) = if i < 4 { (2, 1) } else { (1, 1) };
        d = g.conv_transpose2d(d, w, Some(b), stride, pad).unwrap();
        if i > 0 {
            let (ga, be) = (p(g, format!("{prefix}.dec{i}.bn.gamma")), p(g, format!("{prefix}.dec{i}.bn.beta")));
            d = g.batchnorm2d_train(d, ga, be).unwrap().0;
            d = g.leaky_relu(d, 0.2).unwrap();
        }
    }
    d
}

use crate::autodiff::{ConvSpec, Var};

#[test]
fn fast_stream_matches_hand_composition() {
    let cfg = micro_config();
    let model = VSlowFast::new(cfg.clone(), 14).unwrap();
    let (mag, img) = inputs(15, 2, &cfg, 16, 32);
    let (g, out) = run(&model, Mode::Train, &mag, &img);
    let fast = out.fast.unwrap();

    let mut h = Graph::new();
    let e = h.constant(g.value(out.vision.embedding).clone()).unwrap();
    let m = h.constant(mag.clone()).unwrap();
    let logm = h.log1p(m).unwrap();
    let ds = h.temporal_downsample(logm, 2).unwrap();
    let sl = hand_stream(&mut h, model.store(), "slow", ds, e, 5);
    let sl = h.temporal_upsample(sl, 2).unwrap();
    let smask = h.sigmoid(sl).unwrap();
    let ssep = h.mul(smask, m).unwrap();
    let slog = h.log1p(ssep).unwrap();
    let x = h.concat(&[logm, slog], 1).unwrap();
    let r = hand_stream(&mut h, model.store(), "fast", x, e, 4);
    let z = h.add(sl, r).unwrap();
    let fmask = h.sigmoid(z).unwrap();
    assert_eq!(h.value(fmask), g.value(fast.mask));
    assert_eq!(h.value(smask), g.value(out.slow.mask));
}

#[test]
fn default_configuration_shapes() {
    let cfg = ModelConfig::default();
    let model = VSlowFast::new(cfg.clone(), 16).unwrap();
    let (mag, img) = inputs(17, 1, &cfg, 32, 64);
    let (g, out) = run(&model, Mode::Train, &mag, &img);
    assert_eq!(g.shape(out.vision.fmap), &[1, 4, 2, 2]);
    assert_eq!(g.shape(out.vision.embedding), &[1, 4]);
    assert_eq!(g.shape(out.slow.logits), &[1, 1, 32, 64]);
    let fast = out.fast.unwrap();
    assert_eq!(g.shape(fast.logits), &[1, 1, 32, 64]);
    assert!(g.value(fast.mask).data().iter().all(|&v| v == 0.5));
}

#[test]
fn forward_is_deterministic_and_masks_are_bounded() {
    let cfg = micro_config();
    let (mag, img) = inputs(18, 2, &cfg, 16, 32);
    let a = VSlowFast::new(cfg.clone(), 19).unwrap();
    let b = VSlowFast::new(cfg.clone(), 19).unwrap();
    let (ga, oa) = run(&a, Mode::Train, &mag, &img);
    let (gb, ob) = run(&b, Mode::Train, &mag, &img);
    let bits = |g: &Graph, v: Var| g.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ga, oa.final_stream().mask), bits(&gb, ob.final_stream().mask));
    for st in [oa.slow, oa.fast.unwrap()] {
        assert!(ga.value(st.mask).data().iter().all(|&v| v > 0.0 && v < 1.0));
        for (s, m) in ga.value(st.separated).data().iter().zip(mag.data()) {
            assert!(*s <= *m);
        }
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let cfg = micro_config();
    let model = VSlowFast::new(cfg.clone(), 20).unwrap();
    let (mag, img) = inputs(21, 1, &cfg, 16, 48);
    let mut g = Graph::new();
    let mut s = model.session(&mut g, Mode::Train);
    assert!(matches!(model.forward(&mut s, &mag, &img), Err(ModelError::ResolutionMismatch { width: 48, multiple: 32 })));
    let (mag, _) = inputs(21, 2, &cfg, 16, 32);
    assert!(matches!(model.forward(&mut s, &mag, &img), Err(ModelError::Input(_))));
}

#[test]
fn fast_first_ordering_runs_finer_stream_first() {
    let cfg = ModelConfig { ordering: Ordering::FastFirst, slow_alpha: 1, fast_alpha: 2, ..micro_config() };
    let model = VSlowFast::new(cfg.clone(), 22).unwrap();
    let (mag, img) = inputs(23, 1, &cfg, 16, 32);
    let (g, out) = run(&model, Mode::Train, &mag, &img);
    assert_eq!(g.shape(out.final_stream().mask), &[1, 1, 16, 32]);
}

#[test]
fn eval_mode_uses_running_statistics() {
    let cfg = micro_config();
    let mut model = VSlowFast::new(cfg.clone(), 24).unwrap();
    let (mag, img) = inputs(25, 2, &cfg, 16, 32);
    let (g1, o1) = run(&model, Mode::Eval, &mag, &img);
    let updates = {
        let mut g = Graph::new();
        let mut s = model.session(&mut g, Mode::Train);
        model.forward(&mut s, &mag, &img).unwrap();
        s.into_updates()
    };
    assert!(!updates.is_empty());
    model.apply_bn_updates(&updates);
    let (g2, o2) = run(&model, Mode::Eval, &mag, &img);
    assert_ne!(g1.value(o1.slow.mask), g2.value(o2.slow.mask));
}

#[test]
fn predict_returns_per_image_masks() {
    use crate::dsp::{stft, Waveform};
    let cfg = ModelConfig { image_size: 32, ..micro_config() };
    let model = VSlowFast::new(cfg.clone(), 26).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    // window 30 → 16 bins; 32 frames with hop 15.
    let len = 31 * 15 + 30;
    let w = Waveform::new((0..len).map(|_| rng.gen_range(-0.5..0.5)).collect(), 8000).unwrap();
    let spec = stft(&w, 30, 15).unwrap();
    let imgs: Vec<Tensor> = (0..2).map(|_| rand_tensor(&mut rng, &[3, 32, 32], 0.0, 1.0)).collect();
    let preds = model.predict(&spec, &imgs).unwrap();
    assert_eq!(preds.len(), 2);
    assert_eq!(preds[0].mask.shape(), (16, 32));
    assert_eq!(preds[0].localization.shape(), (2, 2));
    assert_eq!(preds[0].mask, *preds[0].fast_mask.as_ref().unwrap());
    assert!(preds[0].localization.data().iter().all(|&v| v > 0.0 && v < 1.0));
}
