//! Numerical self-checks shared by the `check` command and the test suites.

pub mod model;
pub mod reference;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{check_gradients, AutodiffError, ConvSpec, Graph, Tensor, Var, BN_EPS};
use crate::dsp::{istft, stft, DspError, Waveform};
use crate::model::ModelConfig;
use crate::train::TrainError;
use reference::MacCounter;

pub const GRAD_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error <= self.tolerance
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so that kink-based ops (LeakyReLU,
/// max-pool) are not probed across their discontinuity.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values with gaps well above the finite-difference step.
fn rand_distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape, vals).unwrap()
}

type LossFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>>;

/// Random projection `Σ r ⊙ y` so every output coordinate contributes.
fn project(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var, AutodiffError> {
    let rv = g.constant(r.clone())?;
    let p = g.mul(y, rv)?;
    g.sum(p)
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, LossFn, Vec<Tensor>)> {
    let mut cases: Vec<(&'static str, LossFn, Vec<Tensor>)> = Vec::new();

    let r = rand_tensor(rng, &[2, 3, 3, 3]);
    cases.push((
        "conv2d",
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(2, 1, 1))?;
            project(g, y, &r)
        }),
        vec![rand_tensor(rng, &[2, 2, 6, 6]), rand_tensor(rng, &[3, 2, 3, 3]), rand_tensor(rng, &[3])],
    ));

    let r = rand_tensor(rng, &[1, 2, 5, 5]);
    cases.push((
        "conv2d_dilated",
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], None, ConvSpec::new(1, 2, 2))?;
            project(g, y, &r)
        }),
        vec![rand_tensor(rng, &[1, 2, 5, 5]), rand_tensor(rng, &[2, 2, 3, 3])],
    ));

    let r = rand_tensor(rng, &[2, 2, 6, 8]);
    cases.push((
        "conv_transpose2d",
        Box::new(move |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?;
            project(g, y, &r)
        }),
        vec![rand_tensor(rng, &[2, 3, 3, 4]), rand_tensor(rng, &[3, 2, 4, 4]), rand_tensor(rng, &[2])],
    ));

    let r = rand_tensor(rng, &[3, 2, 3, 4]);
    cases.push((
        "batchnorm_train",
        Box::new(move |g, v| {
            let (y, _) = g.batchnorm2d_train(v[0], v[1], v[2])?;
            project(g, y, &r)
        }),
        vec![rand_tensor(rng, &[3, 2, 3, 4]), rand_tensor(rng, &[2]), rand_tensor(rng, &[2])],
    ));

    let r = rand_tensor(rng, &[2, 3, 4]);
    cases.push((
        "leaky_relu",
        Box::new(move |g, v| {
            let y = g.leaky_relu(v[0], 0.2)?;
            project(g, y, &r)
        }),
        vec![rand_away_from_zero(rng, &[2, 3, 4])],
    ));

    let r = rand_tensor(rng, &[2, 3, 4]);
    cases.push((
        "sigmoid",
        Box::new(move |g, v| {
            let y = g.sigmoid(v[0])?;
            project(g, y, &r)
        }),
        vec![Tensor::from_fn(&[2, 3, 4], |_| rng.gen_range(-4.0..4.0))],
    ));

    let r = rand_tensor(rng, &[12]);
    cases.push((
        "log1p_sqrt",
        Box::new(move |g, v| {
            let a = g.log1p(v[0])?;
            let b = g.sqrt(v[0])?;
            let y = g.add(a, b)?;
            project(g, y, &r)
        }),
        vec![Tensor::from_fn(&[12], |_| rng.gen_range(0.2..2.0))],
    ));

    let r = rand_tensor(rng, &[1, 2, 2, 2]);
    cases.push((
        "max_pool2d",
        Box::new(move |g, v| {
            let y = g.max_pool2d(v[0], 2, 2)?;
            project(g, y, &r)
        }),
        vec![rand_distinct(rng, &[1, 2, 4, 4])],
    ));

    let r = rand_tensor(rng, &[2, 3]);
    cases.push((
        "spatial_avg_pool",
        Box::new(move |g, v| {
            let y = g.spatial_avg_pool(v[0])?;
            project(g, y, &r)
        }),
        vec![rand_tensor(rng, &[2, 3, 2, 3])],
    ));

    let r = rand_tensor(rng, &[3, 2]);
    cases.push((
        "matmul",
        Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, &r)
        }),
        vec![rand_tensor(rng, &[3, 4]), rand_tensor(rng, &[4, 2])],
    ));

    let r = rand_tensor(rng, &[3, 4]);
    cases.push((
        "outer",
        Box::new(move |g, v| {
            let y = g.outer(v[0], v[1])?;
            project(g, y, &r)
        }),
        vec![rand_tensor(rng, &[3]), rand_tensor(rng, &[4])],
    ));

    let r = rand_tensor(rng, &[2, 5, 2]);
    cases.push((
        "concat_select_reshape",
        Box::new(move |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let s0 = g.select(c, 0)?;
            let s1 = g.select(c, 1)?;
            let s1 = g.scale(s1, -0.5)?;
            let a = g.reshape(s0, &[1, 5, 2])?;
            let b = g.reshape(s1, &[1, 5, 2])?;
            let y = g.concat(&[a, b], 0)?;
            project(g, y, &r)
        }),
        vec![rand_tensor(rng, &[2, 2, 2]), rand_tensor(rng, &[2, 3, 2])],
    ));

    let r = rand_tensor(rng, &[6]);
    cases.push((
        "arithmetic",
        Box::new(move |g, v| {
            let a = g.mul(v[0], v[1])?;
            let b = g.sub(a, v[0])?;
            let c = g.add_scalar(b, 0.3)?;
            let d = g.square(c)?;
            let e = g.add(d, v[1])?;
            let s = g.mul(e, v[2])?;
            let m = g.mean(s)?;
            let p = project(g, e, &r)?;
            g.add(m, p)
        }),
        vec![rand_tensor(rng, &[6]), rand_tensor(rng, &[6]), rand_tensor(rng, &[])],
    ));

    let r = rand_tensor(rng, &[1, 2, 2, 8]);
    cases.push((
        "temporal_resample",
        Box::new(move |g, v| {
            let d = g.temporal_downsample(v[0], 4)?;
            let d = g.square(d)?;
            let u = g.temporal_upsample(d, 4)?;
            project(g, u, &r)
        }),
        vec![rand_tensor(rng, &[1, 2, 2, 8])],
    ));

    let t = Tensor::from_fn(&[10], |_| rng.gen_range(0.0..1.0));
    cases.push((
        "bce_with_logits",
        Box::new(move |g, v| g.bce_with_logits(v[0], &t)),
        vec![Tensor::from_fn(&[10], |_| rng.gen_range(-5.0..5.0))],
    ));

    let t = Tensor::from_fn(&[10], |_| rng.gen_range(0.0..1.0));
    cases.push((
        "bce_prob",
        Box::new(move |g, v| g.bce_prob(v[0], &t)),
        vec![Tensor::from_fn(&[10], |_| rng.gen_range(0.05..0.95))],
    ));

    cases
}

/// Gradient check of every differentiable op on random inputs drawn from `seed`.
pub fn op_gradient_suite(seed: u64, tolerance: f64) -> Result<Vec<CheckResult>, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, f, inputs) in op_cases(&mut rng) {
        let report = check_gradients(f, &inputs, GRAD_EPS, None, seed)?;
        out.push(CheckResult { name: name.to_string(), seed, error: report.max_rel_error, tolerance });
    }
    Ok(out)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Forward values of the graph ops against the loop oracles on random shapes
/// up to 4×4×16×16.
pub fn forward_oracle_suite(seed: u64, tolerance: f64) -> Result<Vec<CheckResult>, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut record = |name: &str, error: f64| out.push(CheckResult { name: name.to_string(), seed, error, tolerance });

    let n = rng.gen_range(1..=4);
    let c = rng.gen_range(1..=4);
    let o = rng.gen_range(1..=4);
    let h = rng.gen_range(6..=16);
    let w = rng.gen_range(6..=16);
    let k = rng.gen_range(1..=4);
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=1);
    let xt = rand_tensor(&mut rng, &[n, c, h, w]);
    let wt = rand_tensor(&mut rng, &[o, c, k, k]);
    let bt = rand_tensor(&mut rng, &[o]);
    let wtt = rand_tensor(&mut rng, &[c, o, k, k]);
    let gamma: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
    let beta: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut g = Graph::new();
    let x = g.constant(xt.clone())?;
    let wv = g.constant(wt.clone())?;
    let bv = g.constant(bt.clone())?;
    let y = g.conv2d(x, wv, Some(bv), ConvSpec::new(stride, pad, 1))?;
    let oracle = reference::conv2d(&xt, &wt, Some(&bt), stride, pad, 1, &mut MacCounter::default());
    record("conv2d", max_abs_diff(g.value(y).data(), oracle.data()));

    if k > 2 * pad {
        let wtv = g.constant(wtt.clone())?;
        let y = g.conv_transpose2d(x, wtv, None, stride, pad)?;
        let oracle = reference::conv_transpose2d(&xt, &wtt, None, stride, pad, &mut MacCounter::default());
        record("conv_transpose2d", max_abs_diff(g.value(y).data(), oracle.data()));
    }

    let gv = g.constant(Tensor::new(&[c], gamma.clone())?)?;
    let bev = g.constant(Tensor::new(&[c], beta.clone())?)?;
    let (y, _) = g.batchnorm2d_train(x, gv, bev)?;
    let (oracle, _, _) = reference::batchnorm_train(&xt, &gamma, &beta, BN_EPS);
    record("batchnorm_train", max_abs_diff(g.value(y).data(), oracle.data()));

    let y = g.max_pool2d(x, 2, 2)?;
    record("max_pool2d", max_abs_diff(g.value(y).data(), reference::max_pool2d(&xt, 2, 2).data()));

    let y = g.spatial_avg_pool(x)?;
    record("spatial_avg_pool", max_abs_diff(g.value(y).data(), reference::spatial_mean(&xt).data()));

    let at = rand_tensor(&mut rng, &[h, w]);
    let bt2 = rand_tensor(&mut rng, &[w, c]);
    let av = g.constant(at.clone())?;
    let bv2 = g.constant(bt2.clone())?;
    let y = g.matmul(av, bv2)?;
    let oracle = reference::matmul(&at, &bt2, &mut MacCounter::default());
    record("matmul", max_abs_diff(g.value(y).data(), oracle.data()));

    let et = rand_tensor(&mut rng, &[n, c]);
    let ev = g.constant(et.clone())?;
    let y = crate::model::avga(&mut g, ev, x)?;
    let mut oracle = Vec::with_capacity(n * c * h * w);
    for i in 0..n {
        let f = &xt.data()[i * c * h * w..(i + 1) * c * h * w];
        oracle.extend(reference::avga(&et.data()[i * c..(i + 1) * c], f, h, w, &mut MacCounter::default()));
    }
    record("avga", max_abs_diff(g.value(y).data(), &oracle));

    let zt = Tensor::from_fn(&[h * w], |_| rng.gen_range(-6.0..6.0));
    let tt = Tensor::from_fn(&[h * w], |_| rng.gen_range(0.0..1.0));
    let zv = g.constant(zt.clone())?;
    let l = g.bce_with_logits(zv, &tt)?;
    record("bce_with_logits", (g.value(l).item() - reference::bce_logits_direct(zt.data(), tt.data())).abs());

    Ok(out)
}

/// Largest interior error of an STFT/iSTFT round trip on white noise with a
/// random window, hop and length. Interior means at least one window away
/// from either end.
pub fn stft_round_trip(seed: u64, tolerance: f64) -> Result<CheckResult, DspError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window = 2 * rng.gen_range(4..=128);
    let hop = rng.gen_range(1..=window / 2);
    let len = rng.gen_range(3 * window..=3 * window + 4000);
    let samples: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = Waveform::new(samples, 8000)?;
    let back = istft(&stft(&w, window, hop)?)?;
    let error = (window..back.len().saturating_sub(window))
        .map(|i| (back.samples()[i] - w.samples()[i]).abs())
        .fold(0.0, f64::max);
    Ok(CheckResult { name: format!("stft_round_trip(n={window},hop={hop})"), seed, error, tolerance })
}

/// Every numerical self-check over `seeds` seeds: op gradients, forward
/// oracles, STFT round trips, the end-to-end loss gradient and the
/// parameter and MAC audits of the toy and default models.
pub fn run_all(seeds: u64) -> Result<Vec<CheckResult>, TrainError> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        out.extend(op_gradient_suite(seed, 1e-4)?);
        out.extend(forward_oracle_suite(seed, 1e-12)?);
        out.push(stft_round_trip(seed, 1e-6)?);
        let g = model::end_to_end_gradient(seed, 1e-4, 2, 1e-4)?;
        let error = if g.passed() { g.result.error } else { g.result.error.max(g.kinks as f64 / g.probed as f64) };
        out.push(CheckResult { error, ..g.result });
    }
    for (label, cfg) in [("toy", ModelConfig::toy()), ("default", ModelConfig::default())] {
        let p = model::audit_params(&cfg)?;
        let perr = p.registry_total.abs_diff(p.analytic_total) as f64 + p.mismatches.len() as f64;
        out.push(CheckResult { name: format!("params[{label}]"), seed: 0, error: perr, tolerance: 0.0 });
        let m = model::audit_macs(&cfg, (32, 64))?;
        // A replayed product that disagrees with the graph voids the count.
        let merr = if m.max_value_error < 1e-9 { m.instrumented.abs_diff(m.analytic) as f64 } else { f64::INFINITY };
        out.push(CheckResult { name: format!("macs[{label}]"), seed: 0, error: merr, tolerance: 0.0 });
    }
    Ok(out)
}
