//! Contrastive and separation objectives.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid_scalar, AutodiffError, Graph, Tensor, Var, PROB_CLAMP};
use crate::model::{localization_map, StreamOutput};

/// `exp(-9)`, added under the square root of the embedding distance.
pub const DIST_EPS: f64 = 1.234_098_040_866_795_5e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub r1: f64,
    pub r2: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { r1: 0.1, r2: 0.1, margin: 1.0 }
    }
}

/// Anchor `n` paired with partner `m`; `label` is 1 for the same category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub anchor_index: usize,
    pub partner_index: usize,
    pub label: u8,
}

// ----- scalar references ------------------------------------------------------

/// `½·y·d + ½·(1−y)·max(0, margin − √(d + exp(−9)))²` with `d = ‖e_m − e_n‖²`.
pub fn embedding_contrast(e_m: &[f64], e_n: &[f64], y: f64, margin: f64) -> f64 {
    assert_eq!(e_m.len(), e_n.len(), "embedding lengths differ");
    let dist: f64 = e_m.iter().zip(e_n).map(|(a, b)| (a - b) * (a - b)).sum();
    let hinge = (margin - (dist + DIST_EPS).sqrt()).max(0.0);
    0.5 * y * dist + 0.5 * (1.0 - y) * hinge * hinge
}

/// Probability-space BCE with clamping to `[1e-12, 1 − 1e-12]`.
pub fn bce_prob(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `BCE(max_{h,w} σ(⟨e_m, f_n(·,h,w)⟩), y)` for `f_n` laid out `C×(h·w)`.
pub fn localization_contrast(e_m: &[f64], f_n: &[f64], y: f64) -> f64 {
    let c = e_m.len();
    assert!(c > 0 && f_n.len() % c == 0, "channel mismatch");
    let hw = f_n.len() / c;
    let m = (0..hw)
        .map(|p| sigmoid_scalar((0..c).map(|j| e_m[j] * f_n[j * hw + p]).sum()))
        .fold(f64::NEG_INFINITY, f64::max);
    bce_prob(m, y)
}

// ----- graph versions ---------------------------------------------------------

fn column(g: &mut Graph, values: &[f64]) -> Result<Var, AutodiffError> {
    g.constant(Tensor::new(&[values.len(), 1], values.to_vec())?)
}

/// Per-pair embedding contrast, `B×1`, for `B×C` embeddings.
pub fn embedding_contrast_graph(
    g: &mut Graph,
    e_m: Var,
    e_n: Var,
    labels: &[f64],
    margin: f64,
) -> Result<Var, AutodiffError> {
    let shape = g.shape(e_m).to_vec();
    if shape.len() != 2 || g.shape(e_n) != &shape[..] || shape[0] != labels.len() {
        return Err(AutodiffError::Shape(format!(
            "embedding contrast needs matching B×C embeddings and B labels, got {shape:?}, {:?}, {}",
            g.shape(e_n),
            labels.len()
        )));
    }
    let c = shape[1];
    let diff = g.sub(e_m, e_n)?;
    let sq = g.square(diff)?;
    let ones = g.constant(Tensor::filled(&[c, 1], 1.0))?;
    let dist = g.matmul(sq, ones)?;
    let y = column(g, labels)?;
    let pos = g.mul(dist, y)?;
    let root = g.add_scalar(dist, DIST_EPS)?;
    let root = g.sqrt(root)?;
    let gap = g.scale(root, -1.0)?;
    let gap = g.add_scalar(gap, margin)?;
    let hinge = g.relu(gap)?;
    let hinge = g.square(hinge)?;
    let not_y: Vec<f64> = labels.iter().map(|y| 1.0 - y).collect();
    let not_y = column(g, &not_y)?;
    let neg = g.mul(hinge, not_y)?;
    let both = g.add(pos, neg)?;
    g.scale(both, 0.5)
}

/// Mean localisation BCE over `B` pairs.
pub fn localization_contrast_graph(g: &mut Graph, e_m: Var, f_n: Var, labels: &[f64]) -> Result<Var, AutodiffError> {
    let (_, pooled) = localization_map(g, e_m, f_n)?;
    let b = g.shape(pooled)[0];
    if labels.len() != b {
        return Err(AutodiffError::Shape(format!("{} labels for {b} pairs", labels.len())));
    }
    g.bce_prob(pooled, &Tensor::new(&[b, 1, 1, 1], labels.to_vec())?)
}

#[derive(Debug, Clone, Copy)]
pub struct ContrastTerms {
    /// `r1·mean(L_e) + r2·mean(L_M)`.
    pub total: Var,
    pub l_e: Var,
    pub l_m: Var,
    /// Set when there were no pairs and the loss is a constant zero.
    pub empty: bool,
}

/// Contrastive loss over `B` pairs: partner embeddings `e_m` (`B×C`),
/// anchor embeddings `e_n` (`B×C`) and anchor feature maps `f_n`.
pub fn contrast_loss(
    g: &mut Graph,
    e_m: Option<Var>,
    e_n: Option<Var>,
    f_n: Option<Var>,
    labels: &[f64],
    weights: &LossWeights,
) -> Result<ContrastTerms, AutodiffError> {
    match (e_m, e_n, f_n) {
        (Some(e_m), Some(e_n), Some(f_n)) if !labels.is_empty() => {
            let le = embedding_contrast_graph(g, e_m, e_n, labels, weights.margin)?;
            let l_e = g.mean(le)?;
            let l_m = localization_contrast_graph(g, e_m, f_n, labels)?;
            let a = g.scale(l_e, weights.r1)?;
            let b = g.scale(l_m, weights.r2)?;
            let total = g.add(a, b)?;
            Ok(ContrastTerms { total, l_e, l_m, empty: false })
        }
        _ => {
            let z = g.constant(Tensor::scalar(0.0))?;
            Ok(ContrastTerms { total: z, l_e: z, l_m: z, empty: true })
        }
    }
}

/// `N · (BCE(slow) + BCE(fast))`, each BCE averaged over the `B×1×H×W`
/// batch of per-source logits; for `B = M·N` items this is the per-mixture
/// sum over sources averaged over the `M` mixtures.
pub fn separation_loss(
    g: &mut Graph,
    slow: &StreamOutput,
    fast: Option<&StreamOutput>,
    targets: &Tensor,
    n_sources: usize,
) -> Result<Var, AutodiffError> {
    if g.shape(slow.logits) != targets.shape() {
        return Err(AutodiffError::Shape(format!(
            "mask logits {:?} do not match targets {:?}",
            g.shape(slow.logits),
            targets.shape()
        )));
    }
    let mut loss = g.bce_with_logits(slow.logits, targets)?;
    if let Some(f) = fast {
        let lf = g.bce_with_logits(f.logits, targets)?;
        loss = g.add(loss, lf)?;
    }
    g.scale(loss, n_sources as f64)
}

/// `L = L_sep + L_contrast`.
pub fn total_loss(g: &mut Graph, sep: Var, contrast: Var) -> Result<Var, AutodiffError> {
    g.add(sep, contrast)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dist_eps_is_exp_minus_nine() {
        assert_eq!(DIST_EPS, (-9.0f64).exp());
    }

    #[test]
    fn embedding_hand_cases() {
        assert_eq!(embedding_contrast(&[0.3, -0.2], &[0.3, -0.2], 1.0, 1.0), 0.0);
        assert_eq!(embedding_contrast(&[2.0, 0.0], &[0.0, 0.0], 0.0, 1.0), 0.0);
        let v = embedding_contrast(&[0.1, 0.4], &[0.1, 0.4], 0.0, 1.0);
        // The quoted figure 0.48895 is this value rounded to five decimals.
        assert!((v - 0.488_95).abs() < 5e-6, "{v}");
        let expect = 0.5 * (1.0 - (-4.5f64).exp()).powi(2);
        assert!((v - expect).abs() < 1e-15);
    }

    #[test]
    fn localization_hand_cases() {
        let f = [0.3, -0.7, 0.2, 0.9];
        assert!((localization_contrast(&[0.0, 0.0], &f, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let big = [40.0, 0.0];
        // Saturation bottoms out at the probability clamp.
        assert!(localization_contrast(&big, &[1.0, 1.0, 0.0, 0.0], 1.0) < 1.1e-12);
    }

    fn graph_terms(em: &[f64], en: &[f64], f: &[f64], labels: &[f64], w: &LossWeights) -> (f64, f64, f64) {
        let b = labels.len();
        let c = em.len() / b;
        let hw = f.len() / (b * c);
        let side = (hw as f64).sqrt() as usize;
        let mut g = Graph::new();
        let em = g.constant(Tensor::new(&[b, c], em.to_vec()).unwrap()).unwrap();
        let en = g.constant(Tensor::new(&[b, c], en.to_vec()).unwrap()).unwrap();
        let fv = g.constant(Tensor::new(&[b, c, side, side], f.to_vec()).unwrap()).unwrap();
        let t = contrast_loss(&mut g, Some(em), Some(en), Some(fv), labels, w).unwrap();
        (g.value(t.total).item(), g.value(t.l_e).item(), g.value(t.l_m).item())
    }

    #[test]
    fn graph_contrast_matches_scalar_references() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (b, c, hw) = (3, 4, 4);
        let em: Vec<f64> = (0..b * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let en: Vec<f64> = (0..b * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f: Vec<f64> = (0..b * c * hw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = [1.0, 0.0, 1.0];
        let w = LossWeights::default();
        let (total, le, lm) = graph_terms(&em, &en, &f, &labels, &w);
        let mut se = 0.0;
        let mut sm = 0.0;
        for i in 0..b {
            se += embedding_contrast(&em[i * c..(i + 1) * c], &en[i * c..(i + 1) * c], labels[i], 1.0);
            sm += localization_contrast(&em[i * c..(i + 1) * c], &f[i * c * hw..(i + 1) * c * hw], labels[i]);
        }
        assert!((le - se / 3.0).abs() < 1e-14);
        assert!((lm - sm / 3.0).abs() < 1e-14);
        assert!((total - (0.1 * se + 0.1 * sm) / 3.0).abs() < 1e-14);
    }

    #[test]
    fn contrast_combination_cases() {
        let e = [0.2, -0.4];
        let f = [0.5, 0.5, 0.5, 0.5, -0.1, 0.2, 0.3, 0.4];
        let w = LossWeights::default();
        let (total, le, lm) = graph_terms(&e, &e, &f, &[1.0], &w);
        assert_eq!(le, 0.0);
        assert!((total - 0.1 * lm).abs() < 1e-16);

        let zero = LossWeights { r1: 0.0, r2: 0.0, margin: 1.0 };
        assert_eq!(graph_terms(&e, &[0.9, 0.1], &f, &[0.0], &zero).0, 0.0);

        // Two pairs: hand mean of the per-pair combinations.
        let em = [0.0, 0.0, 1.0, 0.0];
        let en = [0.0, 0.0, 0.0, 0.0];
        let f2: Vec<f64> = vec![0.0; 16];
        let (total, _, _) = graph_terms(&em, &en, &f2, &[0.0, 1.0], &w);
        let pair0 = 0.1 * 0.5 * (1.0 - DIST_EPS.sqrt()).powi(2) + 0.1 * std::f64::consts::LN_2;
        let pair1 = 0.1 * 0.5 * 1.0 + 0.1 * std::f64::consts::LN_2;
        assert!((total - (pair0 + pair1) / 2.0).abs() < 1e-15);

        let mut g = Graph::new();
        let t = contrast_loss(&mut g, None, None, None, &[], &w).unwrap();
        assert!(t.empty);
        assert_eq!(g.value(t.total).item(), 0.0);
    }

    #[test]
    fn positive_pair_gradient_pulls_together() {
        let em = Tensor::new(&[1, 3], vec![0.4, -0.3, 0.8]).unwrap();
        let en = Tensor::new(&[1, 3], vec![-0.1, 0.2, 0.5]).unwrap();
        let f = |g: &mut Graph, v: &[Var]| {
            let l = embedding_contrast_graph(g, v[0], v[1], &[1.0], 1.0)?;
            g.sum(l)
        };
        let report = check_gradients(f, &[em.clone(), en.clone()], 1e-4, None, 0).unwrap();
        assert!(report.max_rel_error < 1e-6);
        let mut g = Graph::new();
        let a = g.input(em.clone()).unwrap();
        let b = g.input(en.clone()).unwrap();
        let l = f(&mut g, &[a, b]).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(a).unwrap();
        for i in 0..3 {
            assert!((grad.data()[i] - (em.data()[i] - en.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn negative_pair_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let em = Tensor::from_fn(&[2, 3], |_| rng.gen_range(-0.4..0.4));
            let en = Tensor::from_fn(&[2, 3], |_| rng.gen_range(-0.4..0.4));
            let f = |g: &mut Graph, v: &[Var]| {
                let l = embedding_contrast_graph(g, v[0], v[1], &[0.0, 0.0], 1.0)?;
                g.sum(l)
            };
            let report = check_gradients(f, &[em, en], 1e-4, None, 0).unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    fn stream(g: &mut Graph, logits: Tensor) -> StreamOutput {
        let z = g.constant(logits).unwrap();
        StreamOutput { logits: z, mask: z, separated: z }
    }

    #[test]
    fn separation_loss_cases() {
        let targets = Tensor::from_fn(&[4, 1, 2, 3], |i| ((i * 7) % 3 == 0) as u8 as f64);
        let mut g = Graph::new();
        let s = stream(&mut g, Tensor::zeros(&[4, 1, 2, 3]));
        let f = stream(&mut g, Tensor::zeros(&[4, 1, 2, 3]));
        let l = separation_loss(&mut g, &s, Some(&f), &targets, 2).unwrap();
        assert!((g.value(l).item() - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let sat = Tensor::from_fn(&[4, 1, 2, 3], |i| if targets.data()[i] == 1.0 { 50.0 } else { -50.0 });
        let s = stream(&mut g, sat.clone());
        let f = stream(&mut g, sat);
        let l = separation_loss(&mut g, &s, Some(&f), &targets, 2).unwrap();
        assert!(g.value(l).item() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zs = Tensor::from_fn(&[4, 1, 2, 3], |_| rng.gen_range(-4.0..4.0));
        let zf = Tensor::from_fn(&[4, 1, 2, 3], |_| rng.gen_range(-4.0..4.0));
        let s = stream(&mut g, zs.clone());
        let f = stream(&mut g, zf.clone());
        let l = separation_loss(&mut g, &s, Some(&f), &targets, 2).unwrap();
        let direct = 2.0
            * (crate::selftest::reference::bce_logits_direct(zs.data(), targets.data())
                + crate::selftest::reference::bce_logits_direct(zf.data(), targets.data()));
        assert!((g.value(l).item() - direct).abs() < 1e-12);

        let bad = Tensor::zeros(&[4, 1, 2, 2]);
        assert!(separation_loss(&mut g, &s, None, &bad, 2).is_err());
    }

    #[test]
    fn total_loss_adds() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.25)).unwrap();
        let z = g.constant(Tensor::scalar(0.0)).unwrap();
        let t = total_loss(&mut g, z, z).unwrap();
        assert_eq!(g.value(t).item(), 0.0);
        let t = total_loss(&mut g, a, z).unwrap();
        assert_eq!(g.value(t).item(), 1.25);
        let b = g.constant(Tensor::scalar(0.1)).unwrap();
        let t = total_loss(&mut g, a, b).unwrap();
        assert_eq!(g.value(t).item(), 1.25 + 0.1);
    }

    proptest! {
        #[test]
        fn embedding_contrast_symmetric_and_nonnegative(
            a in prop::collection::vec(-2.0f64..2.0, 4),
            b in prop::collection::vec(-2.0f64..2.0, 4),
            y in 0u8..2,
            margin in 0.1f64..3.0,
        ) {
            let y = y as f64;
            let l1 = embedding_contrast(&a, &b, y, margin);
            let l2 = embedding_contrast(&b, &a, y, margin);
            prop_assert_eq!(l1, l2);
            prop_assert!(l1 >= 0.0);
            let dist: f64 = a.iter().zip(&b).map(|(x, z)| (x - z) * (x - z)).sum();
            let zero_expected = if y == 1.0 { dist == 0.0 } else { (dist + DIST_EPS).sqrt() >= margin };
            prop_assert_eq!(l1 == 0.0, zero_expected);
        }

        #[test]
        fn separation_loss_decreases_toward_target(
            z in prop::collection::vec(-6.0f64..6.0, 6),
            t in prop::collection::vec(0u8..2, 6),
            idx in 0usize..6,
            step in 0.01f64..2.0,
        ) {
            let targets = Tensor::new(&[1, 1, 2, 3], t.iter().map(|&b| b as f64).collect()).unwrap();
            let eval = |z: &[f64]| {
                let mut g = Graph::new();
                let s = stream(&mut g, Tensor::new(&[1, 1, 2, 3], z.to_vec()).unwrap());
                let l = separation_loss(&mut g, &s, None, &targets, 1).unwrap();
                g.value(l).item()
            };
            let mut moved = z.clone();
            moved[idx] += if t[idx] == 1 { step } else { -step };
            prop_assert!(eval(&moved) < eval(&z));
        }
    }
}
