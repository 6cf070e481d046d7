//! Projection-based BSS-eval: SDR, SIR and SAR.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::Waveform;

pub const CAP_DB: f64 = 100.0;
const CAP_RATIO: f64 = 1e-20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("degenerate reference: target reference {0} has zero energy")]
    DegenerateReference(usize),
    #[error("references are linearly dependent")]
    DependentReferences,
    #[error("length mismatch: estimate has {estimate} samples, reference {index} has {reference}")]
    LengthMismatch { estimate: usize, reference: usize, index: usize },
    #[error("sample rate mismatch")]
    SampleRateMismatch,
    #[error("target index {index} out of range for {count} references")]
    TargetIndex { index: usize, count: usize },
    #[error("no references")]
    NoReferences,
    #[error("cannot aggregate an empty score list")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
    /// Set when any of the three ratios hit the ±100 dB cap.
    pub capped: bool,
    pub sdr_capped: bool,
    pub sir_capped: bool,
    pub sar_capped: bool,
}

/// The three orthogonal components of an estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn energy(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `10·log10(num/den)`, capped to ±100 dB. The flag reports a cap.
fn ratio_db(num: f64, den: f64) -> (f64, bool) {
    if den < CAP_RATIO * num {
        return (CAP_DB, true);
    }
    if num <= 0.0 {
        return (-CAP_DB, true);
    }
    let db = 10.0 * (num / den).log10();
    if db > CAP_DB {
        (CAP_DB, true)
    } else if db < -CAP_DB {
        (-CAP_DB, true)
    } else {
        (db, false)
    }
}

pub fn decompose(estimate: &[f64], references: &[&[f64]], target: usize) -> Result<Decomposition, MetricsError> {
    if references.is_empty() {
        return Err(MetricsError::NoReferences);
    }
    if target >= references.len() {
        return Err(MetricsError::TargetIndex { index: target, count: references.len() });
    }
    for (i, r) in references.iter().enumerate() {
        if r.len() != estimate.len() {
            return Err(MetricsError::LengthMismatch { estimate: estimate.len(), reference: r.len(), index: i });
        }
    }
    let st = references[target];
    let e_t = energy(st);
    if e_t == 0.0 {
        return Err(MetricsError::DegenerateReference(target));
    }
    let coef = dot(estimate, st) / e_t;
    let s_target: Vec<f64> = st.iter().map(|v| coef * v).collect();

    let n = references.len();
    let gram = DMatrix::from_fn(n, n, |i, j| dot(references[i], references[j]));
    let rhs = DVector::from_fn(n, |i, _| dot(references[i], estimate));
    let chol = gram.cholesky().ok_or(MetricsError::DependentReferences)?;
    let c = chol.solve(&rhs);
    let mut proj = vec![0.0; estimate.len()];
    for (i, r) in references.iter().enumerate() {
        for (p, v) in proj.iter_mut().zip(r.iter()) {
            *p += c[i] * v;
        }
    }
    let e_interf: Vec<f64> = proj.iter().zip(&s_target).map(|(p, s)| p - s).collect();
    let e_artif: Vec<f64> = estimate.iter().zip(&proj).map(|(e, p)| e - p).collect();
    Ok(Decomposition { s_target, e_interf, e_artif })
}

pub fn bss_eval_samples(estimate: &[f64], references: &[&[f64]], target: usize) -> Result<EvalScores, MetricsError> {
    let d = decompose(estimate, references, target)?;
    let t = energy(&d.s_target);
    let interf = energy(&d.e_interf);
    let artif = energy(&d.e_artif);
    let distortion: f64 = d.e_interf.iter().zip(&d.e_artif).map(|(a, b)| (a + b) * (a + b)).sum();
    let signal: f64 = d.s_target.iter().zip(&d.e_interf).map(|(a, b)| (a + b) * (a + b)).sum();
    let (sdr, sdr_capped) = ratio_db(t, distortion);
    let (sir, sir_capped) = ratio_db(t, interf);
    let (sar, sar_capped) = ratio_db(signal, artif);
    Ok(EvalScores { sdr, sir, sar, capped: sdr_capped || sir_capped || sar_capped, sdr_capped, sir_capped, sar_capped })
}

pub fn bss_eval(estimate: &Waveform, references: &[Waveform], target: usize) -> Result<EvalScores, MetricsError> {
    if references.iter().any(|r| r.sample_rate() != estimate.sample_rate()) {
        return Err(MetricsError::SampleRateMismatch);
    }
    let refs: Vec<&[f64]> = references.iter().map(|r| r.samples()).collect();
    bss_eval_samples(estimate.samples(), &refs, target)
}

/// Per-metric means over uncapped entries, with cap counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    /// `None` when every entry for that metric was capped.
    pub sdr: Option<f64>,
    pub sir: Option<f64>,
    pub sar: Option<f64>,
    pub sdr_capped: usize,
    pub sir_capped: usize,
    pub sar_capped: usize,
}

pub fn aggregate(scores: &[EvalScores]) -> Result<ScoreSummary, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mean = |f: fn(&EvalScores) -> (f64, bool)| {
        let vals: Vec<f64> = scores.iter().map(f).filter(|(_, c)| !c).map(|(v, _)| v).collect();
        let capped = scores.len() - vals.len();
        let m = if vals.is_empty() { None } else { Some(vals.iter().sum::<f64>() / vals.len() as f64) };
        (m, capped)
    };
    let (sdr, sdr_capped) = mean(|s| (s.sdr, s.sdr_capped));
    let (sir, sir_capped) = mean(|s| (s.sir, s.sir_capped));
    let (sar, sar_capped) = mean(|s| (s.sar, s.sar_capped));
    Ok(ScoreSummary { count: scores.len(), sdr, sir, sar, sdr_capped, sir_capped, sar_capped })
}
