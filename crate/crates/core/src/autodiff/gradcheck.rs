use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Graph, Tensor, Var};

/// Denominator floor of [`relative_error`]; below it the comparison is
/// effectively absolute.
const REL_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (input index, flat coordinate, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// finite differences `(f(p + eps) − f(p − eps)) / 2eps`.
///
/// `max_coords` caps how many coordinates per input are probed (sampled with
/// `seed`); `None` probes all of them.
pub fn check_gradients<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |ts: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let vars = ts.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>, _>>()?;
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < t.len() => sample(&mut rng, t.len(), m).into_vec(),
            _ => (0..t.len()).collect(),
        };
        for i in coords {
            let orig = t.data()[i];
            probe[ti].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[ti].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[ti].data()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ti, i, a, numeric));
            }
        }
    }
    Ok(report)
}
