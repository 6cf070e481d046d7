use rustfft::num_complex::Complex64;

use super::{ComplexSpectrogram, DspError, Grid, MagnitudeSpectrogram};

/// Indicator grid marking where one source dominates the mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    bits: Grid,
    source_index: usize,
}

impl BinaryMask {
    pub fn bits(&self) -> &Grid {
        &self.bits
    }

    pub fn source_index(&self) -> usize {
        self.source_index
    }

    pub fn shape(&self) -> (usize, usize) {
        self.bits.shape()
    }
}

/// Bit (f, t) is set iff source `n` is at least as loud as every other
/// source there. Exact ties set the bit for every tied source.
pub fn ideal_binary_mask(mags: &[MagnitudeSpectrogram], n: usize) -> Result<BinaryMask, DspError> {
    if mags.is_empty() {
        return Err(DspError::NoSources);
    }
    if n >= mags.len() {
        return Err(DspError::SourceIndex { index: n, count: mags.len() });
    }
    let target = mags[n].grid();
    for m in mags {
        target.check_same_shape(m.grid())?;
    }
    let (rows, cols) = target.shape();
    let bits = Grid::from_fn(rows, cols, |f, t| {
        let x = target.get(f, t);
        let dominant = mags.iter().all(|m| x >= m.grid().get(f, t));
        if dominant {
            1.0
        } else {
            0.0
        }
    });
    Ok(BinaryMask { bits, source_index: n })
}

pub fn ideal_binary_masks(mags: &[MagnitudeSpectrogram]) -> Result<Vec<BinaryMask>, DspError> {
    (0..mags.len()).map(|n| ideal_binary_mask(mags, n)).collect()
}

/// Scales the mixture magnitude by the mask in every bin and keeps the
/// mixture phase.
pub fn apply_mask(mask: &Grid, mixture: &ComplexSpectrogram) -> Result<ComplexSpectrogram, DspError> {
    if mask.shape() != mixture.shape() {
        return Err(DspError::ShapeMismatch { expected: mixture.shape(), found: mask.shape() });
    }
    if mask.data().iter().any(|&m| !(0.0..=1.0).contains(&m)) {
        return Err(DspError::MaskOutOfRange);
    }
    let (h, w) = mixture.shape();
    let bins: Vec<Complex64> = mixture
        .bins()
        .iter()
        .zip(mask.data())
        .map(|(c, &m)| c * m)
        .collect();
    ComplexSpectrogram::from_bins(h, w, bins, mixture.framing())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::Framing;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn framing() -> Framing {
        Framing::new(2, 1, 8000).unwrap()
    }

    fn mag(rows: usize, cols: usize, v: Vec<f64>) -> MagnitudeSpectrogram {
        let f = Framing::new((rows - 1) * 2, 1, 8000).unwrap();
        MagnitudeSpectrogram::new(Grid::from_vec(rows, cols, v).unwrap(), f).unwrap()
    }

    #[test]
    fn per_bin_comparison() {
        let a = mag(2, 2, vec![2., 0., 0., 2.]);
        let b = mag(2, 2, vec![1., 1., 1., 1.]);
        let m = ideal_binary_mask(&[a, b], 0).unwrap();
        assert_eq!(m.bits().data(), &[1., 0., 0., 1.]);
        assert_eq!(m.source_index(), 0);
    }

    #[test]
    fn identical_sources_all_ones() {
        let a = mag(2, 3, vec![0.5, 1., 2., 0., 3., 1.]);
        for m in ideal_binary_masks(&[a.clone(), a.clone(), a]).unwrap() {
            assert!(m.bits().data().iter().all(|&b| b == 1.0));
        }
    }

    #[test]
    fn brute_force_argmax_with_ties() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        // Values drawn from a tiny set so ties actually occur.
        let srcs: Vec<MagnitudeSpectrogram> = (0..3)
            .map(|_| mag(8, 8, (0..64).map(|_| rng.gen_range(0..4) as f64).collect()))
            .collect();
        let masks = ideal_binary_masks(&srcs).unwrap();
        for f in 0..8 {
            for t in 0..8 {
                let vals: Vec<f64> = srcs.iter().map(|s| s.grid().get(f, t)).collect();
                let max = vals.iter().cloned().fold(f64::MIN, f64::max);
                for n in 0..3 {
                    let expected = if vals[n] == max { 1.0 } else { 0.0 };
                    assert_eq!(masks[n].bits().get(f, t), expected);
                }
            }
        }
    }

    #[test]
    fn mask_errors() {
        let a = mag(2, 2, vec![0.; 4]);
        let b = mag(3, 2, vec![0.; 6]);
        assert!(ideal_binary_mask(&[a.clone(), b], 0).is_err());
        assert!(matches!(
            ideal_binary_mask(&[a], 1),
            Err(DspError::SourceIndex { index: 1, count: 1 })
        ));
    }

    fn random_spec(rng: &mut impl Rng, frames: usize) -> ComplexSpectrogram {
        let bins = (0..2 * frames)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        ComplexSpectrogram::from_bins(2, frames, bins, framing()).unwrap()
    }

    #[test]
    fn apply_mask_cases() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = random_spec(&mut rng, 5);
        assert_eq!(apply_mask(&Grid::filled(2, 5, 1.0), &x).unwrap(), x);
        let silent = apply_mask(&Grid::zeros(2, 5), &x).unwrap();
        assert!(silent.bins().iter().all(|c| c.norm() == 0.0));

        let soft = Grid::from_fn(2, 5, |_, _| rng.gen_range(0.0..1.0));
        let y = apply_mask(&soft, &x).unwrap();
        for f in 0..2 {
            for t in 0..5 {
                let expected = x.get(f, t) * soft.get(f, t);
                assert_eq!(y.get(f, t), expected);
                if soft.get(f, t) > 0.0 {
                    // Phase is the mixture's.
                    assert!((y.get(f, t).arg() - x.get(f, t).arg()).abs() < 1e-12);
                }
            }
        }
        assert!(apply_mask(&Grid::zeros(3, 5), &x).is_err());
        assert_eq!(apply_mask(&Grid::filled(2, 5, 1.5), &x), Err(DspError::MaskOutOfRange));
    }

    proptest! {
        #[test]
        fn masks_partition_without_ties(seed in 0u64..1000, n in 2usize..5) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let srcs: Vec<MagnitudeSpectrogram> = (0..n)
                .map(|_| mag(5, 6, (0..30).map(|_| rng.gen_range(0.0..1.0)).collect()))
                .collect();
            let masks = ideal_binary_masks(&srcs).unwrap();
            for i in 0..30 {
                let total: f64 = masks.iter().map(|m| m.bits().data()[i]).sum();
                prop_assert_eq!(total, 1.0);
            }
        }

        #[test]
        fn masking_is_monotone(seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = random_spec(&mut rng, 4);
            let lo = Grid::from_fn(2, 4, |_, _| rng.gen_range(0.0..0.5));
            let hi = Grid::from_fn(2, 4, |r, c| (lo.get(r, c) + rng.gen_range(0.0..0.5)).min(1.0));
            let a = apply_mask(&lo, &x).unwrap();
            let b = apply_mask(&hi, &x).unwrap();
            for (p, q) in a.bins().iter().zip(b.bins()) {
                prop_assert!(p.norm() <= q.norm());
            }
        }
    }
}
