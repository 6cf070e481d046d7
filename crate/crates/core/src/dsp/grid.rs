use serde::{Deserialize, Serialize};

use super::DspError;

/// Dense row-major 2-D real array. Rows are frequency bins, columns are
/// time frames wherever a spectrogram is involved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, DspError> {
        if data.len() != rows * cols {
            return Err(DspError::ShapeMismatch {
                expected: (rows, cols),
                found: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn check_same_shape(&self, other: &Grid) -> Result<(), DspError> {
        if self.shape() != other.shape() {
            return Err(DspError::ShapeMismatch {
                expected: self.shape(),
                found: other.shape(),
            });
        }
        Ok(())
    }
}

/// φ(·, α): non-overlapping mean pooling of every `alpha` consecutive columns.
pub fn temporal_downsample(grid: &Grid, alpha: usize) -> Result<Grid, DspError> {
    if alpha == 0 {
        return Err(DspError::InvalidAlpha(alpha));
    }
    if grid.cols % alpha != 0 {
        return Err(DspError::ResolutionMismatch { width: grid.cols, alpha });
    }
    let out_cols = grid.cols / alpha;
    let inv = 1.0 / alpha as f64;
    let mut out = Grid::zeros(grid.rows, out_cols);
    for r in 0..grid.rows {
        let row = &grid.data[r * grid.cols..(r + 1) * grid.cols];
        for (j, chunk) in row.chunks_exact(alpha).enumerate() {
            out.data[r * out_cols + j] = pairwise_sum(chunk) * inv;
        }
    }
    Ok(out)
}

// Tree summation: for power-of-two alpha the mean of repeated values is exact,
// so φ(φ⁻¹(x, α), α) reproduces x bit for bit.
fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// φ⁻¹(·, α): nearest-neighbour repetition of every column `alpha` times.
pub fn temporal_upsample(grid: &Grid, alpha: usize) -> Result<Grid, DspError> {
    if alpha == 0 {
        return Err(DspError::InvalidAlpha(alpha));
    }
    let out_cols = grid.cols * alpha;
    let mut data = Vec::with_capacity(grid.rows * out_cols);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let v = grid.get(r, c);
            data.extend(std::iter::repeat(v).take(alpha));
        }
    }
    Ok(Grid { rows: grid.rows, cols: out_cols, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn downsample_pairwise_means() {
        let g = Grid::from_vec(1, 8, vec![1., 3., 5., 7., 2., 4., 6., 8.]).unwrap();
        let d = temporal_downsample(&g, 2).unwrap();
        assert_eq!(d.data(), &[2., 6., 3., 7.]);
    }

    #[test]
    fn alpha_one_is_identity() {
        let g = Grid::from_fn(3, 5, |r, c| (r * 7 + c) as f64 * 0.37);
        assert_eq!(temporal_downsample(&g, 1).unwrap(), g);
        assert_eq!(temporal_upsample(&g, 1).unwrap(), g);
    }

    #[test]
    fn downsample_matches_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let g = Grid::from_fn(4, 16, |_, _| rng.gen_range(-1.0..1.0));
        let d = temporal_downsample(&g, 4).unwrap();
        for r in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += g.get(r, j * 4 + k);
                }
                assert!((d.get(r, j) - acc * 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn downsample_rejects_indivisible_width() {
        let g = Grid::zeros(2, 6);
        assert!(matches!(
            temporal_downsample(&g, 4),
            Err(DspError::ResolutionMismatch { width: 6, alpha: 4 })
        ));
    }

    #[test]
    fn upsample_repeats_columns() {
        let g = Grid::from_vec(1, 2, vec![2., 6.]).unwrap();
        assert_eq!(temporal_upsample(&g, 2).unwrap().data(), &[2., 2., 6., 6.]);
        assert!(temporal_upsample(&g, 0).is_err());
    }

    proptest! {
        #[test]
        fn down_after_up_is_exact_for_powers_of_two(
            vals in proptest::collection::vec(-10.0f64..10.0, 12),
            alpha in prop::sample::select(vec![1usize, 2, 4, 8, 16]),
        ) {
            let g = Grid::from_vec(3, 4, vals).unwrap();
            let back = temporal_downsample(&temporal_upsample(&g, alpha).unwrap(), alpha).unwrap();
            prop_assert_eq!(back, g);
        }

        #[test]
        fn down_after_up_is_identity(
            vals in proptest::collection::vec(-10.0f64..10.0, 12),
            alpha in 1usize..6,
        ) {
            let g = Grid::from_vec(3, 4, vals).unwrap();
            let back = temporal_downsample(&temporal_upsample(&g, alpha).unwrap(), alpha).unwrap();
            // Mean of alpha identical values is exact only up to one rounding.
            for (a, b) in back.data().iter().zip(g.data()) {
                prop_assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0));
            }
        }

        #[test]
        fn downsample_preserves_row_mean(
            vals in proptest::collection::vec(-10.0f64..10.0, 32),
            alpha in prop::sample::select(vec![1usize, 2, 4, 8]),
        ) {
            let g = Grid::from_vec(2, 16, vals).unwrap();
            let d = temporal_downsample(&g, alpha).unwrap();
            for r in 0..2 {
                let m0: f64 = (0..16).map(|c| g.get(r, c)).sum::<f64>() / 16.0;
                let m1: f64 = (0..d.cols()).map(|c| d.get(r, c)).sum::<f64>() / d.cols() as f64;
                prop_assert!((m0 - m1).abs() < 1e-12);
            }
        }
    }
}
