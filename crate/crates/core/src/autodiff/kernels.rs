// Dense kernels behind the convolution ops: im2col/col2im lowering onto a
// single-threaded dgemm.

/// Geometry shared by an image and its column matrix: the image is
/// `channels × ih × iw`, the column grid `oh × ow`, and column (c, kh, kw, y, x)
/// reads image pixel (y·stride + kh·dilation − pad, x·stride + kw·dilation − pad).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Patch {
    pub channels: usize,
    pub ih: usize,
    pub iw: usize,
    pub oh: usize,
    pub ow: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Patch {
    pub fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    #[inline]
    fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + kk * self.dilation) as isize - self.pad as isize;
        if p >= 0 && (p as usize) < extent {
            Some(p as usize)
        } else {
            None
        }
    }
}

pub(crate) fn im2col(img: &[f64], g: &Patch, cols: &mut [f64]) {
    let n = g.cols();
    for c in 0..g.channels {
        let plane = &img[c * g.ih * g.iw..(c + 1) * g.ih * g.iw];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (c * g.k + kh) * g.k + kw;
                let dst = &mut cols[row * n..(row + 1) * n];
                for y in 0..g.oh {
                    let line = &mut dst[y * g.ow..(y + 1) * g.ow];
                    match g.src(y, kh, g.ih) {
                        None => line.fill(0.0),
                        Some(sy) => {
                            for (x, slot) in line.iter_mut().enumerate() {
                                *slot = match g.src(x, kw, g.iw) {
                                    Some(sx) => plane[sy * g.iw + sx],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatters columns back onto the image, accumulating.
pub(crate) fn col2im(cols: &[f64], g: &Patch, img: &mut [f64]) {
    let n = g.cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.ih * g.iw..(c + 1) * g.ih * g.iw];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (c * g.k + kh) * g.k + kw;
                let src = &cols[row * n..(row + 1) * n];
                for y in 0..g.oh {
                    let Some(sy) = g.src(y, kh, g.ih) else { continue };
                    for x in 0..g.ow {
                        if let Some(sx) = g.src(x, kw, g.iw) {
                            plane[sy * g.iw + sx] += src[y * g.ow + x];
                        }
                    }
                }
            }
        }
    }
}

/// `c = op(a)·op(b) + beta·c` with `op(a)` of shape m×k and `op(b)` k×n,
/// all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index dgemm touches given the
    // row/column strides of dense row-major operands.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]] (2×3), b = [[1,0],[0,1],[1,1]] (3×2)
        let a = [1., 2., 3., 4., 5., 6.];
        let b = [1., 0., 0., 1., 1., 1.];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4., 5., 10., 11.]);
        // aᵀ stored as 3×2
        let at = [1., 4., 2., 5., 3., 6.];
        let bt = [1., 0., 1., 0., 1., 1.];
        let mut d = [1.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, 1.0, &mut d);
        assert_eq!(d, [5., 6., 11., 12.]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = Patch { channels: 2, ih: 5, iw: 4, oh: 3, ow: 2, k: 3, stride: 2, pad: 1, dilation: 1 };
        let img: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols_in: Vec<f64> = (0..g.rows() * g.cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; g.rows() * g.cols()];
        im2col(&img, &g, &mut cols);
        let mut back = vec![0.0; 40];
        col2im(&cols_in, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&cols_in).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
