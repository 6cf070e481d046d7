//! Brute-force loop implementations used as independent oracles.
//!
//! Nothing here shares code with the graph kernels: every routine is a
//! direct transcription of the defining sum, and the convolution routines
//! count one multiply-accumulate per innermost iteration (padding taps
//! included) so they double as instrumented cost oracles.

use crate::autodiff::Tensor;

/// Counts every multiply-accumulate executed by the loop oracles.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MacCounter(pub u64);

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

/// Cross-correlation, weight `O×I×K×K`.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
    dilation: usize,
    macs: &mut MacCounter,
) -> Tensor {
    let (n, c, h, wd) = dims4(x);
    let (o, _, k, _) = dims4(w);
    let oh = (h + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for bi in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                macs.0 += 1;
                                let iy = (y * stride + ky * dilation) as isize - pad as isize;
                                let ix = (xx * stride + kx * dilation) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * c + ic) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data_mut()[((bi * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

/// Transposed convolution by scatter-accumulate, weight `I×O×K×K`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
    macs: &mut MacCounter,
) -> Tensor {
    let (n, c, h, wd) = dims4(x);
    let (_, o, k, _) = dims4(w);
    let full_h = (h - 1) * stride + k;
    let full_w = (wd - 1) * stride + k;
    let mut full = vec![0.0; n * o * full_h * full_w];
    for bi in 0..n {
        for ic in 0..c {
            for y in 0..h {
                for xx in 0..wd {
                    let xv = x.data()[((bi * c + ic) * h + y) * wd + xx];
                    for oc in 0..o {
                        for ky in 0..k {
                            for kx in 0..k {
                                macs.0 += 1;
                                let wv = w.data()[((ic * o + oc) * k + ky) * k + kx];
                                full[((bi * o + oc) * full_h + y * stride + ky) * full_w + xx * stride + kx] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    let (oh, ow) = (full_h - 2 * pad, full_w - 2 * pad);
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for bi in 0..n {
        for oc in 0..o {
            let bias = b.map_or(0.0, |b| b.data()[oc]);
            for y in 0..oh {
                for xx in 0..ow {
                    out.data_mut()[((bi * o + oc) * oh + y) * ow + xx] =
                        full[((bi * o + oc) * full_h + y + pad) * full_w + xx + pad] + bias;
                }
            }
        }
    }
    out
}

/// Training-mode batch norm from two-pass statistics.
pub fn batchnorm_train(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = dims4(x);
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        for bi in 0..n {
            for i in 0..h * w {
                mean[ch] += x.data()[(bi * c + ch) * h * w + i];
            }
        }
        mean[ch] /= count;
        for bi in 0..n {
            for i in 0..h * w {
                let d = x.data()[(bi * c + ch) * h * w + i] - mean[ch];
                var[ch] += d * d;
            }
        }
        var[ch] /= count;
    }
    let mut out = x.clone();
    for bi in 0..n {
        for ch in 0..c {
            for i in 0..h * w {
                let idx = (bi * c + ch) * h * w + i;
                out.data_mut()[idx] = gamma[ch] * (x.data()[idx] - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch];
            }
        }
    }
    (out, mean, var)
}

pub fn max_pool2d(x: &Tensor, k: usize, stride: usize) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        m = m.max(x.data()[p * h * w + (y * stride + ky) * w + xx * stride + kx]);
                    }
                }
                out.data_mut()[(p * oh + y) * ow + xx] = m;
            }
        }
    }
    out
}

pub fn spatial_mean(x: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let mut out = Tensor::zeros(&[n, c]);
    for p in 0..n * c {
        let mut s = 0.0;
        for i in 0..h * w {
            s += x.data()[p * h * w + i];
        }
        out.data_mut()[p] = s / (h * w) as f64;
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor, macs: &mut MacCounter) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                macs.0 += 1;
                s += a.data()[i * k + l] * b.data()[l * n + j];
            }
            out.data_mut()[i * n + j] = s;
        }
    }
    out
}

/// out_i(h, w) = Σ_j e_i e_j F_j(h, w) for one item (`e`: C, `f`: C×H×W).
pub fn avga(e: &[f64], f: &[f64], h: usize, w: usize, macs: &mut MacCounter) -> Vec<f64> {
    let c = e.len();
    let mut out = vec![0.0; c * h * w];
    // Outer product first, then channel mixing; both counted.
    let mut a = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            macs.0 += 1;
            a[i * c + j] = e[i] * e[j];
        }
    }
    for i in 0..c {
        for p in 0..h * w {
            let mut s = 0.0;
            for j in 0..c {
                macs.0 += 1;
                s += a[i * c + j] * f[j * h * w + p];
            }
            out[i * h * w + p] = s;
        }
    }
    out
}

/// Per-position σ(⟨e, f(·, h, w)⟩) map for one item.
pub fn localization(e: &[f64], f: &[f64], h: usize, w: usize) -> Vec<f64> {
    let c = e.len();
    (0..h * w)
        .map(|p| {
            let mut s = 0.0;
            for j in 0..c {
                s += e[j] * f[j * h * w + p];
            }
            1.0 / (1.0 + (-s).exp())
        })
        .collect()
}

/// Direct −[t ln σ(z) + (1 − t) ln(1 − σ(z))], averaged; accurate for
/// moderate logits only.
pub fn bce_logits_direct(z: &[f64], t: &[f64]) -> f64 {
    let s: f64 = z
        .iter()
        .zip(t)
        .map(|(&z, &t)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    s / z.len() as f64
}

/// O(N²) DFT magnitudes of one real frame, bins 0..=N/2.
pub fn dft_magnitudes(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &x) in frame.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * ((k * i) % n) as f64 / n as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}
