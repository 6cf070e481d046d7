use super::kernels::{col2im, gemm, im2col, Patch};
use super::{AutodiffError, ParamId, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        Self { stride, pad, dilation }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self { stride: 1, pad: 0, dilation: 1 }
    }
}

/// Per-channel statistics of a training-mode batch norm, returned so the
/// owning layer can fold them into its running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalisation.
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

impl BatchStats {
    /// Running-average update with the unbiased variance estimate.
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64]) {
        let unbias = if self.count > 1 { self.count as f64 / (self.count - 1) as f64 } else { 1.0 };
        for c in 0..self.mean.len() {
            running_mean[c] = (1.0 - BN_MOMENTUM) * running_mean[c] + BN_MOMENTUM * self.mean[c];
            running_var[c] = (1.0 - BN_MOMENTUM) * running_var[c] + BN_MOMENTUM * self.var[c] * unbias;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Conv,
    Transposed,
}

/// Record of one convolution executed in a graph, for cost auditing.
#[derive(Debug, Clone)]
pub struct ConvRecord {
    pub kind: ConvKind,
    pub input: Var,
    pub weight: Var,
    pub bias: Option<Var>,
    pub output: Var,
    pub spec: ConvSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProductKind {
    MatMul,
    Outer,
}

/// Record of one matrix or outer product executed in a graph.
#[derive(Debug, Clone)]
pub struct ProductRecord {
    pub kind: ProductKind,
    pub a: Var,
    pub b: Var,
    pub output: Var,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    ConvT2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid { x: Var },
    Log1p { x: Var },
    Sqrt { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    SpatialAvgPool { x: Var },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Outer { u: Var, v: Var },
    Concat { xs: Vec<Var>, outer: usize, chunks: Vec<usize> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    Sum { x: Var },
    Reshape { x: Var },
    Select { x: Var, index: usize },
    TemporalDown { x: Var, alpha: usize },
    TemporalUp { x: Var, alpha: usize },
    BceLogits { z: Var, targets: Vec<f64> },
    BceProb { p: Var, targets: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Tape of operations in creation (hence topological) order.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    convs: Vec<ConvRecord>,
    products: Vec<ProductRecord>,
}

fn shape_err(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Shape(msg.into())
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pairwise sum; exact for the mean of 2^k equal values.
fn tree_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => {
            let (a, b) = xs.split_at(n / 2);
            tree_sum(a) + tree_sum(b)
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite(op_name(&op)));
        }
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input that gradients are not tracked for.
    pub fn constant(&mut self, t: Tensor) -> Result<Var, AutodiffError> {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is tracked (used by gradient checks).
    pub fn input(&mut self, t: Tensor) -> Result<Var, AutodiffError> {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Result<Var, AutodiffError> {
        self.push(value.clone(), Op::Param(id), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last `backward`, if the node was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        n.grad.as_ref().map(|g| Tensor::new(n.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Gradients reaching parameter leaves, in creation order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().filter_map(|n| match (&n.op, &n.grad) {
            (Op::Param(id), Some(g)) => Some((*id, g.as_slice())),
            _ => None,
        })
    }

    pub fn conv_records(&self) -> &[ConvRecord] {
        &self.convs
    }

    pub fn product_records(&self) -> &[ProductRecord] {
        &self.products
    }

    // ----- layer primitives -------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var, AutodiffError> {
        let (n, c, h, wd) = self.value(x).dims4("conv2d input")?;
        let ws = self.value(w).shape().to_vec();
        let [o, i, k, k2] = ws[..] else {
            return Err(shape_err(format!("conv2d weight must be OIKK, got {ws:?}")));
        };
        if k != k2 || i != c {
            return Err(shape_err(format!("conv2d weight {ws:?} does not fit input channels {c}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err(format!("conv2d bias {:?} must be [{o}]", self.shape(b))));
            }
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(shape_err("conv2d stride and dilation must be positive"));
        }
        let span = spec.dilation * (k - 1) + 1;
        if h + 2 * spec.pad < span || wd + 2 * spec.pad < span {
            return Err(shape_err(format!(
                "conv2d output extent not positive for input {h}x{wd}, kernel {k}, pad {}, dilation {}",
                spec.pad, spec.dilation
            )));
        }
        let oh = (h + 2 * spec.pad - span) / spec.stride + 1;
        let ow = (wd + 2 * spec.pad - span) / spec.stride + 1;
        let g = Patch { channels: c, ih: h, iw: wd, oh, ow, k, stride: spec.stride, pad: spec.pad, dilation: spec.dilation };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * o * oh * ow];
        let mut cols = vec![0.0; g.rows() * g.cols()];
        for bi in 0..n {
            im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], &g, &mut cols);
            let dst = &mut out[bi * o * oh * ow..(bi + 1) * o * oh * ow];
            gemm(o, g.rows(), g.cols(), wv, false, &cols, false, 0.0, dst);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, o, oh * ow);
        }
        let rg = self.rg(&[x, w]) || b.map_or(false, |b| self.rg(&[b]));
        let value = Tensor::new(&[n, o, oh, ow], out)?;
        let out = self.push(value, Op::Conv2d { x, w, b, spec }, rg)?;
        self.convs.push(ConvRecord { kind: ConvKind::Conv, input: x, weight: w, bias: b, output: out, spec });
        Ok(out)
    }

    /// Transposed convolution; weight layout is `in × out × k × k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, AutodiffError> {
        let (n, c, h, wd) = self.value(x).dims4("conv_transpose2d input")?;
        let ws = self.value(w).shape().to_vec();
        let [i, o, k, k2] = ws[..] else {
            return Err(shape_err(format!("conv_transpose2d weight must be IOKK, got {ws:?}")));
        };
        if k != k2 || i != c {
            return Err(shape_err(format!("conv_transpose2d weight {ws:?} does not fit input channels {c}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err(format!("conv_transpose2d bias must be [{o}]")));
            }
        }
        if stride == 0 {
            return Err(shape_err("conv_transpose2d stride must be positive"));
        }
        let full_h = (h - 1) * stride + k;
        let full_w = (wd - 1) * stride + k;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(shape_err("conv_transpose2d output extent not positive"));
        }
        let oh = full_h - 2 * pad;
        let ow = full_w - 2 * pad;
        let g = Patch { channels: o, ih: oh, iw: ow, oh: h, ow: wd, k, stride, pad, dilation: 1 };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * o * oh * ow];
        let mut cols = vec![0.0; g.rows() * g.cols()];
        for bi in 0..n {
            let src = &xv[bi * c * h * wd..(bi + 1) * c * h * wd];
            gemm(g.rows(), c, g.cols(), wv, true, src, false, 0.0, &mut cols);
            col2im(&cols, &g, &mut out[bi * o * oh * ow..(bi + 1) * o * oh * ow]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, o, oh * ow);
        }
        let rg = self.rg(&[x, w]) || b.map_or(false, |b| self.rg(&[b]));
        let value = Tensor::new(&[n, o, oh, ow], out)?;
        let out = self.push(value, Op::ConvT2d { x, w, b, stride, pad }, rg)?;
        let spec = ConvSpec { stride, pad, dilation: 1 };
        self.convs.push(ConvRecord { kind: ConvKind::Transposed, input: x, weight: w, bias: b, output: out, spec });
        Ok(out)
    }

    /// Batch norm with batch statistics; returns the statistics as well.
    pub fn batchnorm2d_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats), AutodiffError> {
        let (n, c, h, w) = self.value(x).dims4("batchnorm2d")?;
        self.check_channel_param(gamma, c)?;
        self.check_channel_param(beta, c)?;
        let hw = h * w;
        let count = n * hw;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..n {
                s += xv[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().sum::<f64>();
            }
            let m = s / count as f64;
            let mut v = 0.0;
            for bi in 0..n {
                v += xv[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = v / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (value, xhat) = self.affine_normalize(x, gamma, beta, &mean, &inv_std)?;
        let rg = self.rg(&[x, gamma, beta]);
        let out = self.push(value, Op::BatchNormTrain { x, gamma, beta, xhat, inv_std }, rg)?;
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batchnorm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var, AutodiffError> {
        let (_, c, _, _) = self.value(x).dims4("batchnorm2d")?;
        self.check_channel_param(gamma, c)?;
        self.check_channel_param(beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err(format!("running statistics must have {c} channels")));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (value, xhat) = self.affine_normalize(x, gamma, beta, running_mean, &inv_std)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(value, Op::BatchNormEval { x, gamma, beta, xhat, inv_std }, rg)
    }

    fn check_channel_param(&self, p: Var, c: usize) -> Result<(), AutodiffError> {
        if self.shape(p) != [c] {
            return Err(shape_err(format!(
                "batchnorm parameter {:?} does not match {c} channels",
                self.shape(p)
            )));
        }
        Ok(())
    }

    fn affine_normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> Result<(Tensor, Vec<f64>), AutodiffError> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4("batchnorm2d")?;
        let hw = h * w;
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xt.len()];
        let mut out = vec![0.0; xt.len()];
        for bi in 0..n {
            for ch in 0..c {
                for i in (bi * c + ch) * hw..(bi * c + ch + 1) * hw {
                    let xh = (xt.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        Ok((Tensor::new(&[n, c, h, w], out)?, xhat))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let value = Tensor::new(t.shape(), data)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let value = Tensor::new(t.shape(), t.data().iter().map(|&v| sigmoid_scalar(v)).collect())?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    /// `ln(1 + x)`, defined for `x > -1`.
    pub fn log1p(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        if t.data().iter().any(|&v| v <= -1.0) {
            return Err(AutodiffError::Domain("log1p argument must exceed -1"));
        }
        let value = Tensor::new(t.shape(), t.data().iter().map(|v| v.ln_1p()).collect())?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Log1p { x }, rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        if t.data().iter().any(|&v| v <= 0.0) {
            return Err(AutodiffError::Domain("sqrt argument must be positive"));
        }
        let value = Tensor::new(t.shape(), t.data().iter().map(|v| v.sqrt()).collect())?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Sqrt { x }, rg)
    }

    /// Windowed maximum; the gradient goes to the first (row-major) maximum
    /// of each window.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var, AutodiffError> {
        let (n, c, h, w) = self.value(x).dims4("max_pool2d")?;
        if k == 0 || stride == 0 || k > h || k > w {
            return Err(shape_err(format!("max_pool2d window {k} exceeds extent {h}x{w}")));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + y * stride * w + xx * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = base + (y * stride + ky) * w + xx * stride + kx;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::MaxPool { x, argmax }, rg)
    }

    /// Mean over all spatial positions: NCHW → NC.
    pub fn spatial_avg_pool(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (n, c, h, w) = self.value(x).dims4("spatial_avg_pool")?;
        let hw = h * w;
        let xv = self.value(x).data();
        let out = (0..n * c).map(|p| xv[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        let value = Tensor::new(&[n, c], out)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::SpatialAvgPool { x }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[m, k], &[k2, n]) = (&sa[..], &sb[..]) else {
            return Err(shape_err(format!("matmul needs matrices, got {sa:?} and {sb:?}")));
        };
        if k != k2 {
            return Err(shape_err(format!("matmul inner dimensions differ: {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let value = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        let out = self.push(value, Op::MatMul { a, b, m, k, n }, rg)?;
        self.products.push(ProductRecord { kind: ProductKind::MatMul, a, b, output: out });
        Ok(out)
    }

    /// `u vᵀ` for vectors of any shape (treated as flat).
    pub fn outer(&mut self, u: Var, v: Var) -> Result<Var, AutodiffError> {
        let (uv, vv) = (self.value(u).data(), self.value(v).data());
        let mut out = Vec::with_capacity(uv.len() * vv.len());
        for &a in uv {
            for &b in vv {
                out.push(a * b);
            }
        }
        let value = Tensor::new(&[uv.len(), vv.len()], out)?;
        let rg = self.rg(&[u, v]);
        let out = self.push(value, Op::Outer { u, v }, rg)?;
        self.products.push(ProductRecord { kind: ProductKind::Outer, a: u, b: v, output: out });
        Ok(out)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = xs.first().ok_or_else(|| shape_err("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err(format!("concat axis {axis} out of range for {base:?}")));
        }
        for x in xs {
            let s = self.shape(*x);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                return Err(shape_err(format!("concat shapes differ off axis {axis}: {base:?} vs {s:?}")));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let chunks: Vec<usize> = xs.iter().map(|x| self.shape(*x)[axis] * inner).collect();
        let mut out = Vec::with_capacity(outer * chunks.iter().sum::<usize>());
        for o in 0..outer {
            for (x, &ch) in xs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(*x).data()[o * ch..(o + 1) * ch]);
            }
        }
        let mut shape = base;
        shape[axis] = xs.iter().map(|x| self.shape(*x)[axis]).sum();
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(xs);
        self.push(value, Op::Concat { xs: xs.to_vec(), outer, chunks }, rg)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)
        } else if tb.len() == 1 {
            let y = tb.data()[0];
            Tensor::new(ta.shape(), ta.data().iter().map(|&x| f(x, y)).collect())
        } else if ta.len() == 1 {
            let x = ta.data()[0];
            Tensor::new(tb.shape(), tb.data().iter().map(|&y| f(x, y)).collect())
        } else {
            Err(shape_err(format!(
                "elementwise op needs equal shapes or a scalar operand: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let value = Tensor::new(t.shape(), t.data().iter().map(|v| v * c).collect())?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, c }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let value = Tensor::new(t.shape(), t.data().iter().map(|v| v + c).collect())?;
        let rg = self.rg(&[x]);
        self.push(value, Op::AddScalar { x }, rg)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.mul(x, x)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(shape_err("mean of empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape { x }, rg)
    }

    /// Slice `index` of the leading axis, keeping that axis with extent 1.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(shape_err(format!("select {index} out of range for {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[index * inner..(index + 1) * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = 1;
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Select { x, index }, rg)
    }

    /// φ along the last (time) axis of an NCHW tensor.
    pub fn temporal_downsample(&mut self, x: Var, alpha: usize) -> Result<Var, AutodiffError> {
        let (n, c, h, w) = self.value(x).dims4("temporal_downsample")?;
        if alpha == 0 || w % alpha != 0 {
            return Err(AutodiffError::ResolutionMismatch { width: w, alpha });
        }
        if alpha == 1 {
            return self.reshape(x, &[n, c, h, w]);
        }
        let inv = 1.0 / alpha as f64;
        let out = self.value(x).data().chunks_exact(alpha).map(|ch| tree_sum(ch) * inv).collect();
        let value = Tensor::new(&[n, c, h, w / alpha], out)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::TemporalDown { x, alpha }, rg)
    }

    /// φ⁻¹ along the last (time) axis: each frame repeated `alpha` times.
    pub fn temporal_upsample(&mut self, x: Var, alpha: usize) -> Result<Var, AutodiffError> {
        let (n, c, h, w) = self.value(x).dims4("temporal_upsample")?;
        if alpha == 0 {
            return Err(AutodiffError::ResolutionMismatch { width: w, alpha });
        }
        if alpha == 1 {
            return self.reshape(x, &[n, c, h, w]);
        }
        let mut out = Vec::with_capacity(n * c * h * w * alpha);
        for &v in self.value(x).data() {
            out.extend(std::iter::repeat(v).take(alpha));
        }
        let value = Tensor::new(&[n, c, h, w * alpha], out)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::TemporalUp { x, alpha }, rg)
    }

    /// Mean binary cross entropy of logits `z` against targets in [0, 1],
    /// evaluated as `max(z, 0) − z·t + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, z: Var, targets: &Tensor) -> Result<Var, AutodiffError> {
        let zt = self.value(z);
        check_targets(zt, targets)?;
        let m = zt.len() as f64;
        let s: f64 = zt
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(&[z]);
        self.push(Tensor::scalar(s / m), Op::BceLogits { z, targets: targets.data().to_vec() }, rg)
    }

    /// Mean binary cross entropy of probabilities (clamped to
    /// [1e-12, 1 − 1e-12]) against targets in [0, 1].
    pub fn bce_prob(&mut self, p: Var, targets: &Tensor) -> Result<Var, AutodiffError> {
        let pt = self.value(p);
        check_targets(pt, targets)?;
        let m = pt.len() as f64;
        let s: f64 = pt
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &t)| {
                let q = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
            })
            .sum();
        let rg = self.rg(&[p]);
        self.push(Tensor::scalar(s / m), Op::BceProb { p, targets: targets.data().to_vec() }, rg)
    }

    // ----- reverse pass -----------------------------------------------------

    /// Accumulates d`loss`/d(node) into every node that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarBackward(self.shape(loss).to_vec()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(gy) = self.nodes[id].grad.take() else { continue };
            let contribs = self.local_grads(id, &gy);
            self.nodes[id].grad = Some(gy);
            for (v, g) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for n in &self.nodes {
            if let Some(g) = &n.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(AutodiffError::NonFinite("backward"));
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, id: usize, gy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, spec } => {
                let (n, c, h, wd) = self.nodes[x.0].value.dims4("").unwrap();
                let ws = self.nodes[w.0].value.shape();
                let (o, k) = (ws[0], ws[2]);
                let (_, _, oh, ow) = node.value.dims4("").unwrap();
                let g = Patch { channels: c, ih: h, iw: wd, oh, ow, k, stride: spec.stride, pad: spec.pad, dilation: spec.dilation };
                let xv = val(*x);
                let wv = val(*w);
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut cols = vec![0.0; g.rows() * g.cols()];
                for bi in 0..n {
                    let dyb = &gy[bi * o * oh * ow..(bi + 1) * o * oh * ow];
                    if rg(*w) {
                        im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], &g, &mut cols);
                        gemm(o, g.cols(), g.rows(), dyb, false, &cols, true, 1.0, &mut dw);
                    }
                    if rg(*x) {
                        gemm(g.rows(), o, g.cols(), wv, true, dyb, false, 0.0, &mut cols);
                        col2im(&cols, &g, &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd]);
                    }
                }
                out.push((*x, dx));
                out.push((*w, dw));
                if let Some(b) = b {
                    out.push((*b, channel_sums(gy, n, o, oh * ow)));
                }
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                let (n, c, h, wd) = self.nodes[x.0].value.dims4("").unwrap();
                let ws = self.nodes[w.0].value.shape();
                let (o, k) = (ws[1], ws[2]);
                let (_, _, oh, ow) = node.value.dims4("").unwrap();
                let g = Patch { channels: o, ih: oh, iw: ow, oh: h, ow: wd, k, stride: *stride, pad: *pad, dilation: 1 };
                let xv = val(*x);
                let wv = val(*w);
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut cols = vec![0.0; g.rows() * g.cols()];
                for bi in 0..n {
                    im2col(&gy[bi * o * oh * ow..(bi + 1) * o * oh * ow], &g, &mut cols);
                    if rg(*x) {
                        gemm(c, g.rows(), g.cols(), wv, false, &cols, false, 0.0, &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd]);
                    }
                    if rg(*w) {
                        gemm(c, g.cols(), g.rows(), &xv[bi * c * h * wd..(bi + 1) * c * h * wd], false, &cols, true, 1.0, &mut dw);
                    }
                }
                out.push((*x, dx));
                out.push((*w, dw));
                if let Some(b) = b {
                    out.push((*b, channel_sums(gy, n, o, oh * ow)));
                }
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let (n, c, h, w) = node.value.dims4("").unwrap();
                let hw = h * w;
                let m = (n * hw) as f64;
                let gv = val(*gamma);
                let (dgamma, dbeta) = bn_param_grads(gy, xhat, n, c, hw);
                let mut dx = vec![0.0; gy.len()];
                for ch in 0..c {
                    // Σ dxhat and Σ dxhat·xhat over the channel.
                    let s1 = dbeta[ch] * gv[ch];
                    let s2 = dgamma[ch] * gv[ch];
                    for bi in 0..n {
                        for i in (bi * c + ch) * hw..(bi * c + ch + 1) * hw {
                            let dxh = gy[i] * gv[ch];
                            dx[i] = inv_std[ch] / m * (m * dxh - s1 - xhat[i] * s2);
                        }
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let (n, c, h, w) = node.value.dims4("").unwrap();
                let hw = h * w;
                let gv = val(*gamma);
                let (dgamma, dbeta) = bn_param_grads(gy, xhat, n, c, hw);
                let mut dx = vec![0.0; gy.len()];
                for bi in 0..n {
                    for ch in 0..c {
                        for i in (bi * c + ch) * hw..(bi * c + ch + 1) * hw {
                            dx[i] = gy[i] * gv[ch] * inv_std[ch];
                        }
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::LeakyRelu { x, slope } => {
                let dx = val(*x).iter().zip(gy).map(|(&v, &g)| if v > 0.0 { g } else { slope * g }).collect();
                out.push((*x, dx));
            }
            Op::Sigmoid { x } => {
                let dx = node.value.data().iter().zip(gy).map(|(&y, &g)| g * y * (1.0 - y)).collect();
                out.push((*x, dx));
            }
            Op::Log1p { x } => {
                let dx = val(*x).iter().zip(gy).map(|(&v, &g)| g / (1.0 + v)).collect();
                out.push((*x, dx));
            }
            Op::Sqrt { x } => {
                let dx = node.value.data().iter().zip(gy).map(|(&y, &g)| 0.5 * g / y).collect();
                out.push((*x, dx));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; val(*x).len()];
                for (&src, &g) in argmax.iter().zip(gy) {
                    dx[src] += g;
                }
                out.push((*x, dx));
            }
            Op::SpatialAvgPool { x } => {
                let (_, _, h, w) = self.nodes[x.0].value.dims4("").unwrap();
                let hw = h * w;
                let mut dx = Vec::with_capacity(gy.len() * hw);
                for &g in gy {
                    dx.extend(std::iter::repeat(g / hw as f64).take(hw));
                }
                out.push((*x, dx));
            }
            Op::MatMul { a, b, m, k, n } => {
                if rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(*m, *n, *k, gy, false, val(*b), true, 0.0, &mut da);
                    out.push((*a, da));
                }
                if rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(*k, *m, *n, val(*a), true, gy, false, 0.0, &mut db);
                    out.push((*b, db));
                }
            }
            Op::Outer { u, v } => {
                let (uv, vv) = (val(*u), val(*v));
                let nv = vv.len();
                let du = (0..uv.len()).map(|i| (0..nv).map(|j| gy[i * nv + j] * vv[j]).sum()).collect();
                let dv = (0..nv).map(|j| (0..uv.len()).map(|i| gy[i * nv + j] * uv[i]).sum()).collect();
                out.push((*u, du));
                out.push((*v, dv));
            }
            Op::Concat { xs, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (x, &ch) in xs.iter().zip(chunks) {
                    let mut dx = Vec::with_capacity(outer * ch);
                    for o in 0..*outer {
                        dx.extend_from_slice(&gy[o * total + offset..o * total + offset + ch]);
                    }
                    offset += ch;
                    out.push((*x, dx));
                }
            }
            Op::Add { a, b } => {
                out.push((*a, reduce_broadcast(gy, val(*a).len(), |_| 1.0)));
                out.push((*b, reduce_broadcast(gy, val(*b).len(), |_| 1.0)));
            }
            Op::Sub { a, b } => {
                out.push((*a, reduce_broadcast(gy, val(*a).len(), |_| 1.0)));
                out.push((*b, reduce_broadcast(gy, val(*b).len(), |_| -1.0)));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                out.push((*a, reduce_broadcast(gy, av.len(), |i| pick(bv, i))));
                out.push((*b, reduce_broadcast(gy, bv.len(), |i| pick(av, i))));
            }
            Op::Scale { x, c } => out.push((*x, gy.iter().map(|g| g * c).collect())),
            Op::AddScalar { x } | Op::Reshape { x } => out.push((*x, gy.to_vec())),
            Op::Sum { x } => out.push((*x, vec![gy[0]; val(*x).len()])),
            Op::Select { x, index } => {
                let mut dx = vec![0.0; val(*x).len()];
                let inner = gy.len();
                dx[index * inner..(index + 1) * inner].copy_from_slice(gy);
                out.push((*x, dx));
            }
            Op::TemporalDown { x, alpha } => {
                let inv = 1.0 / *alpha as f64;
                let mut dx = Vec::with_capacity(gy.len() * alpha);
                for &g in gy {
                    dx.extend(std::iter::repeat(g * inv).take(*alpha));
                }
                out.push((*x, dx));
            }
            Op::TemporalUp { x, alpha } => {
                out.push((*x, gy.chunks_exact(*alpha).map(|c| c.iter().sum()).collect()));
            }
            Op::BceLogits { z, targets } => {
                let m = targets.len() as f64;
                let dz = val(*z)
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| gy[0] * (sigmoid_scalar(z) - t) / m)
                    .collect();
                out.push((*z, dz));
            }
            Op::BceProb { p, targets } => {
                let m = targets.len() as f64;
                let dp = val(*p)
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| {
                        if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                            0.0
                        } else {
                            gy[0] * (-t / p + (1.0 - t) / (1.0 - p)) / m
                        }
                    })
                    .collect();
                out.push((*p, dp));
            }
        }
        out
    }
}

pub const PROB_CLAMP: f64 = 1e-12;

fn check_targets(x: &Tensor, targets: &Tensor) -> Result<(), AutodiffError> {
    if x.len() != targets.len() || x.is_empty() {
        return Err(shape_err(format!(
            "bce targets {:?} do not match predictions {:?}",
            targets.shape(),
            x.shape()
        )));
    }
    if targets.data().iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(AutodiffError::TargetRange);
    }
    Ok(())
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], n: usize, o: usize, plane: usize) {
    for bi in 0..n {
        for (ch, &b) in bias.iter().enumerate().take(o) {
            out[(bi * o + ch) * plane..(bi * o + ch + 1) * plane].iter_mut().for_each(|v| *v += b);
        }
    }
}

fn channel_sums(gy: &[f64], n: usize, o: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0; o];
    for bi in 0..n {
        for (ch, slot) in db.iter_mut().enumerate() {
            *slot += gy[(bi * o + ch) * plane..(bi * o + ch + 1) * plane].iter().sum::<f64>();
        }
    }
    db
}

fn bn_param_grads(gy: &[f64], xhat: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for bi in 0..n {
        for ch in 0..c {
            for i in (bi * c + ch) * hw..(bi * c + ch + 1) * hw {
                dgamma[ch] += gy[i] * xhat[i];
                dbeta[ch] += gy[i];
            }
        }
    }
    (dgamma, dbeta)
}

/// Gradient of an elementwise op for an operand of length `len`; a scalar
/// operand receives the sum over all positions.
fn reduce_broadcast(gy: &[f64], len: usize, local: impl Fn(usize) -> f64) -> Vec<f64> {
    if len == gy.len() {
        gy.iter().enumerate().map(|(i, g)| g * local(i)).collect()
    } else {
        vec![gy.iter().enumerate().map(|(i, g)| g * local(i)).sum()]
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvT2d { .. } => "conv_transpose2d",
        Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => "batchnorm2d",
        Op::LeakyRelu { .. } => "leaky_relu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Log1p { .. } => "log1p",
        Op::Sqrt { .. } => "sqrt",
        Op::MaxPool { .. } => "max_pool2d",
        Op::SpatialAvgPool { .. } => "spatial_avg_pool",
        Op::MatMul { .. } => "matmul",
        Op::Outer { .. } => "outer",
        Op::Concat { .. } => "concat",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::Sum { .. } => "sum",
        Op::Reshape { .. } => "reshape",
        Op::Select { .. } => "select",
        Op::TemporalDown { .. } => "temporal_downsample",
        Op::TemporalUp { .. } => "temporal_upsample",
        Op::BceLogits { .. } => "bce_with_logits",
        Op::BceProb { .. } => "bce_prob",
    }
}
