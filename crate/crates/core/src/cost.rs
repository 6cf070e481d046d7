//! Analytic parameter and multiply-accumulate accounting.
//!
//! MACs are counted per forward pass of one source (one image, one mixture
//! spectrogram), counting only convolution and matrix-product multiplies.
//! A transposed convolution costs `I·O·K²·H_in·W_in`, the cost of the
//! convolution it is the gradient of. Norms, activations, pooling and the
//! temporal resamplers count zero.

use std::fmt::Write as _;

use serde::Serialize;

use crate::model::{ModelConfig, ModelError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub module: String,
    pub layer: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub label: String,
    pub input_shape: (usize, usize),
    pub params_total: u64,
    pub macs_total: u64,
    pub rows: Vec<CostRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostTable {
    pub reports: Vec<CostReport>,
    /// Every report has the same parameter count.
    pub params_constant: bool,
    /// MACs strictly decrease down the list.
    pub macs_strictly_decreasing: bool,
    /// Parameters strictly increase down the list.
    pub params_strictly_increasing: bool,
}

struct ConvShape {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
}

impl ConvShape {
    fn params(&self) -> u64 {
        (self.cin * self.cout * self.k * self.k + self.cout) as u64
    }

    fn out(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.dilation * (self.k - 1) - 1) / self.stride + 1
    }

    fn macs(&self, oh: usize, ow: usize) -> u64 {
        (self.cin * self.cout * self.k * self.k * oh * ow) as u64
    }
}

fn vision_rows(cfg: &ModelConfig, rows: &mut Vec<CostRow>) -> (usize, usize) {
    let mut cin = 3;
    let (mut h, mut w) = (cfg.image_size, cfg.image_size);
    for (i, &cout) in cfg.vision_channels.iter().enumerate() {
        let (pad, dilation) = if cfg.vision_dilation && i >= 2 { (2, 2) } else { (1, 1) };
        let c = ConvShape { cin, cout, k: 3, stride: 2, pad, dilation };
        let (oh, ow) = (c.out(h), c.out(w));
        let bn = if i == 3 { 0 } else { 2 * cout as u64 };
        rows.push(CostRow { module: "vision".into(), layer: format!("conv{i}"), params: c.params() + bn, macs: c.macs(oh, ow) });
        (h, w, cin) = (oh, ow, cout);
    }
    (h, w)
}

fn unet_rows(cfg: &ModelConfig, name: &str, cin: usize, layers: usize, h: usize, w: usize, rows: &mut Vec<CostRow>) {
    let ch = cfg.encoder_channels(layers);
    let geometry = |i: usize| if i < 4 { (4, 2) } else { (3, 1) };
    let mut sizes = vec![(h, w)];
    let mut c_in = cin;
    for (i, &cout) in ch.iter().enumerate() {
        let (k, stride) = geometry(i);
        let c = ConvShape { cin: c_in, cout, k, stride, pad: 1, dilation: 1 };
        let (ph, pw) = sizes[i];
        let (oh, ow) = (c.out(ph), c.out(pw));
        rows.push(CostRow {
            module: name.into(),
            layer: format!("enc{i}"),
            params: c.params() + 2 * cout as u64,
            macs: c.macs(oh, ow),
        });
        sizes.push((oh, ow));
        c_in = cout;
    }
    let (bh, bw) = sizes[layers];
    let c = cfg.category_count as u64;
    rows.push(CostRow { module: name.into(), layer: "avga".into(), params: 0, macs: c * c + c * c * (bh * bw) as u64 });
    for i in (0..layers).rev() {
        let (k, _) = geometry(i);
        let dcin = if i + 1 == layers { ch[i] } else { 2 * ch[i] };
        let dcout = if i == 0 { 1 } else { ch[i - 1] };
        let (ih, iw) = sizes[i + 1];
        let bn = if i == 0 { 0 } else { 2 * dcout as u64 };
        let conv = ConvShape { cin: dcin, cout: dcout, k, stride: 1, pad: 0, dilation: 1 };
        rows.push(CostRow { module: name.into(), layer: format!("dec{i}"), params: conv.params() + bn, macs: conv.macs(ih, iw) });
    }
}

fn build(cfg: &ModelConfig, input_shape: (usize, usize)) -> Vec<CostRow> {
    let (h, w) = input_shape;
    let mut rows = Vec::new();
    vision_rows(cfg, &mut rows);
    unet_rows(cfg, "slow", 1, cfg.slow_layers, h, w / cfg.slow_alpha, &mut rows);
    if cfg.has_fast() {
        unet_rows(cfg, "fast", 2, cfg.fast_layers, h, w / cfg.fast_alpha, &mut rows);
    }
    rows
}

/// Parameter rows; independent of α and of the input shape.
pub fn count_params(cfg: &ModelConfig) -> Result<(u64, Vec<CostRow>), ModelError> {
    cfg.validate()?;
    let shape = (16, 16 * cfg.max_alpha());
    let rows: Vec<CostRow> = build(cfg, shape).into_iter().filter(|r| r.params > 0).collect();
    Ok((rows.iter().map(|r| r.params).sum(), rows))
}

/// MAC rows for one source at spectrogram shape `H_S × W_S`.
pub fn count_macs(cfg: &ModelConfig, input_shape: (usize, usize)) -> Result<(u64, Vec<CostRow>), ModelError> {
    cfg.validate()?;
    cfg.check_input(input_shape.0, input_shape.1)?;
    let rows = build(cfg, input_shape);
    Ok((rows.iter().map(|r| r.macs).sum(), rows))
}

pub fn cost_report(cfg: &ModelConfig, input_shape: (usize, usize), label: impl Into<String>) -> Result<CostReport, ModelError> {
    cfg.validate()?;
    cfg.check_input(input_shape.0, input_shape.1)?;
    let rows = build(cfg, input_shape);
    Ok(CostReport {
        label: label.into(),
        input_shape,
        params_total: rows.iter().map(|r| r.params).sum(),
        macs_total: rows.iter().map(|r| r.macs).sum(),
        rows,
    })
}

pub fn cost_table(cfgs: &[(String, ModelConfig)], input_shape: (usize, usize)) -> Result<CostTable, ModelError> {
    let reports = cfgs
        .iter()
        .map(|(label, cfg)| cost_report(cfg, input_shape, label.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let pairs = || reports.windows(2);
    Ok(CostTable {
        params_constant: pairs().all(|w| w[0].params_total == w[1].params_total),
        macs_strictly_decreasing: pairs().all(|w| w[1].macs_total < w[0].macs_total),
        params_strictly_increasing: pairs().all(|w| w[1].params_total > w[0].params_total),
        reports,
    })
}

impl CostTable {
    /// Aligned plain-text rendering, one line per config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let width = self.reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
        let _ = writeln!(out, "{:<width$}  {:>10}  {:>14}  {:>9}  {:>8}", "config", "params", "MACs/source", "M params", "GMACs");
        for r in &self.reports {
            let _ = writeln!(
                out,
                "{:<width$}  {:>10}  {:>14}  {:>9.4}  {:>8.5}",
                r.label,
                r.params_total,
                r.macs_total,
                r.params_total as f64 / 1e6,
                r.macs_total as f64 / 1e9
            );
        }
        if self.reports.len() > 1 {
            let _ = writeln!(
                out,
                "params constant: {}  MACs strictly decreasing: {}  params strictly increasing: {}",
                self.params_constant, self.macs_strictly_decreasing, self.params_strictly_increasing
            );
        }
        out
    }
}
