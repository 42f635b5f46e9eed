//! Analytic parameter and operation counts, computed from a configuration
//! without building the network, plus wall-clock latency measurement.
//!
//! Counted: convolutions (with bias), batch-norm affine transforms, dense
//! layers and the attention products. Activations, pooling, upsampling,
//! additions, gating multiplies and softmax exponentials are not counted.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cagm::complexity_estimate;
use crate::error::{Error, Result};
use crate::model::{BlockKind, Model, ModelConfig};
use crate::nn::{Ctx, OpCount};
use crate::rfem::{ConvBlock, Rfem};
use crate::tensor::Tensor;

/// Published reference for the full-width model at 448×448.
pub const REFERENCE_PARAMS_M: f64 = 82.05;
pub const REFERENCE_GFLOPS: f64 = 243.78;

/// Cost of one named part of the network for a single image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartCost {
    pub name: String,
    pub params: u64,
    pub ops: OpCount,
}

#[derive(Default)]
struct Tally {
    params: u64,
    ops: OpCount,
}

impl Tally {
    fn conv(&mut self, c_in: usize, c_out: usize, k: usize, h: usize, w: usize) {
        self.params += (c_out * (c_in * k * k + 1)) as u64;
        self.ops += OpCount::conv(c_in, c_out, k, h, w);
    }

    fn conv_bn(&mut self, c_in: usize, c_out: usize, k: usize, h: usize, w: usize) {
        self.conv(c_in, c_out, k, h, w);
        self.params += 2 * c_out as u64;
        self.ops += OpCount::batch_norm(c_out, h, w);
    }

    fn part(self, name: &str) -> PartCost {
        PartCost {
            name: name.to_string(),
            params: self.params,
            ops: self.ops,
        }
    }
}

/// Per-part costs for one `H × W` image, in forward order: stem, the three
/// encoder stages, bottleneck (if enabled), three decoder stages, head.
pub fn breakdown(config: &ModelConfig) -> Result<Vec<PartCost>> {
    config.validate()?;
    let c = config.widths();
    let (h, w) = (config.height, config.width);
    let size = |level: usize| (h >> (level + 1), w >> (level + 1));
    let mut parts = Vec::new();

    let mut stem = Tally::default();
    let (h0, w0) = size(0);
    stem.conv_bn(config.in_channels, c[0], 7, h0, w0);
    parts.push(stem.part("encoder.stem"));

    for s in 0..3 {
        let mut t = Tally::default();
        let (ho, wo) = size(s + 1);
        for b in 0..config.blocks[s] {
            let c_out = c[s + 1];
            let (c_in, stride) = match (b, s) {
                (0, 0) => (c[0], 1),
                (0, _) => (c[s], 2),
                _ => (c_out, 1),
            };
            let (hi, wi) = (ho * stride, wo * stride);
            match config.block {
                BlockKind::Basic => {
                    t.conv_bn(c_in, c_out, 3, ho, wo);
                    t.conv_bn(c_out, c_out, 3, ho, wo);
                }
                BlockKind::Bottleneck => {
                    let mid = c_out / 4;
                    t.conv_bn(c_in, mid, 1, hi, wi);
                    t.conv_bn(mid, mid, 3, ho, wo);
                    t.conv_bn(mid, c_out, 1, ho, wo);
                }
            }
            if stride != 1 || c_in != c_out {
                t.conv_bn(c_in, c_out, 1, ho, wo);
            }
        }
        parts.push(t.part(&format!("encoder.stage{}", s + 1)));
    }

    if config.use_cagm {
        let cc = config.cagm_config()?;
        let (n, ch, d, k) = (
            cc.seq_len() as u64,
            cc.channels as u64,
            cc.d_k as u64,
            cc.rank as u64,
        );
        let f = complexity_estimate(&cc);
        let macs = 3 * n * ch * d + 4 * n * k * d + n * d * ch;
        parts.push(PartCost {
            name: "bottleneck".into(),
            params: 3 * (ch * d + d) + 2 * n * k + d * ch + ch,
            ops: OpCount {
                flops: f.total(),
                macs,
            },
        });
    }

    for (rc, l) in config.rfem_configs()?.iter().zip(ModelConfig::SKIP_LEVELS) {
        let (hl, wl) = size(l);
        let mut t = Tally::default();
        if config.use_rfem {
            t.params +=
                (Rfem::param_count(rc) - ConvBlock::param_count(rc.c_e + rc.c_d, rc.c_out)) as u64;
            t.ops += OpCount::conv(rc.c_d, rc.f_int, 1, hl, wl);
            t.ops += OpCount::conv(rc.c_e, rc.f_int, 1, hl, wl);
            t.ops += OpCount::conv(rc.f_int, 1, 1, hl, wl);
        }
        t.conv_bn(rc.c_e + rc.c_d, rc.c_out, 3, hl, wl);
        t.conv_bn(rc.c_out, rc.c_out, 3, hl, wl);
        parts.push(t.part(&format!("decoder.{l}")));
    }

    let mut head = Tally::default();
    head.conv(c[0], config.classes, 1, h, w);
    parts.push(head.part("head"));
    Ok(parts)
}

/// Trainable parameters of the model `config` describes.
pub fn count_params(config: &ModelConfig) -> Result<u64> {
    Ok(breakdown(config)?.iter().map(|p| p.params).sum())
}

/// Forward-pass operations for a batch of `batch` images.
pub fn count_flops(config: &ModelConfig, batch: usize) -> Result<OpCount> {
    Ok(breakdown(config)?.iter().map(|p| p.ops).sum::<OpCount>() * batch as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub runs: usize,
    pub warmup: usize,
}

pub const LATENCY_WARMUP: usize = 3;

/// Time `runs` single-image eval forwards after [`LATENCY_WARMUP`] untimed
/// ones.
pub fn measure_latency(model: &Model, runs: usize) -> Result<LatencyStats> {
    if runs == 0 {
        return Err(Error::Usage(
            "latency measurement needs at least one timed run".into(),
        ));
    }
    let cfg = &model.config;
    let input = Tensor::full(&[1, cfg.in_channels, cfg.height, cfg.width], 0.5);
    let run = || -> Result<f64> {
        let start = Instant::now();
        let mut ctx = Ctx::eval();
        let x = ctx.tape.constant(&input);
        model.forward(&mut ctx, &x)?;
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    for _ in 0..LATENCY_WARMUP {
        run()?;
    }
    let times = (0..runs).map(|_| run()).collect::<Result<Vec<_>>>()?;
    Ok(LatencyStats {
        mean_ms: times.iter().sum::<f64>() / runs as f64,
        min_ms: times.iter().cloned().fold(f64::INFINITY, f64::min),
        max_ms: times.iter().cloned().fold(0.0, f64::max),
        runs,
        warmup: LATENCY_WARMUP,
    })
}

/// Deviation of a measured value from a reference, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reference: f64,
    pub measured: f64,
    pub deviation_pct: f64,
}

impl Comparison {
    pub fn new(reference: f64, measured: f64) -> Self {
        Self {
            reference,
            measured,
            deviation_pct: 100.0 * (measured - reference) / reference,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub config: ModelConfig,
    pub params: u64,
    pub flops: u64,
    pub macs: u64,
    pub gflops: f64,
    pub flop_convention: String,
    pub parts: Vec<PartCost>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
    /// Present for the full-width 448×448 configuration.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_params_m: Option<Comparison>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_gflops: Option<Comparison>,
}

impl ComplexityReport {
    pub fn new(config: &ModelConfig, latency: Option<LatencyStats>) -> Result<Self> {
        let parts = breakdown(config)?;
        let params = parts.iter().map(|p| p.params).sum::<u64>();
        let ops = parts.iter().map(|p| p.ops).sum::<OpCount>();
        let full = ModelConfig::full_width(448, 448, config.classes)
            .with_flags(config.use_rfem, config.use_cagm);
        let is_reference = config.height == 448
            && config.width == 448
            && config.widths() == full.widths()
            && config.block == full.block
            && config.blocks == full.blocks;
        Ok(Self {
            config: config.clone(),
            params,
            flops: ops.flops,
            macs: ops.macs,
            gflops: ops.flops as f64 / 1e9,
            flop_convention:
                "multiply and add counted separately; single image; convolutions, batch norm, \
                              dense layers and attention products only"
                    .into(),
            parts,
            latency,
            reference_params_m: is_reference
                .then(|| Comparison::new(REFERENCE_PARAMS_M, params as f64 / 1e6)),
            reference_gflops: is_reference
                .then(|| Comparison::new(REFERENCE_GFLOPS, ops.flops as f64 / 1e9)),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "params      {:>14}  ({:.2} M)\nflops       {:>14}  ({:.2} G)\nmacs        {:>14}  ({:.2} G)\n",
            self.params,
            self.params as f64 / 1e6,
            self.flops,
            self.gflops,
            self.macs,
            self.macs as f64 / 1e9
        );
        if let Some(l) = &self.latency {
            s += &format!(
                "latency     mean {:.2} ms  min {:.2} ms  max {:.2} ms  ({} runs)\n",
                l.mean_ms, l.min_ms, l.max_ms, l.runs
            );
        }
        if let (Some(p), Some(g)) = (&self.reference_params_m, &self.reference_gflops) {
            s += &format!(
                "reference   params {:.2} M vs {:.2} M ({:+.1}%)   GFLOPs {:.2} vs {:.2} ({:+.1}%)\n",
                p.measured, p.reference, p.deviation_pct, g.measured, g.reference, g.deviation_pct
            );
        }
        s
    }
}
