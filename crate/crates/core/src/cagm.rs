//! Global context bottleneck: low-rank linear self-attention over the
//! flattened spatial positions of a feature map.
//!
//! Keys and values are compressed along the sequence axis by learned
//! `[N, k]` projections, so the attention matrix is `N × k` rather than
//! `N × N`. The module is therefore bound to one bottleneck resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_rng, Ctx, Dense, Module, OpCount, Param};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CagmConfig {
    pub channels: usize,
    /// Query/key/value width.
    pub d_k: usize,
    /// Compressed sequence length, `1 ≤ rank ≤ N`.
    pub rank: usize,
    pub height: usize,
    pub width: usize,
}

impl CagmConfig {
    /// `d_k = C` and `rank = max(1, N/8)` unless overridden.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        d_k: Option<usize>,
        rank: Option<usize>,
    ) -> Result<Self> {
        let n = height * width;
        let cfg = Self {
            channels,
            d_k: d_k.unwrap_or(channels),
            rank: rank.unwrap_or((n / 8).max(1)),
            height,
            width,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seq_len(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.seq_len();
        if self.channels == 0 || self.d_k == 0 || n == 0 {
            return Err(Error::Config(format!(
                "degenerate global-module config {self:?}"
            )));
        }
        if self.rank == 0 || self.rank > n {
            return Err(Error::Config(format!(
                "attention rank {} must lie in 1..={n}",
                self.rank
            )));
        }
        Ok(())
    }
}

/// Parameters of one global module.
#[derive(Clone, Debug)]
pub struct Cagm {
    pub config: CagmConfig,
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    /// Key compression `E ∈ R^{N×k}`.
    pub key_proj: Param,
    /// Value compression `F ∈ R^{N×k}`.
    pub value_proj: Param,
    pub output: Dense,
}

/// Result of the attention core.
pub struct AttentionOutput {
    /// `[B, N, d_k]`
    pub z: Var,
    /// `[B, N, k]`, rows sum to one.
    pub weights: Var,
}

impl Cagm {
    pub fn new(name: &str, config: CagmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let CagmConfig {
            channels: c,
            d_k,
            rank,
            ..
        } = config;
        let n = config.seq_len();
        let proj = |suffix: &str| {
            let pname = format!("{name}.{suffix}");
            let t = Tensor::randn(
                &[n, rank],
                1.0 / (n as f64).sqrt(),
                &mut init_rng(seed, &pname),
            );
            Param::new(pname, t)
        };
        Ok(Self {
            config,
            query: Dense::new(&format!("{name}.query"), c, d_k, true, seed),
            key: Dense::new(&format!("{name}.key"), c, d_k, true, seed),
            value: Dense::new(&format!("{name}.value"), c, d_k, true, seed),
            key_proj: proj("key_proj"),
            value_proj: proj("value_proj"),
            output: Dense::new(&format!("{name}.output"), d_k, c, true, seed),
        })
    }

    /// `[B, N, d_k]` attention output and the `[B, N, k]` weights.
    pub fn linear_attention(&self, ctx: &Ctx, x: &Var) -> Result<AttentionOutput> {
        let n = self.config.seq_len();
        if x.rank() != 3 || x.shape()[1] != n || x.shape()[2] != self.config.channels {
            return Err(Error::Dimension(format!(
                "attention expects [B, {n}, {}], got {:?}",
                self.config.channels,
                x.shape()
            )));
        }
        let q = self.query.forward(ctx, x)?;
        let k = self.key.forward(ctx, x)?;
        let v = self.value.forward(ctx, x)?;
        // Eᵀ·K and Fᵀ·V compress the sequence axis: [k, N]·[B, N, d_k] → [B, k, d_k].
        let e_t = ctx.param(&self.key_proj).transpose_last()?;
        let f_t = ctx.param(&self.value_proj).transpose_last()?;
        let k_proj = e_t.matmul(&k)?;
        let v_proj = f_t.matmul(&v)?;
        let scores = q
            .matmul(&k_proj.transpose_last()?)?
            .scale(1.0 / (self.config.d_k as f64).sqrt());
        let weights = scores.softmax(2)?;
        let z = weights.matmul(&v_proj)?;
        let f = complexity_estimate(&self.config);
        let (nk, d) = ((n * self.config.rank) as u64, self.config.d_k as u64);
        let batch = x.shape()[0] as u64;
        ctx.count(
            OpCount {
                flops: f.attention(),
                macs: 4 * nk * d,
            } * batch,
        );
        Ok(AttentionOutput { z, weights })
    }

    /// `[B, C, H, W] → [B, C, H, W]`; the attention weights are recorded on
    /// the context trace.
    pub fn forward(&self, ctx: &mut Ctx, f3: &Var) -> Result<Var> {
        let x = flatten_spatial(f3, &self.config)?;
        let att = self.linear_attention(ctx, &x)?;
        ctx.trace.attention.push(att.weights.value());
        let y = self.output.forward(ctx, &att.z)?;
        unflatten_spatial(&y, self.config.height, self.config.width)
    }
}

impl Module for Cagm {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
        f(&self.key_proj);
        f(&self.value_proj);
        self.output.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        f(&mut self.key_proj);
        f(&mut self.value_proj);
        self.output.visit_mut(f);
    }
}

/// `[B, C, H, W] → [B, N, C]` with sequence index `n = i·W + j`.
pub fn flatten_spatial(f3: &Var, config: &CagmConfig) -> Result<Var> {
    let (b, c, h, w) = match *f3.shape() {
        [b, c, h, w] => (b, c, h, w),
        _ => {
            return Err(Error::Dimension(format!(
                "expected [B, C, H, W], got {:?}",
                f3.shape()
            )))
        }
    };
    if h != config.height || w != config.width || c != config.channels {
        return Err(Error::Dimension(format!(
            "bottleneck input {:?} does not match configured {}x{}x{}",
            f3.shape(),
            config.channels,
            config.height,
            config.width
        )));
    }
    f3.reshape(&[b, c, h * w])?.permute(&[0, 2, 1])
}

/// Inverse of [`flatten_spatial`].
pub fn unflatten_spatial(x: &Var, height: usize, width: usize) -> Result<Var> {
    let (b, n, c) = match *x.shape() {
        [b, n, c] => (b, n, c),
        _ => {
            return Err(Error::Dimension(format!(
                "expected [B, N, C], got {:?}",
                x.shape()
            )))
        }
    };
    if n != height * width {
        return Err(Error::Dimension(format!(
            "sequence length {n} is not {height}x{width}"
        )));
    }
    x.permute(&[0, 2, 1])?.reshape(&[b, c, height, width])
}

/// Analytic FLOPs of one forward pass for a single image (multiply and add
/// counted separately; softmax exponentials are not counted).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CagmFlops {
    /// Q, K, V projections with bias.
    pub projections: u64,
    /// `Eᵀ·K` and `Fᵀ·V`.
    pub compression: u64,
    /// `Q·K_projᵀ` plus the `1/√d_k` scaling.
    pub scores: u64,
    /// `A·V_proj`.
    pub aggregation: u64,
    /// Output projection with bias.
    pub output: u64,
}

impl CagmFlops {
    pub fn attention(&self) -> u64 {
        self.compression + self.scores + self.aggregation
    }

    pub fn total(&self) -> u64 {
        self.projections + self.attention() + self.output
    }
}

pub fn complexity_estimate(config: &CagmConfig) -> CagmFlops {
    let n = config.seq_len() as u64;
    let c = config.channels as u64;
    let d = config.d_k as u64;
    let k = config.rank as u64;
    CagmFlops {
        projections: 3 * (2 * n * c * d + n * d),
        compression: 2 * (2 * k * n * d),
        scores: 2 * n * k * d + n * k,
        aggregation: 2 * n * k * d,
        output: 2 * n * d * c + n * c,
    }
}

/// FLOPs of the two `N × N` products in full softmax attention.
pub fn naive_attention_flops(n: usize, d_k: usize) -> u64 {
    let (n, d) = (n as u64, d_k as u64);
    2 * n * n * d + 2 * n * n * d
}
