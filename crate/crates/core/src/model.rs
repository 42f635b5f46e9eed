//! The full network: residual encoder, optional global-context bottleneck,
//! and a three-stage decoder whose skips are optionally attention gated.

use serde::{Deserialize, Serialize};

use crate::cagm::{Cagm, CagmConfig};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::nn::{
    max_pool2d, upsample2x, BatchNorm2d, Conv2d, Ctx, Module, Param, Trace, UpsampleMode,
};
use crate::rfem::{fuse, ConvBlock, Rfem, RfemConfig};
use crate::tensor::{Tensor, Var};

/// Full-width stage channels, ResNet-50 style.
pub const FULL_WIDTHS: [usize; 4] = [64, 256, 512, 1024];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1 → 3×3 → 1×1 with a 4× narrower middle.
    Bottleneck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub base_widths: [usize; 4],
    pub width_multiplier: f64,
    pub block: BlockKind,
    /// Residual blocks in each of the three encoder stages.
    pub blocks: [usize; 3],
    pub use_cagm: bool,
    pub use_rfem: bool,
    /// Attention width `d_k`; defaults to the bottleneck channel count.
    pub attention_dim: Option<usize>,
    /// Compressed sequence length `k`; defaults to `max(1, N/8)`.
    pub attention_rank: Option<usize>,
    /// Gate width per decoder stage (deepest first); defaults to half the
    /// skip channels.
    pub gate_channels: Option<[usize; 3]>,
    pub upsample: UpsampleMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(64, 64, 1)
    }
}

impl ModelConfig {
    /// Laptop-scale network: widths ×1/8, one basic block per stage.
    pub fn desk(height: usize, width: usize, classes: usize) -> Self {
        Self {
            height,
            width,
            in_channels: 3,
            classes,
            base_widths: FULL_WIDTHS,
            width_multiplier: 0.125,
            block: BlockKind::Basic,
            blocks: [1, 1, 1],
            use_cagm: true,
            use_rfem: true,
            attention_dim: None,
            attention_rank: None,
            gate_channels: None,
            upsample: UpsampleMode::Bilinear,
            seed: 0,
        }
    }

    /// Full-width network with bottleneck blocks `[3, 4, 6]`.
    pub fn full_width(height: usize, width: usize, classes: usize) -> Self {
        Self {
            width_multiplier: 1.0,
            block: BlockKind::Bottleneck,
            blocks: [3, 4, 6],
            ..Self::desk(height, width, classes)
        }
    }

    pub fn with_flags(mut self, use_rfem: bool, use_cagm: bool) -> Self {
        self.use_rfem = use_rfem;
        self.use_cagm = use_cagm;
        self
    }

    /// Resolved stage widths `[c0, c1, c2, c3]`.
    pub fn widths(&self) -> [usize; 4] {
        self.base_widths
            .map(|c| ((c as f64 * self.width_multiplier).round() as usize).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            return fail(format!(
                "input {}x{} must be a positive multiple of 16",
                self.height, self.width
            ));
        }
        if self.classes == 0 || self.in_channels == 0 {
            return fail("classes and input channels must be at least 1".into());
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return fail(format!(
                "width multiplier {} must be positive",
                self.width_multiplier
            ));
        }
        if self.base_widths.contains(&0) || self.blocks.contains(&0) {
            return fail("stage widths and block counts must be positive".into());
        }
        if self.block == BlockKind::Bottleneck && self.widths()[1..].iter().any(|&c| c < 4) {
            return fail("bottleneck blocks need at least 4 channels per stage".into());
        }
        if self.use_cagm {
            self.cagm_config()?;
        }
        if self.use_rfem {
            self.rfem_configs()?;
        }
        Ok(())
    }

    pub fn cagm_config(&self) -> Result<CagmConfig> {
        CagmConfig::new(
            self.widths()[3],
            self.height / 16,
            self.width / 16,
            self.attention_dim,
            self.attention_rank,
        )
    }

    /// Gate configs for the decoder stages fed by `F2`, `F1`, `F0`.
    pub fn rfem_configs(&self) -> Result<[RfemConfig; 3]> {
        let c = self.widths();
        let gate = |i: usize| self.gate_channels.map(|g| g[i]);
        Ok([
            RfemConfig::new(c[2], c[3], c[2], gate(0))?,
            RfemConfig::new(c[1], c[2], c[1], gate(1))?,
            RfemConfig::new(c[0], c[1], c[0], gate(2))?,
        ])
    }

    /// Skip level fed into each decoder stage, deepest first.
    pub const SKIP_LEVELS: [usize; 3] = [2, 1, 0];
}

/// Convolution followed by batch norm.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    pub fn new(name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, seed: u64) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), c_in, c_out, k, stride, k / 2, seed),
            bn: BatchNorm2d::new(&format!("{name}.bn"), c_out),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let h = self.conv.forward(ctx, x)?;
        self.bn.forward(ctx, &h)
    }
}

impl Module for ConvBn {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

/// `relu(main(x) + shortcut(x))`; relu between the main-path layers.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub main: Vec<ConvBn>,
    /// Projection used when stride or width changes.
    pub shortcut: Option<ConvBn>,
}

impl ResBlock {
    pub fn new(
        name: &str,
        kind: BlockKind,
        c_in: usize,
        c_out: usize,
        stride: usize,
        seed: u64,
    ) -> Self {
        let n = |s: &str| format!("{name}.{s}");
        let main = match kind {
            BlockKind::Basic => vec![
                ConvBn::new(&n("a"), c_in, c_out, 3, stride, seed),
                ConvBn::new(&n("b"), c_out, c_out, 3, 1, seed),
            ],
            BlockKind::Bottleneck => {
                let mid = c_out / 4;
                vec![
                    ConvBn::new(&n("a"), c_in, mid, 1, 1, seed),
                    ConvBn::new(&n("b"), mid, mid, 3, stride, seed),
                    ConvBn::new(&n("c"), mid, c_out, 1, 1, seed),
                ]
            }
        };
        let shortcut = (stride != 1 || c_in != c_out)
            .then(|| ConvBn::new(&n("shortcut"), c_in, c_out, 1, stride, seed));
        Self { main, shortcut }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let mut h = x.clone();
        let last = self.main.len() - 1;
        for (i, layer) in self.main.iter().enumerate() {
            h = layer.forward(ctx, &h)?;
            if i != last {
                h = h.relu();
            }
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(ctx, x)?,
            None => x.clone(),
        };
        Ok(h.add(&skip)?.relu())
    }
}

impl Module for ResBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.main.visit(f);
        self.shortcut.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.main.visit_mut(f);
        self.shortcut.visit_mut(f);
    }
}

/// Encoder outputs at strides 2, 4, 8 and 16.
pub struct FeaturePyramid {
    pub f0: Var,
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
}

impl FeaturePyramid {
    pub fn level(&self, l: usize) -> &Var {
        [&self.f0, &self.f1, &self.f2, &self.f3][l]
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: ConvBn,
    pub stages: Vec<Vec<ResBlock>>,
}

impl Encoder {
    pub fn new(config: &ModelConfig) -> Self {
        let c = config.widths();
        let seed = config.seed;
        let stem = ConvBn::new("encoder.stem", config.in_channels, c[0], 7, 2, seed);
        let stages = (0..3)
            .map(|s| {
                let stride = if s == 0 { 1 } else { 2 };
                (0..config.blocks[s])
                    .map(|b| {
                        let (c_in, st) = if b == 0 {
                            (c[s], stride)
                        } else {
                            (c[s + 1], 1)
                        };
                        ResBlock::new(
                            &format!("encoder.stage{}.{b}", s + 1),
                            config.block,
                            c_in,
                            c[s + 1],
                            st,
                            seed,
                        )
                    })
                    .collect()
            })
            .collect();
        Self { stem, stages }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Var) -> Result<FeaturePyramid> {
        let f0 = self.stem.forward(ctx, x)?.relu();
        let mut h = max_pool2d(&f0, 3, 2, 1)?;
        let mut feats = Vec::with_capacity(3);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(ctx, &h)?;
            }
            feats.push(h.clone());
        }
        let [f1, f2, f3]: [Var; 3] = feats.try_into().expect("three stages");
        Ok(FeaturePyramid { f0, f1, f2, f3 })
    }
}

impl Module for Encoder {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.stem.visit(f);
        for s in &self.stages {
            s.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_mut(f);
        for s in &mut self.stages {
            s.visit_mut(f);
        }
    }
}

/// One decoder stage: gated or plain skip fusion.
#[derive(Clone, Debug)]
pub enum DecoderStage {
    Gated(Rfem),
    Plain(ConvBlock),
}

impl DecoderStage {
    pub fn forward(&self, ctx: &mut Ctx, skip: &Var, up: &Var) -> Result<Var> {
        match self {
            DecoderStage::Gated(r) => r.forward(ctx, skip, up),
            DecoderStage::Plain(b) => fuse(b, ctx, skip, up),
        }
    }
}

impl Module for DecoderStage {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        match self {
            DecoderStage::Gated(r) => r.visit(f),
            DecoderStage::Plain(b) => b.visit(f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            DecoderStage::Gated(r) => r.visit_mut(f),
            DecoderStage::Plain(b) => b.visit_mut(f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub bottleneck: Option<Cagm>,
    pub decoder: Vec<DecoderStage>,
    pub head: Conv2d,
}

impl Model {
    /// Layer names do not depend on the ablation flags, so variants built
    /// from the same seed share every common weight.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let c = config.widths();
        let bottleneck = if config.use_cagm {
            Some(Cagm::new("bottleneck", config.cagm_config()?, seed)?)
        } else {
            None
        };
        let rfem = config.rfem_configs()?;
        let decoder = rfem
            .iter()
            .zip(ModelConfig::SKIP_LEVELS)
            .map(|(rc, l)| {
                let name = format!("decoder.{l}");
                if config.use_rfem {
                    DecoderStage::Gated(Rfem::new(&name, *rc, seed))
                } else {
                    DecoderStage::Plain(ConvBlock::new(
                        &format!("{name}.block"),
                        rc.c_e + rc.c_d,
                        rc.c_out,
                        seed,
                    ))
                }
            })
            .collect();
        Ok(Self {
            encoder: Encoder::new(&config),
            bottleneck,
            decoder,
            head: Conv2d::new("head", c[0], config.classes, 1, 1, 0, seed),
            config,
        })
    }

    pub fn encode(&self, ctx: &mut Ctx, x: &Var) -> Result<FeaturePyramid> {
        let cfg = &self.config;
        let want = [cfg.in_channels, cfg.height, cfg.width];
        if x.rank() != 4 || x.shape()[1..] != want {
            return Err(Error::Dimension(format!(
                "model expects [B, {}, {}, {}] input, got {:?}",
                want[0],
                want[1],
                want[2],
                x.shape()
            )));
        }
        self.encoder.forward(ctx, x)
    }

    /// Raw logits `[B, K, H, W]`.
    pub fn forward(&self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let feats = self.encode(ctx, x)?;
        ctx.trace.bottleneck_in = Some(feats.f3.value());
        let mut d = match &self.bottleneck {
            Some(m) => m.forward(ctx, &feats.f3)?,
            None => feats.f3.clone(),
        };
        ctx.trace.bottleneck_out = Some(d.value());
        for (stage, l) in self.decoder.iter().zip(ModelConfig::SKIP_LEVELS) {
            let up = upsample2x(&d, self.config.upsample)?;
            d = stage.forward(ctx, feats.level(l), &up)?;
        }
        let up = upsample2x(&d, self.config.upsample)?;
        self.head.forward(ctx, &up)
    }

    /// Sigmoid for a single output channel, softmax over classes otherwise.
    pub fn probabilities(&self, logits: &Var) -> Result<Var> {
        if self.config.classes == 1 {
            Ok(logits.sigmoid())
        } else {
            logits.softmax(1)
        }
    }

    /// Eval-mode inference returning hard labels and the captured trace.
    pub fn predict(&self, images: &Tensor) -> Result<(Vec<Mask>, Trace)> {
        let mut ctx = Ctx::eval();
        let x = ctx.tape.constant(images);
        let logits = self.forward(&mut ctx, &x)?;
        Ok((predict_mask(&logits.value())?, ctx.trace))
    }

    /// Force every skip gate to exactly one.
    pub fn open_gates(&mut self) {
        for stage in &mut self.decoder {
            if let DecoderStage::Gated(r) = stage {
                r.open_gate();
            }
        }
    }
}

impl Module for Model {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.encoder.visit(f);
        self.bottleneck.visit(f);
        self.decoder.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_mut(f);
        self.bottleneck.visit_mut(f);
        self.decoder.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Hard labels from logits `[B, K, H, W]`: `logit > 0` (probability
/// strictly above one half) for `K = 1`, otherwise argmax with the lowest
/// index winning ties.
pub fn predict_mask(logits: &Tensor) -> Result<Vec<Mask>> {
    let (b, k, h, w) = match *logits.shape() {
        [b, k, h, w] if k >= 1 => (b, k, h, w),
        _ => {
            return Err(Error::Dimension(format!(
                "expected [B, K, H, W] logits, got {:?}",
                logits.shape()
            )))
        }
    };
    if k > 256 {
        return Err(Error::Dimension(format!(
            "{k} classes do not fit 8-bit labels"
        )));
    }
    let plane = h * w;
    let data = logits.data();
    Ok((0..b)
        .map(|bi| {
            let base = bi * k * plane;
            let labels = (0..plane)
                .map(|p| {
                    if k == 1 {
                        return u8::from(data[base + p] > 0.0);
                    }
                    let mut best = 0;
                    for c in 1..k {
                        if data[base + c * plane + p] > data[base + best * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            Mask {
                height: h,
                width: w,
                labels,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests;
