//! Attention-gated skip fusion: a single-channel coefficient map computed
//! from encoder and (upsampled) decoder features scales the encoder skip
//! before it is concatenated with the decoder path and refined.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, Module, Param};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfemConfig {
    pub c_e: usize,
    pub c_d: usize,
    pub f_int: usize,
    pub c_out: usize,
}

impl RfemConfig {
    /// `f_int` defaults to `max(1, c_e / 2)`.
    pub fn new(c_e: usize, c_d: usize, c_out: usize, f_int: Option<usize>) -> Result<Self> {
        let cfg = Self {
            c_e,
            c_d,
            f_int: f_int.unwrap_or((c_e / 2).max(1)),
            c_out,
        };
        if cfg.c_e == 0 || cfg.c_d == 0 || cfg.f_int == 0 || cfg.c_out == 0 {
            return Err(Error::Config(format!(
                "skip-gate widths must be positive: {cfg:?}"
            )));
        }
        Ok(cfg)
    }
}

/// Two `conv3×3 → batch norm → relu` stages.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
}

impl ConvBlock {
    pub fn new(name: &str, c_in: usize, c_out: usize, seed: u64) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), c_in, c_out, 3, 1, 1, seed),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), c_out),
            conv2: Conv2d::new(&format!("{name}.conv2"), c_out, c_out, 3, 1, 1, seed),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), c_out),
        }
    }

    pub fn param_count(c_in: usize, c_out: usize) -> usize {
        Conv2d::param_count(c_in, c_out, 3) + Conv2d::param_count(c_out, c_out, 3) + 4 * c_out
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, &h)?.relu();
        let h = self.conv2.forward(ctx, &h)?;
        Ok(self.bn2.forward(ctx, &h)?.relu())
    }
}

impl Module for ConvBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
    }
}

/// Gate plus fusion block for one decoder stage.
#[derive(Clone, Debug)]
pub struct Rfem {
    pub config: RfemConfig,
    pub gate_g: Conv2d,
    pub gate_x: Conv2d,
    pub psi: Conv2d,
    pub block: ConvBlock,
    /// Bypass the gate with `Ψ ≡ 1`; see [`Rfem::open_gate`].
    pub forced_open: bool,
}

/// `Ψ` is kept inside `[PSI_FLOOR, 1 − PSI_FLOOR]`, the open unit interval
/// in `f64`, so a saturated sigmoid never fully closes or opens the gate.
pub const PSI_FLOOR: f64 = f64::EPSILON / 2.0;

impl Rfem {
    /// The fusion block is named `{name}.block`, the same name the ungated
    /// decoder uses, so both variants initialize it identically.
    pub fn new(name: &str, config: RfemConfig, seed: u64) -> Self {
        let RfemConfig {
            c_e,
            c_d,
            f_int,
            c_out,
        } = config;
        Self {
            config,
            gate_g: Conv2d::new(&format!("{name}.gate_g"), c_d, f_int, 1, 1, 0, seed),
            gate_x: Conv2d::new(&format!("{name}.gate_x"), c_e, f_int, 1, 1, 0, seed),
            psi: Conv2d::new(&format!("{name}.psi"), f_int, 1, 1, 1, 0, seed),
            block: ConvBlock::new(&format!("{name}.block"), c_e + c_d, c_out, seed),
            forced_open: false,
        }
    }

    pub fn param_count(config: &RfemConfig) -> usize {
        let RfemConfig {
            c_e,
            c_d,
            f_int,
            c_out,
        } = *config;
        Conv2d::param_count(c_d, f_int, 1)
            + Conv2d::param_count(c_e, f_int, 1)
            + Conv2d::param_count(f_int, 1, 1)
            + ConvBlock::param_count(c_e + c_d, c_out)
    }

    /// `Ψ = σ(conv_ψ(relu(conv_g(F_d) + conv_x(F_e))))`, shape `[B, 1, H, W]`.
    pub fn attention_coefficients(&self, ctx: &Ctx, f_e: &Var, f_d: &Var) -> Result<Var> {
        check_pair(f_e, f_d)?;
        if self.forced_open {
            let [b, _, h, w] = f_e.shape().try_into().expect("rank checked");
            return Ok(ctx.tape.constant(&Tensor::ones(&[b, 1, h, w])));
        }
        let g = self.gate_g.forward(ctx, f_d)?;
        let x = self.gate_x.forward(ctx, f_e)?;
        let z = self.psi.forward(ctx, &g.add(&x)?.relu())?;
        Ok(z.sigmoid().clamp(PSI_FLOOR, 1.0 - PSI_FLOOR))
    }

    pub fn forward(&self, ctx: &mut Ctx, f_e: &Var, f_d: &Var) -> Result<Var> {
        let psi = self.attention_coefficients(ctx, f_e, f_d)?;
        ctx.trace.psi.push(psi.value());
        let refined = modulate(&psi, f_e)?;
        fuse(&self.block, ctx, &refined, f_d)
    }

    /// Force `Ψ ≡ 1`, which reduces the module to concatenation plus the
    /// fusion block. The gate layers are skipped while forced.
    pub fn open_gate(&mut self) {
        self.forced_open = true;
    }
}

impl Module for Rfem {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.gate_g.visit(f);
        self.gate_x.visit(f);
        self.psi.visit(f);
        self.block.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.gate_g.visit_mut(f);
        self.gate_x.visit_mut(f);
        self.psi.visit_mut(f);
        self.block.visit_mut(f);
    }
}

fn check_pair(f_e: &Var, f_d: &Var) -> Result<()> {
    if f_e.rank() != 4
        || f_d.rank() != 4
        || f_e.shape()[0] != f_d.shape()[0]
        || f_e.shape()[2..] != f_d.shape()[2..]
    {
        return Err(Error::Dimension(format!(
            "skip features {:?} and decoder features {:?} must share batch and spatial dims",
            f_e.shape(),
            f_d.shape()
        )));
    }
    Ok(())
}

/// `Ψ ⊙ F_e` with the single gate channel broadcast over all channels.
pub fn modulate(psi: &Var, f_e: &Var) -> Result<Var> {
    if psi.rank() != 4 || psi.shape()[1] != 1 {
        return Err(Error::Dimension(format!(
            "gate map must be [B, 1, H, W], got {:?}",
            psi.shape()
        )));
    }
    psi.mul(f_e)
}

/// Concatenate skip and decoder features on the channel axis and run the
/// fusion block. With an open gate this is exactly the gated path.
pub fn fuse(block: &ConvBlock, ctx: &mut Ctx, skip: &Var, f_d: &Var) -> Result<Var> {
    check_pair(skip, f_d)?;
    let cat = Var::concat(&[skip, f_d], 1)?;
    block.forward(ctx, &cat)
}

/// `round(255·v)` with halves rounded up.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Write a coefficient map (`[H, W]`, `[1, H, W]` or `[1, 1, H, W]`) as an
/// 8-bit grayscale PNG.
pub fn export_attention_map(psi: &Tensor, path: &Path) -> Result<()> {
    let shape = psi.shape();
    let (h, w) = match shape {
        [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
        _ => {
            return Err(Error::Dimension(format!(
                "cannot export gate map of shape {shape:?}"
            )))
        }
    };
    if let Some(v) = psi.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("gate value {v} outside [0, 1]")));
    }
    let bytes: Vec<u8> = psi.data().iter().map(|&v| quantize(v)).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dims");
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}
