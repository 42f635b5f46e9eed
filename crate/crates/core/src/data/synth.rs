use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::nn::init_rng;
use crate::tensor::Tensor;

/// Procedural crack images: a textured background with dark random-walk
/// cracks. The mask is exactly the set of darkened pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    /// Square side length in pixels.
    pub size: usize,
    pub width_min: usize,
    pub width_max: usize,
    pub cracks_min: usize,
    pub cracks_max: usize,
    pub texture_amplitude: f64,
    /// Target share of crack pixels per image.
    pub fg_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 8,
            size: 64,
            width_min: 1,
            width_max: 3,
            cracks_min: 1,
            cracks_max: 3,
            texture_amplitude: 0.15,
            fg_fraction: 0.028,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config(
                "synthetic image size must be positive".into(),
            ));
        }
        if !(self.fg_fraction > 0.0 && self.fg_fraction < 0.2) {
            return Err(Error::Config(format!(
                "foreground fraction {} must lie in (0, 0.2)",
                self.fg_fraction
            )));
        }
        if self.width_min > self.width_max
            || self.cracks_min > self.cracks_max
            || self.cracks_max == 0
        {
            return Err(Error::Config(
                "crack width and count ranges must be ordered and non-empty".into(),
            ));
        }
        if !(0.0..=0.5).contains(&self.texture_amplitude) {
            return Err(Error::Config(
                "texture amplitude must lie in [0, 0.5]".into(),
            ));
        }
        Ok(())
    }
}

/// Stamp a disc of diameter `width` at `(x, y)`; returns newly set pixels.
fn stamp(labels: &mut [u8], n: usize, x: f64, y: f64, width: usize) -> usize {
    let r = width as f64 / 2.0;
    let r2 = r * r + 0.5;
    let reach = r.ceil() as isize + 1;
    let (ci, cj) = (y.floor() as isize, x.floor() as isize);
    let mut added = 0;
    for i in ci - reach..=ci + reach {
        for j in cj - reach..=cj + reach {
            if i < 0 || j < 0 || i >= n as isize || j >= n as isize {
                continue;
            }
            let (dy, dx) = (i as f64 + 0.5 - y, j as f64 + 0.5 - x);
            let p = i as usize * n + j as usize;
            if dx * dx + dy * dy <= r2 && labels[p] == 0 {
                labels[p] = 1;
                added += 1;
            }
        }
    }
    added
}

fn crack_mask<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Vec<u8> {
    let n = cfg.size;
    let mut labels = vec![0u8; n * n];
    let budget = (cfg.fg_fraction * (n * n) as f64).round() as usize;
    let cracks = rng.random_range(cfg.cracks_min..=cfg.cracks_max).max(1);
    let turn = Normal::new(0.0, 0.25).expect("valid sigma");
    let mut placed = 0;
    for c in 0..cracks {
        let width = rng.random_range(cfg.width_min..=cfg.width_max);
        let share = (budget - placed.min(budget)) / (cracks - c);
        if width == 0 || share == 0 {
            continue;
        }
        let (mut x, mut y) = (
            rng.random_range(0.0..n as f64),
            rng.random_range(0.0..n as f64),
        );
        let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let mut got = 0;
        for _ in 0..8 * n * n {
            got += stamp(&mut labels, n, x, y, width);
            if got >= share {
                break;
            }
            heading += turn.sample(rng);
            let (nx, ny) = (x + heading.cos(), y + heading.sin());
            if nx < 0.0 || ny < 0.0 || nx >= n as f64 || ny >= n as f64 {
                heading += std::f64::consts::PI;
                continue;
            }
            (x, y) = (nx, ny);
        }
        placed += got;
    }
    labels
}

fn texture<R: Rng>(cfg: &SynthConfig, labels: &[u8], rng: &mut R) -> Vec<f64> {
    let n = cfg.size;
    let amp = cfg.texture_amplitude;
    let base = 0.55 + rng.random_range(-0.05..=0.05);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = rng.random_range(0.5..3.0) * std::f64::consts::TAU / n as f64;
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            (
                freq * angle.cos(),
                freq * angle.sin(),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let tint: Vec<f64> = (0..3).map(|_| rng.random_range(-0.03..=0.03)).collect();
    let mut shade = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let smooth: f64 = waves
                .iter()
                .map(|(fx, fy, ph)| (fx * j as f64 + fy * i as f64 + ph).sin())
                .sum::<f64>()
                / 3.0;
            let grain = rng.random_range(-1.0..=1.0);
            shade[i * n + j] = if labels[i * n + j] == 1 {
                0.12 + 0.05 * grain
            } else {
                base + amp * smooth + 0.5 * amp * grain
            };
        }
    }
    tint.iter()
        .flat_map(|t| shade.iter().map(move |v| (v + t).clamp(0.0, 1.0)))
        .collect()
}

/// `count` samples with ids `synth_0000`, …; each image draws from its own
/// stream derived from `(seed, index)`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..cfg.count)
        .map(|i| {
            let mut rng = init_rng(seed, &format!("synth/{i}"));
            let labels = crack_mask(cfg, &mut rng);
            let image = texture(cfg, &labels, &mut rng);
            Sample::new(
                format!("synth_{i:04}"),
                Tensor::new(&[3, cfg.size, cfg.size], image)?,
                Mask::new(cfg.size, cfg.size, labels)?,
            )
        })
        .collect()
}
