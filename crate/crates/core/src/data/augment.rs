use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

/// Probabilities and ranges for training-time augmentation. Geometric
/// transforms move image and mask together (mask by nearest neighbour,
/// background fill); photometric ones touch the image only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub hflip: f64,
    pub vflip: f64,
    /// Rotation by a random multiple of 90° (square inputs only).
    pub rot90: f64,
    pub shift_scale_rotate: f64,
    /// Maximum shift as a fraction of the side length.
    pub shift_limit: f64,
    /// Scale drawn from `1 ± scale_limit`.
    pub scale_limit: f64,
    /// Maximum rotation in degrees.
    pub rotate_limit: f64,
    pub noise: f64,
    pub noise_sigma: f64,
    pub color_jitter: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift in turns.
    pub hue: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip: 0.5,
            vflip: 0.5,
            rot90: 0.5,
            shift_scale_rotate: 0.5,
            shift_limit: 0.0625,
            scale_limit: 0.1,
            rotate_limit: 15.0,
            noise: 0.2,
            noise_sigma: 0.02,
            color_jitter: 0.2,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn none() -> Self {
        Self {
            hflip: 0.0,
            vflip: 0.0,
            rot90: 0.0,
            shift_scale_rotate: 0.0,
            noise: 0.0,
            color_jitter: 0.0,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        [
            self.hflip,
            self.vflip,
            self.rot90,
            self.shift_scale_rotate,
            self.noise,
            self.color_jitter,
        ]
        .iter()
        .all(|&p| p == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.hflip,
            self.vflip,
            self.rot90,
            self.shift_scale_rotate,
            self.noise,
            self.color_jitter,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!(
                "augmentation probabilities must lie in [0, 1]: {probs:?}"
            )));
        }
        let ranges = [
            self.shift_limit,
            self.scale_limit,
            self.rotate_limit,
            self.noise_sigma,
            self.brightness,
            self.contrast,
            self.saturation,
            self.hue,
        ];
        if ranges.iter().any(|r| !(*r >= 0.0 && r.is_finite())) || self.scale_limit >= 1.0 {
            return Err(Error::Config(
                "augmentation ranges must be non-negative (scale limit below 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Rebuild a sample by mapping every output pixel to a source pixel.
fn remap(s: &Sample, oh: usize, ow: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Sample {
    let (h, w) = (s.height(), s.width());
    let plane = h * w;
    let d = s.image.data();
    let mut image = Vec::with_capacity(3 * oh * ow);
    for c in 0..3 {
        for i in 0..oh {
            for j in 0..ow {
                let (si, sj) = src(i, j);
                image.push(d[c * plane + si * w + sj]);
            }
        }
    }
    let labels = (0..oh * ow)
        .map(|p| {
            let (si, sj) = src(p / ow, p % ow);
            s.mask.at(si, sj)
        })
        .collect();
    Sample {
        id: s.id.clone(),
        image: Tensor::new(&[3, oh, ow], image).expect("remapped size"),
        mask: Mask {
            height: oh,
            width: ow,
            labels,
        },
    }
}

pub fn hflip(s: &Sample) -> Sample {
    let w = s.width();
    remap(s, s.height(), w, |i, j| (i, w - 1 - j))
}

pub fn vflip(s: &Sample) -> Sample {
    let h = s.height();
    remap(s, h, s.width(), |i, j| (h - 1 - i, j))
}

/// Rotate counter-clockwise by `k·90°`.
pub fn rot90(s: &Sample, k: usize) -> Sample {
    let (h, w) = (s.height(), s.width());
    match k % 4 {
        0 => s.clone(),
        1 => remap(s, w, h, |i, j| (j, w - 1 - i)),
        2 => remap(s, h, w, |i, j| (h - 1 - i, w - 1 - j)),
        _ => remap(s, w, h, |i, j| (h - 1 - j, i)),
    }
}

/// Affine warp about the image centre: shift `(dx, dy)` in pixels, isotropic
/// `scale`, rotation `degrees`. Outside pixels become 0 (image) and
/// background (mask).
pub fn shift_scale_rotate(s: &Sample, dx: f64, dy: f64, scale: f64, degrees: f64) -> Sample {
    let (h, w) = (s.height(), s.width());
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    // output pixel centre → source coordinates (pixel-centre convention)
    let source = |i: usize, j: usize| {
        let (x, y) = (j as f64 + 0.5 - cx - dx, i as f64 + 0.5 - cy - dy);
        let (u, v) = ((cos * x + sin * y) / scale, (-sin * x + cos * y) / scale);
        (v + cy - 0.5, u + cx - 0.5)
    };
    let plane = h * w;
    let d = s.image.data();
    let pix = |c: usize, r: isize, q: isize| {
        if r < 0 || q < 0 || r >= h as isize || q >= w as isize {
            0.0
        } else {
            d[c * plane + r as usize * w + q as usize]
        }
    };
    let mut image = Vec::with_capacity(3 * plane);
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                let (r, q) = source(i, j);
                let (r0, q0) = (r.floor(), q.floor());
                let (fr, fq) = (r - r0, q - q0);
                let (r0, q0) = (r0 as isize, q0 as isize);
                let v = (pix(c, r0, q0) * (1.0 - fq) + pix(c, r0, q0 + 1) * fq) * (1.0 - fr)
                    + (pix(c, r0 + 1, q0) * (1.0 - fq) + pix(c, r0 + 1, q0 + 1) * fq) * fr;
                image.push(v);
            }
        }
    }
    let labels = (0..plane)
        .map(|p| {
            let (r, q) = source(p / w, p % w);
            let (r, q) = (r.round(), q.round());
            if r < 0.0 || q < 0.0 || r >= h as f64 || q >= w as f64 {
                0
            } else {
                s.mask.at(r as usize, q as usize)
            }
        })
        .collect();
    Sample {
        id: s.id.clone(),
        image: Tensor::new(&[3, h, w], image).expect("same size"),
        mask: Mask {
            height: h,
            width: w,
            labels,
        },
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn color_jitter<R: Rng + ?Sized>(image: &mut Tensor, cfg: &AugmentConfig, rng: &mut R) {
    let mut factor = |range: f64| {
        if range > 0.0 {
            1.0 + rng.random_range(-range..=range)
        } else {
            1.0
        }
    };
    let (bright, contrast, sat) = (
        factor(cfg.brightness),
        factor(cfg.contrast),
        factor(cfg.saturation),
    );
    let hue = if cfg.hue > 0.0 {
        rng.random_range(-cfg.hue..=cfg.hue)
    } else {
        0.0
    };
    let plane = image.numel() / 3;
    let d = image.data_mut();
    let gray = |d: &[f64], p: usize| 0.299 * d[p] + 0.587 * d[plane + p] + 0.114 * d[2 * plane + p];
    for v in d.iter_mut() {
        *v = (*v * bright).clamp(0.0, 1.0);
    }
    let mean = (0..plane).map(|p| gray(d, p)).sum::<f64>() / plane as f64;
    for v in d.iter_mut() {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
    }
    for p in 0..plane {
        let g = gray(d, p);
        for c in 0..3 {
            let v = &mut d[c * plane + p];
            *v = (g + (*v - g) * sat).clamp(0.0, 1.0);
        }
        if hue != 0.0 {
            let (h, s, v) = rgb_to_hsv(d[p], d[plane + p], d[2 * plane + p]);
            let (r, g, b) = hsv_to_rgb(h + hue, s, v);
            d[p] = r.clamp(0.0, 1.0);
            d[plane + p] = g.clamp(0.0, 1.0);
            d[2 * plane + p] = b.clamp(0.0, 1.0);
        }
    }
}

/// Apply each enabled transform with its probability, in a fixed order:
/// flips, rot90, shift-scale-rotate, colour jitter, noise.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let mut s = sample.clone();
    let coin = |p: f64, rng: &mut R| p > 0.0 && rng.random::<f64>() < p;
    if coin(cfg.hflip, rng) {
        s = hflip(&s);
    }
    if coin(cfg.vflip, rng) {
        s = vflip(&s);
    }
    if s.height() == s.width() && coin(cfg.rot90, rng) {
        s = rot90(&s, rng.random_range(1..=3));
    }
    if coin(cfg.shift_scale_rotate, rng) {
        let mut sym = |r: f64| {
            if r > 0.0 {
                rng.random_range(-r..=r)
            } else {
                0.0
            }
        };
        let dx = sym(cfg.shift_limit) * s.width() as f64;
        let dy = sym(cfg.shift_limit) * s.height() as f64;
        let scale = 1.0 + sym(cfg.scale_limit);
        let angle = sym(cfg.rotate_limit);
        s = shift_scale_rotate(&s, dx, dy, scale, angle);
    }
    if coin(cfg.color_jitter, rng) {
        color_jitter(&mut s.image, cfg, rng);
    }
    if coin(cfg.noise, rng) && cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("finite sigma");
        for v in s.image.data_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[
            (0.2, 0.5, 0.9),
            (1.0, 0.0, 0.0),
            (0.3, 0.3, 0.3),
            (0.9, 0.8, 0.1),
        ] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }
}
