//! Differentiable image kernels on `[B, C, H, W]` tensors.

use std::rc::Rc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Var};

/// Output length of a sliding window: `floor((n + 2p − k)/s) + 1`.
pub fn conv_out_len(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn dims4(x: &Var, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::Dimension(format!(
            "{what} expects [B, C, H, W], got {:?}",
            x.shape()
        ))),
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Unfold one image `[C, H, W]` into `[C·k·k, Ho·Wo]`.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let hw = self.ho * self.wo;
        let mut cols = vec![0.0; self.col_rows() * hw];
        for c in 0..self.c_in {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let src = &x[(c * self.h + ii as usize) * self.w..];
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dst[oi * self.wo + oj] = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of `im2col`: scatter-add columns back into an image.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let hw = self.ho * self.wo;
        for c in 0..self.c_in {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + ii as usize) * self.w;
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dx[base + jj as usize] += src[oi * self.wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded 2-D cross-correlation. `weight` is `[C_out, C_in, k, k]`,
/// `bias` is `[C_out]`.
pub fn conv2d(
    x: &Var,
    weight: &Var,
    bias: Option<&Var>,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let (b, c_in, h, w) = dims4(x, "conv2d")?;
    let (c_out, wc_in, k) = match *weight.shape() {
        [co, ci, kh, kw] if kh == kw => (co, ci, kh),
        _ => {
            return Err(Error::Dimension(format!(
                "conv2d weight must be [C_out, C_in, k, k], got {:?}",
                weight.shape()
            )))
        }
    };
    if wc_in != c_in {
        return Err(Error::Dimension(format!(
            "conv2d input has {c_in} channels, weight expects {wc_in}"
        )));
    }
    if let Some(bv) = bias {
        if bv.shape() != [c_out] {
            return Err(Error::Dimension(format!(
                "conv2d bias must be [{c_out}], got {:?}",
                bv.shape()
            )));
        }
    }
    let (ho, wo) = match (
        conv_out_len(h, k, stride, padding),
        conv_out_len(w, k, stride, padding),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Dimension(format!(
                "conv2d kernel {k} (padding {padding}) larger than input {h}x{w}"
            )))
        }
    };
    let g = ConvGeom {
        c_in,
        h,
        w,
        k,
        stride,
        pad: padding,
        ho,
        wo,
    };
    let hw = ho * wo;
    let in_img = c_in * h * w;
    let out_img = c_out * hw;
    let xd = x.data_rc();
    let wd = weight.data_rc();
    let bd = bias.map(|b| b.data_rc());

    let (xs, ws): (&[f64], &[f64]) = (&xd, &wd);
    let bs: Option<&[f64]> = bd.as_deref().map(Vec::as_slice);
    let per_image: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let img = &xs[bi * in_img..(bi + 1) * in_img];
            let mut out = vec![0.0; out_img];
            if let Some(bd) = bs {
                for (co, row) in out.chunks_mut(hw).enumerate() {
                    row.fill(bd[co]);
                }
            }
            let cols;
            let src: &[f64] = if g.is_pointwise() {
                img
            } else {
                cols = g.im2col(img);
                &cols
            };
            gemm(
                c_out,
                g.col_rows(),
                hw,
                ws,
                false,
                src,
                false,
                &mut out,
                bs.is_some(),
            );
            out
        })
        .collect();
    let data: Vec<f64> = per_image.concat();

    let mut parents: Vec<&Var> = vec![x, weight];
    if let Some(bv) = bias {
        parents.push(bv);
    }
    let has_bias = bias.is_some();
    Ok(x.tape()
        .push(vec![b, c_out, ho, wo], data, &parents, move |gout, need| {
            let ckk = g.col_rows();
            let (xs, ws): (&[f64], &[f64]) = (&xd, &wd);
            let parts: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..b)
                .into_par_iter()
                .map(|bi| {
                    let go = &gout[bi * out_img..(bi + 1) * out_img];
                    let img = &xs[bi * in_img..(bi + 1) * in_img];
                    let cols;
                    let src: &[f64] = if g.is_pointwise() {
                        img
                    } else if need[1] {
                        cols = g.im2col(img);
                        &cols
                    } else {
                        &[]
                    };
                    let dw = need[1].then(|| {
                        let mut dw = vec![0.0; c_out * ckk];
                        gemm(c_out, hw, ckk, go, false, src, true, &mut dw, false);
                        dw
                    });
                    let dx = need[0].then(|| {
                        let mut dcols = vec![0.0; ckk * hw];
                        gemm(ckk, c_out, hw, ws, true, go, false, &mut dcols, false);
                        if g.is_pointwise() {
                            dcols
                        } else {
                            let mut dx = vec![0.0; in_img];
                            g.col2im(&dcols, &mut dx);
                            dx
                        }
                    });
                    (dx, dw)
                })
                .collect();
            let mut dx = need[0].then(|| Vec::with_capacity(b * in_img));
            let mut dw = need[1].then(|| vec![0.0; c_out * ckk]);
            for (pdx, pdw) in parts {
                if let (Some(acc), Some(p)) = (dx.as_mut(), pdx) {
                    acc.extend_from_slice(&p);
                }
                if let (Some(acc), Some(p)) = (dw.as_mut(), pdw) {
                    acc.iter_mut().zip(&p).for_each(|(a, v)| *a += v);
                }
            }
            let mut grads = vec![dx, dw];
            if has_bias {
                let db = need[2].then(|| {
                    let mut db = vec![0.0; c_out];
                    for bi in 0..b {
                        for (co, acc) in db.iter_mut().enumerate() {
                            let off = bi * out_img + co * hw;
                            *acc += gout[off..off + hw].iter().sum::<f64>();
                        }
                    }
                    db
                });
                grads.push(db);
            }
            grads
        }))
}

/// Window maximum with implicit `-inf` padding; ties route the gradient to
/// the first maximal element in scan order.
pub fn max_pool2d(x: &Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
    let (b, c, h, w) = dims4(x, "max_pool2d")?;
    if padding * 2 > k {
        return Err(Error::Dimension(format!(
            "max_pool2d padding {padding} exceeds half of kernel {k}"
        )));
    }
    let (ho, wo) = match (
        conv_out_len(h, k, stride, padding),
        conv_out_len(w, k, stride, padding),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Dimension(format!(
                "max_pool2d window {k} larger than {h}x{w}"
            )))
        }
    };
    let xd = x.data();
    let planes = b * c;
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for oi in 0..ho {
            for oj in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ki in 0..k {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let idx = ii as usize * w + jj as usize;
                        if plane[idx] > best || best_idx == usize::MAX {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(p * h * w + best_idx);
            }
        }
    }
    let n_in = x.numel();
    Ok(x.tape().push(vec![b, c, ho, wo], out, &[x], move |g, _| {
        let mut dx = vec![0.0; n_in];
        for (gi, &src) in g.iter().zip(&arg) {
            dx[src] += gi;
        }
        vec![Some(dx)]
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    #[default]
    Bilinear,
}

/// Source taps `(i0, i1, weight of i1)` for each output position of a 2×
/// bilinear resize with half-pixel centres (`align_corners = false`).
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Double both spatial dimensions.
pub fn upsample2x(x: &Var, mode: UpsampleMode) -> Result<Var> {
    let (b, c, h, w) = dims4(x, "upsample2x")?;
    let (ho, wo) = (2 * h, 2 * w);
    let planes = b * c;
    let xd = x.data();
    let mut out = vec![0.0; planes * ho * wo];
    match mode {
        UpsampleMode::Nearest => {
            for p in 0..planes {
                for oi in 0..ho {
                    for oj in 0..wo {
                        out[(p * ho + oi) * wo + oj] = xd[(p * h + oi / 2) * w + oj / 2];
                    }
                }
            }
            let n_in = x.numel();
            Ok(x.tape().push(vec![b, c, ho, wo], out, &[x], move |g, _| {
                let mut dx = vec![0.0; n_in];
                for p in 0..planes {
                    for oi in 0..ho {
                        for oj in 0..wo {
                            dx[(p * h + oi / 2) * w + oj / 2] += g[(p * ho + oi) * wo + oj];
                        }
                    }
                }
                vec![Some(dx)]
            }))
        }
        UpsampleMode::Bilinear => {
            let th = Rc::new(bilinear_taps(h, ho));
            let tw = Rc::new(bilinear_taps(w, wo));
            for p in 0..planes {
                let plane = &xd[p * h * w..(p + 1) * h * w];
                for (oi, &(r0, r1, lh)) in th.iter().enumerate() {
                    for (oj, &(c0, c1, lw)) in tw.iter().enumerate() {
                        let top = (1.0 - lw) * plane[r0 * w + c0] + lw * plane[r0 * w + c1];
                        let bot = (1.0 - lw) * plane[r1 * w + c0] + lw * plane[r1 * w + c1];
                        out[(p * ho + oi) * wo + oj] = (1.0 - lh) * top + lh * bot;
                    }
                }
            }
            let n_in = x.numel();
            Ok(x.tape().push(vec![b, c, ho, wo], out, &[x], move |g, _| {
                let mut dx = vec![0.0; n_in];
                for p in 0..planes {
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oi, &(r0, r1, lh)) in th.iter().enumerate() {
                        for (oj, &(c0, c1, lw)) in tw.iter().enumerate() {
                            let gv = g[(p * ho + oi) * wo + oj];
                            d[r0 * w + c0] += gv * (1.0 - lh) * (1.0 - lw);
                            d[r0 * w + c1] += gv * (1.0 - lh) * lw;
                            d[r1 * w + c0] += gv * lh * (1.0 - lw);
                            d[r1 * w + c1] += gv * lh * lw;
                        }
                    }
                }
                vec![Some(dx)]
            }))
        }
    }
}

/// Per-channel statistics of `[B, C, H, W]` over batch and space:
/// (mean, biased variance).
fn channel_stats(x: &[f64], b: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            s += x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                .iter()
                .sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for bi in 0..b {
            v += x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                .iter()
                .map(|&t| (t - mu) * (t - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// Output of a train-mode normalization: the normalized tensor plus batch
/// mean and unbiased batch variance for the running-statistics update.
pub struct BatchNormOutput {
    pub y: Var,
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

/// Normalize with batch statistics, then scale by `gamma` and shift by `beta`.
pub fn batch_norm_train(x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<BatchNormOutput> {
    let (b, c, h, w) = dims4(x, "batch_norm")?;
    check_affine(gamma, beta, c)?;
    let hw = h * w;
    let count = b * hw;
    if count < 2 {
        return Err(Error::DegenerateStatistics(format!(
            "train-mode batch norm needs at least 2 values per channel, got {count}"
        )));
    }
    let xd = x.data();
    let (mean, var) = channel_stats(xd, b, c, hw);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let gd = gamma.data_rc();
    let bd = beta.data();
    let mut xhat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            for i in off..off + hw {
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                y[i] = gd[ch] * xhat[i] + bd[ch];
            }
        }
    }
    let xhat = Rc::new(xhat);
    let m = count as f64;
    let unbiased_var = var.iter().map(|v| v * m / (m - 1.0)).collect();
    let yv = x
        .tape()
        .push(vec![b, c, h, w], y, &[x, gamma, beta], move |g, need| {
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * hw;
                    for i in off..off + hw {
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                }
            }
            let dx = need[0].then(|| {
                let mut dx = vec![0.0; g.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        let k = gd[ch] * inv_std[ch] / m;
                        for i in off..off + hw {
                            dx[i] = k * (m * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                        }
                    }
                }
                dx
            });
            vec![dx, Some(dgamma), Some(dbeta)]
        });
    Ok(BatchNormOutput {
        y: yv,
        mean,
        unbiased_var,
    })
}

/// Normalize with fixed statistics: `gamma·(x − mean)/√(var + eps) + beta`.
pub fn batch_norm_eval(
    x: &Var,
    gamma: &Var,
    beta: &Var,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Var> {
    let (b, c, h, w) = dims4(x, "batch_norm")?;
    check_affine(gamma, beta, c)?;
    if mean.len() != c || var.len() != c {
        return Err(Error::Dimension(format!(
            "running statistics of length {}/{} for {c} channels",
            mean.len(),
            var.len()
        )));
    }
    let hw = h * w;
    let xd = x.data();
    let inv_std: Rc<Vec<f64>> = Rc::new(var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect());
    let mean: Rc<Vec<f64>> = Rc::new(mean.to_vec());
    let gd = gamma.data_rc();
    let bd = beta.data();
    let xs = x.data_rc();
    let mut y = vec![0.0; xd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            for i in off..off + hw {
                y[i] = gd[ch] * (xd[i] - mean[ch]) * inv_std[ch] + bd[ch];
            }
        }
    }
    Ok(x.tape()
        .push(vec![b, c, h, w], y, &[x, gamma, beta], move |g, need| {
            let mut dx = need[0].then(|| vec![0.0; g.len()]);
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * hw;
                    for i in off..off + hw {
                        dgamma[ch] += g[i] * (xs[i] - mean[ch]) * inv_std[ch];
                        dbeta[ch] += g[i];
                        if let Some(dx) = dx.as_mut() {
                            dx[i] = g[i] * gd[ch] * inv_std[ch];
                        }
                    }
                }
            }
            vec![dx, Some(dgamma), Some(dbeta)]
        }))
}

fn check_affine(gamma: &Var, beta: &Var, c: usize) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Dimension(format!(
            "batch norm affine parameters must be [{c}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}
