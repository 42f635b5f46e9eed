use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul};

use serde::{Deserialize, Serialize};

/// Arithmetic cost of a forward computation. `flops` counts multiplies and
/// adds separately; `macs` counts fused multiply-accumulates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub flops: u64,
    pub macs: u64,
}

impl OpCount {
    /// Convolution with bias producing `c_out × h_out × w_out`.
    pub fn conv(c_in: usize, c_out: usize, k: usize, h_out: usize, w_out: usize) -> Self {
        let hw = (h_out * w_out) as u64;
        let macs = (k * k * c_in * c_out) as u64 * hw;
        Self {
            flops: 2 * macs + c_out as u64 * hw,
            macs,
        }
    }

    /// Per-element affine normalization (scale and shift).
    pub fn batch_norm(c: usize, h: usize, w: usize) -> Self {
        let n = (c * h * w) as u64;
        Self {
            flops: 2 * n,
            macs: n,
        }
    }

    /// `rows` independent `x·W (+ b)` products.
    pub fn dense(rows: usize, d_in: usize, d_out: usize, bias: bool) -> Self {
        let macs = (rows * d_in * d_out) as u64;
        let b = if bias { (rows * d_out) as u64 } else { 0 };
        Self {
            flops: 2 * macs + b,
            macs,
        }
    }
}

impl Add for OpCount {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            flops: self.flops + o.flops,
            macs: self.macs + o.macs,
        }
    }
}

impl AddAssign for OpCount {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Mul<u64> for OpCount {
    type Output = Self;
    fn mul(self, n: u64) -> Self {
        Self {
            flops: self.flops * n,
            macs: self.macs * n,
        }
    }
}

impl Sum for OpCount {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}
