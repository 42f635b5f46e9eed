use std::rc::Rc;

use super::kernels::gemm;
use super::shape::{
    broadcast_index_map, broadcast_shape, check_axis, numel, split_at_axis, strides,
};
use super::Var;
use crate::error::{Error, Result};

/// Pointwise primitives. Binary variants broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Sigmoid,
    Exp,
    Log,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Var {
    /// Apply `op`; `other` is required for binary ops and ignored otherwise.
    pub fn elementwise(&self, op: Elementwise, other: Option<&Var>) -> Result<Var> {
        match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div => {
                let b =
                    other.ok_or_else(|| Error::Usage(format!("{op:?} needs a second operand")))?;
                self.binary(op, b)
            }
            Elementwise::Relu => Ok(self.relu()),
            Elementwise::Sigmoid => Ok(self.sigmoid()),
            Elementwise::Exp => Ok(self.exp()),
            Elementwise::Log => Ok(self.log()),
        }
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(Elementwise::Add, other)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(Elementwise::Sub, other)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(Elementwise::Mul, other)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(Elementwise::Div, other)
    }

    fn binary(&self, op: Elementwise, other: &Var) -> Result<Var> {
        let out_shape = broadcast_shape(self.shape(), other.shape())?;
        let n = numel(&out_shape);
        let a = self.data_rc();
        let b = other.data_rc();
        let same = self.shape() == other.shape();
        let (ma, mb) = if same {
            (None, None)
        } else {
            (
                Some(Rc::new(broadcast_index_map(self.shape(), &out_shape))),
                Some(Rc::new(broadcast_index_map(other.shape(), &out_shape))),
            )
        };
        let ia = |i: usize, m: &Option<Rc<Vec<usize>>>| m.as_ref().map_or(i, |m| m[i]);
        let f: fn(f64, f64) -> f64 = match op {
            Elementwise::Add => |x, y| x + y,
            Elementwise::Sub => |x, y| x - y,
            Elementwise::Mul => |x, y| x * y,
            Elementwise::Div => |x, y| x / y,
            _ => unreachable!(),
        };
        let data: Vec<f64> = if same {
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(a[ia(i, &ma)], b[ia(i, &mb)])).collect()
        };
        let (na, nb) = (a.len(), b.len());
        Ok(self
            .tape()
            .push(out_shape, data, &[self, other], move |g, need| {
                let mut ga = need[0].then(|| vec![0.0; na]);
                let mut gb = need[1].then(|| vec![0.0; nb]);
                for (i, &gi) in g.iter().enumerate() {
                    let (ja, jb) = (ia(i, &ma), ia(i, &mb));
                    let (da, db) = match op {
                        Elementwise::Add => (gi, gi),
                        Elementwise::Sub => (gi, -gi),
                        Elementwise::Mul => (gi * b[jb], gi * a[ja]),
                        Elementwise::Div => (gi / b[jb], -gi * a[ja] / (b[jb] * b[jb])),
                        _ => unreachable!(),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ja] += da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[jb] += db;
                    }
                }
                vec![ga, gb]
            }))
    }

    /// Unary map with derivative expressed through input `x` and output `y`.
    fn unary(&self, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
        let x = self.data_rc();
        let y: Rc<Vec<f64>> = Rc::new(x.iter().map(|&v| f(v)).collect());
        let y_saved = y.clone();
        self.tape().push(
            self.shape().to_vec(),
            y.as_ref().clone(),
            &[self],
            move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(x.iter().zip(y_saved.iter()))
                        .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                        .collect(),
                )]
            },
        )
    }

    /// max(0, x); derivative at exactly 0 is 0.
    pub fn relu(&self) -> Var {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(&self) -> Var {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Var {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn neg(&self) -> Var {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, s: f64) -> Var {
        let x = self.data_rc();
        let data = x.iter().map(|&v| v * s).collect();
        self.tape()
            .push(self.shape().to_vec(), data, &[self], move |g, _| {
                vec![Some(g.iter().map(|&gi| gi * s).collect())]
            })
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let data = self.data().iter().map(|&v| v + c).collect();
        self.tape()
            .push(self.shape().to_vec(), data, &[self], |g, _| {
                vec![Some(g.to_vec())]
            })
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let x = self.data_rc();
        let data = x.iter().map(|&v| v.clamp(lo, hi)).collect();
        self.tape()
            .push(self.shape().to_vec(), data, &[self], move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(&gi, &xi)| if xi > lo && xi < hi { gi } else { 0.0 })
                        .collect(),
                )]
            })
    }

    /// Matrix product of rank-2 or batched rank-3 operands. A rank-2 operand
    /// (or batch size 1) broadcasts across the other's batch.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let (ba, m, k) = as_batched(self.shape(), "matmul lhs")?;
        let (bb, k2, n) = as_batched(other.shape(), "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        if ba != bb && ba != 1 && bb != 1 {
            return Err(Error::Dimension(format!(
                "matmul batch dimensions differ: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let batch = ba.max(bb);
        let out_shape = if self.rank() == 3 || other.rank() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let a = self.data_rc();
        let b = other.data_rc();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ao = if ba == 1 { 0 } else { bi * m * k };
            let bo = if bb == 1 { 0 } else { bi * k * n };
            gemm(
                m,
                k,
                n,
                &a[ao..ao + m * k],
                false,
                &b[bo..bo + k * n],
                false,
                &mut out[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        Ok(self
            .tape()
            .push(out_shape, out, &[self, other], move |g, need| {
                let mut ga = need[0].then(|| vec![0.0; ba * m * k]);
                let mut gb = need[1].then(|| vec![0.0; bb * k * n]);
                for bi in 0..batch {
                    let go = &g[bi * m * n..(bi + 1) * m * n];
                    let ao = if ba == 1 { 0 } else { bi * m * k };
                    let bo = if bb == 1 { 0 } else { bi * k * n };
                    if let Some(ga) = ga.as_mut() {
                        // dA = dC · Bᵀ
                        gemm(
                            m,
                            n,
                            k,
                            go,
                            false,
                            &b[bo..bo + k * n],
                            true,
                            &mut ga[ao..ao + m * k],
                            true,
                        );
                    }
                    if let Some(gb) = gb.as_mut() {
                        // dB = Aᵀ · dC
                        gemm(
                            k,
                            m,
                            n,
                            &a[ao..ao + m * k],
                            true,
                            go,
                            false,
                            &mut gb[bo..bo + k * n],
                            true,
                        );
                    }
                }
                vec![ga, gb]
            }))
    }

    /// Softmax along `axis`, computed after subtracting the axis maximum.
    pub fn softmax(&self, axis: usize) -> Result<Var> {
        check_axis(axis, self.rank())?;
        if self.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(
                "softmax input contains non-finite values".into(),
            ));
        }
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mx = (0..len)
                    .map(|j| x[base + j * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..len {
                    let e = (x[base + j * inner] - mx).exp();
                    y[base + j * inner] = e;
                    s += e;
                }
                for j in 0..len {
                    y[base + j * inner] /= s;
                }
            }
        }
        let ys = Rc::new(y.clone());
        Ok(self
            .tape()
            .push(self.shape().to_vec(), y, &[self], move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|j| g[base + j * inner] * ys[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            gx[p] = ys[p] * (g[p] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elements) into {shape:?}",
                self.shape(),
                self.numel()
            )));
        }
        Ok(self
            .tape()
            .push(shape.to_vec(), self.data().to_vec(), &[self], |g, _| {
                vec![Some(g.to_vec())]
            }))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Dimension(format!(
                "invalid permutation {perm:?} for rank {rank}"
            )));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let map = Rc::new(permute_map(&in_shape, perm));
        let x = self.data();
        let data = map.iter().map(|&src| x[src]).collect();
        Ok(self.tape().push(out_shape, data, &[self], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for (o, &src) in map.iter().enumerate() {
                gx[src] = g[o];
            }
            vec![Some(gx)]
        }))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&self) -> Result<Var> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Dimension("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Sub-range `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var> {
        check_axis(axis, self.rank())?;
        if start >= end || end > self.shape()[axis] {
            return Err(Error::Dimension(format!(
                "slice {start}..{end} out of range for axis {axis} of {:?}",
                self.shape()
            )));
        }
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let width = end - start;
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = width;
        let x = self.data();
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&x[base + start * inner..base + end * inner]);
        }
        let total = self.numel();
        Ok(self.tape().push(out_shape, data, &[self], move |g, _| {
            let mut gx = vec![0.0; total];
            for o in 0..outer {
                let base = o * len * inner;
                gx[base + start * inner..base + end * inner]
                    .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(parts: &[&Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        check_axis(axis, first.rank())?;
        for p in parts {
            let ok = p.rank() == first.rank()
                && (0..first.rank()).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
            if !ok {
                return Err(Error::Dimension(format!(
                    "concat along axis {axis}: {:?} vs {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_len: usize = lens.iter().sum();
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total_len;
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let lens_c = lens.clone();
        Ok(first.tape().push(out_shape, data, parts, move |g, need| {
            let mut grads: Vec<Option<Vec<f64>>> = need
                .iter()
                .zip(&lens_c)
                .map(|(&n, &l)| n.then(|| Vec::with_capacity(outer * l * inner)))
                .collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens_c) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[pos..pos + l * inner]);
                    }
                    pos += l * inner;
                }
            }
            grads
        }))
    }

    /// Sum over `axes`; reduced axes are kept with length 1 when `keepdim`.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(axes, keepdim, false)
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(axes, keepdim, true)
    }

    pub fn sum(&self) -> Var {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce(&axes, false, false).expect("full reduction")
    }

    pub fn mean(&self) -> Var {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce(&axes, false, true).expect("full reduction")
    }

    fn reduce(&self, axes: &[usize], keepdim: bool, mean: bool) -> Result<Var> {
        let rank = self.rank();
        for &a in axes {
            check_axis(a, rank)?;
        }
        let in_shape = self.shape().to_vec();
        let kept_shape: Vec<usize> = (0..rank)
            .map(|i| if axes.contains(&i) { 1 } else { in_shape[i] })
            .collect();
        let out_shape: Vec<usize> = if keepdim {
            kept_shape.clone()
        } else {
            (0..rank)
                .filter(|i| !axes.contains(i))
                .map(|i| in_shape[i])
                .collect()
        };
        let map = Rc::new(broadcast_index_map(&kept_shape, &in_shape));
        let count = (self.numel() / numel(&kept_shape)) as f64;
        let factor = if mean { 1.0 / count } else { 1.0 };
        let mut data = vec![0.0; numel(&kept_shape)];
        for (i, &x) in self.data().iter().enumerate() {
            data[map[i]] += x;
        }
        if mean {
            data.iter_mut().for_each(|v| *v *= factor);
        }
        Ok(self.tape().push(out_shape, data, &[self], move |g, _| {
            vec![Some(map.iter().map(|&j| g[j] * factor).collect())]
        }))
    }
}

fn as_batched(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [m, k] => Ok((1, m, k)),
        [b, m, k] => Ok((b, m, k)),
        _ => Err(Error::Dimension(format!(
            "{what} must be rank 2 or 3, got {shape:?}"
        ))),
    }
}

/// Source flat index for each output position of a permutation.
fn permute_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let n = numel(&out_shape);
    let mut map = Vec::with_capacity(n);
    let mut coord = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..n {
        map.push(idx);
        for ax in (0..rank).rev() {
            coord[ax] += 1;
            idx += src_strides[ax];
            if coord[ax] < out_shape[ax] {
                break;
            }
            idx -= src_strides[ax] * out_shape[ax];
            coord[ax] = 0;
        }
    }
    map
}
