use crate::error::{Error, Result};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Trailing-axis broadcast of two shapes; size-1 axes stretch.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Dimension(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// For each flat output index of `out`, the flat index into an operand of
/// shape `src` broadcast against `out`.
pub(crate) fn broadcast_index_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n = numel(out);
    if src == out {
        return (0..n).collect();
    }
    let rank = out.len();
    let pad = rank - src.len();
    let src_strides = strides(src);
    // Stride of each output axis inside the source; zero where broadcast.
    let eff: Vec<usize> = (0..rank)
        .map(|i| {
            if i < pad || src[i - pad] == 1 {
                0
            } else {
                src_strides[i - pad]
            }
        })
        .collect();
    let mut map = Vec::with_capacity(n);
    let mut coord = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..n {
        map.push(idx);
        for ax in (0..rank).rev() {
            coord[ax] += 1;
            idx += eff[ax];
            if coord[ax] < out[ax] {
                break;
            }
            idx -= eff[ax] * out[ax];
            coord[ax] = 0;
        }
    }
    map
}

pub(crate) fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::Dimension(format!(
            "axis {axis} out of range for rank {rank}"
        )));
    }
    Ok(())
}

/// Split a shape around `axis` into (outer, axis length, inner).
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}
