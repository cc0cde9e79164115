//! Raw numeric kernels over flat row-major buffers. No graph bookkeeping here.

use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(
                    "broadcast",
                    format!("incompatible shapes {a:?} and {b:?}"),
                ))
            }
        };
    }
    Ok(out)
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every flat index of `out_shape`, the flat index of the broadcast source
/// with shape `in_shape`.
pub fn broadcast_index_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let offset = n - in_shape.len();
    let in_strides = strides(in_shape);
    // Stride 0 along broadcast axes.
    let eff: Vec<usize> = (0..n)
        .map(|i| {
            if i < offset || in_shape[i - offset] == 1 {
                0
            } else {
                in_strides[i - offset]
            }
        })
        .collect();
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for d in (0..n).rev() {
            idx[d] += 1;
            src += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Sum `grad` (shaped like the broadcast output) back down to `in_shape`.
pub fn reduce_to_shape(grad: &[Scalar], out_shape: &[usize], in_shape: &[usize]) -> Vec<Scalar> {
    let in_len: usize = in_shape.iter().product();
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let mut acc = vec![0.0; in_len];
    if is_suffix_broadcast(out_shape, in_shape) {
        for (i, g) in grad.iter().enumerate() {
            acc[i % in_len] += g;
        }
        return acc;
    }
    for (g, &j) in grad.iter().zip(&broadcast_index_map(out_shape, in_shape)) {
        acc[j] += g;
    }
    acc
}

/// True when `in_shape` equals a trailing block of `out_shape` (bias-style broadcast),
/// so that out index `i` maps to `i % numel(in)`.
pub fn is_suffix_broadcast(out_shape: &[usize], in_shape: &[usize]) -> bool {
    let in_numel: usize = in_shape.iter().product();
    if in_numel == 0 {
        return false;
    }
    let trimmed: Vec<usize> = in_shape
        .iter()
        .copied()
        .skip_while(|&d| d == 1)
        .collect();
    trimmed.len() <= out_shape.len() && out_shape.ends_with(&trimmed)
}

/// out[m,n] = a[m,k] * b[k,n]
pub fn gemm_nn(a: &[Scalar], b: &[Scalar], out: &mut [Scalar], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] = a[m,k] * b[n,k]^T
pub fn gemm_nt(a: &[Scalar], b: &[Scalar], out: &mut [Scalar], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<Scalar>();
        }
    }
}

/// out[m,n] = a[k,m]^T * b[k,n]
pub fn gemm_tn(a: &[Scalar], b: &[Scalar], out: &mut [Scalar], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Swap two axes of a row-major buffer.
pub fn transpose_axes(data: &[Scalar], shape: &[usize], ax1: usize, ax2: usize) -> (Vec<Scalar>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax1, ax2);
    let in_strides = strides(shape);
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(ax1, ax2);
    let total = data.len();
    let n = shape.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut src = 0usize;
    for _ in 0..total {
        out.push(data[src]);
        for d in (0..n).rev() {
            idx[d] += 1;
            src += perm_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= perm_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// Split a shape around `axis` into (outer, axis_len, inner).
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Order-independent sum: values are sorted before accumulation, so any
/// permutation of the input gives a bitwise-identical result.
pub fn sorted_sum(values: &mut [Scalar]) -> Scalar {
    values.sort_by(|a, b| a.total_cmp(b));
    values.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape(&[2, 1, 5], &[3, 1]).unwrap(), vec![2, 3, 5]);
        assert!(broadcast_shape(&[4, 3], &[4]).is_err());
    }

    #[test]
    fn index_map_matches_manual() {
        let map = broadcast_index_map(&[2, 3], &[2, 1]);
        assert_eq!(map, vec![0, 0, 0, 1, 1, 1]);
        let map = broadcast_index_map(&[2, 3], &[3]);
        assert_eq!(map, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn suffix_detection() {
        assert!(is_suffix_broadcast(&[5, 4, 3], &[3]));
        assert!(is_suffix_broadcast(&[5, 4, 3], &[1, 4, 3]));
        assert!(!is_suffix_broadcast(&[5, 4, 3], &[4, 1]));
    }

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut nn = vec![0.0; 4];
        gemm_nn(&a, &b, &mut nn, 2, 3, 2);
        assert_eq!(nn, vec![58.0, 64.0, 139.0, 154.0]);
        let (bt, _) = transpose_axes(&b, &[3, 2], 0, 1);
        let mut nt = vec![0.0; 4];
        gemm_nt(&a, &bt, &mut nt, 2, 3, 2);
        assert_eq!(nt, nn);
        let (at, _) = transpose_axes(&a, &[2, 3], 0, 1);
        let mut tn = vec![0.0; 4];
        gemm_tn(&at, &b, &mut tn, 2, 3, 2);
        assert_eq!(tn, nn);
    }

    #[test]
    fn sorted_sum_is_order_free() {
        let mut a = vec![1e16, 1.0, -1e16, 3.0];
        let mut b = vec![3.0, -1e16, 1.0, 1e16];
        assert_eq!(sorted_sum(&mut a).to_bits(), sorted_sum(&mut b).to_bits());
    }
}
