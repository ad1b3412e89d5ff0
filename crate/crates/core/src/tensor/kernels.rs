//! Dense loops behind the primitives. Row-major everywhere.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    for (a_row, c_row) in a.chunks_exact(k.max(1)).zip(c.chunks_exact_mut(n)).take(m) {
        if k == 0 {
            break;
        }
        for (&aik, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if aik == 0.0 {
                continue;
            }
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    }
}

/// `c[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub(crate) fn gemm_tn(a: &[f32], g: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if n == 0 || k == 0 {
        return;
    }
    for (a_row, g_row) in a.chunks_exact(k).zip(g.chunks_exact(n)).take(m) {
        for (&aik, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
            if aik == 0.0 {
                continue;
            }
            for (cj, &gj) in c_row.iter_mut().zip(g_row) {
                *cj += aik * gj;
            }
        }
    }
}

/// Transpose of a `rows×cols` matrix.
pub(crate) fn transpose2d(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Broadcast of two shapes under trailing-aligned rules with size-1 stretching.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index into a tensor of
/// `shape` that broadcasts to it.
pub(crate) fn broadcast_index_map(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

/// How an operand of `shape` lines up against `out_shape`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Layout {
    Same,
    /// The operand repeats every `n` elements of the output.
    Suffix(usize),
    General,
}

pub(crate) fn layout(shape: &[usize], out_shape: &[usize]) -> Layout {
    if shape == out_shape {
        return Layout::Same;
    }
    let leading_ones = shape.iter().take_while(|&&d| d == 1).count();
    let core = &shape[leading_ones..];
    if *core == out_shape[out_shape.len() - core.len()..] {
        return Layout::Suffix(shape.iter().product());
    }
    Layout::General
}

/// Sums `grad` (shaped like the output) down to an operand of `shape`.
pub(crate) fn reduce_to(grad: &[f32], out_shape: &[usize], shape: &[usize]) -> Vec<f32> {
    let n: usize = shape.iter().product();
    match layout(shape, out_shape) {
        Layout::Same => grad.to_vec(),
        Layout::Suffix(_) => {
            let mut acc = vec![0.0; n];
            for chunk in grad.chunks_exact(n.max(1)) {
                for (a, &g) in acc.iter_mut().zip(chunk) {
                    *a += g;
                }
            }
            acc
        }
        Layout::General => {
            let mut acc = vec![0.0; n];
            for (&g, &j) in grad.iter().zip(&broadcast_index_map(shape, out_shape)) {
                acc[j] += g;
            }
            acc
        }
    }
}

/// Sum with an `f64` accumulator.
pub(crate) fn sum_f64(x: &[f32]) -> f64 {
    x.iter().map(|&v| v as f64).sum()
}
