//! Slice-level numeric kernels shared by forward and backward rules.

pub(crate) fn add_assign(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// `out += a * b` for row-major `a: m x k`, `b: k x n`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a * b^T` for row-major `a: m x k`, `b: n x k`.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// `out += a^T * b` for row-major `a: m x k`, `b: m x n`; `out` is `k x n`.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row; masked entries (false) become exactly 0.
/// Returns `false` when every entry is masked.
pub(crate) fn softmax_row(x: &[f64], mask: Option<&[bool]>, out: &mut [f64]) -> bool {
    const MASK_PENALTY: f64 = -1e9;
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    if !(0..x.len()).any(keep) {
        return false;
    }
    let shifted = |j: usize| if keep(j) { x[j] } else { x[j] + MASK_PENALTY };
    let max = (0..x.len()).map(shifted).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        *o = (shifted(j) - max).exp();
        sum += *o;
    }
    for (j, o) in out.iter_mut().enumerate() {
        *o = if keep(j) { *o / sum } else { 0.0 };
    }
    true
}
