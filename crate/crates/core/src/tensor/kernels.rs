//! Raw float kernels shared by graph ops and the inference path.

/// `c = a · b` (or `c += a · b` when `accumulate`), with optional transposes.
///
/// `a` is logically `m × k` and `b` is `k × n` after transposition; storage is
/// row-major for the untransposed layout.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every buffer to exactly the extent the
    // strides address; matrixmultiply reads a/b and writes c within it.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// In-place softmax over contiguous rows of length `cols`. Entries with
/// `allowed[j] == false` get probability zero; a fully masked row is all zero.
pub fn softmax_rows(data: &mut [f32], cols: usize, allowed: Option<&dyn Fn(usize, usize) -> bool>) {
    for (r, row) in data.chunks_mut(cols).enumerate() {
        let mut max = f32::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if allowed.is_none_or(|f| f(r, j)) && v > max {
                max = v;
            }
        }
        if max == f32::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0f32;
        for (j, v) in row.iter_mut().enumerate() {
            if allowed.is_none_or(|f| f(r, j)) {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Layer norm over rows of length `cols`. Returns per-row `(mean, inv_std)`.
pub fn layer_norm_rows(
    x: &[f32],
    cols: usize,
    gain: &[f32],
    bias: &[f32],
    eps: f32,
    out: &mut [f32],
) -> Vec<(f32, f32)> {
    let mut stats = Vec::with_capacity(x.len() / cols);
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let mean = row.iter().sum::<f32>() / cols as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..cols {
            orow[j] = (row[j] - mean) * inv * gain[j] + bias[j];
        }
        stats.push((mean, inv));
    }
    stats
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permute axes: output axis `i` is input axis `perm[i]`.
pub fn permute(data: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    if rank == 0 {
        return (out_shape, data.to_vec());
    }
    let mut idx = vec![0usize; rank];
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut offset = 0usize;
    loop {
        for j in 0..inner {
            out.push(data[offset + j * inner_stride]);
        }
        // advance the outer multi-index
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Natural-log softmax of a single row.
pub fn log_softmax(row: &[f32]) -> Vec<f32> {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f32>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f32]) -> Vec<f32> {
        let mut t = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-5, "trans=({ta},{tb})");
            }
        }
    }

    #[test]
    fn permute_round_trips() {
        let shape = [2, 3, 4];
        let data: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let perm = [1, 2, 0];
        let (s, p) = permute(&data, &shape, &perm);
        assert_eq!(s, vec![3, 4, 2]);
        // out[i][j][k] = in[k][i][j]
        assert_eq!(p[8 + 2 * 2 + 1], data[12 + 4 + 2]);
        let (s2, back) = permute(&p, &s, &inverse_perm(&perm));
        assert_eq!(s2, shape.to_vec());
        assert_eq!(back, data);
    }

    #[test]
    fn fully_masked_softmax_row_is_zero() {
        let mut row = vec![1.0, 2.0, 3.0];
        softmax_rows(&mut row, 3, Some(&|_, _| false));
        assert_eq!(row, vec![0.0; 3]);
    }
}
