//! Slice-level numeric kernels shared by the graph and the plain tensor API.

use crate::segments::Segments;

/// `c (+)= op(a) · op(b)` where `op` optionally transposes. `a` is `m×k`
/// after the op, `b` is `k×n` after the op, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: out size");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the m×k, k×n and m×n row-major (or
    // transposed) buffers whose lengths were asserted above.
    unsafe {
        matrixmultiply::dgemm(
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

pub fn softmax_rows_inplace(x: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub fn log_softmax_rows_inplace(x: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
}

/// Layer norm without affine; returns per-row reciprocal standard deviations.
pub fn layer_norm_rows_inplace(x: &mut [f64], rows: usize, cols: usize, eps: f64) -> Vec<f64> {
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * rstd;
        }
        rstds.push(rstd);
    }
    rstds
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scaled dot-product attention over packed sequences, heads split along
/// columns. Returns the output and the attention probabilities laid out
/// per segment, per head, as `L×L` blocks.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    width: usize,
    segs: &Segments,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let prob_len: usize = segs.iter().map(|r| r.len() * r.len() * heads).sum();
    let mut probs = Vec::with_capacity(prob_len);
    let at = |row: usize, c0: usize| row * width + c0..row * width + c0 + dh;
    for r in segs.iter() {
        let l = r.len();
        for h in 0..heads {
            let c0 = h * dh;
            let base = probs.len();
            for i in r.clone() {
                let qi = &q[at(i, c0)];
                for j in r.clone() {
                    let kj = &k[at(j, c0)];
                    probs.push(dot(qi, kj) * scale);
                }
            }
            softmax_rows_inplace(&mut probs[base..], l, l);
            for (i, prow) in r.clone().zip(probs[base..].chunks_exact(l)) {
                let o = &mut out[at(i, c0)];
                for (j, &p) in r.clone().zip(prow) {
                    axpy(o, &v[at(j, c0)], p);
                }
            }
        }
    }
    (out, probs)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Gradients of [`attention_forward`] with respect to `q`, `k`, `v`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    width: usize,
    segs: &Segments,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let at = |row: usize, c0: usize| row * width + c0..row * width + c0 + dh;
    let mut base = 0;
    let mut dp = Vec::new();
    for r in segs.iter() {
        let l = r.len();
        for h in 0..heads {
            let c0 = h * dh;
            let p = &probs[base..base + l * l];
            dp.clear();
            for (i, prow) in r.clone().zip(p.chunks_exact(l)) {
                let go = &dout[at(i, c0)];
                for (j, &pij) in r.clone().zip(prow) {
                    axpy(&mut dv[at(j, c0)], go, pij);
                    dp.push(dot(go, &v[at(j, c0)]));
                }
            }
            for ((i, prow), dprow) in r.clone().zip(p.chunks_exact(l)).zip(dp.chunks_exact(l)) {
                let d = dot(dprow, prow);
                let qi = &q[at(i, c0)];
                for ((j, &pij), &dpij) in r.clone().zip(prow).zip(dprow) {
                    let ds = pij * (dpij - d) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    axpy(&mut dq[at(i, c0)], &k[at(j, c0)], ds);
                    axpy(&mut dk[at(j, c0)], qi, ds);
                }
            }
            base += l * l;
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_transpose_flags_match_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        let want = naive(2, 3, 4, &a, &b);
        let at = transpose(2, 3, &a);
        let bt = transpose(3, 4, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; 8];
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            gemm(2, 3, 4, aa, ta, bb, tb, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
