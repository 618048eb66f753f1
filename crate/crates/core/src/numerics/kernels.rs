//! Dense CPU kernels shared by the recording tape and the inference path.
//!
//! Every kernel computes each output row from its own input row with a fixed
//! accumulation order, so a row evaluated alone (incremental decoding) is
//! bit-identical to the same row evaluated inside a larger batch.

use super::tensor::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if n == 0 {
        return;
    }
    for (a_row, c_row) in a.chunks_exact(k.max(1)).zip(c.chunks_exact_mut(n)).take(m) {
        if k == 0 {
            break;
        }
        for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if n == 0 || k == 0 {
        return;
    }
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)).take(m) {
        for (cv, b_row) in c_row.iter_mut().zip(b.chunks_exact(k)) {
            *cv += dot(a_row, b_row);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    if n == 0 || k == 0 {
        return;
    }
    for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(n)).take(m) {
        for (&av, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Inner product with eight independent partial sums.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Geometry of a multi-head attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub dim: usize,
    pub heads: usize,
    /// Query `i` may see key `j` only when `j <= i + (tk - tq)`.
    pub causal: bool,
}

impl AttnShape {
    pub(crate) fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    #[inline]
    fn key_limit(&self, i: usize) -> usize {
        if self.causal {
            (i + 1 + self.tk.saturating_sub(self.tq)).min(self.tk)
        } else {
            self.tk
        }
    }
}

/// Scaled dot-product attention over `heads` slices of the model dimension.
///
/// `q` is `[batch, tq, dim]`; `keys[b]` and `values[b]` are `[tk, dim]`.
/// A query row with no admissible key produces a zero output and zero
/// attention weights.
pub(crate) fn attention_forward<T: Real>(
    q: &[T],
    keys: &[&[T]],
    values: &[&[T]],
    valid: &[Option<&[bool]>],
    shape: AttnShape,
    out: &mut [T],
    mut probs: Option<&mut [T]>,
) {
    let AttnShape {
        batch,
        tq,
        tk,
        dim,
        heads,
        ..
    } = shape;
    let dh = shape.head_dim();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut scores = vec![0.0f64; tk];
    let mut allowed = vec![false; tk];
    for b in 0..batch {
        let (kb, vb) = (keys[b], values[b]);
        let mask = valid[b];
        for i in 0..tq {
            let limit = shape.key_limit(i);
            let mut any = false;
            for j in 0..tk {
                allowed[j] = j < limit && mask.is_none_or(|m| m[j]);
                any |= allowed[j];
            }
            for h in 0..heads {
                let qo = (b * tq + i) * dim + h * dh;
                let q_row = &q[qo..qo + dh];
                let o_row = &mut out[qo..qo + dh];
                o_row.iter_mut().for_each(|x| *x = T::zero());
                let p_off = ((b * heads + h) * tq + i) * tk;
                if !any {
                    if let Some(p) = probs.as_deref_mut() {
                        p[p_off..p_off + tk].iter_mut().for_each(|x| *x = T::zero());
                    }
                    continue;
                }
                let mut max = f64::NEG_INFINITY;
                for j in 0..tk {
                    if allowed[j] {
                        let s = (dot(q_row, &kb[j * dim + h * dh..j * dim + h * dh + dh]) * scale).f64();
                        scores[j] = s;
                        max = max.max(s);
                    }
                }
                let mut total = 0.0f64;
                for j in 0..tk {
                    if allowed[j] {
                        let e = (scores[j] - max).exp();
                        scores[j] = e;
                        total += e;
                    }
                }
                for j in 0..tk {
                    let p = if allowed[j] { T::of(scores[j] / total) } else { T::zero() };
                    if let Some(pr) = probs.as_deref_mut() {
                        pr[p_off + j] = p;
                    }
                    if allowed[j] {
                        axpy(p, &vb[j * dim + h * dh..j * dim + h * dh + dh], o_row);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`attention_forward`] for contiguous `[batch, t, dim]` inputs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    d_out: &[T],
    shape: AttnShape,
    dq: Option<&mut [T]>,
    dk: Option<&mut [T]>,
    dv: Option<&mut [T]>,
) {
    let AttnShape {
        batch,
        tq,
        tk,
        dim,
        heads,
        ..
    } = shape;
    let dh = shape.head_dim();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dq_buf = dq;
    let mut dk_buf = dk;
    let mut dv_buf = dv;
    let mut dp = vec![T::zero(); tk];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..tq {
                let p_off = ((b * heads + h) * tq + i) * tk;
                let p = &probs[p_off..p_off + tk];
                let qo = (b * tq + i) * dim + h * dh;
                let g = &d_out[qo..qo + dh];
                let mut weighted = 0.0f64;
                for j in 0..tk {
                    if p[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let ko = (b * tk + j) * dim + h * dh;
                    dp[j] = dot(g, &v[ko..ko + dh]);
                    weighted += (p[j] * dp[j]).f64();
                    if let Some(dv) = dv_buf.as_deref_mut() {
                        axpy(p[j], g, &mut dv[ko..ko + dh]);
                    }
                }
                let weighted = T::of(weighted);
                for j in 0..tk {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    let ko = (b * tk + j) * dim + h * dh;
                    if let Some(dq) = dq_buf.as_deref_mut() {
                        axpy(ds, &k[ko..ko + dh], &mut dq[qo..qo + dh]);
                    }
                    if let Some(dk) = dk_buf.as_deref_mut() {
                        axpy(ds, &q[qo..qo + dh], &mut dk[ko..ko + dh]);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let naive = |i: usize, j: usize| (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum::<f64>();

        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut c2, m, k, n);
        for i in 0..m {
            for j in 0..n {
                assert!((c[i * n + j] - naive(i, j)).abs() < 1e-12);
                assert!((c2[i * n + j] - naive(i, j)).abs() < 1e-12);
            }
        }
        // aᵀ·c has shape k×n
        let mut at_c = vec![0.0; k * n];
        gemm_tn(&a, &c, &mut at_c, m, k, n);
        for p in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| a[i * k + p] * c[i * n + j]).sum();
                assert!((at_c[p * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f32> = (0..13).map(|i| i as f32).collect();
        assert_eq!(dot(&a, &a), (0..13).map(|i| (i * i) as f32).sum::<f32>());
    }

    #[test]
    fn fully_masked_row_yields_zero_output() {
        let shape = AttnShape {
            batch: 1,
            tq: 1,
            tk: 2,
            dim: 2,
            heads: 1,
            causal: false,
        };
        let q = [1.0f32, 2.0];
        let k = [1.0f32, 0.0, 0.0, 1.0];
        let v = [5.0f32, 6.0, 7.0, 8.0];
        let mask = [false, false];
        let mut out = [9.0f32; 2];
        let mut probs = [9.0f32; 2];
        attention_forward(&q, &[&k], &[&v], &[Some(&mask)], shape, &mut out, Some(&mut probs));
        assert_eq!(out, [0.0, 0.0]);
        assert_eq!(probs, [0.0, 0.0]);
    }
}
