//! Slice-level numeric kernels shared by the tape and the incremental decoder.
//!
//! Every kernel walks rows in the same order whether it sees one row or many,
//! so an incremental pass reproduces a full pass bit for bit.

use super::Scalar;

/// `a (m x k) * b (k x n)`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == T::ZERO {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a (m x k) * b^T` where `b` is `n x k`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// `a^T * b` where `a` is `k x m` and `b` is `k x n`; accumulates into `out`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize, out: &mut [T]) {
    for t in 0..k {
        let brow = &b[t * n..(t + 1) * n];
        for i in 0..m {
            let av = a[t * m + i];
            if av == T::ZERO {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a (m x k) * b^T` where `b` is `n x k`.
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += a (m x k) * b (k x n)`.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == T::ZERO {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn add_bias_in_place<T: Scalar>(x: &mut [T], bias: &[T]) {
    let d = bias.len();
    for row in x.chunks_mut(d) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn softmax_in_place<T: Scalar>(x: &mut [T]) {
    let mut max = x[0];
    for &v in x.iter() {
        max = max.max(v);
    }
    let mut sum = T::ZERO;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub fn log_softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut max = x[0];
    for &v in x {
        max = max.max(v);
    }
    let mut sum = T::ZERO;
    for &v in x {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    x.iter().map(|&v| v - lse).collect()
}

/// Returns `(output, normalized input, reciprocal std per row)`.
pub fn layer_norm<T: Scalar>(
    x: &[T],
    d: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut out = vec![T::ZERO; x.len()];
    let mut xhat = vec![T::ZERO; x.len()];
    let mut rstd = vec![T::ZERO; rows];
    let inv_d = T::ONE / T::from_usize(d);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::ONE / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (out, xhat, rstd)
}

/// Backward of [`layer_norm`]; accumulates into `dx`, `dgain`, `dbias`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    d: usize,
    dx: Option<&mut [T]>,
    dgain: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let rows = dy.len() / d;
    if let Some(dg) = dgain {
        for r in 0..rows {
            for j in 0..d {
                dg[j] += dy[r * d + j] * xhat[r * d + j];
            }
        }
    }
    if let Some(db) = dbias {
        for r in 0..rows {
            for j in 0..d {
                db[j] += dy[r * d + j];
            }
        }
    }
    if let Some(dx) = dx {
        let inv_d = T::ONE / T::from_usize(d);
        let mut g = vec![T::ZERO; d];
        for r in 0..rows {
            let mut mean_g = T::ZERO;
            let mut mean_gx = T::ZERO;
            for j in 0..d {
                g[j] = dy[r * d + j] * gain[j];
                mean_g += g[j];
                mean_gx += g[j] * xhat[r * d + j];
            }
            mean_g *= inv_d;
            mean_gx *= inv_d;
            for j in 0..d {
                dx[r * d + j] += rstd[r] * (g[j] - mean_g - xhat[r * d + j] * mean_gx);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three * a * x * x)
}

/// Multi-head scaled dot-product attention.
///
/// `q` is `t x d`, `k` and `v` are `s x d`. With `causal`, query `i` sees keys
/// `0..=i + (s - t)`. Returns the output (`t x d`) and the attention weights
/// laid out as `heads x t x s` (zero where masked).
pub fn attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    t: usize,
    s: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::ONE / T::from_usize(dh).sqrt();
    let mut out = vec![T::ZERO; t * d];
    let mut probs = vec![T::ZERO; heads * t * s];
    let offset = s - t.min(s);
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..t {
            let lim = if causal { (i + offset + 1).min(s) } else { s };
            let p = &mut probs[(h * t + i) * s..(h * t + i) * s + lim];
            let qrow = &q[i * d + c0..i * d + c0 + dh];
            for (j, pj) in p.iter_mut().enumerate() {
                let krow = &k[j * d + c0..j * d + c0 + dh];
                let mut acc = T::ZERO;
                for (&a, &b) in qrow.iter().zip(krow) {
                    acc += a * b;
                }
                *pj = acc * scale;
            }
            softmax_in_place(p);
            let orow = &mut out[i * d + c0..i * d + c0 + dh];
            for (j, &pj) in p.iter().enumerate() {
                let vrow = &v[j * d + c0..j * d + c0 + dh];
                for (o, &vv) in orow.iter_mut().zip(vrow) {
                    *o += pj * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Backward of [`attention`]; accumulates into whichever gradients are given.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    t: usize,
    s: usize,
    d: usize,
    heads: usize,
    mut dq: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut dv: Option<&mut [T]>,
) {
    let dh = d / heads;
    let scale = T::ONE / T::from_usize(dh).sqrt();
    let mut dp = vec![T::ZERO; s];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..t {
            let p = &probs[(h * t + i) * s..(h * t + i + 1) * s];
            let dorow = &dout[i * d + c0..i * d + c0 + dh];
            let mut dot = T::ZERO;
            for j in 0..s {
                let pj = p[j];
                if pj == T::ZERO {
                    dp[j] = T::ZERO;
                    continue;
                }
                let vrow = &v[j * d + c0..j * d + c0 + dh];
                let mut acc = T::ZERO;
                for (&a, &b) in dorow.iter().zip(vrow) {
                    acc += a * b;
                }
                dp[j] = acc;
                dot += pj * acc;
                if let Some(dv) = dv.as_deref_mut() {
                    let dvrow = &mut dv[j * d + c0..j * d + c0 + dh];
                    for (o, &g) in dvrow.iter_mut().zip(dorow) {
                        *o += pj * g;
                    }
                }
            }
            for j in 0..s {
                let pj = p[j];
                if pj == T::ZERO {
                    continue;
                }
                let ds = pj * (dp[j] - dot) * scale;
                if let Some(dq) = dq.as_deref_mut() {
                    let krow = &k[j * d + c0..j * d + c0 + dh];
                    let dqrow = &mut dq[i * d + c0..i * d + c0 + dh];
                    for (o, &kv) in dqrow.iter_mut().zip(krow) {
                        *o += ds * kv;
                    }
                }
                if let Some(dk) = dk.as_deref_mut() {
                    let qrow = &q[i * d + c0..i * d + c0 + dh];
                    let dkrow = &mut dk[j * d + c0..j * d + c0 + dh];
                    for (o, &qv) in dkrow.iter_mut().zip(qrow) {
                        *o += ds * qv;
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
    fn transposed_products_agree_with_plain_matmul() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        // b^T is 4x3
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 4), c);
        // a^T is 3x2; (a^T)^T b = a b
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut out = vec![0.0; 8];
        matmul_tn_acc(&at, &c[..], 0, 2, 4, &mut out);
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn causal_attention_masks_future_keys() {
        let q = vec![0.3f64, -0.1, 0.2, 0.5];
        let k = vec![0.1f64, 0.4, -0.3, 0.2];
        let v = vec![1.0f64, 2.0, 3.0, 4.0];
        let (_, probs) = attention(&q, &k, &v, 2, 2, 2, 1, true);
        assert_eq!(probs[0], 1.0);
        assert_eq!(probs[1], 0.0);
        assert!((probs[2] + probs[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
