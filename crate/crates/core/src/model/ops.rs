//! Row-level kernels shared by the full forward pass and the incremental
//! decoder. Both paths call the same functions in the same order so cached
//! decoding reproduces full recomputation.

use crate::tensor::Scalar;

/// `out = x / rms(x) * gain`; returns `1/rms(x)`.
pub fn rmsnorm_row<T: Scalar>(x: &[T], gain: &[T], eps: T, out: &mut [T]) -> T {
    let d = T::from_usize(x.len()).unwrap();
    let ms = x.iter().map(|&v| v * v).sum::<T>() / d;
    let inv = T::one() / (ms + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}

/// Backward of [`rmsnorm_row`]: accumulates into `dx` and `dgain`.
pub fn rmsnorm_row_backward<T: Scalar>(
    x: &[T],
    gain: &[T],
    inv: T,
    dy: &[T],
    dx: &mut [T],
    dgain: &mut [T],
) {
    let d = T::from_usize(x.len()).unwrap();
    let mut dot = T::zero();
    for i in 0..x.len() {
        dgain[i] += dy[i] * x[i] * inv;
        dot += dy[i] * gain[i] * x[i];
    }
    let coef = inv * inv * inv * dot / d;
    for i in 0..x.len() {
        dx[i] += inv * dy[i] * gain[i] - x[i] * coef;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(u: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

pub fn gelu_grad<T: Scalar>(u: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + three * a * u * u)
}

/// Cos/sin table for one position, `head_dim / 2` entries each.
pub fn rope_angles<T: Scalar>(pos: usize, head_dim: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(half);
    let mut sin = Vec::with_capacity(half);
    for i in 0..half {
        let freq = base.powf(-(2.0 * i as f64) / head_dim as f64);
        let theta = pos as f64 * freq;
        cos.push(T::from_f64_lossy(theta.cos()));
        sin.push(T::from_f64_lossy(theta.sin()));
    }
    (cos, sin)
}

/// Rotates every head of `row` in place (half-split pairing). With
/// `inverse` the transpose rotation is applied, which is also the backward.
pub fn rope_row<T: Scalar>(row: &mut [T], n_heads: usize, cos: &[T], sin: &[T], inverse: bool) {
    let dh = row.len() / n_heads;
    let half = dh / 2;
    for h in 0..n_heads {
        let head = &mut row[h * dh..(h + 1) * dh];
        for i in 0..half {
            let (a, b) = (head[i], head[i + half]);
            let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
            head[i] = a * c - b * s;
            head[i + half] = a * s + b * c;
        }
    }
}

/// Multi-head attention for a single query over the key/value rows listed by
/// `keys` (ascending positions). Writes per-head probabilities into `probs`
/// (`n_heads × keys.len()`) and the head-concatenated output into `out`.
#[allow(clippy::too_many_arguments)]
pub fn attend_row<T: Scalar>(
    q: &[T],
    key_rows: &[T],
    value_rows: &[T],
    keys: &[usize],
    n_heads: usize,
    probs: &mut [T],
    out: &mut [T],
) {
    let d = q.len();
    let dh = d / n_heads;
    let nk = keys.len();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    out.fill(T::zero());
    for h in 0..n_heads {
        let qh = &q[h * dh..(h + 1) * dh];
        let p = &mut probs[h * nk..(h + 1) * nk];
        let mut max = T::neg_infinity();
        for (j, &k) in keys.iter().enumerate() {
            let kh = &key_rows[k * d + h * dh..k * d + (h + 1) * dh];
            let s = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum::<T>() * scale;
            p[j] = s;
            if s > max {
                max = s;
            }
        }
        let mut total = T::zero();
        for pj in p.iter_mut() {
            *pj = (*pj - max).exp();
            total += *pj;
        }
        for pj in p.iter_mut() {
            *pj /= total;
        }
        let oh = &mut out[h * dh..(h + 1) * dh];
        for (j, &k) in keys.iter().enumerate() {
            let vh = &value_rows[k * d + h * dh..k * d + (h + 1) * dh];
            for (o, &v) in oh.iter_mut().zip(vh) {
                *o += p[j] * v;
            }
        }
    }
}

/// Numerically stable log-softmax cross-entropy of one logit row; also
/// returns the softmax when `probs` is given.
pub fn cross_entropy_row<T: Scalar>(logits: &[T], target: usize, probs: Option<&mut [T]>) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + total.ln();
    if let Some(p) = probs {
        for (pi, &z) in p.iter_mut().zip(logits) {
            *pi = (z - lse).exp();
        }
    }
    lse - logits[target]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rope_inverse_undoes_rotation() {
        let (c, s) = rope_angles::<f64>(7, 8, 10_000.0);
        let orig: Vec<f64> = (0..16).map(|i| i as f64 * 0.3 - 2.0).collect();
        let mut x = orig.clone();
        rope_row(&mut x, 2, &c, &s, false);
        assert!(x.iter().zip(&orig).any(|(a, b)| (a - b).abs() > 1e-3));
        rope_row(&mut x, 2, &c, &s, true);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn position_zero_is_identity() {
        let (c, s) = rope_angles::<f64>(0, 4, 10_000.0);
        let mut x = vec![1.0, 2.0, 3.0, 4.0];
        rope_row(&mut x, 1, &c, &s, false);
        assert_eq!(x, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &u in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-5;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8, "u={u}");
        }
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let logits = vec![0.25f64; 10];
        let mut p = vec![0.0; 10];
        let loss = cross_entropy_row(&logits, 3, Some(&mut p));
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
