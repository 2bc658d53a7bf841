//! Mean-resizing: new embedding rows are drawn from a Gaussian fitted to the
//! existing rows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::params::ModelParams;
use crate::error::{GistError, Result};
use crate::tensor::{Scalar, Tensor};

/// Empirical mean and (population) covariance of the rows of `e`, in f64.
pub fn row_moments<T: Scalar>(e: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let (v, d) = (e.rows(), e.cols());
    let mut mu = vec![0.0; d];
    for r in 0..v {
        for (m, &x) in mu.iter_mut().zip(e.row(r)) {
            *m += x.as_f64();
        }
    }
    mu.iter_mut().for_each(|m| *m /= v as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for r in 0..v {
        for (c, (&x, &m)) in centered.iter_mut().zip(e.row(r).iter().zip(&mu)) {
            *c = x.as_f64() - m;
        }
        for i in 0..d {
            for j in 0..=i {
                cov[i * d + j] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            cov[i * d + j] /= v as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    (mu, cov)
}

/// Lower Cholesky factor of a symmetric `d × d` matrix.
fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let max_diag = (0..d).map(|i| a[i * d + i]).fold(0.0, f64::max);
    let floor = 1e-12 * max_diag;
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let dot: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            if i == j {
                let pivot = a[i * d + i] - dot;
                if !(pivot > floor) || pivot <= 0.0 {
                    return Err(GistError::CovarianceNotPd);
                }
                l[i * d + i] = pivot.sqrt();
            } else {
                l[i * d + j] = (a[i * d + j] - dot) / l[j * d + j];
            }
        }
    }
    Ok(l)
}

/// Appends `n_g` rows drawn i.i.d. from `N(μ, Σ + eps·I)` fitted to `base`.
/// The first `base.rows()` rows are copied unchanged.
pub fn extend_vocab_mean_resize<T: Scalar>(
    base: &Tensor<T>,
    n_g: usize,
    eps: f64,
    seed: u64,
) -> Result<Tensor<T>> {
    let (v0, d) = (base.rows(), base.cols());
    if v0 < 2 {
        return Err(GistError::InvalidConfig(format!("mean-resize needs at least 2 rows, got {v0}")));
    }
    if !(eps >= 0.0) {
        return Err(GistError::InvalidConfig(format!("ridge eps must be >= 0, got {eps}")));
    }
    let (mu, mut cov) = row_moments(base);
    for i in 0..d {
        cov[i * d + i] += eps;
    }
    let chol = cholesky(&cov, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = base.data.clone();
    data.reserve(n_g * d);
    let mut z = vec![0.0; d];
    for _ in 0..n_g {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        for i in 0..d {
            let offset: f64 = (0..=i).map(|k| chol[i * d + k] * z[k]).sum();
            data.push(T::from_f64_lossy(mu[i] + offset));
        }
    }
    Ok(Tensor::from_vec(&[v0 + n_g, d], data))
}

/// Adds `n_g` gist rows to a gist-free model. A tied head is the embedding
/// itself; an untied head is resized with the same sampler, independently.
pub fn extend_model_vocab<T: Scalar>(
    p: &ModelParams<T>,
    n_g: usize,
    eps: f64,
    seed: u64,
) -> Result<ModelParams<T>> {
    if p.config.n_g != 0 {
        return Err(GistError::InvalidConfig(format!(
            "model already carries {} gist rows",
            p.config.n_g
        )));
    }
    let mut out = p.clone();
    out.embed = extend_vocab_mean_resize(&p.embed, n_g, eps, seed)?;
    if let Some(head) = &p.lm_head {
        out.lm_head = Some(extend_vocab_mean_resize(head, n_g, eps, seed ^ 0x9e37_79b9_7f4a_7c15)?);
    }
    out.config.vocab_size += n_g;
    out.config.n_g = n_g;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reconstructs() {
        let a = vec![4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0];
        let l = cholesky(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| l[i * 3 + k] * l[j * 3 + k]).sum();
                assert!((v - a[i * 3 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_without_ridge_fails() {
        let base = Tensor::from_vec(&[3, 2], vec![1.0f32, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(matches!(
            extend_vocab_mean_resize(&base, 2, 0.0, 1),
            Err(GistError::CovarianceNotPd)
        ));
        assert!(extend_vocab_mean_resize(&base, 2, 1e-6, 1).is_ok());
    }

    #[test]
    fn deterministic_given_seed() {
        let base = Tensor::from_vec(&[4, 2], vec![1.0f32, 0.0, 0.0, 1.0, -1.0, 0.5, 0.3, -0.2]);
        let a = extend_vocab_mean_resize(&base, 3, 1e-3, 7).unwrap();
        let b = extend_vocab_mean_resize(&base, 3, 1e-3, 7).unwrap();
        let c = extend_vocab_mean_resize(&base, 3, 1e-3, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
