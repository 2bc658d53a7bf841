//! Single-token forward against an explicit key/value buffer, used for
//! incremental decoding. It runs the same kernels as the full forward so a
//! cached decode reproduces full recomputation.

use super::config::PosEncoding;
use super::ops::{attend_row, gelu, rmsnorm_row, rope_angles, rope_row};
use super::params::ModelParams;
use crate::error::{GistError, Result};
use crate::tensor::{matmul, Scalar, Trans};

/// Keys and values visible to the next query of one layer, flat `n × d`,
/// in ascending position order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvBuffer<T> {
    pub keys: Vec<T>,
    pub values: Vec<T>,
}

impl<T: Scalar> KvBuffer<T> {
    pub fn len(&self, d: usize) -> usize {
        self.keys.len() / d
    }

    pub fn push_row(&mut self, k: &[T], v: &[T]) {
        self.keys.extend_from_slice(k);
        self.values.extend_from_slice(v);
    }

    /// Keeps only the entries whose index satisfies `keep`, preserving order.
    pub fn retain_rows(&mut self, d: usize, mut keep: impl FnMut(usize) -> bool) {
        let n = self.len(d);
        let mut w = 0;
        for r in 0..n {
            if keep(r) {
                if w != r {
                    self.keys.copy_within(r * d..(r + 1) * d, w * d);
                    self.values.copy_within(r * d..(r + 1) * d, w * d);
                }
                w += 1;
            }
        }
        self.keys.truncate(w * d);
        self.values.truncate(w * d);
    }
}

/// Appends the token's key/value to every layer buffer, attends over the
/// whole buffer and returns the logit row.
pub fn forward_token<T: Scalar>(
    p: &ModelParams<T>,
    id: u32,
    pos: usize,
    buffers: &mut [KvBuffer<T>],
) -> Result<Vec<T>> {
    let cfg = &p.config;
    if buffers.len() != cfg.n_layers {
        return Err(GistError::CacheMismatch(format!(
            "{} layer buffers for {} layers",
            buffers.len(),
            cfg.n_layers
        )));
    }
    if id as usize >= cfg.vocab_size {
        return Err(GistError::Shape(format!("token id {id} outside vocab {}", cfg.vocab_size)));
    }
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let eps = T::from_f64_lossy(cfg.norm_eps);
    let mut x = p.embed.row(id as usize).to_vec();
    if let Some(pe) = &p.pos_embed {
        if pos >= cfg.max_seq_len {
            return Err(GistError::LengthOverflow {
                len: pos + 1,
                max: cfg.max_seq_len,
            });
        }
        for (o, &v) in x.iter_mut().zip(pe.row(pos)) {
            *o += v;
        }
    }
    let rope = (cfg.pos_encoding == PosEncoding::Rotary)
        .then(|| rope_angles::<T>(pos, cfg.head_dim(), cfg.rope_base));

    let mut n = vec![T::zero(); d];
    let mut q = vec![T::zero(); d];
    let mut k = vec![T::zero(); d];
    let mut v = vec![T::zero(); d];
    let mut attn = vec![T::zero(); d];
    let mut up = vec![T::zero(); cfg.d_ff];
    for (lp, buf) in p.layers.iter().zip(buffers.iter_mut()) {
        rmsnorm_row(&x, &lp.attn_norm.data, eps, &mut n);
        matmul(&n, Trans::No, &lp.wq.data, Trans::No, &mut q, 1, d, d, false);
        matmul(&n, Trans::No, &lp.wk.data, Trans::No, &mut k, 1, d, d, false);
        matmul(&n, Trans::No, &lp.wv.data, Trans::No, &mut v, 1, d, d, false);
        if let Some((cos, sin)) = &rope {
            rope_row(&mut q, nh, cos, sin, false);
            rope_row(&mut k, nh, cos, sin, false);
        }
        buf.push_row(&k, &v);
        let keys: Vec<usize> = (0..buf.len(d)).collect();
        let mut probs = vec![T::zero(); keys.len() * nh];
        attend_row(&q, &buf.keys, &buf.values, &keys, nh, &mut probs, &mut attn);
        matmul(&attn, Trans::No, &lp.wo.data, Trans::No, &mut x, 1, d, d, true);
        rmsnorm_row(&x, &lp.mlp_norm.data, eps, &mut n);
        matmul(&n, Trans::No, &lp.w_up.data, Trans::No, &mut up, 1, d, cfg.d_ff, false);
        for u in up.iter_mut() {
            *u = gelu(*u);
        }
        matmul(&up, Trans::No, &lp.w_down.data, Trans::No, &mut x, 1, cfg.d_ff, d, true);
    }
    rmsnorm_row(&x, &p.final_norm.data, eps, &mut n);
    let mut logits = vec![T::zero(); cfg.vocab_size];
    matmul(&n, Trans::No, &p.head().data, Trans::Yes, &mut logits, 1, d, cfg.vocab_size, false);
    Ok(logits)
}
