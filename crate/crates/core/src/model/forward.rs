//! Masked forward pass with an activation trace, and its exact backward.

use super::config::PosEncoding;
use super::ops::{
    attend_row, gelu, gelu_grad, rmsnorm_row, rmsnorm_row_backward, rope_angles, rope_row,
};
use super::params::ModelParams;
use crate::error::{GistError, Result};
use crate::mask::SentenceMask;
use crate::segment::AnnotatedSequence;
use crate::tensor::{matmul, Scalar, Tensor, Trans};

/// Keys and values of one layer after rotary, `L × d` each.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv<T> {
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// `L × V`.
    pub logits: Tensor<T>,
    pub kv: Option<Vec<LayerKv<T>>>,
}

/// Replaces the keys/values at `positions` with rows taken from `source`,
/// layer by layer, as if those entries had been computed elsewhere.
#[derive(Clone, Copy, Debug)]
pub struct KvPin<'a, T> {
    pub source: &'a [LayerKv<T>],
    pub positions: &'a [usize],
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a, T> {
    pub capture_kv: bool,
    pub pin: Option<KvPin<'a, T>>,
    /// Added to the input embedding at the given positions.
    pub embed_delta: &'a [(usize, Vec<T>)],
}

impl<T> Default for ForwardOptions<'_, T> {
    fn default() -> Self {
        ForwardOptions {
            capture_kv: false,
            pin: None,
            embed_delta: &[],
        }
    }
}

/// Flattened per-query key lists.
pub(crate) struct KeyLists {
    offsets: Vec<usize>,
    keys: Vec<usize>,
}

impl KeyLists {
    fn from_mask(m: &SentenceMask) -> KeyLists {
        let mut offsets = Vec::with_capacity(m.len() + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        for q in 0..m.len() {
            keys.extend(m.row(q)[..=q].iter().enumerate().filter(|(_, &a)| a).map(|(k, _)| k));
            offsets.push(keys.len());
        }
        KeyLists { offsets, keys }
    }

    fn of(&self, q: usize) -> &[usize] {
        &self.keys[self.offsets[q]..self.offsets[q + 1]]
    }
}

struct LayerTrace<T> {
    x_in: Vec<T>,
    inv1: Vec<T>,
    n1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    h: Vec<T>,
    inv2: Vec<T>,
    n2: Vec<T>,
    up: Vec<T>,
    act: Vec<T>,
}

/// Activations kept for [`backward`].
pub struct Trace<T> {
    ids: Vec<u32>,
    keys: KeyLists,
    cos: Vec<Vec<T>>,
    sin: Vec<Vec<T>>,
    layers: Vec<LayerTrace<T>>,
    x_final: Vec<T>,
    inv_f: Vec<T>,
    n_f: Vec<T>,
}

pub fn forward<T: Scalar>(
    p: &ModelParams<T>,
    a: &AnnotatedSequence,
    m: &SentenceMask,
) -> Result<ForwardOutput<T>> {
    forward_with(p, a.ids(), m, &ForwardOptions::default())
}

pub fn forward_with<T: Scalar>(
    p: &ModelParams<T>,
    ids: &[u32],
    m: &SentenceMask,
    opts: &ForwardOptions<'_, T>,
) -> Result<ForwardOutput<T>> {
    forward_impl(p, ids, m, opts).map(|(out, _)| out)
}

/// Forward pass that also returns the trace needed by [`backward`].
pub fn forward_train<T: Scalar>(
    p: &ModelParams<T>,
    a: &AnnotatedSequence,
    m: &SentenceMask,
) -> Result<(ForwardOutput<T>, Trace<T>)> {
    forward_impl(p, a.ids(), m, &ForwardOptions::default())
}

fn check_len<T: Scalar>(p: &ModelParams<T>, len: usize) -> Result<()> {
    if len > p.config.max_seq_len {
        return Err(GistError::LengthOverflow {
            len,
            max: p.config.max_seq_len,
        });
    }
    Ok(())
}

fn forward_impl<T: Scalar>(
    p: &ModelParams<T>,
    ids: &[u32],
    m: &SentenceMask,
    opts: &ForwardOptions<'_, T>,
) -> Result<(ForwardOutput<T>, Trace<T>)> {
    let cfg = &p.config;
    let l = ids.len();
    check_len(p, l)?;
    if m.len() != l {
        return Err(GistError::Shape(format!("mask of size {} for {l} tokens", m.len())));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(GistError::Shape(format!("token id {bad} outside vocab {}", cfg.vocab_size)));
    }
    let d = cfg.d_model;
    let dff = cfg.d_ff;
    let nh = cfg.n_heads;
    let eps = T::from_f64_lossy(cfg.norm_eps);
    let keys = KeyLists::from_mask(m);

    let mut x = vec![T::zero(); l * d];
    for (t, &id) in ids.iter().enumerate() {
        let row = &mut x[t * d..(t + 1) * d];
        row.copy_from_slice(p.embed.row(id as usize));
        if let Some(pe) = &p.pos_embed {
            for (o, &v) in row.iter_mut().zip(pe.row(t)) {
                *o += v;
            }
        }
    }
    for (pos, delta) in opts.embed_delta {
        for (o, &v) in x[pos * d..(pos + 1) * d].iter_mut().zip(delta) {
            *o += v;
        }
    }

    let (cos, sin): (Vec<Vec<T>>, Vec<Vec<T>>) = if cfg.pos_encoding == PosEncoding::Rotary {
        (0..l).map(|t| rope_angles(t, cfg.head_dim(), cfg.rope_base)).unzip()
    } else {
        (Vec::new(), Vec::new())
    };

    let mut layer_traces = Vec::with_capacity(cfg.n_layers);
    let mut captured = opts.capture_kv.then(Vec::new);
    for (li, lp) in p.layers.iter().enumerate() {
        let x_in = x.clone();
        let mut n1 = vec![T::zero(); l * d];
        let mut inv1 = vec![T::zero(); l];
        for t in 0..l {
            inv1[t] = rmsnorm_row(&x[t * d..(t + 1) * d], &lp.attn_norm.data, eps, &mut n1[t * d..(t + 1) * d]);
        }
        let mut q = vec![T::zero(); l * d];
        let mut k = vec![T::zero(); l * d];
        let mut v = vec![T::zero(); l * d];
        matmul(&n1, Trans::No, &lp.wq.data, Trans::No, &mut q, l, d, d, false);
        matmul(&n1, Trans::No, &lp.wk.data, Trans::No, &mut k, l, d, d, false);
        matmul(&n1, Trans::No, &lp.wv.data, Trans::No, &mut v, l, d, d, false);
        if !cos.is_empty() {
            for t in 0..l {
                rope_row(&mut q[t * d..(t + 1) * d], nh, &cos[t], &sin[t], false);
                rope_row(&mut k[t * d..(t + 1) * d], nh, &cos[t], &sin[t], false);
            }
        }
        if let Some(pin) = &opts.pin {
            let src = &pin.source[li];
            for &pos in pin.positions {
                k[pos * d..(pos + 1) * d].copy_from_slice(src.keys.row(pos));
                v[pos * d..(pos + 1) * d].copy_from_slice(src.values.row(pos));
            }
        }
        if let Some(c) = captured.as_mut() {
            c.push(LayerKv {
                keys: Tensor::from_vec(&[l, d], k.clone()),
                values: Tensor::from_vec(&[l, d], v.clone()),
            });
        }
        let mut probs = vec![T::zero(); keys.keys.len() * nh];
        let mut attn = vec![T::zero(); l * d];
        for t in 0..l {
            let ks = keys.of(t);
            let off = keys.offsets[t] * nh;
            attend_row(
                &q[t * d..(t + 1) * d],
                &k,
                &v,
                ks,
                nh,
                &mut probs[off..off + ks.len() * nh],
                &mut attn[t * d..(t + 1) * d],
            );
        }
        matmul(&attn, Trans::No, &lp.wo.data, Trans::No, &mut x, l, d, d, true);
        let h = x.clone();
        let mut n2 = vec![T::zero(); l * d];
        let mut inv2 = vec![T::zero(); l];
        for t in 0..l {
            inv2[t] = rmsnorm_row(&h[t * d..(t + 1) * d], &lp.mlp_norm.data, eps, &mut n2[t * d..(t + 1) * d]);
        }
        let mut up = vec![T::zero(); l * dff];
        matmul(&n2, Trans::No, &lp.w_up.data, Trans::No, &mut up, l, d, dff, false);
        let act: Vec<T> = up.iter().map(|&u| gelu(u)).collect();
        matmul(&act, Trans::No, &lp.w_down.data, Trans::No, &mut x, l, dff, d, true);
        layer_traces.push(LayerTrace {
            x_in,
            inv1,
            n1,
            q,
            k,
            v,
            probs,
            attn,
            h,
            inv2,
            n2,
            up,
            act,
        });
    }

    let mut n_f = vec![T::zero(); l * d];
    let mut inv_f = vec![T::zero(); l];
    for t in 0..l {
        inv_f[t] = rmsnorm_row(&x[t * d..(t + 1) * d], &p.final_norm.data, eps, &mut n_f[t * d..(t + 1) * d]);
    }
    let vocab = cfg.vocab_size;
    let mut logits = vec![T::zero(); l * vocab];
    matmul(&n_f, Trans::No, &p.head().data, Trans::Yes, &mut logits, l, d, vocab, false);

    let out = ForwardOutput {
        logits: Tensor::from_vec(&[l, vocab], logits),
        kv: captured,
    };
    let trace = Trace {
        ids: ids.to_vec(),
        keys,
        cos,
        sin,
        layers: layer_traces,
        x_final: x,
        inv_f,
        n_f,
    };
    Ok((out, trace))
}

/// Accumulates into `grads` the gradient of `Σ dlogits ⊙ logits`.
pub fn backward<T: Scalar>(
    p: &ModelParams<T>,
    trace: &Trace<T>,
    dlogits: &[T],
    grads: &mut ModelParams<T>,
) {
    let cfg = &p.config;
    let l = trace.ids.len();
    let d = cfg.d_model;
    let dff = cfg.d_ff;
    let nh = cfg.n_heads;
    let dh = cfg.head_dim();
    let vocab = cfg.vocab_size;
    assert_eq!(dlogits.len(), l * vocab, "dlogits shape");
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    // Output head.
    let mut dn = vec![T::zero(); l * d];
    matmul(dlogits, Trans::No, &p.head().data, Trans::No, &mut dn, l, vocab, d, false);
    {
        let head_grad = grads.lm_head.as_mut().unwrap_or(&mut grads.embed);
        matmul(dlogits, Trans::Yes, &trace.n_f, Trans::No, &mut head_grad.data, vocab, l, d, true);
    }
    let mut dx = vec![T::zero(); l * d];
    for t in 0..l {
        let r = t * d..(t + 1) * d;
        rmsnorm_row_backward(
            &trace.x_final[r.clone()],
            &p.final_norm.data,
            trace.inv_f[t],
            &dn[r.clone()],
            &mut dx[r],
            &mut grads.final_norm.data,
        );
    }

    for (li, lp) in p.layers.iter().enumerate().rev() {
        let tr = &trace.layers[li];
        let gl = &mut grads.layers[li];

        // MLP: x_out = h + gelu(n2 W_up) W_down
        let mut dact = vec![T::zero(); l * dff];
        matmul(&dx, Trans::No, &lp.w_down.data, Trans::Yes, &mut dact, l, d, dff, false);
        matmul(&tr.act, Trans::Yes, &dx, Trans::No, &mut gl.w_down.data, dff, l, d, true);
        for (g, &u) in dact.iter_mut().zip(&tr.up) {
            *g *= gelu_grad(u);
        }
        let mut dn2 = vec![T::zero(); l * d];
        matmul(&dact, Trans::No, &lp.w_up.data, Trans::Yes, &mut dn2, l, dff, d, false);
        matmul(&tr.n2, Trans::Yes, &dact, Trans::No, &mut gl.w_up.data, d, l, dff, true);
        // dx now holds dL/dh (residual); add the norm path.
        for t in 0..l {
            let r = t * d..(t + 1) * d;
            rmsnorm_row_backward(
                &tr.h[r.clone()],
                &lp.mlp_norm.data,
                tr.inv2[t],
                &dn2[r.clone()],
                &mut dx[r],
                &mut gl.mlp_norm.data,
            );
        }

        // Attention: h = x_in + attn(n1) W_o
        let mut dattn = vec![T::zero(); l * d];
        matmul(&dx, Trans::No, &lp.wo.data, Trans::Yes, &mut dattn, l, d, d, false);
        matmul(&tr.attn, Trans::Yes, &dx, Trans::No, &mut gl.wo.data, d, l, d, true);

        let mut dq = vec![T::zero(); l * d];
        let mut dk = vec![T::zero(); l * d];
        let mut dv = vec![T::zero(); l * d];
        let mut dp = Vec::new();
        for t in 0..l {
            let ks = trace.keys.of(t);
            let nk = ks.len();
            let off = trace.keys.offsets[t] * nh;
            for h in 0..nh {
                let hs = h * dh..(h + 1) * dh;
                let probs = &tr.probs[off + h * nk..off + (h + 1) * nk];
                let dout = &dattn[t * d + hs.start..t * d + hs.end];
                dp.clear();
                let mut weighted = T::zero();
                for (j, &k) in ks.iter().enumerate() {
                    let vrow = &tr.v[k * d + hs.start..k * d + hs.end];
                    let g = dout.iter().zip(vrow).map(|(&a, &b)| a * b).sum::<T>();
                    dp.push(g);
                    weighted += probs[j] * g;
                    for (o, &go) in dv[k * d + hs.start..k * d + hs.end].iter_mut().zip(dout) {
                        *o += probs[j] * go;
                    }
                }
                for (j, &k) in ks.iter().enumerate() {
                    let ds = probs[j] * (dp[j] - weighted) * scale;
                    for i in hs.clone() {
                        dq[t * d + i] += ds * tr.k[k * d + i];
                        dk[k * d + i] += ds * tr.q[t * d + i];
                    }
                }
            }
        }
        if !trace.cos.is_empty() {
            for t in 0..l {
                rope_row(&mut dq[t * d..(t + 1) * d], nh, &trace.cos[t], &trace.sin[t], true);
                rope_row(&mut dk[t * d..(t + 1) * d], nh, &trace.cos[t], &trace.sin[t], true);
            }
        }
        let mut dn1 = vec![T::zero(); l * d];
        for (w, dw, g) in [
            (&lp.wq, &mut gl.wq, &dq),
            (&lp.wk, &mut gl.wk, &dk),
            (&lp.wv, &mut gl.wv, &dv),
        ] {
            matmul(g, Trans::No, &w.data, Trans::Yes, &mut dn1, l, d, d, true);
            matmul(&tr.n1, Trans::Yes, g, Trans::No, &mut dw.data, d, l, d, true);
        }
        for t in 0..l {
            let r = t * d..(t + 1) * d;
            rmsnorm_row_backward(
                &tr.x_in[r.clone()],
                &lp.attn_norm.data,
                tr.inv1[t],
                &dn1[r.clone()],
                &mut dx[r],
                &mut gl.attn_norm.data,
            );
        }
    }

    for (t, &id) in trace.ids.iter().enumerate() {
        let src = &dx[t * d..(t + 1) * d];
        for (o, &g) in grads.embed.row_mut(id as usize).iter_mut().zip(src) {
            *o += g;
        }
        if let Some(pe) = grads.pos_embed.as_mut() {
            for (o, &g) in pe.row_mut(t).iter_mut().zip(src) {
                *o += g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::build_mask;
    use crate::model::ModelConfig;
    use crate::segment::segment;
    use crate::vocab::{build_vocab, Scheme};

    fn model(pos: PosEncoding, vocab_size: usize, n_g: usize) -> ModelParams<f64> {
        let config = ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            vocab_size,
            n_g,
            max_seq_len: 16,
            pos_encoding: pos,
            tied_lm_head: true,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
        };
        ModelParams::init(&config, 1, 0.3)
    }

    #[test]
    fn unpunctuated_text_is_plain_causal() {
        let v = build_vocab(&["a b c d e."], Scheme::WhitespaceWord).unwrap().with_gists(1);
        let p = model(PosEncoding::Rotary, v.len(), 1);
        let a = segment(&v.encode("a b c d e"), &v, 1).unwrap();
        let m = build_mask(&a);
        assert_eq!(m, SentenceMask::causal(a.len()));
        let x = forward(&p, &a, &m).unwrap().logits;
        let y = forward_with(&p, a.ids(), &SentenceMask::causal(a.len()), &ForwardOptions::default()).unwrap().logits;
        assert_eq!(x, y);
    }

    #[test]
    fn later_tokens_do_not_change_earlier_logits() {
        for pos in [PosEncoding::Rotary, PosEncoding::Learned] {
            let p = model(pos, 9, 0);
            let m = SentenceMask::causal(5);
            let x = forward_with(&p, &[3, 4, 5, 6, 7], &m, &ForwardOptions::default()).unwrap().logits;
            let y = forward_with(&p, &[3, 4, 5, 6, 1], &m, &ForwardOptions::default()).unwrap().logits;
            assert_eq!(x.data[..4 * 9], y.data[..4 * 9]);
            assert_ne!(x.row(4), y.row(4));
        }
    }

    #[test]
    fn rejects_bad_input() {
        let p = model(PosEncoding::Learned, 9, 0);
        let long: Vec<u32> = vec![3; 17];
        assert!(forward_with(&p, &long, &SentenceMask::causal(17), &ForwardOptions::default()).is_err());
        assert!(forward_with(&p, &[3, 99], &SentenceMask::causal(2), &ForwardOptions::default()).is_err());
        assert!(forward_with(&p, &[3, 4], &SentenceMask::causal(3), &ForwardOptions::default()).is_err());
    }
}
