use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, PosEncoding};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

/// All learnable tensors. The same struct doubles as a gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    /// `V × d`; the last `n_g` rows are the gist embeddings.
    pub embed: Tensor<T>,
    pub pos_embed: Option<Tensor<T>>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    /// Present only for untied heads, `V × d`.
    pub lm_head: Option<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Gaussian init with `std`; residual output projections are scaled by
    /// `1/sqrt(2·n_layers)`, norm gains start at one.
    pub fn init(config: &ModelConfig, seed: u64, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut normal = |shape: &[usize], s: f64| {
            let dist = Normal::new(0.0, s).expect("valid std");
            let n = shape.iter().product();
            Tensor::from_vec(
                shape,
                (0..n).map(|_| T::from_f64_lossy(dist.sample(&mut rng))).collect(),
            )
        };
        let out_std = std / (2.0 * config.n_layers as f64).sqrt();
        let embed = normal(&[config.vocab_size, d], std);
        let pos_embed = (config.pos_encoding == PosEncoding::Learned)
            .then(|| normal(&[config.max_seq_len, d], std));
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::filled(&[d], T::one()),
                wq: normal(&[d, d], std),
                wk: normal(&[d, d], std),
                wv: normal(&[d, d], std),
                wo: normal(&[d, d], out_std),
                mlp_norm: Tensor::filled(&[d], T::one()),
                w_up: normal(&[d, config.d_ff], std),
                w_down: normal(&[config.d_ff, d], out_std),
            })
            .collect();
        let lm_head = (!config.tied_lm_head).then(|| normal(&[config.vocab_size, d], std));
        ModelParams {
            config: config.clone(),
            embed,
            pos_embed,
            layers,
            final_norm: Tensor::filled(&[d], T::one()),
            lm_head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor<T>| Tensor::zeros(&t.shape);
        ModelParams {
            config: self.config.clone(),
            embed: z(&self.embed),
            pos_embed: self.pos_embed.as_ref().map(z),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: z(&l.attn_norm),
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    mlp_norm: z(&l.mlp_norm),
                    w_up: z(&l.w_up),
                    w_down: z(&l.w_down),
                })
                .collect(),
            final_norm: z(&self.final_norm),
            lm_head: self.lm_head.as_ref().map(z),
        }
    }

    /// Output projection used for logits (the embedding when tied).
    pub fn head(&self) -> &Tensor<T> {
        self.lm_head.as_ref().unwrap_or(&self.embed)
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        if let Some(p) = &self.pos_embed {
            out.push(("pos_embed".into(), p));
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.extend([
                (format!("layers.{i}.attn_norm"), &l.attn_norm),
                (format!("layers.{i}.wq"), &l.wq),
                (format!("layers.{i}.wk"), &l.wk),
                (format!("layers.{i}.wv"), &l.wv),
                (format!("layers.{i}.wo"), &l.wo),
                (format!("layers.{i}.mlp_norm"), &l.mlp_norm),
                (format!("layers.{i}.w_up"), &l.w_up),
                (format!("layers.{i}.w_down"), &l.w_down),
            ]);
        }
        out.push(("final_norm".into(), &self.final_norm));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".into(), h));
        }
        out
    }

    /// Same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        if let Some(p) = &mut self.pos_embed {
            out.push(("pos_embed".into(), p));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend([
                (format!("layers.{i}.attn_norm"), &mut l.attn_norm),
                (format!("layers.{i}.wq"), &mut l.wq),
                (format!("layers.{i}.wk"), &mut l.wk),
                (format!("layers.{i}.wv"), &mut l.wv),
                (format!("layers.{i}.wo"), &mut l.wo),
                (format!("layers.{i}.mlp_norm"), &mut l.mlp_norm),
                (format!("layers.{i}.w_up"), &mut l.w_up),
                (format!("layers.{i}.w_down"), &mut l.w_down),
            ]);
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        if let Some(h) = &mut self.lm_head {
            out.push(("lm_head".into(), h));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            embed: self.embed.cast(),
            pos_embed: self.pos_embed.as_ref().map(Tensor::cast),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    mlp_norm: l.mlp_norm.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.as_ref().map(Tensor::cast),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }
}
