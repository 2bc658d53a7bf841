use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{lr_at, Freeze, StageConfig, StageName};
use crate::error::{GistError, Result};
use crate::model::{grad, Example, LossMode, ModelParams};
use crate::segment::AnnotatedSequence;

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub stage: StageName,
    pub lr: f64,
    pub loss_all: f32,
    pub loss_regular: f32,
    pub grad_norm: f64,
    pub tokens_seen: u64,
}

pub const METRICS_HEADER: &str = "step,stage,lr,loss_all,loss_regular,grad_norm,tokens_seen";

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.stage.as_str(),
            self.lr,
            self.loss_all,
            self.loss_regular,
            self.grad_norm,
            self.tokens_seen
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    /// AdamW first and second moments; reset at every stage entry.
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
    pub global_step: u64,
    pub tokens_seen: u64,
    pub seed: u64,
    pub metrics: Vec<MetricRow>,
}

impl TrainState {
    pub fn new(params: ModelParams<f32>, seed: u64) -> TrainState {
        TrainState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            params,
            global_step: 0,
            tokens_seen: 0,
            seed,
            metrics: Vec::new(),
        }
    }
}

/// Sentence-aligned training windows of at most `max_len` positions.
/// Windows shorter than two positions carry no target and are dropped.
pub fn make_windows(docs: &[AnnotatedSequence], max_len: usize) -> Result<Vec<AnnotatedSequence>> {
    let mut out = Vec::new();
    for d in docs {
        out.extend(d.windows(max_len)?.into_iter().filter(|w| w.len() >= 2));
    }
    Ok(out)
}

/// Indices of the windows used at `step`: consecutive slices of a stream of
/// per-epoch permutations, each seeded by `(seed, epoch)`.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cursor = step * batch;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    while out.len() < batch {
        let epoch = cursor / n;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[cursor % n]);
        cursor += 1;
    }
    out
}

/// Which coordinates of a tensor a stage may update.
#[derive(Clone, Debug, PartialEq)]
enum Trainable {
    All,
    Range(Range<usize>),
    Frozen,
}

impl Trainable {
    fn range(&self, len: usize) -> Range<usize> {
        match self {
            Trainable::All => 0..len,
            Trainable::Range(r) => r.clone(),
            Trainable::Frozen => 0..0,
        }
    }
}

/// Per tensor, in `tensors()` order.
fn trainable(p: &ModelParams<f32>, freeze: Freeze) -> Vec<Trainable> {
    let d = p.config.d_model;
    let rows = p.config.gist_rows();
    p.tensors()
        .iter()
        .map(|(name, _)| match freeze {
            Freeze::None => Trainable::All,
            Freeze::AllButGistRows if name == "embed" || name == "lm_head" => {
                Trainable::Range(rows.start * d..rows.end * d)
            }
            Freeze::AllButGistRows => Trainable::Frozen,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub steps: usize,
    pub final_loss: Option<f32>,
}

/// Runs `cfg.total_steps()` AdamW steps over `docs`. Under
/// `Freeze::AllButGistRows` only the gist rows of the embedding (and of an
/// untied head) are touched; every other coordinate is left bit-identical.
pub fn run_stage(
    state: &mut TrainState,
    cfg: &StageConfig,
    stage_index: usize,
    docs: &[AnnotatedSequence],
) -> Result<StageSummary> {
    cfg.validate()?;
    let total = cfg.total_steps();
    if total == 0 {
        return Ok(StageSummary {
            steps: 0,
            final_loss: None,
        });
    }
    if cfg.freeze == Freeze::AllButGistRows && state.params.config.n_g == 0 {
        return Err(GistError::InvalidConfig("stage freezes all but gist rows, but the model has none".into()));
    }
    let max_len = cfg.max_seq_len.min(state.params.config.max_seq_len);
    let windows = make_windows(docs, max_len)?;
    if windows.is_empty() {
        return Err(GistError::EmptyCorpus);
    }
    let examples: Vec<Example> = windows.into_iter().map(Example::new).collect();
    let stage_seed = state.seed ^ ((stage_index as u64 + 1) << 32);
    let mask = trainable(&state.params, cfg.freeze);
    state.m = state.params.zeros_like();
    state.v = state.params.zeros_like();
    let opt = cfg.optimizer;
    let mut final_loss = None;
    for step in 0..total {
        let idx = batch_indices(examples.len(), cfg.batch_size, stage_seed, step);
        let batch: Vec<Example> = idx.iter().map(|&i| examples[i].clone()).collect();
        let g = grad(&state.params, &batch, cfg.loss_mode)?;

        let mut grads = g.grads;
        let mut sq = 0f64;
        for ((_, t), sel) in grads.tensors().iter().zip(&mask) {
            sq += t.data[sel.range(t.data.len())].iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(GistError::NonFiniteLoss { index: 0 });
        }
        let scale = if norm > cfg.max_grad_norm { cfg.max_grad_norm / norm } else { 1.0 };
        if scale != 1.0 {
            for (_, t) in grads.tensors_mut() {
                t.data.iter_mut().for_each(|x| *x = (*x as f64 * scale) as f32);
            }
        }
        let clipped = norm * scale;

        let lr = lr_at(cfg, step);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        let params = state.params.tensors_mut();
        let ms = state.m.tensors_mut();
        let vs = state.v.tensors_mut();
        for (((((_, p), (_, m)), (_, v)), (_, gr)), sel) in
            params.into_iter().zip(ms).zip(vs).zip(grads.tensors()).zip(&mask)
        {
            let decay = if p.shape.len() == 2 { opt.weight_decay } else { 0.0 };
            for i in sel.range(p.data.len()) {
                let gi = gr.data[i] as f64;
                let mi = opt.beta1 * m.data[i] as f64 + (1.0 - opt.beta1) * gi;
                let vi = opt.beta2 * v.data[i] as f64 + (1.0 - opt.beta2) * gi * gi;
                m.data[i] = mi as f32;
                v.data[i] = vi as f32;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + opt.eps) + decay * p.data[i] as f64;
                p.data[i] = (p.data[i] as f64 - lr * update) as f32;
            }
        }
        state.global_step += 1;
        state.tokens_seen += g.tokens as u64;
        let loss_of = |mode: LossMode| g.loss_by_mode.iter().find(|(m, _)| *m == mode).map(|(_, l)| *l).unwrap();
        let row = MetricRow {
            step: state.global_step,
            stage: cfg.name,
            lr,
            loss_all: loss_of(LossMode::All),
            loss_regular: loss_of(LossMode::RegularOnly),
            grad_norm: clipped,
            tokens_seen: state.tokens_seen,
        };
        log::debug!("{}", row.to_csv());
        final_loss = Some(g.loss);
        state.metrics.push(row);
    }
    Ok(StageSummary {
        steps: total,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::segment;
    use crate::vocab::{build_vocab, Scheme};

    #[test]
    fn batches_walk_whole_permutations() {
        let n = 7;
        let mut seen = Vec::new();
        for step in 0..7 {
            seen.extend(batch_indices(n, 3, 42, step));
        }
        // 21 draws = three full epochs, each a permutation.
        for epoch in seen.chunks(n) {
            let mut e = epoch.to_vec();
            e.sort();
            assert_eq!(e, (0..n).collect::<Vec<_>>());
        }
        assert_eq!(batch_indices(n, 3, 42, 2), batch_indices(n, 3, 42, 2));
        assert_ne!(seen[..n], seen[n..2 * n]);
    }

    #[test]
    fn windows_drop_targetless_pieces() {
        let v = build_vocab(&["a b c d."], Scheme::WhitespaceWord).unwrap().with_gists(1);
        let docs = vec![
            segment(&v.encode("a b. c d."), &v, 1).unwrap(),
            segment(&v.encode("a"), &v, 1).unwrap(),
        ];
        let w = make_windows(&docs, 4).unwrap();
        assert_eq!(w.iter().map(AnnotatedSequence::len).collect::<Vec<_>>(), vec![4, 4]);
    }

    #[test]
    fn metric_rows_match_header() {
        let row = MetricRow {
            step: 3,
            stage: StageName::Finetune,
            lr: 0.5,
            loss_all: 1.25,
            loss_regular: 2.0,
            grad_norm: 0.75,
            tokens_seen: 96,
        };
        assert_eq!(row.to_csv(), "3,finetune,0.5,1.25,2,0.75,96");
        assert_eq!(row.to_csv().split(',').count(), METRICS_HEADER.split(',').count());
    }
}
