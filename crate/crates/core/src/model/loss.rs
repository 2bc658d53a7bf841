use serde::{Deserialize, Serialize};

use super::forward::{backward, forward_train, ForwardOutput};
use super::ops::cross_entropy_row;
use super::params::ModelParams;
use crate::error::{GistError, Result};
use crate::mask::SentenceMask;
use crate::segment::{AnnotatedSequence, Role};
use crate::tensor::Scalar;

/// Which positions contribute to the next-token loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Every position that has a successor.
    All,
    /// Regular positions only.
    RegularOnly,
    /// Regular positions plus the last gist of every run.
    FinalGist,
}

impl LossMode {
    pub const ALL_MODES: [LossMode; 3] = [LossMode::All, LossMode::RegularOnly, LossMode::FinalGist];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::All => "all",
            LossMode::RegularOnly => "regular_only",
            LossMode::FinalGist => "final_gist",
        }
    }

    pub fn includes(self, role: Role, n_g: usize) -> bool {
        match self {
            LossMode::All => true,
            LossMode::RegularOnly => role == Role::Regular,
            LossMode::FinalGist => role == Role::Regular || role == Role::Gist(n_g as u16),
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = GistError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(LossMode::All),
            "regular_only" => Ok(LossMode::RegularOnly),
            "final_gist" => Ok(LossMode::FinalGist),
            other => Err(GistError::InvalidConfig(format!("unknown loss mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    /// Mean over contributing positions (NaN when none contribute).
    pub loss: T,
    /// Cross-entropy of every position `t < L-1` against `id(t+1)`.
    pub per_position: Vec<T>,
    pub contributing: Vec<bool>,
}

impl<T: Scalar> LossOutput<T> {
    pub fn count(&self) -> usize {
        self.contributing.iter().filter(|&&c| c).count()
    }

    pub fn sum(&self) -> T {
        self.per_position
            .iter()
            .zip(&self.contributing)
            .filter(|(_, &c)| c)
            .map(|(&l, _)| l)
            .sum()
    }
}

pub fn lm_loss<T: Scalar>(
    out: &ForwardOutput<T>,
    a: &AnnotatedSequence,
    mode: LossMode,
) -> Result<LossOutput<T>> {
    let l = a.len();
    if l < 2 {
        return Err(GistError::NothingToPredict(l));
    }
    let ids = a.ids();
    let per_position: Vec<T> = (0..l - 1)
        .map(|t| cross_entropy_row(out.logits.row(t), ids[t + 1] as usize, None))
        .collect();
    let contributing: Vec<bool> = a.roles()[..l - 1]
        .iter()
        .map(|&r| mode.includes(r, a.n_g()))
        .collect();
    let mut lo = LossOutput {
        loss: T::nan(),
        per_position,
        contributing,
    };
    let n = lo.count();
    if n > 0 {
        lo.loss = lo.sum() / T::from_usize(n).unwrap();
    }
    Ok(lo)
}

/// One training example: a processed sequence and its attention mask.
#[derive(Clone, Debug)]
pub struct Example {
    pub seq: AnnotatedSequence,
    pub mask: SentenceMask,
}

impl Example {
    pub fn new(seq: AnnotatedSequence) -> Example {
        let mask = crate::mask::build_mask(&seq);
        Example { seq, mask }
    }
}

#[derive(Clone, Debug)]
pub struct GradOutput<T> {
    /// Token-weighted mean loss over the batch under the requested mode.
    pub loss: T,
    pub loss_by_mode: [(LossMode, T); 3],
    pub grads: ModelParams<T>,
    pub tokens: usize,
}

/// Exact gradient of the mean per-token loss over every contributing
/// position in the batch.
pub fn grad<T: Scalar>(p: &ModelParams<T>, batch: &[Example], mode: LossMode) -> Result<GradOutput<T>> {
    let total: usize = batch
        .iter()
        .map(|ex| {
            let l = ex.seq.len();
            ex.seq.roles()[..l.saturating_sub(1)]
                .iter()
                .filter(|&&r| mode.includes(r, ex.seq.n_g()))
                .count()
        })
        .sum();
    let scale = if total > 0 {
        T::one() / T::from_usize(total).unwrap()
    } else {
        T::zero()
    };
    let mut grads = p.zeros_like();
    let mut loss_sum = T::zero();
    let mut mode_sums = [T::zero(); 3];
    let mut mode_counts = [0usize; 3];
    let vocab = p.config.vocab_size;
    for (index, ex) in batch.iter().enumerate() {
        let (out, trace) = forward_train(p, &ex.seq, &ex.mask)?;
        let lo = lm_loss(&out, &ex.seq, mode)?;
        if lo.per_position.iter().any(|x| !x.is_finite()) {
            return Err(GistError::NonFiniteLoss { index });
        }
        let l = ex.seq.len();
        let roles = &ex.seq.roles()[..l - 1];
        for (i, m) in LossMode::ALL_MODES.iter().enumerate() {
            for (&loss, &r) in lo.per_position.iter().zip(roles) {
                if m.includes(r, ex.seq.n_g()) {
                    mode_sums[i] += loss;
                    mode_counts[i] += 1;
                }
            }
        }
        loss_sum += lo.sum();
        let mut dlogits = vec![T::zero(); l * vocab];
        let ids = ex.seq.ids();
        for t in 0..l - 1 {
            if !lo.contributing[t] {
                continue;
            }
            let row = &mut dlogits[t * vocab..(t + 1) * vocab];
            cross_entropy_row(out.logits.row(t), ids[t + 1] as usize, Some(row));
            row[ids[t + 1] as usize] -= T::one();
            for g in row.iter_mut() {
                *g *= scale;
            }
        }
        backward(p, &trace, &dlogits, &mut grads);
    }
    let mean = |s: T, c: usize| if c > 0 { s / T::from_usize(c).unwrap() } else { T::nan() };
    Ok(GradOutput {
        loss: loss_sum * scale,
        loss_by_mode: [
            (LossMode::All, mean(mode_sums[0], mode_counts[0])),
            (LossMode::RegularOnly, mean(mode_sums[1], mode_counts[1])),
            (LossMode::FinalGist, mean(mode_sums[2], mode_counts[2])),
        ],
        grads,
        tokens: batch.iter().map(|e| e.seq.len()).sum(),
    })
}
