use serde::{Deserialize, Serialize};

use crate::error::{GistError, Result};
use crate::model::LossMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    /// Optional language-model training of the base vocabulary, causal mask,
    /// no gists. Stands in for a pretrained starting point.
    Pretrain,
    WarmupGist,
    Finetune,
    ColdDown,
}

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Pretrain => "pretrain",
            StageName::WarmupGist => "warmup_gist",
            StageName::Finetune => "finetune",
            StageName::ColdDown => "cold_down",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Freeze {
    AllButGistRows,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: StageName,
    pub token_budget: u64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub max_grad_norm: f64,
    pub freeze: Freeze,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "default_loss_mode")]
    pub loss_mode: LossMode,
}

fn default_loss_mode() -> LossMode {
    LossMode::All
}

impl StageConfig {
    /// `ceil(token_budget / (batch_size · max_seq_len))`.
    pub fn total_steps(&self) -> usize {
        let per_step = (self.batch_size * self.max_seq_len) as u64;
        self.token_budget.div_ceil(per_step) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GistError::InvalidConfig(format!("stage {}: {m}", self.name.as_str())));
        if self.batch_size == 0 || self.max_seq_len < 2 {
            return bad("batch_size must be positive and max_seq_len at least 2".into());
        }
        if !(self.min_lr >= 0.0 && self.max_lr >= self.min_lr && self.max_lr.is_finite()) {
            return bad(format!("need max_lr >= min_lr >= 0, got {} and {}", self.max_lr, self.min_lr));
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive".into());
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return bad("invalid AdamW hyperparameters".into());
        }
        if self.freeze == Freeze::AllButGistRows && self.name != StageName::WarmupGist {
            return bad("freeze all_but_gist_rows is only valid for warmup_gist".into());
        }
        Ok(())
    }

    /// The three-stage recipe with budgets multiplied by `token_scale`,
    /// batches divided by `batch_div` and sequences of `max_seq_len`.
    pub fn reference_stages(token_scale: f64, batch_div: usize, max_seq_len: usize) -> Vec<StageConfig> {
        let stage = |name, tokens: f64, batch: usize, max_lr, min_lr, warmup, schedule, clip, freeze| StageConfig {
            name,
            token_budget: (tokens * token_scale).round() as u64,
            batch_size: (batch / batch_div).max(1),
            max_seq_len,
            max_lr,
            min_lr,
            warmup_steps: warmup,
            schedule,
            max_grad_norm: clip,
            freeze,
            optimizer: AdamWConfig::default(),
            loss_mode: LossMode::All,
        };
        vec![
            stage(StageName::WarmupGist, 0.1e9, 64, 1e-4, 5e-5, 100, Schedule::Cosine, 1.0, Freeze::AllButGistRows),
            stage(StageName::Finetune, 2e9, 128, 1e-4, 5e-5, 1000, Schedule::Cosine, 2.0, Freeze::None),
            stage(StageName::ColdDown, 2e9, 512, 5e-5, 0.0, 100, Schedule::Linear, 2.0, Freeze::None),
        ]
    }
}

/// Learning rate at `step` (0-based): linear warmup from zero over
/// `warmup_steps`, then cosine or linear decay reaching `min_lr` at the
/// stage's final step.
pub fn lr_at(cfg: &StageConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.max_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let last = cfg.total_steps().saturating_sub(1);
    if last <= cfg.warmup_steps {
        return cfg.max_lr;
    }
    let progress = ((step - cfg.warmup_steps) as f64 / (last - cfg.warmup_steps) as f64).min(1.0);
    let span = cfg.max_lr - cfg.min_lr;
    match cfg.schedule {
        Schedule::Cosine => cfg.min_lr + span * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
        Schedule::Linear => cfg.max_lr - span * progress,
    }
}
