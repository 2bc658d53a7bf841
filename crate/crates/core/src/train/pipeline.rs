use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{StageConfig, StageName};
use super::stage::{run_stage, MetricRow, TrainState, METRICS_HEADER};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{GistError, Result};
use crate::model::{extend_model_vocab, ModelConfig, ModelParams, PosEncoding};
use crate::segment::{strip_gists, AnnotatedSequence};
use crate::shard::Shard;
use crate::vocab::Vocab;

pub const TRAIN_SCHEMA: &str = "gist-train/1";
const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_pos")]
    pub pos_encoding: PosEncoding,
    #[serde(default = "default_true")]
    pub tied_lm_head: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_pos() -> PosEncoding {
    PosEncoding::Rotary
}

fn default_true() -> bool {
    true
}

fn default_init_std() -> f64 {
    0.02
}

fn default_resize_eps() -> f64 {
    1e-6
}

fn default_schema() -> String {
    TRAIN_SCHEMA.into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub seed: u64,
    pub n_g: usize,
    pub model: ModelSpec,
    #[serde(default = "default_resize_eps")]
    pub resize_eps: f64,
    /// Trains the base vocabulary without gists before extension. Ignored
    /// when a base checkpoint is supplied.
    #[serde(default)]
    pub pretrain: Option<StageConfig>,
    pub stages: Vec<StageConfig>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema != TRAIN_SCHEMA {
            return Err(GistError::InvalidConfig(format!("unknown schema {}", self.schema)));
        }
        if self.n_g == 0 {
            return Err(GistError::InvalidGistCount(0));
        }
        if let Some(p) = &self.pretrain {
            if p.name != StageName::Pretrain {
                return Err(GistError::InvalidConfig("pretrain stage must be named pretrain".into()));
            }
            p.validate()?;
        }
        let order = |n: StageName| match n {
            StageName::WarmupGist => Some(0),
            StageName::Finetune => Some(1),
            StageName::ColdDown => Some(2),
            StageName::Pretrain => None,
        };
        let mut last = None;
        for s in &self.stages {
            s.validate()?;
            let o = order(s.name).ok_or_else(|| {
                GistError::InvalidConfig("pretrain may not appear among the gist stages".into())
            })?;
            if last.is_some_and(|l| o <= l) {
                return Err(GistError::InvalidConfig(
                    "stages must be ordered warmup_gist, finetune, cold_down".into(),
                ));
            }
            last = Some(o);
        }
        if !(self.resize_eps >= 0.0) {
            return Err(GistError::InvalidConfig("resize_eps must be >= 0".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of every field.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn base_model_config(&self, base_vocab: &Vocab) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            vocab_size: base_vocab.len(),
            n_g: 0,
            max_seq_len: m.max_seq_len,
            pos_encoding: m.pos_encoding,
            tied_lm_head: m.tied_lm_head,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
        }
    }
}

/// Derived seeds, one per consumer.
fn sub_seed(seed: u64, what: &str) -> u64 {
    let h = Sha256::digest(format!("{seed}:{what}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().unwrap())
}

#[derive(Clone, Debug, Default)]
pub struct PipelineOptions {
    /// Continue from the latest stage boundary found under the output dir.
    pub resume: bool,
    /// Stop after this boundary has been written.
    pub stop_after: Option<StageName>,
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRow>,
    /// Boundaries in the order they were reached, including resumed ones.
    pub boundaries: Vec<String>,
}

pub fn boundary_dir(out: &Path, name: &str) -> PathBuf {
    out.join("ckpt").join(name)
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

fn parse_metrics(text: &str) -> Result<Vec<MetricRow>> {
    let bad = |d: String| GistError::format("metrics.csv", d);
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(bad("unexpected header".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(format!("bad row {line}")));
            }
            let stage = match f[1] {
                "pretrain" => StageName::Pretrain,
                "warmup_gist" => StageName::WarmupGist,
                "finetune" => StageName::Finetune,
                "cold_down" => StageName::ColdDown,
                other => return Err(bad(format!("unknown stage {other}"))),
            };
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(e.to_string()));
            Ok(MetricRow {
                step: f[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                stage,
                lr: num(f[2])?,
                loss_all: f[3].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                loss_regular: f[4].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                grad_norm: num(f[5])?,
                tokens_seen: f[6].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            })
        })
        .collect()
}

struct Boundary<'a> {
    out: &'a Path,
    config_hash: String,
    lineage: Vec<String>,
}

impl Boundary<'_> {
    fn save(&self, name: &str, state: &TrainState, vocab: &Vocab) -> Result<Checkpoint> {
        let ck = Checkpoint {
            params: state.params.clone(),
            vocab: vocab.clone(),
            meta: CheckpointMeta {
                seed_lineage: self.lineage.clone(),
                config_hash: Some(self.config_hash.clone()),
                stage: Some(name.to_string()),
                global_step: state.global_step,
                tokens_seen: state.tokens_seen,
            },
        };
        let dir = boundary_dir(self.out, name);
        ck.save(&dir)?;
        write_file(&dir.join(METRICS_FILE), metrics_csv(&state.metrics).as_bytes())?;
        write_file(&self.out.join(METRICS_FILE), metrics_csv(&state.metrics).as_bytes())?;
        let loss = state.metrics.last().map_or(String::from("-"), |r| r.loss_all.to_string());
        log::info!("boundary {name}: step {} tokens {} loss {loss}", state.global_step, state.tokens_seen);
        Ok(ck)
    }

    fn load(&self, name: &str, seed: u64) -> Result<Option<(TrainState, Vocab, Vec<String>)>> {
        let dir = boundary_dir(self.out, name);
        if !dir.join(crate::checkpoint::MANIFEST_FILE).exists() {
            return Ok(None);
        }
        let ck = Checkpoint::load(&dir)?;
        let stored = ck.meta.config_hash.clone().unwrap_or_default();
        if stored != self.config_hash {
            return Err(GistError::ConfigHashMismatch {
                stored,
                current: self.config_hash.clone(),
            });
        }
        let text = fs::read_to_string(dir.join(METRICS_FILE)).map_err(|e| GistError::io(&dir, e))?;
        let mut state = TrainState::new(ck.params, seed);
        state.global_step = ck.meta.global_step;
        state.tokens_seen = ck.meta.tokens_seen;
        state.metrics = parse_metrics(&text)?;
        Ok(Some((state, ck.vocab, ck.meta.seed_lineage)))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| GistError::io(path, e))
}

/// Pretrain (optional) → vocabulary extension → gist stages, writing a
/// checkpoint and the metrics so far at every boundary.
///
/// `vocab` is the base vocabulary without gists; `shard` must have been
/// segmented with it extended by `cfg.n_g` gists. `base` is an optional
/// checkpoint without gists that replaces init and pretraining.
pub fn run_pipeline(
    cfg: &TrainConfig,
    vocab: &Vocab,
    shard: &Shard,
    base: Option<&Checkpoint>,
    out: &Path,
    opts: &PipelineOptions,
) -> Result<PipelineResult> {
    cfg.validate()?;
    let base_vocab = vocab.with_gists(0);
    let gist_vocab = base_vocab.with_gists(cfg.n_g);
    if shard.header.n_g != cfg.n_g {
        return Err(GistError::InvalidConfig(format!(
            "shard has n_g = {} but config asks for {}",
            shard.header.n_g, cfg.n_g
        )));
    }
    shard.check_vocab(&gist_vocab)?;
    if let Some(ck) = base {
        if ck.params.config.n_g != 0 {
            return Err(GistError::InvalidConfig("base checkpoint already has gist rows".into()));
        }
        if ck.vocab.hash() != base_vocab.hash() {
            return Err(GistError::VocabHashMismatch {
                expected: base_vocab.hash(),
                found: ck.vocab.hash(),
            });
        }
    }
    let hash = cfg.hash();
    fs::create_dir_all(out).map_err(|e| GistError::io(out, e))?;
    write_file(
        &out.join("config.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "config": cfg, "config_hash": hash }))?.as_bytes(),
    )?;
    let mut b = Boundary {
        out,
        config_hash: hash,
        lineage: Vec::new(),
    };
    let seed = cfg.seed;

    // Boundary names in order; index 0 is the base model, 1 the extended one.
    let order: Vec<String> = ["base", "extended"]
        .into_iter()
        .map(String::from)
        .chain(cfg.stages.iter().map(|s| s.name.as_str().to_string()))
        .collect();
    let mut boundaries = Vec::new();
    let mut resumed = None;
    if opts.resume {
        for (i, name) in order.iter().enumerate().rev() {
            if let Some((state, _, lineage)) = b.load(name, seed)? {
                b.lineage = lineage;
                boundaries.extend(order[..=i].iter().cloned());
                log::info!("resuming after boundary {name}");
                resumed = Some((i + 1, state));
                break;
            }
        }
    }
    let (start, mut state) = match resumed {
        Some(r) => r,
        None => {
            let state = match base {
                Some(ck) => {
                    b.lineage = ck.meta.seed_lineage.clone();
                    b.lineage.push("base:checkpoint".into());
                    TrainState::new(ck.params.clone(), seed)
                }
                None => {
                    let init_seed = sub_seed(seed, "init");
                    b.lineage.push(format!("init:{init_seed}"));
                    let params =
                        ModelParams::init(&cfg.base_model_config(&base_vocab), init_seed, cfg.model.init_std);
                    let mut state = TrainState::new(params, seed);
                    if let Some(p) = &cfg.pretrain {
                        let data_seed = sub_seed(seed, "data:pretrain");
                        b.lineage.push(format!("pretrain:{data_seed}"));
                        state.seed = data_seed;
                        let docs: Vec<AnnotatedSequence> = shard
                            .documents
                            .iter()
                            .map(|d| AnnotatedSequence::unsegmented(strip_gists(d)))
                            .collect();
                        run_stage(&mut state, p, 0, &docs)
                            .map_err(|e| abort(&b, "pretrain", &state, &base_vocab, e))?;
                    }
                    state
                }
            };
            b.save("base", &state, &base_vocab)?;
            boundaries.push("base".to_string());
            if opts.stop_after == Some(StageName::Pretrain) {
                return finish(&b, state, base_vocab, boundaries);
            }
            (1, state)
        }
    };

    if start <= 1 {
        let resize_seed = sub_seed(seed, "resize");
        b.lineage.push(format!("resize:{resize_seed}"));
        state.params = extend_model_vocab(&state.params, cfg.n_g, cfg.resize_eps, resize_seed)?;
        b.save("extended", &state, &gist_vocab)?;
        boundaries.push("extended".into());
    }

    for (i, stage) in cfg.stages.iter().enumerate() {
        if i + 2 < start {
            continue;
        }
        let name = stage.name.as_str();
        let data_seed = sub_seed(seed, &format!("data:{name}"));
        b.lineage.push(format!("{name}:{data_seed}"));
        state.seed = data_seed;
        run_stage(&mut state, stage, i + 1, &shard.documents)
            .map_err(|e| abort(&b, name, &state, &gist_vocab, e))?;
        b.save(name, &state, &gist_vocab)?;
        boundaries.push(name.into());
        if opts.stop_after == Some(stage.name) {
            break;
        }
    }
    finish(&b, state, gist_vocab, boundaries)
}

fn abort(b: &Boundary<'_>, stage: &str, state: &TrainState, vocab: &Vocab, e: GistError) -> GistError {
    let name = format!("abort_{stage}");
    match b.save(&name, state, vocab) {
        Ok(_) => log::error!("stage {stage} failed; state written to {}", boundary_dir(b.out, &name).display()),
        Err(save_err) => log::error!("could not write abort snapshot: {save_err}"),
    }
    e
}

fn finish(b: &Boundary<'_>, state: TrainState, vocab: Vocab, boundaries: Vec<String>) -> Result<PipelineResult> {
    let checkpoint = b.save("final", &state, &vocab)?;
    Ok(PipelineResult {
        checkpoint,
        metrics: state.metrics,
        boundaries,
    })
}
