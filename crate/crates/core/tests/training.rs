//! Trainer behavior on small synthetic corpora.

use std::path::PathBuf;

use gist_core::corpus::Corpus;
use gist_core::model::{extend_model_vocab, grad, Example, LossMode, ModelConfig, ModelParams, PosEncoding};
use gist_core::shard::Shard;
use gist_core::synth::{generate, SynthConfig};
use gist_core::train::{
    lr_at, run_pipeline, run_stage, AdamWConfig, Freeze, ModelSpec, PipelineOptions, Schedule, StageConfig,
    StageName, TrainConfig, TrainState,
};
use gist_core::vocab::{build_vocab, Scheme, Vocab};

fn corpus(n_docs: usize, n_g: usize) -> (Vocab, Shard) {
    let docs = generate(&SynthConfig {
        n_docs,
        sentences_per_doc: 6,
        slots: 4,
        n_words: 12,
        ..SynthConfig::default()
    });
    let base = build_vocab(&docs, Scheme::WhitespaceWord).unwrap();
    let v = base.with_gists(n_g);
    let texts: Vec<(PathBuf, String)> =
        docs.into_iter().enumerate().map(|(i, d)| (PathBuf::from(format!("{i}.txt")), d)).collect();
    let shard = Shard::from_corpus(&Corpus::from_texts(&texts, &v), &v, n_g).unwrap();
    (base, shard)
}

fn stage(name: StageName, budget: u64, batch: usize, freeze: Freeze) -> StageConfig {
    StageConfig {
        name,
        token_budget: budget,
        batch_size: batch,
        max_seq_len: 32,
        max_lr: 3e-3,
        min_lr: 3e-4,
        warmup_steps: 2,
        schedule: Schedule::Cosine,
        max_grad_norm: 1.0,
        freeze,
        optimizer: AdamWConfig::default(),
        loss_mode: LossMode::All,
    }
}

fn model(vocab_size: usize, n_g: usize) -> ModelParams<f32> {
    let config = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        vocab_size,
        n_g: 0,
        max_seq_len: 64,
        pos_encoding: PosEncoding::Rotary,
        tied_lm_head: false,
        rope_base: 10_000.0,
        norm_eps: 1e-5,
    };
    let base = ModelParams::init(&config, 4, 0.05);
    extend_model_vocab(&base, n_g, 1e-6, 5).unwrap()
}

#[test]
fn warmup_stage_touches_only_gist_rows() {
    let (base, shard) = corpus(8, 2);
    let p = model(base.len(), 2);
    let before = p.clone();
    let mut state = TrainState::new(p, 1);
    let cfg = stage(StageName::WarmupGist, 2 * 4 * 32, 4, Freeze::AllButGistRows);
    let summary = run_stage(&mut state, &cfg, 1, &shard.documents).unwrap();
    assert_eq!(summary.steps, 2);
    let gist = before.config.gist_rows();
    let after = &state.params;
    for ((name, a), (_, b)) in before.tensors().into_iter().zip(after.tensors()) {
        for r in 0..a.shape[0] {
            let row_a: Vec<u32> = a.data[r * a.data.len() / a.shape[0]..(r + 1) * a.data.len() / a.shape[0]]
                .iter()
                .map(|x| x.to_bits())
                .collect();
            let row_b: Vec<u32> = b.data[r * b.data.len() / b.shape[0]..(r + 1) * b.data.len() / b.shape[0]]
                .iter()
                .map(|x| x.to_bits())
                .collect();
            let is_gist_row = (name == "embed" || name == "lm_head") && gist.contains(&r);
            if is_gist_row {
                assert_ne!(row_a, row_b, "{name} row {r} did not move");
            } else {
                assert_eq!(row_a, row_b, "{name} row {r} moved");
            }
        }
    }
}

#[test]
fn zero_budget_is_a_no_op() {
    let (base, shard) = corpus(4, 1);
    let p = model(base.len(), 1);
    let mut state = TrainState::new(p.clone(), 1);
    let s = run_stage(&mut state, &stage(StageName::Finetune, 0, 4, Freeze::None), 2, &shard.documents).unwrap();
    assert_eq!(s.steps, 0);
    assert_eq!(state.params, p);
    assert!(state.metrics.is_empty());
}

#[test]
fn step_count_clipping_and_schedule() {
    let (base, shard) = corpus(8, 1);
    let mut state = TrainState::new(model(base.len(), 1), 1);
    let mut cfg = stage(StageName::Finetune, 5 * 2 * 32 + 1, 2, Freeze::None);
    cfg.max_grad_norm = 0.05;
    run_stage(&mut state, &cfg, 2, &shard.documents).unwrap();
    assert_eq!(state.metrics.len(), 6);
    for (i, row) in state.metrics.iter().enumerate() {
        assert!(row.grad_norm <= cfg.max_grad_norm + 1e-6);
        assert_eq!(row.lr, lr_at(&cfg, i));
    }
    assert!(state.metrics.windows(2).all(|w| w[0].tokens_seen < w[1].tokens_seen));
}

#[test]
fn full_batch_descent_on_small_corpus() {
    let sentence = "the cat sat on the mat. the dog ran! a bird sang? the sun rose. ";
    let v = build_vocab(&[sentence], Scheme::WhitespaceWord).unwrap();
    let raw = v.encode(&sentence.repeat(13));
    let gv = v.with_gists(1);
    let doc = gist_core::segment::segment(&raw[..200], &gv, 1).unwrap();
    let windows = gist_core::train::make_windows(std::slice::from_ref(&doc), 64).unwrap();
    let examples: Vec<Example> = windows.iter().cloned().map(Example::new).collect();
    let mut cfg = stage(StageName::Finetune, 0, windows.len(), Freeze::None);
    cfg.max_seq_len = 64;
    cfg.token_budget = (50 * windows.len() * 64) as u64;
    let p = model(v.len(), 1);
    let initial = grad(&p, &examples, LossMode::All).unwrap().loss;
    let mut state = TrainState::new(p, 3);
    assert_eq!(run_stage(&mut state, &cfg, 2, &[doc]).unwrap().steps, 50);
    let last = grad(&state.params, &examples, LossMode::All).unwrap().loss;
    assert!(last < 0.8 * initial, "{initial} -> {last}");
}

fn pipeline_config(seed: u64) -> TrainConfig {
    let mut pre = stage(StageName::Pretrain, 4 * 4 * 32, 4, Freeze::None);
    pre.max_lr = 1e-2;
    TrainConfig {
        schema: gist_core::train::TRAIN_SCHEMA.into(),
        seed,
        n_g: 2,
        model: ModelSpec {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 32,
            pos_encoding: PosEncoding::Rotary,
            tied_lm_head: true,
            init_std: 0.05,
        },
        resize_eps: 1e-6,
        pretrain: Some(pre),
        stages: vec![
            stage(StageName::WarmupGist, 3 * 4 * 32, 4, Freeze::AllButGistRows),
            stage(StageName::Finetune, 4 * 4 * 32, 4, Freeze::None),
            StageConfig {
                schedule: Schedule::Linear,
                min_lr: 0.0,
                ..stage(StageName::ColdDown, 3 * 8 * 32, 8, Freeze::None)
            },
        ],
    }
}

#[test]
fn resume_from_boundary_matches_uninterrupted_run() {
    let (base, shard) = corpus(12, 2);
    let cfg = pipeline_config(7);
    let full_dir = tempfile::tempdir().unwrap();
    let full = run_pipeline(&cfg, &base, &shard, None, full_dir.path(), &PipelineOptions::default()).unwrap();
    assert_eq!(full.boundaries, vec!["base", "extended", "warmup_gist", "finetune", "cold_down"]);

    let dir = tempfile::tempdir().unwrap();
    let stopped = PipelineOptions {
        resume: false,
        stop_after: Some(StageName::Finetune),
    };
    run_pipeline(&cfg, &base, &shard, None, dir.path(), &stopped).unwrap();
    let resumed = PipelineOptions {
        resume: true,
        stop_after: None,
    };
    let second = run_pipeline(&cfg, &base, &shard, None, dir.path(), &resumed).unwrap();
    assert_eq!(second.checkpoint.params, full.checkpoint.params);
    assert_eq!(
        std::fs::read(dir.path().join("metrics.csv")).unwrap(),
        std::fs::read(full_dir.path().join("metrics.csv")).unwrap()
    );

    let other = pipeline_config(8);
    assert!(matches!(
        run_pipeline(&other, &base, &shard, None, dir.path(), &resumed),
        Err(gist_core::GistError::ConfigHashMismatch { .. })
    ));
}

#[test]
fn zero_budgets_return_the_extended_model() {
    let (base, shard) = corpus(4, 2);
    let mut cfg = pipeline_config(1);
    cfg.pretrain = None;
    for s in &mut cfg.stages {
        s.token_budget = 0;
    }
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&cfg, &base, &shard, None, dir.path(), &PipelineOptions::default()).unwrap();
    let extended = gist_core::checkpoint::Checkpoint::load(&dir.path().join("ckpt/extended")).unwrap();
    assert_eq!(out.checkpoint.params, extended.params);
    assert!(out.metrics.is_empty());
}

#[test]
fn stage_two_ends_below_stage_one() {
    let (base, shard) = corpus(200, 2);
    let mut cfg = pipeline_config(3);
    cfg.stages[0].token_budget = 20 * 4 * 32;
    cfg.stages[1].token_budget = 60 * 4 * 32;
    cfg.stages[1].max_lr = 1e-2;
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&cfg, &base, &shard, None, dir.path(), &PipelineOptions::default()).unwrap();
    let last = |name: StageName| {
        let rows: Vec<f32> = out.metrics.iter().filter(|r| r.stage == name).map(|r| r.loss_all).collect();
        rows[rows.len() - 5..].iter().sum::<f32>() / 5.0
    };
    assert!(last(StageName::Finetune) < last(StageName::WarmupGist));
}
