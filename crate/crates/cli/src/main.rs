use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gist_core::checkpoint::Checkpoint;
use gist_core::corpus::{read_text_dir, Corpus};
use gist_core::eval::{eval_report, EvalReport};
use gist_core::kv_cache::{cache_report, DecodeSession, Sampler};
use gist_core::mask::{build_mask, mask_density, BlockKind};
use gist_core::model::LossMode;
use gist_core::segment::segment;
use gist_core::shard::Shard;
use gist_core::synth::{self, SynthConfig};
use gist_core::train::{run_pipeline, PipelineOptions, TrainConfig};
use gist_core::vocab::{add_label_period, build_vocab, Scheme, Vocab};

const SHARD_FILE: &str = "shard.bin";
const VOCAB_FILE: &str = "vocab.json";

#[derive(Parser)]
#[command(name = "gist", version, about = "Sentence-level gist-token compression toolkit")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize a text directory and write an annotated shard.
    Preprocess(PreprocessArgs),
    /// Run the staged training pipeline.
    Train(TrainArgs),
    /// Compression rates, perplexity curves and cache counters.
    Eval(EvalArgs),
    /// Decode with the compressed KV cache.
    Generate(GenerateArgs),
    /// Print or render the attention mask of a text.
    MaskDump(MaskDumpArgs),
    /// Write a synthetic corpus whose sentences depend on their predecessor.
    SynthCorpus(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Byte,
    Word,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Scheme {
        match s {
            SchemeArg::Byte => Scheme::Byte,
            SchemeArg::Word => Scheme::WhitespaceWord,
        }
    }
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ng: usize,
    #[arg(long, value_enum, default_value = "byte")]
    scheme: SchemeArg,
    /// Reuse an existing vocabulary instead of building one.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Append a period to every "label: <token>" line first.
    #[arg(long)]
    label_period: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory of `preprocess`.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint without gists to start from instead of init + pretrain.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Continue from the latest stage boundary under --out.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of .txt documents.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    ng: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024")]
    prefixes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "all,regular_only,final_gist")]
    modes: Vec<String>,
    /// Report path; curves.csv is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, conflicts_with = "prompt_file")]
    prompt: Option<String>,
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    max_new_tokens: usize,
    #[arg(long, conflicts_with = "temp")]
    greedy: bool,
    #[arg(long)]
    temp: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prepend the BOS token to the prompt.
    #[arg(long)]
    bos: bool,
    /// Print cache counters and the achieved ratio as JSON.
    #[arg(long)]
    report_cache: bool,
    /// Write the output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskFormat {
    Ascii,
    Pgm,
}

#[derive(Args)]
struct MaskDumpArgs {
    #[arg(long, conflicts_with = "text_file")]
    text: Option<String>,
    #[arg(long)]
    text_file: Option<PathBuf>,
    #[arg(long)]
    ng: usize,
    #[arg(long, value_enum, default_value = "ascii")]
    format: MaskFormat,
    #[arg(long, value_enum, default_value = "word")]
    scheme: SchemeArg,
    /// Write the rendering here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    docs: usize,
    #[arg(long, default_value_t = 8)]
    sentences: usize,
    #[arg(long, default_value_t = 6)]
    slots: usize,
    #[arg(long, default_value_t = 24)]
    words: usize,
    #[arg(long, default_value_t = 0.85)]
    copy_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::new().parse_filters(level).format_timestamp(None).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Generate(a) => generate(a),
        Command::MaskDump(a) => mask_dump(a),
        Command::SynthCorpus(a) => synth_corpus(a),
    }
}

/// `GIST_SEED` overrides any configured seed.
fn seed_override(configured: u64) -> Result<u64> {
    match std::env::var("GIST_SEED") {
        Ok(v) => v.trim().parse().with_context(|| format!("GIST_SEED={v:?} is not an unsigned integer")),
        Err(_) => Ok(configured),
    }
}

fn guard_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.exists() && fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(true);
    if occupied && !force {
        return Err(gist_core::GistError::WouldOverwrite(dir.to_path_buf()).into());
    }
    if occupied {
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn guard_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(gist_core::GistError::WouldOverwrite(path.to_path_buf()).into());
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(gist_core::hash_bytes(&serde_json::to_vec(value)?))
}

#[derive(Serialize)]
struct PreprocessRecord<'a> {
    schema: &'static str,
    corpus: String,
    n_g: usize,
    scheme: Scheme,
    label_period: bool,
    vocab_hash: &'a str,
    documents: usize,
    raw_tokens: usize,
    positions: usize,
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    guard_dir(&a.out, a.force)?;
    let mut texts = read_text_dir(&a.corpus)?;
    if texts.is_empty() {
        return Err(gist_core::GistError::EmptyCorpus.into());
    }
    if a.label_period {
        for (_, t) in &mut texts {
            *t = add_label_period(t);
        }
    }
    let base = match &a.vocab {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Vocab::from_json(&text)?.with_gists(0)
        }
        None => {
            let docs: Vec<&str> = texts.iter().map(|(_, t)| t.as_str()).collect();
            build_vocab(&docs, a.scheme.into())?
        }
    };
    let vocab = base.with_gists(a.ng);
    let corpus = Corpus::from_texts(&texts, &vocab);
    let mut shard = Shard::from_corpus(&corpus, &vocab, a.ng)?;
    let record = PreprocessRecord {
        schema: "gist-preprocess/1",
        corpus: a.corpus.display().to_string(),
        n_g: a.ng,
        scheme: base.scheme(),
        label_period: a.label_period,
        vocab_hash: &shard.header.vocab_hash,
        documents: corpus.documents.len(),
        raw_tokens: corpus.total_token_count,
        positions: shard.total_positions(),
    };
    let hash = hash_json(&record)?;
    shard.header.config_hash = Some(hash.clone());
    write(&a.out.join(VOCAB_FILE), base.to_json().as_bytes())?;
    shard.save(&a.out.join(SHARD_FILE))?;
    let mut summary = serde_json::to_value(&record)?;
    summary["config_hash"] = hash.into();
    write(&a.out.join("preprocess.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    log::info!(
        "{} documents, {} raw tokens, {} positions after gist insertion",
        record.documents,
        record.raw_tokens,
        record.positions
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut cfg: TrainConfig = serde_json::from_str(&text).context("parsing train config")?;
    cfg.seed = seed_override(cfg.seed)?;
    let vocab_text = fs::read_to_string(a.corpus.join(VOCAB_FILE))
        .with_context(|| format!("{} is not a preprocess output directory", a.corpus.display()))?;
    let vocab = Vocab::from_json(&vocab_text)?;
    let shard = Shard::load(&a.corpus.join(SHARD_FILE))?;
    if a.resume {
        fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    } else {
        guard_dir(&a.out, a.force)?;
    }
    let base = a.base.as_deref().map(Checkpoint::load).transpose()?;
    let opts = PipelineOptions {
        resume: a.resume,
        stop_after: None,
    };
    let result = run_pipeline(&cfg, &vocab, &shard, base.as_ref(), &a.out, &opts)?;
    log::info!(
        "finished at step {} after {} tokens; boundaries: {}",
        result.checkpoint.meta.global_step,
        result.checkpoint.meta.tokens_seen,
        result.boundaries.join(", ")
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let modes = a
        .modes
        .iter()
        .map(|m| m.parse::<LossMode>())
        .collect::<Result<Vec<_>, _>>()?;
    guard_file(&a.out, a.force)?;
    let curves_path = a.out.with_file_name("curves.csv");
    guard_file(&curves_path, a.force)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let texts: Vec<String> = read_text_dir(&a.corpus)?.into_iter().map(|(_, t)| t).collect();
    if texts.is_empty() {
        return Err(gist_core::GistError::EmptyCorpus.into());
    }
    let mut report: EvalReport = eval_report(&ckpt, &texts, &a.ng, &a.prefixes, &modes)?;
    let text_hashes: Vec<String> = texts.iter().map(|t| gist_core::hash_bytes(t.as_bytes())).collect();
    report.config_hash = Some(hash_json(&(
        &ckpt.meta.config_hash,
        ckpt.vocab.hash(),
        &a.ng,
        &a.prefixes,
        &a.modes,
        text_hashes,
    ))?);
    write(&a.out, report.to_json()?.as_bytes())?;
    write(&curves_path, report.perplexity.to_csv().as_bytes())?;
    log::info!("wrote {} and {}", a.out.display(), curves_path.display());
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let prompt = match (&a.prompt, &a.prompt_file) {
        (Some(p), _) => p.clone(),
        (None, Some(f)) => fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?,
        (None, None) => String::new(),
    };
    let sampler = match a.temp {
        Some(t) if !a.greedy => Sampler::Temperature {
            temperature: t,
            seed: seed_override(a.seed)?,
        },
        _ => Sampler::Greedy,
    };
    if let Some(out) = &a.out {
        guard_file(out, a.force)?;
    }
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let vocab = &ckpt.vocab;
    let mut ids = Vec::new();
    if a.bos {
        ids.push(vocab.special().bos);
    }
    ids.extend(vocab.encode(&prompt));
    if ids.is_empty() {
        bail!("empty prompt; pass --prompt or --bos");
    }
    let eos = vocab.special().eos;
    let mut session = DecodeSession::new(&ckpt.params, vocab, &ids, sampler)?;
    for _ in 0..a.max_new_tokens {
        if session.decode_step()? == eos {
            break;
        }
    }
    let emitted: Vec<u32> = session.emitted().iter().copied().filter(|&id| id != eos).collect();
    let mut text = vocab.decode(&emitted);
    text.push('\n');
    if a.report_cache {
        text.push_str(&serde_json::to_string(&cache_report(session.cache()))?);
        text.push('\n');
    }
    match &a.out {
        Some(path) => write(path, text.as_bytes()),
        None => std::io::stdout().write_all(text.as_bytes()).context("writing stdout"),
    }
}

fn mask_dump(a: MaskDumpArgs) -> Result<()> {
    let text = match (&a.text, &a.text_file) {
        (Some(t), _) => t.clone(),
        (None, Some(f)) => fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?,
        (None, None) => bail!("pass --text or --text-file"),
    };
    if let Some(out) = &a.out {
        guard_file(out, a.force)?;
    }
    let vocab = build_vocab(&[text.as_str()], a.scheme.into())?.with_gists(a.ng);
    let seq = segment(&vocab.encode(&text), &vocab, a.ng)?;
    let mask = build_mask(&seq);
    let bytes = match a.format {
        MaskFormat::Ascii => {
            let mut s = mask.render_ascii()?;
            s.push('\n');
            s.push_str(&format!("density {:.6}\n", mask_density(&mask)));
            s.push_str("block q_start q_end k_start k_end kind\n");
            for (i, b) in mask.blocks().iter().enumerate() {
                let kind = match b.kind {
                    BlockKind::Full => "full",
                    BlockKind::Causal => "causal",
                };
                s.push_str(&format!("{i} {} {} {} {} {kind}\n", b.q.start, b.q.end, b.k.start, b.k.end));
            }
            s.into_bytes()
        }
        MaskFormat::Pgm => mask.render_pgm()?,
    };
    match &a.out {
        Some(path) => write(path, &bytes),
        None => std::io::stdout().write_all(&bytes).context("writing stdout"),
    }
}

fn synth_corpus(a: SynthArgs) -> Result<()> {
    guard_dir(&a.out, a.force)?;
    let cfg = SynthConfig {
        n_docs: a.docs,
        sentences_per_doc: a.sentences,
        slots: a.slots,
        n_words: a.words,
        copy_prob: a.copy_prob,
        seed: seed_override(a.seed)?,
        ..SynthConfig::default()
    };
    let docs = synth::generate(&cfg);
    synth::write_dir(&a.out, &docs)?;
    log::info!("wrote {} documents to {}", docs.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn overwrite_guards() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        guard_dir(&out, false).unwrap();
        fs::write(out.join("x"), "1").unwrap();
        assert!(guard_dir(&out, false).is_err());
        guard_dir(&out, true).unwrap();
        assert!(!out.join("x").exists());
        let file = dir.path().join("sub/r.json");
        guard_file(&file, false).unwrap();
        fs::write(&file, "{}").unwrap();
        assert!(guard_file(&file, false).is_err());
        guard_file(&file, true).unwrap();
    }
}
