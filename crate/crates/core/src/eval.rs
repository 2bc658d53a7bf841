//! Compression-rate arithmetic, perplexity curves over prefix lengths, and
//! the aggregated evaluation report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{GistError, Result};
use crate::kv_cache::prefill;
use crate::mask::build_mask;
use crate::model::{forward, lm_loss, LossMode, ModelParams};
use crate::segment::{count_tokens, segment, AnnotatedSequence};
use crate::tensor::Scalar;
use crate::vocab::Vocab;

/// `n_regular / n_gist`, kept as an exact ratio of counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub n_regular: u64,
    pub n_gist: u64,
}

impl Rate {
    pub fn value(&self) -> f64 {
        self.n_regular as f64 / self.n_gist as f64
    }

    /// Rounded to two decimals, as printed in tables.
    pub fn two_decimals(&self) -> String {
        format!("{:.2}", self.value())
    }

    /// Exact test of `other == self / factor` by cross-multiplication.
    pub fn is_divided_by(&self, other: &Rate, factor: u64) -> bool {
        other.n_regular as u128 * factor as u128 * self.n_gist as u128
            == self.n_regular as u128 * other.n_gist as u128
    }
}

pub fn compression_rate(a: &AnnotatedSequence) -> Result<Rate> {
    let (n_regular, n_gist) = count_tokens(a);
    if n_gist == 0 {
        return Err(GistError::NoGistTokens);
    }
    Ok(Rate {
        n_regular: n_regular as u64,
        n_gist: n_gist as u64,
    })
}

/// Rate of a set of documents: counts are pooled before dividing.
pub fn corpus_rate(docs: &[AnnotatedSequence]) -> Result<Rate> {
    let (r, g) = docs.iter().map(count_tokens).fold((0, 0), |(r, g), (a, b)| (r + a, g + b));
    if g == 0 {
        return Err(GistError::NoGistTokens);
    }
    Ok(Rate {
        n_regular: r as u64,
        n_gist: g as u64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalvingRow {
    pub n_g: usize,
    pub rate: Rate,
    pub rate_2dp: String,
    /// Whether this rate is exactly half of the previous row's; `None` when
    /// the previous row is not at half this `n_g`.
    pub halves_previous: Option<bool>,
}

/// Segments the same raw documents under every `n_g` (powers of two,
/// ascending) and checks `R_c(2k) = R_c(k) / 2` exactly.
pub fn halving_property_check(raw: &[Vec<u32>], vocab: &Vocab, n_gs: &[usize]) -> Result<Vec<HalvingRow>> {
    if let Some(&bad) = n_gs.iter().find(|&&n| !n.is_power_of_two()) {
        return Err(GistError::InvalidConfig(format!("n_g list must be powers of two, got {bad}")));
    }
    if n_gs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(GistError::InvalidConfig("n_g list must be strictly increasing".into()));
    }
    let mut rows: Vec<HalvingRow> = Vec::new();
    for &n_g in n_gs {
        let v = vocab.with_gists(n_g);
        let docs = raw.iter().map(|d| segment(d, &v, n_g)).collect::<Result<Vec<_>>>()?;
        let rate = corpus_rate(&docs)?;
        let halves_previous = rows
            .last()
            .filter(|prev| n_g == 2 * prev.n_g)
            .map(|prev| prev.rate.is_divided_by(&rate, 2));
        rows.push(HalvingRow {
            n_g,
            rate,
            rate_2dp: rate.two_decimals(),
            halves_previous,
        });
    }
    Ok(rows)
}

/// Whether a chain of two-decimal values, each for twice the gists of the
/// one before, is consistent with a single exact rate `R` halved at every
/// step. Returns the interval of `R` values compatible with all entries.
pub fn printed_chain_consistent(printed: &[f64]) -> Option<(f64, f64)> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (i, &v) in printed.iter().enumerate() {
        let scale = (1u64 << i) as f64;
        lo = lo.max((v - 0.005) * scale);
        hi = hi.min((v + 0.005) * scale);
    }
    (lo <= hi).then_some((lo, hi))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub prefix: usize,
    pub mode: LossMode,
    /// `None` when no document is long enough.
    pub ppl: Option<f64>,
    pub positions: u64,
    pub documents: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityCurve {
    pub prefixes: Vec<usize>,
    pub points: Vec<CurvePoint>,
}

impl PerplexityCurve {
    pub fn get(&self, prefix: usize, mode: LossMode) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.prefix == prefix && p.mode == mode)
            .and_then(|p| p.ppl)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("prefix,mode,ppl,positions,documents\n");
        for p in &self.points {
            let ppl = p.ppl.map(|x| x.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{}\n", p.prefix, p.mode.name(), ppl, p.positions, p.documents));
        }
        s
    }
}

/// Positions of the processed sequence covering the first `raw_len` raw
/// tokens, including the gist run of a punctuation mark at the boundary.
fn processed_len(a: &AnnotatedSequence, raw_len: usize) -> usize {
    let mut seen = 0;
    for (t, role) in a.roles().iter().enumerate() {
        if !role.is_gist() {
            if seen == raw_len {
                return t;
            }
            seen += 1;
        }
    }
    a.len()
}

/// Perplexity per loss mode over the first `prefix` raw tokens of every
/// document, pooled over documents. A document shorter than a prefix is
/// skipped for that prefix. Each document needs one forward pass, at its
/// longest evaluated prefix: under a causal-subset mask the loss at a
/// position does not depend on anything after it.
pub fn perplexity_curve<T: Scalar>(
    p: &ModelParams<T>,
    vocab: &Vocab,
    raw_docs: &[Vec<u32>],
    prefixes: &[usize],
    modes: &[LossMode],
) -> Result<PerplexityCurve> {
    let n_g = p.config.n_g;
    if let Some(&bad) = prefixes.iter().find(|&&x| x > p.config.max_seq_len || x < 2) {
        return Err(GistError::InvalidConfig(format!(
            "prefix {bad} outside 2..={}",
            p.config.max_seq_len
        )));
    }
    let longest = prefixes.iter().copied().max().unwrap_or(0);
    // (sum, count, docs) per (prefix, mode).
    let mut acc: BTreeMap<(usize, usize), (f64, u64, u64)> = BTreeMap::new();
    for raw in raw_docs {
        let usable: Vec<usize> = prefixes.iter().copied().filter(|&x| x <= raw.len()).collect();
        if usable.is_empty() {
            continue;
        }
        let cut = longest.min(raw.len());
        let a = if n_g == 0 {
            AnnotatedSequence::unsegmented(raw[..cut].to_vec())
        } else {
            segment(&raw[..cut], vocab, n_g)?
        };
        let out = forward(p, &a, &build_mask(&a))?;
        let lo = lm_loss(&out, &a, LossMode::All)?;
        let roles = a.roles();
        for &prefix in &usable {
            let len = processed_len(&a, prefix);
            for (mi, mode) in modes.iter().enumerate() {
                let e = acc.entry((prefix, mi)).or_insert((0.0, 0, 0));
                for t in 0..len - 1 {
                    if mode.includes(roles[t], n_g) {
                        e.0 += lo.per_position[t].as_f64();
                        e.1 += 1;
                    }
                }
                e.2 += 1;
            }
        }
    }
    let mut points = Vec::new();
    for &prefix in prefixes {
        for (mi, &mode) in modes.iter().enumerate() {
            let (sum, count, docs) = acc.get(&(prefix, mi)).copied().unwrap_or((0.0, 0, 0));
            if docs == 0 {
                log::warn!("prefix {prefix} is longer than every document; skipped");
            }
            points.push(CurvePoint {
                prefix,
                mode,
                ppl: (count > 0).then(|| (sum / count as f64).exp()),
                positions: count,
                documents: docs,
            });
        }
    }
    Ok(PerplexityCurve {
        prefixes: prefixes.to_vec(),
        points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheSummary {
    pub documents: u64,
    pub processed_positions: u64,
    pub evicted_entries: u64,
    /// Largest peak over documents.
    pub max_peak_entries: u64,
    /// Mean over documents of processed / peak.
    pub mean_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub n_g: usize,
    pub stage: Option<String>,
    pub config_hash: Option<String>,
    pub vocab_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub checkpoint: CheckpointInfo,
    pub documents: u64,
    pub compression: Vec<HalvingRow>,
    pub halving_exact: bool,
    pub perplexity: PerplexityCurve,
    pub cache: Option<CacheSummary>,
    /// Hash of the evaluation settings, filled in by the caller.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub const REPORT_SCHEMA: &str = "gist-eval/1";

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<EvalReport> {
        let r: EvalReport = serde_json::from_str(text)?;
        if r.schema != REPORT_SCHEMA {
            return Err(GistError::format("report", format!("unknown schema {}", r.schema)));
        }
        Ok(r)
    }
}

/// Compression table for `n_gs`, perplexity curve of the checkpoint and
/// cache counters from prefilling each document's longest prefix.
pub fn eval_report(
    ckpt: &Checkpoint,
    texts: &[String],
    n_gs: &[usize],
    prefixes: &[usize],
    modes: &[LossMode],
) -> Result<EvalReport> {
    let vocab = &ckpt.vocab;
    let raw: Vec<Vec<u32>> = texts.iter().map(|t| vocab.encode(t)).collect();
    let compression = if n_gs.is_empty() {
        Vec::new()
    } else {
        halving_property_check(&raw, &vocab.with_gists(0), n_gs)?
    };
    let halving_exact = compression.iter().all(|r| r.halves_previous != Some(false));
    let p = &ckpt.params;
    let perplexity = perplexity_curve(p, vocab, &raw, prefixes, modes)?;

    let longest = prefixes.iter().copied().max().unwrap_or(p.config.max_seq_len);
    let mut cache = None;
    if p.config.n_g > 0 {
        let mut s = CacheSummary {
            documents: 0,
            processed_positions: 0,
            evicted_entries: 0,
            max_peak_entries: 0,
            mean_ratio: 0.0,
        };
        let mut ratio_sum = 0.0;
        for d in raw.iter().filter(|d| !d.is_empty()) {
            let a = segment(&d[..longest.min(d.len())], vocab, p.config.n_g)?;
            let (c, _) = prefill(p, &a)?;
            let r = crate::kv_cache::cache_report(&c);
            s.documents += 1;
            s.processed_positions += r.counters.processed_positions as u64;
            s.evicted_entries += r.counters.evicted_entries as u64;
            s.max_peak_entries = s.max_peak_entries.max(r.counters.peak_entries as u64);
            ratio_sum += r.ratio;
        }
        if s.documents > 0 {
            s.mean_ratio = ratio_sum / s.documents as f64;
            cache = Some(s);
        }
    }
    Ok(EvalReport {
        schema: REPORT_SCHEMA.into(),
        checkpoint: CheckpointInfo {
            n_g: p.config.n_g,
            stage: ckpt.meta.stage.clone(),
            config_hash: ckpt.meta.config_hash.clone(),
            vocab_hash: vocab.hash(),
        },
        documents: raw.len() as u64,
        compression,
        halving_exact,
        perplexity,
        cache,
        config_hash: None,
    })
}
