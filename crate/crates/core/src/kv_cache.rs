//! Compressed-context inference.
//!
//! Under the sentence mask a query sees the gists of earlier sentences and
//! its own sentence, nothing else. The cache therefore holds, per layer, a
//! retained region of gist entries followed by the entries of the open
//! sentence. When a sentence closes (punctuation, then its forced gist run)
//! its regular entries are dropped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GistError, Result};
use crate::mask::build_mask;
use crate::model::{forward_token, forward_with, ForwardOptions, KvBuffer, ModelParams};
use crate::segment::{segment, AnnotatedSequence, Role};
use crate::tensor::Scalar;
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounters {
    pub retained_entries: usize,
    pub live_entries: usize,
    pub peak_entries: usize,
    pub evicted_entries: usize,
    pub processed_positions: usize,
}

#[derive(Clone, Debug)]
pub struct GistKvCache<T> {
    d_model: usize,
    layers: Vec<KvBuffer<T>>,
    /// Original position, role and sentence of every live entry.
    positions: Vec<usize>,
    roles: Vec<Role>,
    sentences: Vec<u32>,
    retained: usize,
    sentence: u32,
    counters: CacheCounters,
}

impl<T: Scalar> GistKvCache<T> {
    pub fn new(p: &ModelParams<T>) -> Self {
        GistKvCache {
            d_model: p.config.d_model,
            layers: vec![KvBuffer::default(); p.config.n_layers],
            positions: Vec::new(),
            roles: Vec::new(),
            sentences: Vec::new(),
            retained: 0,
            sentence: 0,
            counters: CacheCounters::default(),
        }
    }

    pub fn counters(&self) -> CacheCounters {
        self.counters
    }

    pub fn live_entries(&self) -> usize {
        self.positions.len()
    }

    pub fn retained_entries(&self) -> usize {
        self.retained
    }

    /// Original positions of the retained gist entries.
    pub fn retained_positions(&self) -> &[usize] {
        &self.positions[..self.retained]
    }

    /// Original positions of the open sentence's entries.
    pub fn current_positions(&self) -> &[usize] {
        &self.positions[self.retained..]
    }

    pub fn next_position(&self) -> usize {
        self.counters.processed_positions
    }

    pub fn layer(&self, i: usize) -> &KvBuffer<T> {
        &self.layers[i]
    }

    /// Runs one token through the model at the next position.
    fn feed(&mut self, p: &ModelParams<T>, id: u32, role: Role) -> Result<Vec<T>> {
        let pos = self.next_position();
        let logits = forward_token(p, id, pos, &mut self.layers)?;
        self.record(pos, role);
        Ok(logits)
    }

    fn record(&mut self, pos: usize, role: Role) {
        self.positions.push(pos);
        self.roles.push(role);
        self.sentences.push(self.sentence);
        self.counters.processed_positions = pos + 1;
        self.counters.live_entries = self.positions.len();
        self.counters.peak_entries = self.counters.peak_entries.max(self.positions.len());
    }

    /// Drops the regular entries of the sentence just closed by its gist run
    /// and moves the run into the retained region.
    fn close_sentence(&mut self) {
        let d = self.d_model;
        let keep: Vec<bool> = (0..self.positions.len())
            .map(|i| i < self.retained || self.roles[i].is_gist())
            .collect();
        for buf in &mut self.layers {
            buf.retain_rows(d, |r| keep[r]);
        }
        let mut it = keep.iter();
        self.positions.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.roles.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.sentences.retain(|_| *it.next().unwrap());
        let evicted = keep.iter().filter(|&&k| !k).count();
        self.counters.evicted_entries += evicted;
        self.retained = self.positions.len();
        self.counters.retained_entries = self.retained;
        self.counters.live_entries = self.retained;
        self.sentence += 1;
    }

    /// Structural invariants: retained entries are gists, current entries
    /// are regular tokens of the single open sentence, and every layer holds
    /// one row per entry.
    pub fn check_invariants(&self) -> Result<()> {
        let bad = |msg: String| Err(GistError::CacheMismatch(msg));
        if self.roles[..self.retained].iter().any(|r| !r.is_gist()) {
            return bad("regular entry in retained region".into());
        }
        for i in self.retained..self.positions.len() {
            if self.roles[i].is_gist() || self.sentences[i] != self.sentence {
                return bad(format!("entry at position {} outside the open sentence", self.positions[i]));
            }
        }
        if self.positions.windows(2).any(|w| w[0] >= w[1]) {
            return bad("entries out of position order".into());
        }
        if self.layers.iter().any(|b| b.len(self.d_model) != self.positions.len()) {
            return bad("layer buffer size differs from entry count".into());
        }
        let c = &self.counters;
        if c.live_entries != self.positions.len() || c.retained_entries != self.retained {
            return bad("counters out of sync".into());
        }
        if c.live_entries + c.evicted_entries != c.processed_positions {
            return bad("live + evicted != processed".into());
        }
        Ok(())
    }
}

/// One masked forward over the prompt. The cache keeps the gist entries and
/// the open tail; the counters are those of feeding the prompt token by
/// token. Returns the cache and the logits of the final position.
pub fn prefill<T: Scalar>(p: &ModelParams<T>, a: &AnnotatedSequence) -> Result<(GistKvCache<T>, Vec<T>)> {
    if a.is_empty() {
        return Err(GistError::InvalidConfig("empty prompt; enable BOS or supply text".into()));
    }
    if a.n_g() != p.config.n_g && a.closed_sentences() > 0 {
        return Err(GistError::CacheMismatch(format!(
            "prompt segmented with n_g = {} but model has n_g = {}",
            a.n_g(),
            p.config.n_g
        )));
    }
    let m = build_mask(a);
    let out = forward_with(
        p,
        a.ids(),
        &m,
        &ForwardOptions {
            capture_kv: true,
            ..Default::default()
        },
    )?;
    let kv = out.kv.expect("kv captured");
    let mut cache = GistKvCache::new(p);
    let roles = a.roles();
    for t in 0..a.len() {
        for (buf, layer) in cache.layers.iter_mut().zip(&kv) {
            buf.push_row(layer.keys.row(t), layer.values.row(t));
        }
        cache.record(t, roles[t]);
        if roles[t] == Role::Gist(a.n_g() as u16) {
            cache.close_sentence();
        }
    }
    let last = out.logits.row(a.len() - 1).to_vec();
    Ok((cache, last))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampler {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

pub struct DecodeSession<'a, T> {
    params: &'a ModelParams<T>,
    vocab: &'a Vocab,
    cache: GistKvCache<T>,
    raw: Vec<u32>,
    emitted: Vec<u32>,
    logits: Vec<T>,
    sampler: Sampler,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> DecodeSession<'a, T> {
    /// Segments and prefills `prompt` (raw ids, no gists).
    pub fn new(params: &'a ModelParams<T>, vocab: &'a Vocab, prompt: &[u32], sampler: Sampler) -> Result<Self> {
        if vocab.len() != params.config.vocab_size || vocab.n_gist() != params.config.n_g {
            return Err(GistError::CacheMismatch("vocab does not match model".into()));
        }
        let a = segment(prompt, vocab, params.config.n_g)?;
        let (cache, logits) = prefill(params, &a)?;
        let seed = match sampler {
            Sampler::Greedy => 0,
            Sampler::Temperature { seed, .. } => seed,
        };
        Ok(DecodeSession {
            params,
            vocab,
            cache,
            raw: prompt.to_vec(),
            emitted: Vec::new(),
            logits,
            sampler,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Samples the next token, feeds it, and if it is punctuation feeds the
    /// gist run and evicts the closed sentence.
    pub fn decode_step(&mut self) -> Result<u32> {
        let id = self.choose()?;
        let mut logits = self.cache.feed(self.params, id, Role::Regular)?;
        if self.vocab.is_punct(id) {
            for k in 1..=self.params.config.n_g {
                logits = self.cache.feed(self.params, self.vocab.gist_id(k), Role::Gist(k as u16))?;
            }
            self.cache.close_sentence();
        }
        self.raw.push(id);
        self.emitted.push(id);
        self.logits = logits;
        Ok(id)
    }

    fn choose(&mut self) -> Result<u32> {
        let gists = self.params.config.gist_rows();
        let scores: Vec<f64> = self
            .logits
            .iter()
            .enumerate()
            .map(|(i, &z)| if gists.contains(&i) { f64::NEG_INFINITY } else { z.as_f64() })
            .collect();
        match self.sampler {
            Sampler::Greedy => Ok(argmax(&scores) as u32),
            Sampler::Temperature { temperature, .. } => {
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(GistError::InvalidConfig(format!("temperature {temperature}")));
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = scores.iter().map(|&s| ((s - max) / temperature).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut u = self.rng.random::<f64>() * total;
                for (i, &w) in weights.iter().enumerate() {
                    if u < w {
                        return Ok(i as u32);
                    }
                    u -= w;
                }
                Ok(argmax(&scores) as u32)
            }
        }
    }

    /// Logits that drive the next choice (before gist suppression).
    pub fn next_logits(&self) -> &[T] {
        &self.logits
    }

    pub fn emitted(&self) -> &[u32] {
        &self.emitted
    }

    pub fn cache(&self) -> &GistKvCache<T> {
        &self.cache
    }

    /// Everything processed so far, with gists, as one annotated sequence.
    pub fn processed(&self) -> Result<AnnotatedSequence> {
        segment(&self.raw, self.vocab, self.params.config.n_g)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheReport {
    #[serde(flatten)]
    pub counters: CacheCounters,
    /// Positions processed per peak live entry.
    pub ratio: f64,
}

pub fn cache_report<T>(cache: &GistKvCache<T>) -> CacheReport {
    let c = cache.counters;
    CacheReport {
        counters: c,
        ratio: if c.peak_entries == 0 {
            1.0
        } else {
            c.processed_positions as f64 / c.peak_entries as f64
        },
    }
}
