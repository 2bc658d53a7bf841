//! Gist insertion at sentence-ending punctuation.
//!
//! Every occurrence of a punctuation id closes the current sentence and is
//! followed by the gist run `<g1>..<gN>`. The run belongs to the sentence it
//! closes. A trailing sentence without punctuation stays open and gets no
//! gists.

use std::ops::Range;

use crate::error::{GistError, Result};
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Regular,
    /// `k`-th gist of a run, 1-based.
    Gist(u16),
}

impl Role {
    pub fn is_gist(self) -> bool {
        matches!(self, Role::Gist(_))
    }

    pub fn to_byte(self) -> u8 {
        match self {
            Role::Regular => 0,
            Role::Gist(k) => k as u8,
        }
    }

    pub fn from_byte(b: u8) -> Role {
        match b {
            0 => Role::Regular,
            k => Role::Gist(k as u16),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotatedSequence {
    ids: Vec<u32>,
    roles: Vec<Role>,
    sent_idx: Vec<u32>,
    n_g: usize,
    open_tail: bool,
}

/// Inserts `n_g` gist ids after every punctuation id of `raw`.
pub fn segment(raw: &[u32], vocab: &Vocab, n_g: usize) -> Result<AnnotatedSequence> {
    if n_g == 0 {
        return Err(GistError::InvalidGistCount(0));
    }
    if vocab.n_gist() != n_g {
        return Err(GistError::InvalidConfig(format!(
            "vocab carries {} gist ids but n_g = {n_g}",
            vocab.n_gist()
        )));
    }
    if let Some((position, &id)) = raw.iter().enumerate().find(|(_, &id)| vocab.is_gist(id)) {
        return Err(GistError::GistIdInRawInput { id, position });
    }
    let n_punct = raw.iter().filter(|&&id| vocab.is_punct(id)).count();
    let len = raw.len() + n_g * n_punct;
    let mut ids = Vec::with_capacity(len);
    let mut roles = Vec::with_capacity(len);
    let mut sent_idx = Vec::with_capacity(len);
    let mut sentence = 0u32;
    for &id in raw {
        ids.push(id);
        roles.push(Role::Regular);
        sent_idx.push(sentence);
        if vocab.is_punct(id) {
            for k in 1..=n_g {
                ids.push(vocab.gist_id(k));
                roles.push(Role::Gist(k as u16));
                sent_idx.push(sentence);
            }
            sentence += 1;
        }
    }
    let open_tail = raw.last().is_some_and(|&id| !vocab.is_punct(id));
    Ok(AnnotatedSequence {
        ids,
        roles,
        sent_idx,
        n_g,
        open_tail,
    })
}

/// Removes every gist position, recovering the raw token sequence.
pub fn strip_gists(a: &AnnotatedSequence) -> Vec<u32> {
    a.ids
        .iter()
        .zip(&a.roles)
        .filter(|(_, r)| !r.is_gist())
        .map(|(&id, _)| id)
        .collect()
}

/// `(n_regular, n_gist)` of a processed sequence.
pub fn count_tokens(a: &AnnotatedSequence) -> (usize, usize) {
    let n_gist = a.roles.iter().filter(|r| r.is_gist()).count();
    (a.len() - n_gist, n_gist)
}

impl AnnotatedSequence {
    /// A single open sentence with no gists; its sentence mask is the plain
    /// causal mask.
    pub fn unsegmented(ids: Vec<u32>) -> AnnotatedSequence {
        let n = ids.len();
        AnnotatedSequence {
            ids,
            roles: vec![Role::Regular; n],
            sent_idx: vec![0; n],
            n_g: 0,
            open_tail: n > 0,
        }
    }

    /// Rebuilds a sequence from stored triples and checks every structural
    /// invariant.
    pub fn from_parts(
        ids: Vec<u32>,
        roles: Vec<Role>,
        sent_idx: Vec<u32>,
        n_g: usize,
    ) -> Result<AnnotatedSequence> {
        let bad = |d: String| GistError::format("annotated sequence", d);
        if ids.len() != roles.len() || ids.len() != sent_idx.len() {
            return Err(bad("column lengths differ".into()));
        }
        let mut expected_sentence = sent_idx.first().copied().unwrap_or(0);
        let mut run = 0usize;
        for i in 0..ids.len() {
            if sent_idx[i] != expected_sentence {
                return Err(bad(format!("sentence index breaks at position {i}")));
            }
            match roles[i] {
                Role::Regular => {
                    if run != 0 {
                        return Err(bad(format!("gist run interrupted at position {i}")));
                    }
                }
                Role::Gist(k) => {
                    let k = k as usize;
                    if k != run + 1 || k > n_g {
                        return Err(bad(format!("gist run out of order at position {i}")));
                    }
                    if k == 1 && (i == 0 || roles[i - 1] != Role::Regular) {
                        return Err(bad(format!("gist run without closing token at {i}")));
                    }
                    run = k;
                    if k == n_g {
                        run = 0;
                        expected_sentence += 1;
                    }
                }
            }
        }
        if run != 0 {
            return Err(bad("truncated gist run at end".into()));
        }
        let open_tail = roles.last().is_some_and(|r| *r == Role::Regular);
        Ok(AnnotatedSequence {
            ids,
            roles,
            sent_idx,
            n_g,
            open_tail,
        })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn sent_idx(&self) -> &[u32] {
        &self.sent_idx
    }

    pub fn n_g(&self) -> usize {
        self.n_g
    }

    pub fn open_tail(&self) -> bool {
        self.open_tail
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of sentences closed by a gist run.
    pub fn closed_sentences(&self) -> usize {
        match self.n_g {
            0 => 0,
            g => self.roles.iter().filter(|r| **r == Role::Gist(g as u16)).count(),
        }
    }

    /// Position ranges of each sentence, gist run included.
    pub fn sentences(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.len() {
            if i == self.len() || self.sent_idx[i] != self.sent_idx[i - 1] {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    /// Copy of positions `range`, with sentence indices rebased to start at 0.
    /// The range must start at a regular position and must not cut a gist run.
    pub fn slice(&self, range: Range<usize>) -> Result<AnnotatedSequence> {
        let base = self.sent_idx.get(range.start).copied().unwrap_or(0);
        AnnotatedSequence::from_parts(
            self.ids[range.clone()].to_vec(),
            self.roles[range.clone()].to_vec(),
            self.sent_idx[range].iter().map(|s| s - base).collect(),
            self.n_g,
        )
    }

    /// Splits into windows of at most `max_len` positions made of whole
    /// sentences. A sentence longer than `max_len` is cut at regular positions
    /// so that its gist run stays with its closing punctuation.
    pub fn windows(&self, max_len: usize) -> Result<Vec<AnnotatedSequence>> {
        if max_len < self.n_g + 2 {
            return Err(GistError::InvalidConfig(format!(
                "max_len {max_len} cannot hold a gist run of {}",
                self.n_g
            )));
        }
        let mut pieces: Vec<Range<usize>> = Vec::new();
        for sentence in self.sentences() {
            let mut start = sentence.start;
            while sentence.end - start > max_len {
                let last_regular = (start..sentence.end)
                    .rev()
                    .find(|&i| self.roles[i] == Role::Regular)
                    .unwrap_or(start);
                // Keep the closing token with its run.
                let limit = if self.roles[sentence.end - 1].is_gist() {
                    last_regular
                } else {
                    sentence.end
                };
                let cut = (start + max_len).min(limit).max(start + 1);
                pieces.push(start..cut);
                start = cut;
            }
            pieces.push(start..sentence.end);
        }
        let mut windows = Vec::new();
        let mut current: Option<Range<usize>> = None;
        for p in pieces {
            current = match current {
                Some(c) if p.end - c.start <= max_len && c.end == p.start && self.roles[c.end - 1].is_gist() => {
                    Some(c.start..p.end)
                }
                Some(c) => {
                    windows.push(self.slice(c)?);
                    Some(p)
                }
                None => Some(p),
            };
        }
        if let Some(c) = current {
            windows.push(self.slice(c)?);
        }
        Ok(windows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_vocab, Scheme};

    const EXAMPLE: &str = "The sun was shining brightly. Birds were singing in the forest.";

    fn word_vocab(text: &str, n_g: usize) -> Vocab {
        build_vocab(&[text], Scheme::WhitespaceWord).unwrap().with_gists(n_g)
    }

    #[test]
    fn processing_example_two_gists() {
        let v = word_vocab(EXAMPLE, 2);
        let raw = v.encode(EXAMPLE);
        let a = segment(&raw, &v, 2).unwrap();
        assert_eq!(
            v.decode(a.ids()),
            "The sun was shining brightly. <g1> <g2> Birds were singing in the forest. <g1> <g2>"
        );
        assert_eq!(count_tokens(&a), (13, 4));
        assert_eq!(strip_gists(&a), raw);
        assert_eq!(raw.len(), 13);
        assert!(!a.open_tail());
        assert_eq!(a.closed_sentences(), 2);
        assert_eq!(a.sent_idx()[7], 0);
        assert_eq!(a.sent_idx()[8], 1);
    }

    #[test]
    fn empty_input() {
        let v = word_vocab("a.", 1);
        let a = segment(&[], &v, 1).unwrap();
        assert!(a.is_empty());
        assert!(!a.open_tail());
        assert_eq!(count_tokens(&a), (0, 0));
        assert!(strip_gists(&a).is_empty());
    }

    #[test]
    fn no_punctuation_is_one_open_sentence() {
        let v = word_vocab("a b c", 4);
        let a = segment(&v.encode("a b c"), &v, 4).unwrap();
        assert_eq!(count_tokens(&a), (3, 0));
        assert!(a.open_tail());
        assert!(a.sent_idx().iter().all(|&s| s == 0));
    }

    #[test]
    fn consecutive_punctuation_fires_each_time() {
        let v = build_vocab(&["Hi!!"], Scheme::Byte).unwrap().with_gists(1);
        let a = segment(&v.encode("Hi!!"), &v, 1).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a.closed_sentences(), 2);
        // Second sentence is the lone "!" and its gist.
        assert_eq!(a.sentences(), vec![0..4, 4..6]);
    }

    #[test]
    fn gist_in_raw_rejected() {
        let v = word_vocab("a.", 2);
        let raw = vec![v.id_of("a").unwrap(), v.gist_id(2)];
        assert!(matches!(
            segment(&raw, &v, 2),
            Err(GistError::GistIdInRawInput { position: 1, .. })
        ));
    }

    #[test]
    fn gist_count_scales_linearly() {
        let text = "a b. c! d e f? g";
        let n1 = {
            let v = word_vocab(text, 1);
            count_tokens(&segment(&v.encode(text), &v, 1).unwrap()).1
        };
        for n_g in [2, 4, 8] {
            let v = word_vocab(text, n_g);
            let a = segment(&v.encode(text), &v, n_g).unwrap();
            assert_eq!(count_tokens(&a).1, n_g * n1);
        }
    }

    #[test]
    fn from_parts_rejects_broken_runs() {
        let ids = vec![5, 9, 10];
        let ok = AnnotatedSequence::from_parts(
            ids.clone(),
            vec![Role::Regular, Role::Gist(1), Role::Gist(2)],
            vec![0, 0, 0],
            2,
        );
        assert!(ok.is_ok());
        let bad = AnnotatedSequence::from_parts(
            ids,
            vec![Role::Regular, Role::Gist(2), Role::Gist(1)],
            vec![0, 0, 0],
            2,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn windows_keep_sentences_whole() {
        let text = "a b c. d e. f g h i j k l m n o p. q";
        let v = word_vocab(text, 2);
        let a = segment(&v.encode(text), &v, 2).unwrap();
        let ws = a.windows(8).unwrap();
        let total: usize = ws.iter().map(|w| w.len()).sum();
        assert_eq!(total, a.len());
        let mut rebuilt = Vec::new();
        for w in &ws {
            assert!(w.len() <= 8);
            rebuilt.extend(strip_gists(w));
        }
        assert_eq!(rebuilt, strip_gists(&a));
    }
}
