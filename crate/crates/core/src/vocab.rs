//! Self-contained tokenizers and the vocabulary layout shared by every stage.
//!
//! Id layout: special tokens first, then the scheme's pieces, then the gist
//! ids at the very top. Gist ids are reserved by [`Vocab::with_gists`]; a
//! freshly built vocabulary has none.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GistError, Result};

pub const SENTENCE_END: [&str; 3] = [".", "!", "?"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Byte,
    WhitespaceWord,
}

impl std::str::FromStr for Scheme {
    type Err = GistError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "byte" => Ok(Scheme::Byte),
            "word" | "whitespace-word" => Ok(Scheme::WhitespaceWord),
            other => Err(GistError::InvalidConfig(format!("unknown scheme {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unk: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    scheme: Scheme,
    surfaces: Vec<String>,
    lookup: HashMap<String, u32>,
    special: SpecialIds,
    gist_first: u32,
    gist_count: usize,
    punct: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    scheme: Scheme,
    entries: Vec<(String, u32)>,
    special: SpecialIds,
    gist: (u32, usize),
    punct: Vec<u32>,
}

fn byte_surface(b: u8) -> String {
    if b == b' ' || b.is_ascii_graphic() {
        (b as char).to_string()
    } else {
        format!("<0x{b:02X}>")
    }
}

/// Splits text into words and standalone ASCII punctuation marks. Whitespace
/// only separates.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() || c.is_ascii_punctuation() {
            if let Some(s) = start.take() {
                out.push(&text[s..i]);
            }
            if c.is_ascii_punctuation() {
                out.push(&text[i..i + 1]);
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

fn is_punct_piece(s: &str) -> bool {
    s.len() == 1 && s.as_bytes()[0].is_ascii_punctuation()
}

/// Builds a deterministic vocabulary from the given documents.
pub fn build_vocab<S: AsRef<str>>(texts: &[S], scheme: Scheme) -> Result<Vocab> {
    if texts.iter().all(|t| t.as_ref().is_empty()) {
        return Err(GistError::EmptyCorpus);
    }
    let mut surfaces: Vec<String> = vec!["<bos>".into(), "<eos>".into(), "<pad>".into()];
    let unk = match scheme {
        Scheme::Byte => {
            surfaces.extend((0..=255u8).map(byte_surface));
            None
        }
        Scheme::WhitespaceWord => {
            surfaces.push("<unk>".into());
            let mut pieces: BTreeSet<&str> = texts
                .iter()
                .flat_map(|t| split_words(t.as_ref()))
                .collect();
            // Sentence-ending marks always get an id so the gist rule can fire.
            pieces.extend(SENTENCE_END);
            surfaces.extend(pieces.into_iter().map(str::to_owned));
            Some(3)
        }
    };
    Vocab::from_parts(
        scheme,
        surfaces,
        SpecialIds {
            bos: 0,
            eos: 1,
            pad: 2,
            unk,
        },
        0,
    )
}

impl Vocab {
    fn from_parts(
        scheme: Scheme,
        mut surfaces: Vec<String>,
        special: SpecialIds,
        gist_count: usize,
    ) -> Result<Self> {
        let base = surfaces.len() - gist_count;
        surfaces.truncate(base);
        surfaces.extend((1..=gist_count).map(|k| format!("<g{k}>")));
        let mut lookup = HashMap::with_capacity(surfaces.len());
        for (id, s) in surfaces.iter().enumerate() {
            if lookup.insert(s.clone(), id as u32).is_some() {
                return Err(GistError::format("vocab", format!("duplicate surface {s:?}")));
            }
        }
        let punct: Vec<u32> = SENTENCE_END.iter().filter_map(|p| lookup.get(*p).copied()).collect();
        if punct.is_empty() {
            return Err(GistError::format("vocab", "no sentence-ending punctuation ids"));
        }
        Ok(Vocab {
            scheme,
            surfaces,
            lookup,
            special,
            gist_first: base as u32,
            gist_count,
            punct,
        })
    }

    /// Returns a copy whose top `n_g` ids are gist tokens `<g1>..<gN>`,
    /// replacing any gist ids already present.
    pub fn with_gists(&self, n_g: usize) -> Vocab {
        let mut surfaces = self.surfaces.clone();
        surfaces.truncate(self.base_size());
        surfaces.extend((0..n_g).map(|_| String::new()));
        Vocab::from_parts(self.scheme, surfaces, self.special, n_g)
            .expect("extending a valid vocab keeps it valid")
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    /// Vocabulary size without gist ids.
    pub fn base_size(&self) -> usize {
        self.gist_first as usize
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn n_gist(&self) -> usize {
        self.gist_count
    }

    /// Gist id for `GIST(k)`, `k` in `1..=n_gist`.
    pub fn gist_id(&self, k: usize) -> u32 {
        assert!(k >= 1 && k <= self.gist_count, "gist index {k} out of range");
        self.gist_first + (k as u32 - 1)
    }

    pub fn gist_ids(&self) -> std::ops::Range<u32> {
        self.gist_first..self.gist_first + self.gist_count as u32
    }

    pub fn is_gist(&self, id: u32) -> bool {
        self.gist_ids().contains(&id)
    }

    pub fn punct_ids(&self) -> &[u32] {
        &self.punct
    }

    pub fn is_punct(&self, id: u32) -> bool {
        self.punct.contains(&id)
    }

    pub fn surface(&self, id: u32) -> Option<&str> {
        self.surfaces.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, surface: &str) -> Option<u32> {
        self.lookup.get(surface).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        match self.scheme {
            Scheme::Byte => text.bytes().map(|b| 3 + b as u32).collect(),
            Scheme::WhitespaceWord => {
                let unk = self.special.unk.expect("word scheme reserves unk");
                split_words(text)
                    .into_iter()
                    .map(|w| self.lookup.get(w).copied().unwrap_or(unk))
                    .collect()
            }
        }
    }

    /// Inverse of [`Vocab::encode`]. The word scheme restores single-space
    /// separation with punctuation attached to the preceding word.
    pub fn decode(&self, ids: &[u32]) -> String {
        match self.scheme {
            Scheme::Byte => {
                let mut bytes = Vec::with_capacity(ids.len());
                for &id in ids {
                    match id {
                        3..=258 if !self.is_gist(id) => bytes.push((id - 3) as u8),
                        _ => bytes.extend_from_slice(self.surface(id).unwrap_or("<?>").as_bytes()),
                    }
                }
                String::from_utf8_lossy(&bytes).into_owned()
            }
            Scheme::WhitespaceWord => {
                let mut out = String::new();
                for &id in ids {
                    let s = self.surface(id).unwrap_or("<?>");
                    if !out.is_empty() && !is_punct_piece(s) {
                        out.push(' ');
                    }
                    out.push_str(s);
                }
                out
            }
        }
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            scheme: self.scheme,
            entries: self
                .surfaces
                .iter()
                .enumerate()
                .map(|(i, s)| (s.clone(), i as u32))
                .collect(),
            special: self.special,
            gist: (self.gist_first, self.gist_count),
            punct: self.punct.clone(),
        };
        serde_json::to_string(&file).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        let mut surfaces = vec![String::new(); file.entries.len()];
        for (s, id) in file.entries {
            let slot = surfaces
                .get_mut(id as usize)
                .ok_or_else(|| GistError::format("vocab", format!("id {id} not dense")))?;
            *slot = s;
        }
        if file.gist.0 as usize + file.gist.1 != surfaces.len() {
            return Err(GistError::format("vocab", "gist ids must occupy the top of the id range"));
        }
        let vocab = Vocab::from_parts(file.scheme, surfaces, file.special, file.gist.1)?;
        if vocab.punct != file.punct {
            return Err(GistError::format("vocab", "punct ids disagree with entries"));
        }
        Ok(vocab)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Appends a period to every `label: <token>` line that lacks one.
pub fn add_label_period(template_text: &str) -> String {
    let mut out = String::with_capacity(template_text.len() + 16);
    for line in template_text.split_inclusive('\n') {
        let (body, ending) = match line.strip_suffix('\n') {
            Some(b) => match b.strip_suffix('\r') {
                Some(bb) => (bb, "\r\n"),
                None => (b, "\n"),
            },
            None => (line, ""),
        };
        let content = body.trim_end();
        let is_label = content
            .trim_start()
            .strip_prefix("label:")
            .map(|rest| {
                let rest = rest.trim();
                !rest.is_empty() && !rest.contains(char::is_whitespace)
            })
            .unwrap_or(false);
        out.push_str(content);
        if is_label && !content.ends_with('.') {
            out.push('.');
        }
        out.push_str(&body[content.len()..]);
        out.push_str(ending);
    }
    out
}
