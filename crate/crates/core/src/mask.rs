//! Sentence attention.
//!
//! A query at position `q` may read key `k` iff `k <= q` and either both sit
//! in the same sentence or `k` is a gist token. The mask is assembled from
//! per-sentence blocks and then materialized densely.

use std::ops::Range;

use serde::Serialize;

use crate::error::{GistError, Result};
use crate::segment::AnnotatedSequence;

pub const RENDER_LIMIT: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Every pair in the rectangle.
    Full,
    /// Lower triangle (diagonal included) of a square diagonal block.
    Causal,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Block {
    pub q: Range<usize>,
    pub k: Range<usize>,
    pub kind: BlockKind,
}

impl Block {
    pub fn contains(&self, q: usize, k: usize) -> bool {
        self.q.contains(&q)
            && self.k.contains(&k)
            && match self.kind {
                BlockKind::Full => true,
                BlockKind::Causal => k - self.k.start <= q - self.q.start,
            }
    }

    pub fn area(&self) -> usize {
        match self.kind {
            BlockKind::Full => self.q.len() * self.k.len(),
            BlockKind::Causal => self.q.len() * (self.q.len() + 1) / 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceMask {
    n: usize,
    allowed: Vec<bool>,
    blocks: Vec<Block>,
}

pub fn build_mask(a: &AnnotatedSequence) -> SentenceMask {
    let n = a.len();
    let mut blocks = Vec::new();
    for sentence in a.sentences() {
        blocks.push(Block {
            q: sentence.clone(),
            k: sentence.clone(),
            kind: BlockKind::Causal,
        });
        let last = sentence.end - 1;
        if a.roles()[last].is_gist() && sentence.end < n {
            blocks.push(Block {
                q: sentence.end..n,
                k: sentence.end - a.n_g()..sentence.end,
                kind: BlockKind::Full,
            });
        }
    }
    SentenceMask::from_blocks(n, blocks)
}

impl SentenceMask {
    /// Plain causal attention over `n` positions.
    pub fn causal(n: usize) -> SentenceMask {
        let blocks = if n == 0 {
            Vec::new()
        } else {
            vec![Block {
                q: 0..n,
                k: 0..n,
                kind: BlockKind::Causal,
            }]
        };
        SentenceMask::from_blocks(n, blocks)
    }

    fn from_blocks(n: usize, blocks: Vec<Block>) -> SentenceMask {
        let mut allowed = vec![false; n * n];
        for b in &blocks {
            for q in b.q.clone() {
                let k_end = match b.kind {
                    BlockKind::Full => b.k.end,
                    BlockKind::Causal => b.k.start + (q - b.q.start) + 1,
                };
                allowed[q * n + b.k.start..q * n + k_end].fill(true);
            }
        }
        SentenceMask { n, allowed, blocks }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.n + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.n..(q + 1) * self.n]
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Allowed key positions for query `q`, ascending.
    pub fn row_keys(&self, q: usize) -> Vec<usize> {
        self.row(q)
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Fraction of the causal triangle that remains visible.
    pub fn density(&self) -> f64 {
        assert!(self.n >= 1, "density of an empty mask");
        let triangle = self.n * (self.n + 1) / 2;
        self.allowed_count() as f64 / triangle as f64
    }

    pub fn render_ascii(&self) -> Result<String> {
        if self.n > RENDER_LIMIT {
            return Err(GistError::RenderTooLarge {
                n: self.n,
                limit: RENDER_LIMIT,
            });
        }
        let mut out = String::with_capacity(self.n * (self.n + 1));
        for q in 0..self.n {
            if q > 0 {
                out.push('\n');
            }
            out.extend(self.row(q).iter().map(|&a| if a { '#' } else { '.' }));
        }
        Ok(out)
    }

    /// Binary greymap (P5), white where attention is allowed.
    pub fn render_pgm(&self) -> Result<Vec<u8>> {
        if self.n > RENDER_LIMIT {
            return Err(GistError::RenderTooLarge {
                n: self.n,
                limit: RENDER_LIMIT,
            });
        }
        let mut out = format!("P5\n{} {}\n255\n", self.n, self.n).into_bytes();
        out.extend(self.allowed.iter().map(|&a| if a { 255u8 } else { 0 }));
        Ok(out)
    }
}

/// Density from block areas, without touching the dense form.
pub fn mask_density(m: &SentenceMask) -> f64 {
    let area: usize = m.blocks().iter().map(Block::area).sum();
    area as f64 / (m.len() * (m.len() + 1) / 2) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::segment;
    use crate::vocab::{build_vocab, Scheme};

    fn seq(text: &str, n_g: usize) -> AnnotatedSequence {
        let v = build_vocab(&[text], Scheme::WhitespaceWord).unwrap().with_gists(n_g);
        segment(&v.encode(text), &v, n_g).unwrap()
    }

    #[test]
    fn causal_two_by_two() {
        assert_eq!(SentenceMask::causal(2).render_ascii().unwrap(), "#.\n##");
    }

    #[test]
    fn single_sentence_is_causal() {
        let a = seq("a b c d.", 2);
        let m = build_mask(&a);
        assert_eq!(m, {
            let c = SentenceMask::causal(a.len());
            // Same dense pattern; block lists differ only in origin.
            SentenceMask { blocks: m.blocks.clone(), ..c }
        });
        assert_eq!(m.density(), 1.0);
        assert_eq!(mask_density(&m), 1.0);
    }

    #[test]
    fn figure_layout_one_gist() {
        // t t . g | t t . g | t
        let a = seq("a b. c d. e", 1);
        let m = build_mask(&a);
        let art = m.render_ascii().unwrap();
        let expected = [
            "#........",
            "##.......",
            "###......",
            "####.....",
            "...##....",
            "...###...",
            "...####..",
            "...#####.",
            "...#...##",
        ]
        .join("\n");
        assert_eq!(art, expected);
    }

    #[test]
    fn pgm_header_parses() {
        let a = seq("a b. c", 1);
        let pgm = build_mask(&a).render_pgm().unwrap();
        let text = String::from_utf8_lossy(&pgm[..12]).into_owned();
        let mut parts = text.split_ascii_whitespace();
        assert_eq!(parts.next(), Some("P5"));
        let w: usize = parts.next().unwrap().parse().unwrap();
        let h: usize = parts.next().unwrap().parse().unwrap();
        assert_eq!(parts.next(), Some("255"));
        let header_len = format!("P5\n{w} {h}\n255\n").len();
        assert_eq!(pgm.len(), header_len + w * h);
        assert_eq!(w, a.len());
    }

    #[test]
    fn oversize_render_rejected() {
        let m = SentenceMask {
            n: RENDER_LIMIT + 1,
            allowed: Vec::new(),
            blocks: Vec::new(),
        };
        assert!(m.render_ascii().is_err());
        assert!(m.render_pgm().is_err());
    }
}
