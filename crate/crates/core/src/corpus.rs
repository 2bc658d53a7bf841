use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{GistError, Result};
use crate::vocab::Vocab;

/// Reads every `.txt` file directly under `dir`, ordered by path.
pub fn read_text_dir(dir: &Path) -> Result<Vec<(PathBuf, String)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| GistError::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|ext| ext == "txt"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).map_err(|e| GistError::io(&p, e))?;
            Ok((p, text))
        })
        .collect()
}

/// Tokenized documents, one per source file.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub documents: Vec<Vec<u32>>,
    pub sources: Vec<PathBuf>,
    pub total_token_count: usize,
}

impl Corpus {
    pub fn from_texts(texts: &[(PathBuf, String)], vocab: &Vocab) -> Corpus {
        let documents: Vec<Vec<u32>> = texts.iter().map(|(_, t)| vocab.encode(t)).collect();
        let total_token_count = documents.iter().map(Vec::len).sum();
        Corpus {
            documents,
            sources: texts.iter().map(|(p, _)| p.clone()).collect(),
            total_token_count,
        }
    }

    pub fn load_dir(dir: &Path, vocab: &Vocab) -> Result<Corpus> {
        let texts = read_text_dir(dir)?;
        if texts.is_empty() {
            return Err(GistError::EmptyCorpus);
        }
        Ok(Corpus::from_texts(&texts, vocab))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_vocab, Scheme};

    #[test]
    fn reads_txt_files_in_path_order() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.txt"), "two.").unwrap();
        fs::write(dir.path().join("a.txt"), "one two").unwrap();
        fs::write(dir.path().join("c.md"), "ignored").unwrap();
        fs::create_dir(dir.path().join("d.txt")).unwrap();
        let texts = read_text_dir(dir.path()).unwrap();
        let names: Vec<_> = texts.iter().map(|(p, _)| p.file_name().unwrap().to_str().unwrap()).collect();
        assert_eq!(names, ["a.txt", "b.txt"]);
        let v = build_vocab(&["one two."], Scheme::WhitespaceWord).unwrap();
        let c = Corpus::load_dir(dir.path(), &v).unwrap();
        assert_eq!(c.total_token_count, 4);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let v = build_vocab(&["x."], Scheme::WhitespaceWord).unwrap();
        assert!(matches!(Corpus::load_dir(dir.path(), &v), Err(GistError::EmptyCorpus)));
        assert!(read_text_dir(&dir.path().join("missing")).is_err());
    }
}
