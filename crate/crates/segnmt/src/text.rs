//! Plain-text artifacts: parallel corpora, BPE codes, vocabularies and
//! segmented splits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use segnmt_core::corpus::{BpeModel, ParallelCorpus, Vocabulary};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(l.as_ref());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Two line-aligned files.
pub fn read_parallel(src: &Path, tgt: &Path) -> Result<Vec<(String, String)>> {
    let s = read_lines(src)?;
    let t = read_lines(tgt)?;
    if s.len() != t.len() {
        return Err(Error::format(
            tgt,
            format!("{} lines but {} has {}", t.len(), src.display(), s.len()),
        ));
    }
    Ok(s.into_iter().zip(t).collect())
}

/// One merge per line, `left right`, in application order.
pub fn write_bpe(path: &Path, model: &BpeModel) -> Result<()> {
    let lines: Vec<String> = model.merges().iter().map(|(a, b)| format!("{a} {b}")).collect();
    write_lines(path, &lines)
}

pub fn read_bpe(path: &Path) -> Result<BpeModel> {
    let mut merges = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => merges.push((a.to_owned(), b.to_owned())),
            _ => return Err(Error::format(path, format!("line {}: expected `left right`", i + 1))),
        }
    }
    Ok(BpeModel::from_merges(merges))
}

/// Non-reserved tokens, one per line; line `i` holds ID `i + 4`.
pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    write_lines(path, vocab.entries())
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    Ok(Vocabulary::from_tokens(read_lines(path)?)?)
}

/// SHA-256 over both vocabularies, hex encoded.
pub fn vocab_hash(src: &Vocabulary, tgt: &Vocabulary) -> String {
    let mut h = Sha256::new();
    for (tag, v) in [("src", src), ("tgt", tgt)] {
        h.update(tag.as_bytes());
        for t in v.entries() {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Segmented sentences, symbols separated by single spaces.
pub fn write_segmented(path: &Path, sentences: &[Vec<String>]) -> Result<()> {
    let lines: Vec<String> = sentences.iter().map(|s| s.join(" ")).collect();
    write_lines(path, &lines)
}

pub fn read_segmented(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path)?
        .iter()
        .map(|l| l.split_whitespace().map(str::to_owned).collect())
        .collect())
}

/// Preprocessed data directory.
#[derive(Debug, Clone)]
pub struct DataDir {
    pub root: std::path::PathBuf,
}

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

impl DataDir {
    pub fn new(root: impl Into<std::path::PathBuf>) -> Self {
        DataDir { root: root.into() }
    }

    pub fn bpe(&self) -> std::path::PathBuf {
        self.root.join("bpe.codes")
    }

    pub fn vocab(&self, side: &str) -> std::path::PathBuf {
        self.root.join(format!("vocab.{side}"))
    }

    pub fn split(&self, name: &str, side: &str) -> std::path::PathBuf {
        self.root.join(format!("{name}.{side}"))
    }

    pub fn index(&self) -> std::path::PathBuf {
        self.root.join("index.bin")
    }

    pub fn vocabularies(&self) -> Result<(Vocabulary, Vocabulary)> {
        Ok((read_vocab(&self.vocab("src"))?, read_vocab(&self.vocab("tgt"))?))
    }

    /// Loads one split, encoded with the stored vocabularies.
    pub fn corpus(&self, name: &str) -> Result<ParallelCorpus> {
        if !SPLITS.contains(&name) {
            return Err(Error::Usage(format!("unknown split `{name}`")));
        }
        let (sv, tv) = self.vocabularies()?;
        let src = read_segmented(&self.split(name, "src"))?;
        let tgt = read_segmented(&self.split(name, "tgt"))?;
        if src.len() != tgt.len() {
            return Err(Error::format(&self.split(name, "tgt"), "split sides differ in length"));
        }
        let pairs: Vec<_> = src.into_iter().zip(tgt).collect();
        Ok(ParallelCorpus::encode(&pairs, sv, tv))
    }
}
