//! Raw parallel text to BPE-segmented splits and vocabularies.

use std::fs;
use std::path::Path;

use segnmt_core::corpus::{learn_bpe, split_indices, tokenize, BpeModel, Vocabulary};

use crate::error::{Error, Result};
use crate::text::{self, DataDir};

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessOptions {
    pub bpe_merges: usize,
    pub dev_n: usize,
    pub test_n: usize,
    /// Training pairs with a side longer than this (in subwords) are dropped.
    pub max_len: usize,
    pub vocab_size: Option<usize>,
    pub seed: u64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            bpe_merges: 1000,
            dev_n: 100,
            test_n: 100,
            max_len: 80,
            vocab_size: None,
            seed: 1,
        }
    }
}

pub type Segmented = Vec<(Vec<String>, Vec<String>)>;

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub bpe: BpeModel,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub train: Segmented,
    pub dev: Segmented,
    pub test: Segmented,
}

/// Splits the raw pairs, learns one BPE model on both sides of the training
/// split, segments everything and builds per-side vocabularies from train.
pub fn preprocess(raw: &[(String, String)], opts: &PreprocessOptions) -> Result<Preprocessed> {
    let pairs: Vec<&(String, String)> = raw
        .iter()
        .filter(|(s, t)| !tokenize(s).is_empty() && !tokenize(t).is_empty())
        .collect();
    let idx = split_indices(pairs.len(), opts.dev_n, opts.test_n, opts.seed)?;
    let bpe = learn_bpe(
        idx.train.iter().flat_map(|&i| [pairs[i].0.as_str(), pairs[i].1.as_str()]),
        opts.bpe_merges,
    );
    let segment = |ids: &[usize]| -> Segmented {
        ids.iter()
            .map(|&i| (bpe.segment_line(&pairs[i].0), bpe.segment_line(&pairs[i].1)))
            .collect()
    };
    let train: Segmented = segment(&idx.train)
        .into_iter()
        .filter(|(s, t)| s.len() <= opts.max_len && t.len() <= opts.max_len)
        .collect();
    if train.is_empty() {
        return Err(Error::Usage("no training pairs left after length filtering".into()));
    }
    let src_vocab = Vocabulary::build(train.iter().map(|p| p.0.as_slice()), opts.vocab_size);
    let tgt_vocab = Vocabulary::build(train.iter().map(|p| p.1.as_slice()), opts.vocab_size);
    Ok(Preprocessed {
        dev: segment(&idx.dev),
        test: segment(&idx.test),
        bpe,
        src_vocab,
        tgt_vocab,
        train,
    })
}

impl Preprocessed {
    pub fn write(&self, dir: &DataDir) -> Result<()> {
        fs::create_dir_all(&dir.root).map_err(|e| Error::io(&dir.root, e))?;
        text::write_bpe(&dir.bpe(), &self.bpe)?;
        text::write_vocab(&dir.vocab("src"), &self.src_vocab)?;
        text::write_vocab(&dir.vocab("tgt"), &self.tgt_vocab)?;
        for (name, split) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            let (s, t): (Vec<_>, Vec<_>) = split.iter().cloned().unzip();
            text::write_segmented(&dir.split(name, "src"), &s)?;
            text::write_segmented(&dir.split(name, "tgt"), &t)?;
        }
        Ok(())
    }
}

/// Reads `src`/`tgt`, preprocesses and writes the data directory.
pub fn run(src: &Path, tgt: &Path, out: &DataDir, opts: &PreprocessOptions) -> Result<Preprocessed> {
    let raw = text::read_parallel(src, tgt)?;
    let p = preprocess(&raw, opts)?;
    p.write(out)?;
    Ok(p)
}
