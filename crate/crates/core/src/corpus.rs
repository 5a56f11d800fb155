//! Tokenization, byte-pair encoding, vocabularies and data splits.
//!
//! Subword symbols carry the end-of-word marker `</w>` on the last symbol of
//! every word, so `"ab"` segments to `["a", "b</w>"]` before any merge.
//! Reserved IDs: 0 `<pad>`, 1 `<s>`, 2 `</s>`, 3 `<unk>`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result, TokenId};

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const END_OF_WORD: &str = "</w>";

/// Splits on runs of whitespace.
pub fn tokenize(line: &str) -> Vec<&str> {
    line.split_whitespace().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: BTreeMap<(String, String), usize>,
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .rev() // first occurrence wins
            .collect();
        BpeModel { merges, ranks }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    /// Segments one word into subword symbols.
    pub fn apply(&self, word: &str) -> Vec<String> {
        self.merge_symbols(initial_symbols(word))
    }

    /// Applies merges to an existing symbol sequence, lowest rank first,
    /// until no rule matches. Output of this function is a fixed point.
    pub fn merge_symbols(&self, mut symbols: Vec<String>) -> Vec<String> {
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(rank) = best else { return symbols };
            let (left, right) = &self.merges[rank];
            symbols = merge_pair(&symbols, left, right);
        }
    }

    pub fn segment_line(&self, line: &str) -> Vec<String> {
        tokenize(line).into_iter().flat_map(|w| self.apply(w)).collect()
    }
}

fn initial_symbols(word: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    if let Some(last) = symbols.last_mut() {
        last.push_str(END_OF_WORD);
    }
    symbols
}

fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns `num_merges` merge rules by repeatedly merging the most frequent
/// adjacent pair; ties go to the lexicographically smallest `(left, right)`.
/// Stops early when no pair is left.
pub fn learn_bpe<'a>(lines: impl IntoIterator<Item = &'a str>, num_merges: usize) -> BpeModel {
    let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for line in lines {
        for w in tokenize(line) {
            *word_counts.entry(w).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, usize)> = word_counts
        .into_iter()
        .map(|(w, c)| (initial_symbols(w), c))
        .collect();

    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let mut pair_counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (symbols, count) in &words {
            for w in symbols.windows(2) {
                *pair_counts.entry((&w[0], &w[1])).or_default() += count;
            }
        }
        // BTreeMap iterates in lexicographic order, so keeping the first
        // maximum implements the tie-break.
        let mut best: Option<((&str, &str), usize)> = None;
        for (pair, count) in pair_counts {
            if best.is_none_or(|(_, c)| count > c) {
                best = Some((pair, count));
            }
        }
        let Some(((l, r), _)) = best else { break };
        let (l, r) = (l.to_string(), r.to_string());
        for (symbols, _) in &mut words {
            *symbols = merge_pair(symbols, &l, &r);
        }
        merges.push((l, r));
    }
    BpeModel::from_merges(merges)
}

/// Reverses segmentation: symbols ending in `</w>` close a word.
pub fn desegment<S: AsRef<str>>(symbols: &[S]) -> String {
    let mut out = String::new();
    let mut word_open = false;
    for s in symbols {
        let s = s.as_ref();
        if !word_open && !out.is_empty() {
            out.push(' ');
        }
        match s.strip_suffix(END_OF_WORD) {
            Some(stem) => {
                out.push_str(stem);
                word_open = false;
            }
            None => {
                out.push_str(s);
                word_open = true;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new()).expect("reserved symbols are distinct")
    }
}

impl Vocabulary {
    /// Builds from non-reserved tokens in ID order (ID = position + 4).
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut ids = BTreeMap::new();
        for (i, t) in all.iter().enumerate() {
            if ids.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocabulary { tokens: all, ids })
    }

    /// Frequency-ordered vocabulary (count descending, then lexicographic),
    /// optionally capped at `max_size` entries including reserved symbols.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a [String]>, max_size: Option<usize>) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in sentences {
            for t in s {
                if !RESERVED.contains(&t.as_str()) {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let limit = max_size.map_or(usize::MAX, |m| m.saturating_sub(RESERVED.len()));
        Self::from_tokens(ranked.into_iter().take(limit).map(|(t, _)| t.to_string()))
            .expect("counted tokens are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::contract(format!("token id {id} out of range for vocabulary of {}", self.len())))
    }

    /// Non-reserved tokens in ID order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn encode(&self, symbols: &[String]) -> TokenizedSentence {
        TokenizedSentence {
            ids: symbols.iter().map(|s| self.id(s)).collect(),
            surface: symbols.to_vec(),
        }
    }

    /// Maps IDs back to symbols, dropping PAD, BOS and EOS.
    pub fn symbols(&self, ids: &[TokenId]) -> Result<Vec<&str>> {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        Ok(desegment(&self.symbols(ids)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSentence {
    pub ids: Vec<TokenId>,
    pub surface: Vec<String>,
}

impl TokenizedSentence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub source: TokenizedSentence,
    pub target: TokenizedSentence,
}

/// Aligned sentence pairs with their vocabularies: the translation memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

impl ParallelCorpus {
    /// Encodes already-segmented pairs. Pairs with an empty side are dropped.
    pub fn encode(segmented: &[(Vec<String>, Vec<String>)], src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> Self {
        let pairs = segmented
            .iter()
            .filter(|(s, t)| !s.is_empty() && !t.is_empty())
            .map(|(s, t)| SentencePair {
                source: src_vocab.encode(s),
                target: tgt_vocab.encode(t),
            })
            .collect();
        ParallelCorpus {
            pairs,
            src_vocab,
            tgt_vocab,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn source(&self, i: usize) -> &[TokenId] {
        &self.pairs[i].source.ids
    }

    pub fn target(&self, i: usize) -> &[TokenId] {
        &self.pairs[i].target.ids
    }

    pub fn sources(&self) -> impl Iterator<Item = &[TokenId]> {
        self.pairs.iter().map(|p| p.source.ids.as_slice())
    }

    fn subset(&self, idx: impl IntoIterator<Item = usize>) -> ParallelCorpus {
        ParallelCorpus {
            pairs: idx.into_iter().map(|i| self.pairs[i].clone()).collect(),
            src_vocab: self.src_vocab.clone(),
            tgt_vocab: self.tgt_vocab.clone(),
        }
    }
}

/// Index partition produced by [`split_indices`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

/// Uniformly random disjoint dev/test selection; everything else is train.
/// Each partition is returned in ascending index order.
pub fn split_indices(n: usize, dev_n: usize, test_n: usize, seed: u64) -> Result<SplitIndices> {
    if dev_n + test_n >= n {
        return Err(Error::contract(format!(
            "cannot take {dev_n} dev + {test_n} test pairs from {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut dev = order[..dev_n].to_vec();
    let mut test = order[dev_n..dev_n + test_n].to_vec();
    let mut train = order[dev_n + test_n..].to_vec();
    dev.sort_unstable();
    test.sort_unstable();
    train.sort_unstable();
    Ok(SplitIndices { train, dev, test })
}

/// Splits a corpus into `(train, dev, test)`. Training pairs with either side
/// longer than `max_train_len` tokens are dropped.
pub fn split(
    corpus: &ParallelCorpus,
    dev_n: usize,
    test_n: usize,
    seed: u64,
    max_train_len: usize,
) -> Result<(ParallelCorpus, ParallelCorpus, ParallelCorpus)> {
    let idx = split_indices(corpus.len(), dev_n, test_n, seed)?;
    let train = idx.train.into_iter().filter(|&i| {
        let p = &corpus.pairs[i];
        p.source.len() <= max_train_len && p.target.len() <= max_train_len
    });
    Ok((corpus.subset(train), corpus.subset(idx.dev), corpus.subset(idx.test)))
}
