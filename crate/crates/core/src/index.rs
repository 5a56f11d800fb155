//! In-process inverted index with BM25 ranking over source sentences.
//!
//! This is the first retrieval stage: it only has to produce a high-recall
//! candidate pool, which the fuzzy matcher then re-ranks.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25 {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25 {
    fn default() -> Self {
        Bm25 { k1: 1.2, b: 0.75 }
    }
}

impl Bm25 {
    /// Lucene-style idf, always positive.
    pub fn idf(&self, doc_count: usize, doc_freq: usize) -> f64 {
        let n = doc_count as f64;
        let df = doc_freq as f64;
        libm::log(1.0 + (n - df + 0.5) / (df + 0.5))
    }

    pub fn term_weight(&self, idf: f64, tf: u32, doc_len: u32, avg_doc_length: f64) -> f64 {
        let tf = tf as f64;
        let norm = 1.0 - self.b + self.b * doc_len as f64 / avg_doc_length;
        idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    postings: BTreeMap<TokenId, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    scorer: Bm25,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub doc_id: usize,
    pub score: f64,
}

/// Candidates sorted by score descending, ties by ascending doc id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateList {
    pub entries: Vec<Candidate>,
}

impl CandidateList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|c| c.doc_id)
    }

    /// Drops the query's own training pair (when `self_id` is given) and,
    /// when `exclude_exact` is set, every candidate whose source equals
    /// `query` token for token.
    pub fn exclude_self<'a>(
        mut self,
        self_id: Option<usize>,
        query: &[TokenId],
        exclude_exact: bool,
        source_of: impl Fn(usize) -> &'a [TokenId],
    ) -> CandidateList {
        self.entries.retain(|c| {
            Some(c.doc_id) != self_id && !(exclude_exact && source_of(c.doc_id) == query)
        });
        self
    }
}

impl InvertedIndex {
    pub fn build<'a>(sources: impl IntoIterator<Item = &'a [TokenId]>) -> Result<Self> {
        Self::build_with(sources, Bm25::default())
    }

    pub fn build_with<'a>(sources: impl IntoIterator<Item = &'a [TokenId]>, scorer: Bm25) -> Result<Self> {
        let mut postings: BTreeMap<TokenId, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::new();
        for (doc, tokens) in sources.into_iter().enumerate() {
            let mut tf: BTreeMap<TokenId, u32> = BTreeMap::new();
            for &t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push(Posting { doc: doc as u32, tf: n });
            }
            doc_lengths.push(tokens.len() as u32);
        }
        if doc_lengths.is_empty() {
            return Err(Error::contract("cannot index an empty corpus"));
        }
        let avg_doc_length = doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / doc_lengths.len() as f64;
        Ok(InvertedIndex {
            postings,
            doc_lengths,
            avg_doc_length,
            scorer,
        })
    }

    /// Reassembles an index from stored parts, validating its invariants.
    pub fn from_parts(doc_lengths: Vec<u32>, avg_doc_length: f64, postings: BTreeMap<TokenId, Vec<Posting>>) -> Result<Self> {
        if doc_lengths.is_empty() {
            return Err(Error::contract("index has no documents"));
        }
        for list in postings.values() {
            if list.is_empty()
                || list.windows(2).any(|w| w[0].doc >= w[1].doc)
                || list.iter().any(|p| p.doc as usize >= doc_lengths.len())
            {
                return Err(Error::contract("malformed postings list"));
            }
        }
        Ok(InvertedIndex {
            postings,
            doc_lengths,
            avg_doc_length,
            scorer: Bm25::default(),
        })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn doc_lengths(&self) -> &[u32] {
        &self.doc_lengths
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn scorer(&self) -> Bm25 {
        self.scorer
    }

    pub fn postings(&self, token: TokenId) -> Option<&[Posting]> {
        self.postings.get(&token).map(Vec::as_slice)
    }

    pub fn terms(&self) -> impl Iterator<Item = (TokenId, &[Posting])> {
        self.postings.iter().map(|(&t, p)| (t, p.as_slice()))
    }

    /// Top-`n` documents by BM25 summed over every query token occurrence.
    pub fn query(&self, query: &[TokenId], n: usize) -> CandidateList {
        let mut scores = vec![0.0; self.doc_count()];
        let mut touched = Vec::new();
        for &t in query {
            let Some(list) = self.postings.get(&t) else { continue };
            let idf = self.scorer.idf(self.doc_count(), list.len());
            for p in list {
                let d = p.doc as usize;
                if scores[d] == 0.0 {
                    touched.push(d);
                }
                scores[d] += self
                    .scorer
                    .term_weight(idf, p.tf, self.doc_lengths[d], self.avg_doc_length);
            }
        }
        let mut entries: Vec<Candidate> = touched
            .into_iter()
            .map(|doc_id| Candidate {
                doc_id,
                score: scores[doc_id],
            })
            .collect();
        entries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.doc_id.cmp(&b.doc_id)));
        entries.truncate(n);
        CandidateList { entries }
    }
}
