//! Edit-distance re-ranking of retrieval candidates and final selection.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::ParallelCorpus;
use crate::index::CandidateList;
use crate::{Error, Result, TokenId};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - edit_distance / max(|a|, |b|)`, in `[0, 1]`.
pub fn fuzzy_score<T: PartialEq>(a: &[T], b: &[T]) -> Result<f64> {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return Err(Error::contract("fuzzy score of two empty sequences"));
    }
    let s = 1.0 - edit_distance(a, b) as f64 / longest as f64;
    Ok(s.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedPair {
    pub doc_id: usize,
    pub score: f64,
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievedSet {
    pub pairs: Vec<RetrievedPair>,
}

impl RetrievedSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn best_score(&self) -> Option<f64> {
        self.pairs.iter().map(|p| p.score).reduce(f64::max)
    }

    /// Source/target views, in set order.
    pub fn memory_pairs(&self) -> Vec<(&[TokenId], &[TokenId])> {
        self.pairs
            .iter()
            .map(|p| (p.source.as_slice(), p.target.as_slice()))
            .collect()
    }

    /// First `k` entries.
    pub fn select_top_k(mut self, k: usize) -> RetrievedSet {
        self.pairs.truncate(k);
        self
    }

    /// Greedy coverage selection over a set already ranked by score.
    ///
    /// Coverage is the fraction of distinct query tokens present in the
    /// source of any selected pair; a pair is kept iff it strictly increases
    /// it. Pairs are returned in selection order.
    pub fn select_greedy_coverage(self, query: &[TokenId]) -> RetrievedSet {
        let types: BTreeSet<TokenId> = query.iter().copied().collect();
        let mut covered: BTreeSet<TokenId> = BTreeSet::new();
        let mut pairs = Vec::new();
        for pair in self.pairs {
            let gained: Vec<TokenId> = pair
                .source
                .iter()
                .copied()
                .filter(|t| types.contains(t) && !covered.contains(t))
                .collect();
            if !gained.is_empty() {
                covered.extend(gained);
                pairs.push(pair);
            }
        }
        RetrievedSet { pairs }
    }
}

/// Coverage of `query` token types by the sources of `set`.
pub fn coverage(set: &RetrievedSet, query: &[TokenId]) -> f64 {
    let types: BTreeSet<TokenId> = query.iter().copied().collect();
    if types.is_empty() {
        return 0.0;
    }
    let hit = types
        .iter()
        .filter(|t| set.pairs.iter().any(|p| p.source.contains(t)))
        .count();
    hit as f64 / types.len() as f64
}

/// Scores every candidate's source against `query` and sorts by fuzzy
/// score descending, ties by lower doc id.
pub fn rerank(candidates: &CandidateList, query: &[TokenId], corpus: &ParallelCorpus) -> RetrievedSet {
    let mut pairs: Vec<RetrievedPair> = candidates
        .entries
        .iter()
        .map(|c| {
            let source = corpus.source(c.doc_id);
            RetrievedPair {
                doc_id: c.doc_id,
                score: fuzzy_score(query, source).unwrap_or(0.0),
                source: source.to_vec(),
                target: corpus.target(c.doc_id).to_vec(),
            }
        })
        .collect();
    pairs.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.doc_id.cmp(&b.doc_id)));
    RetrievedSet { pairs }
}
