//! Two-stage retrieval against the training corpus and its JSON-lines form.

use std::io::Write;

use segnmt_core::corpus::{ParallelCorpus, Vocabulary};
use segnmt_core::fuzzy::{rerank, RetrievedSet};
use segnmt_core::index::InvertedIndex;
use segnmt_core::TokenId;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// The `k` best pairs by fuzzy score; zero retrieves nothing.
    TopK(usize),
    /// Greedy coverage selection over the whole candidate pool.
    Adaptive,
}

#[derive(Debug, Clone, Copy)]
pub struct Retriever<'a> {
    pub index: &'a InvertedIndex,
    pub memory: &'a ParallelCorpus,
    /// BM25 candidate pool size.
    pub pool: usize,
}

impl<'a> Retriever<'a> {
    pub fn new(index: &'a InvertedIndex, memory: &'a ParallelCorpus, pool: usize) -> Self {
        Retriever { index, memory, pool }
    }

    /// `self_id` drops that training pair; `exclude_exact` drops every pair
    /// whose source equals the query.
    pub fn retrieve(&self, query: &[TokenId], selection: Selection, self_id: Option<usize>, exclude_exact: bool) -> RetrievedSet {
        if selection == Selection::TopK(0) {
            return RetrievedSet::default();
        }
        let candidates = self
            .index
            .query(query, self.pool)
            .exclude_self(self_id, query, exclude_exact, |d| self.memory.source(d));
        let ranked = rerank(&candidates, query, self.memory);
        match selection {
            Selection::TopK(k) => ranked.select_top_k(k),
            Selection::Adaptive => ranked.select_greedy_coverage(query),
        }
    }
}

/// One retrieval result as written by the `retrieve` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub query: usize,
    pub doc_ids: Vec<usize>,
    pub scores: Vec<f64>,
    pub sources: Vec<Vec<String>>,
    pub targets: Vec<Vec<String>>,
}

impl RetrievalRecord {
    pub fn new(query: usize, set: &RetrievedSet, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Result<Self> {
        let words = |v: &Vocabulary, ids: &[TokenId]| -> Result<Vec<String>> {
            Ok(ids.iter().map(|&i| v.token(i).map(str::to_owned)).collect::<Result<_, _>>()?)
        };
        Ok(RetrievalRecord {
            query,
            doc_ids: set.pairs.iter().map(|p| p.doc_id).collect(),
            scores: set.pairs.iter().map(|p| p.score).collect(),
            sources: set.pairs.iter().map(|p| words(src_vocab, &p.source)).collect::<Result<_>>()?,
            targets: set.pairs.iter().map(|p| words(tgt_vocab, &p.target)).collect::<Result<_>>()?,
        })
    }
}

pub fn write_jsonl<T: Serialize>(mut out: impl Write, records: &[T]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
