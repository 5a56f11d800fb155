//! Binary inverted-index file.
//!
//! Layout, all little-endian: magic `SEGIDX1`, the 64-char hex vocabulary
//! hash, `doc_count: u64`, `avg_doc_length: f64`, `doc_count` u32 lengths,
//! `term_count: u64`, then per term `token: u32, n: u32` and `n` pairs of
//! `doc: u32, tf: u32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use segnmt_core::index::{InvertedIndex, Posting};

use crate::error::{Error, Result};

const MAGIC: &[u8; 7] = b"SEGIDX1";

pub fn encode(index: &InvertedIndex, vocab_hash: &str) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend(vocab_hash.as_bytes());
    out.extend((index.doc_count() as u64).to_le_bytes());
    out.extend(index.avg_doc_length().to_le_bytes());
    for &l in index.doc_lengths() {
        out.extend(l.to_le_bytes());
    }
    out.extend((index.terms().count() as u64).to_le_bytes());
    for (t, list) in index.terms() {
        out.extend(t.to_le_bytes());
        out.extend((list.len() as u32).to_le_bytes());
        for p in list {
            out.extend(p.doc.to_le_bytes());
            out.extend(p.tf.to_le_bytes());
        }
    }
    out
}

type Decoded = (String, Vec<u32>, f64, BTreeMap<u32, Vec<Posting>>);

fn decode(bytes: &[u8]) -> Option<Decoded> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Option<&[u8]> {
        let s = bytes.get(pos..pos.checked_add(n)?)?;
        pos += n;
        Some(s)
    };
    if take(MAGIC.len())? != MAGIC {
        return None;
    }
    let hash = std::str::from_utf8(take(64)?).ok()?.to_owned();
    let doc_count = usize::try_from(u64::from_le_bytes(take(8)?.try_into().ok()?)).ok()?;
    let avg = f64::from_le_bytes(take(8)?.try_into().ok()?);
    let mut lengths = Vec::new();
    for _ in 0..doc_count {
        lengths.push(u32::from_le_bytes(take(4)?.try_into().ok()?));
    }
    let terms = u64::from_le_bytes(take(8)?.try_into().ok()?);
    let mut postings = BTreeMap::new();
    for _ in 0..terms {
        let token = u32::from_le_bytes(take(4)?.try_into().ok()?);
        let n = u32::from_le_bytes(take(4)?.try_into().ok()?);
        let mut list = Vec::new();
        for _ in 0..n {
            let doc = u32::from_le_bytes(take(4)?.try_into().ok()?);
            let tf = u32::from_le_bytes(take(4)?.try_into().ok()?);
            list.push(Posting { doc, tf });
        }
        postings.insert(token, list);
    }
    if take(1).is_some() {
        return None;
    }
    Some((hash, lengths, avg, postings))
}

pub fn save(path: &Path, index: &InvertedIndex, vocab_hash: &str) -> Result<()> {
    fs::write(path, encode(index, vocab_hash)).map_err(|e| Error::io(path, e))
}

/// Loads an index and checks it was built against `vocab_hash` over a corpus
/// of `doc_count` pairs.
pub fn load(path: &Path, vocab_hash: &str, doc_count: usize) -> Result<InvertedIndex> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (hash, lengths, avg, postings) = decode(&bytes).ok_or_else(|| Error::format(path, "not a valid index file"))?;
    if hash != vocab_hash {
        return Err(Error::Mismatch(format!("{} was built with a different vocabulary", path.display())));
    }
    if lengths.len() != doc_count {
        return Err(Error::Mismatch(format!(
            "{} indexes {} documents, corpus has {doc_count}",
            path.display(),
            lengths.len()
        )));
    }
    InvertedIndex::from_parts(lengths, avg, postings).map_err(|e| Error::format(path, e.to_string()))
}
