//! Corpus-level BLEU over token sequences.

use alloc::collections::BTreeMap;
use alloc::vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothing {
    #[default]
    None,
    /// Adds one to matches and totals for n ≥ 2.
    AddOne,
}

fn ngram_counts<T: Ord>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts = BTreeMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// BLEU in `[0, 100]` with clipped n-gram precisions for `n = 1..=max_n`,
/// their geometric mean and the corpus brevity penalty.
pub fn corpus_bleu<T: Ord, H: AsRef<[T]>, R: AsRef<[T]>>(
    hypotheses: &[H],
    references: &[R],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::contract("BLEU of an empty corpus"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::contract("hypothesis and reference counts differ"));
    }
    if max_n == 0 {
        return Err(Error::contract("max_n must be at least 1"));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let (m, c) = match smoothing {
            Smoothing::AddOne if n >= 1 => (matches[n] + 1, totals[n] + 1),
            _ => (matches[n], totals[n]),
        };
        if m == 0 {
            return Ok(0.0);
        }
        log_sum += libm::log(m as f64 / c as f64);
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        libm::exp(1.0 - ref_len as f64 / hyp_len as f64)
    };
    Ok((100.0 * bp * libm::exp(log_sum / max_n as f64)).clamp(0.0, 100.0))
}

/// BLEU of a single sentence pair.
pub fn sentence_bleu<T: Ord>(hypothesis: &[T], reference: &[T], max_n: usize, smoothing: Smoothing) -> Result<f64> {
    corpus_bleu(&[hypothesis], &[reference], max_n, smoothing)
}
