//! Test-set decoding, BLEU, the fuzzy-bin breakdown and the K sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use segnmt_core::bleu::{corpus_bleu, sentence_bleu, Smoothing};
use segnmt_core::corpus::{desegment, ParallelCorpus, Vocabulary};
use segnmt_core::decode::{beam_search, max_len_for, Translation};
use segnmt_core::fuzzy::RetrievedSet;
use segnmt_core::nmt::Model;
use segnmt_core::seg::FusionMode;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{Retriever, Selection};

/// Beam-decodes every source against its retrieved set on the current rayon
/// pool. Output order follows input order.
pub fn translate_all(
    model: &Model,
    fusion: FusionMode,
    sources: &[&[u32]],
    retrieved: &[RetrievedSet],
    beam: usize,
) -> Result<Vec<Translation>> {
    sources
        .par_iter()
        .zip(retrieved)
        .map(|(src, set)| {
            let pairs = set.memory_pairs();
            Ok(beam_search(model, fusion, src, &pairs, beam, max_len_for(src.len()))?)
        })
        .collect()
}

/// Whitespace words of a decoded hypothesis.
pub fn hypothesis_words(vocab: &Vocabulary, t: &Translation) -> Result<Vec<String>> {
    Ok(vocab.decode(&t.tokens)?.split_whitespace().map(str::to_owned).collect())
}

/// Whitespace words of each reference target.
pub fn reference_words(corpus: &ParallelCorpus) -> Vec<Vec<String>> {
    corpus
        .pairs
        .iter()
        .map(|p| desegment(&p.target.surface).split_whitespace().map(str::to_owned).collect())
        .collect()
}

/// Retrieval for every source of `corpus` (test time: nothing excluded).
pub fn retrieve_all(retriever: &Retriever, corpus: &ParallelCorpus, selection: Selection) -> Vec<RetrievedSet> {
    (0..corpus.len())
        .into_par_iter()
        .map(|i| retriever.retrieve(corpus.source(i), selection, None, false))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    /// `0`, `1`, ... or `adaptive`.
    pub k: String,
    pub mean_retrieved: f64,
    pub bleu: f64,
}

/// Decodes `corpus` once per K and once with adaptive selection when asked.
/// K = 0 decodes without memory.
pub fn eval_k_sweep(
    model: &Model,
    fusion: FusionMode,
    corpus: &ParallelCorpus,
    retriever: &Retriever,
    ks: &[usize],
    adaptive: bool,
    beam: usize,
) -> Result<Vec<KSweepRow>> {
    let sources: Vec<&[u32]> = corpus.sources().collect();
    let refs = reference_words(corpus);
    let mut runs: Vec<(String, Selection)> = ks.iter().map(|&k| (k.to_string(), Selection::TopK(k))).collect();
    if adaptive {
        runs.push(("adaptive".into(), Selection::Adaptive));
    }
    runs.into_iter()
        .map(|(k, sel)| {
            let sets = retrieve_all(retriever, corpus, sel);
            let out = translate_all(model, fusion, &sources, &sets, beam)?;
            let hyps = out
                .iter()
                .map(|t| hypothesis_words(&corpus.tgt_vocab, t))
                .collect::<Result<Vec<_>>>()?;
            Ok(KSweepRow {
                k,
                mean_retrieved: sets.iter().map(RetrievedSet::len).sum::<usize>() as f64 / sets.len().max(1) as f64,
                bleu: corpus_bleu(&hyps, &refs, 4, Smoothing::None)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzyBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Absent for empty bins.
    pub bleu_seg: Option<f64>,
    pub bleu_base: Option<f64>,
}

/// Bin of a score in `[0, 1]`: `[lo, lo + width)`, the last bin closed.
/// Scores within 1e-9 below a boundary count as on it.
pub fn bin_index(score: f64, width: f64) -> usize {
    let bins = (1.0 / width).round() as usize;
    (((score + 1e-9) / width).floor() as usize).min(bins - 1)
}

/// Per-bin BLEU (corpus BLEU over the bin, add-one smoothing for n ≥ 2) of
/// both systems, bucketed by the best retrieved fuzzy score.
pub fn eval_fuzzy_bins(
    scores: &[f64],
    seg: &[Vec<String>],
    base: &[Vec<String>],
    refs: &[Vec<String>],
    width: f64,
) -> Result<Vec<FuzzyBin>> {
    if !(width > 0.0 && width <= 1.0) {
        return Err(Error::Usage(format!("bin width {width} outside (0, 1]")));
    }
    if seg.len() != scores.len() || base.len() != scores.len() || refs.len() != scores.len() {
        return Err(Error::Usage("fuzzy-bin inputs differ in length".into()));
    }
    let bins = (1.0 / width).round() as usize;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins];
    for (i, &s) in scores.iter().enumerate() {
        members[bin_index(s, width)].push(i);
    }
    members
        .iter()
        .enumerate()
        .map(|(b, idx)| {
            let pick = |v: &[Vec<String>]| idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
            let r = pick(refs);
            let bleu = |h: Vec<Vec<String>>| -> Result<Option<f64>> {
                if idx.is_empty() {
                    Ok(None)
                } else {
                    Ok(Some(corpus_bleu(&h, &r, 4, Smoothing::AddOne)?))
                }
            };
            Ok(FuzzyBin {
                lo: b as f64 * width,
                hi: if b + 1 == bins { 1.0 } else { (b + 1) as f64 * width },
                count: idx.len(),
                bleu_seg: bleu(pick(seg))?,
                bleu_base: bleu(pick(base))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    /// Fuzzy score of the best retrieved pair, 0 when nothing was retrieved.
    pub fuzzy: f64,
    pub sentence_bleu: f64,
    pub baseline_sentence_bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub baseline_bleu: f64,
    pub sentences: Vec<SentenceScore>,
    pub fuzzy_bins: Vec<FuzzyBin>,
    pub k_sweep: Vec<KSweepRow>,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub selection: Selection,
    pub beam: usize,
    /// K values to sweep; empty skips the sweep unless `adaptive` is set.
    pub k_sweep: Vec<usize>,
    pub adaptive: bool,
    pub bin_width: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            selection: Selection::TopK(1),
            beam: 5,
            k_sweep: Vec::new(),
            adaptive: false,
            bin_width: 0.1,
        }
    }
}

/// Decoded hypotheses of one system as whitespace words.
pub fn decode_words(
    model: &Model,
    fusion: FusionMode,
    corpus: &ParallelCorpus,
    retrieved: &[RetrievedSet],
    beam: usize,
) -> Result<Vec<Vec<String>>> {
    let sources: Vec<&[u32]> = corpus.sources().collect();
    translate_all(model, fusion, &sources, retrieved, beam)?
        .iter()
        .map(|t| hypothesis_words(&corpus.tgt_vocab, t))
        .collect()
}

/// Full evaluation of `model` on `corpus`. The comparison system is
/// `baseline` decoded without memory, or `model` itself without memory when
/// no baseline is given.
pub fn evaluate(
    model: &Model,
    fusion: FusionMode,
    baseline: Option<&Model>,
    corpus: &ParallelCorpus,
    retriever: &Retriever,
    opts: &EvalOptions,
    config: serde_json::Value,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::Usage("empty evaluation set".into()));
    }
    let refs = reference_words(corpus);
    let sets = retrieve_all(retriever, corpus, opts.selection);
    let empty = vec![RetrievedSet::default(); corpus.len()];
    let seg = decode_words(model, fusion, corpus, &sets, opts.beam)?;
    let base = decode_words(baseline.unwrap_or(model), fusion, corpus, &empty, opts.beam)?;
    let scores: Vec<f64> = retrieve_all(retriever, corpus, Selection::TopK(1))
        .iter()
        .map(|s| s.best_score().unwrap_or(0.0))
        .collect();
    let sentences = (0..corpus.len())
        .map(|i| {
            Ok(SentenceScore {
                fuzzy: scores[i],
                sentence_bleu: sentence_bleu(&seg[i], &refs[i], 4, Smoothing::AddOne)?,
                baseline_sentence_bleu: sentence_bleu(&base[i], &refs[i], 4, Smoothing::AddOne)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let k_sweep = if opts.k_sweep.is_empty() && !opts.adaptive {
        Vec::new()
    } else {
        eval_k_sweep(model, fusion, corpus, retriever, &opts.k_sweep, opts.adaptive, opts.beam)?
    };
    Ok(EvalReport {
        bleu: corpus_bleu(&seg, &refs, 4, Smoothing::None)?,
        baseline_bleu: corpus_bleu(&base, &refs, 4, Smoothing::None)?,
        fuzzy_bins: eval_fuzzy_bins(&scores, &seg, &base, &refs, opts.bin_width)?,
        sentences,
        k_sweep,
        config,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.4}"))
}

pub fn fuzzy_bins_tsv(bins: &[FuzzyBin]) -> String {
    let mut s = String::from("bin_lo\tbin_hi\tcount\tbleu_seg\tbleu_base\n");
    for b in bins {
        let _ = writeln!(s, "{:.2}\t{:.2}\t{}\t{}\t{}", b.lo, b.hi, b.count, opt(b.bleu_seg), opt(b.bleu_base));
    }
    s
}

pub fn k_sweep_tsv(rows: &[KSweepRow]) -> String {
    let mut s = String::from("K\tmean_retrieved\tbleu\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{:.4}\t{:.4}", r.k, r.mean_retrieved, r.bleu);
    }
    s
}

/// Writes `fuzzy_bins.tsv` and, when the sweep ran, `k_sweep.tsv`.
pub fn write_tsvs(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bins = dir.join("fuzzy_bins.tsv");
    fs::write(&bins, fuzzy_bins_tsv(&report.fuzzy_bins)).map_err(|e| Error::io(&bins, e))?;
    if !report.k_sweep.is_empty() {
        let k = dir.join("k_sweep.tsv");
        fs::write(&k, k_sweep_tsv(&report.k_sweep)).map_err(|e| Error::io(&k, e))?;
    }
    Ok(())
}
