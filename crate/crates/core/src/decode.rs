//! Greedy and beam-search decoding with the retrieval-guided decoder.
//!
//! Each hypothesis carries its own decoder state and coverage vector. The
//! beam shrinks as hypotheses finish: at every step the best
//! `width - finished` expansions survive.

use alloc::vec::Vec;

use crate::corpus::{BOS, EOS, PAD};
use crate::nmt::{self, Model};
use crate::seg::{self, DecodeState, FusionMode};
use crate::tape::Tape;
use crate::{Error, Result, TokenId};

/// Decoding length cap for a source of `source_len` tokens.
pub fn max_len_for(source_len: usize) -> usize {
    2 * source_len + 10
}

/// What the decoder did at one output position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub token: TokenId,
    /// Gate value, absent without memory.
    pub zeta: Option<f64>,
    /// Slot weights, empty without memory.
    pub q: Vec<f64>,
    /// Slot with the highest weight.
    pub copied_from: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    /// Emitted tokens without the closing EOS.
    pub tokens: Vec<TokenId>,
    pub logprob: f64,
    /// Whether EOS was produced before the length cap.
    pub finished: bool,
    pub trace: Vec<StepTrace>,
}

struct Hypothesis {
    tokens: Vec<TokenId>,
    logprob: f64,
    state: DecodeState,
    trace: Vec<StepTrace>,
}

impl Hypothesis {
    fn into_translation(mut self, finished: bool) -> Translation {
        if finished {
            self.tokens.pop();
        }
        Translation {
            tokens: self.tokens,
            logprob: self.logprob,
            finished,
            trace: self.trace,
        }
    }
}

fn emittable(token: usize) -> bool {
    token != PAD as usize && token != BOS as usize
}

fn trace_step(t: &Tape, token: TokenId, out: &seg::StepOutput) -> StepTrace {
    let q = out.q.map(|q| t.data(q).to_vec()).unwrap_or_default();
    let copied_from = q
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i);
    StepTrace {
        token,
        zeta: out.zeta.map(|z| t.scalar(z)),
        q,
        copied_from,
    }
}

/// Beam search of width `width` over the fused output distribution. Ties
/// between expansions go to the lower token id, then the earlier hypothesis.
/// Returns the most probable finished hypothesis, or the most probable
/// unfinished one if none reached EOS within `max_len` tokens.
pub fn beam_search(
    model: &Model,
    fusion: FusionMode,
    source: &[TokenId],
    memory_pairs: &[(&[TokenId], &[TokenId])],
    width: usize,
    max_len: usize,
) -> Result<Translation> {
    if width == 0 {
        return Err(Error::contract("beam width must be at least 1"));
    }
    let mut t = Tape::new(&model.store);
    let memory = seg::build_memory(&mut t, model, memory_pairs)?;
    let enc = nmt::encode(&mut t, model, source)?;
    let state = seg::start(&mut t, model, &enc, &memory)?;
    let mut live = alloc::vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        state,
        trace: Vec::new(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        if live.is_empty() || finished.len() >= width {
            break;
        }
        let mut outs = Vec::with_capacity(live.len());
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let out = seg::step(&mut t, model, fusion, &enc, &memory, &hyp.state)?;
            for (y, &lp) in t.data(out.logp).iter().enumerate() {
                if emittable(y) {
                    cands.push((hyp.logprob + lp, y, h));
                }
            }
            outs.push(out);
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(width - finished.len());

        let mut next = Vec::with_capacity(cands.len());
        for (score, y, h) in cands {
            let y = y as TokenId;
            let parent = &live[h];
            let mut tokens = parent.tokens.clone();
            tokens.push(y);
            let mut trace = parent.trace.clone();
            trace.push(trace_step(&t, y, &outs[h]));
            let hyp = Hypothesis {
                tokens,
                logprob: score,
                state: outs[h].next_state(y),
                trace,
            };
            if y == EOS {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
    }

    let best = |v: Vec<Hypothesis>| {
        v.into_iter()
            .reduce(|a, b| if b.logprob > a.logprob { b } else { a })
    };
    match best(finished) {
        Some(h) => Ok(h.into_translation(true)),
        None => best(live)
            .map(|h| h.into_translation(false))
            .ok_or_else(|| Error::contract("beam search produced no hypothesis")),
    }
}

/// Argmax decoding; ties go to the lower token id.
pub fn greedy_decode(
    model: &Model,
    fusion: FusionMode,
    source: &[TokenId],
    memory_pairs: &[(&[TokenId], &[TokenId])],
    max_len: usize,
) -> Result<Translation> {
    let mut t = Tape::new(&model.store);
    let memory = seg::build_memory(&mut t, model, memory_pairs)?;
    let enc = nmt::encode(&mut t, model, source)?;
    let mut state = seg::start(&mut t, model, &enc, &memory)?;
    let mut tokens = Vec::new();
    let mut trace = Vec::new();
    let mut logprob = 0.0;
    for _ in 0..max_len {
        let out = seg::step(&mut t, model, fusion, &enc, &memory, &state)?;
        let (y, lp) = t
            .data(out.logp)
            .iter()
            .enumerate()
            .filter(|(y, _)| emittable(*y))
            .fold((0, f64::NEG_INFINITY), |best, (y, &lp)| if lp > best.1 { (y, lp) } else { best });
        let y = y as TokenId;
        logprob += lp;
        trace.push(trace_step(&t, y, &out));
        if y == EOS {
            return Ok(Translation {
                tokens,
                logprob,
                finished: true,
                trace,
            });
        }
        tokens.push(y);
        state = out.next_state(y);
    }
    Ok(Translation {
        tokens,
        logprob,
        finished: false,
        trace,
    })
}

/// Memory slot count for `memory_pairs`, for reporting.
pub fn memory_size(memory_pairs: &[(&[TokenId], &[TokenId])]) -> usize {
    memory_pairs
        .iter()
        .filter(|(s, t)| !s.is_empty() && !t.is_empty())
        .map(|(_, t)| t.len())
        .sum()
}
