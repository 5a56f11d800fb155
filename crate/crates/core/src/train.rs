//! Per-example likelihood under the retrieval-guided decoder and the
//! parameter update.
//!
//! The batch loop here is sequential. The `segnmt` crate runs
//! [`example_gradients`] on worker threads and hands the ordered results to
//! [`apply_gradients`], which gives identical updates.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::EOS;
use crate::fuzzy::RetrievedSet;
use crate::nmt::{self, Model};
use crate::param::{adam_step, Gradients};
use crate::seg::{self, FusionMode};
use crate::tape::{Tape, Var};
use crate::{Error, Result, TokenId};

/// A training pair together with the pairs retrieved for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedExample {
    /// Position of the pair in the training corpus.
    pub doc_id: usize,
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub retrieved: RetrievedSet,
}

impl AugmentedExample {
    pub fn plain(doc_id: usize, source: Vec<TokenId>, target: Vec<TokenId>) -> Self {
        AugmentedExample {
            doc_id,
            source,
            target,
            retrieved: RetrievedSet::default(),
        }
    }
}

/// Per-step log-probabilities of `target` followed by EOS.
pub fn target_log_probs(
    t: &mut Tape,
    model: &Model,
    fusion: FusionMode,
    source: &[TokenId],
    target: &[TokenId],
    memory_pairs: &[(&[TokenId], &[TokenId])],
) -> Result<Vec<Var>> {
    let memory = seg::build_memory(t, model, memory_pairs)?;
    let enc = nmt::encode(t, model, source)?;
    let mut state = seg::start(t, model, &enc, &memory)?;
    let mut picks = Vec::with_capacity(target.len() + 1);
    for &y in target.iter().chain(core::iter::once(&EOS)) {
        let out = seg::step(t, model, fusion, &enc, &memory, &state)?;
        picks.push(t.pick(out.logp, y as usize)?);
        state = out.next_state(y);
    }
    Ok(picks)
}

/// `-Σ_t log p(y_t | y_<t, x, memory)` over `target` plus EOS.
pub fn example_nll(
    t: &mut Tape,
    model: &Model,
    fusion: FusionMode,
    source: &[TokenId],
    target: &[TokenId],
    memory_pairs: &[(&[TokenId], &[TokenId])],
) -> Result<Var> {
    let picks = target_log_probs(t, model, fusion, source, target, memory_pairs)?;
    let all = t.concat(&picks)?;
    let ll = t.sum(all);
    Ok(t.scale_const(ll, -1.0))
}

/// Loss value and gradients of one example. `index` names the example in
/// the error returned for a non-finite loss.
pub fn example_gradients(model: &Model, fusion: FusionMode, example: &AugmentedExample, index: usize) -> Result<(f64, Gradients)> {
    let mut t = Tape::new(&model.store);
    let pairs = example.retrieved.memory_pairs();
    let loss = example_nll(&mut t, model, fusion, &example.source, &example.target, &pairs)?;
    let value = t.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { index });
    }
    Ok((value, t.backward(loss)?))
}

/// Averages the per-example gradients (summed in the given order), clips the
/// global norm and takes one Adam step. Returns the pre-clip norm.
pub fn apply_gradients(model: &mut Model, grads: &[Gradients], learning_rate: f64, clip: Option<f64>) -> Result<f64> {
    if grads.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut total = Gradients::empty(model.store.len());
    for g in grads {
        total.add_assign(g);
    }
    total.scale(1.0 / grads.len() as f64);
    model.store.zero_grad();
    model.store.accumulate(&total);
    let norm = match clip {
        Some(max) => model.store.clip_grad_norm(max),
        None => model.store.grad_norm(),
    };
    adam_step(&mut model.store, learning_rate)?;
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Mean per-sentence NLL of the batch, before the update.
    pub mean_nll: f64,
    pub grad_norm: f64,
}

/// One sequential update on `batch`.
pub fn train_step(
    model: &mut Model,
    fusion: FusionMode,
    batch: &[AugmentedExample],
    learning_rate: f64,
    clip: Option<f64>,
) -> Result<StepStats> {
    let mut losses = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let (l, g) = example_gradients(model, fusion, ex, i)?;
        losses += l;
        grads.push(g);
    }
    let grad_norm = apply_gradients(model, &grads, learning_rate, clip)?;
    Ok(StepStats {
        mean_nll: losses / batch.len() as f64,
        grad_norm,
    })
}

/// Mean per-sentence NLL without touching the parameters.
pub fn mean_nll(model: &Model, fusion: FusionMode, examples: &[AugmentedExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::contract("mean NLL of an empty set"));
    }
    let mut total = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let mut t = Tape::new(&model.store);
        let pairs = ex.retrieved.memory_pairs();
        let loss = example_nll(&mut t, model, fusion, &ex.source, &ex.target, &pairs)?;
        let v = t.scalar(loss);
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { index: i });
        }
        total += v;
    }
    Ok(total / examples.len() as f64)
}
