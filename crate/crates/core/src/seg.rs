//! Retrieval-guided decoding: a key-value memory built by teacher-forcing the
//! model over retrieved pairs, bilinear soft matching with a coverage
//! penalty, a learned gate, and deep or shallow fusion.
//!
//! Keys are the retrieved pairs' context vectors, values their decoder states
//! and target tokens. The coverage vector β is carried by each decoding
//! trajectory; matching at step t reads β from step t-1 and the update
//! `β += ζ_t · q_t` happens afterwards.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::nmt::{self, EncoderOutput, Init, Model, ModelConfig, ParamBuilder};
use crate::param::ParamId;
use crate::tape::{Tape, Var};
use crate::{Error, Result, Tensor, TokenId};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Deep,
    #[default]
    Shallow,
}

impl core::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deep" => Ok(FusionMode::Deep),
            "shallow" => Ok(FusionMode::Shallow),
            other => Err(Error::contract(alloc::format!("unknown fusion mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SegParams {
    /// Diagonal of the bilinear metric, initialised to ones.
    pub metric_diag: ParamId,
    /// Coverage penalty weight, initialised to zero.
    pub lambda: ParamId,
    pub gate_w1: ParamId,
    pub gate_b1: ParamId,
    pub gate_w2: ParamId,
    pub gate_b2: ParamId,
}

impl SegParams {
    pub(crate) fn declare(b: &mut ParamBuilder, c: &ModelConfig) -> Result<Self> {
        let (h, ctx) = (c.hidden, c.context_dim());
        Ok(SegParams {
            metric_diag: b.param("seg.metric_diag", &[ctx], Init::Ones)?,
            lambda: b.param("seg.lambda", &[1], Init::Zeros)?,
            gate_w1: b.param("seg.gate_w1", &[ctx + 2 * h, h], Init::Uniform)?,
            gate_b1: b.param("seg.gate_b1", &[h], Init::Zeros)?,
            gate_w2: b.param("seg.gate_w2", &[h, 1], Init::Uniform)?,
            gate_b2: b.param("seg.gate_b2", &[1], Init::Zeros)?,
        })
    }
}

/// Plain-data view of one memory slot.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorySlot {
    pub key: Vec<f64>,
    pub value_state: Vec<f64>,
    pub value_token: TokenId,
    pub coverage: f64,
    pub pair_index: usize,
}

/// Slots of all retrieved pairs, in pair order then time order.
#[derive(Debug, Clone, Default)]
pub struct KeyValueMemory {
    /// `([S × 2H] keys, [S × H] values)`, absent when empty.
    tensors: Option<(Var, Var)>,
    tokens: Vec<TokenId>,
    pair_index: Vec<usize>,
}

impl KeyValueMemory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn pair_index(&self) -> &[usize] {
        &self.pair_index
    }

    pub fn keys(&self) -> Option<Var> {
        self.tensors.map(|(k, _)| k)
    }

    pub fn values(&self) -> Option<Var> {
        self.tensors.map(|(_, v)| v)
    }

    pub fn slots(&self, t: &Tape, coverage: Option<Var>) -> Vec<MemorySlot> {
        let Some((keys, values)) = self.tensors else {
            return Vec::new();
        };
        let (k, v) = (t.value(keys), t.value(values));
        (0..self.len())
            .map(|i| MemorySlot {
                key: k.row(i).expect("slot row").to_vec(),
                value_state: v.row(i).expect("slot row").to_vec(),
                value_token: self.tokens[i],
                coverage: coverage.map_or(0.0, |c| t.data(c)[i]),
                pair_index: self.pair_index[i],
            })
            .collect()
    }

    /// Zero coverage for a fresh trajectory; `None` for an empty memory.
    pub fn initial_coverage(&self, t: &mut Tape) -> Option<Var> {
        (!self.is_empty()).then(|| t.constant(Tensor::zeros(&[self.len()])))
    }
}

/// Teacher-forces each retrieved `(source, target)` pair through the model
/// and stores one slot per target token. Pairs with an empty side are
/// skipped; no pairs gives an empty memory.
pub fn build_memory(t: &mut Tape, model: &Model, pairs: &[(&[TokenId], &[TokenId])]) -> Result<KeyValueMemory> {
    let mut keys = Vec::new();
    let mut values = Vec::new();
    let mut tokens = Vec::new();
    let mut pair_index = Vec::new();
    for (k, (src, tgt)) in pairs.iter().enumerate() {
        if src.is_empty() || tgt.is_empty() {
            continue;
        }
        let fd = nmt::teacher_force(t, model, src, tgt, false)?;
        keys.extend(fd.contexts);
        values.extend(fd.states);
        tokens.extend_from_slice(tgt);
        pair_index.extend(core::iter::repeat_n(k, tgt.len()));
    }
    let tensors = if tokens.is_empty() {
        None
    } else {
        Some((t.stack_rows(&keys)?, t.stack_rows(&values)?))
    };
    Ok(KeyValueMemory {
        tensors,
        tokens,
        pair_index,
    })
}

fn bilinear_energies(t: &mut Tape, seg: &SegParams, memory: &KeyValueMemory, context: Var) -> Result<Var> {
    let keys = memory
        .keys()
        .ok_or_else(|| Error::contract("matching against an empty memory"))?;
    let m = t.param(seg.metric_diag);
    let cm = t.mul(context, m)?;
    t.matvec(keys, cm)
}

/// `q = softmax_τ(cᵀ M c'_τ − λ β_τ)`.
pub fn match_memory(t: &mut Tape, seg: &SegParams, memory: &KeyValueMemory, context: Var, coverage: Var) -> Result<Var> {
    let e = bilinear_energies(t, seg, memory, context)?;
    let lambda = t.param(seg.lambda);
    let penalty = t.scale(coverage, lambda)?;
    let e = t.sub(e, penalty)?;
    t.softmax(e)
}

/// Matching without the coverage term.
pub fn match_memory_plain(t: &mut Tape, seg: &SegParams, memory: &KeyValueMemory, context: Var) -> Result<Var> {
    let e = bilinear_energies(t, seg, memory, context)?;
    t.softmax(e)
}

/// `z̃ = Σ_τ q_τ z'_τ`.
pub fn retrieve_hidden(t: &mut Tape, memory: &KeyValueMemory, q: Var) -> Result<Var> {
    let values = memory
        .values()
        .ok_or_else(|| Error::contract("reading an empty memory"))?;
    t.vecmat(q, values)
}

/// Aggregates slot weights onto their tokens: `p_copy[v] = Σ_{y'_τ = v} q_τ`.
pub fn copy_distribution(t: &mut Tape, memory: &KeyValueMemory, q: Var, tgt_vocab: usize) -> Result<Var> {
    let idx: Vec<usize> = memory.tokens.iter().map(|&y| y as usize).collect();
    t.scatter_add(q, &idx, tgt_vocab)
}

/// `ζ = σ(w₂ · tanh([c ‖ z ‖ z̃] W₁ + b₁) + b₂)`, a one-element node.
pub fn gate(t: &mut Tape, seg: &SegParams, context: Var, z: Var, z_tilde: Var) -> Result<Var> {
    let x = t.concat(&[context, z, z_tilde])?;
    let w1 = t.param(seg.gate_w1);
    let b1 = t.param(seg.gate_b1);
    let w2 = t.param(seg.gate_w2);
    let b2 = t.param(seg.gate_b2);
    let h = t.vecmat(x, w1)?;
    let h = t.add(h, b1)?;
    let h = t.tanh(h);
    let o = t.vecmat(h, w2)?;
    let o = t.add(o, b2)?;
    Ok(t.sigmoid(o))
}

/// `ζ z̃ + (1 − ζ) z`
pub fn deep_fusion(t: &mut Tape, zeta: Var, z_tilde: Var, z: Var) -> Result<Var> {
    let a = t.scale(z_tilde, zeta)?;
    let keep = t.one_minus(zeta);
    let b = t.scale(z, keep)?;
    t.add(a, b)
}

/// `ζ p_copy + (1 − ζ) p_model`
pub fn shallow_fusion(t: &mut Tape, zeta: Var, p_copy: Var, p_model: Var) -> Result<Var> {
    let a = t.scale(p_copy, zeta)?;
    let keep = t.one_minus(zeta);
    let b = t.scale(p_model, keep)?;
    t.add(a, b)
}

/// `β + ζ q`
pub fn update_coverage(t: &mut Tape, coverage: Var, q: Var, zeta: Var) -> Result<Var> {
    let add = t.scale(q, zeta)?;
    t.add(coverage, add)
}

/// Decoder state of one trajectory.
#[derive(Debug, Clone, Copy)]
pub struct DecodeState {
    pub z: Var,
    pub prev: TokenId,
    pub coverage: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// Log-distribution over the next target token.
    pub logp: Var,
    pub z: Var,
    pub coverage: Option<Var>,
    pub alpha: Var,
    pub q: Option<Var>,
    pub zeta: Option<Var>,
}

impl StepOutput {
    pub fn next_state(&self, token: TokenId) -> DecodeState {
        DecodeState {
            z: self.z,
            prev: token,
            coverage: self.coverage,
        }
    }
}

/// Starting state for decoding `enc` against `memory`.
pub fn start(t: &mut Tape, model: &Model, enc: &EncoderOutput, memory: &KeyValueMemory) -> Result<DecodeState> {
    Ok(DecodeState {
        z: nmt::initial_state(t, model, enc)?,
        prev: crate::corpus::BOS,
        coverage: memory.initial_coverage(t),
    })
}

/// One decoding step. With an empty memory this is exactly the baseline
/// model's step.
pub fn step(
    t: &mut Tape,
    model: &Model,
    fusion: FusionMode,
    enc: &EncoderOutput,
    memory: &KeyValueMemory,
    state: &DecodeState,
) -> Result<StepOutput> {
    let y_emb = nmt::embed_target(t, model, state.prev)?;
    let att = nmt::attention(t, model, enc, state.z, y_emb)?;
    let z = nmt::decoder_step(t, model, state.z, y_emb, att.context)?;

    let coverage = match (memory.is_empty(), state.coverage) {
        (true, _) => None,
        (false, Some(c)) => Some(c),
        (false, None) => return Err(Error::contract("non-empty memory needs a coverage vector")),
    };
    let Some(coverage) = coverage else {
        let logp = nmt::readout(t, model, z, att.context, y_emb)?;
        return Ok(StepOutput {
            logp,
            z,
            coverage: None,
            alpha: att.alpha,
            q: None,
            zeta: None,
        });
    };

    let seg = &model.seg;
    let q = match_memory(t, seg, memory, att.context, coverage)?;
    let z_tilde = retrieve_hidden(t, memory, q)?;
    let zeta = gate(t, seg, att.context, z, z_tilde)?;
    let logp = match fusion {
        FusionMode::Deep => {
            let fused = deep_fusion(t, zeta, z_tilde, z)?;
            nmt::readout(t, model, fused, att.context, y_emb)?
        }
        FusionMode::Shallow => {
            let logits = nmt::readout_logits(t, model, z, att.context, y_emb)?;
            let p_model = t.softmax(logits)?;
            let p_copy = copy_distribution(t, memory, q, model.config.tgt_vocab)?;
            let mix = shallow_fusion(t, zeta, p_copy, p_model)?;
            t.log(mix)
        }
    };
    let coverage = update_coverage(t, coverage, q, zeta)?;
    Ok(StepOutput {
        logp,
        z,
        coverage: Some(coverage),
        alpha: att.alpha,
        q: Some(q),
        zeta: Some(zeta),
    })
}
