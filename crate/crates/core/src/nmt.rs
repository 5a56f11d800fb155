//! Attention encoder-decoder: bidirectional GRU encoder, single-hidden-layer
//! attention, GRU decoder and an affine readout.
//!
//! Shapes, with `E` the embedding width and `H` the hidden width:
//! annotations are `[T × 2H]`, the decoder state is `[H]`, contexts are `[2H]`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::BOS;
use crate::param::{ParamId, ParamStore};
use crate::seg::SegParams;
use crate::tape::{Tape, Var};
use crate::{Error, Result, Tensor, TokenId};

const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl ModelConfig {
    pub fn context_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn attention_dim(&self) -> usize {
        self.hidden
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Uniform,
    Zeros,
    Ones,
}

/// Registers fresh parameters, or looks up and shape-checks existing ones.
pub(crate) struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: Option<ChaCha8Rng>,
}

impl ParamBuilder<'_> {
    pub(crate) fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        match &mut self.rng {
            Some(rng) => {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Uniform => (0..n).map(|_| rng.gen_range(-INIT_SCALE..INIT_SCALE)).collect(),
                    Init::Zeros => alloc::vec![0.0; n],
                    Init::Ones => alloc::vec![1.0; n],
                };
                self.store.register(name, Tensor::new(shape.to_vec(), data)?)
            }
            None => {
                let id = self
                    .store
                    .find(name)
                    .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))?;
                if self.store.value(id).shape() != shape {
                    return Err(Error::shape("load parameter", self.store.value(id).shape(), shape));
                }
                Ok(id)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Gru {
    w_x: ParamId,
    u_gates: ParamId,
    u_cand: ParamId,
    bias: ParamId,
    hidden: usize,
}

impl Gru {
    fn declare(b: &mut ParamBuilder, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Gru {
            w_x: b.param(&format!("{prefix}.w_x"), &[input, 3 * hidden], Init::Uniform)?,
            u_gates: b.param(&format!("{prefix}.u_gates"), &[hidden, 2 * hidden], Init::Uniform)?,
            u_cand: b.param(&format!("{prefix}.u_cand"), &[hidden, hidden], Init::Uniform)?,
            bias: b.param(&format!("{prefix}.bias"), &[3 * hidden], Init::Zeros)?,
            hidden,
        })
    }

    /// Input projections for a whole `[T × in]` sequence: `[T × 3H]`.
    fn project_seq(&self, t: &mut Tape, xs: Var) -> Result<Var> {
        let w = t.param(self.w_x);
        let b = t.param(self.bias);
        let p = t.matmul(xs, w)?;
        t.add_row_broadcast(p, b)
    }

    fn project(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let w = t.param(self.w_x);
        let b = t.param(self.bias);
        let p = t.vecmat(x, w)?;
        t.add(p, b)
    }

    /// One GRU update from a projected input `[3H]` (reset, update,
    /// candidate blocks) and the previous state `[H]`.
    pub fn step(&self, t: &mut Tape, x_proj: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let u_gates = t.param(self.u_gates);
        let u_cand = t.param(self.u_cand);
        let gh = t.vecmat(h, u_gates)?;
        let gx = t.slice(x_proj, 0, 2 * hd)?;
        let pre = t.add(gx, gh)?;
        let gates = t.sigmoid(pre);
        let reset = t.slice(gates, 0, hd)?;
        let update = t.slice(gates, hd, hd)?;
        let rh = t.mul(reset, h)?;
        let cand_h = t.vecmat(rh, u_cand)?;
        let cand_x = t.slice(x_proj, 2 * hd, hd)?;
        let cand_pre = t.add(cand_x, cand_h)?;
        let cand = t.tanh(cand_pre);
        // h' = u ⊙ h + (1 - u) ⊙ n
        let keep = t.mul(update, h)?;
        let inv = t.one_minus(update);
        let fresh = t.mul(inv, cand)?;
        t.add(keep, fresh)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NmtParams {
    pub src_emb: ParamId,
    pub tgt_emb: ParamId,
    pub enc_fwd: Gru,
    pub enc_bwd: Gru,
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub att_w_annot: ParamId,
    pub att_w_state: ParamId,
    pub att_w_prev: ParamId,
    pub att_b: ParamId,
    pub att_v: ParamId,
    pub dec: Gru,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl NmtParams {
    fn declare(b: &mut ParamBuilder, c: &ModelConfig) -> Result<Self> {
        let (e, h, ctx, a) = (c.embed_dim, c.hidden, c.context_dim(), c.attention_dim());
        Ok(NmtParams {
            src_emb: b.param("src_emb", &[c.src_vocab, e], Init::Uniform)?,
            tgt_emb: b.param("tgt_emb", &[c.tgt_vocab, e], Init::Uniform)?,
            enc_fwd: Gru::declare(b, "enc_fwd", e, h)?,
            enc_bwd: Gru::declare(b, "enc_bwd", e, h)?,
            init_w: b.param("init.w", &[ctx, h], Init::Uniform)?,
            init_b: b.param("init.b", &[h], Init::Zeros)?,
            att_w_annot: b.param("att.w_annot", &[ctx, a], Init::Uniform)?,
            att_w_state: b.param("att.w_state", &[h, a], Init::Uniform)?,
            att_w_prev: b.param("att.w_prev", &[e, a], Init::Uniform)?,
            att_b: b.param("att.b", &[a], Init::Zeros)?,
            att_v: b.param("att.v", &[a], Init::Uniform)?,
            dec: Gru::declare(b, "dec", e + ctx, h)?,
            out_w: b.param("out.w", &[h + ctx + e, c.tgt_vocab], Init::Uniform)?,
            out_b: b.param("out.b", &[c.tgt_vocab], Init::Zeros)?,
        })
    }
}

/// All trainable state: the translation model and the retrieval extension.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub nmt: NmtParams,
    pub seg: SegParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder {
            store: &mut store,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        let nmt = NmtParams::declare(&mut b, &config)?;
        let seg = SegParams::declare(&mut b, &config)?;
        Ok(Model { config, store, nmt, seg })
    }

    /// Rebinds a model onto loaded parameters, checking names and shapes.
    pub fn from_store(config: ModelConfig, mut store: ParamStore) -> Result<Self> {
        let mut b = ParamBuilder {
            store: &mut store,
            rng: None,
        };
        let nmt = NmtParams::declare(&mut b, &config)?;
        let seg = SegParams::declare(&mut b, &config)?;
        if store.len() != Model::new(config, 0)?.store.len() {
            return Err(Error::contract("checkpoint carries unexpected parameters"));
        }
        Ok(Model { config, store, nmt, seg })
    }

    pub fn param_names(&self) -> Vec<String> {
        self.store.iter().map(|(_, p)| p.name.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// `[T × 2H]`, row τ is `[forward_τ ‖ backward_τ]`.
    pub annotations: Var,
    /// Attention pre-projection of the annotations, `[T × A]`.
    pub annot_proj: Var,
    pub len: usize,
}

fn check_tokens(ids: &[TokenId], vocab: usize, what: &str) -> Result<()> {
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
        return Err(Error::contract(format!("{what} token {bad} outside vocabulary of {vocab}")));
    }
    Ok(())
}

pub fn encode(t: &mut Tape, model: &Model, source: &[TokenId]) -> Result<EncoderOutput> {
    if source.is_empty() {
        return Err(Error::contract("cannot encode an empty source sentence"));
    }
    check_tokens(source, model.config.src_vocab, "source")?;
    let p = &model.nmt;
    let ids: Vec<usize> = source.iter().map(|&i| i as usize).collect();
    let table = t.param(p.src_emb);
    let emb = t.gather(table, &ids)?;
    let zero = t.constant(Tensor::zeros(&[model.config.hidden]));

    let proj_f = p.enc_fwd.project_seq(t, emb)?;
    let mut fwd = Vec::with_capacity(ids.len());
    let mut h = zero;
    for i in 0..ids.len() {
        let x = t.row(proj_f, i)?;
        h = p.enc_fwd.step(t, x, h)?;
        fwd.push(h);
    }

    let proj_b = p.enc_bwd.project_seq(t, emb)?;
    let mut bwd = alloc::vec![zero; ids.len()];
    let mut h = zero;
    for i in (0..ids.len()).rev() {
        let x = t.row(proj_b, i)?;
        h = p.enc_bwd.step(t, x, h)?;
        bwd[i] = h;
    }

    let rows = fwd
        .into_iter()
        .zip(bwd)
        .map(|(f, b)| t.concat(&[f, b]))
        .collect::<Result<Vec<_>>>()?;
    let annotations = t.stack_rows(&rows)?;
    let w = t.param(p.att_w_annot);
    let annot_proj = t.matmul(annotations, w)?;
    Ok(EncoderOutput {
        annotations,
        annot_proj,
        len: ids.len(),
    })
}

/// `tanh(mean_τ h_τ · W + b)`
pub fn initial_state(t: &mut Tape, model: &Model, enc: &EncoderOutput) -> Result<Var> {
    let p = &model.nmt;
    let mean = t.mean_rows(enc.annotations)?;
    let w = t.param(p.init_w);
    let b = t.param(p.init_b);
    let x = t.vecmat(mean, w)?;
    let x = t.add(x, b)?;
    Ok(t.tanh(x))
}

pub fn embed_target(t: &mut Tape, model: &Model, token: TokenId) -> Result<Var> {
    check_tokens(&[token], model.config.tgt_vocab, "target")?;
    let table = t.param(model.nmt.tgt_emb);
    t.row(table, token as usize)
}

#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub alpha: Var,
    pub context: Var,
}

/// `α = softmax_τ(v · tanh(W_h h_τ + W_z z + W_y y + b))`, `c = Σ α_τ h_τ`.
pub fn attention(t: &mut Tape, model: &Model, enc: &EncoderOutput, z_prev: Var, y_prev_emb: Var) -> Result<Attention> {
    let p = &model.nmt;
    let ws = t.param(p.att_w_state);
    let wy = t.param(p.att_w_prev);
    let b = t.param(p.att_b);
    let v = t.param(p.att_v);
    let qs = t.vecmat(z_prev, ws)?;
    let qy = t.vecmat(y_prev_emb, wy)?;
    let q = t.add(qs, qy)?;
    let q = t.add(q, b)?;
    let pre = t.add_row_broadcast(enc.annot_proj, q)?;
    let hidden = t.tanh(pre);
    let energies = t.matvec(hidden, v)?;
    let alpha = t.softmax(energies)?;
    let context = t.vecmat(alpha, enc.annotations)?;
    Ok(Attention { alpha, context })
}

/// GRU update on `[embed(y_prev) ‖ c_t]`.
pub fn decoder_step(t: &mut Tape, model: &Model, z_prev: Var, y_prev_emb: Var, context: Var) -> Result<Var> {
    let dec = &model.nmt.dec;
    let x = t.concat(&[y_prev_emb, context])?;
    let xp = dec.project(t, x)?;
    dec.step(t, xp, z_prev)
}

/// Unnormalized scores `[z ‖ c ‖ embed(y_prev)] · W + b`.
pub fn readout_logits(t: &mut Tape, model: &Model, z: Var, context: Var, y_prev_emb: Var) -> Result<Var> {
    let p = &model.nmt;
    let x = t.concat(&[z, context, y_prev_emb])?;
    let w = t.param(p.out_w);
    let b = t.param(p.out_b);
    let l = t.vecmat(x, w)?;
    t.add(l, b)
}

/// Log-probabilities over the target vocabulary.
pub fn readout(t: &mut Tape, model: &Model, z: Var, context: Var, y_prev_emb: Var) -> Result<Var> {
    let logits = readout_logits(t, model, z, context, y_prev_emb)?;
    t.log_softmax(logits)
}

#[derive(Debug, Clone, Default)]
pub struct ForcedDecode {
    pub contexts: Vec<Var>,
    pub states: Vec<Var>,
    /// Full log-distributions, empty when run without readout.
    pub logps: Vec<Var>,
}

/// Teacher-forced pass over `target` with BOS prepended: one context, state
/// and log-distribution per target position.
pub fn forced_decode(t: &mut Tape, model: &Model, source: &[TokenId], target: &[TokenId]) -> Result<ForcedDecode> {
    teacher_force(t, model, source, target, true)
}

pub(crate) fn teacher_force(
    t: &mut Tape,
    model: &Model,
    source: &[TokenId],
    target: &[TokenId],
    with_readout: bool,
) -> Result<ForcedDecode> {
    if target.is_empty() {
        return Err(Error::contract("cannot force-decode an empty target"));
    }
    let enc = encode(t, model, source)?;
    let mut z = initial_state(t, model, &enc)?;
    let mut prev = BOS;
    let mut out = ForcedDecode::default();
    for &y in target {
        let y_emb = embed_target(t, model, prev)?;
        let att = attention(t, model, &enc, z, y_emb)?;
        z = decoder_step(t, model, z, y_emb, att.context)?;
        if with_readout {
            out.logps.push(readout(t, model, z, att.context, y_emb)?);
        }
        out.contexts.push(att.context);
        out.states.push(z);
        prev = y;
    }
    Ok(out)
}

/// `log p(target | source)` summed over the positions of `target`.
pub fn sequence_log_likelihood(t: &mut Tape, model: &Model, source: &[TokenId], target: &[TokenId]) -> Result<Var> {
    let fd = forced_decode(t, model, source, target)?;
    let picks = fd
        .logps
        .iter()
        .zip(target)
        .map(|(&lp, &y)| t.pick(lp, y as usize))
        .collect::<Result<Vec<_>>>()?;
    let all = t.concat(&picks)?;
    Ok(t.sum(all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EOS;
    use crate::tensor::{log_softmax, sigmoid};
    use alloc::vec;

    fn tiny() -> Model {
        Model::new(
            ModelConfig {
                src_vocab: 12,
                tgt_vocab: 10,
                embed_dim: 4,
                hidden: 5,
            },
            3,
        )
        .unwrap()
    }

    fn rows(t: &Tape, m: Var) -> Vec<Vec<f64>> {
        let (r, _) = t.value(m).dims2().unwrap();
        (0..r).map(|i| t.value(m).row(i).unwrap().to_vec()).collect()
    }

    #[test]
    fn single_token_source() {
        let model = tiny();
        let mut t = Tape::new(&model.store);
        let enc = encode(&mut t, &model, &[7]).unwrap();
        assert_eq!(t.shape(enc.annotations), &[1, 10]);
        assert!(t.value(enc.annotations).is_finite());
        assert!(encode(&mut t, &model, &[]).is_err());
    }

    #[test]
    fn reversal_swaps_directions_when_weights_are_shared() {
        let mut model = tiny();
        for suffix in ["w_x", "u_gates", "u_cand", "bias"] {
            let f = model.store.find(&format!("enc_fwd.{suffix}")).unwrap();
            let b = model.store.find(&format!("enc_bwd.{suffix}")).unwrap();
            *model.store.value_mut(b) = model.store.value(f).clone();
        }
        let src = [4, 9, 5, 11];
        let rev: Vec<TokenId> = src.iter().rev().copied().collect();
        let mut t = Tape::new(&model.store);
        let a = encode(&mut t, &model, &src).unwrap();
        let b = encode(&mut t, &model, &rev).unwrap();
        let (ra, rb) = (rows(&t, a.annotations), rows(&t, b.annotations));
        let h = model.config.hidden;
        for (i, row) in ra.iter().enumerate() {
            let j = src.len() - 1 - i;
            assert_eq!(&row[..h], &rb[j][h..]);
            assert_eq!(&row[h..], &rb[j][..h]);
        }
    }

    #[test]
    fn attention_weights() {
        let model = tiny();
        let mut t = Tape::new(&model.store);
        let enc = encode(&mut t, &model, &[4]).unwrap();
        let z = initial_state(&mut t, &model, &enc).unwrap();
        let y = embed_target(&mut t, &model, BOS).unwrap();
        let att = attention(&mut t, &model, &enc, z, y).unwrap();
        assert_eq!(t.data(att.alpha), &[1.0]);
        assert_eq!(t.data(att.context), t.value(enc.annotations).row(0).unwrap());

        let enc = encode(&mut t, &model, &[4, 5, 6, 7, 8]).unwrap();
        let att = attention(&mut t, &model, &enc, z, y).unwrap();
        let s: f64 = t.data(att.alpha).iter().sum();
        assert!((s - 1.0).abs() < 1e-9 && t.data(att.alpha).iter().all(|&a| a >= 0.0));

        // indicator weights select one annotation
        let onehot = t.constant(Tensor::vector(vec![0.0, 0.0, 1.0, 0.0, 0.0]));
        let c = t.vecmat(onehot, enc.annotations).unwrap();
        assert_eq!(t.data(c), t.value(enc.annotations).row(2).unwrap());
    }

    #[test]
    fn zero_weight_decoder_halves_state() {
        let mut model = tiny();
        for name in ["dec.w_x", "dec.u_gates", "dec.u_cand", "dec.bias"] {
            let id = model.store.find(name).unwrap();
            model.store.value_mut(id).data_mut().fill(0.0);
        }
        let mut t = Tape::new(&model.store);
        let z = t.constant(Tensor::vector(vec![0.4, -1.0, 0.2, 0.0, 0.9]));
        let y = embed_target(&mut t, &model, 5).unwrap();
        let c = t.constant(Tensor::vector(vec![0.3; 10]));
        let z1 = decoder_step(&mut t, &model, z, y, c).unwrap();
        let z2 = decoder_step(&mut t, &model, z, y, c).unwrap();
        assert_eq!(t.data(z1), t.data(z2));
        // gates = sigmoid(0) = 0.5, candidate = tanh(0) = 0
        let expect: Vec<f64> = t.data(z).iter().map(|v| sigmoid(0.0) * v).collect();
        assert_eq!(t.data(z1), &expect[..]);
    }

    #[test]
    fn readout_is_normalized_and_shift_invariant() {
        let model = tiny();
        let mut t = Tape::new(&model.store);
        let enc = encode(&mut t, &model, &[4, 5]).unwrap();
        let z = initial_state(&mut t, &model, &enc).unwrap();
        let y = embed_target(&mut t, &model, BOS).unwrap();
        let att = attention(&mut t, &model, &enc, z, y).unwrap();
        let lp = readout(&mut t, &model, z, att.context, y).unwrap();
        let s: f64 = t.data(lp).iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-9);
        let logits = readout_logits(&mut t, &model, z, att.context, y).unwrap();
        let shifted: Vec<f64> = t.data(logits).iter().map(|v| v + 3.5).collect();
        for (a, b) in log_softmax(&shifted).iter().zip(t.data(lp)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Chains the per-step quantities by hand for a two-token target.
    #[test]
    fn likelihood_equals_hand_chained_steps() {
        let model = tiny();
        let (src, tgt) = ([4, 6, 8], [5, EOS]);
        let mut t = Tape::new(&model.store);
        let ll = sequence_log_likelihood(&mut t, &model, &src, &tgt).unwrap();
        let total = t.scalar(ll);

        let mut t = Tape::new(&model.store);
        let enc = encode(&mut t, &model, &src).unwrap();
        let z0 = initial_state(&mut t, &model, &enc).unwrap();
        let e0 = embed_target(&mut t, &model, BOS).unwrap();
        let a1 = attention(&mut t, &model, &enc, z0, e0).unwrap();
        let z1 = decoder_step(&mut t, &model, z0, e0, a1.context).unwrap();
        let l1 = readout_logits(&mut t, &model, z1, a1.context, e0).unwrap();
        let p1 = log_softmax(t.data(l1))[5];
        let e1 = embed_target(&mut t, &model, 5).unwrap();
        let a2 = attention(&mut t, &model, &enc, z1, e1).unwrap();
        let z2 = decoder_step(&mut t, &model, z1, e1, a2.context).unwrap();
        let l2 = readout_logits(&mut t, &model, z2, a2.context, e1).unwrap();
        let p2 = log_softmax(t.data(l2))[EOS as usize];
        assert!((total - (p1 + p2)).abs() < 1e-12);
    }

    #[test]
    fn forced_decode_lengths() {
        let model = tiny();
        let mut t = Tape::new(&model.store);
        let fd = forced_decode(&mut t, &model, &[4, 5], &[6, 7, 8]).unwrap();
        assert_eq!((fd.contexts.len(), fd.states.len(), fd.logps.len()), (3, 3, 3));
        let logp_sum: f64 = fd.logps.iter().zip([6, 7, 8]).map(|(&l, y)| t.data(l)[y]).sum();
        let ll = sequence_log_likelihood(&mut t, &model, &[4, 5], &[6, 7, 8]).unwrap();
        assert_eq!(t.scalar(ll), logp_sum);
    }

    #[test]
    fn from_store_round_trip_and_mismatch() {
        let model = tiny();
        let again = Model::from_store(model.config, model.store.clone()).unwrap();
        assert_eq!(again.param_names(), model.param_names());
        let mut wrong = model.config;
        wrong.hidden += 1;
        assert!(Model::from_store(wrong, model.store.clone()).is_err());
    }
}
