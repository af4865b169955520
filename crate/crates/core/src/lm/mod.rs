//! Small pre-layer-norm encoder-decoder transformer over
//! `[visual tokens, instruction tokens]`, with teacher-forced loss and
//! greedy decoding.

pub mod vocab;

use serde::{Deserialize, Serialize};

use crate::nn::{self, AttnWeights, Builder};
use crate::params::ParamStore;
use crate::tensor::{Mask, Result, Scalar, Tape, Tensor, TensorError, Var};
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LMConfig {
    pub dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_text_len: usize,
    /// Longest decoder sequence, counting `bos` (and `eos` in targets).
    pub max_answer_len: usize,
    /// 0 means "derive from the training corpus".
    pub vocab_size: usize,
}

impl Default for LMConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ffn_dim: 256,
            max_text_len: 32,
            max_answer_len: 24,
            vocab_size: 0,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(format!("lm heads {} must divide dim {}", self.heads, self.dim));
        }
        if self.max_text_len == 0 || self.max_answer_len < 2 || self.ffn_dim == 0 {
            return Err("lm lengths and ffn_dim must be positive (max_answer_len >= 2)".into());
        }
        Ok(())
    }
}

pub fn init_params(b: &mut Builder<'_>, cfg: &LMConfig, vocab: usize) {
    let d = cfg.dim;
    let emb_bound = (3.0 / d as f64).sqrt();
    let t = b.init.uniform(&[vocab, d], emb_bound);
    b.put("lm.embed", t);
    let t = b.init.uniform(&[cfg.max_text_len, d], emb_bound);
    b.put("lm.enc_pos", t);
    let t = b.init.uniform(&[cfg.max_answer_len, d], emb_bound);
    b.put("lm.dec_pos", t);
    for l in 0..cfg.enc_layers {
        let p = format!("lm.enc.{l}");
        b.layer_norm(&format!("{p}.ln1"), d);
        b.attention(&format!("{p}.attn"), d, false);
        b.layer_norm(&format!("{p}.ln2"), d);
        b.linear(&format!("{p}.ffn1"), d, cfg.ffn_dim);
        b.linear(&format!("{p}.ffn2"), cfg.ffn_dim, d);
    }
    b.layer_norm("lm.enc.ln_f", d);
    for l in 0..cfg.dec_layers {
        let p = format!("lm.dec.{l}");
        b.layer_norm(&format!("{p}.ln1"), d);
        b.attention(&format!("{p}.self"), d, false);
        b.layer_norm(&format!("{p}.ln2"), d);
        b.attention(&format!("{p}.cross"), d, false);
        b.layer_norm(&format!("{p}.ln3"), d);
        b.linear(&format!("{p}.ffn1"), d, cfg.ffn_dim);
        b.linear(&format!("{p}.ffn2"), cfg.ffn_dim, d);
    }
    b.layer_norm("lm.dec.ln_f", d);
    // Small head so the initial next-token distribution is near uniform.
    let t = b.init.uniform(&[d, vocab], 0.5 / (d as f64).sqrt());
    b.put("lm.head.w", t);
    b.put("lm.head.b", Tensor::zeros(&[vocab]));
}

fn embed<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, pos: &str, ids: &[usize], max: usize) -> Result<Var> {
    if ids.is_empty() || ids.len() > max {
        return Err(TensorError::Input {
            op: "embed_text",
            detail: format!("sequence length {} outside 1..={max}", ids.len()),
        });
    }
    let table = tape.param(store, "lm.embed")?;
    let e = tape.embedding(table, ids, Some(PAD))?;
    let pos = tape.param(store, pos)?;
    let p = tape.narrow(pos, 0, 0, ids.len())?;
    tape.add(e, p)
}

/// Token embeddings plus learned absolute positions (`l2×dim`).
pub fn embed_text<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, cfg: &LMConfig, ids: &[usize]) -> Result<Var> {
    embed(tape, store, "lm.enc_pos", ids, cfg.max_text_len)
}

/// Attention keep-mask for a text id sequence (`false` at pads).
pub fn text_keep(ids: &[usize]) -> Vec<bool> {
    ids.iter().map(|&i| i != PAD).collect()
}

fn ffn<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, p: &str, x: Var) -> Result<Var> {
    let h = nn::linear(tape, store, &format!("{p}.ffn1"), x)?;
    let h = tape.relu(h)?;
    nn::linear(tape, store, &format!("{p}.ffn2"), h)
}

/// Encoder over `[V_input; T_input]` with full self-attention. Returns the
/// memory and its key mask.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &LMConfig,
    v_input: Var,
    t_input: Var,
    keep_text: &[bool],
) -> Result<(Var, Vec<bool>)> {
    let lv = tape.shape(v_input)[0];
    if keep_text.len() != tape.shape(t_input)[0] {
        return Err(TensorError::Dimension {
            op: "lm_encode",
            detail: format!("{} mask entries for {} text tokens", keep_text.len(), tape.shape(t_input)[0]),
        });
    }
    let mut keep = vec![true; lv];
    keep.extend_from_slice(keep_text);
    let mask = Mask::Keys(keep.clone());
    let mut x = tape.concat(&[v_input, t_input], 0)?;
    for l in 0..cfg.enc_layers {
        let p = format!("lm.enc.{l}");
        let h = nn::layer_norm(tape, store, &format!("{p}.ln1"), x)?;
        let a = nn::attention(tape, store, &AttnWeights::under(&format!("{p}.attn")), h, h, cfg.heads, Some(&mask))?;
        x = tape.add(x, a)?;
        let h = nn::layer_norm(tape, store, &format!("{p}.ln2"), x)?;
        let f = ffn(tape, store, &p, h)?;
        x = tape.add(x, f)?;
    }
    let memory = nn::layer_norm(tape, store, "lm.enc.ln_f", x)?;
    Ok((memory, keep))
}

/// Causal decoder over `dec_ids` (starting with `bos`); returns logits
/// `len×vocab`.
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &LMConfig,
    memory: Var,
    memory_keep: &[bool],
    dec_ids: &[usize],
) -> Result<Var> {
    let mut y = embed(tape, store, "lm.dec_pos", dec_ids, cfg.max_answer_len)?;
    let cross_mask = Mask::Keys(memory_keep.to_vec());
    for l in 0..cfg.dec_layers {
        let p = format!("lm.dec.{l}");
        let h = nn::layer_norm(tape, store, &format!("{p}.ln1"), y)?;
        let a = nn::attention(tape, store, &AttnWeights::under(&format!("{p}.self")), h, h, cfg.heads, Some(&Mask::Causal))?;
        y = tape.add(y, a)?;
        let h = nn::layer_norm(tape, store, &format!("{p}.ln2"), y)?;
        let c = nn::attention(
            tape,
            store,
            &AttnWeights::under(&format!("{p}.cross")),
            h,
            memory,
            cfg.heads,
            Some(&cross_mask),
        )?;
        y = tape.add(y, c)?;
        let h = nn::layer_norm(tape, store, &format!("{p}.ln3"), y)?;
        let f = ffn(tape, store, &p, h)?;
        y = tape.add(y, f)?;
    }
    let y = nn::layer_norm(tape, store, "lm.dec.ln_f", y)?;
    nn::linear(tape, store, "lm.head", y)
}

/// Decoder sequence `[bos, answer…, eos]` for an answer's word ids,
/// truncated to fit `max_answer_len`.
pub fn target_sequence(answer_ids: &[usize], cfg: &LMConfig) -> Vec<usize> {
    let keep = answer_ids.len().min(cfg.max_answer_len - 1);
    let mut seq = Vec::with_capacity(keep + 2);
    seq.push(BOS);
    seq.extend_from_slice(&answer_ids[..keep]);
    seq.push(EOS);
    seq
}

/// Teacher-forced forward pass. `target` is `[bos, …, eos]`; the loss is
/// the mean token cross-entropy over non-pad targets.
pub fn lm_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &LMConfig,
    v_input: Var,
    t_input: Var,
    keep_text: &[bool],
    target: &[usize],
) -> Result<(Var, Var)> {
    if target.len() < 2 || target[0] != BOS || target[target.len() - 1] != EOS {
        return Err(TensorError::Input {
            op: "lm_forward",
            detail: "target must be [bos, …, eos] with at least one predicted token".into(),
        });
    }
    let (memory, keep) = encode(tape, store, cfg, v_input, t_input, keep_text)?;
    let n = target.len() - 1;
    let logits = decode(tape, store, cfg, memory, &keep, &target[..n])?;
    let loss = tape.cross_entropy(logits, &target[1..], Some(PAD))?;
    Ok((logits, loss))
}

/// Source of next-token logits given the decoded prefix (starting with `bos`).
pub trait NextLogits {
    fn next_logits(&mut self, prefix: &[usize]) -> Result<Vec<f32>>;
}

/// Lowest index among the maxima.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from `bos` until `eos` or `max_len` emitted tokens.
/// The returned ids exclude `bos` and `eos`.
pub fn greedy_decode(src: &mut impl NextLogits, max_len: usize) -> Result<Vec<usize>> {
    let mut prefix = vec![BOS];
    while prefix.len() <= max_len {
        let next = argmax(&src.next_logits(&prefix)?);
        if next == EOS {
            break;
        }
        prefix.push(next);
    }
    Ok(prefix.split_off(1))
}

/// Decoder-only stepping over a fixed encoder memory.
pub struct MemoryDecoder<'a> {
    pub store: &'a ParamStore<f32>,
    pub cfg: &'a LMConfig,
    pub memory: Tensor<f32>,
    pub keep: Vec<bool>,
}

impl NextLogits for MemoryDecoder<'_> {
    fn next_logits(&mut self, prefix: &[usize]) -> Result<Vec<f32>> {
        let mut tape = Tape::without_param_grads();
        let m = tape.constant(self.memory.clone());
        let logits = decode(&mut tape, self.store, self.cfg, m, &self.keep, prefix)?;
        let v = tape.shape(logits)[1];
        let data = tape.value(logits).data();
        Ok(data[data.len() - v..].to_vec())
    }
}
