//! Instruction adapter: visual tokens attend to the instruction embeddings
//! and the result is added back onto the visual tokens.

use serde::{Deserialize, Serialize};

use crate::nn::{self, AttnWeights, Builder};
use crate::params::ParamStore;
use crate::tensor::{Mask, Result, Scalar, Tape, TensorError, Var};

pub const PREFIX: &str = "adapter";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub heads: usize,
    /// Zero-initialise `W_o` so the adapter starts as the identity.
    pub zero_init_out: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            heads: 1,
            zero_init_out: true,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self, dim: usize) -> std::result::Result<(), String> {
        if self.heads == 0 || dim % self.heads != 0 {
            return Err(format!("adapter heads {} must divide dim {dim}", self.heads));
        }
        Ok(())
    }
}

pub fn weights() -> AttnWeights {
    AttnWeights::under(PREFIX)
}

pub fn init_params(b: &mut Builder<'_>, cfg: &AdapterConfig, dim: usize) {
    b.attention(PREFIX, dim, cfg.zero_init_out);
}

fn check_inputs<T: Scalar>(tape: &Tape<T>, v: Var, t: Var) -> Result<()> {
    let (vs, ts) = (tape.shape(v), tape.shape(t));
    if vs.len() != 2 || ts.len() != 2 || vs[1] != ts[1] {
        return Err(TensorError::Dimension {
            op: "cross_attention",
            detail: format!("visual {vs:?} vs text {ts:?}"),
        });
    }
    Ok(())
}

/// `V' = softmax((V·Wq)(T·Wk)ᵀ/√d_h)(T·Wv)·Wo`. `text_keep` masks padded
/// text positions out of the keys.
pub fn cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &AdapterConfig,
    v: Var,
    t: Var,
    text_keep: Option<&[bool]>,
) -> Result<Var> {
    check_inputs(tape, v, t)?;
    let mask = text_keep.map(|k| Mask::Keys(k.to_vec()));
    nn::attention(tape, store, &weights(), v, t, cfg.heads, mask.as_ref())
}

/// Cross-attention output before `W_o`; each row is a convex combination
/// of the rows of `T·Wv`.
pub fn cross_attention_mix<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &AdapterConfig,
    v: Var,
    t: Var,
) -> Result<Var> {
    check_inputs(tape, v, t)?;
    nn::attention_mix(tape, store, &weights(), v, t, cfg.heads, None)
}

/// `V_input = V + V'`.
pub fn residual_fuse<T: Scalar>(tape: &mut Tape<T>, v: Var, v_prime: Var) -> Result<Var> {
    tape.add(v, v_prime)
}

/// Cross-attention followed by the residual fusion.
pub fn adapt<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &AdapterConfig,
    v: Var,
    t: Var,
    text_keep: Option<&[bool]>,
) -> Result<Var> {
    let vp = cross_attention(tape, store, cfg, v, t, text_keep)?;
    residual_fuse(tape, v, vp)
}
