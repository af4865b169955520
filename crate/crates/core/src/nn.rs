//! Layer helpers composed from tape primitives. Parameters are looked up
//! by name in a [`ParamStore`]; each helper documents the names it uses.

use crate::params::{Init, ParamStore};
use crate::tensor::{Mask, Result, Scalar, Tape, Tensor, TensorError, Var};

pub const LN_EPS: f64 = 1e-5;

/// `x·W + b` with `{prefix}.w` (`in×out`) and `{prefix}.b` (`out`).
pub fn linear<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Row-wise layer norm with gain `{prefix}.g` and shift `{prefix}.b`.
pub fn layer_norm<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.g"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let y = tape.layer_norm(x, T::lit(LN_EPS))?;
    let y = tape.mul_row(y, g)?;
    tape.add_row(y, b)
}

/// Bias-free projections of a multi-head attention block.
pub struct AttnWeights {
    pub wq: String,
    pub wk: String,
    pub wv: String,
    pub wo: String,
}

impl AttnWeights {
    pub fn under(prefix: &str) -> Self {
        Self {
            wq: format!("{prefix}.wq"),
            wk: format!("{prefix}.wk"),
            wv: format!("{prefix}.wv"),
            wo: format!("{prefix}.wo"),
        }
    }
}

/// Multi-head scaled dot-product attention of `queries` (`lq×d`) over
/// `keys_values` (`lk×d`), followed by the output projection. `mask`
/// applies to the `lq×lk` score matrix of every head.
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    w: &AttnWeights,
    queries: Var,
    keys_values: Var,
    heads: usize,
    mask: Option<&Mask>,
) -> Result<Var> {
    let mixed = attention_mix(tape, store, w, queries, keys_values, heads, mask)?;
    let wo = tape.param(store, &w.wo)?;
    tape.matmul(mixed, wo)
}

/// Attention output before the output projection.
pub fn attention_mix<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    w: &AttnWeights,
    queries: Var,
    keys_values: Var,
    heads: usize,
    mask: Option<&Mask>,
) -> Result<Var> {
    let d = tape.shape(queries)[1];
    if tape.shape(keys_values)[1] != d {
        return Err(TensorError::Dimension {
            op: "attention",
            detail: format!("query dim {d} vs key dim {}", tape.shape(keys_values)[1]),
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Dimension {
            op: "attention",
            detail: format!("{heads} heads do not divide dim {d}"),
        });
    }
    let (wq, wk, wv) = (
        tape.param(store, &w.wq)?,
        tape.param(store, &w.wk)?,
        tape.param(store, &w.wv)?,
    );
    let q = tape.matmul(queries, wq)?;
    let k = tape.matmul(keys_values, wk)?;
    let v = tape.matmul(keys_values, wv)?;
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.narrow(q, 1, h * dh, dh)?,
                tape.narrow(k, 1, h * dh, dh)?,
                tape.narrow(v, 1, h * dh, dh)?,
            )
        };
        let scores = tape.matmul_t(qh, false, kh, true)?;
        let scores = tape.scale(scores, scale)?;
        let p = tape.softmax(scores, mask)?;
        outs.push(tape.matmul(p, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, 1)
    }
}

/// Parameter initialisation helpers writing into a store.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore<f32>,
    pub init: &'a mut Init,
    pub trainable: bool,
}

impl Builder<'_> {
    pub fn put(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.store.insert(name, t, self.trainable);
    }

    /// Linear layer, Glorot-uniform weight and zero bias.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        let w = self.init.xavier(&[fan_in, fan_out], fan_in, fan_out);
        self.put(format!("{prefix}.w"), w);
        self.put(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.put(format!("{prefix}.g"), Tensor::full(&[dim], 1.0));
        self.put(format!("{prefix}.b"), Tensor::zeros(&[dim]));
    }

    /// Attention projections; `zero_out` zero-initialises `wo`.
    pub fn attention(&mut self, prefix: &str, dim: usize, zero_out: bool) {
        let w = AttnWeights::under(prefix);
        for name in [&w.wq, &w.wk, &w.wv] {
            let t = self.init.xavier(&[dim, dim], dim, dim);
            self.put(name.clone(), t);
        }
        let wo = if zero_out {
            Tensor::zeros(&[dim, dim])
        } else {
            self.init.xavier(&[dim, dim], dim, dim)
        };
        self.put(w.wo, wo);
    }
}
