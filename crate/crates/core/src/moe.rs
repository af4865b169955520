//! Mixture of experts turning encoder feature maps into visual tokens.
//!
//! A gate network maps each view's feature map to softmax weights over
//! `N` experts. Every expert (`conv(relu(deconv(F)))`) doubles the spatial
//! extent while reducing the channel count to `c'`. The dense
//! weighted sum is flattened to `c'` tokens of length `h'·w'` and linearly
//! projected to the model dimension.

use serde::{Deserialize, Serialize};

use crate::nn::{self, Builder};
use crate::params::ParamStore;
use crate::tensor::{Result, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoEConfig {
    pub num_experts: usize,
    /// Output channels per expert, which is also the token count per view.
    pub expert_out_channels: usize,
    pub expert_kernel: usize,
    pub expert_stride: usize,
    /// Gate conv channels; 0 means `c/4`.
    pub gate_hidden: usize,
    pub proj_dim: usize,
}

impl Default for MoEConfig {
    fn default() -> Self {
        Self {
            num_experts: 4,
            expert_out_channels: 16,
            expert_kernel: 2,
            expert_stride: 2,
            gate_hidden: 0,
            proj_dim: 128,
        }
    }
}

/// Shapes derived from a feature map `c×h×w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MoEShapes {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub gate_hidden: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl MoEShapes {
    pub fn token_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

impl MoEConfig {
    pub fn shapes(&self, feature: (usize, usize, usize)) -> MoEShapes {
        let (c, h, w) = feature;
        let gate_hidden = if self.gate_hidden == 0 { (c / 4).max(1) } else { self.gate_hidden };
        MoEShapes {
            c,
            h,
            w,
            gate_hidden,
            out_c: self.expert_out_channels,
            out_h: (h - 1) * self.expert_stride + self.expert_kernel,
            out_w: (w - 1) * self.expert_stride + self.expert_kernel,
        }
    }

    pub fn validate(&self, feature: (usize, usize, usize)) -> std::result::Result<(), String> {
        let (c, h, w) = feature;
        if self.num_experts == 0 {
            return Err("num_experts must be at least 1".into());
        }
        if self.expert_out_channels == 0 || self.expert_out_channels >= c {
            return Err(format!(
                "expert_out_channels {} must lie in 1..{c} (fewer channels than the feature map)",
                self.expert_out_channels
            ));
        }
        if self.proj_dim == 0 {
            return Err("proj_dim must be positive".into());
        }
        if self.expert_kernel == 0 || self.expert_stride == 0 {
            return Err("expert kernel and stride must be positive".into());
        }
        if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return Err(format!("feature map {h}×{w} must have even extents for the gate pool"));
        }
        Ok(())
    }
}

pub fn init_params(b: &mut Builder<'_>, cfg: &MoEConfig, s: &MoEShapes) {
    let w = b.init.kaiming(&[s.gate_hidden, s.c, 3, 3], s.c * 9);
    b.put("gate.conv.w", w);
    b.put("gate.conv.b", Tensor::zeros(&[s.gate_hidden]));
    let gate_in = s.gate_hidden * (s.h / 2) * (s.w / 2);
    // Zero logits: uniform routing at initialisation.
    b.put("gate.linear.w", Tensor::zeros(&[gate_in, cfg.num_experts]));
    b.put("gate.linear.b", Tensor::zeros(&[cfg.num_experts]));
    let (k, c2) = (cfg.expert_kernel, s.out_c);
    for i in 0..cfg.num_experts {
        let w = b.init.kaiming(&[s.c, c2, k, k], s.c * k * k / (cfg.expert_stride * cfg.expert_stride).max(1));
        b.put(format!("expert.{i}.deconv.w"), w);
        b.put(format!("expert.{i}.deconv.b"), Tensor::zeros(&[c2]));
        let w = b.init.kaiming(&[c2, c2, 3, 3], c2 * 9);
        b.put(format!("expert.{i}.conv.w"), w);
        b.put(format!("expert.{i}.conv.b"), Tensor::zeros(&[c2]));
    }
    b.linear("proj", s.token_len(), cfg.proj_dim);
}

fn check_feature<T: Scalar>(tape: &Tape<T>, store: &ParamStore<T>, f1: Var) -> Result<()> {
    let c = store.get("gate.conv.w").map_or(0, |w| w.shape()[1]);
    let fs = tape.shape(f1);
    if fs.len() != 3 || fs[0] != c {
        return Err(TensorError::Dimension {
            op: "moe",
            detail: format!("feature map {fs:?} does not match {c} gate input channels"),
        });
    }
    Ok(())
}

/// Gate logits: conv3×3 → relu → maxpool2 → flatten → linear.
pub fn gate_logits<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, f1: Var) -> Result<Var> {
    check_feature(tape, store, f1)?;
    let w = tape.param(store, "gate.conv.w")?;
    let b = tape.param(store, "gate.conv.b")?;
    let y = tape.conv2d(f1, w, 1, 1)?;
    let y = tape.channel_bias(y, b)?;
    let y = tape.relu(y)?;
    let y = tape.maxpool2d(y, 2)?;
    let n = tape.value(y).len();
    let y = tape.reshape(y, &[1, n])?;
    let logits = nn::linear(tape, store, "gate.linear", y)?;
    let e = tape.shape(logits)[1];
    tape.reshape(logits, &[e])
}

/// Softmax routing weights for one view.
pub fn gate_weights<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, f1: Var) -> Result<Var> {
    let logits = gate_logits(tape, store, f1)?;
    tape.softmax(logits, None)
}

pub fn expert_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &MoEConfig,
    f1: Var,
    i: usize,
) -> Result<Var> {
    check_feature(tape, store, f1)?;
    let dw = tape.param(store, &format!("expert.{i}.deconv.w"))?;
    let db = tape.param(store, &format!("expert.{i}.deconv.b"))?;
    let cw = tape.param(store, &format!("expert.{i}.conv.w"))?;
    let cb = tape.param(store, &format!("expert.{i}.conv.b"))?;
    let y = tape.conv_transpose2d(f1, dw, cfg.expert_stride)?;
    let y = tape.channel_bias(y, db)?;
    let y = tape.relu(y)?;
    let y = tape.conv2d(y, cw, 1, 1)?;
    tape.channel_bias(y, cb)
}

/// `Σ_i weights[i] · experts[i]`.
pub fn combine<T: Scalar>(tape: &mut Tape<T>, weights: Var, experts: &[Var]) -> Result<Var> {
    if experts.is_empty() || tape.value(weights).len() != experts.len() {
        return Err(TensorError::Dimension {
            op: "moe_combine",
            detail: format!("{} weights for {} experts", tape.value(weights).len(), experts.len()),
        });
    }
    let mut acc = tape.scale_by(experts[0], weights, 0)?;
    for (i, &e) in experts.iter().enumerate().skip(1) {
        let term = tape.scale_by(e, weights, i)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// Gate-weighted dense mixture of all experts for one view.
pub fn moe_combine<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, cfg: &MoEConfig, f1: Var) -> Result<Var> {
    let w = gate_weights(tape, store, f1)?;
    let experts = (0..cfg.num_experts)
        .map(|i| expert_forward(tape, store, cfg, f1, i))
        .collect::<Result<Vec<_>>>()?;
    combine(tape, w, &experts)
}

/// Flattens `c'×h'×w'` into `c'` rows and projects each to `proj_dim`.
pub fn flatten_project<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, v_moe: Var) -> Result<Var> {
    let s = tape.shape(v_moe).to_vec();
    if s.len() != 3 {
        return Err(TensorError::Dimension {
            op: "flatten_project",
            detail: format!("expected c×h×w, got {s:?}"),
        });
    }
    let flat = tape.reshape(v_moe, &[s[0], s[1] * s[2]])?;
    nn::linear(tape, store, "proj", flat)
}

/// Tokens of all views, concatenated in the given (canonical) order.
pub fn moe_pipeline<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &MoEConfig,
    views: &[Var],
) -> Result<Var> {
    if views.is_empty() {
        return Err(TensorError::Input {
            op: "moe_pipeline",
            detail: "no views".into(),
        });
    }
    let mut blocks = Vec::with_capacity(views.len());
    for &f in views {
        let v = moe_combine(tape, store, cfg, f)?;
        blocks.push(flatten_project(tape, store, v)?);
    }
    if blocks.len() == 1 {
        return Ok(blocks[0]);
    }
    tape.concat(&blocks, 0)
}
