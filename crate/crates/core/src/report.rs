//! Closed-form parameter and multiply-add counts for a model configuration.
//!
//! Multiply-adds cover convolutions, linear maps and attention products;
//! bias adds, normalisation and softmax are not counted.

use serde::Serialize;

use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub encoder: u64,
    pub gate: u64,
    pub experts: u64,
    pub projection: u64,
    pub adapter: u64,
    pub lm: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.encoder + self.gate + self.experts + self.projection + self.adapter + self.lm
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModelReport {
    pub params: Counts,
    pub trainable_params: u64,
    pub frozen_params: u64,
    /// Multiply-adds of one forward pass over a sample.
    pub macs: Counts,
    pub text_len: usize,
    pub answer_len: usize,
    pub visual_tokens: usize,
}

fn u(x: usize) -> u64 {
    x as u64
}

pub fn param_counts(cfg: &ModelConfig, vocab: usize) -> Counts {
    let mut encoder = 0;
    let mut cin = 3;
    let k2 = u(cfg.encoder.large_kernel).pow(2);
    for &(c, blocks) in &cfg.encoder.stages {
        let (c, b) = (u(c), u(blocks));
        encoder += c * u(cin) * 4 + c;
        encoder += b * (c * k2 + c + c * c + c);
        cin = c as usize;
    }
    let s = cfg.moe_shapes();
    let n = u(cfg.moe.num_experts);
    let (c, gh, c2, ke) = (u(s.c), u(s.gate_hidden), u(s.out_c), u(cfg.moe.expert_kernel));
    let gate_in = gh * u(s.h / 2) * u(s.w / 2);
    let gate = gh * c * 9 + gh + gate_in * n + n;
    let experts = n * (c * c2 * ke * ke + c2 + c2 * c2 * 9 + c2);
    let d = u(cfg.lm.dim);
    let projection = u(s.token_len()) * d + d;
    let adapter = 4 * d * d;
    let (f, v) = (u(cfg.lm.ffn_dim), u(vocab));
    let ffn = d * f + f + f * d + d;
    let enc_layer = 4 * d + 4 * d * d + ffn;
    let dec_layer = 6 * d + 8 * d * d + ffn;
    let lm = v * d
        + u(cfg.lm.max_text_len) * d
        + u(cfg.lm.max_answer_len) * d
        + u(cfg.lm.enc_layers) * enc_layer
        + 2 * d
        + u(cfg.lm.dec_layers) * dec_layer
        + 2 * d
        + d * v
        + v;
    Counts {
        encoder,
        gate,
        experts,
        projection,
        adapter,
        lm,
    }
}

/// Multiply-adds for a forward pass with `text_len` instruction tokens and
/// `answer_len` decoder positions.
pub fn mac_counts(cfg: &ModelConfig, vocab: usize, text_len: usize, answer_len: usize) -> Counts {
    let views = u(cfg.encoder.num_views());
    let mut side = u(cfg.encoder.input_size);
    let mut cin = 3;
    let k2 = u(cfg.encoder.large_kernel).pow(2);
    let mut encoder = 0;
    for &(c, blocks) in &cfg.encoder.stages {
        side /= 2;
        let (c, hw) = (u(c), side * side);
        encoder += c * cin * 4 * hw;
        encoder += u(blocks) * (c * k2 * hw + c * c * hw);
        cin = c;
    }
    let s = cfg.moe_shapes();
    let n = u(cfg.moe.num_experts);
    let (c, gh, c2, ke) = (u(s.c), u(s.gate_hidden), u(s.out_c), u(cfg.moe.expert_kernel));
    let (hw, hw2) = (u(s.h * s.w), u(s.token_len()));
    let gate_in = gh * u(s.h / 2) * u(s.w / 2);
    let gate = gh * c * 9 * hw + gate_in * n;
    let experts = n * (c * c2 * ke * ke * hw + c2 * c2 * 9 * hw2) + n * c2 * hw2;
    let d = u(cfg.lm.dim);
    let projection = c2 * hw2 * d;
    let (lv, lt, la) = (views * c2, u(text_len), u(answer_len));
    let adapter = lv * d * d + 2 * lt * d * d + 2 * lv * lt * d + lv * d * d;
    let f = u(cfg.lm.ffn_dim);
    let sl = lv + lt;
    let enc_layer = 4 * sl * d * d + 2 * sl * sl * d + 2 * sl * d * f;
    let dec_layer = 4 * la * d * d + 2 * la * la * d + 2 * la * d * d + 2 * sl * d * d + 2 * la * sl * d + 2 * la * d * f;
    let lm = u(cfg.lm.enc_layers) * enc_layer + u(cfg.lm.dec_layers) * dec_layer + la * d * u(vocab);
    Counts {
        encoder: views * encoder,
        gate: views * gate,
        experts: views * experts,
        projection: views * projection,
        adapter,
        lm,
    }
}

/// Counts at the longest configured sequence lengths.
pub fn model_report(cfg: &ModelConfig, vocab: usize) -> ModelReport {
    let params = param_counts(cfg, vocab);
    let frozen = if cfg.encoder.frozen { params.encoder } else { 0 };
    ModelReport {
        trainable_params: params.total() - frozen,
        frozen_params: frozen,
        macs: mac_counts(cfg, vocab, cfg.lm.max_text_len, cfg.lm.max_answer_len),
        params,
        text_len: cfg.lm.max_text_len,
        answer_len: cfg.lm.max_answer_len,
        visual_tokens: cfg.visual_tokens(),
    }
}

pub fn render(r: &ModelReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("{:<12} {:>12} {:>16}\n", "component", "params", "multiply-adds"));
    let rows = [
        ("encoder", r.params.encoder, r.macs.encoder),
        ("gate", r.params.gate, r.macs.gate),
        ("experts", r.params.experts, r.macs.experts),
        ("projection", r.params.projection, r.macs.projection),
        ("adapter", r.params.adapter, r.macs.adapter),
        ("lm", r.params.lm, r.macs.lm),
        ("total", r.params.total(), r.macs.total()),
    ];
    for (name, p, m) in rows {
        s.push_str(&format!("{name:<12} {p:>12} {m:>16}\n"));
    }
    s.push_str(&format!(
        "trainable {}  frozen {}  visual tokens {}  (text {} / answer {} positions)\n",
        r.trainable_params, r.frozen_params, r.visual_tokens, r.text_len, r.answer_len
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn by_group(cfg: &ModelConfig, vocab: usize) -> Counts {
        let store = init_params(cfg, vocab, 0);
        let mut c = Counts { encoder: 0, gate: 0, experts: 0, projection: 0, adapter: 0, lm: 0 };
        for (name, p) in store.iter() {
            let n = p.value.len() as u64;
            match name.split('.').next().unwrap() {
                "encoder" => c.encoder += n,
                "gate" => c.gate += n,
                "expert" => c.experts += n,
                "proj" => c.projection += n,
                "adapter" => c.adapter += n,
                "lm" => c.lm += n,
                other => panic!("unexpected group {other}"),
            }
        }
        c
    }

    #[test]
    fn param_formula_matches_store() {
        let mut wide = ModelConfig::default();
        wide.moe.expert_out_channels = 32;
        wide.moe.num_experts = 2;
        for cfg in [ModelConfig::default(), ModelConfig::tiny(), wide] {
            assert_eq!(param_counts(&cfg, 41), by_group(&cfg, 41));
            let r = model_report(&cfg, 41);
            let store = init_params(&cfg, 41, 0);
            assert_eq!(r.trainable_params as usize, store.count(true));
            assert_eq!(r.frozen_params as usize, store.count(false));
        }
    }

    #[test]
    fn tiny_macs_worked_by_hand() {
        let m = mac_counts(&ModelConfig::tiny(), 20, 12, 8);
        assert_eq!(m.encoder, 15936);
        assert_eq!(m.gate, 3480);
        assert_eq!(m.experts, 34560);
        assert_eq!(m.projection, 6144);
        assert_eq!(m.adapter, 27648);
        assert_eq!(m.lm, 156672);
    }
}
