//! Gradient certification: every tape primitive on random instances plus
//! the composed pipeline at the tiny configuration, all in f64.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::lm::{self, vocab::PAD};
use crate::model::{self, init_params, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::gradcheck::{gradcheck, gradcheck_params, GradcheckReport, DEFAULT_STEP};
use crate::tensor::{Mask, Result, Tape, Tensor, Var};

pub const TOLERANCE: f64 = 1e-4;

/// Vocabulary size of the synthetic pipeline instance.
const PIPELINE_VOCAB: usize = 20;

#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub name: String,
    pub trials: usize,
    pub checked: usize,
    pub max_rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE && self.checked > 0
    }

    fn absorb(&mut self, r: &GradcheckReport) {
        self.trials += 1;
        self.checked += r.checked;
        self.max_rel_err = self.max_rel_err.max(r.max_rel_err);
    }

    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            trials: 0,
            checked: 0,
            max_rel_err: 0.0,
        }
    }
}

type Op = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values at least 0.1 away from zero, so ReLU kinks are never straddled.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// One random instance (inputs and the op closed over its constants).
fn instance(name: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Op) {
    let r = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.gen_range(lo..=hi);
    match name {
        "conv2d" => {
            let (ci, co, h) = (r(rng, 1, 3), r(rng, 1, 3), r(rng, 4, 6));
            let (stride, pad) = if rng.gen_bool(0.5) { (1, 1) } else { (2, 0) };
            let ins = vec![uniform(rng, &[ci, h, h]), uniform(rng, &[co, ci, 3, 3])];
            (ins, Box::new(move |t, v| t.conv2d(v[0], v[1], stride, pad)))
        }
        "conv_transpose2d" => {
            let (ci, co, h, k) = (r(rng, 1, 3), r(rng, 1, 3), r(rng, 2, 4), r(rng, 1, 3));
            let stride = r(rng, 1, 2);
            let ins = vec![uniform(rng, &[ci, h, h]), uniform(rng, &[ci, co, k, k])];
            (ins, Box::new(move |t, v| t.conv_transpose2d(v[0], v[1], stride)))
        }
        "depthwise_conv2d" => {
            let (c, h) = (r(rng, 1, 3), r(rng, 3, 6));
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let ins = vec![uniform(rng, &[c, h, h]), uniform(rng, &[c, 1, k, k])];
            (ins, Box::new(move |t, v| t.depthwise_conv2d(v[0], v[1], k / 2)))
        }
        "channel_bias" => {
            let (c, h) = (r(rng, 1, 4), r(rng, 1, 4));
            (vec![uniform(rng, &[c, h, h]), uniform(rng, &[c])], Box::new(|t, v| t.channel_bias(v[0], v[1])))
        }
        "maxpool2d" => {
            let (c, h) = (r(rng, 1, 3), 2 * r(rng, 1, 3));
            (vec![uniform(rng, &[c, h, h])], Box::new(|t, v| t.maxpool2d(v[0], 2)))
        }
        "matmul" => {
            let (m, k, n) = (r(rng, 1, 5), r(rng, 1, 5), r(rng, 1, 5));
            (vec![uniform(rng, &[m, k]), uniform(rng, &[k, n])], Box::new(|t, v| t.matmul(v[0], v[1])))
        }
        "matmul_t" => {
            let (m, k, n) = (r(rng, 1, 5), r(rng, 1, 5), r(rng, 1, 5));
            let (ta, tb) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
            let a = if ta { [k, m] } else { [m, k] };
            let b = if tb { [n, k] } else { [k, n] };
            let ins = vec![uniform(rng, &a), uniform(rng, &b)];
            (ins, Box::new(move |t, v| t.matmul_t(v[0], ta, v[1], tb)))
        }
        "add" => {
            let s = [r(rng, 1, 4), r(rng, 1, 4)];
            (vec![uniform(rng, &s), uniform(rng, &s)], Box::new(|t, v| t.add(v[0], v[1])))
        }
        "add_row" => {
            let (m, n) = (r(rng, 1, 4), r(rng, 1, 4));
            (vec![uniform(rng, &[m, n]), uniform(rng, &[n])], Box::new(|t, v| t.add_row(v[0], v[1])))
        }
        "mul_row" => {
            let (m, n) = (r(rng, 1, 4), r(rng, 1, 4));
            (vec![uniform(rng, &[m, n]), uniform(rng, &[n])], Box::new(|t, v| t.mul_row(v[0], v[1])))
        }
        "scale" => {
            let c = rng.gen_range(-2.0..2.0);
            let n = r(rng, 1, 6);
            (vec![uniform(rng, &[n])], Box::new(move |t, v| t.scale(v[0], c)))
        }
        "scale_by" => {
            let n = r(rng, 1, 4);
            let idx = rng.gen_range(0..n);
            let m = r(rng, 1, 3);
            let ins = vec![uniform(rng, &[m, 3]), uniform(rng, &[n])];
            (ins, Box::new(move |t, v| t.scale_by(v[0], v[1], idx)))
        }
        "relu" => {
            let n = r(rng, 2, 8);
            (vec![off_zero(rng, &[n])], Box::new(|t, v| t.relu(v[0])))
        }
        "reshape" => {
            let (a, b) = (r(rng, 1, 4), r(rng, 1, 4));
            (vec![uniform(rng, &[a, b])], Box::new(move |t, v| t.reshape(v[0], &[b, a])))
        }
        "concat" => {
            let axis = rng.gen_range(0..2);
            let (m, n) = (r(rng, 1, 3), r(rng, 1, 3));
            let other = if axis == 0 { [r(rng, 1, 3), n] } else { [m, r(rng, 1, 3)] };
            let ins = vec![uniform(rng, &[m, n]), uniform(rng, &other)];
            (ins, Box::new(move |t, v| t.concat(&[v[0], v[1]], axis)))
        }
        "narrow" => {
            let (m, n) = (r(rng, 2, 5), r(rng, 2, 5));
            let start = rng.gen_range(0..n - 1);
            let len = rng.gen_range(1..=n - start);
            (vec![uniform(rng, &[m, n])], Box::new(move |t, v| t.narrow(v[0], 1, start, len)))
        }
        "softmax" => {
            let (m, n) = (r(rng, 1, 4), r(rng, 1, 5));
            (vec![uniform(rng, &[m, n])], Box::new(|t, v| t.softmax(v[0], None)))
        }
        "softmax_causal" => {
            let n = r(rng, 1, 5);
            (vec![uniform(rng, &[n, n])], Box::new(|t, v| t.softmax(v[0], Some(&Mask::Causal))))
        }
        "softmax_keys" => {
            let (m, n) = (r(rng, 1, 4), r(rng, 2, 5));
            let mut keys: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
            keys[rng.gen_range(0..n)] = true;
            let mask = Mask::Keys(keys);
            (vec![uniform(rng, &[m, n])], Box::new(move |t, v| t.softmax(v[0], Some(&mask))))
        }
        "layer_norm" => {
            let (m, n) = (r(rng, 1, 4), r(rng, 3, 8));
            (vec![uniform(rng, &[m, n])], Box::new(|t, v| t.layer_norm(v[0], 1e-5)))
        }
        "embedding" => {
            let (vocab, dim) = (r(rng, 3, 6), r(rng, 1, 4));
            let mut ids: Vec<usize> = (0..r(rng, 2, 6)).map(|_| rng.gen_range(0..vocab)).collect();
            ids.push(ids[0]);
            // The pad id is a stop-gradient, not part of the differentiable map.
            (vec![uniform(rng, &[vocab, dim])], Box::new(move |t, v| t.embedding(v[0], &ids, None)))
        }
        "cross_entropy" => {
            let (m, n) = (r(rng, 2, 5), r(rng, 2, 6));
            let mut targets: Vec<usize> = (0..m).map(|_| rng.gen_range(1..n)).collect();
            targets[m - 1] = 0;
            (vec![uniform(rng, &[m, n])], Box::new(move |t, v| t.cross_entropy(v[0], &targets, Some(0))))
        }
        "dot_const" => {
            let n = r(rng, 1, 6);
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (vec![uniform(rng, &[n])], Box::new(move |t, v| t.dot_const(v[0], w.clone())))
        }
        _ => unreachable!("unknown primitive {name}"),
    }
}

pub const PRIMITIVES: [&str; 23] = [
    "conv2d",
    "conv_transpose2d",
    "depthwise_conv2d",
    "channel_bias",
    "maxpool2d",
    "matmul",
    "matmul_t",
    "add",
    "add_row",
    "mul_row",
    "scale",
    "scale_by",
    "relu",
    "reshape",
    "concat",
    "narrow",
    "softmax",
    "softmax_causal",
    "softmax_keys",
    "layer_norm",
    "embedding",
    "cross_entropy",
    "dot_const",
];

pub fn check_primitive(name: &str, trials: usize, seed: u64) -> Result<OpCheck> {
    let salt = name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    let mut out = OpCheck::new(name);
    for _ in 0..trials {
        let (inputs, op) = instance(name, &mut rng);
        out.absorb(&gradcheck(&inputs, DEFAULT_STEP, op)?);
    }
    Ok(out)
}

/// Tiny-config parameters with every entry jittered, so no gradient is
/// structurally zero (the gate and output projections start at zero).
fn pipeline_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut store = init_params(cfg, PIPELINE_VOCAB, rng.gen()).cast::<f64>();
    store.set_trainable("", true);
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        for x in store.get_mut(&n).unwrap().data_mut() {
            *x += rng.gen_range(-0.2..0.2);
        }
    }
    store
}

fn pipeline_sample(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let words = lm::vocab::RESERVED.len()..PIPELINE_VOCAB;
    let qlen = rng.gen_range(3..cfg.lm.max_text_len);
    let mut question: Vec<usize> = (0..qlen).map(|_| rng.gen_range(words.clone())).collect();
    question.resize(cfg.lm.max_text_len, PAD);
    let alen = rng.gen_range(1..cfg.lm.max_answer_len);
    let answer: Vec<usize> = (0..alen).map(|_| rng.gen_range(words.clone())).collect();
    (question, lm::target_sequence(&answer, &cfg.lm))
}

/// Loss gradient with respect to every parameter tensor (a subsample of
/// `per_param` entries each) and to every input pixel.
pub fn check_pipeline(trials: usize, per_param: usize, seed: u64) -> Result<(OpCheck, OpCheck)> {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7069_7065);
    let mut params_check = OpCheck::new("pipeline.params");
    let mut pixels_check = OpCheck::new("pipeline.pixels");
    let side = cfg.encoder.input_size;
    for _ in 0..trials {
        let store = pipeline_params(&cfg, &mut rng);
        let (question, target) = pipeline_sample(&cfg, &mut rng);
        let images: Vec<Tensor<f64>> = (0..cfg.encoder.num_views())
            .map(|_| Tensor::from_fn(&[3, side, side], |_| rng.gen_range(0.0..1.0)))
            .collect();
        let mut names: Vec<String> = store.names().map(String::from).collect();
        names.shuffle(&mut rng);
        let input = model::VisualInput::Images(images.clone());
        let r = gradcheck_params(&store, &names, per_param, DEFAULT_STEP, |t, s| {
            Ok(model::forward(t, s, &cfg, &input, &question, &target)?.loss)
        })?;
        params_check.absorb(&r);
        let r = gradcheck(&images, DEFAULT_STEP, |t, views| {
            let v = model::visual_tokens_from(t, &store, &cfg, views, true)?;
            Ok(model::forward_tokens(t, &store, &cfg, v, &question, &target)?.loss)
        })?;
        pixels_check.absorb(&r);
    }
    Ok((params_check, pixels_check))
}

/// The full certification run.
pub fn certify(trials: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut out = PRIMITIVES
        .iter()
        .map(|n| check_primitive(n, trials, seed))
        .collect::<Result<Vec<_>>>()?;
    let (p, x) = check_pipeline(trials, 8, seed)?;
    out.push(p);
    out.push(x);
    Ok(out)
}

pub fn render(checks: &[OpCheck]) -> String {
    let mut s = format!("{:<20} {:>6} {:>8} {:>12}  status\n", "op", "trials", "entries", "max rel err");
    for c in checks {
        s.push_str(&format!(
            "{:<20} {:>6} {:>8} {:>12.3e}  {}\n",
            c.name,
            c.trials,
            c.checked,
            c.max_rel_err,
            if c.passed() { "ok" } else { "FAIL" }
        ));
    }
    s
}
