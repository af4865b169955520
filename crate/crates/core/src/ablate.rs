//! Expert-count and tokens-per-image sweeps.

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::metrics::Scores;
use crate::model::{visual_tokens, Model};
use crate::scenes::SceneSample;
use crate::tensor::Tape;
use crate::train::{corpus_vocab, prepare_examples, train};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Experts,
    Tokens,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "experts" => Ok(Axis::Experts),
            "tokens" => Ok(Axis::Tokens),
            _ => Err(Error::Config(format!("unknown ablation axis {s:?} (expected experts or tokens)"))),
        }
    }

    pub fn values(self) -> [usize; 3] {
        match self {
            Axis::Experts => [2, 4, 6],
            Axis::Tokens => [8, 16, 32],
        }
    }

    /// The configuration for one sweep point; the other axis is pinned to
    /// 4 experts or 16 tokens per image.
    pub fn apply(self, base: &RunConfig, value: usize) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            Axis::Experts => {
                cfg.moe.num_experts = value;
                cfg.moe.expert_out_channels = 16;
            }
            Axis::Tokens => {
                cfg.moe.num_experts = 4;
                cfg.moe.expert_out_channels = value;
            }
        }
        cfg
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub num_experts: usize,
    pub tokens_per_image: usize,
    /// Shape of the visual token matrix observed on a test sample.
    pub token_shape: Vec<usize>,
    pub final_loss: f32,
    pub scores: Scores,
}

/// Trains and evaluates every point of `axis` from the same seed.
pub fn ablate(
    axis: Axis,
    base: &RunConfig,
    train_set: &[SceneSample],
    test_set: &[SceneSample],
    parallel: bool,
) -> Result<Vec<AblationRow>> {
    let vocab = corpus_vocab(train_set);
    let mut rows = Vec::new();
    for value in axis.values() {
        let cfg = axis.apply(base, value);
        cfg.validate()?;
        let mut model = Model::new(cfg.model(), vocab.clone(), cfg.train.seed)?;
        let tr = prepare_examples(&model, train_set)?;
        let te = prepare_examples(&model, test_set)?;
        let first = te.first().ok_or_else(|| Error::Invalid("empty test split".into()))?;
        let losses = train(&mut model, &tr, &cfg.train, parallel, |_, _, _| {})?;
        let mut tape = Tape::without_param_grads();
        let v = visual_tokens(&mut tape, &model.params, &model.cfg, &first.input)?;
        let token_shape = tape.shape(v).to_vec();
        let (_, report) = evaluate(&model, &te, parallel)?;
        rows.push(AblationRow {
            num_experts: cfg.moe.num_experts,
            tokens_per_image: cfg.moe.expert_out_channels,
            token_shape,
            final_loss: losses.last().copied().unwrap_or(f32::NAN),
            scores: report.overall,
        });
    }
    Ok(rows)
}

pub fn table(axis: Axis, rows: &[AblationRow]) -> String {
    let head = match axis {
        Axis::Experts => "experts",
        Axis::Tokens => "tokens",
    };
    let mut s = format!(
        "{:<8} {:>10} {:>7} {:>7} {:>7} {:>7}\n",
        head, "V shape", "BLEU-4", "METEOR", "ROUGE-L", "CIDEr"
    );
    for r in rows {
        let key = match axis {
            Axis::Experts => r.num_experts,
            Axis::Tokens => r.tokens_per_image,
        };
        let shape = r.token_shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        let cider = r.scores.cider.map_or("-".into(), |c| format!("{c:.2}"));
        s.push_str(&format!(
            "{:<8} {:>10} {:>7.2} {:>7.2} {:>7.2} {:>7}\n",
            key,
            shape,
            r.scores.bleu4 * 100.0,
            r.scores.meteor * 100.0,
            r.scores.rouge_l * 100.0,
            cider
        ));
    }
    s
}
