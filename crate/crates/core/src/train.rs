//! Optimizer and training loop.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, Model, VisualInput};
use crate::params::{Grads, ParamStore};
use crate::scenes::{Category, SceneSample};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Linear learning-rate ramp over the first steps; 0 disables it.
    pub warmup_steps: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.05,
            steps: 2000,
            batch: 8,
            seed: 0,
            warmup_steps: 0,
            clip_norm: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive and weight_decay nonnegative".into()));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config("clip_norm must be finite and nonnegative".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay. Decay applies to parameters of rank
/// two or more (weights, kernels, embeddings), not to biases and norms.
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: IndexMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    /// Learning rate at 0-based `step` under a linear warmup.
    pub fn warmup_lr(base: f64, warmup_steps: usize, step: usize) -> f64 {
        if step >= warmup_steps {
            base
        } else {
            base * (step + 1) as f64 / warmup_steps as f64
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &Grads<f32>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (self.lr / bc1) as f32;
        let inv_bc2_sqrt = (1.0 / bc2.sqrt()) as f32;
        let eps = self.eps as f32;
        let decay = (self.lr * self.weight_decay) as f32;
        for (name, g) in &grads.entries {
            if !params.is_trainable(name) {
                continue;
            }
            let p = params.get_mut(name).expect("gradient for a known parameter");
            let decayed = p.rank() >= 2;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                if decayed {
                    *w -= decay * *w;
                }
                *w -= step_size * *mi / ((*vi).sqrt() * inv_bc2_sqrt + eps);
            }
        }
    }
}

/// A sample in model-ready form.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub input: VisualInput<f32>,
    pub question: Vec<usize>,
    pub target: Vec<usize>,
    pub answer: String,
    pub category: Category,
}

pub fn prepare_examples(model: &Model, samples: &[SceneSample]) -> Result<Vec<Example>> {
    samples
        .iter()
        .map(|s| {
            Ok(Example {
                id: s.id.clone(),
                input: model.prepare_visual(&s.views)?,
                question: model.question_ids(&s.question),
                target: model.target_ids(&s.answer),
                answer: s.answer.clone(),
                category: s.category,
            })
        })
        .collect()
}

/// Loss and parameter gradients of one example.
pub fn example_grads(model: &Model, ex: &Example) -> Result<(f32, Grads<f32>)> {
    let mut tape = Tape::new();
    let f = forward(&mut tape, &model.params, &model.cfg, &ex.input, &ex.question, &ex.target)?;
    tape.backward(f.loss)?;
    let loss = tape.value(f.loss).data()[0];
    Ok((loss, Grads::from_pairs(tape.param_grads())))
}

/// Mean loss and mean gradient over a batch. Per-example results are
/// summed in batch order, so the outcome does not depend on `parallel`.
pub fn batch_grads(model: &Model, batch: &[&Example], parallel: bool) -> Result<(f32, Grads<f32>)> {
    let results: Vec<Result<(f32, Grads<f32>)>> = if parallel {
        batch.par_iter().map(|ex| example_grads(model, ex)).collect()
    } else {
        batch.iter().map(|ex| example_grads(model, ex)).collect()
    };
    let mut total = Grads::default();
    let mut loss = 0.0f32;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.add(&g);
    }
    let inv = 1.0 / batch.len() as f32;
    total.scale(inv);
    Ok((loss * inv, total))
}

/// Deterministic batch order: a fresh seeded permutation per epoch.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Vocabulary over the closed template language plus every question and
/// answer of a training corpus, so small corpora still cover held-out text.
pub fn corpus_vocab(samples: &[SceneSample]) -> crate::lm::Vocabulary {
    let templates = crate::scenes::qa::template_sentences();
    crate::lm::Vocabulary::build(
        templates
            .iter()
            .map(String::as_str)
            .chain(samples.iter().flat_map(|s| [s.question.as_str(), s.answer.as_str()])),
    )
}

/// Trains `model` in place and returns the per-step mean losses.
pub fn train(
    model: &mut Model,
    examples: &[Example],
    cfg: &TrainConfig,
    parallel: bool,
    mut on_step: impl FnMut(usize, f32, &Model),
) -> Result<Vec<f32>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut sampler = BatchSampler::new(examples.len(), cfg.seed);
    let batch = cfg.batch.min(examples.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sampler.next_batch(batch);
        let refs: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        let (loss, mut grads) = batch_grads(model, &refs, parallel)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at step {step}")));
        }
        if cfg.clip_norm > 0.0 {
            let norm = grads.global_norm() as f64;
            if norm > cfg.clip_norm {
                grads.scale((cfg.clip_norm / norm) as f32);
            }
        }
        opt.lr = AdamW::warmup_lr(cfg.lr, cfg.warmup_steps, step);
        opt.update(&mut model.params, &grads);
        losses.push(loss);
        on_step(step, loss, model);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap(), true);
        store.insert("b", Tensor::new(&[2], vec![1.0, 1.0]).unwrap(), true);
        store.insert("frozen", Tensor::new(&[2], vec![5.0, 5.0]).unwrap(), false);
        let grads = Grads::from_pairs(vec![
            ("w".into(), vec![0.3, -2.0]),
            ("b".into(), vec![1.0, 0.0]),
            ("frozen".into(), vec![1.0, 1.0]),
        ]);
        let mut opt = AdamW::new(0.1, 0.5);
        opt.update(&mut store, &grads);
        let w = store.get("w").unwrap().data();
        // decay then a unit-size step against the gradient sign
        assert!((w[0] - (1.0 * 0.95 - 0.1)).abs() < 1e-6);
        assert!((w[1] - (-1.0 * 0.95 + 0.1)).abs() < 1e-6);
        let b = store.get("b").unwrap().data();
        assert!((b[0] - 0.9).abs() < 1e-6);
        assert_eq!(b[1], 1.0);
        assert_eq!(store.get("frozen").unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn warmup_ramps_linearly() {
        assert_eq!(AdamW::warmup_lr(1e-3, 0, 0), 1e-3);
        assert_eq!(AdamW::warmup_lr(1e-3, 4, 0), 2.5e-4);
        assert_eq!(AdamW::warmup_lr(1e-3, 4, 3), 1e-3);
        assert_eq!(AdamW::warmup_lr(1e-3, 4, 100), 1e-3);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
