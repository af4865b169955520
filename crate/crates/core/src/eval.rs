//! Greedy decoding over a test split and scoring of the predictions.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lm::vocab::split_words;
use crate::metrics::{self, MetricsReport, PredictionRecord};
use crate::model::Model;
use crate::scenes::SceneSample;
use crate::train::Example;

/// Rejects data containing words the model's vocabulary has never seen.
pub fn check_vocab(model: &Model, samples: &[SceneSample]) -> Result<()> {
    for s in samples {
        for text in [&s.question, &s.answer] {
            if let Some(w) = split_words(text).into_iter().find(|w| !model.vocab.contains(w)) {
                return Err(Error::Invalid(format!(
                    "sample {}: word {w:?} is not in the checkpoint vocabulary",
                    s.id
                )));
            }
        }
    }
    Ok(())
}

pub fn predict(model: &Model, examples: &[Example], parallel: bool) -> Result<Vec<PredictionRecord>> {
    let one = |e: &Example| -> Result<PredictionRecord> {
        let ids = model.generate(&e.input, &e.question)?;
        Ok(PredictionRecord {
            id: e.id.clone(),
            prediction: model.vocab.detokenize(&ids),
            references: vec![e.answer.clone()],
            category: Some(e.category),
        })
    };
    if parallel {
        examples.par_iter().map(one).collect()
    } else {
        examples.iter().map(one).collect()
    }
}

pub fn score_records(records: &[PredictionRecord]) -> Result<MetricsReport> {
    let pairs: Vec<_> = records.iter().map(PredictionRecord::pair).collect();
    Ok(metrics::report(&pairs)?)
}

pub fn evaluate(model: &Model, examples: &[Example], parallel: bool) -> Result<(Vec<PredictionRecord>, MetricsReport)> {
    if examples.is_empty() {
        return Err(Error::Invalid("empty evaluation set".into()));
    }
    let records = predict(model, examples, parallel)?;
    let report = score_records(&records)?;
    Ok((records, report))
}
