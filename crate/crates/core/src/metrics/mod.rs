//! Caption metrics: corpus BLEU-4, ROUGE-L, METEOR (exact and stem
//! matching only) and CIDEr, plus the report and prediction file formats.

pub mod bleu;
pub mod cider;
pub mod meteor;
pub mod rouge;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

pub use bleu::bleu4;
pub use cider::cider;
pub use meteor::meteor;
pub use rouge::rouge_l;

use crate::lm::vocab::split_words;
use crate::scenes::Category;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("CIDEr needs a corpus of at least 2 pairs (got {0}); score pairs together in corpus mode")]
    CorpusTooSmall(usize),
    #[error("no pairs to score")]
    Empty,
    #[error("predictions line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One scored prediction, tokenised like the language model input.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub prediction: Vec<String>,
    pub references: Vec<Vec<String>>,
    pub category: Option<Category>,
}

impl EvalPair {
    pub fn from_text(prediction: &str, references: &[&str], category: Option<Category>) -> Self {
        Self {
            prediction: split_words(prediction),
            references: references.iter().map(|r| split_words(r)).collect(),
            category,
        }
    }
}

/// Line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    pub prediction: String,
    pub references: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
}

impl PredictionRecord {
    pub fn pair(&self) -> EvalPair {
        let refs: Vec<&str> = self.references.iter().map(String::as_str).collect();
        EvalPair::from_text(&self.prediction, &refs, self.category)
    }
}

pub fn write_predictions(w: &mut impl Write, records: &[PredictionRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("record serialises"))?;
    }
    Ok(())
}

pub fn read_predictions(r: impl BufRead) -> Result<Vec<PredictionRecord>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MetricsError::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

/// The four scores in `[0,1]` (CIDEr in `[0,10]`). CIDEr is absent when
/// fewer than two pairs were scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: Option<f64>,
    pub exact_match: f64,
    pub count: usize,
}

pub fn score(pairs: &[EvalPair]) -> Result<Scores, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let exact = pairs
        .iter()
        .filter(|p| p.references.iter().any(|r| *r == p.prediction))
        .count();
    Ok(Scores {
        bleu4: bleu4(pairs),
        meteor: meteor(pairs),
        rouge_l: rouge_l(pairs),
        cider: if pairs.len() >= 2 { Some(cider(pairs)?) } else { None },
        exact_match: exact as f64 / pairs.len() as f64,
        count: pairs.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: Scores,
    pub per_category: BTreeMap<String, Scores>,
}

pub fn report(pairs: &[EvalPair]) -> Result<MetricsReport, MetricsError> {
    let overall = score(pairs)?;
    let mut groups: BTreeMap<String, Vec<EvalPair>> = BTreeMap::new();
    for p in pairs {
        if let Some(c) = p.category {
            groups.entry(c.as_str().to_string()).or_default().push(p.clone());
        }
    }
    let per_category = groups
        .into_iter()
        .map(|(k, v)| score(&v).map(|s| (k, s)))
        .collect::<Result<_, _>>()?;
    Ok(MetricsReport { overall, per_category })
}

/// Plain-text table: BLEU-4, METEOR and ROUGE-L ×100, CIDEr as is.
pub fn table(report: &MetricsReport) -> String {
    let mut s = format!(
        "{:<12} {:>7} {:>7} {:>7} {:>7} {:>7} {:>6}\n",
        "split", "BLEU-4", "METEOR", "ROUGE-L", "CIDEr", "EM", "n"
    );
    let mut row = |name: &str, sc: &Scores| {
        let cider = sc.cider.map_or("-".to_string(), |c| format!("{c:.2}"));
        s.push_str(&format!(
            "{:<12} {:>7.2} {:>7.2} {:>7.2} {:>7} {:>7.2} {:>6}\n",
            name,
            sc.bleu4 * 100.0,
            sc.meteor * 100.0,
            sc.rouge_l * 100.0,
            cider,
            sc.exact_match * 100.0,
            sc.count
        ));
    };
    row("overall", &report.overall);
    for (k, v) in &report.per_category {
        row(k, v);
    }
    s
}
