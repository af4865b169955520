use std::collections::{BTreeMap, HashMap, HashSet};

use super::bleu::ngram_counts;
use super::{EvalPair, MetricsError};

const MAX_N: usize = 4;
pub const SCALE: f64 = 10.0;

// Ordered so that float sums are reproducible.
type Vector<'a> = BTreeMap<Vec<&'a str>, f64>;

fn tfidf<'a>(counts: HashMap<Vec<&'a str>, usize>, idf: &dyn Fn(&[&'a str]) -> f64) -> Vector<'a> {
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(g, k)| {
            let w = k as f64 / total as f64 * idf(&g);
            (g, w)
        })
        .collect()
}

fn cosine(a: &Vector<'_>, b: &Vector<'_>) -> f64 {
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, v)| b.get(g).map(|w| v * w)).sum();
    dot / (na * nb)
}

/// Per-pair CIDEr scores. IDF comes from the references of `pairs`:
/// `ln(N) − ln(max(1, df))`, so n-grams unseen in the references are
/// weighted as if they occurred once.
pub fn cider_scores(pairs: &[EvalPair]) -> Result<Vec<f64>, MetricsError> {
    if pairs.len() < 2 {
        return Err(MetricsError::CorpusTooSmall(pairs.len()));
    }
    let ln_n = (pairs.len() as f64).ln();
    let mut scores = vec![0.0; pairs.len()];
    for n in 1..=MAX_N {
        let mut df: HashMap<Vec<&str>, usize> = HashMap::new();
        for p in pairs {
            let grams: HashSet<Vec<&str>> = p
                .references
                .iter()
                .flat_map(|r| ngram_counts(r, n).into_keys())
                .collect();
            for g in grams {
                *df.entry(g).or_default() += 1;
            }
        }
        let idf = |g: &[&str]| ln_n - (df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        for (p, score) in pairs.iter().zip(scores.iter_mut()) {
            if p.references.is_empty() {
                continue;
            }
            let cand = tfidf(ngram_counts(&p.prediction, n), &idf);
            let sim: f64 = p
                .references
                .iter()
                .map(|r| cosine(&cand, &tfidf(ngram_counts(r, n), &idf)))
                .sum::<f64>()
                / p.references.len() as f64;
            *score += sim / MAX_N as f64;
        }
    }
    Ok(scores.into_iter().map(|s| s * SCALE).collect())
}

pub fn cider(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    let s = cider_scores(pairs)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}
