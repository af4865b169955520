use super::EvalPair;

const SUFFIXES: [&str; 4] = ["ing", "es", "ed", "s"];

/// Crude suffix stripper: removes the first matching suffix of
/// "ing", "es", "ed", "s" when at least two characters remain.
pub fn stem(word: &str) -> &str {
    for s in SUFFIXES {
        if let Some(base) = word.strip_suffix(s) {
            if base.chars().count() >= 2 {
                return base;
            }
        }
    }
    word
}

/// Alignment as `(pred_index, ref_index)` pairs sorted by prediction index.
/// Exact matches first, then stem matches among the leftovers; each stage
/// pairs every prediction token with the first free reference token.
fn align(pred: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used_ref = vec![false; reference.len()];
    let mut used_pred = vec![false; pred.len()];
    let mut out = Vec::new();
    let stages: [fn(&str, &str) -> bool; 2] = [|a, b| a == b, |a, b| stem(a) == stem(b)];
    for same in stages {
        for (i, p) in pred.iter().enumerate() {
            if used_pred[i] {
                continue;
            }
            if let Some(j) = (0..reference.len()).find(|&j| !used_ref[j] && same(p, &reference[j])) {
                used_ref[j] = true;
                used_pred[i] = true;
                out.push((i, j));
            }
        }
    }
    out.sort_unstable();
    out
}

pub fn meteor_pair(pred: &[String], reference: &[String]) -> f64 {
    let a = align(pred, reference);
    let m = a.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + a.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
    let p = m as f64 / pred.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

/// Mean over pairs of the best score against any reference.
pub fn meteor(pairs: &[EvalPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|p| {
            p.references
                .iter()
                .map(|r| meteor_pair(&p.prediction, r))
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / pairs.len() as f64
}
