use std::collections::HashMap;

use super::EvalPair;

pub const MAX_N: usize = 4;
pub const SMOOTH_EPS: f64 = 1e-9;

pub(crate) fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
        }
    }
    m
}

/// Reference length closest to `c`, shorter on ties.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Corpus BLEU-4: clipped n-gram counts pooled over all pairs, uniform
/// weights, ε-floored precisions and the brevity penalty.
pub fn bleu4(pairs: &[EvalPair]) -> f64 {
    let mut matches = [0usize; MAX_N];
    let mut totals = [0usize; MAX_N];
    let (mut c, mut r) = (0usize, 0usize);
    for p in pairs {
        c += p.prediction.len();
        r += closest_ref_len(p.prediction.len(), &p.references);
        for n in 1..=MAX_N {
            let cand = ngram_counts(&p.prediction, n);
            let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
            for rf in &p.references {
                for (g, k) in ngram_counts(rf, n) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &cand {
                matches[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                totals[n - 1] += k;
            }
        }
    }
    if c == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..MAX_N)
        .map(|i| {
            let p = if matches[i] == 0 {
                SMOOTH_EPS
            } else {
                matches[i] as f64 / totals[i] as f64
            };
            p.ln()
        })
        .sum::<f64>()
        / MAX_N as f64;
    let bp = if c <= r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * log_p.exp()
}
