use super::EvalPair;

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure (β = 1) of one prediction against one reference.
pub fn rouge_l_pair(pred: &[String], reference: &[String]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(pred, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, r) = (l / pred.len() as f64, l / reference.len() as f64);
    2.0 * p * r / (p + r)
}

/// Mean over pairs of the best F against any reference.
pub fn rouge_l(pairs: &[EvalPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|p| {
            p.references
                .iter()
                .map(|r| rouge_l_pair(&p.prediction, r))
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / pairs.len() as f64
}
