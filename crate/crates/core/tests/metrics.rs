use std::collections::BTreeMap;

use mdrive::metrics::{bleu::bleu4, cider::cider, meteor::meteor, rouge::rouge_l, score, EvalPair};
use proptest::prelude::*;

fn pair(pred: &str, refs: &[&str]) -> EvalPair {
    EvalPair::from_text(pred, refs, None)
}

/// Corpus BLEU-4 written directly from its definition: joined-string
/// n-gram keys, clipping against the per-n-gram reference maximum, pooled
/// counts, ε floor on zero precisions and the closest-length brevity penalty.
fn bleu_oracle(pairs: &[(Vec<String>, Vec<Vec<String>>)]) -> f64 {
    fn grams(t: &[String], n: usize) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        if t.len() >= n {
            for i in 0..=t.len() - n {
                *m.entry(t[i..i + n].join("\u{1}")).or_insert(0) += 1;
            }
        }
        m
    }
    let mut hit = [0f64; 4];
    let mut all = [0f64; 4];
    let (mut c, mut r) = (0f64, 0f64);
    for (cand, refs) in pairs {
        c += cand.len() as f64;
        let mut best = refs[0].len();
        for rf in refs {
            let (d, bd) = (rf.len().abs_diff(cand.len()), best.abs_diff(cand.len()));
            if d < bd || (d == bd && rf.len() < best) {
                best = rf.len();
            }
        }
        r += best as f64;
        for n in 1..=4 {
            let cg = grams(cand, n);
            for (g, k) in &cg {
                let cap = refs.iter().map(|rf| grams(rf, n).get(g).copied().unwrap_or(0)).max().unwrap();
                hit[n - 1] += (*k).min(cap) as f64;
                all[n - 1] += *k as f64;
            }
        }
    }
    let mut s = 0.0;
    for n in 0..4 {
        let p = if hit[n] == 0.0 { 1e-9 } else { hit[n] / all[n] };
        s += 0.25 * p.ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * s.exp()
}

#[test]
fn identical_pairs_hit_maxima() {
    let texts = [
        "there are two cars and one cone to the back left.",
        "the ego vehicle should brake.",
        "the pedestrian is moving to the right.",
    ];
    let pairs: Vec<EvalPair> = texts.iter().map(|t| pair(t, &[t])).collect();
    assert!((bleu4(&pairs) - 1.0).abs() < 1e-12);
    assert!((rouge_l(&pairs) - 1.0).abs() < 1e-12);
    let meteor_want: f64 = pairs
        .iter()
        .map(|p| 1.0 - 0.5 / (p.prediction.len() as f64).powi(3))
        .sum::<f64>()
        / pairs.len() as f64;
    assert!((meteor(&pairs) - meteor_want).abs() <= 1e-6);
}

#[test]
fn meteor_single_chunk_penalty() {
    for len in 1..12 {
        let words: Vec<String> = (0..len).map(|i| format!("w{i}")).collect();
        let text = words.join(" ");
        let m = meteor(&[pair(&text, &[&text])]);
        assert!((m - (1.0 - 0.5 / (len as f64).powi(3))).abs() <= 1e-6, "len {len}");
    }
}

#[test]
fn cider_is_ten_on_distinct_identical_corpus() {
    // No n-gram is shared between pairs, so every idf weight is ln N, and
    // every sentence is long enough to have 4-grams.
    let texts = ["a b c d", "e f g h i", "j k l m", "n o p q r s"];
    let pairs: Vec<EvalPair> = texts.iter().map(|t| pair(t, &[t])).collect();
    assert!((cider(&pairs).unwrap() - 10.0).abs() < 1e-9);
}

#[test]
fn cider_needs_a_corpus() {
    assert!(cider(&[pair("a b", &["a b"])]).is_err());
}

#[test]
fn rouge_transposition_case() {
    let r = rouge_l(&[pair("a b c d", &["a c b d"])]);
    assert!((r - 0.75).abs() <= 1e-9);
}

#[test]
fn bleu_matches_oracle_on_handpicked_corpus() {
    let raw = [
        ("the cat sat on the mat", vec!["the cat is on the mat", "there is a cat on the mat"]),
        ("the the the the", vec!["the cat", "a the"]),
        ("there are two cars to the front .", vec!["there are two cars and one truck to the front ."]),
        ("a", vec!["a b c d e"]),
    ];
    let pairs: Vec<EvalPair> = raw.iter().map(|(p, r)| pair(p, r)).collect();
    let tok: Vec<(Vec<String>, Vec<Vec<String>>)> =
        pairs.iter().map(|p| (p.prediction.clone(), p.references.clone())).collect();
    let want = bleu_oracle(&tok);
    assert!((bleu4(&pairs) - want).abs() <= 1e-9, "{} vs {want}", bleu4(&pairs));
    assert!(want > 0.0 && want < 1.0);
}

#[test]
fn scores_bundle_exact_match() {
    let pairs = vec![pair("a b", &["a b"]), pair("a c", &["a b"]), pair("x y z", &["x y z"])];
    let s = score(&pairs).unwrap();
    assert!((s.exact_match - 2.0 / 3.0).abs() < 1e-12);
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "b", "c", "car", "cars", "the", "to", "left", "."]).prop_map(String::from)
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(word(), 1..9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bleu_agrees_with_oracle(corpus in prop::collection::vec((sentence(), prop::collection::vec(sentence(), 1..3)), 1..6)) {
        let pairs: Vec<EvalPair> = corpus
            .iter()
            .map(|(p, rs)| EvalPair { prediction: p.clone(), references: rs.clone(), category: None })
            .collect();
        let got = bleu4(&pairs);
        let want = bleu_oracle(&corpus);
        prop_assert!((got - want).abs() <= 1e-9, "{} vs {}", got, want);
    }

    #[test]
    fn metrics_ignore_corpus_order(corpus in prop::collection::vec((sentence(), sentence()), 2..6), rot in 0usize..6) {
        let pairs: Vec<EvalPair> = corpus
            .iter()
            .map(|(p, r)| EvalPair { prediction: p.clone(), references: vec![r.clone()], category: None })
            .collect();
        let mut shuffled = pairs.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        prop_assert!((bleu4(&pairs) - bleu4(&shuffled)).abs() <= 1e-12);
        prop_assert!((rouge_l(&pairs) - rouge_l(&shuffled)).abs() <= 1e-12);
        prop_assert!((meteor(&pairs) - meteor(&shuffled)).abs() <= 1e-12);
        prop_assert!((cider(&pairs).unwrap() - cider(&shuffled).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn scores_stay_in_range(corpus in prop::collection::vec((sentence(), sentence()), 2..6)) {
        let pairs: Vec<EvalPair> = corpus
            .iter()
            .map(|(p, r)| EvalPair { prediction: p.clone(), references: vec![r.clone()], category: None })
            .collect();
        for v in [bleu4(&pairs), rouge_l(&pairs), meteor(&pairs)] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
        let c = cider(&pairs).unwrap();
        prop_assert!((0.0..=10.0 + 1e-9).contains(&c));
    }
}
