mod common;

use common::metric_fixture::*;
use isr_core::metrics::{bleu_n, cider, cider_per_sample, evaluate, ngram_precision, rouge_l};
use proptest::prelude::*;

#[test]
fn bleu_matches_counting_oracle() {
    let (c, r) = bleu_fixture();
    for n in 1..=4 {
        let got = bleu_n(&c, &r, n).unwrap();
        assert!((got - BLEU[n - 1]).abs() < 1e-12, "bleu{n}: {got}");
    }
}

#[test]
fn rouge_matches_lcs_oracle() {
    let (c, r) = bleu_fixture();
    assert!((rouge_l(&c, &r).unwrap() - ROUGE_L).abs() < 1e-12);
}

#[test]
fn cider_matches_tfidf_oracle() {
    let (c, r) = cider_fixture();
    for (got, want) in cider_per_sample(&c, &r, false).unwrap().iter().zip(CIDER_PER_SAMPLE) {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
    assert!((cider(&c, &r, false).unwrap() - CIDER).abs() < 1e-9);
}

#[test]
fn cider_prefers_the_reference_itself() {
    let (_, r) = cider_fixture();
    let exact: Vec<Vec<String>> = r.iter().map(|rs| rs[0].clone()).collect();
    let mut perturbed = exact.clone();
    perturbed[0][1] = "woman".into();
    let s_exact = cider_per_sample(&exact, &r, false).unwrap();
    let s_pert = cider_per_sample(&perturbed, &r, false).unwrap();
    assert!(s_exact[0] > s_pert[0]);

    let (c, r) = corpus(&["all of this is mine"], &[&["all of this is mine"]]);
    let same = cider(&c, &r, false).unwrap();
    let (c2, _) = corpus(&["none of that is yours"], &[&[]]);
    assert!(same >= cider(&c2, &r, false).unwrap());
}

#[test]
fn report_collects_everything() {
    let (c, r) = bleu_fixture();
    let rep = evaluate(&c, &r, false).unwrap();
    assert_eq!(rep.samples.len(), 3);
    assert!((rep.bleu[3] - BLEU[3]).abs() < 1e-12);
    assert!((rep.rouge_l - ROUGE_L).abs() < 1e-12);
}

const WORDS: &[&str] = &["the", "a", "man", "cup", "red", "is", "holding", "on", "table", "it"];

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(WORDS), 1..9)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn random_corpus() -> impl Strategy<Value = Corpus> {
    prop::collection::vec((sentence(), prop::collection::vec(sentence(), 1..3)), 1..6)
        .prop_map(|v| v.into_iter().unzip())
}

/// Candidates copied from their first reference with a few words swapped,
/// so that higher-order matches are mostly nested in lower-order ones.
fn near_copy_corpus() -> impl Strategy<Value = Corpus> {
    prop::collection::vec(
        (sentence(), prop::collection::vec((0usize..9, prop::sample::select(WORDS)), 0..3)),
        1..6,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(r, edits)| {
                let mut c = r.clone();
                for (i, w) in edits {
                    let n = c.len();
                    c[i % n] = w.to_string();
                }
                (c, vec![r])
            })
            .unzip()
    })
}

proptest! {
    #[test]
    fn scores_ignore_corpus_order((c, r) in random_corpus(), rot in 0usize..6) {
        let k = rot % c.len();
        let (mut c2, mut r2) = (c.clone(), r.clone());
        c2.rotate_left(k);
        r2.rotate_left(k);
        for n in 1..=4 {
            prop_assert!((bleu_n(&c, &r, n).unwrap() - bleu_n(&c2, &r2, n).unwrap()).abs() < 1e-12);
        }
        prop_assert!((rouge_l(&c, &r).unwrap() - rouge_l(&c2, &r2).unwrap()).abs() < 1e-12);
        prop_assert!((cider(&c, &r, false).unwrap() - cider(&c2, &r2, false).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn scores_stay_in_range((c, r) in random_corpus(), dampened in any::<bool>()) {
        let rep = evaluate(&c, &r, dampened).unwrap();
        for b in rep.bleu {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
        }
        prop_assert!((0.0..=1.0 + 1e-12).contains(&rep.rouge_l));
        prop_assert!(rep.cider >= 0.0 && rep.cider.is_finite());
    }

    #[test]
    fn bleu_non_increasing_when_precisions_are((c, r) in near_copy_corpus()) {
        let p: Vec<f64> = (1..=4).map(|n| ngram_precision(&c, &r, n).unwrap()).collect();
        let nested = p.windows(2).all(|w| w[1] <= w[0]);
        prop_assume!(nested);
        for n in (1..4).filter(|&n| p[n] > 0.0) {
            prop_assert!(bleu_n(&c, &r, n + 1).unwrap() <= bleu_n(&c, &r, n).unwrap() + 1e-12);
        }
    }
}
