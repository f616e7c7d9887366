use super::*;
use proptest::prelude::*;

fn toks(s: &str) -> Vec<String> {
    eval_tokens(s)
}

/// LCS by trying every subsequence of the shorter sequence.
fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let is_subseq = |sub: &[u8]| {
        let mut it = long.iter();
        sub.iter().all(|x| it.any(|y| y == x))
    };
    (0u32..1 << short.len())
        .filter_map(|mask| {
            let sub: Vec<u8> = (0..short.len())
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| short[i])
                .collect();
            is_subseq(&sub).then_some(sub.len())
        })
        .max()
        .unwrap_or(0)
}

#[test]
fn rouge_fixtures() {
    let p = rouge_n(&toks("a b c"), &toks("a b d"), 1).unwrap();
    assert!((p.precision - 2.0 / 3.0).abs() < 1e-12 && (p.recall - 2.0 / 3.0).abs() < 1e-12);
    assert!((p.f1 - 2.0 / 3.0).abs() < 1e-12);
    // bigrams: {a b, b c} vs {a b, b d}
    let p = rouge_n(&toks("a b c"), &toks("a b d"), 2).unwrap();
    assert!((p.f1 - 0.5).abs() < 1e-12);
    let l = rouge_l(&toks("a c"), &toks("a b c")).unwrap();
    assert_eq!(l.precision, 1.0);
    assert!((l.recall - 2.0 / 3.0).abs() < 1e-12 && (l.f1 - 0.8).abs() < 1e-12);
    assert_eq!(lcs_len(&[1, 2, 3, 4, 5], &[5, 4, 3, 2, 1]), 1);
    // clipping: "the the the" vs "the cat"
    let p = rouge_n(&toks("The the THE"), &toks("the cat"), 1).unwrap();
    assert!((p.precision - 1.0 / 3.0).abs() < 1e-12 && (p.recall - 0.5).abs() < 1e-12);
}

#[test]
fn rouge_edges() {
    let a = toks("x y z");
    assert_eq!(rouge_n(&a, &a, 2).unwrap().f1, 1.0);
    assert_eq!(rouge_l(&a, &a).unwrap().f1, 1.0);
    assert_eq!(rouge_n(&a, &toks("p q"), 1).unwrap().f1, 0.0);
    assert_eq!(rouge_l(&a, &toks("p q")).unwrap().f1, 0.0);
    assert!(rouge_n(&a, &[], 1).is_err());
    assert!(rouge_l(&a, &[]).is_err());
    assert!(rouge_n(&a, &a, 0).is_err());
    assert_eq!(rouge_n(&[], &a, 1).unwrap(), Prf::default());
}

#[test]
fn bleu_hand_count() {
    // candidate 1: "the cat sat on the mat" vs "the cat is on the mat"
    //   1-grams 5/6, 2-grams 3/5 (the cat, on the, the mat), 3-grams 1/4, 4-grams 0/3
    // candidate 2: "a dog runs" vs "a dog runs fast"
    //   1-grams 3/3, 2-grams 2/2, 3-grams 1/1, 4-grams 0/0
    let cands = [toks("the cat sat on the mat"), toks("a dog runs")];
    let refs = [toks("the cat is on the mat"), toks("a dog runs fast")];
    let s = corpus_bleu(&cands, &refs, 4).unwrap();
    assert_eq!(s.precisions[3], 0.0);
    assert_eq!(s.bleu, 0.0);
    let s = corpus_bleu(&cands, &refs, 3).unwrap();
    let p = [8.0 / 9.0, 5.0 / 7.0, 2.0 / 5.0];
    let bp = (1.0f64 - 10.0 / 9.0).exp();
    let want = 100.0 * bp * (p.iter().map(|x: &f64| x.ln()).sum::<f64>() / 3.0).exp();
    assert!((s.bleu - want).abs() < 1e-10, "{} vs {want}", s.bleu);
    assert!((s.brevity_penalty - bp).abs() < 1e-15);
    assert_eq!((s.candidate_length, s.reference_length), (9, 10));
}

#[test]
fn bleu_edges() {
    let c = [toks("one two three four five")];
    assert!((corpus_bleu(&c, &c, 4).unwrap().bleu - 100.0).abs() < 1e-12);
    assert_eq!(
        corpus_bleu(&c, &[toks("six seven eight nine ten")], 4)
            .unwrap()
            .bleu,
        0.0
    );
    let empty: [Vec<String>; 0] = [];
    assert!(corpus_bleu(&empty, &empty, 4).is_err());
    assert!(corpus_bleu(&c, &[toks("a"), toks("b")], 4).is_err());
}

proptest! {
    #[test]
    fn lcs_matches_enumeration(a in prop::collection::vec(0u8..4, 0..9), b in prop::collection::vec(0u8..4, 0..9)) {
        prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
    }

    #[test]
    fn rouge_n_swaps_precision_and_recall(a in prop::collection::vec(0u8..5, 1..12), b in prop::collection::vec(0u8..5, 1..12), n in 1usize..3) {
        let x = rouge_n(&a, &b, n).unwrap();
        let y = rouge_n(&b, &a, n).unwrap();
        prop_assert!((x.precision - y.recall).abs() < 1e-12);
        prop_assert!((x.recall - y.precision).abs() < 1e-12);
    }

    #[test]
    fn bleu_ignores_corpus_order(pairs in prop::collection::vec((prop::collection::vec(0u8..4, 1..10), prop::collection::vec(0u8..4, 1..10)), 1..6), rot in 0usize..6) {
        let (c, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let k = rot % c.len();
        let (mut c2, mut r2) = (c.clone(), r.clone());
        c2.rotate_left(k);
        r2.rotate_left(k);
        let (s1, s2) = (corpus_bleu(&c, &r, 4).unwrap(), corpus_bleu(&c2, &r2, 4).unwrap());
        prop_assert!((s1.bleu - s2.bleu).abs() < 1e-9);
        prop_assert!(s1.bleu >= 0.0 && s1.bleu <= 100.0 + 1e-9);
    }
}

#[test]
fn report_selects_metrics() {
    let c = ["The cat sat", "a b"];
    let r = ["the cat sat", "a c"];
    let rep = evaluate(&c, &r, &[Metric::Rouge]).unwrap();
    assert!(rep.bleu.is_none());
    assert!((rep.rouge1.unwrap().f1 - 0.75).abs() < 1e-12);
    let json = serde_json::to_string(&rep).unwrap();
    assert!(json.contains("\"rougeL\""));
    let rep = evaluate(&c, &r, &[Metric::Bleu]).unwrap();
    assert!(rep.rouge1.is_none() && rep.bleu.is_some());
    assert!(evaluate(&c, &r[..1], &[Metric::Bleu]).is_err());
}
