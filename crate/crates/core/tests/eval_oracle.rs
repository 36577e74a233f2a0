mod common;

use std::collections::HashSet;
use std::io::Cursor;

use common::{brute_force_matches, words};
use framewise::eval::{
    default_stopwords, load_embeddings, match_words, read_embeddings, score_batch, score_batch_sequential, score_text,
    EmbeddingStore, EvalError, Stage, TimingStats,
};
use proptest::prelude::*;

const FIXTURE: &str = "\
accident 0 1 0 0
road 0 0 1 0
busy 0 0 0 1
motorcycle 1 0 0 0
vehicles 0.5 0 0.5 0.5
happens 0 0.5 -0.5 0.1
crash 0 0.8 0.6 0
street 0.1 0 0.9 0.2
heavy 0.3 0.2 0.1 0.9
motorbike 0.9 0.3 0 0
cars 0.6 0 0.4 0.5
footage 0.1 0.1 0.1 0.1
trees 0 0 0.3 -1
video -1 0 0 0
";

fn store() -> EmbeddingStore {
    read_embeddings(Cursor::new(FIXTURE), None).unwrap()
}

const TRUTH: &str = "motorcycle accident happens busy road vehicles";
const GENERATED: &str = "video motorbike crash heavy street cars footage trees";

#[test]
fn six_by_eight_fixture_matches_exhaustive_oracle() {
    let s = store();
    let (g, t) = (words(GENERATED), words(TRUTH));
    // Hand-annotated counts: at 0.6 everything but "happens" finds a partner;
    // at 0.85 accident/crash (0.8) drops; at 0.95 only road/street and
    // vehicles/cars remain.
    for (thr, expected) in [(0.6, 5), (0.85, 4), (0.95, 2)] {
        let r = match_words(&g, &t, &s, thr).unwrap();
        let oracle = brute_force_matches(&g, &t, &s, thr);
        assert_eq!(oracle, expected, "oracle at {thr}");
        assert_eq!(r.matched, oracle, "greedy at {thr}");
        assert_eq!(r.percentage, 100.0 * oracle as f64 / t.len() as f64);
    }
}

#[test]
fn greedy_can_fall_short_of_the_optimum() {
    // t1 prefers g1, and t2 can only use g1. Greedy in reference order takes
    // g1 for t1 and leaves t2 unmatched; the optimum pairs t1-g2, t2-g1.
    let s = EmbeddingStore::from_vectors([
        ("t1", vec![1.0, 0.0, 0.0, 0.0]),
        ("t2", vec![0.0, 1.0, 0.0, 0.0]),
        ("g1", vec![1.0, 1.0, 0.0, 0.0]),
        ("g2", vec![1.0, 0.0, 1.2, 0.0]),
    ])
    .unwrap();
    let (g, t) = (words("g1 g2"), words("t1 t2"));
    let r = match_words(&g, &t, &s, 0.6).unwrap();
    assert_eq!(r.matched, 1);
    assert_eq!(brute_force_matches(&g, &t, &s, 0.6), 2);
}

#[test]
fn threshold_is_strict() {
    let c = 0.6f64 + 1e-6;
    let s = EmbeddingStore::from_vectors([
        ("base", vec![1.0, 0.0, 0.0, 0.0]),
        ("exact", vec![3.0, 4.0, 0.0, 0.0]),
        ("above", vec![c, (1.0 - c * c).sqrt(), 0.0, 0.0]),
    ])
    .unwrap();
    let exact = match_words(&words("exact"), &words("base"), &s, 0.6).unwrap();
    assert_eq!(exact.matched, 0);
    let above = match_words(&words("above"), &words("base"), &s, 0.6).unwrap();
    assert_eq!(above.matched, 1);
    assert!(above.pairs[0].cosine > 0.6);
}

#[test]
fn reference_caption_tokens() {
    let toks = framewise::eval::preprocess(
        "A motorcycle accident happens on a busy road with many vehicles.",
        default_stopwords(),
    );
    assert_eq!(toks, words("motorcycle accident happens busy road many vehicles"));
}

#[test]
fn loader_reports_dimension_line_and_restricts() {
    let err = read_embeddings(Cursor::new("a 1 2 3\nb 1 2 3 4\n"), None).unwrap_err();
    assert!(matches!(
        err,
        EvalError::Dimension {
            line: 2,
            expected: 3,
            found: 4
        }
    ));
    let keep: HashSet<String> = ["road", "crash", "nonexistent"].iter().map(|s| s.to_string()).collect();
    let s = read_embeddings(Cursor::new(FIXTURE), Some(&keep)).unwrap();
    assert_eq!(s.len(), 2);
    let path = common::fixtures().join("eval/embeddings.txt");
    assert_eq!(load_embeddings(&path, None).unwrap().dim(), 4);
}

#[test]
fn batch_paths_agree_on_fixture_pairs() {
    let s = load_embeddings(&common::fixtures().join("eval/embeddings.txt"), None).unwrap();
    let mut rdr = csv::Reader::from_path(common::fixtures().join("eval/pairs.csv")).unwrap();
    let pairs: Vec<(String, String)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].to_string())
        })
        .collect();
    let par = score_batch(&pairs, &s, default_stopwords(), 0.6).unwrap();
    let seq = score_batch_sequential(&pairs, &s, default_stopwords(), 0.6).unwrap();
    assert_eq!(par, seq);
    let mean = par.results.iter().map(|r| r.percentage).sum::<f64>() / par.results.len() as f64;
    assert_eq!(par.mean_percentage, mean);
    for ((g, t), r) in pairs.iter().zip(&par.results) {
        let pre = |x: &str| framewise::eval::preprocess(x, default_stopwords());
        assert_eq!(
            r.matched,
            score_text(g, t, &s, default_stopwords(), 0.6).unwrap().matched
        );
        assert!(r.matched <= brute_force_matches(&pre(g), &pre(t), &s, 0.6));
    }
}

#[test]
fn timing_stats_match_independent_sums() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    let xs: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..12.0)).collect();
    let mut stats = TimingStats::default();
    for &x in &xs {
        stats.record(Stage::Vision, x).unwrap();
    }
    let mut sorted = xs.clone();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted.iter().sum();
    let v = stats.stage(Stage::Vision);
    assert_eq!(v.count, 1000);
    assert!((v.mean_s - total / 1000.0).abs() < 1e-9);
    assert_eq!(v.min_s, sorted[0]);
    assert_eq!(v.max_s, sorted[999]);
}

type Case = (Vec<(String, Vec<f64>)>, Vec<String>, Vec<String>);

fn arb_case() -> impl Strategy<Value = Case> {
    let vocab = 8usize;
    (
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), vocab),
        prop::collection::vec(0usize..vocab + 3, 0..8),
        prop::collection::vec(0usize..vocab + 3, 1..8),
    )
        .prop_map(move |(vecs, g, t)| {
            let vectors = vecs
                .into_iter()
                .enumerate()
                .map(|(i, mut v)| {
                    if v.iter().all(|x| *x == 0.0) {
                        v[0] = 1.0;
                    }
                    (format!("w{i}"), v)
                })
                .collect();
            // Indices past the vocabulary are out-of-store tokens.
            let name = |i: usize| format!("w{i}");
            (
                vectors,
                g.into_iter().map(name).collect(),
                t.into_iter().map(name).collect(),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn bounds_and_monotonicity((vectors, g, t) in arb_case(), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let s = EmbeddingStore::from_vectors(vectors).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let r_lo = match_words(&g, &t, &s, lo).unwrap();
        let r_hi = match_words(&g, &t, &s, hi).unwrap();
        for r in [&r_lo, &r_hi] {
            prop_assert!(r.percentage >= 0.0 && r.percentage <= 100.0);
            prop_assert!(r.matched <= r.ground_truth_count);
            prop_assert_eq!(r.percentage, 100.0 * r.matched as f64 / t.len() as f64);
            prop_assert_eq!(r.matched, r.pairs.len());
        }
        prop_assert!(r_hi.matched <= r_lo.matched);
        prop_assert!(r_lo.pairs.iter().all(|p| p.cosine > lo));
        // Greedy yields a maximal matching, so it is within half of optimal.
        let opt = brute_force_matches(&g, &t, &s, lo);
        prop_assert!(r_lo.matched <= opt && 2 * r_lo.matched >= opt);
    }
}
