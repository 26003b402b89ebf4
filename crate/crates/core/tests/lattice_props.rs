mod common;

use common::{compositions, enumerate_spans, rel_err};
use proptest::prelude::*;
use seglm_core::lattice::{expected_length_penalty, map_segmentation, marginal_loglik, Lattice, Segmentation, SegmentTable};

/// Random log-scores for every span of a sentence of length `n`.
fn table(n: usize, l: usize, scores: &[f64], terminal: f64) -> SegmentTable<f64> {
    let mut t = SegmentTable::new(n, l);
    let mut k = 0;
    for j in 0..n {
        for len in 1..=l.min(n - j) {
            t.set(j, len, scores[k % scores.len()]);
            k += 1;
        }
    }
    t.set_terminal(terminal);
    t
}

fn arb_table() -> impl Strategy<Value = (SegmentTable<f64>, f64)> {
    (1usize..=9, 1usize..=5, prop::collection::vec(-8.0f64..0.0, 1..60), -3.0f64..0.0, 0.5f64..3.0)
        .prop_map(|(n, l, s, term, beta)| (table(n, l, &s, term), beta))
}

proptest! {
    #[test]
    fn forward_matches_enumeration((t, beta) in arb_table()) {
        let want = enumerate_spans(t.len(), t.max_len(), |j, len| *t.get(j, len).unwrap(), *t.terminal().unwrap(), beta);
        prop_assert!(rel_err(marginal_loglik(&t), want.log_likelihood) < 1e-10);
        let (seg, score) = map_segmentation(&t);
        prop_assert!(rel_err(score, want.best_score) < 1e-10);
        prop_assert!(seg.max_segment_len() <= t.max_len());
        let (_, r) = expected_length_penalty(&t, beta);
        prop_assert!(rel_err(r, want.penalty) < 1e-10);
    }

    #[test]
    fn viterbi_is_bounded_by_the_marginal((t, _) in arb_table()) {
        let (_, best) = map_segmentation(&t);
        let ll = marginal_loglik(&t);
        prop_assert!(best <= ll + 1e-12);
        // at most |compositions| paths share the mass
        let paths = compositions(t.len(), t.max_len()).len() as f64;
        prop_assert!(ll <= best + paths.ln() + 1e-12);
    }

    #[test]
    fn penalty_lies_between_extreme_paths((t, beta) in arb_table()) {
        let (_, r) = expected_length_penalty(&t, beta);
        let costs: Vec<f64> = compositions(t.len(), t.max_len())
            .iter()
            .map(|ends| {
                let mut start = 0;
                ends.iter().map(|&e| { let c = ((e - start) as f64).powf(beta); start = e; c }).sum()
            })
            .collect();
        let lo = costs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(r >= lo - 1e-9 && r <= hi + 1e-9);
    }

    #[test]
    fn terminal_shifts_every_path_equally((t, beta) in arb_table(), shift in -2.0f64..0.0) {
        let mut moved = t.clone();
        moved.set_terminal(t.terminal().unwrap() + shift);
        prop_assert!((marginal_loglik(&moved) - marginal_loglik(&t) - shift).abs() < 1e-10);
        prop_assert_eq!(map_segmentation(&moved).0, map_segmentation(&t).0);
        let a = Lattice::forward(&t, beta).penalty();
        let b = Lattice::forward(&moved, beta).penalty();
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn rendering_round_trips(chars in prop::collection::vec(prop::char::range('a', 'e'), 1..12), cuts in prop::collection::vec(any::<bool>(), 11)) {
        let boundaries: Vec<usize> = (1..chars.len()).filter(|k| cuts[k - 1]).collect();
        let seg = Segmentation::from_boundaries(&boundaries, chars.len()).unwrap();
        let line = seg.render(&chars);
        let (back_chars, back) = Segmentation::parse_line(&line).unwrap();
        prop_assert_eq!(back_chars, chars);
        prop_assert_eq!(back, seg);
    }
}

#[test]
fn ties_prefer_the_shorter_final_segment() {
    // score -len per span: every path scores -n, so all tie
    let mut flat = SegmentTable::new(5, 3);
    for j in 0..5 {
        for len in 1..=3.min(5 - j) {
            flat.set(j, len, -(len as f64));
        }
    }
    flat.set_terminal(0.0);
    assert_eq!(map_segmentation(&flat).0.ends(), &[1, 2, 3, 4, 5]);
    // score -1 per span: two-segment paths 3+2 and 2+3 tie
    let per_segment = table(5, 3, &[-1.0], -0.5);
    assert_eq!(map_segmentation(&per_segment).0.ends(), &[3, 5]);
}
