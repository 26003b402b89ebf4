//! Frozen posterior-predictive scoring of unseen text.
//!
//! Predictive probabilities come from a snapshot of the restaurant counts
//! and are never updated while scoring. Unigram sentences are marginalised
//! by a forward pass over positions; bigram sentences over states
//! `(position, length of the last segment)`.

use super::base::{BaseDist, Token};
use super::crp::{Counts, Hyper, ModelKind};
use crate::lattice::Segmentation;
use crate::numeric::log_sum_exp;

#[derive(Clone, Debug)]
pub struct Predictor {
    pub hyper: Hyper,
    base: BaseDist,
    counts: Counts,
}

impl Predictor {
    pub(crate) fn new(hyper: Hyper, base: BaseDist, counts: Counts) -> Self {
        Self { hyper, base, counts }
    }

    pub fn log_pred(&self, prev: &Token, w: &Token) -> f64 {
        self.counts.log_pred(&self.hyper, &self.base, prev, w)
    }

    fn word(ids: &[u32]) -> Token {
        Token::Word(ids.to_vec())
    }

    /// Total held-out log-likelihood; segments longer than `max_len` are
    /// excluded.
    pub fn heldout_loglik(&self, sentences: &[Vec<u32>], max_len: usize) -> f64 {
        sentences.iter().map(|s| self.sentence_loglik(s, max_len)).sum()
    }

    pub fn sentence_loglik(&self, ids: &[u32], max_len: usize) -> f64 {
        self.dp(ids, max_len, false).0
    }

    /// Most probable segmentation under the frozen predictive.
    pub fn map_segment(&self, ids: &[u32], max_len: usize) -> Segmentation {
        self.dp(ids, max_len, true).1.expect("viterbi pass yields a path")
    }

    fn dp(&self, ids: &[u32], max_len: usize, viterbi: bool) -> (f64, Option<Segmentation>) {
        let n = ids.len();
        let cap = max_len.max(1);
        let combine = |xs: &[f64]| {
            if viterbi {
                xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            } else {
                log_sum_exp(xs)
            }
        };
        match self.hyper.kind {
            ModelKind::Unigram => {
                // alpha[t]: all segmentations of ids[..t]
                let mut alpha = vec![f64::NEG_INFINITY; n + 1];
                let mut back = vec![0usize; n + 1];
                alpha[0] = 0.0;
                for t in 1..=n {
                    let mut terms = Vec::new();
                    let mut best = (f64::NEG_INFINITY, 0);
                    for j in t.saturating_sub(cap)..t {
                        let v = alpha[j] + self.log_pred(&Token::Start, &Self::word(&ids[j..t]));
                        if v > best.0 {
                            best = (v, j);
                        }
                        terms.push(v);
                    }
                    alpha[t] = combine(&terms);
                    back[t] = best.1;
                }
                let total = alpha[n] + self.log_pred(&Token::Start, &Token::End);
                let seg = viterbi.then(|| {
                    let mut ends = vec![n];
                    let mut t = n;
                    while back[t] > 0 {
                        t = back[t];
                        ends.push(t);
                    }
                    ends.reverse();
                    Segmentation::from_ends(ends).expect("increasing ends")
                });
                (total, seg)
            }
            ModelKind::Bigram => {
                // alpha[t][k]: segmentations of ids[..t] whose last segment has length k
                let mut alpha = vec![vec![f64::NEG_INFINITY; cap + 1]; n + 1];
                let mut back = vec![vec![0usize; cap + 1]; n + 1];
                for t in 1..=n {
                    for k in 1..=cap.min(t) {
                        let w = Self::word(&ids[t - k..t]);
                        let j = t - k;
                        if j == 0 {
                            alpha[t][k] = self.log_pred(&Token::Start, &w);
                            continue;
                        }
                        let mut terms = Vec::new();
                        let mut best = (f64::NEG_INFINITY, 0);
                        for kp in 1..=cap.min(j) {
                            if alpha[j][kp] == f64::NEG_INFINITY {
                                continue;
                            }
                            let v = alpha[j][kp] + self.log_pred(&Self::word(&ids[j - kp..j]), &w);
                            if v > best.0 {
                                best = (v, kp);
                            }
                            terms.push(v);
                        }
                        alpha[t][k] = combine(&terms);
                        back[t][k] = best.1;
                    }
                }
                let mut terms = Vec::new();
                let mut best = (f64::NEG_INFINITY, 0);
                for k in 1..=cap.min(n) {
                    if alpha[n][k] == f64::NEG_INFINITY {
                        continue;
                    }
                    let v = alpha[n][k] + self.log_pred(&Self::word(&ids[n - k..n]), &Token::End);
                    if v > best.0 {
                        best = (v, k);
                    }
                    terms.push(v);
                }
                let total = combine(&terms);
                let seg = viterbi.then(|| {
                    let mut ends = vec![n];
                    let (mut t, mut k) = (n, best.1);
                    while t - k > 0 {
                        let kp = back[t][k];
                        t -= k;
                        k = kp;
                        ends.push(t);
                    }
                    ends.reverse();
                    Segmentation::from_ends(ends).expect("increasing ends")
                });
                (total, seg)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::Sampler;
    use crate::numeric::rng::seeded;

    fn trained(kind: ModelKind) -> Predictor {
        let hyper = Hyper {
            kind,
            alpha0: 1.5,
            alpha1: 2.5,
            p_end: 0.2,
            p_continue: 0.4,
        };
        let corpus = vec![vec![0, 1, 2, 0, 1], vec![2, 2, 0], vec![1, 0, 1, 2]];
        let mut rng = seeded(4);
        let mut s = Sampler::new(hyper, 3, corpus, &mut rng).unwrap();
        for _ in 0..5 {
            s.sweep(1.0, &mut rng).unwrap();
        }
        s.predictor()
    }

    /// Every segmentation with segments of length ≤ cap, scored directly.
    fn enumerate(p: &Predictor, ids: &[u32], cap: usize) -> Vec<(f64, Vec<usize>)> {
        let n = ids.len();
        let mut out = Vec::new();
        for mask in 0u32..(1 << (n - 1)) {
            let mut ends: Vec<usize> = (0..n - 1).filter(|i| mask >> i & 1 == 1).map(|i| i + 1).collect();
            ends.push(n);
            let mut start = 0;
            let mut prev = Token::Start;
            let mut lp = 0.0;
            let mut ok = true;
            for e in &ends {
                if e - start > cap {
                    ok = false;
                }
                let w = Token::Word(ids[start..*e].to_vec());
                lp += p.log_pred(&prev, &w);
                prev = w;
                start = *e;
            }
            if ok {
                lp += p.log_pred(&prev, &Token::End);
                out.push((lp, ends));
            }
        }
        out
    }

    #[test]
    fn forward_matches_enumeration() {
        for kind in [ModelKind::Unigram, ModelKind::Bigram] {
            let p = trained(kind);
            for ids in [vec![0u32], vec![0, 1], vec![2, 0, 1, 1, 0, 2, 1, 0], vec![1, 1, 1, 0, 2]] {
                for cap in [2, 3, 8] {
                    let all = enumerate(&p, &ids, cap);
                    let lps: Vec<f64> = all.iter().map(|x| x.0).collect();
                    let exact = log_sum_exp(&lps);
                    let got = p.sentence_loglik(&ids, cap);
                    assert!((got - exact).abs() <= 1e-8 * exact.abs().max(1.0), "{kind:?} {got} {exact}");
                    let best = all.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
                    let path = p.map_segment(&ids, cap);
                    let score = all.iter().find(|x| x.1 == path.ends()).unwrap().0;
                    assert!((score - best).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_character_and_empty() {
        let p = trained(ModelKind::Unigram);
        let a = Token::Word(vec![0]);
        let direct = p.log_pred(&Token::Start, &a) + p.log_pred(&a, &Token::End);
        assert!((p.sentence_loglik(&[0], 4) - direct).abs() < 1e-12);
        assert_eq!(p.heldout_loglik(&[], 4), 0.0);
    }
}
