//! Semi-Markov dynamic programs over one sentence.
//!
//! Every routine consumes a [`SegmentTable`] holding the log-probability of
//! each candidate segment `x[j..j+len]` (`1 ≤ len ≤ max_len`) given the
//! history at `j`, plus the log-probability of the terminal event after the
//! last character. Forward sums run in log space; the expected powered
//! length rides along as a normalised linear-space statistic so that a
//! single pass yields both `log p(x)` and `R(x, β)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, Graph, NodeId};

/// Log-scores for every segment of length `1..=max_len` starting at each
/// position, plus the terminal event. `None` marks an impossible segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentTable<T> {
    n: usize,
    max_len: usize,
    cells: Vec<Option<T>>,
    terminal: Option<T>,
}

impl<T> SegmentTable<T> {
    pub fn new(n: usize, max_len: usize) -> Self {
        assert!(max_len >= 1, "segments need length ≥ 1");
        Self {
            n,
            max_len,
            cells: std::iter::repeat_with(|| None).take(n * max_len).collect(),
            terminal: None,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    fn slot(&self, start: usize, len: usize) -> Option<usize> {
        (len >= 1 && len <= self.max_len && start + len <= self.n)
            .then(|| start * self.max_len + len - 1)
    }

    pub fn set(&mut self, start: usize, len: usize, value: T) {
        let i = self
            .slot(start, len)
            .unwrap_or_else(|| panic!("segment {start}+{len} outside table"));
        self.cells[i] = Some(value);
    }

    pub fn get(&self, start: usize, len: usize) -> Option<&T> {
        self.slot(start, len).and_then(|i| self.cells[i].as_ref())
    }

    pub fn set_terminal(&mut self, value: T) {
        self.terminal = Some(value);
    }

    pub fn terminal(&self) -> Option<&T> {
        self.terminal.as_ref()
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> SegmentTable<U> {
        SegmentTable {
            n: self.n,
            max_len: self.max_len,
            cells: self.cells.iter().map(|c| c.as_ref().map(&mut f)).collect(),
            terminal: self.terminal.as_ref().map(f),
        }
    }
}

/// Segment boundaries: strictly increasing end offsets, the last equal to
/// the sentence length.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Segmentation {
    ends: Vec<usize>,
}

impl Segmentation {
    pub fn from_ends(ends: Vec<usize>) -> Result<Self> {
        if ends.is_empty() || ends[0] == 0 || ends.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!("bad segment ends {ends:?}")));
        }
        Ok(Self { ends })
    }

    /// From interior boundary offsets (each in `1..n`) and the length `n`.
    pub fn from_boundaries(boundaries: &[usize], n: usize) -> Result<Self> {
        let mut ends: Vec<usize> = boundaries.to_vec();
        ends.sort_unstable();
        ends.dedup();
        if ends.iter().any(|b| *b == 0 || *b >= n) {
            return Err(Error::Invalid(format!(
                "boundaries {boundaries:?} outside 1..{n}"
            )));
        }
        ends.push(n);
        Self::from_ends(ends)
    }

    pub fn whole(n: usize) -> Self {
        Self { ends: vec![n] }
    }

    pub fn len(&self) -> usize {
        *self.ends.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn ends(&self) -> &[usize] {
        &self.ends
    }

    /// Interior boundaries, i.e. all ends except the final one.
    pub fn boundaries(&self) -> &[usize] {
        &self.ends[..self.ends.len() - 1]
    }

    pub fn num_segments(&self) -> usize {
        self.ends.len()
    }

    /// `(start, end)` half-open spans.
    pub fn spans(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        std::iter::once(0)
            .chain(self.ends.iter().copied())
            .zip(self.ends.iter().copied())
    }

    pub fn max_segment_len(&self) -> usize {
        self.spans().map(|(a, b)| b - a).max().unwrap_or(0)
    }

    /// Segments joined by single spaces.
    pub fn render(&self, chars: &[char]) -> String {
        let mut out = String::new();
        for (i, (a, b)) in self.spans().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.extend(&chars[a..b]);
        }
        out
    }

    /// Parses a space-separated line back into characters and segmentation.
    pub fn parse_line(line: &str) -> Option<(Vec<char>, Segmentation)> {
        let mut chars = Vec::new();
        let mut ends = Vec::new();
        for tok in line.split_whitespace() {
            chars.extend(tok.chars());
            ends.push(chars.len());
        }
        if chars.is_empty() {
            return None;
        }
        Some((chars, Segmentation { ends }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    /// Exponent applied to segment lengths.
    pub beta: f64,
    /// Penalty weight.
    pub lambda: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            lambda: 0.0,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0 && self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Invalid(format!("bad regulariser {self:?}")));
        }
        Ok(())
    }
}

fn length_cost(len: usize, beta: f64) -> f64 {
    (len as f64).powf(beta)
}

/// All forward quantities for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    /// `alpha[t]`: log-probability of `x[..t]` ending a segment at `t`;
    /// `alpha[n+1]` includes the terminal event.
    pub alpha: Vec<f64>,
    /// Posterior expectation of `Σ|s|^β` over segmentations of `x[..t]`.
    pub expected: Vec<f64>,
    /// Max-product scores.
    pub best: Vec<f64>,
    /// Start of the best final segment ending at `t` (`t ≥ 1`).
    pub backpointer: Vec<usize>,
}

impl Lattice {
    pub fn forward(table: &SegmentTable<f64>, beta: f64) -> Self {
        let n = table.len();
        let l = table.max_len();
        let mut alpha = vec![f64::NEG_INFINITY; n + 2];
        let mut expected = vec![0.0; n + 2];
        let mut best = vec![f64::NEG_INFINITY; n + 2];
        let mut backpointer = vec![0; n + 2];
        alpha[0] = 0.0;
        best[0] = 0.0;
        let mut terms = Vec::with_capacity(l);
        for t in 1..=n {
            terms.clear();
            let lo = t.saturating_sub(l);
            // descending j so that ties keep the shorter final segment
            for j in (lo..t).rev() {
                let Some(s) = table.get(j, t - j) else { continue };
                if alpha[j] > f64::NEG_INFINITY {
                    terms.push((j, alpha[j] + s));
                }
                let cand = best[j] + s;
                if cand > best[t] {
                    best[t] = cand;
                    backpointer[t] = j;
                }
            }
            if terms.is_empty() {
                continue;
            }
            let vals: Vec<f64> = terms.iter().map(|(_, v)| *v).collect();
            let a = log_sum_exp(&vals);
            alpha[t] = a;
            expected[t] = terms
                .iter()
                .map(|(j, v)| (v - a).exp() * (expected[*j] + length_cost(t - j, beta)))
                .sum();
        }
        let term = table.terminal().copied().unwrap_or(f64::NEG_INFINITY);
        alpha[n + 1] = alpha[n] + term;
        expected[n + 1] = expected[n];
        best[n + 1] = best[n] + term;
        backpointer[n + 1] = n;
        Self {
            alpha,
            expected,
            best,
            backpointer,
        }
    }

    pub fn log_likelihood(&self) -> f64 {
        *self.alpha.last().unwrap()
    }

    pub fn penalty(&self) -> f64 {
        *self.expected.last().unwrap()
    }

    /// Follows backpointers from the end.
    pub fn best_segmentation(&self) -> (Segmentation, f64) {
        let n = self.alpha.len() - 2;
        let mut ends = Vec::new();
        let mut t = n;
        while t > 0 {
            ends.push(t);
            t = self.backpointer[t];
        }
        ends.reverse();
        (
            Segmentation { ends },
            *self.best.last().unwrap(),
        )
    }
}

/// `log p(x)` by the forward recursion.
pub fn marginal_loglik(table: &SegmentTable<f64>) -> f64 {
    Lattice::forward(table, 0.0).log_likelihood()
}

/// Most probable segmentation and its joint log-probability.
pub fn map_segmentation(table: &SegmentTable<f64>) -> (Segmentation, f64) {
    Lattice::forward(table, 0.0).best_segmentation()
}

/// `(log p(x), R(x, β))` from one expectation-semiring pass.
pub fn expected_length_penalty(table: &SegmentTable<f64>, beta: f64) -> (f64, f64) {
    let lat = Lattice::forward(table, beta);
    (lat.log_likelihood(), lat.penalty())
}

/// Graph nodes of a recorded training objective.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    /// `-log p(x) + λ R(x, β)`.
    pub loss: NodeId,
    pub log_likelihood: NodeId,
    pub penalty: Option<NodeId>,
}

/// Records `-log p(x) + λ R(x, β)` on `g` so gradients flow through both
/// the forward sums and the expectation statistic.
pub fn training_loss(
    g: &mut Graph<'_>,
    table: &SegmentTable<NodeId>,
    reg: RegConfig,
) -> Result<LossNodes> {
    reg.validate()?;
    let n = table.len();
    let l = table.max_len();
    let with_penalty = reg.lambda > 0.0;
    let zero = g.constant(0.0);
    let mut alpha: Vec<Option<NodeId>> = vec![None; n + 1];
    let mut expected: Vec<Option<NodeId>> = vec![None; n + 1];
    alpha[0] = Some(zero);
    expected[0] = Some(zero);
    for t in 1..=n {
        let mut terms = Vec::with_capacity(l);
        for j in t.saturating_sub(l)..t {
            let (Some(s), Some(a)) = (table.get(j, t - j), alpha[j]) else {
                continue;
            };
            terms.push((j, g.add(a, *s)?));
        }
        if terms.is_empty() {
            continue;
        }
        let nodes: Vec<NodeId> = terms.iter().map(|(_, n)| *n).collect();
        let a_t = g.log_sum_exp(&nodes);
        alpha[t] = Some(a_t);
        if with_penalty {
            let mut parts = Vec::with_capacity(terms.len());
            for (j, term) in &terms {
                let shifted = g.sub(*term, a_t)?;
                let w = g.exp(shifted);
                let r = expected[*j].expect("reachable prefix has an expectation");
                let r = g.add_const(r, length_cost(t - j, reg.beta));
                parts.push(g.mul(w, r)?);
            }
            expected[t] = Some(g.sum(&parts));
        }
    }
    let (Some(a_n), Some(term)) = (alpha[n], table.terminal()) else {
        return Err(Error::NonFinite("sentence has zero probability".into()));
    };
    let ll = g.add(a_n, *term)?;
    let nll = g.scale(ll, -1.0);
    let (loss, penalty) = if with_penalty {
        let r = expected[n].expect("reachable end has an expectation");
        let weighted = g.scale(r, reg.lambda);
        (g.add(nll, weighted)?, Some(r))
    } else {
        (nll, None)
    };
    if !g.scalar(loss).is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok(LossNodes {
        loss,
        log_likelihood: ll,
        penalty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Array, ParamStore};
    use rand::{Rng, SeedableRng};

    /// All segmentations with segment lengths ≤ `l`, by boundary bitmask.
    fn enumerate(n: usize, l: usize) -> Vec<Vec<(usize, usize)>> {
        let mut out = Vec::new();
        for mask in 0u32..(1 << (n - 1)) {
            let mut spans = Vec::new();
            let mut start = 0;
            for k in 1..=n {
                if k == n || mask & (1 << (k - 1)) != 0 {
                    spans.push((start, k));
                    start = k;
                }
            }
            if spans.iter().all(|(a, b)| b - a <= l) {
                out.push(spans);
            }
        }
        out
    }

    fn random_table(n: usize, l: usize, seed: u64) -> SegmentTable<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut t = SegmentTable::new(n, l);
        for j in 0..n {
            for len in 1..=l.min(n - j) {
                t.set(j, len, -rng.gen_range(0.1..4.0));
            }
        }
        t.set_terminal(-rng.gen_range(0.1..2.0));
        t
    }

    fn score(t: &SegmentTable<f64>, spans: &[(usize, usize)]) -> f64 {
        spans.iter().map(|(a, b)| t.get(*a, b - a).unwrap()).sum::<f64>() + t.terminal().unwrap()
    }

    #[test]
    fn single_character_sentence() {
        let mut t = SegmentTable::new(1, 3);
        t.set(0, 1, -1.5);
        t.set_terminal(-0.25);
        assert_eq!(marginal_loglik(&t), -1.75);
        let (seg, s) = map_segmentation(&t);
        assert_eq!(seg.ends(), &[1]);
        assert_eq!(s, -1.75);
        assert_eq!(expected_length_penalty(&t, 0.0).1, 1.0);
    }

    #[test]
    fn forward_matches_enumeration() {
        for (n, l, seed) in [(5, 2, 1), (7, 3, 2), (8, 8, 3), (10, 4, 4)] {
            let t = random_table(n, l, seed);
            let all = enumerate(n, l);
            let scores: Vec<f64> = all.iter().map(|s| score(&t, s)).collect();
            let lse = log_sum_exp(&scores);
            let (ll, r) = expected_length_penalty(&t, 2.0);
            assert!((ll - lse).abs() < 1e-10 * lse.abs());
            let r_ref: f64 = all
                .iter()
                .zip(&scores)
                .map(|(s, v)| (v - lse).exp() * s.iter().map(|(a, b)| ((b - a) as f64).powi(2)).sum::<f64>())
                .sum();
            assert!((r - r_ref).abs() < 1e-10 * r_ref);
            let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (seg, s) = map_segmentation(&t);
            assert!((s - best).abs() < 1e-12);
            assert!(seg.max_segment_len() <= l);
        }
    }

    #[test]
    fn constant_per_character_scores_count_segmentations() {
        // each segmentation of length n scores n·a + term, so the marginal is
        // log(count) + n·a + term
        let (n, l, a, term) = (9, 3, -0.7, -0.2);
        let mut t = SegmentTable::new(n, l);
        for j in 0..n {
            for len in 1..=l.min(n - j) {
                t.set(j, len, a * len as f64);
            }
        }
        t.set_terminal(term);
        let count = enumerate(n, l).len() as f64;
        let expect = count.ln() + n as f64 * a + term;
        assert!((marginal_loglik(&t) - expect).abs() < 1e-12);
    }

    #[test]
    fn viterbi_ties_prefer_shorter_final_segment() {
        let (n, l) = (4, 4);
        let mut t = SegmentTable::new(n, l);
        for j in 0..n {
            for len in 1..=l.min(n - j) {
                t.set(j, len, -(len as f64));
            }
        }
        t.set_terminal(0.0);
        // every segmentation scores -4; the tie rule yields single characters
        let (seg, s) = map_segmentation(&t);
        assert_eq!(s, -4.0);
        assert_eq!(seg.ends(), &[1, 2, 3, 4]);
    }

    #[test]
    fn degenerate_posterior_penalty() {
        let (n, beta) = (6, 1.7);
        let mut t = SegmentTable::new(n, n);
        for j in 0..n {
            for len in 1..=(n - j) {
                t.set(j, len, if j == 0 && len == n { -1.0 } else { -800.0 });
            }
        }
        t.set_terminal(0.0);
        let (ll, r) = expected_length_penalty(&t, beta);
        assert!((r - (n as f64).powf(beta)).abs() < 1e-9);
        let (_, best) = map_segmentation(&t);
        assert!((ll - best).abs() < 1e-12);
    }

    #[test]
    fn graph_loss_matches_f64_path() {
        let t = random_table(7, 3, 9);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let nodes = t.map(|v| g.input(Array::scalar(*v)));
        let reg = RegConfig { beta: 1.5, lambda: 0.3 };
        let out = training_loss(&mut g, &nodes, reg).unwrap();
        let (ll, r) = expected_length_penalty(&t, 1.5);
        assert!((g.scalar(out.log_likelihood) - ll).abs() < 1e-12);
        assert!((g.scalar(out.loss) - (-ll + 0.3 * r)).abs() < 1e-12);

        let reg0 = RegConfig { beta: 2.0, lambda: 0.0 };
        let out0 = training_loss(&mut g, &nodes, reg0).unwrap();
        assert!((g.scalar(out0.loss) + ll).abs() < 1e-12);
        assert!(out0.penalty.is_none());
    }

    #[test]
    fn segmentation_rendering_round_trip() {
        let chars: Vec<char> = "doyousee".chars().collect();
        let seg = Segmentation::from_boundaries(&[2, 5], 8).unwrap();
        let line = seg.render(&chars);
        assert_eq!(line, "do you see");
        let (c2, s2) = Segmentation::parse_line(&line).unwrap();
        assert_eq!((c2, s2), (chars, seg));
        assert!(Segmentation::from_boundaries(&[0], 3).is_err());
        assert!(Segmentation::from_boundaries(&[3], 3).is_err());
    }
}
