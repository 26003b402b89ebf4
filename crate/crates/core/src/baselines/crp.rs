//! Chinese-restaurant state and the boundary Gibbs sampler.
//!
//! The bigram restaurants seat one table per distinct `(context, word)`
//! pair, so the upper-level table counts are a deterministic function of the
//! bigram counts and a rebuild from the boundary assignment reproduces the
//! incremental state exactly.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::base::{BaseDist, Token};
use super::heldout::Predictor;
use crate::error::{Error, Result};
use crate::lattice::Segmentation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Unigram,
    Bigram,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub kind: ModelKind,
    pub alpha0: f64,
    /// Bigram concentration; ignored by the unigram model.
    pub alpha1: f64,
    pub p_end: f64,
    pub p_continue: f64,
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0) || (self.kind == ModelKind::Bigram && !(self.alpha1 > 0.0)) {
            return Err(Error::Invalid(format!("concentrations must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn base(&self, alphabet: usize) -> Result<BaseDist> {
        self.validate()?;
        BaseDist::new(self.p_end, self.p_continue, alphabet)
    }
}

/// Restaurant counts. Bigram statistics are kept only for the bigram model.
#[derive(Clone, Debug, PartialEq)]
pub struct Counts {
    pub kind: ModelKind,
    pub unigram: HashMap<Token, usize>,
    pub tokens: usize,
    pub bigram: HashMap<(Token, Token), usize>,
    pub context: HashMap<Token, usize>,
    pub tables: HashMap<Token, usize>,
    pub total_tables: usize,
}

fn bump<K: std::hash::Hash + Eq>(map: &mut HashMap<K, usize>, key: K) -> usize {
    let c = map.entry(key).or_insert(0);
    *c += 1;
    *c
}

fn drop_one<K: std::hash::Hash + Eq + std::fmt::Debug>(map: &mut HashMap<K, usize>, key: &K) -> Result<usize> {
    let Some(c) = map.get_mut(key) else {
        return Err(Error::Invalid(format!("count for {key:?} would go negative")));
    };
    *c -= 1;
    let left = *c;
    if left == 0 {
        map.remove(key);
    }
    Ok(left)
}

impl Counts {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            unigram: HashMap::new(),
            tokens: 0,
            bigram: HashMap::new(),
            context: HashMap::new(),
            tables: HashMap::new(),
            total_tables: 0,
        }
    }

    pub fn add(&mut self, prev: &Token, w: &Token) {
        bump(&mut self.unigram, w.clone());
        self.tokens += 1;
        if self.kind == ModelKind::Unigram {
            return;
        }
        bump(&mut self.context, prev.clone());
        if bump(&mut self.bigram, (prev.clone(), w.clone())) == 1 {
            bump(&mut self.tables, w.clone());
            self.total_tables += 1;
        }
    }

    pub fn remove(&mut self, prev: &Token, w: &Token) -> Result<()> {
        drop_one(&mut self.unigram, w)?;
        self.tokens -= 1;
        if self.kind == ModelKind::Unigram {
            return Ok(());
        }
        drop_one(&mut self.context, prev)?;
        if drop_one(&mut self.bigram, &(prev.clone(), w.clone()))? == 0 {
            drop_one(&mut self.tables, w)?;
            self.total_tables -= 1;
        }
        Ok(())
    }

    /// CRP predictive log-probability of `w` following `prev`.
    pub fn log_pred(&self, hyper: &Hyper, base: &BaseDist, prev: &Token, w: &Token) -> f64 {
        let p0 = base.log_prob(w).expect("generated tokens").exp();
        match hyper.kind {
            ModelKind::Unigram => {
                let n = self.unigram.get(w).copied().unwrap_or(0) as f64;
                ((n + hyper.alpha0 * p0) / (self.tokens as f64 + hyper.alpha0)).ln()
            }
            ModelKind::Bigram => {
                let t = self.tables.get(w).copied().unwrap_or(0) as f64;
                let p1 = (t + hyper.alpha0 * p0) / (self.total_tables as f64 + hyper.alpha0);
                let key = (prev.clone(), w.clone());
                let n = self.bigram.get(&key).copied().unwrap_or(0) as f64;
                let nc = self.context.get(prev).copied().unwrap_or(0) as f64;
                ((n + hyper.alpha1 * p1) / (nc + hyper.alpha1)).ln()
            }
        }
    }
}

/// Linear cooling from 2 to 1 over the first half, then constant 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub iterations: usize,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self { iterations: 1000 }
    }
}

impl AnnealSchedule {
    pub fn temperature(&self, i: usize) -> f64 {
        let half = self.iterations / 2;
        if i >= half || half == 0 {
            1.0
        } else {
            2.0 - i as f64 / half as f64
        }
    }
}

fn words_of(ids: &[u32], bounds: &[bool]) -> Vec<Token> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, b) in bounds.iter().enumerate() {
        if *b {
            out.push(Token::Word(ids[start..=i].to_vec()));
            start = i + 1;
        }
    }
    out.push(Token::Word(ids[start..].to_vec()));
    out
}

fn add_sentence(counts: &mut Counts, ids: &[u32], bounds: &[bool]) {
    let mut prev = Token::Start;
    for w in words_of(ids, bounds).into_iter().chain([Token::End]) {
        counts.add(&prev, &w);
        prev = w;
    }
}

/// Log-probability of a full joint segmentation, accumulating predictive
/// probabilities token by token from empty restaurants.
pub fn joint_logprob(hyper: &Hyper, alphabet: usize, sentences: &[Vec<u32>], bounds: &[Vec<bool>]) -> Result<f64> {
    let base = hyper.base(alphabet)?;
    let mut counts = Counts::new(hyper.kind);
    let mut lp = 0.0;
    for (ids, b) in sentences.iter().zip(bounds) {
        let mut prev = Token::Start;
        for w in words_of(ids, b).into_iter().chain([Token::End]) {
            lp += counts.log_pred(hyper, &base, &prev, &w);
            counts.add(&prev, &w);
            prev = w;
        }
    }
    Ok(lp)
}

/// Single-owner Gibbs sampler over word-boundary indicators.
#[derive(Clone, Debug)]
pub struct Sampler {
    pub hyper: Hyper,
    base: BaseDist,
    sentences: Vec<Vec<u32>>,
    /// `bounds[s][i]` marks a boundary after character `i` of sentence `s`.
    bounds: Vec<Vec<bool>>,
    counts: Counts,
}

impl Sampler {
    pub fn with_boundaries(hyper: Hyper, alphabet: usize, sentences: Vec<Vec<u32>>, bounds: Vec<Vec<bool>>) -> Result<Self> {
        let base = hyper.base(alphabet)?;
        if sentences.len() != bounds.len()
            || sentences.iter().zip(&bounds).any(|(s, b)| s.is_empty() || b.len() + 1 != s.len())
        {
            return Err(Error::Shape("boundary indicators do not match sentences".into()));
        }
        let mut counts = Counts::new(hyper.kind);
        for (ids, b) in sentences.iter().zip(&bounds) {
            add_sentence(&mut counts, ids, b);
        }
        Ok(Self {
            hyper,
            base,
            sentences,
            bounds,
            counts,
        })
    }

    /// Boundaries initialised independently with probability 1/2.
    pub fn new(hyper: Hyper, alphabet: usize, sentences: Vec<Vec<u32>>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bounds = sentences
            .iter()
            .map(|s| (1..s.len()).map(|_| rng.gen_bool(0.5)).collect())
            .collect();
        Self::with_boundaries(hyper, alphabet, sentences, bounds)
    }

    pub fn counts(&self) -> &Counts {
        &self.counts
    }

    pub fn boundaries(&self) -> &[Vec<bool>] {
        &self.bounds
    }

    pub fn sentences(&self) -> &[Vec<u32>] {
        &self.sentences
    }

    pub fn segmentations(&self) -> Vec<Segmentation> {
        self.sentences
            .iter()
            .zip(&self.bounds)
            .map(|(s, b)| {
                let offs: Vec<usize> = b.iter().enumerate().filter(|(_, x)| **x).map(|(i, _)| i + 1).collect();
                Segmentation::from_boundaries(&offs, s.len()).expect("offsets in range")
            })
            .collect()
    }

    /// Counts recomputed from the boundary assignment alone.
    pub fn rebuild(&self) -> Counts {
        let mut counts = Counts::new(self.hyper.kind);
        for (ids, b) in self.sentences.iter().zip(&self.bounds) {
            add_sentence(&mut counts, ids, b);
        }
        counts
    }

    pub fn joint_logprob(&self) -> f64 {
        joint_logprob(&self.hyper, self.base.alphabet, &self.sentences, &self.bounds).expect("validated hyper")
    }

    pub fn predictor(&self) -> Predictor {
        Predictor::new(self.hyper, self.base, self.counts.clone())
    }

    /// Tokens whose counts depend on the boundary at `pos` of sentence `s`:
    /// the left context, the hypothesis words, and (bigram only) the token
    /// that follows them.
    fn neighbourhood(&self, s: usize, pos: usize) -> (Token, usize, usize, Token) {
        let b = &self.bounds[s];
        let ids = &self.sentences[s];
        let left = (0..pos).rev().find(|i| b[*i]).map_or(0, |i| i + 1);
        let right = (pos + 1..b.len()).find(|i| b[*i]).map_or(ids.len(), |i| i + 1);
        let prev = if left == 0 {
            Token::Start
        } else {
            let before = (0..left - 1).rev().find(|i| b[*i]).map_or(0, |i| i + 1);
            Token::Word(ids[before..left].to_vec())
        };
        let next = if right == ids.len() {
            Token::End
        } else {
            let after = (right..b.len()).find(|i| b[*i]).map_or(ids.len(), |i| i + 1);
            Token::Word(ids[right..after].to_vec())
        };
        (prev, left, right, next)
    }

    fn chain(&self, prev: &Token, words: Vec<Token>, next: &Token) -> Vec<(Token, Token)> {
        let mut out = Vec::with_capacity(words.len() + 1);
        let mut p = prev.clone();
        for w in words {
            out.push((p, w.clone()));
            p = w;
        }
        if self.hyper.kind == ModelKind::Bigram {
            out.push((p, next.clone()));
        }
        out
    }

    fn score_chain(&mut self, chain: &[(Token, Token)]) -> Result<f64> {
        let mut lp = 0.0;
        for (p, w) in chain {
            lp += self.counts.log_pred(&self.hyper, &self.base, p, w);
            self.counts.add(p, w);
        }
        for (p, w) in chain.iter().rev() {
            self.counts.remove(p, w)?;
        }
        Ok(lp)
    }

    /// Resamples the boundary after character `pos` of sentence `s` at
    /// temperature `t`.
    pub fn resample(&mut self, s: usize, pos: usize, t: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let (prev, left, right, next) = self.neighbourhood(s, pos);
        let ids = &self.sentences[s];
        let joined = vec![Token::Word(ids[left..right].to_vec())];
        let split = vec![
            Token::Word(ids[left..=pos].to_vec()),
            Token::Word(ids[pos + 1..right].to_vec()),
        ];
        let absent = self.chain(&prev, joined, &next);
        let present = self.chain(&prev, split, &next);
        let current = if self.bounds[s][pos] { &present } else { &absent };
        for (p, w) in current {
            self.counts.remove(p, w)?;
        }
        let la = self.score_chain(&absent)? / t;
        let lb = self.score_chain(&present)? / t;
        let p_boundary = 1.0 / (1.0 + (la - lb).exp());
        let choice = rng.gen::<f64>() < p_boundary;
        for (p, w) in if choice { &present } else { &absent } {
            self.counts.add(p, w);
        }
        self.bounds[s][pos] = choice;
        Ok(())
    }

    /// One pass over every intra-sentence position in random order.
    pub fn sweep(&mut self, t: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let mut sites: Vec<(usize, usize)> = self
            .bounds
            .iter()
            .enumerate()
            .flat_map(|(s, b)| (0..b.len()).map(move |p| (s, p)))
            .collect();
        sites.shuffle(rng);
        for (s, p) in sites {
            self.resample(s, p, t, rng)?;
        }
        debug_assert_eq!(self.counts, self.rebuild());
        Ok(())
    }

    /// Runs the annealed chain and leaves the sampler in the highest-scoring
    /// state visited at temperature 1. Returns that state's joint log-prob.
    pub fn anneal(&mut self, schedule: AnnealSchedule, rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut best: Option<(f64, Vec<Vec<bool>>)> = None;
        for i in 0..schedule.iterations {
            let t = schedule.temperature(i);
            self.sweep(t, rng)?;
            if t == 1.0 {
                let lp = self.joint_logprob();
                if best.as_ref().map_or(true, |(b, _)| lp > *b) {
                    best = Some((lp, self.bounds.clone()));
                }
            }
        }
        match best {
            Some((lp, bounds)) => {
                self.bounds = bounds;
                self.counts = self.rebuild();
                Ok(lp)
            }
            None => Ok(self.joint_logprob()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng::seeded;

    fn uni(alpha0: f64) -> Hyper {
        Hyper {
            kind: ModelKind::Unigram,
            alpha0,
            alpha1: 0.0,
            p_end: 0.3,
            p_continue: 0.5,
        }
    }

    fn bi() -> Hyper {
        Hyper {
            kind: ModelKind::Bigram,
            alpha0: 2.0,
            alpha1: 3.0,
            p_end: 0.3,
            p_continue: 0.5,
        }
    }

    fn corpus() -> Vec<Vec<u32>> {
        vec![vec![0, 1, 0, 1], vec![1, 0], vec![0, 1, 1, 0, 1]]
    }

    #[test]
    fn schedule_shape() {
        let s = AnnealSchedule { iterations: 10 };
        assert_eq!(s.temperature(0), 2.0);
        assert!(s.temperature(4) > 1.0 && s.temperature(4) < 2.0);
        assert_eq!(s.temperature(5), 1.0);
        assert_eq!(s.temperature(9), 1.0);
        assert_eq!(AnnealSchedule { iterations: 1 }.temperature(0), 1.0);
    }

    #[test]
    fn incremental_state_matches_rebuild() {
        for hyper in [uni(1.5), bi()] {
            let mut rng = seeded(11);
            let mut s = Sampler::new(hyper, 2, corpus(), &mut rng).unwrap();
            for i in 0..20 {
                s.sweep(1.0 + (i % 3) as f64, &mut rng).unwrap();
                assert_eq!(s.counts, s.rebuild());
                let tokens: usize = s.segmentations().iter().map(|g| g.num_segments() + 1).sum();
                assert_eq!(s.counts.tokens, tokens);
            }
        }
    }

    #[test]
    fn remove_then_add_is_identity() {
        let mut c = Counts::new(ModelKind::Bigram);
        let a = Token::Word(vec![0]);
        c.add(&Token::Start, &a);
        c.add(&a, &Token::End);
        let before = c.clone();
        c.remove(&a, &Token::End).unwrap();
        c.add(&a, &Token::End);
        assert_eq!(c, before);
        assert!(c.remove(&Token::End, &a).is_err());
    }

    #[test]
    fn two_hypothesis_closed_form() {
        // "ab" alone: boundary vs none given only the sentence's own end token
        let h = uni(1.5);
        let base = h.base(2).unwrap();
        let p0 = |len| base.log_word(len).unwrap().exp();
        let a0 = h.alpha0;
        let joined = a0 * p0(2) / (1.0 + a0);
        let split = a0 * p0(1) / (1.0 + a0) * a0 * p0(1) / (2.0 + a0);
        let exact = split / (split + joined);

        let mut s = Sampler::with_boundaries(h, 2, vec![vec![0, 1]], vec![vec![false]]).unwrap();
        let mut rng = seeded(5);
        let n = 40_000;
        let mut hits = 0;
        for _ in 0..n {
            s.resample(0, 0, 1.0, &mut rng).unwrap();
            hits += s.bounds[0][0] as usize;
        }
        let freq = hits as f64 / n as f64;
        let se = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((freq - exact).abs() < 3.0 * se + 1e-3, "{freq} vs {exact}");
    }

    #[test]
    fn infinite_temperature_is_uniform() {
        let mut s = Sampler::with_boundaries(uni(0.01), 2, vec![vec![0, 1]], vec![vec![false]]).unwrap();
        let mut rng = seeded(9);
        let n = 20_000;
        let mut hits = 0;
        for _ in 0..n {
            s.resample(0, 0, f64::INFINITY, &mut rng).unwrap();
            hits += s.bounds[0][0] as usize;
        }
        assert!((hits as f64 / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn anneal_keeps_best_state() {
        let mut rng = seeded(3);
        let mut s = Sampler::new(bi(), 2, corpus(), &mut rng).unwrap();
        let lp = s.anneal(AnnealSchedule { iterations: 30 }, &mut rng).unwrap();
        assert_eq!(lp, s.joint_logprob());
        assert_eq!(s.counts, s.rebuild());
    }
}
