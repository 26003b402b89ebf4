//! Independent oracles shared by the integration tests: exhaustive
//! enumeration over segmentations and boundary configurations.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use seglm_core::baselines::{joint_logprob, Hyper, Predictor, Token};
use seglm_core::corpus::{ContextSet, Lexicon, Vocab};
use seglm_core::numeric::rng::seeded;
use seglm_core::numeric::{log_sum_exp, Graph, Mode};
use seglm_core::snlm::{Snlm, SnlmConfig};

/// Every way to cut `n` characters into pieces of length ≤ `max_len`, as
/// segment end offsets.
pub fn compositions(n: usize, max_len: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, l: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if start == n {
            out.push(cur.clone());
            return;
        }
        for len in 1..=l.min(n - start) {
            cur.push(start + len);
            go(start + len, n, l, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, max_len, &mut Vec::new(), &mut out);
    out
}

pub fn all_strings(alphabet: u32, n: usize) -> Vec<Vec<u32>> {
    (0..alphabet.pow(n as u32))
        .map(|mut k| {
            (0..n)
                .map(|_| {
                    let c = k % alphabet;
                    k /= alphabet;
                    c
                })
                .collect()
        })
        .collect()
}

/// Random tiny model over {a, b}. Weights are inflated so the heads are far
/// from uniform and the argmax is well separated.
pub fn random_snlm(rng: &mut ChaCha8Rng, max_len: usize, context_dim: Option<usize>) -> Snlm {
    let hidden = rng.gen_range(2..=8);
    let config = SnlmConfig {
        embed_dim: rng.gen_range(2..=4),
        hidden,
        max_len,
        dropout: 0.0,
        context_dim,
    };
    let mut entries = Vec::new();
    if rng.gen_bool(0.75) {
        for len in 2..=max_len {
            for s in all_strings(2, len) {
                if rng.gen_bool(0.4) {
                    entries.push(s);
                }
            }
        }
    }
    let lexicon = Lexicon::from_list(entries, max_len).expect("valid lexicon");
    let mut m = Snlm::new(config, Vocab::from_chars("ab".chars()), lexicon, &mut seeded(rng.gen())).unwrap();
    let scale = rng.gen_range(2.0..6.0);
    for id in m.params.ids().collect::<Vec<_>>() {
        m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    m
}

pub fn random_context(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> ContextSet {
    ContextSet {
        rows,
        dim,
        data: (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

/// Brute-force quantities for one sentence: marginal log-likelihood, the
/// best segmentation with its score, and the posterior mean of Σ|s|^β.
#[derive(Debug)]
pub struct Enumerated {
    pub log_likelihood: f64,
    pub best_ends: Vec<usize>,
    pub best_score: f64,
    pub penalty: f64,
}

/// Scores each span directly from the history vectors (one generator run per
/// span, no shared prefixes) and sums over every capped segmentation.
pub fn enumerate_snlm(m: &Snlm, ids: &[u32], ctx: Option<&ContextSet>, beta: f64) -> Enumerated {
    let n = ids.len();
    let l = m.config.max_len;
    let mut g = Graph::new(&m.params);
    let states = m.encode_history(&mut g, ids, ctx, Mode::Eval, &mut seeded(0)).unwrap();
    let mut span = vec![vec![f64::NAN; l + 1]; n];
    for (j, row) in span.iter_mut().enumerate() {
        for len in 1..=l.min(n - j) {
            let node = m.segment_logprob(&mut g, states[j], &ids[j..j + len], false).unwrap();
            row[len] = g.scalar(node);
        }
    }
    let term_node = m.segment_logprob(&mut g, states[n], &[], true).unwrap();
    let terminal = g.scalar(term_node);
    enumerate_spans(n, l, |j, len| span[j][len], terminal, beta)
}

pub fn enumerate_spans(n: usize, l: usize, span: impl Fn(usize, usize) -> f64, terminal: f64, beta: f64) -> Enumerated {
    let mut scores = Vec::new();
    let mut pens = Vec::new();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for ends in compositions(n, l) {
        let mut s = terminal;
        let mut pen = 0.0;
        let mut start = 0;
        for &e in &ends {
            s += span(start, e - start);
            pen += ((e - start) as f64).powf(beta);
            start = e;
        }
        if best.as_ref().map_or(true, |(b, _)| s > *b) {
            best = Some((s, ends.clone()));
        }
        scores.push(s);
        pens.push(pen);
    }
    let z = log_sum_exp(&scores);
    let penalty = scores.iter().zip(&pens).map(|(s, p)| (s - z).exp() * p).sum();
    let (best_score, best_ends) = best.unwrap();
    Enumerated {
        log_likelihood: z,
        best_ends,
        best_score,
        penalty,
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// All boundary configurations of `sentences`, flattened in order.
pub fn boundary_configs(sentences: &[Vec<u32>]) -> Vec<Vec<Vec<bool>>> {
    let sites: Vec<usize> = sentences.iter().map(|s| s.len() - 1).collect();
    let total: usize = sites.iter().sum();
    (0..1u64 << total)
        .map(|mask| {
            let mut k = 0;
            sites
                .iter()
                .map(|&m| {
                    (0..m)
                        .map(|_| {
                            let b = mask >> k & 1 == 1;
                            k += 1;
                            b
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Exact posterior marginal of every boundary site under the joint model.
pub fn exact_marginals(hyper: &Hyper, alphabet: usize, sentences: &[Vec<u32>]) -> Vec<Vec<f64>> {
    let configs = boundary_configs(sentences);
    let lps: Vec<f64> = configs
        .iter()
        .map(|b| joint_logprob(hyper, alphabet, sentences, b).unwrap())
        .collect();
    let z = log_sum_exp(&lps);
    let mut out: Vec<Vec<f64>> = sentences.iter().map(|s| vec![0.0; s.len() - 1]).collect();
    for (b, lp) in configs.iter().zip(&lps) {
        let p = (lp - z).exp();
        for (o, bs) in out.iter_mut().zip(b) {
            for (x, on) in o.iter_mut().zip(bs) {
                if *on {
                    *x += p;
                }
            }
        }
    }
    out
}

/// Held-out likelihood of `ids` under a frozen predictive, summed over every
/// capped segmentation.
pub fn enumerate_predictive(p: &Predictor, ids: &[u32], max_len: usize) -> f64 {
    let terms: Vec<f64> = compositions(ids.len(), max_len)
        .into_iter()
        .map(|ends| {
            let mut prev = Token::Start;
            let mut lp = 0.0;
            let mut start = 0;
            for e in ends {
                let w = Token::Word(ids[start..e].to_vec());
                lp += p.log_pred(&prev, &w);
                prev = w;
                start = e;
            }
            lp + p.log_pred(&prev, &Token::End)
        })
        .collect();
    log_sum_exp(&terms)
}
