use serde::{Deserialize, Serialize};

use super::crp::{AnnealSchedule, Hyper, ModelKind, Sampler};
use crate::error::Result;
use crate::numeric::rng::{derive_seed, seeded};
use crate::par;

/// One grid point's outcome, logged as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub config: Hyper,
    /// `None` when the configuration is degenerate.
    pub heldout_loglik: Option<f64>,
    pub seed: u64,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub best: usize,
    pub records: Vec<GridRecord>,
}

impl SearchOutcome {
    pub fn best_config(&self) -> Hyper {
        self.records[self.best].config
    }

    pub fn log_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serialises") + "\n")
            .collect()
    }
}

pub fn cartesian_grid(kind: ModelKind, alpha0: &[f64], alpha1: &[f64], p_end: &[f64], p_continue: &[f64]) -> Vec<Hyper> {
    let alpha1: &[f64] = if kind == ModelKind::Unigram { &[0.0] } else { alpha1 };
    let mut out = Vec::new();
    for a0 in alpha0 {
        for a1 in alpha1 {
            for pe in p_end {
                for pc in p_continue {
                    out.push(Hyper {
                        kind,
                        alpha0: *a0,
                        alpha1: *a1,
                        p_end: *pe,
                        p_continue: *pc,
                    });
                }
            }
        }
    }
    out
}

/// Runs annealed inference on `train` for every grid point and keeps the one
/// whose frozen predictive assigns `valid` the highest likelihood (earliest
/// point on ties). Point `i` uses seed `derive_seed(seed, i)`.
pub fn grid_search(
    grid: &[Hyper],
    alphabet: usize,
    train: &[Vec<u32>],
    valid: &[Vec<u32>],
    schedule: AnnealSchedule,
    max_len: usize,
    seed: u64,
) -> Result<SearchOutcome> {
    let indexed: Vec<(usize, Hyper)> = grid.iter().copied().enumerate().collect();
    let records = par::try_map(&indexed, |(i, h)| -> Result<GridRecord> {
        let point_seed = derive_seed(seed, *i as u64);
        let heldout_loglik = if h.base(alphabet).is_err() {
            None
        } else {
            let mut rng = seeded(point_seed);
            let mut s = Sampler::new(*h, alphabet, train.to_vec(), &mut rng)?;
            s.anneal(schedule, &mut rng)?;
            Some(s.predictor().heldout_loglik(valid, max_len)).filter(|v| !v.is_nan())
        };
        Ok(GridRecord {
            config: *h,
            heldout_loglik,
            seed: point_seed,
            iterations: schedule.iterations,
        })
    })?;
    let best = records
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (i, r)| {
            let v = r.heldout_loglik.unwrap_or(f64::NEG_INFINITY);
            match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((i, v)),
            }
        })
        .map(|(i, _)| i)
        .ok_or_else(|| crate::Error::Invalid("empty hyperparameter grid".into()))?;
    Ok(SearchOutcome { best, records })
}
