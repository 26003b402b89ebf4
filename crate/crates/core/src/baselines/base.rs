use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observation unit of the Bayesian baselines. `Start` only ever appears as
/// a bigram context.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Start,
    Word(Vec<u32>),
    End,
}

/// Word base measure: stop the utterance with `p_end`, otherwise draw a
/// geometric length and spell uniformly over the alphabet.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseDist {
    pub p_end: f64,
    pub p_continue: f64,
    pub alphabet: usize,
}

impl BaseDist {
    pub fn new(p_end: f64, p_continue: f64, alphabet: usize) -> Result<Self> {
        let open = |p: f64| p > 0.0 && p < 1.0;
        if !open(p_end) || !open(p_continue) {
            return Err(Error::Invalid(format!(
                "base probabilities must lie in (0,1): p_end={p_end}, p_continue={p_continue}"
            )));
        }
        if alphabet == 0 {
            return Err(Error::Invalid("empty alphabet".into()));
        }
        Ok(Self {
            p_end,
            p_continue,
            alphabet,
        })
    }

    pub fn log_end(&self) -> f64 {
        self.p_end.ln()
    }

    /// Log-probability of a word of `len ≥ 1` characters.
    pub fn log_word(&self, len: usize) -> Result<f64> {
        if len == 0 {
            return Err(Error::Invalid("empty word".into()));
        }
        let k = len as f64;
        Ok((1.0 - self.p_end).ln() + (k - 1.0) * self.p_continue.ln() + (1.0 - self.p_continue).ln()
            - k * (self.alphabet as f64).ln())
    }

    pub fn log_prob(&self, token: &Token) -> Result<f64> {
        match token {
            Token::End => Ok(self.log_end()),
            Token::Word(w) => self.log_word(w.len()),
            Token::Start => Err(Error::Invalid("start symbol is never generated".into())),
        }
    }
}
