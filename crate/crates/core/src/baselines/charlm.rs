use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::surprisal::SurprisalModel;
use crate::corpus::{ContextSet, Vocab};
use crate::error::{Error, Result};
use crate::lattice::RegConfig;
use crate::numeric::{
    dropout, init_params, lstm_step, rng::seeded, Affine, Array, Checkpoint, Graph, LstmParams, Mode, NodeId,
    ParamId, ParamStore,
};
use crate::snlm::load_params;
use crate::train::LanguageModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharLmConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for CharLmConfig {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            hidden: 512,
            dropout: 0.5,
        }
    }
}

/// Character LSTM over Σ ∪ {end-of-sequence}; `h_t` summarises `x[..t]`
/// and predicts `x_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct CharLm {
    pub config: CharLmConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    embed: ParamId,
    lstm: LstmParams,
    out: Affine,
}

impl CharLm {
    pub fn new(config: CharLmConfig, vocab: Vocab, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.embed_dim == 0 || config.hidden == 0 || !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Invalid(format!("bad language-model config {config:?}")));
        }
        let mut params = ParamStore::new();
        let v = vocab.size();
        let embed = params.add("lm.embed", init_params(&[v, config.embed_dim], rng));
        let lstm = LstmParams::new(&mut params, "lm.lstm", config.embed_dim, config.hidden, rng);
        let out = Affine::new(&mut params, "lm.out", config.hidden, v, rng);
        Ok(Self {
            config,
            vocab,
            params,
            embed,
            lstm,
            out,
        })
    }

    /// Per-symbol log-probabilities: one per character, then end-of-sequence.
    fn symbol_logprobs(&self, g: &mut Graph<'_>, ids: &[u32], mode: Mode, rng: &mut ChaCha8Rng) -> Result<Vec<NodeId>> {
        let sigma = self.vocab.alphabet_size() as u32;
        if ids.is_empty() || ids.iter().any(|i| *i >= sigma) {
            return Err(Error::Invalid("sentence must be nonempty and over Σ".into()));
        }
        let hs = self.config.hidden;
        let mut h = g.input(Array::zeros(&[hs]));
        let mut c = g.input(Array::zeros(&[hs]));
        let table = g.param(self.embed);
        let eow = self.vocab.eow() as usize;
        let mut out = Vec::with_capacity(ids.len() + 1);
        for target in ids.iter().map(|i| *i as usize).chain([self.vocab.eos() as usize]) {
            let hd = dropout(g, h, self.config.dropout, mode, rng)?;
            let z = self.out.apply(g, hd)?;
            out.push(g.log_softmax_at(z, target, Some(eow))?);
            if target == self.vocab.eos() as usize {
                break;
            }
            let x = g.row(table, target)?;
            let x = dropout(g, x, self.config.dropout, mode, rng)?;
            (h, c) = lstm_step(g, &self.lstm, x, h, c)?;
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) {
        for (_, name, a) in self.params.iter() {
            ck.put(format!("param/{name}"), a.clone());
        }
        ck.put_str("model/kind", "charlm");
        ck.put_str("model/config", &serde_json::to_string(&self.config).expect("config serialises"));
        ck.put_str("model/vocab", &self.vocab.to_text());
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind = ck.get_str("model/kind")?;
        if kind != "charlm" {
            return Err(Error::Format(format!("checkpoint holds a {kind} model")));
        }
        let config: CharLmConfig = serde_json::from_str(&ck.get_str("model/config")?)
            .map_err(|e| Error::Format(format!("model config: {e}")))?;
        let vocab = Vocab::from_chars(ck.get_str("model/vocab")?.chars());
        let mut m = Self::new(config, vocab, &mut seeded(0))?;
        load_params(&mut m.params, ck)?;
        Ok(m)
    }
}

impl LanguageModel for CharLm {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn sentence_loss(
        &self,
        g: &mut Graph<'_>,
        ids: &[u32],
        _context: Option<&ContextSet>,
        _reg: RegConfig,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let lps = self.symbol_logprobs(g, ids, mode, rng)?;
        let total = g.sum(&lps);
        Ok(g.scale(total, -1.0))
    }

    fn sentence_loglik(&self, ids: &[u32], _context: Option<&ContextSet>) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let lps = self.symbol_logprobs(&mut g, ids, Mode::Eval, &mut seeded(0))?;
        Ok(lps.iter().map(|n| g.scalar(*n)).sum())
    }

    fn write_checkpoint(&self, ck: &mut Checkpoint) {
        self.to_checkpoint(ck)
    }
}

impl SurprisalModel for CharLm {
    fn surprisal(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let lps = self.symbol_logprobs(&mut g, ids, Mode::Eval, &mut seeded(0))?;
        Ok(lps[..ids.len()].iter().map(|n| -g.scalar(*n)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CharLm {
        let cfg = CharLmConfig {
            embed_dim: 3,
            hidden: 4,
            dropout: 0.0,
        };
        CharLm::new(cfg, Vocab::from_chars("abc".chars()), &mut seeded(2)).unwrap()
    }

    #[test]
    fn zero_model_is_uniform_over_sigma_and_end() {
        let mut m = small();
        for id in m.params.ids().collect::<Vec<_>>() {
            m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let ll = m.sentence_loglik(&[0, 1, 2], None).unwrap();
        assert!((ll - 4.0 * 0.25f64.ln()).abs() < 1e-12);
        assert_eq!(m.surprisal(&[0, 1]).unwrap(), vec![4f64.ln(); 2]);
    }

    #[test]
    fn distribution_sums_to_one_over_short_strings() {
        // sentences shorter than 3 plus the mass of every length-3 prefix
        // cover all outcomes exactly once
        let m = small();
        let mut total = 0.0;
        let mut residual = 0.0;
        let strings: Vec<Vec<u32>> = (1..=3u32)
            .flat_map(|n| (0..3u32.pow(n)).map(move |k| (0..n).map(|i| k / 3u32.pow(i) % 3).collect()))
            .collect();
        for s in &strings {
            if s.len() < 3 {
                total += m.sentence_loglik(s, None).unwrap().exp();
            } else {
                let sur = m.surprisal(s).unwrap();
                residual += (-sur.iter().sum::<f64>()).exp();
            }
        }
        // the empty sentence is not modelled; add its mass explicitly
        let mut g = Graph::new(&m.params);
        let h = g.input(Array::zeros(&[4]));
        let z = m.out.apply(&mut g, h).unwrap();
        let e = g.log_softmax_at(z, m.vocab.eos() as usize, Some(m.vocab.eow() as usize)).unwrap();
        total += g.scalar(e).exp();
        assert!((total + residual - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = small();
        let mut ck = Checkpoint::new();
        m.to_checkpoint(&mut ck);
        assert_eq!(CharLm::from_checkpoint(&ck).unwrap(), m);
    }
}
