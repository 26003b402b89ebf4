//! Epoch loop shared by every neural model: seeded shuffling, Adam with
//! clipping, validation bpc, learning-rate decay on plateaus, and exact
//! resume from a checkpoint.

use rand::seq::SliceRandom;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ContextFile, ContextSet, Sentence};
use crate::error::{Error, Result};
use crate::eval::{bpc, BpcScore};
use crate::lattice::RegConfig;
use crate::numeric::rng::{seeded, RngState};
use crate::numeric::{AdamConfig, AdamState, Array, Checkpoint, Grads, Graph, Mode, NodeId, ParamStore};
use crate::par;
use crate::snlm::Snlm;

/// A differentiable sentence-level language model.
pub trait LanguageModel: Sync {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Scalar training loss for one sentence.
    fn sentence_loss(
        &self,
        g: &mut Graph<'_>,
        ids: &[u32],
        context: Option<&ContextSet>,
        reg: RegConfig,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId>;
    /// Exact natural-log likelihood including the terminal event.
    fn sentence_loglik(&self, ids: &[u32], context: Option<&ContextSet>) -> Result<f64>;
    fn write_checkpoint(&self, ck: &mut Checkpoint);
}

impl LanguageModel for Snlm {
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
        context: Option<&ContextSet>,
        reg: RegConfig,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        Ok(self.training_loss(g, ids, context, reg, mode, rng)?.loss)
    }

    fn sentence_loglik(&self, ids: &[u32], context: Option<&ContextSet>) -> Result<f64> {
        self.marginal_loglik(ids, context)
    }

    fn write_checkpoint(&self, ck: &mut Checkpoint) {
        self.to_checkpoint(ck)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Learning-rate divisor after an epoch without validation improvement.
    pub lr_decay: f64,
    /// Consecutive non-improving epochs before stopping.
    pub max_bad_epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            lr_decay: 4.0,
            max_bad_epochs: 4,
            max_epochs: 100,
            batch_size: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.lr_decay >= 1.0) || self.batch_size == 0 || !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("invalid training settings {self:?}")));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip_norm: Some(self.clip_norm),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_bpc: f64,
    pub lr: f64,
    pub improved: bool,
}

/// Training data view: sentences plus optional per-sentence context sets.
#[derive(Clone, Copy)]
pub struct Data<'a> {
    pub sentences: &'a [&'a Sentence],
    pub contexts: Option<&'a ContextFile>,
}

impl<'a> Data<'a> {
    pub fn new(sentences: &'a [&'a Sentence], contexts: Option<&'a ContextFile>) -> Self {
        Self { sentences, contexts }
    }

    fn context(&self, s: &Sentence) -> Result<Option<ContextSet>> {
        match (self.contexts, s.context_ref) {
            (None, _) => Ok(None),
            (Some(file), Some(i)) => file
                .get(i)
                .map(Some)
                .ok_or_else(|| Error::Data(format!("no context vectors for sentence {i}"))),
            (Some(_), None) => Err(Error::Data("sentence has no context reference".into())),
        }
    }
}

/// Pooled bpc of `model` on `data`, sentences scored in parallel.
pub fn evaluate_bpc(model: &impl LanguageModel, data: Data<'_>) -> Result<BpcScore> {
    let logliks = par::try_map(data.sentences, |s| {
        let ctx = data.context(s)?;
        model.sentence_loglik(&s.ids, ctx.as_ref())
    })?;
    let counts: Vec<usize> = data.sentences.iter().map(|s| s.len()).collect();
    bpc(&logliks, &counts)
}

pub struct Trainer<M: LanguageModel> {
    pub model: M,
    pub config: TrainConfig,
    pub reg: RegConfig,
    adam: AdamState,
    rng: ChaCha8Rng,
    pub epoch: usize,
    cursor: usize,
    order: Vec<usize>,
    epoch_loss: f64,
    pub best_bpc: Option<f64>,
    pub bad_epochs: usize,
    pub history: Vec<EpochLog>,
}

impl<M: LanguageModel> Trainer<M> {
    pub fn new(model: M, config: TrainConfig, reg: RegConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        reg.validate()?;
        let adam = AdamState::new(config.adam(), model.params());
        Ok(Self {
            model,
            config,
            reg,
            adam,
            rng: seeded(seed),
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
            epoch_loss: 0.0,
            best_bpc: None,
            bad_epochs: 0,
            history: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.adam.config.lr
    }

    pub fn is_finished(&self) -> bool {
        self.bad_epochs >= self.config.max_bad_epochs || self.epoch >= self.config.max_epochs
    }

    /// Total training loss (penalised) with dropout off.
    pub fn total_loss(&self, data: Data<'_>) -> Result<f64> {
        let losses = par::try_map(data.sentences, |s| {
            let ctx = data.context(s)?;
            let mut g = Graph::new(self.model.params());
            let mut rng = seeded(0);
            let l = self.model.sentence_loss(&mut g, &s.ids, ctx.as_ref(), self.reg, Mode::Eval, &mut rng)?;
            Ok::<f64, Error>(g.scalar(l))
        })?;
        Ok(losses.iter().sum())
    }

    /// One optimizer step on the next minibatch of the current epoch.
    /// Returns the minibatch loss, or `None` once the epoch is exhausted.
    pub fn step(&mut self, data: Data<'_>) -> Result<Option<f64>> {
        if data.sentences.is_empty() {
            return Err(Error::Data("empty training split".into()));
        }
        if self.cursor == 0 && self.order.is_empty() {
            self.order = (0..data.sentences.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.epoch_loss = 0.0;
        }
        if self.cursor >= self.order.len() {
            return Ok(None);
        }
        let end = (self.cursor + self.config.batch_size).min(self.order.len());
        // per-sentence dropout streams drawn in order keep parallel and
        // sequential runs identical
        let jobs: Vec<(usize, u64)> = self.order[self.cursor..end]
            .iter()
            .map(|i| (*i, self.rng.next_u64()))
            .collect();
        let model = &self.model;
        let reg = self.reg;
        let results = par::try_map(&jobs, |(i, seed)| {
            let s = data.sentences[*i];
            let ctx = data.context(s)?;
            let mut g = Graph::new(model.params());
            let mut rng = seeded(*seed);
            let loss = model.sentence_loss(&mut g, &s.ids, ctx.as_ref(), reg, Mode::Train, &mut rng)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss on sentence {i}")));
            }
            Ok::<(f64, Grads), Error>((value, g.backward(loss)?.into_params()))
        })?;
        let mut grads = Grads::zeros_like(self.model.params());
        let mut batch_loss = 0.0;
        for (l, g) in &results {
            batch_loss += l;
            grads.accumulate(g);
        }
        grads.scale(1.0 / results.len() as f64);
        self.adam.update(self.model.params_mut(), &grads)?;
        self.cursor = end;
        self.epoch_loss += batch_loss;
        Ok(Some(batch_loss))
    }

    /// Finishes the current epoch, scores validation bpc and applies the
    /// plateau schedule. Returns the epoch log and whether it improved.
    pub fn run_epoch(&mut self, train: Data<'_>, valid: Data<'_>) -> Result<EpochLog> {
        while self.step(train)?.is_some() {}
        let score = evaluate_bpc(&self.model, valid)?;
        let improved = self.best_bpc.map_or(true, |b| score.bpc < b);
        if improved {
            self.best_bpc = Some(score.bpc);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            self.adam.config.lr /= self.config.lr_decay;
        }
        let log = EpochLog {
            epoch: self.epoch,
            train_loss: self.epoch_loss,
            valid_bpc: score.bpc,
            lr: self.adam.config.lr,
            improved,
        };
        self.history.push(log.clone());
        self.epoch += 1;
        self.cursor = 0;
        self.order.clear();
        Ok(log)
    }

    /// Model, optimizer, PRNG and loop position.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.model.write_checkpoint(&mut ck);
        let params = self.model.params();
        for (id, name, _) in params.iter() {
            ck.put(format!("adam/m/{name}"), self.adam.m[id.index()].clone());
            ck.put(format!("adam/v/{name}"), self.adam.v[id.index()].clone());
        }
        ck.put_u64("adam/step", self.adam.step);
        ck.put("train/lr", Array::scalar(self.adam.config.lr));
        ck.put_str("train/config", &serde_json::to_string(&self.config).expect("serialises"));
        ck.put_str("train/reg", &serde_json::to_string(&self.reg).expect("serialises"));
        let rs = RngState::capture(&self.rng);
        ck.put_bytes("rng/seed", &rs.seed);
        ck.put_u64("rng/stream", rs.stream);
        ck.put_bytes("rng/word_pos", &rs.word_pos.to_le_bytes());
        ck.put_u64("train/epoch", self.epoch as u64);
        ck.put_u64("train/cursor", self.cursor as u64);
        ck.put("train/order", Array::vector(self.order.iter().map(|i| *i as f64).collect()));
        ck.put("train/epoch_loss", Array::scalar(self.epoch_loss));
        ck.put(
            "train/best_bpc",
            Array::vector(self.best_bpc.into_iter().collect()),
        );
        ck.put_u64("train/bad_epochs", self.bad_epochs as u64);
        ck.put_str("train/history", &serde_json::to_string(&self.history).expect("serialises"));
        ck
    }

    /// Restores a trainer around `model`, which must already hold the
    /// checkpoint's parameters.
    pub fn from_checkpoint(model: M, ck: &Checkpoint) -> Result<Self> {
        let json = |name: &str| -> Result<String> { ck.get_str(name) };
        let config: TrainConfig =
            serde_json::from_str(&json("train/config")?).map_err(|e| Error::Format(e.to_string()))?;
        let reg: RegConfig = serde_json::from_str(&json("train/reg")?).map_err(|e| Error::Format(e.to_string()))?;
        let mut adam = AdamState::new(config.adam(), model.params());
        for (id, name, _) in model.params().iter() {
            adam.m[id.index()] = ck.require(&format!("adam/m/{name}"))?.clone();
            adam.v[id.index()] = ck.require(&format!("adam/v/{name}"))?.clone();
        }
        adam.step = ck.get_u64("adam/step")?;
        adam.config.lr = ck.require("train/lr")?.item();
        let seed: [u8; 32] = ck
            .get_bytes("rng/seed")?
            .try_into()
            .map_err(|_| Error::Format("rng seed".into()))?;
        let word_pos: [u8; 16] = ck
            .get_bytes("rng/word_pos")?
            .try_into()
            .map_err(|_| Error::Format("rng position".into()))?;
        let rng = RngState {
            seed,
            stream: ck.get_u64("rng/stream")?,
            word_pos: u128::from_le_bytes(word_pos),
        }
        .restore();
        let best = ck.require("train/best_bpc")?.data().first().copied();
        Ok(Self {
            model,
            config,
            reg,
            adam,
            rng,
            epoch: ck.get_u64("train/epoch")? as usize,
            cursor: ck.get_u64("train/cursor")? as usize,
            order: ck.require("train/order")?.data().iter().map(|v| *v as usize).collect(),
            epoch_loss: ck.require("train/epoch_loss")?.item(),
            best_bpc: best,
            bad_epochs: ck.get_u64("train/bad_epochs")? as usize,
            history: serde_json::from_str(&json("train/history")?).map_err(|e| Error::Format(e.to_string()))?,
        })
    }
}
