//! The segmental neural language model.
//!
//! An encoder LSTM summarises the character history at every position. From
//! each history vector three heads read off (a) a gate choosing between the
//! two segment generators, (b) the initial state of a character-level
//! generator LSTM that spells a segment and closes it with end-of-word, and
//! (c) a softmax over a lexical memory of frequent substrings. The terminal
//! event after the last character is the generator emitting end-of-sequence
//! as its first symbol.
//!
//! Generator support per step: the first symbol ranges over Σ ∪ {end-of-
//! sequence} (end-of-word would close an empty segment), later symbols over
//! Σ ∪ {end-of-word}. The mixture over segments plus the terminal event is
//! therefore a proper distribution at every position.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ContextSet, Lexicon, Vocab};
use crate::error::{Error, Result};
use crate::lattice::{self, LossNodes, RegConfig, Segmentation, SegmentTable};
use crate::numeric::{
    dropout, init_params, lstm_step, mlp, Affine, Array, Checkpoint, Graph, LstmParams, MlpParams,
    Mode, NodeId, ParamId, ParamStore,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnlmConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    /// Longest segment considered by the lattice (also the lexicon cap).
    pub max_len: usize,
    pub dropout: f64,
    /// Dimension of conditioning vectors; `None` for unconditioned models.
    pub context_dim: Option<usize>,
}

impl Default for SnlmConfig {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            hidden: 512,
            max_len: 10,
            dropout: 0.5,
            context_dim: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Heads {
    embed: ParamId,
    encoder: LstmParams,
    generator: LstmParams,
    gen_init: Affine,
    gen_out: Affine,
    gate: MlpParams,
    query: MlpParams,
    keys: Option<ParamId>,
    key_bias: Option<ParamId>,
    attention: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snlm {
    pub config: SnlmConfig,
    pub vocab: Vocab,
    pub lexicon: Lexicon,
    pub params: ParamStore,
    heads: Heads,
}

/// Per-position quantities read off one history vector.
struct PositionHeads {
    log_gate: Option<NodeId>,
    log_not_gate: Option<NodeId>,
    lex_logprobs: Option<NodeId>,
    gen_h: NodeId,
    gen_c: NodeId,
}

impl Snlm {
    pub fn new(config: SnlmConfig, vocab: Vocab, lexicon: Lexicon, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.embed_dim == 0 || config.hidden == 0 || config.max_len == 0 {
            return Err(Error::Invalid(format!("degenerate model config {config:?}")));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Invalid(format!("dropout {} outside [0,1)", config.dropout)));
        }
        if lexicon.entries().iter().any(|e| e.len() > config.max_len) {
            return Err(Error::Invalid("lexicon entry longer than max_len".into()));
        }
        let (e, h) = (config.embed_dim, config.hidden);
        let v = vocab.size();
        let mut p = ParamStore::new();
        let embed = p.add("embed", init_params(&[v, e], rng));
        let enc_in = e + config.context_dim.unwrap_or(0);
        let encoder = LstmParams::new(&mut p, "enc.lstm", enc_in, h, rng);
        let generator = LstmParams::new(&mut p, "gen.lstm", e, h, rng);
        let gen_init = Affine::new(&mut p, "gen.init", h, h, rng);
        let gen_out = Affine::new(&mut p, "gen.out", h, v, rng);
        let gate = MlpParams::new(&mut p, "gate", h, h, 1, rng);
        let query = MlpParams::new(&mut p, "mem.query", h, h, h, rng);
        let (keys, key_bias) = if lexicon.is_empty() {
            (None, None)
        } else {
            (
                Some(p.add("mem.keys", init_params(&[lexicon.len(), h], rng))),
                Some(p.add("mem.bias", init_params(&[lexicon.len()], rng))),
            )
        };
        let attention = config
            .context_dim
            .map(|d| p.add("attn.proj", init_params(&[d, h], rng)));
        Ok(Self {
            config,
            vocab,
            lexicon,
            params: p,
            heads: Heads {
                embed,
                encoder,
                generator,
                gen_init,
                gen_out,
                gate,
                query,
                keys,
                key_bias,
                attention,
            },
        })
    }

    pub fn has_memory(&self) -> bool {
        !self.lexicon.is_empty()
    }

    fn eow(&self) -> usize {
        self.vocab.eow() as usize
    }

    fn eos(&self) -> usize {
        self.vocab.eos() as usize
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        let n = self.vocab.alphabet_size() as u32;
        if let Some(bad) = ids.iter().find(|i| **i >= n) {
            return Err(Error::Invalid(format!("symbol id {bad} is reserved or out of range")));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph<'_>, id: u32, mode: Mode, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        let table = g.param(self.heads.embed);
        let row = g.row(table, id as usize)?;
        dropout(g, row, self.config.dropout, mode, rng)
    }

    fn attend(&self, g: &mut Graph<'_>, h: NodeId, ctx: NodeId) -> Result<NodeId> {
        let proj = g.param(self.heads.attention.expect("conditioned model"));
        let q = g.matvec(proj, h)?;
        let scores = g.matvec(ctx, q)?;
        let weights = g.softmax(scores);
        g.mat_t_vec(ctx, weights)
    }

    /// Attention weights over the context rows for history vector `h`.
    pub fn attention_weights(&self, g: &mut Graph<'_>, h: NodeId, context: &ContextSet) -> Result<NodeId> {
        let ctx = self.context_node(g, context)?;
        let proj = g.param(self.heads.attention.ok_or_else(|| Error::Invalid("model is unconditioned".into()))?);
        let q = g.matvec(proj, h)?;
        let scores = g.matvec(ctx, q)?;
        Ok(g.softmax(scores))
    }

    fn context_node(&self, g: &mut Graph<'_>, context: &ContextSet) -> Result<NodeId> {
        match self.config.context_dim {
            Some(d) if d == context.dim => {}
            Some(d) => {
                return Err(Error::Shape(format!(
                    "context dim {} but model expects {d}",
                    context.dim
                )))
            }
            None => return Err(Error::Invalid("model is unconditioned".into())),
        }
        Ok(g.input(Array::from_vec(&[context.rows, context.dim], context.data.clone())?))
    }

    /// History vectors `h_0..h_n` (`h_t` summarises `x[..t]`; `h_0` is the
    /// zero state).
    pub fn encode_history(
        &self,
        g: &mut Graph<'_>,
        ids: &[u32],
        context: Option<&ContextSet>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<NodeId>> {
        if ids.is_empty() {
            return Err(Error::Invalid("empty sentence".into()));
        }
        self.check_ids(ids)?;
        let ctx = match (context, self.config.context_dim) {
            (Some(c), _) => Some(self.context_node(g, c)?),
            (None, Some(_)) => return Err(Error::Invalid("conditioned model needs context".into())),
            (None, None) => None,
        };
        let hs = self.config.hidden;
        let mut h = g.input(Array::zeros(&[hs]));
        let mut c = g.input(Array::zeros(&[hs]));
        let mut states = Vec::with_capacity(ids.len() + 1);
        states.push(h);
        for id in ids {
            let x = self.embed(g, *id, mode, rng)?;
            let x = match ctx {
                Some(ctx) => {
                    let att = self.attend(g, h, ctx)?;
                    g.concat(&[x, att])
                }
                None => x,
            };
            (h, c) = lstm_step(g, &self.heads.encoder, x, h, c)?;
            states.push(h);
        }
        Ok(states)
    }

    fn position_heads(
        &self,
        g: &mut Graph<'_>,
        h: NodeId,
        need_lex: bool,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<PositionHeads> {
        let h = dropout(g, h, self.config.dropout, mode, rng)?;
        let (log_gate, log_not_gate) = self.gate_nodes(g, h)?;
        let lex_logprobs = if need_lex && self.has_memory() {
            Some(self.lex_distribution(g, h)?)
        } else {
            None
        };
        let gen_h = self.heads.gen_init.apply(g, h)?;
        let gen_c = g.input(Array::zeros(&[self.config.hidden]));
        Ok(PositionHeads {
            log_gate,
            log_not_gate,
            lex_logprobs,
            gen_h,
            gen_c,
        })
    }

    /// `(log g, log(1-g))`; with an empty lexicon the gate is fixed at 1,
    /// reported as `(None, None)` meaning `(0, -∞)`.
    fn gate_nodes(&self, g: &mut Graph<'_>, h: NodeId) -> Result<(Option<NodeId>, Option<NodeId>)> {
        if !self.has_memory() {
            return Ok((None, None));
        }
        let z = mlp(g, &self.heads.gate, h)?;
        let log_g = g.log_sigmoid(z);
        let neg = g.scale(z, -1.0);
        let log_not = g.log_sigmoid(neg);
        Ok((Some(log_g), Some(log_not)))
    }

    fn lex_distribution(&self, g: &mut Graph<'_>, h: NodeId) -> Result<NodeId> {
        let q = mlp(g, &self.heads.query, h)?;
        let k = g.param(self.heads.keys.expect("memory present"));
        let b = g.param(self.heads.key_bias.expect("memory present"));
        let logits = g.matvec(k, q)?;
        let logits = g.add(logits, b)?;
        Ok(g.log_softmax(logits))
    }

    /// Gate value `(log g, log(1-g))` for a history vector, as plain numbers.
    pub fn gate(&self, g: &mut Graph<'_>, h: NodeId) -> Result<(f64, f64)> {
        Ok(match self.gate_nodes(g, h)? {
            (Some(a), Some(b)) => (g.scalar(a), g.scalar(b)),
            _ => (0.0, f64::NEG_INFINITY),
        })
    }

    fn gen_logits(&self, g: &mut Graph<'_>, h: NodeId, mode: Mode, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        let h = dropout(g, h, self.config.dropout, mode, rng)?;
        self.heads.gen_out.apply(g, h)
    }

    /// Character-generator log-probability of `segment` from history `h`:
    /// spelled out then closed by end-of-word, or, when `terminal`, the
    /// end-of-sequence symbol alone (`segment` must then be empty).
    pub fn char_segment_logprob(&self, g: &mut Graph<'_>, h: NodeId, segment: &[u32], terminal: bool) -> Result<NodeId> {
        self.check_ids(segment)?;
        let mut rng = crate::numeric::rng::seeded(0);
        let heads = self.position_heads(g, h, false, Mode::Eval, &mut rng)?;
        if terminal {
            if !segment.is_empty() {
                return Err(Error::Invalid("terminal event carries no characters".into()));
            }
            let z = self.gen_logits(g, heads.gen_h, Mode::Eval, &mut rng)?;
            return g.log_softmax_at(z, self.eos(), Some(self.eow()));
        }
        if segment.is_empty() {
            return Err(Error::Invalid("segments have length ≥ 1".into()));
        }
        let prefix = self.spell(g, &heads, segment, &mut rng)?;
        let z = self.gen_logits(g, prefix.1, Mode::Eval, &mut rng)?;
        let end = g.log_softmax_at(z, self.eow(), Some(self.eos()))?;
        g.add(prefix.0, end)
    }

    /// Log-probability that the generator spells `prefix` without stopping.
    pub fn char_prefix_logprob(&self, g: &mut Graph<'_>, h: NodeId, prefix: &[u32]) -> Result<NodeId> {
        self.check_ids(prefix)?;
        let mut rng = crate::numeric::rng::seeded(0);
        let heads = self.position_heads(g, h, false, Mode::Eval, &mut rng)?;
        Ok(self.spell(g, &heads, prefix, &mut rng)?.0)
    }

    /// Returns (log-prob of emitting `chars` in order, generator state after).
    fn spell(&self, g: &mut Graph<'_>, heads: &PositionHeads, chars: &[u32], rng: &mut ChaCha8Rng) -> Result<(NodeId, NodeId)> {
        let (mut gh, mut gc) = (heads.gen_h, heads.gen_c);
        let mut total = g.constant(0.0);
        for (k, id) in chars.iter().enumerate() {
            let z = self.gen_logits(g, gh, Mode::Eval, rng)?;
            let exclude = if k == 0 { self.eow() } else { self.eos() };
            let lp = g.log_softmax_at(z, *id as usize, Some(exclude))?;
            total = g.add(total, lp)?;
            let x = self.embed(g, *id, Mode::Eval, rng)?;
            (gh, gc) = lstm_step(g, &self.heads.generator, x, gh, gc)?;
        }
        Ok((total, gh))
    }

    /// Lexical-memory log-probability; `None` when the segment is not stored.
    pub fn lex_segment_logprob(&self, g: &mut Graph<'_>, h: NodeId, segment: &[u32]) -> Result<Option<NodeId>> {
        let Some(i) = self.lexicon.lookup(segment) else {
            return Ok(None);
        };
        let dist = self.lex_distribution(g, h)?;
        Ok(Some(g.pick(dist, i)?))
    }

    /// Mixture log-probability `log(g·p_char + (1-g)·p_lex)`.
    pub fn segment_logprob(&self, g: &mut Graph<'_>, h: NodeId, segment: &[u32], terminal: bool) -> Result<NodeId> {
        let char_lp = self.char_segment_logprob(g, h, segment, terminal)?;
        let (log_g, log_not) = self.gate_nodes(g, h)?;
        let char_term = match log_g {
            Some(lg) => g.add(lg, char_lp)?,
            None => char_lp,
        };
        if terminal {
            return Ok(char_term);
        }
        let lex = match log_not {
            Some(ln) => match self.lex_segment_logprob(g, h, segment)? {
                Some(lex) => Some(g.add(ln, lex)?),
                None => None,
            },
            None => None,
        };
        Ok(match lex {
            Some(l) => g.log_sum_exp(&[char_term, l]),
            None => char_term,
        })
    }

    /// Segment log-probabilities for every span of `ids` up to `max_len`
    /// plus the terminal event, recorded on `g`.
    pub fn score_table(
        &self,
        g: &mut Graph<'_>,
        ids: &[u32],
        context: Option<&ContextSet>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<SegmentTable<NodeId>> {
        let states = self.encode_history(g, ids, context, mode, rng)?;
        let n = ids.len();
        let l = self.config.max_len;
        let mut table = SegmentTable::new(n, l);
        for (j, h) in states.iter().enumerate() {
            let longest = l.min(n - j);
            let need_lex = (1..=longest).any(|m| self.lexicon.lookup(&ids[j..j + m]).is_some());
            let heads = self.position_heads(g, *h, need_lex, mode, rng)?;
            let (mut gh, mut gc) = (heads.gen_h, heads.gen_c);
            if j == n {
                let z = self.gen_logits(g, gh, mode, rng)?;
                let term = g.log_softmax_at(z, self.eos(), Some(self.eow()))?;
                let term = match heads.log_gate {
                    Some(lg) => g.add(lg, term)?,
                    None => term,
                };
                table.set_terminal(term);
                break;
            }
            let mut prefix: Option<NodeId> = None;
            for k in 0..=longest {
                let z = self.gen_logits(g, gh, mode, rng)?;
                if k >= 1 {
                    let end = g.log_softmax_at(z, self.eow(), Some(self.eos()))?;
                    let char_lp = g.add(prefix.expect("k ≥ 1"), end)?;
                    let char_term = match heads.log_gate {
                        Some(lg) => g.add(lg, char_lp)?,
                        None => char_lp,
                    };
                    let seg = &ids[j..j + k];
                    let lex = match (heads.lex_logprobs, heads.log_not_gate, self.lexicon.lookup(seg)) {
                        (Some(dist), Some(ln), Some(i)) => {
                            let lp = g.pick(dist, i)?;
                            Some(g.add(ln, lp)?)
                        }
                        _ => None,
                    };
                    let score = match lex {
                        Some(lx) => g.log_sum_exp(&[char_term, lx]),
                        None => char_term,
                    };
                    table.set(j, k, score);
                }
                if k == longest {
                    break;
                }
                let exclude = if k == 0 { self.eow() } else { self.eos() };
                let lp = g.log_softmax_at(z, ids[j + k] as usize, Some(exclude))?;
                prefix = Some(match prefix {
                    Some(p) => g.add(p, lp)?,
                    None => lp,
                });
                let x = self.embed(g, ids[j + k], mode, rng)?;
                (gh, gc) = lstm_step(g, &self.heads.generator, x, gh, gc)?;
            }
        }
        Ok(table)
    }

    /// Score table evaluated without dropout.
    pub fn score_table_values(&self, ids: &[u32], context: Option<&ContextSet>) -> Result<SegmentTable<f64>> {
        let mut g = Graph::new(&self.params);
        let mut rng = crate::numeric::rng::seeded(0);
        let t = self.score_table(&mut g, ids, context, Mode::Eval, &mut rng)?;
        Ok(t.map(|n| g.scalar(*n)))
    }

    pub fn marginal_loglik(&self, ids: &[u32], context: Option<&ContextSet>) -> Result<f64> {
        Ok(lattice::marginal_loglik(&self.score_table_values(ids, context)?))
    }

    pub fn map_segmentation(&self, ids: &[u32], context: Option<&ContextSet>) -> Result<(Segmentation, f64)> {
        Ok(lattice::map_segmentation(&self.score_table_values(ids, context)?))
    }

    pub fn expected_length_penalty(&self, ids: &[u32], context: Option<&ContextSet>, beta: f64) -> Result<(f64, f64)> {
        Ok(lattice::expected_length_penalty(&self.score_table_values(ids, context)?, beta))
    }

    /// Records the penalised negative log-likelihood of one sentence.
    pub fn training_loss(
        &self,
        g: &mut Graph<'_>,
        ids: &[u32],
        context: Option<&ContextSet>,
        reg: RegConfig,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossNodes> {
        let table = self.score_table(g, ids, context, mode, rng)?;
        lattice::training_loss(g, &table, reg)
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) {
        for (_, name, a) in self.params.iter() {
            ck.put(format!("param/{name}"), a.clone());
        }
        ck.put_str("model/kind", "snlm");
        ck.put_str(
            "model/config",
            &serde_json::to_string(&self.config).expect("config serialises"),
        );
        ck.put_str("model/vocab", &self.vocab.to_text());
        ck.put_str("model/lexicon", &self.lexicon.to_tsv(&self.vocab));
        ck.put_str("model/lexicon_hash", &self.lexicon.hash());
        ck.put_u64("model/lexicon_max_len", self.lexicon.max_len as u64);
        ck.put_u64("model/lexicon_min_freq", self.lexicon.min_freq as u64);
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind = ck.get_str("model/kind")?;
        if kind != "snlm" {
            return Err(Error::Format(format!("checkpoint holds a {kind} model")));
        }
        let config: SnlmConfig = serde_json::from_str(&ck.get_str("model/config")?)
            .map_err(|e| Error::Format(format!("model config: {e}")))?;
        let vocab = Vocab::from_chars(ck.get_str("model/vocab")?.chars());
        let lexicon = Lexicon::from_tsv(
            &ck.get_str("model/lexicon")?,
            &vocab,
            ck.get_u64("model/lexicon_max_len")? as usize,
            ck.get_u64("model/lexicon_min_freq")? as usize,
        )?;
        let stored_hash = ck.get_str("model/lexicon_hash")?;
        if lexicon.hash() != stored_hash {
            return Err(Error::Data("lexicon hash mismatch in checkpoint".into()));
        }
        let mut model = Self::new(config, vocab, lexicon, &mut crate::numeric::rng::seeded(0))?;
        load_params(&mut model.params, ck)?;
        Ok(model)
    }
}

/// Overwrites every parameter in `store` from `param/<name>` records.
pub(crate) fn load_params(store: &mut ParamStore, ck: &Checkpoint) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = format!("param/{}", store.name(id));
        let a = ck.require(&name)?;
        if a.shape() != store.get(id).shape() {
            return Err(Error::Shape(format!(
                "{name}: checkpoint {:?} vs model {:?}",
                a.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = a.clone();
    }
    Ok(())
}
