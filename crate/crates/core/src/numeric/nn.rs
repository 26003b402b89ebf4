//! LSTM and MLP building blocks, parameter initialisation and dropout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::array::{Array, ParamId, ParamStore};
use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};

/// Half-width of the uniform initialisation interval.
pub const INIT_SCALE: f64 = 0.08;

/// Samples `U(-0.08, 0.08)` for every entry.
pub fn init_params(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| rng.gen_range(-INIT_SCALE..INIT_SCALE))
        .collect();
    Array::from_vec(shape, data).expect("length matches shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout: kept units are scaled by `1/(1-rate)`; identity in
/// eval mode or at rate 0.
pub fn dropout(
    g: &mut Graph<'_>,
    x: NodeId,
    rate: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Invalid(format!("dropout rate {rate} outside [0,1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let n = g.value(x).len();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = g.input(Array::vector(mask));
    g.mul(x, m)
}

/// Fused-gate LSTM parameters: `w` is `[4H, in + H]` acting on `[x; h]`,
/// gate order input, forget, candidate, output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            init_params(&[4 * hidden, input + hidden], rng),
        );
        let b = store.add(format!("{prefix}.b"), init_params(&[4 * hidden], rng));
        Self {
            w,
            b,
            input,
            hidden,
        }
    }
}

/// One LSTM cell update. Returns `(h', c')`.
pub fn lstm_step(
    g: &mut Graph<'_>,
    p: &LstmParams,
    x: NodeId,
    h: NodeId,
    c: NodeId,
) -> Result<(NodeId, NodeId)> {
    let hs = p.hidden;
    if g.value(x).len() != p.input || g.value(h).len() != hs || g.value(c).len() != hs {
        return Err(Error::Shape(format!(
            "lstm_step expects x[{}] h[{hs}] c[{hs}], got x[{}] h[{}] c[{}]",
            p.input,
            g.value(x).len(),
            g.value(h).len(),
            g.value(c).len()
        )));
    }
    let xh = g.concat(&[x, h]);
    let w = g.param(p.w);
    let b = g.param(p.b);
    let pre = g.matvec(w, xh)?;
    let pre = g.add(pre, b)?;
    let i = g.slice(pre, 0, hs)?;
    let f = g.slice(pre, hs, hs)?;
    let cand = g.slice(pre, 2 * hs, hs)?;
    let o = g.slice(pre, 3 * hs, hs)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// One-hidden-layer perceptron with tanh: `w2 · tanh(w1 x + b1) + b2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), init_params(&[hidden, input], rng)),
            b1: store.add(format!("{prefix}.b1"), init_params(&[hidden], rng)),
            w2: store.add(format!("{prefix}.w2"), init_params(&[output, hidden], rng)),
            b2: store.add(format!("{prefix}.b2"), init_params(&[output], rng)),
        }
    }
}

pub fn mlp(g: &mut Graph<'_>, p: &MlpParams, x: NodeId) -> Result<NodeId> {
    let w1 = g.param(p.w1);
    let b1 = g.param(p.b1);
    let w2 = g.param(p.w2);
    let b2 = g.param(p.b2);
    let z = g.matvec(w1, x)?;
    let z = g.add(z, b1)?;
    let a = g.tanh(z);
    let out = g.matvec(w2, a)?;
    g.add(out, b2)
}

/// Affine map `w x + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w: store.add(format!("{prefix}.w"), init_params(&[output, input], rng)),
            b: store.add(format!("{prefix}.b"), init_params(&[output], rng)),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let z = g.matvec(w, x)?;
        g.add(z, b)
    }
}
