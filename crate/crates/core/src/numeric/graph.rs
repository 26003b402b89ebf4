//! Tape-based reverse-mode differentiation over small dense arrays.
//!
//! A [`Graph`] records every primitive as a node holding its forward value.
//! Parameters enter as leaves that borrow from a [`ParamStore`]; calling
//! [`Graph::backward`] on a scalar node walks the tape once in reverse and
//! returns exact adjoints for every parameter and every recorded node.

use super::array::{Array, Grads, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatVec(NodeId, NodeId),
    MatTVec(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    LogSigmoid(NodeId),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize),
    Row(NodeId, usize),
    LogSoftmax(NodeId),
    Softmax(NodeId),
    LogSoftmaxAt {
        logits: NodeId,
        index: usize,
        exclude: Option<usize>,
    },
    Pick(NodeId, usize),
    Dot(NodeId, NodeId),
    Sum(Vec<NodeId>),
    LogSumExp(Vec<NodeId>),
}

struct Node {
    op: Op,
    value: Array,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    params: Grads,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn params(&self) -> &Grads {
        &self.params
    }

    pub fn into_params(self) -> Grads {
        self.params
    }

    /// Adjoint of an arbitrary node; zero-length when the node is not on a
    /// path to the loss.
    pub fn node(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes.get(id.0).and_then(|g| g.as_deref())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)`, accurate for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn masked_lse(z: &[f64], exclude: Option<usize>) -> f64 {
    let max = z
        .iter()
        .enumerate()
        .filter(|(k, _)| Some(*k) != exclude)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = z
        .iter()
        .enumerate()
        .filter(|(k, _)| Some(*k) != exclude)
        .map(|(_, v)| (v - max).exp())
        .sum();
    max + total.ln()
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, op: Op, value: Array) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array {
        match self.nodes[id.0].op {
            Op::Param(p) => self.params.get(p),
            _ => &self.nodes[id.0].value,
        }
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.value(id).data()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).item()
    }

    pub fn input(&mut self, value: Array) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.push(Op::Input, Array::scalar(value))
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.index()] {
            return n;
        }
        let n = self.push(Op::Param(id), Array::zeros(&[0]));
        self.param_nodes[id.index()] = Some(n);
        n
    }

    fn check_same(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(Error::Shape(format!("{what}: {la} vs {lb}")));
        }
        Ok(())
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let wv = self.value(w);
        let (m, n) = (wv.rows(), wv.cols());
        let xv = self.data(x);
        if xv.len() != n || wv.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "matvec {:?} x [{}]",
                wv.shape(),
                xv.len()
            )));
        }
        let wd = wv.data();
        let out: Vec<f64> = (0..m)
            .map(|i| {
                wd[i * n..(i + 1) * n]
                    .iter()
                    .zip(xv)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        Ok(self.push(Op::MatVec(w, x), Array::vector(out)))
    }

    /// `wᵀ x` for `w` of shape `[m, n]` and `x` of length `m`.
    pub fn mat_t_vec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let wv = self.value(w);
        let (m, n) = (wv.rows(), wv.cols());
        let xv = self.data(x);
        if xv.len() != m || wv.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "mat_t_vec {:?}ᵀ x [{}]",
                wv.shape(),
                xv.len()
            )));
        }
        let wd = wv.data();
        let mut out = vec![0.0; n];
        for (i, xi) in xv.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&wd[i * n..(i + 1) * n]) {
                *o += w * xi;
            }
        }
        Ok(self.push(Op::MatTVec(w, x), Array::vector(out)))
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Array {
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        Array::vector(out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    fn map(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = Array::vector(self.data(a).iter().map(|x| f(*x)).collect());
        self.push(op, v)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.map(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map(a, Op::AddConst(a), |x| x + c)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::LogSigmoid(a), log_sigmoid)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.data(*p));
        }
        self.push(Op::Concat(parts.to_vec()), Array::vector(out))
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let d = self.data(a);
        if start + len > d.len() {
            return Err(Error::Shape(format!(
                "slice {start}..{} of length {}",
                start + len,
                d.len()
            )));
        }
        let v = Array::vector(d[start..start + len].to_vec());
        Ok(self.push(Op::Slice(a, start), v))
    }

    /// Row `index` of a rank-2 node.
    pub fn row(&mut self, m: NodeId, index: usize) -> Result<NodeId> {
        let mv = self.value(m);
        let (r, c) = (mv.rows(), mv.cols());
        if index >= r || mv.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "row {index} of {:?}",
                mv.shape()
            )));
        }
        let v = Array::vector(mv.data()[index * c..(index + 1) * c].to_vec());
        Ok(self.push(Op::Row(m, index), v))
    }

    pub fn log_softmax(&mut self, z: NodeId) -> NodeId {
        let d = self.data(z);
        let lse = log_sum_exp(d);
        let v = Array::vector(d.iter().map(|x| x - lse).collect());
        self.push(Op::LogSoftmax(z), v)
    }

    pub fn softmax(&mut self, z: NodeId) -> NodeId {
        let v = Array::vector(softmax(self.data(z)));
        self.push(Op::Softmax(z), v)
    }

    /// Log-probability of entry `index` under a softmax over `logits` with
    /// entry `exclude` (if any) removed from the support.
    pub fn log_softmax_at(
        &mut self,
        logits: NodeId,
        index: usize,
        exclude: Option<usize>,
    ) -> Result<NodeId> {
        let d = self.data(logits);
        if index >= d.len() || Some(index) == exclude {
            return Err(Error::Invalid(format!(
                "log_softmax_at index {index} (exclude {exclude:?}) over {} logits",
                d.len()
            )));
        }
        let v = d[index] - masked_lse(d, exclude);
        Ok(self.push(
            Op::LogSoftmaxAt {
                logits,
                index,
                exclude,
            },
            Array::scalar(v),
        ))
    }

    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let d = self.data(a);
        let v = *d
            .get(index)
            .ok_or_else(|| Error::Shape(format!("pick {index} of {}", d.len())))?;
        Ok(self.push(Op::Pick(a, index), Array::scalar(v)))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same(a, b, "dot")?;
        let v: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Op::Dot(a, b), Array::scalar(v)))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, terms: &[NodeId]) -> NodeId {
        let v: f64 = terms.iter().map(|t| self.scalar(*t)).sum();
        self.push(Op::Sum(terms.to_vec()), Array::scalar(v))
    }

    /// `log Σ exp` over scalar nodes. `terms` must be nonempty.
    pub fn log_sum_exp(&mut self, terms: &[NodeId]) -> NodeId {
        assert!(!terms.is_empty(), "log_sum_exp of nothing");
        if terms.len() == 1 {
            return terms[0];
        }
        let vals: Vec<f64> = terms.iter().map(|t| self.scalar(*t)).collect();
        let v = log_sum_exp(&vals);
        self.push(Op::LogSumExp(terms.to_vec()), Array::scalar(v))
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        fn acc<'a>(adj: &'a mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'a mut Vec<f64> {
            adj[id.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let Some(dy) = adj[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let y = node.value.data();
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::MatVec(w, x) => {
                    let wv = self.value(*w);
                    let n = wv.cols();
                    let (wd, xd) = (wv.data(), self.data(*x));
                    {
                        let dx = acc(&mut adj, *x, n);
                        for (i, g) in dy.iter().enumerate() {
                            if *g == 0.0 {
                                continue;
                            }
                            for (d, w) in dx.iter_mut().zip(&wd[i * n..(i + 1) * n]) {
                                *d += w * g;
                            }
                        }
                    }
                    let dw = acc(&mut adj, *w, wd.len());
                    for (i, g) in dy.iter().enumerate() {
                        if *g == 0.0 {
                            continue;
                        }
                        for (d, x) in dw[i * n..(i + 1) * n].iter_mut().zip(xd) {
                            *d += g * x;
                        }
                    }
                }
                Op::MatTVec(w, x) => {
                    let wv = self.value(*w);
                    let (m, n) = (wv.rows(), wv.cols());
                    let (wd, xd) = (wv.data(), self.data(*x));
                    {
                        let dx = acc(&mut adj, *x, m);
                        for (i, d) in dx.iter_mut().enumerate() {
                            *d += wd[i * n..(i + 1) * n]
                                .iter()
                                .zip(&dy)
                                .map(|(w, g)| w * g)
                                .sum::<f64>();
                        }
                    }
                    let dw = acc(&mut adj, *w, wd.len());
                    for (i, xi) in xd.iter().enumerate() {
                        for (d, g) in dw[i * n..(i + 1) * n].iter_mut().zip(&dy) {
                            *d += xi * g;
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (d, g) in acc(&mut adj, *a, dy.len()).iter_mut().zip(&dy) {
                        *d += g;
                    }
                    for (d, g) in acc(&mut adj, *b, dy.len()).iter_mut().zip(&dy) {
                        *d += g;
                    }
                }
                Op::Sub(a, b) => {
                    for (d, g) in acc(&mut adj, *a, dy.len()).iter_mut().zip(&dy) {
                        *d += g;
                    }
                    for (d, g) in acc(&mut adj, *b, dy.len()).iter_mut().zip(&dy) {
                        *d -= g;
                    }
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.data(*a), self.data(*b));
                    for ((d, g), bv) in acc(&mut adj, *a, dy.len()).iter_mut().zip(&dy).zip(bd) {
                        *d += g * bv;
                    }
                    for ((d, g), av) in acc(&mut adj, *b, dy.len()).iter_mut().zip(&dy).zip(ad) {
                        *d += g * av;
                    }
                }
                Op::Scale(a, f) => {
                    for (d, g) in acc(&mut adj, *a, dy.len()).iter_mut().zip(&dy) {
                        *d += g * f;
                    }
                }
                Op::AddConst(a) => {
                    for (d, g) in acc(&mut adj, *a, dy.len()).iter_mut().zip(&dy) {
                        *d += g;
                    }
                }
                Op::Sigmoid(a) => {
                    for ((d, g), s) in acc(&mut adj, *a, dy.len()).iter_mut().zip(&dy).zip(y) {
                        *d += g * s * (1.0 - s);
                    }
                }
                Op::Tanh(a) => {
                    for ((d, g), t) in acc(&mut adj, *a, dy.len()).iter_mut().zip(&dy).zip(y) {
                        *d += g * (1.0 - t * t);
                    }
                }
                Op::Exp(a) => {
                    for ((d, g), e) in acc(&mut adj, *a, dy.len()).iter_mut().zip(&dy).zip(y) {
                        *d += g * e;
                    }
                }
                Op::LogSigmoid(a) => {
                    let xd = self.data(*a);
                    for ((d, g), x) in acc(&mut adj, *a, dy.len()).iter_mut().zip(&dy).zip(xd) {
                        *d += g * sigmoid(-x);
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        for (d, g) in acc(&mut adj, *p, len).iter_mut().zip(&dy[off..off + len]) {
                            *d += g;
                        }
                        off += len;
                    }
                }
                Op::Slice(a, start) => {
                    let len = self.value(*a).len();
                    let da = acc(&mut adj, *a, len);
                    for (d, g) in da[*start..*start + dy.len()].iter_mut().zip(&dy) {
                        *d += g;
                    }
                }
                Op::Row(m, index) => {
                    let mv = self.value(*m);
                    let c = mv.cols();
                    let dm = acc(&mut adj, *m, mv.len());
                    for (d, g) in dm[index * c..(index + 1) * c].iter_mut().zip(&dy) {
                        *d += g;
                    }
                }
                Op::LogSoftmax(z) => {
                    let total: f64 = dy.iter().sum();
                    for ((d, g), ly) in acc(&mut adj, *z, dy.len()).iter_mut().zip(&dy).zip(y) {
                        *d += g - ly.exp() * total;
                    }
                }
                Op::Softmax(z) => {
                    let inner: f64 = dy.iter().zip(y).map(|(g, p)| g * p).sum();
                    for ((d, g), p) in acc(&mut adj, *z, dy.len()).iter_mut().zip(&dy).zip(y) {
                        *d += p * (g - inner);
                    }
                }
                Op::LogSoftmaxAt {
                    logits,
                    index,
                    exclude,
                } => {
                    let zd = self.data(*logits);
                    let lse = masked_lse(zd, *exclude);
                    let g = dy[0];
                    let dz = acc(&mut adj, *logits, zd.len());
                    for (k, (d, z)) in dz.iter_mut().zip(zd).enumerate() {
                        if Some(k) == *exclude {
                            continue;
                        }
                        let p = (z - lse).exp();
                        *d -= g * p;
                        if k == *index {
                            *d += g;
                        }
                    }
                }
                Op::Pick(a, index) => {
                    let len = self.value(*a).len();
                    acc(&mut adj, *a, len)[*index] += dy[0];
                }
                Op::Dot(a, b) => {
                    let (ad, bd) = (self.data(*a), self.data(*b));
                    let g = dy[0];
                    for (d, bv) in acc(&mut adj, *a, ad.len()).iter_mut().zip(bd) {
                        *d += g * bv;
                    }
                    for (d, av) in acc(&mut adj, *b, bd.len()).iter_mut().zip(ad) {
                        *d += g * av;
                    }
                }
                Op::Sum(terms) => {
                    for t in terms {
                        acc(&mut adj, *t, 1)[0] += dy[0];
                    }
                }
                Op::LogSumExp(terms) => {
                    let out = y[0];
                    for t in terms {
                        let w = (self.scalar(*t) - out).exp();
                        acc(&mut adj, *t, 1)[0] += dy[0] * w;
                    }
                }
            }
            adj[idx] = Some(dy);
        }

        let mut slots = vec![None; self.params.len()];
        for (p, node) in self.param_nodes.iter().enumerate() {
            if let Some(n) = node {
                if let Some(g) = adj[n.0].take() {
                    let shape = self.params.get(ParamId(p)).shape().to_vec();
                    slots[p] = Some(Array::from_vec(&shape, g)?);
                }
            }
        }
        Ok(Gradients {
            params: Grads::from_slots(slots),
            nodes: adj,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Array)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values.iter().map(|(n, a)| s.add(*n, a.clone())).collect();
        (s, ids)
    }

    #[test]
    fn square_gradient() {
        let (store, ids) = store_with(&[("x", Array::scalar(3.0))]);
        let mut g = Graph::new(&store);
        let x = g.param(ids[0]);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(g.scalar(y), 9.0);
        assert_eq!(grads.params().get(ids[0]).unwrap().data(), &[6.0]);
    }

    #[test]
    fn disconnected_parameter_has_no_gradient() {
        let (store, ids) = store_with(&[("x", Array::scalar(3.0)), ("z", Array::scalar(1.0))]);
        let mut g = Graph::new(&store);
        let x = g.param(ids[0]);
        let _z = g.param(ids[1]);
        let y = g.exp(x);
        let grads = g.backward(y).unwrap();
        assert!(grads.params().get(ids[1]).is_none());
        assert_eq!(grads.params().value_or_zero(ids[1], &store), vec![0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v = g.input(Array::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(v), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0, 0.0]);
        for p in &s {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&[1000.0, 0.0]);
        assert_eq!(s[0], 1.0);
        assert!(s[1] >= 0.0 && s[1] < 1e-300);
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn log_sigmoid_is_stable_at_extremes() {
        assert!(log_sigmoid(700.0).is_finite());
        assert!((log_sigmoid(-700.0) + 700.0).abs() < 1e-9);
        assert!(log_sigmoid(-700.0).is_finite());
        assert!(log_sigmoid(700.0) <= 0.0);
    }

    #[test]
    fn masked_log_softmax_excludes_entry() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let z = g.input(Array::vector(vec![0.0, 0.0, 0.0]));
        let lp = g.log_softmax_at(z, 0, Some(2)).unwrap();
        assert!((g.scalar(lp) - 0.5f64.ln()).abs() < 1e-15);
        assert!(g.log_softmax_at(z, 2, Some(2)).is_err());
    }
}
