//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only and records every operation
//! applied to its nodes. [`Graph::backward`] walks the tape in reverse and
//! returns a dense gradient for every parameter reachable from the loss.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor, LAYER_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named learned tensors. Names are dot-separated paths such as
/// `block.3.ffn.w1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds `grads` into every tensor's `grad` field.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (t, g) in self.tensors.iter_mut().zip(&grads.params) {
            if let Some(g) = g {
                t.accumulate_grad(g);
            }
        }
    }
}

/// Dense per-parameter gradients; `None` for parameters the loss never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    params: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients { params: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (acc, g) in self.params.iter_mut().zip(&other.params) {
            let Some(g) = g else { continue };
            match acc {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b),
                None => *acc = Some(g.iter().map(|b| scale * b).collect()),
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Gather { table: Var, ids: Vec<usize> },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Row { x: Var, index: usize },
    ScalarMix { states: Vec<Var>, logits: Var, gamma: Var, weights: Vec<f64> },
    CrossEntropy { logits: Var, gold: usize, probs: Vec<f64> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    /// Empty for parameter nodes; their values live in the store.
    value: Vec<f64>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { params, nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id).values(),
            _ => &node.value,
        }
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Single scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if value.len() != rows * cols {
            return Err(Error::Shape(format!(
                "input {rows}x{cols} given {} values",
                value.len()
            )));
        }
        Ok(self.push(rows, cols, value, Op::Leaf))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let (rows, cols) = self.params.get(id).matrix_dims();
        self.push(rows, cols, Vec::new(), Op::Param(id))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::Shape(format!("{what}: {da:?} vs {db:?}")));
        }
        Ok(da)
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(table);
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidInput(format!("row {bad} outside table of {rows}")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(ids.len(), cols, out, Op::Gather { table, ids: ids.to_vec() }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(r, c, out, Op::Add(a, b)))
    }

    /// Adds a 1×c row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(Error::Shape(format!("add_row: {:?} onto {r}x{c}", self.dims(row))));
        }
        let bias = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(c) {
            chunk.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(r, c, out, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(r, c, out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(r, c, out, Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} · {k2}x{n}")));
        }
        let out = tensor::matmul(self.value(a), self.value(b), m, k, n);
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    /// `a · w + b` for a weight matrix and a bias row.
    pub fn linear(&mut self, a: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(a, w)?;
        self.add_row(h, b)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| tensor::gelu(x)).collect();
        self.push(r, c, out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) || self.dims(bias) != (1, c) {
            return Err(Error::Shape(format!("layer norm width {c}")));
        }
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        tensor::layer_norm_kernel(
            self.value(x),
            c,
            self.value(gain),
            self.value(bias),
            LAYER_NORM_EPS,
            &mut out,
            &mut xhat,
            &mut inv_std,
        );
        Ok(self.push(r, c, out, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Multi-head self-attention core; `key_mask[j] == false` hides key j.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_mask: &[bool]) -> Result<Var> {
        let (n, d) = self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        if heads == 0 || d % heads != 0 || key_mask.len() != n || !key_mask.iter().any(|&m| m) {
            return Err(Error::Shape(format!(
                "attention over {n}x{d} with {heads} heads and {} mask entries",
                key_mask.len()
            )));
        }
        let (out, probs) =
            tensor::attention(self.value(q), self.value(k), self.value(v), n, d, heads, key_mask);
        Ok(self.push(n, d, out, Op::Attention { q, k, v, heads, probs }))
    }

    /// Inverted dropout with a precomputed keep mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if mask.len() != r * c {
            return Err(Error::Shape("dropout mask".into()));
        }
        let out = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        Ok(self.push(r, c, out, Op::Dropout { x, mask }))
    }

    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if index >= r {
            return Err(Error::Shape(format!("row {index} of {r}")));
        }
        let out = self.value(x)[index * c..(index + 1) * c].to_vec();
        Ok(self.push(1, c, out, Op::Row { x, index }))
    }

    /// `gamma · Σ_j softmax(logits)_j · states_j` over equally shaped states.
    pub fn scalar_mix(&mut self, states: &[Var], logits: Var, gamma: Var) -> Result<Var> {
        let Some(&first) = states.first() else {
            return Err(Error::InvalidArgument("scalar mix over zero states".into()));
        };
        let (r, c) = self.dims(first);
        if self.dims(logits) != (1, states.len()) || self.dims(gamma) != (1, 1) {
            return Err(Error::Shape(format!(
                "scalar mix of {} states with logits {:?}",
                states.len(),
                self.dims(logits)
            )));
        }
        for &s in states {
            self.same_shape(first, s, "scalar mix states")?;
        }
        let mut weights = self.value(logits).to_vec();
        tensor::softmax_in_place(&mut weights, 1.0);
        let values: Vec<&[f64]> = states.iter().map(|&s| self.value(s)).collect();
        let out = mix_kernel(&values, &weights, self.scalar(gamma));
        Ok(self.push(r, c, out, Op::ScalarMix { states: states.to_vec(), logits, gamma, weights }))
    }

    /// Softmax cross-entropy of a 1×C logits row against `gold`.
    pub fn cross_entropy(&mut self, logits: Var, gold: usize) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if r != 1 || gold >= c {
            return Err(Error::InvalidArgument(format!(
                "cross entropy over {r}x{c} logits with gold {gold}"
            )));
        }
        let z = self.value(logits);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[gold];
        let probs = z.iter().map(|v| (v - lse).exp()).collect();
        Ok(self.push(1, 1, vec![loss], Op::CrossEntropy { logits, gold, probs }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self.params);
        self.backward_into(loss, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Reverse pass adding `scale · ∂loss/∂θ` into `acc`.
    pub fn backward_into(&self, loss: Var, scale: f64, acc: &mut Gradients) -> Result<()> {
        let node_grads = self.node_grads(loss, scale)?;
        for (node, g) in self.nodes.iter().zip(node_grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                match &mut acc.params[id.0] {
                    Some(a) => a.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to an arbitrary node, e.g. an input.
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Result<Vec<f64>> {
        let mut g = self.node_grads(loss, 1.0)?;
        let (r, c) = self.dims(wrt);
        Ok(g[wrt.0].take().unwrap_or_else(|| vec![0.0; r * c]))
    }

    fn node_grads(&self, loss: Var, seed: f64) -> Result<Vec<Option<Vec<f64>>>> {
        if self.dims(loss) != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![seed]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Gather { table, ids } => {
                    let (rows, cols) = self.dims(*table);
                    let acc = slot(&mut grads, *table, rows * cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            acc[id * cols + c] += g[r * cols + c];
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    add_into(slot(&mut grads, *b, g.len()), &g);
                }
                Op::AddRow(a, row) => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    let c = node.cols;
                    let acc = slot(&mut grads, *row, c);
                    for chunk in g.chunks(c) {
                        add_into(acc, chunk);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, gv), y) in ga.iter_mut().zip(&g).zip(vb) {
                        *o += gv * y;
                    }
                    let gb = slot(&mut grads, *b, g.len());
                    for ((o, gv), x) in gb.iter_mut().zip(&g).zip(va) {
                        *o += gv * x;
                    }
                }
                Op::Scale(a, s) => {
                    let ga = slot(&mut grads, *a, g.len());
                    ga.iter_mut().zip(&g).for_each(|(o, gv)| *o += s * gv);
                }
                Op::MatMul(a, b) => {
                    let ((m, k), (_, n)) = (self.dims(*a), self.dims(*b));
                    let (va, vb) = (self.value(*a), self.value(*b));
                    tensor::matmul_grad_a(&g, vb, m, k, n, slot(&mut grads, *a, m * k));
                    tensor::matmul_grad_b(va, &g, m, k, n, slot(&mut grads, *b, k * n));
                }
                Op::Gelu(a) => {
                    let va = self.value(*a);
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, gv), &x) in ga.iter_mut().zip(&g).zip(va) {
                        *o += gv * tensor::gelu_grad(x);
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let c = node.cols;
                    let gv = self.value(*gain);
                    {
                        let gg = slot(&mut grads, *gain, c);
                        for (r, chunk) in g.chunks(c).enumerate() {
                            for j in 0..c {
                                gg[j] += chunk[j] * xhat[r * c + j];
                            }
                        }
                    }
                    {
                        let gb = slot(&mut grads, *bias, c);
                        for chunk in g.chunks(c) {
                            add_into(gb, chunk);
                        }
                    }
                    let gx = slot(&mut grads, *x, g.len());
                    let mut dxhat = vec![0.0; c];
                    for (r, chunk) in g.chunks(c).enumerate() {
                        let xh = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = chunk[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = tensor::dot(&dxhat, xh) / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += inv_std[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (n, d) = (node.rows, node.cols);
                    let mut dq = vec![0.0; n * d];
                    let mut dk = vec![0.0; n * d];
                    let mut dv = vec![0.0; n * d];
                    tensor::attention_grad(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        &g,
                        n,
                        d,
                        *heads,
                        &mut dq,
                        &mut dk,
                        &mut dv,
                    );
                    add_into(slot(&mut grads, *q, n * d), &dq);
                    add_into(slot(&mut grads, *k, n * d), &dk);
                    add_into(slot(&mut grads, *v, n * d), &dv);
                }
                Op::Dropout { x, mask } => {
                    let gx = slot(&mut grads, *x, g.len());
                    for ((o, gv), m) in gx.iter_mut().zip(&g).zip(mask) {
                        *o += gv * m;
                    }
                }
                Op::Row { x, index } => {
                    let (r, c) = self.dims(*x);
                    let gx = slot(&mut grads, *x, r * c);
                    add_into(&mut gx[index * c..(index + 1) * c], &g);
                }
                Op::ScalarMix { states, logits, gamma, weights } => {
                    let gamma_v = self.scalar(*gamma);
                    let mut dw = Vec::with_capacity(states.len());
                    let mut dgamma = 0.0;
                    for (j, &s) in states.iter().enumerate() {
                        let proj = tensor::dot(self.value(s), &g);
                        dgamma += weights[j] * proj;
                        dw.push(gamma_v * proj);
                        let gs = slot(&mut grads, s, g.len());
                        for (o, gv) in gs.iter_mut().zip(&g) {
                            *o += gamma_v * weights[j] * gv;
                        }
                    }
                    let wd = tensor::dot(weights, &dw);
                    let gl = slot(&mut grads, *logits, states.len());
                    for j in 0..states.len() {
                        gl[j] += weights[j] * (dw[j] - wd);
                    }
                    slot(&mut grads, *gamma, 1)[0] += dgamma;
                }
                Op::CrossEntropy { logits, gold, probs } => {
                    let gl = slot(&mut grads, *logits, probs.len());
                    for (j, p) in probs.iter().enumerate() {
                        let onehot = if j == *gold { 1.0 } else { 0.0 };
                        gl[j] += g[0] * (p - onehot);
                    }
                }
                Op::Sum(a) => {
                    let (r, c) = self.dims(*a);
                    let ga = slot(&mut grads, *a, r * c);
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
        }
        Ok(grads)
    }
}

pub(crate) fn mix_kernel(states: &[&[f64]], weights: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; states[0].len()];
    for (s, w) in states.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(s.iter()) {
            *o += w * v;
        }
    }
    out.iter_mut().for_each(|o| *o *= gamma);
    out
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, shape: Vec<usize>, values: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert(name, Tensor::new(shape, values).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let (store, id) = store_with("w", vec![5], vec![0.3, -1.0, 2.0, 4.0, 0.0]);
        let mut g = Graph::new(&store);
        let w = g.param(id);
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(id).unwrap(), &[1.0; 5]);
    }

    #[test]
    fn square_gradient() {
        let (mut store, id) = store_with("w", vec![1], vec![3.0]);
        let grads = {
            let mut g = Graph::new(&store);
            let w = g.param(id);
            let sq = g.mul(w, w).unwrap();
            let loss = g.sum(sq);
            g.backward(loss).unwrap()
        };
        assert_eq!(grads.get(id).unwrap(), &[6.0]);
        store.accumulate(&grads);
        assert_eq!(store.get(id).grad(), Some(&[6.0][..]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (store, id) = store_with("w", vec![2], vec![1.0, 2.0]);
        let mut g = Graph::new(&store);
        let w = g.param(id);
        assert!(matches!(g.backward(w), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn untouched_params_have_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let b = store.insert("b", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let mut g = Graph::new(&store);
        let va = g.param(a);
        let loss = g.sum(va);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::zeros(vec![1])).unwrap();
        assert!(s.insert("x", Tensor::zeros(vec![1])).is_err());
    }

    // Central differences over every input coordinate of a composite
    // expression touching each op.
    #[test]
    fn composite_matches_central_differences() {
        let n = 3;
        let d = 4;
        let x0: Vec<f64> = (0..n * d).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.21).collect();
        let mut store = ParamStore::new();
        let w = store
            .insert("w", Tensor::new(vec![d, d], (0..d * d).map(|i| ((i as f64) * 0.77).sin() * 0.5).collect()).unwrap())
            .unwrap();
        let gain = store.insert("g", Tensor::new(vec![d], vec![1.1, 0.9, 1.3, 0.7]).unwrap()).unwrap();
        let bias = store.insert("b", Tensor::new(vec![d], vec![0.1, -0.2, 0.0, 0.3]).unwrap()).unwrap();
        let mix = store.insert("m", Tensor::new(vec![2], vec![0.4, -0.3]).unwrap()).unwrap();
        let gamma = store.insert("gm", Tensor::new(vec![1], vec![1.2]).unwrap()).unwrap();
        let head = store
            .insert("h", Tensor::new(vec![d, 3], (0..d * 3).map(|i| ((i as f64) * 1.3).cos() * 0.4).collect()).unwrap())
            .unwrap();

        let f = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut g = Graph::new(&store);
            let xi = g.input(n, d, x.to_vec()).unwrap();
            let (wv, gv, bv) = (g.param(w), g.param(gain), g.param(bias));
            let h = g.layer_norm(xi, gv, bv).unwrap();
            let q = g.matmul(h, wv).unwrap();
            let a = g.attention(q, h, xi, 2, &[true, false, true]).unwrap();
            let a = g.gelu(a);
            let r = g.add(a, xi).unwrap();
            let p0 = g.row(xi, 0).unwrap();
            let p1 = g.row(r, 0).unwrap();
            let (mv, gmv) = (g.param(mix), g.param(gamma));
            let m = g.scalar_mix(&[p0, p1], mv, gmv).unwrap();
            let hv = g.param(head);
            let z = g.matmul(m, hv).unwrap();
            let loss = g.cross_entropy(z, 2).unwrap();
            let s = g.scale(loss, 0.5);
            (g.scalar(s), g.grad_of(s, xi).unwrap())
        };

        let (_, analytic) = f(&x0);
        let eps = 1e-5;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp[i] += eps;
            let mut xm = x0.clone();
            xm[i] -= eps;
            let numeric = (f(&xp).0 - f(&xm).0) / (2.0 * eps);
            let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-5, "coord {i}: numeric {numeric} analytic {}", analytic[i]);
        }
    }
}
