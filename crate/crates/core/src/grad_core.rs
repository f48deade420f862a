//! Reverse-mode differentiation over a fixed set of tensor primitives.
//!
//! A [`Tape`] records nodes in construction order, evaluating each one
//! eagerly. Leaves are either constants or copies of [`ParamTensor`] data
//! keyed by [`ParamKey`]. The tape can be re-evaluated after its leaves are
//! perturbed ([`Tape::forward_eval`]), which is what the finite-difference
//! harness relies on; augmentation draws are the only non-differentiable
//! inputs and are frozen inside their nodes.

use crate::error::{Error, Result};

/// Identifies a parameter tensor: `group` selects the owning store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub group: u32,
    pub index: u32,
}

/// A learnable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "parameter data length must equal the product of its shape"
        );
        let grad = vec![0.0; data.len()];
        Self {
            name: name.into(),
            shape,
            data,
            grad,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// An ordered collection of parameter tensors sharing one group id.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    group: u32,
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new(group: u32) -> Self {
        Self {
            group,
            tensors: Vec::new(),
        }
    }

    pub fn group(&self) -> u32 {
        self.group
    }

    pub fn add(&mut self, tensor: ParamTensor) -> ParamKey {
        self.tensors.push(tensor);
        ParamKey {
            group: self.group,
            index: (self.tensors.len() - 1) as u32,
        }
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey {
            group: self.group,
            index: index as u32,
        }
    }

    pub fn get(&self, key: ParamKey) -> &ParamTensor {
        debug_assert_eq!(key.group, self.group);
        &self.tensors[key.index as usize]
    }

    pub fn get_mut(&mut self, key: ParamKey) -> &mut ParamTensor {
        debug_assert_eq!(key.group, self.group);
        &mut self.tensors[key.index as usize]
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(ParamTensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the tape's adjoints for this store's parameters into `grad`.
    pub fn accumulate(&mut self, tape: &Tape) {
        for (key, node) in tape.param_leaves() {
            if key.group != self.group {
                continue;
            }
            let adj = tape.grad(node);
            if adj.is_empty() {
                continue;
            }
            let t = &mut self.tensors[key.index as usize];
            for (g, a) in t.grad.iter_mut().zip(adj) {
                *g += a;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Frozen per-row draw of the color augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub gamma: Vec<f64>,
    pub delta: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl AugmentDraw {
    pub fn identity(rows: usize) -> Self {
        Self {
            gamma: vec![1.0; rows],
            delta: vec![0.0; rows],
            lambda: vec![1.0; rows],
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param { key: ParamKey, name: String },
    Const,
    /// `x [B, in]`, `w [out, in]`, `b [out]` -> `[B, out]`.
    Affine { x: NodeId, w: NodeId, b: Option<NodeId> },
    /// `x [B, Cin, L]`, `w [Cout, Cin, K]`, `b [Cout]` -> `[B, Cout, L]`, zero "same" padding.
    Conv1d { x: NodeId, w: NodeId, b: NodeId },
    LeakyRelu { x: NodeId, slope: f64 },
    Sigmoid(NodeId),
    Log(NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId, c: f64 },
    Reshape(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    /// Squashing over the last axis.
    Squash(NodeId),
    /// Euclidean norm over the last axis (axis removed).
    Norm(NodeId),
    /// Mean of all entries, scalar result.
    Mean(NodeId),
    /// `u [B, n, din]`, `w [n, dout, din]` -> `[B, n, dout]`.
    CapsuleVotes { u: NodeId, w: NodeId },
    /// Softmax over the last axis.
    Softmax(NodeId),
    /// `votes [B, n, d]` weighted by `coupling [B, n]` -> `[B, d]`.
    WeightedSum { votes: NodeId, coupling: NodeId },
    /// Dot products `votes [B, n, d]` . `out [B, d]` -> `[B, n]`.
    Agreement { votes: NodeId, out: NodeId },
    /// Per-row contrast, brightness and saturation mix over `x [B, L]`.
    Augment { x: NodeId, draw: AugmentDraw },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Recorded computation graph with values and adjoints.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    adjoints: Vec<Vec<f64>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `c = alpha * a * b + beta * c` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| {
        (rows.saturating_sub(1)) * rs + (cols.saturating_sub(1)) * cs
    };
    assert!(k == 0 || last(m, k, rsa, csa) < a.len());
    assert!(k == 0 || last(k, n, rsb, csb) < b.len());
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: every index touched by dgemm is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub(crate) fn squash_factor(norm: f64) -> f64 {
    // |v| = n^2 / (1 + n^2), v = s * n / (1 + n^2)
    norm / (1.0 + norm * norm)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "node {} is not scalar", id.0);
        v[0]
    }

    /// Adjoint of a node after [`Tape::backprop`]; empty when the node does
    /// not lead to the root or needs no gradient.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        self.adjoints.get(id.0).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn param_leaves(&self) -> impl Iterator<Item = (ParamKey, NodeId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.op {
            Op::Param { key, .. } => Some((*key, NodeId(i))),
            _ => None,
        })
    }

    fn param_name(&self, id: NodeId) -> &str {
        match &self.nodes[id.0].op {
            Op::Param { name, .. } => name,
            _ => "",
        }
    }

    /// Overwrites one element of a leaf (parameter or constant). Call
    /// [`Tape::forward_eval`] afterwards to refresh dependent nodes.
    pub fn set_leaf_value(&mut self, id: NodeId, index: usize, value: f64) {
        let node = &mut self.nodes[id.0];
        assert!(matches!(node.op, Op::Param { .. } | Op::Const), "node is not a leaf");
        node.value[index] = value;
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, needs_grad: bool) -> NodeId {
        let value = self.compute(&op, &shape);
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn sh(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    // ---- leaves -------------------------------------------------------

    pub fn param(&mut self, key: ParamKey, tensor: &ParamTensor, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Param {
                key,
                name: tensor.name.clone(),
            },
            shape: tensor.shape.clone(),
            value: tensor.data.clone(),
            needs_grad: trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        assert_eq!(data.len(), numel(&shape), "constant data does not fit its shape");
        self.nodes.push(Node {
            op: Op::Const,
            shape,
            value: data,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(vec![], vec![v])
    }

    // ---- primitives ---------------------------------------------------

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (xs, ws) = (self.sh(x), self.sh(w));
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "affine shapes {xs:?} x {ws:?}");
        if let Some(b) = b {
            assert_eq!(self.sh(b), &[ws[0]], "affine bias shape");
        }
        let shape = vec![xs[0], ws[0]];
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Op::Affine { x, w, b }, shape, ng)
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xs, ws) = (self.sh(x), self.sh(w));
        assert!(xs.len() == 3 && ws.len() == 3 && xs[1] == ws[1], "conv1d shapes {xs:?} * {ws:?}");
        assert!(ws[2] % 2 == 1, "conv1d kernel width must be odd");
        assert_eq!(self.sh(b), &[ws[0]], "conv1d bias shape");
        let shape = vec![xs[0], ws[0], xs[2]];
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Op::Conv1d { x, w, b }, shape, ng)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let shape = self.sh(x).to_vec();
        let ng = self.ng(x);
        self.push(Op::LeakyRelu { x, slope }, shape, ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let shape = self.sh(x).to_vec();
        let ng = self.ng(x);
        self.push(Op::Sigmoid(x), shape, ng)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let shape = self.sh(x).to_vec();
        let ng = self.ng(x);
        self.push(Op::Log(x), shape, ng)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let shape = self.sh(x).to_vec();
        let ng = self.ng(x);
        self.push(Op::Clamp { x, lo, hi }, shape, ng)
    }

    fn binary_shape(&self, a: NodeId, b: NodeId) -> Vec<usize> {
        assert_eq!(
            numel(self.sh(a)),
            numel(self.sh(b)),
            "elementwise operands {:?} and {:?}",
            self.sh(a),
            self.sh(b)
        );
        self.sh(a).to_vec()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let shape = self.binary_shape(a, b);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), shape, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let shape = self.binary_shape(a, b);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), shape, ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let shape = self.binary_shape(a, b);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), shape, ng)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let shape = self.sh(x).to_vec();
        let ng = self.ng(x);
        self.push(Op::Scale { x, c }, shape, ng)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let shape = self.sh(x).to_vec();
        let ng = self.ng(x);
        self.push(Op::AddScalar { x, c }, shape, ng)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        assert_eq!(numel(&shape), numel(self.sh(x)), "reshape must preserve size");
        let ng = self.ng(x);
        self.push(Op::Reshape(x), shape, ng)
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> NodeId {
        assert!(!inputs.is_empty());
        let first = self.sh(inputs[0]).to_vec();
        assert!(axis < first.len());
        let mut shape = first.clone();
        shape[axis] = 0;
        for &id in inputs {
            let s = self.sh(id);
            assert_eq!(s.len(), first.len());
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shapes {s:?} vs {first:?}");
            }
            shape[axis] += s[axis];
        }
        let ng = inputs.iter().any(|&i| self.ng(i));
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            shape,
            ng,
        )
    }

    pub fn squash(&mut self, x: NodeId) -> NodeId {
        let shape = self.sh(x).to_vec();
        assert!(!shape.is_empty());
        let ng = self.ng(x);
        self.push(Op::Squash(x), shape, ng)
    }

    pub fn norm(&mut self, x: NodeId) -> NodeId {
        let mut shape = self.sh(x).to_vec();
        assert!(!shape.is_empty());
        shape.pop();
        let ng = self.ng(x);
        self.push(Op::Norm(x), shape, ng)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        assert!(numel(self.sh(x)) > 0, "mean of an empty tensor");
        let ng = self.ng(x);
        self.push(Op::Mean(x), vec![], ng)
    }

    pub fn capsule_votes(&mut self, u: NodeId, w: NodeId) -> NodeId {
        let (us, ws) = (self.sh(u), self.sh(w));
        assert!(
            us.len() == 3 && ws.len() == 3 && us[1] == ws[0] && us[2] == ws[2],
            "capsule votes shapes {us:?} with {ws:?}"
        );
        let shape = vec![us[0], us[1], ws[1]];
        let ng = self.ng(u) || self.ng(w);
        self.push(Op::CapsuleVotes { u, w }, shape, ng)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let shape = self.sh(x).to_vec();
        assert!(!shape.is_empty());
        let ng = self.ng(x);
        self.push(Op::Softmax(x), shape, ng)
    }

    pub fn weighted_sum(&mut self, votes: NodeId, coupling: NodeId) -> NodeId {
        let (vs, cs) = (self.sh(votes), self.sh(coupling));
        assert!(vs.len() == 3 && cs == [vs[0], vs[1]], "coupling {cs:?} must be [B, n] for votes {vs:?}");
        let shape = vec![vs[0], vs[2]];
        let ng = self.ng(votes) || self.ng(coupling);
        self.push(Op::WeightedSum { votes, coupling }, shape, ng)
    }

    pub fn agreement(&mut self, votes: NodeId, out: NodeId) -> NodeId {
        let (vs, os) = (self.sh(votes), self.sh(out));
        assert!(vs.len() == 3 && os == [vs[0], vs[2]], "output {os:?} does not match votes {vs:?}");
        let shape = vec![vs[0], vs[1]];
        let ng = self.ng(votes) || self.ng(out);
        self.push(Op::Agreement { votes, out }, shape, ng)
    }

    pub fn augment(&mut self, x: NodeId, draw: AugmentDraw) -> NodeId {
        let xs = self.sh(x);
        assert!(xs.len() == 2, "augment expects [B, L]");
        assert!(draw.gamma.len() == xs[0] && draw.delta.len() == xs[0] && draw.lambda.len() == xs[0]);
        let shape = xs.to_vec();
        let ng = self.ng(x);
        self.push(Op::Augment { x, draw }, shape, ng)
    }

    // ---- evaluation ---------------------------------------------------

    fn compute(&self, op: &Op, shape: &[usize]) -> Vec<f64> {
        let val = |id: &NodeId| self.nodes[id.0].value.as_slice();
        let map = |id: &NodeId, f: &dyn Fn(f64) -> f64| val(id).iter().map(|&v| f(v)).collect();
        match op {
            Op::Param { .. } | Op::Const => unreachable!("leaves are not recomputed"),
            Op::Affine { x, w, b } => {
                let (bsz, out) = (shape[0], shape[1]);
                let inp = self.sh(*x)[1];
                let mut y = vec![0.0; bsz * out];
                if let Some(b) = b {
                    for row in y.chunks_exact_mut(out) {
                        row.copy_from_slice(val(b));
                    }
                }
                gemm(bsz, inp, out, val(x), (inp, 1), val(w), (1, inp), 1.0, &mut y, (out, 1));
                y
            }
            Op::Conv1d { x, w, b } => {
                let xs = self.sh(*x);
                let ws = self.sh(*w);
                let (bsz, cin, len) = (xs[0], xs[1], xs[2]);
                let (cout, kw) = (ws[0], ws[2]);
                let pad = kw / 2;
                let (xv, wv, bv) = (val(x), val(w), val(b));
                let mut y = vec![0.0; bsz * cout * len];
                for bi in 0..bsz {
                    for o in 0..cout {
                        let yrow = &mut y[(bi * cout + o) * len..(bi * cout + o + 1) * len];
                        yrow.iter_mut().for_each(|v| *v = bv[o]);
                        for c in 0..cin {
                            let xrow = &xv[(bi * cin + c) * len..(bi * cin + c + 1) * len];
                            let wrow = &wv[(o * cin + c) * kw..(o * cin + c + 1) * kw];
                            for (k, &wk) in wrow.iter().enumerate() {
                                // y[l] += wk * x[l + k - pad]
                                let lo = pad.saturating_sub(k);
                                let hi = (len + pad).saturating_sub(k).min(len);
                                for l in lo..hi {
                                    yrow[l] += wk * xrow[l + k - pad];
                                }
                            }
                        }
                    }
                }
                y
            }
            Op::LeakyRelu { x, slope } => {
                let s = *slope;
                map(x, &|v| if v > 0.0 { v } else { s * v })
            }
            Op::Sigmoid(x) => map(x, &sigmoid),
            Op::Log(x) => map(x, &f64::ln),
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                map(x, &|v| v.clamp(lo, hi))
            }
            Op::Add(a, b) => val(a).iter().zip(val(b)).map(|(x, y)| x + y).collect(),
            Op::Sub(a, b) => val(a).iter().zip(val(b)).map(|(x, y)| x - y).collect(),
            Op::Mul(a, b) => val(a).iter().zip(val(b)).map(|(x, y)| x * y).collect(),
            Op::Scale { x, c } => {
                let c = *c;
                map(x, &|v| v * c)
            }
            Op::AddScalar { x, c } => {
                let c = *c;
                map(x, &|v| v + c)
            }
            Op::Reshape(x) => val(x).to_vec(),
            Op::Concat { inputs, axis } => {
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut y = Vec::with_capacity(numel(shape));
                for o in 0..outer {
                    for id in inputs {
                        let block = self.sh(*id)[*axis] * inner;
                        y.extend_from_slice(&val(id)[o * block..(o + 1) * block]);
                    }
                }
                y
            }
            Op::Squash(x) => {
                let d = *shape.last().expect("non-scalar");
                let mut y = val(x).to_vec();
                for cap in y.chunks_exact_mut(d) {
                    let n = cap.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let f = squash_factor(n);
                    cap.iter_mut().for_each(|v| *v *= f);
                }
                y
            }
            Op::Norm(x) => {
                let d = *self.sh(*x).last().expect("non-scalar");
                val(x)
                    .chunks_exact(d)
                    .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect()
            }
            Op::Mean(x) => {
                let v = val(x);
                vec![v.iter().sum::<f64>() / v.len() as f64]
            }
            Op::CapsuleVotes { u, w } => {
                let us = self.sh(*u);
                let (bsz, n, din) = (us[0], us[1], us[2]);
                let dout = shape[2];
                let (uv, wv) = (val(u), val(w));
                let mut y = vec![0.0; bsz * n * dout];
                for j in 0..n {
                    gemm(
                        bsz,
                        din,
                        dout,
                        &uv[j * din..],
                        (n * din, 1),
                        &wv[j * dout * din..(j + 1) * dout * din],
                        (1, din),
                        0.0,
                        &mut y[j * dout..],
                        (n * dout, 1),
                    );
                }
                y
            }
            Op::Softmax(x) => {
                let d = *shape.last().expect("non-scalar");
                let mut y = val(x).to_vec();
                for row in y.chunks_exact_mut(d) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    row.iter_mut().for_each(|v| *v = (*v - m).exp());
                    let z: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= z);
                }
                y
            }
            Op::Agreement { votes, out } => {
                let vs = self.sh(*votes);
                let (bsz, n, d) = (vs[0], vs[1], vs[2]);
                let (vv, ov) = (val(votes), val(out));
                let mut y = vec![0.0; bsz * n];
                for b in 0..bsz {
                    let o = &ov[b * d..(b + 1) * d];
                    for j in 0..n {
                        y[b * n + j] = vv[(b * n + j) * d..(b * n + j + 1) * d].iter().zip(o).map(|(a, c)| a * c).sum();
                    }
                }
                y
            }
            Op::WeightedSum { votes, coupling } => {
                let vs = self.sh(*votes);
                let (bsz, n, d) = (vs[0], vs[1], vs[2]);
                let (vv, cv) = (val(votes), val(coupling));
                let mut y = vec![0.0; bsz * d];
                for b in 0..bsz {
                    let out = &mut y[b * d..(b + 1) * d];
                    for j in 0..n {
                        let c = cv[b * n + j];
                        let vote = &vv[(b * n + j) * d..(b * n + j + 1) * d];
                        for (o, &v) in out.iter_mut().zip(vote) {
                            *o += c * v;
                        }
                    }
                }
                y
            }
            Op::Augment { x, draw } => augment_forward(val(x), shape[0], shape[1], draw),
        }
    }

    /// Recomputes every non-leaf node from the current leaf values and
    /// returns the scalar at `root`.
    pub fn forward_eval(&mut self, root: NodeId) -> Result<f64> {
        for i in 0..self.nodes.len() {
            if !matches!(self.nodes[i].op, Op::Param { .. } | Op::Const) {
                let value = self.compute(&self.nodes[i].op, &self.nodes[i].shape);
                self.nodes[i].value = value;
            }
            if self.nodes[i].value.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteIntermediate(i));
            }
        }
        self.adjoints.clear();
        let v = self.value(root);
        if v.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "root node {} has {} entries, expected a scalar",
                root.0,
                v.len()
            )));
        }
        Ok(v[0])
    }

    /// Propagates adjoints from the scalar `root` back to every node that
    /// needs a gradient.
    pub fn backprop(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::ShapeMismatch("backprop root must be scalar".into()));
        }
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        adj[root.0] = vec![1.0];
        for i in (0..=root.0).rev() {
            if adj[i].is_empty() || !self.nodes[i].needs_grad {
                continue;
            }
            let dy = std::mem::take(&mut adj[i]);
            if dy.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteIntermediate(i));
            }
            self.backward_node(i, &dy, &mut adj);
            adj[i] = dy;
        }
        self.adjoints = adj;
        Ok(())
    }

    fn backward_node(&self, i: usize, dy: &[f64], adj: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let val = |id: &NodeId| self.nodes[id.0].value.as_slice();
        let ng = |id: &NodeId| self.nodes[id.0].needs_grad;
        // Lazily allocated accumulator for an input node.
        fn slot<'a>(adj: &'a mut [Vec<f64>], id: NodeId, len: usize) -> &'a mut Vec<f64> {
            let a = &mut adj[id.0];
            if a.is_empty() {
                *a = vec![0.0; len];
            }
            a
        }
        let len_of = |id: &NodeId| self.nodes[id.0].value.len();

        match &node.op {
            Op::Param { .. } | Op::Const => {}
            Op::Affine { x, w, b } => {
                let (bsz, out) = (node.shape[0], node.shape[1]);
                let inp = self.sh(*x)[1];
                if ng(x) {
                    let gx = slot(adj, *x, len_of(x));
                    gemm(bsz, out, inp, dy, (out, 1), val(w), (inp, 1), 1.0, gx, (inp, 1));
                }
                if ng(w) {
                    let gw = slot(adj, *w, len_of(w));
                    gemm(out, bsz, inp, dy, (1, out), val(x), (inp, 1), 1.0, gw, (inp, 1));
                }
                if let Some(b) = b {
                    if ng(b) {
                        let gb = slot(adj, *b, out);
                        for row in dy.chunks_exact(out) {
                            for (g, d) in gb.iter_mut().zip(row) {
                                *g += d;
                            }
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b } => {
                let xs = self.sh(*x);
                let ws = self.sh(*w);
                let (bsz, cin, len) = (xs[0], xs[1], xs[2]);
                let (cout, kw) = (ws[0], ws[2]);
                let pad = kw / 2;
                let (xv, wv) = (val(x), val(w));
                if ng(b) {
                    let gb = slot(adj, *b, cout);
                    for bi in 0..bsz {
                        for (o, g) in gb.iter_mut().enumerate() {
                            *g += dy[(bi * cout + o) * len..(bi * cout + o + 1) * len].iter().sum::<f64>();
                        }
                    }
                }
                if ng(w) {
                    let gw = slot(adj, *w, len_of(w));
                    for bi in 0..bsz {
                        for o in 0..cout {
                            let dyrow = &dy[(bi * cout + o) * len..(bi * cout + o + 1) * len];
                            for c in 0..cin {
                                let xrow = &xv[(bi * cin + c) * len..(bi * cin + c + 1) * len];
                                for k in 0..kw {
                                    let lo = pad.saturating_sub(k);
                                    let hi = (len + pad).saturating_sub(k).min(len);
                                    let mut acc = 0.0;
                                    for l in lo..hi {
                                        acc += dyrow[l] * xrow[l + k - pad];
                                    }
                                    gw[(o * cin + c) * kw + k] += acc;
                                }
                            }
                        }
                    }
                }
                if ng(x) {
                    let gx = slot(adj, *x, len_of(x));
                    for bi in 0..bsz {
                        for o in 0..cout {
                            let dyrow = &dy[(bi * cout + o) * len..(bi * cout + o + 1) * len];
                            for c in 0..cin {
                                let gxrow = &mut gx[(bi * cin + c) * len..(bi * cin + c + 1) * len];
                                for k in 0..kw {
                                    let wk = wv[(o * cin + c) * kw + k];
                                    let lo = pad.saturating_sub(k);
                                    let hi = (len + pad).saturating_sub(k).min(len);
                                    for l in lo..hi {
                                        gxrow[l + k - pad] += wk * dyrow[l];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                if ng(x) {
                    let xv = val(x);
                    let g = slot(adj, *x, xv.len());
                    for ((g, &v), &d) in g.iter_mut().zip(xv).zip(dy) {
                        *g += if v > 0.0 { d } else { slope * d };
                    }
                }
            }
            Op::Sigmoid(x) => {
                if ng(x) {
                    let yv = &node.value;
                    let g = slot(adj, *x, yv.len());
                    for ((g, &y), &d) in g.iter_mut().zip(yv).zip(dy) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            Op::Log(x) => {
                if ng(x) {
                    let xv = val(x);
                    let g = slot(adj, *x, xv.len());
                    for ((g, &v), &d) in g.iter_mut().zip(xv).zip(dy) {
                        *g += d / v;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                if ng(x) {
                    let xv = val(x);
                    let g = slot(adj, *x, xv.len());
                    for ((g, &v), &d) in g.iter_mut().zip(xv).zip(dy) {
                        if v >= *lo && v <= *hi {
                            *g += d;
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if ng(a) {
                    let g = slot(adj, *a, dy.len());
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if ng(b) {
                    let g = slot(adj, *b, dy.len());
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += sign * d);
                }
            }
            Op::Mul(a, b) => {
                if ng(a) {
                    let bv = val(b);
                    let g = slot(adj, *a, dy.len());
                    for ((g, &o), &d) in g.iter_mut().zip(bv).zip(dy) {
                        *g += d * o;
                    }
                }
                if ng(b) {
                    let av = val(a);
                    let g = slot(adj, *b, dy.len());
                    for ((g, &o), &d) in g.iter_mut().zip(av).zip(dy) {
                        *g += d * o;
                    }
                }
            }
            Op::Scale { x, c } => {
                if ng(x) {
                    let g = slot(adj, *x, dy.len());
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d);
                }
            }
            Op::AddScalar { x, .. } | Op::Reshape(x) => {
                if ng(x) {
                    let g = slot(adj, *x, dy.len());
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let mut offset = 0;
                for o in 0..outer {
                    for id in inputs {
                        let block = self.sh(*id)[*axis] * inner;
                        if ng(id) {
                            let g = slot(adj, *id, len_of(id));
                            for (g, d) in g[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(&dy[offset..offset + block])
                            {
                                *g += d;
                            }
                        }
                        offset += block;
                    }
                }
            }
            Op::Squash(x) => {
                if ng(x) {
                    let d = *node.shape.last().expect("non-scalar");
                    let xv = val(x);
                    let g = slot(adj, *x, xv.len());
                    for ((gc, sc), dc) in g.chunks_exact_mut(d).zip(xv.chunks_exact(d)).zip(dy.chunks_exact(d)) {
                        let n2: f64 = sc.iter().map(|v| v * v).sum();
                        let n = n2.sqrt();
                        if n < 1e-300 {
                            continue;
                        }
                        let f = squash_factor(n);
                        let fprime = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2));
                        let sdot: f64 = sc.iter().zip(dc).map(|(s, g)| s * g).sum();
                        let k = fprime / n * sdot;
                        for ((gv, &s), &dv) in gc.iter_mut().zip(sc).zip(dc) {
                            *gv += f * dv + k * s;
                        }
                    }
                }
            }
            Op::Norm(x) => {
                if ng(x) {
                    let xv = val(x);
                    let d = *self.sh(*x).last().expect("non-scalar");
                    let g = slot(adj, *x, xv.len());
                    for ((gc, sc), (&n, &dn)) in g
                        .chunks_exact_mut(d)
                        .zip(xv.chunks_exact(d))
                        .zip(node.value.iter().zip(dy))
                    {
                        if n > 0.0 {
                            for (gv, &s) in gc.iter_mut().zip(sc) {
                                *gv += dn * s / n;
                            }
                        }
                    }
                }
            }
            Op::Mean(x) => {
                if ng(x) {
                    let n = len_of(x);
                    let g = slot(adj, *x, n);
                    let share = dy[0] / n as f64;
                    g.iter_mut().for_each(|g| *g += share);
                }
            }
            Op::CapsuleVotes { u, w } => {
                let us = self.sh(*u);
                let (bsz, n, din) = (us[0], us[1], us[2]);
                let dout = node.shape[2];
                if ng(u) {
                    let wv = val(w);
                    let gu = slot(adj, *u, len_of(u));
                    for j in 0..n {
                        gemm(
                            bsz,
                            dout,
                            din,
                            &dy[j * dout..],
                            (n * dout, 1),
                            &wv[j * dout * din..(j + 1) * dout * din],
                            (din, 1),
                            1.0,
                            &mut gu[j * din..],
                            (n * din, 1),
                        );
                    }
                }
                if ng(w) {
                    let uv = val(u);
                    let gw = slot(adj, *w, len_of(w));
                    for j in 0..n {
                        gemm(
                            dout,
                            bsz,
                            din,
                            &dy[j * dout..],
                            (1, n * dout),
                            &uv[j * din..],
                            (n * din, 1),
                            1.0,
                            &mut gw[j * dout * din..(j + 1) * dout * din],
                            (din, 1),
                        );
                    }
                }
            }
            Op::Softmax(x) => {
                if ng(x) {
                    let d = *node.shape.last().expect("non-scalar");
                    let g = slot(adj, *x, node.value.len());
                    for ((g, y), dy) in g.chunks_exact_mut(d).zip(node.value.chunks_exact(d)).zip(dy.chunks_exact(d)) {
                        let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                        for k in 0..d {
                            g[k] += y[k] * (dy[k] - dot);
                        }
                    }
                }
            }
            Op::WeightedSum { votes, coupling } => {
                let vs = self.sh(*votes);
                let (bsz, n, d) = (vs[0], vs[1], vs[2]);
                if ng(votes) {
                    let cv = val(coupling);
                    let g = slot(adj, *votes, bsz * n * d);
                    for b in 0..bsz {
                        let dyrow = &dy[b * d..(b + 1) * d];
                        for j in 0..n {
                            let c = cv[b * n + j];
                            for (gv, &dv) in g[(b * n + j) * d..(b * n + j + 1) * d].iter_mut().zip(dyrow) {
                                *gv += c * dv;
                            }
                        }
                    }
                }
                if ng(coupling) {
                    let vv = val(votes);
                    let g = slot(adj, *coupling, bsz * n);
                    for b in 0..bsz {
                        let dyrow = &dy[b * d..(b + 1) * d];
                        for j in 0..n {
                            g[b * n + j] += vv[(b * n + j) * d..(b * n + j + 1) * d].iter().zip(dyrow).map(|(a, c)| a * c).sum::<f64>();
                        }
                    }
                }
            }
            Op::Agreement { votes, out } => {
                let vs = self.sh(*votes);
                let (bsz, n, d) = (vs[0], vs[1], vs[2]);
                if ng(votes) {
                    let ov = val(out);
                    let g = slot(adj, *votes, bsz * n * d);
                    for b in 0..bsz {
                        let o = &ov[b * d..(b + 1) * d];
                        for j in 0..n {
                            let s = dy[b * n + j];
                            for (gv, &oc) in g[(b * n + j) * d..(b * n + j + 1) * d].iter_mut().zip(o) {
                                *gv += s * oc;
                            }
                        }
                    }
                }
                if ng(out) {
                    let vv = val(votes);
                    let g = slot(adj, *out, bsz * d);
                    for b in 0..bsz {
                        let go = &mut g[b * d..(b + 1) * d];
                        for j in 0..n {
                            let s = dy[b * n + j];
                            for (gc, &v) in go.iter_mut().zip(&vv[(b * n + j) * d..(b * n + j + 1) * d]) {
                                *gc += s * v;
                            }
                        }
                    }
                }
            }
            Op::Augment { x, draw } => {
                if ng(x) {
                    let (rows, cols) = (node.shape[0], node.shape[1]);
                    let gx = augment_backward(dy, rows, cols, draw);
                    let g = slot(adj, *x, rows * cols);
                    g.iter_mut().zip(&gx).for_each(|(g, d)| *g += d);
                }
            }
        }
    }
}

/// `x1 = gamma (x - mean(x)) + mean(x) + delta` per row, then
/// `y = lambda x1 + (1 - lambda) colmean(x1)`.
pub(crate) fn augment_forward(x: &[f64], rows: usize, cols: usize, draw: &AugmentDraw) -> Vec<f64> {
    let mut x1 = vec![0.0; rows * cols];
    for b in 0..rows {
        let row = &x[b * cols..(b + 1) * cols];
        let m = row.iter().sum::<f64>() / cols as f64;
        let (g, d) = (draw.gamma[b], draw.delta[b]);
        for (o, &v) in x1[b * cols..(b + 1) * cols].iter_mut().zip(row) {
            *o = g * (v - m) + m + d;
        }
    }
    let mut colmean = vec![0.0; cols];
    for row in x1.chunks_exact(cols) {
        for (c, &v) in colmean.iter_mut().zip(row) {
            *c += v;
        }
    }
    colmean.iter_mut().for_each(|c| *c /= rows as f64);
    for (b, row) in x1.chunks_exact_mut(cols).enumerate() {
        let l = draw.lambda[b];
        for (v, &c) in row.iter_mut().zip(&colmean) {
            *v = l * *v + (1.0 - l) * c;
        }
    }
    x1
}

fn augment_backward(dy: &[f64], rows: usize, cols: usize, draw: &AugmentDraw) -> Vec<f64> {
    let mut mix = vec![0.0; cols];
    for (b, row) in dy.chunks_exact(cols).enumerate() {
        let w = (1.0 - draw.lambda[b]) / rows as f64;
        for (m, &d) in mix.iter_mut().zip(row) {
            *m += w * d;
        }
    }
    let mut gx = vec![0.0; rows * cols];
    for b in 0..rows {
        let l = draw.lambda[b];
        let g = draw.gamma[b];
        let dx1: Vec<f64> = dy[b * cols..(b + 1) * cols]
            .iter()
            .zip(&mix)
            .map(|(&d, &m)| l * d + m)
            .collect();
        let shared = (1.0 - g) * dx1.iter().sum::<f64>() / cols as f64;
        for (o, &d) in gx[b * cols..(b + 1) * cols].iter_mut().zip(&dx1) {
            *o = g * d + shared;
        }
    }
    gx
}

/// Finite-difference comparison for one parameter leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct FdEntry {
    pub key: ParamKey,
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub tol: f64,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&FdEntry> {
        self.entries.iter().filter(|e| !(e.max_rel_error < self.tol)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

/// Relative error with a floor on the denominator so that gradients that
/// are zero up to rounding compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares backprop adjoints of every trainable parameter leaf against
/// central differences of step `step`. At most `max_per_param` evenly spaced
/// elements of each leaf are probed.
pub fn finite_diff_check(
    tape: &mut Tape,
    root: NodeId,
    step: f64,
    tol: f64,
    max_per_param: usize,
) -> Result<FdReport> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    tape.forward_eval(root)?;
    tape.backprop(root)?;
    let leaves: Vec<(ParamKey, NodeId)> = tape
        .param_leaves()
        .filter(|(_, id)| tape.nodes[id.0].needs_grad)
        .collect();
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|(_, id)| {
            let g = tape.grad(*id);
            if g.is_empty() {
                vec![0.0; tape.value(*id).len()]
            } else {
                g.to_vec()
            }
        })
        .collect();
    let mut entries = Vec::with_capacity(leaves.len());
    for ((key, id), grad) in leaves.iter().zip(&analytic) {
        let n = grad.len();
        let probes = n.min(max_per_param.max(1));
        let mut worst: f64 = 0.0;
        for p in 0..probes {
            let idx = if probes == n { p } else { p * n / probes };
            let orig = tape.value(*id)[idx];
            tape.set_leaf_value(*id, idx, orig + step);
            let up = tape.forward_eval(root)?;
            tape.set_leaf_value(*id, idx, orig - step);
            let down = tape.forward_eval(root)?;
            tape.set_leaf_value(*id, idx, orig);
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(grad[idx], numeric));
        }
        entries.push(FdEntry {
            key: *key,
            name: tape.param_name(*id).to_string(),
            checked: probes,
            max_rel_error: worst,
        });
    }
    tape.forward_eval(root)?;
    tape.backprop(root)?;
    Ok(FdReport { entries, tol })
}
