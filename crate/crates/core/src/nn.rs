//! Minimal reverse-mode autodiff over row-major matrices, with the sparse
//! convolution as a first-class op.
//!
//! A [`Graph`] records every op of one forward pass. Loss terms are
//! "terminal" nodes that carry their local gradients, so `backward` only has
//! to chain them through the recorded network ops.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::sparse::KernelMap;
use crate::tensor::{gemm, gemm_a_bt, gemm_at_b, Tensor};

pub type ParamId = usize;

/// Named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Flat view position → (param, element), used by gradient checks.
    pub fn locate(&self, mut flat: usize) -> (ParamId, usize) {
        for (id, t) in self.tensors.iter().enumerate() {
            if flat < t.data.len() {
                return (id, flat);
            }
            flat -= t.data.len();
        }
        panic!("flat index out of range");
    }
}

/// He-normal initialization with an explicit fan-in.
pub fn he_normal(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    normal(rng, rows, cols, std)
}

pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    Conv { x: Var, w: Var, map: Rc<KernelMap> },
    MatMul { x: Var, w: Var },
    Bias { x: Var, b: Var },
    Relu(Var),
    Add(Var, Var),
    Concat(Var, Var),
    Gather { x: Var, idx: Vec<u32> },
    Terminal(Vec<(Var, Tensor)>),
    SumScalars(Vec<Var>),
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of one backward pass, indexed by parameter id. `None` means
/// the parameter did not influence the root.
pub struct Gradients {
    pub params: Vec<Option<Tensor>>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn norm(&self) -> f64 {
        self.params.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.shape(), (1, 1));
        t.data[0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.push(Op::Param(id), Tensor::default());
        self.param_vars[id] = Some(v);
        v
    }

    /// Sparse convolution; weight rows are `K · c_in` (offset-major).
    pub fn conv(&mut self, x: Var, w: ParamId, map: Rc<KernelMap>) -> Var {
        let wv = self.param(w);
        let out = conv_forward(self.value(x), self.value(wv), &map);
        self.push(Op::Conv { x, w: wv, map }, out)
    }

    pub fn matmul(&mut self, x: Var, w: ParamId) -> Var {
        let wv = self.param(w);
        let (xt, wt) = (self.value(x), self.value(wv));
        assert_eq!(xt.cols, wt.rows, "matmul shape mismatch");
        let mut out = Tensor::zeros(xt.rows, wt.cols);
        gemm(xt.rows, xt.cols, wt.cols, &xt.data, &wt.data, 0.0, &mut out.data);
        self.push(Op::MatMul { x, w: wv }, out)
    }

    pub fn bias(&mut self, x: Var, b: ParamId) -> Var {
        let bv = self.param(b);
        let mut out = self.value(x).clone();
        let bias = self.value(bv);
        assert_eq!(bias.data.len(), out.cols, "bias shape mismatch");
        for r in 0..out.rows {
            for (o, bb) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += bb;
            }
        }
        self.push(Op::Bias { x, b: bv }, out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(Op::Relu(x), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), out)
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rows, tb.rows, "concat row mismatch");
        let mut out = Tensor::zeros(ta.rows, ta.cols + tb.cols);
        for r in 0..ta.rows {
            let row = out.row_mut(r);
            row[..ta.cols].copy_from_slice(ta.row(r));
            row[ta.cols..].copy_from_slice(tb.row(r));
        }
        self.push(Op::Concat(a, b), out)
    }

    pub fn gather(&mut self, x: Var, idx: Vec<u32>) -> Var {
        let out = self.value(x).gather_rows(&idx);
        self.push(Op::Gather { x, idx }, out)
    }

    /// Scalar loss node with precomputed local gradients `d value / d input`.
    pub fn terminal(&mut self, value: f64, grads: Vec<(Var, Tensor)>) -> Var {
        self.push(Op::Terminal(grads), Tensor::scalar(value))
    }

    /// Left-to-right sum of scalar nodes.
    pub fn sum_scalars(&mut self, items: &[Var]) -> Var {
        let mut total = 0.0;
        for (i, &v) in items.iter().enumerate() {
            total = if i == 0 { self.scalar(v) } else { total + self.scalar(v) };
        }
        self.push(Op::SumScalars(items.to_vec()), Tensor::scalar(total))
    }

    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Constant | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv { x, w, map } => {
                    let (dx, dw) = conv_backward(self.value(*x), self.value(*w), map, &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::MatMul { x, w } => {
                    let (xt, wt) = (self.value(*x), self.value(*w));
                    let mut dx = Tensor::zeros(xt.rows, xt.cols);
                    gemm_a_bt(g.rows, g.cols, wt.rows, &g.data, &wt.data, &mut dx.data);
                    let mut dw = Tensor::zeros(wt.rows, wt.cols);
                    gemm_at_b(xt.cols, xt.rows, g.cols, &xt.data, &g.data, &mut dw.data);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::Bias { x, b } => {
                    let mut db = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    let db = Tensor::from_vec(self.value(*b).rows, self.value(*b).cols, db.data);
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *x, g);
                }
                Op::Relu(x) => {
                    let y = &self.nodes[i].value;
                    let mut dx = g;
                    for (d, &v) in dx.data.iter_mut().zip(&y.data) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).cols;
                    let cb = self.value(*b).cols;
                    let mut da = Tensor::zeros(g.rows, ca);
                    let mut db = Tensor::zeros(g.rows, cb);
                    for r in 0..g.rows {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Gather { x, idx } => {
                    let xt = self.value(*x);
                    let mut dx = Tensor::zeros(xt.rows, xt.cols);
                    for (r, &src) in idx.iter().enumerate() {
                        for (d, v) in dx.row_mut(src as usize).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Terminal(locals) => {
                    let s = g.data[0];
                    for (v, t) in locals {
                        let mut t = t.clone();
                        t.scale(s);
                        accumulate(&mut grads, *v, t);
                    }
                }
                Op::SumScalars(items) => {
                    for v in items {
                        accumulate(&mut grads, *v, g.clone());
                    }
                }
            }
        }
        let params = self
            .param_vars
            .iter()
            .map(|v| v.and_then(|v| grads[v.0].clone()))
            .collect();
        Gradients { params, nodes: grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

pub(crate) fn conv_forward(x: &Tensor, w: &Tensor, map: &KernelMap) -> Tensor {
    let cin = x.cols;
    let cout = w.cols;
    assert_eq!(x.rows, map.n_in, "conv input rows do not match kernel map");
    assert_eq!(w.rows, map.volume() * cin, "conv weight shape mismatch");
    let mut out = Tensor::zeros(map.n_out, cout);
    let mut a = Vec::new();
    let mut c = Vec::new();
    for (k, pairs) in map.offsets.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let p = pairs.len();
        a.clear();
        for &(i, _) in pairs {
            a.extend_from_slice(x.row(i as usize));
        }
        c.clear();
        c.resize(p * cout, 0.0);
        gemm(p, cin, cout, &a, &w.data[k * cin * cout..(k + 1) * cin * cout], 0.0, &mut c);
        for (j, &(_, o)) in pairs.iter().enumerate() {
            for (dst, v) in out.row_mut(o as usize).iter_mut().zip(&c[j * cout..(j + 1) * cout]) {
                *dst += v;
            }
        }
    }
    out
}

fn conv_backward(x: &Tensor, w: &Tensor, map: &KernelMap, g: &Tensor) -> (Tensor, Tensor) {
    let cin = x.cols;
    let cout = w.cols;
    let mut dx = Tensor::zeros(x.rows, cin);
    let mut dw = Tensor::zeros(w.rows, cout);
    let mut a = Vec::new();
    let mut gc = Vec::new();
    let mut da = Vec::new();
    for (k, pairs) in map.offsets.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let p = pairs.len();
        a.clear();
        gc.clear();
        for &(i, o) in pairs {
            a.extend_from_slice(x.row(i as usize));
            gc.extend_from_slice(g.row(o as usize));
        }
        let wk = &w.data[k * cin * cout..(k + 1) * cin * cout];
        gemm_at_b(cin, p, cout, &a, &gc, &mut dw.data[k * cin * cout..(k + 1) * cin * cout]);
        da.clear();
        da.resize(p * cin, 0.0);
        gemm_a_bt(p, cout, cin, &gc, wk, &mut da);
        for (j, &(i, _)) in pairs.iter().enumerate() {
            for (dst, v) in dx.row_mut(i as usize).iter_mut().zip(&da[j * cin..(j + 1) * cin]) {
                *dst += v;
            }
        }
    }
    (dx, dw)
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = (0..params.len())
            .map(|id| {
                let t = params.get(id);
                Tensor::zeros(t.rows, t.cols)
            })
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    /// Gradients are rescaled first when their global norm exceeds `clip_norm`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, clip_norm: f64) {
        let norm = grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt();
        let scale = if clip_norm > 0.0 && norm > clip_norm { clip_norm / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.get_mut(id);
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for j in 0..p.data.len() {
                let gj = g.data[j] * scale;
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                p.data[j] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p.data[j]);
            }
        }
    }
}
