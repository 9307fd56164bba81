//! The model's forward pass is written once against [`Ops`]. [`Eval`] runs it
//! on plain vectors; [`Tape`] records it for reverse-mode differentiation.

use super::params::{ModelParams, ParamKey};
use crate::numerics::{norm, norm_clip, sigmoid, softmax, Activation};

pub trait Ops {
    type V: Clone;

    fn params(&self) -> &ModelParams;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a [f64];
    /// A constant (no gradient flows into it).
    fn input(&mut self, x: Vec<f64>) -> Self::V;
    /// A whole parameter block, flattened row-major.
    fn param(&mut self, key: ParamKey) -> Self::V;
    fn matvec(&mut self, key: ParamKey, x: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn scale(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn lincomb(&mut self, terms: &[(f64, Self::V)]) -> Self::V;
    fn concat(&mut self, parts: &[Self::V]) -> Self::V;
    fn act(&mut self, a: &Self::V, f: Activation) -> Self::V;
    fn sigmoid(&mut self, a: &Self::V) -> Self::V;
    fn clip(&mut self, a: &Self::V, cap: f64) -> Self::V;
    fn softmax(&mut self, a: &Self::V) -> Self::V;
    /// `Σ_j w_j v_j` for a weight vector `w`.
    fn weighted_sum(&mut self, w: &Self::V, vs: &[Self::V]) -> Self::V;
    /// `g·a + (1 − g)·b` for a scalar `g`.
    fn blend(&mut self, g: &Self::V, a: &Self::V, b: &Self::V) -> Self::V;
}

/// Plain evaluation.
pub struct Eval<'p> {
    params: &'p ModelParams,
}

impl<'p> Eval<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Self { params }
    }
}

impl Ops for Eval<'_> {
    type V = Vec<f64>;

    fn params(&self) -> &ModelParams {
        self.params
    }

    fn value<'a>(&'a self, v: &'a Vec<f64>) -> &'a [f64] {
        v
    }

    fn input(&mut self, x: Vec<f64>) -> Vec<f64> {
        x
    }

    fn param(&mut self, key: ParamKey) -> Vec<f64> {
        self.params.block(key).values().to_vec()
    }

    fn matvec(&mut self, key: ParamKey, x: &Vec<f64>) -> Vec<f64> {
        self.params.block(key).matvec(x)
    }

    fn add(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    fn scale(&mut self, a: &Vec<f64>, c: f64) -> Vec<f64> {
        a.iter().map(|x| x * c).collect()
    }

    fn lincomb(&mut self, terms: &[(f64, Vec<f64>)]) -> Vec<f64> {
        lincomb_values(terms.iter().map(|(c, v)| (*c, v.as_slice())))
    }

    fn concat(&mut self, parts: &[Vec<f64>]) -> Vec<f64> {
        parts.concat()
    }

    fn act(&mut self, a: &Vec<f64>, f: Activation) -> Vec<f64> {
        f.apply_vec(a)
    }

    fn sigmoid(&mut self, a: &Vec<f64>) -> Vec<f64> {
        a.iter().map(|&x| sigmoid(x)).collect()
    }

    fn clip(&mut self, a: &Vec<f64>, cap: f64) -> Vec<f64> {
        norm_clip(a, cap)
    }

    fn softmax(&mut self, a: &Vec<f64>) -> Vec<f64> {
        softmax(a)
    }

    fn weighted_sum(&mut self, w: &Vec<f64>, vs: &[Vec<f64>]) -> Vec<f64> {
        lincomb_values(w.iter().copied().zip(vs.iter().map(|v| v.as_slice())))
    }

    fn blend(&mut self, g: &Vec<f64>, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        let g = g[0];
        a.iter().zip(b).map(|(x, y)| g * x + (1.0 - g) * y).collect()
    }
}

fn lincomb_values<'a>(terms: impl Iterator<Item = (f64, &'a [f64])>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for (c, v) in terms {
        if out.is_empty() {
            out = vec![0.0; v.len()];
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += c * x;
        }
    }
    out
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamKey),
    MatVec(ParamKey, usize),
    LinComb(Vec<(f64, usize)>),
    Concat(Vec<usize>),
    Act(usize, Activation),
    Sigmoid(usize),
    Clip(usize, f64),
    Softmax(usize),
    WeightedSum(usize, Vec<usize>),
    Blend(usize, usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Reverse-mode recorder. Values are node indices.
pub struct Tape<'p> {
    params: &'p ModelParams,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> usize {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Propagates the given output gradients back to every parameter block.
    pub fn backward(&self, seeds: &[(usize, Vec<f64>)]) -> ModelParams {
        let mut grads = self.params.zeros_like();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (node, g) in seeds {
            accumulate(&mut adj[*node], g);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(key) => {
                    for (w, gi) in grads.block_mut(*key).values_mut().iter_mut().zip(&g) {
                        *w += gi;
                    }
                }
                Op::MatVec(key, x) => {
                    let xv = &self.nodes[*x].value;
                    let gm = grads.block_mut(*key);
                    let cols = gm.cols();
                    let vals = gm.values_mut();
                    for (r, gr) in g.iter().enumerate() {
                        if *gr != 0.0 {
                            for (c, xc) in xv.iter().enumerate() {
                                vals[r * cols + c] += gr * xc;
                            }
                        }
                    }
                    let gx = self.params.block(*key).matvec_t(&g);
                    accumulate(&mut adj[*x], &gx);
                }
                Op::LinComb(terms) => {
                    for (c, v) in terms {
                        let gv: Vec<f64> = g.iter().map(|x| c * x).collect();
                        accumulate(&mut adj[*v], &gv);
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[*p].value.len();
                        accumulate(&mut adj[*p], &g[off..off + len]);
                        off += len;
                    }
                }
                Op::Act(a, f) => {
                    let x = &self.nodes[*a].value;
                    let gx: Vec<f64> = g.iter().zip(x).map(|(gi, xi)| gi * f.derivative(*xi)).collect();
                    accumulate(&mut adj[*a], &gx);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let gx: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                    accumulate(&mut adj[*a], &gx);
                }
                Op::Clip(a, cap) => {
                    let x = &self.nodes[*a].value;
                    let r = norm(x);
                    if r <= *cap {
                        accumulate(&mut adj[*a], &g);
                    } else {
                        let xg: f64 = x.iter().zip(&g).map(|(p, q)| p * q).sum();
                        let k = cap / r;
                        let gx: Vec<f64> = g
                            .iter()
                            .zip(x)
                            .map(|(gi, xi)| k * (gi - xi * xg / (r * r)))
                            .collect();
                        accumulate(&mut adj[*a], &gx);
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy: f64 = g.iter().zip(y).map(|(p, q)| p * q).sum();
                    let gx: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| yi * (gi - gy)).collect();
                    accumulate(&mut adj[*a], &gx);
                }
                Op::WeightedSum(w, vs) => {
                    let wv = self.nodes[*w].value.clone();
                    let mut gw = vec![0.0; wv.len()];
                    for (j, v) in vs.iter().enumerate() {
                        let vv = &self.nodes[*v].value;
                        gw[j] = g.iter().zip(vv).map(|(p, q)| p * q).sum();
                        let gv: Vec<f64> = g.iter().map(|x| wv[j] * x).collect();
                        accumulate(&mut adj[*v], &gv);
                    }
                    accumulate(&mut adj[*w], &gw);
                }
                Op::Blend(gate, a, b) => {
                    let gv = self.nodes[*gate].value[0];
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let gg: f64 = g.iter().zip(av.iter().zip(bv)).map(|(p, (x, y))| p * (x - y)).sum();
                    accumulate(&mut adj[*gate], &[gg]);
                    let ga: Vec<f64> = g.iter().map(|x| gv * x).collect();
                    let gb: Vec<f64> = g.iter().map(|x| (1.0 - gv) * x).collect();
                    accumulate(&mut adj[*a], &ga);
                    accumulate(&mut adj[*b], &gb);
                }
            }
        }
        grads
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

impl Ops for Tape<'_> {
    type V = usize;

    fn params(&self) -> &ModelParams {
        self.params
    }

    fn value<'a>(&'a self, v: &'a usize) -> &'a [f64] {
        &self.nodes[*v].value
    }

    fn input(&mut self, x: Vec<f64>) -> usize {
        self.push(x, Op::Input)
    }

    fn param(&mut self, key: ParamKey) -> usize {
        let v = self.params.block(key).values().to_vec();
        self.push(v, Op::Param(key))
    }

    fn matvec(&mut self, key: ParamKey, x: &usize) -> usize {
        let v = self.params.block(key).matvec(&self.nodes[*x].value);
        self.push(v, Op::MatVec(key, *x))
    }

    fn add(&mut self, a: &usize, b: &usize) -> usize {
        self.lincomb(&[(1.0, *a), (1.0, *b)])
    }

    fn scale(&mut self, a: &usize, c: f64) -> usize {
        self.lincomb(&[(c, *a)])
    }

    fn lincomb(&mut self, terms: &[(f64, usize)]) -> usize {
        let v = lincomb_values(terms.iter().map(|(c, i)| (*c, self.nodes[*i].value.as_slice())));
        self.push(v, Op::LinComb(terms.to_vec()))
    }

    fn concat(&mut self, parts: &[usize]) -> usize {
        let v: Vec<f64> = parts
            .iter()
            .flat_map(|p| self.nodes[*p].value.iter().copied())
            .collect();
        self.push(v, Op::Concat(parts.to_vec()))
    }

    fn act(&mut self, a: &usize, f: Activation) -> usize {
        let v = f.apply_vec(&self.nodes[*a].value);
        self.push(v, Op::Act(*a, f))
    }

    fn sigmoid(&mut self, a: &usize) -> usize {
        let v = self.nodes[*a].value.iter().map(|&x| sigmoid(x)).collect();
        self.push(v, Op::Sigmoid(*a))
    }

    fn clip(&mut self, a: &usize, cap: f64) -> usize {
        let v = norm_clip(&self.nodes[*a].value, cap);
        self.push(v, Op::Clip(*a, cap))
    }

    fn softmax(&mut self, a: &usize) -> usize {
        let v = softmax(&self.nodes[*a].value);
        self.push(v, Op::Softmax(*a))
    }

    fn weighted_sum(&mut self, w: &usize, vs: &[usize]) -> usize {
        let wv = &self.nodes[*w].value;
        let v = lincomb_values(wv.iter().copied().zip(vs.iter().map(|i| self.nodes[*i].value.as_slice())));
        self.push(v, Op::WeightedSum(*w, vs.to_vec()))
    }

    fn blend(&mut self, g: &usize, a: &usize, b: &usize) -> usize {
        let gv = self.nodes[*g].value[0];
        let v = self.nodes[*a]
            .value
            .iter()
            .zip(&self.nodes[*b].value)
            .map(|(x, y)| gv * x + (1.0 - gv) * y)
            .collect();
        self.push(v, Op::Blend(*g, *a, *b))
    }
}
