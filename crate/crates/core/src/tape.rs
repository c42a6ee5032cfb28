//! Dynamic reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed, never copied, so many tapes can run concurrently over the same
//! immutable weights. [`Tape::backward`] walks the records in reverse and
//! returns per-node gradients.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<ParamId, Var>,
    rng: Option<ChaCha8Rng>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::eval()
    }
}

impl<'a> Tape<'a> {
    /// Inference tape: dropout is the identity.
    pub fn eval() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            rng: None,
        }
    }

    /// Training tape with dropout masks drawn from a stream seeded by `seed`.
    pub fn train(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradient regardless of any flag on the tensor.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a borrowed parameter. Repeated binds of the same id return the
    /// same variable. Gradient is tracked only when `tensor.requires_grad`.
    pub fn param(&mut self, id: ParamId, tensor: &'a Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(tensor),
            op: Op::Leaf,
            requires_grad: tensor.requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(row).numel() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(row).shape().to_vec(),
            });
        }
        let b = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// `x · wᵀ + b` with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, tensor::sigmoid, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, tensor::gelu, Op::Gelu(a))
    }

    /// Row-wise softmax; masked key columns get probability exactly 0.
    pub fn softmax_rows(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(x), key_mask)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, x_hat, inv_std) =
            tensor::layer_norm_parts(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
            rg,
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = t.dims2();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "embedding id",
                    index: id,
                    len: vocab,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity on eval tapes and when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if start > end || end > c {
            return Err(Error::Index {
                what: "slice_cols",
                index: end,
                len: c,
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.value(x).row(i)[start..end]);
        }
        let out = Tensor::new(vec![r, w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if start > end || end > r {
            return Err(Error::Index {
                what: "slice_rows",
                index: end,
                len: r,
            });
        }
        let out = self.value(x).data()[start * c..end * c].to_vec();
        let out = Tensor::new(vec![end - start, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    /// Scalar `-log softmax(logits)[target]` over all entries of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let data = self.value(logits).data();
        let loss = tensor::cross_entropy(data, target)?;
        let probs = tensor::softmax(data)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape {
                op: "backward (root must be scalar)",
                lhs: self.value(root).shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort_by_key(|(p, _)| *p);
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).cols();
                if self.requires_grad(*a) {
                    let ga = slot(grads, *a, m * k);
                    tensor::matmul_nt_into(g, self.value(*b).data(), ga, m, n, k);
                }
                if self.requires_grad(*b) {
                    let gb = slot(grads, *b, k * n);
                    tensor::matmul_tn_into(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).rows();
                if self.requires_grad(*a) {
                    let ga = slot(grads, *a, m * k);
                    tensor::matmul_into(g, self.value(*b).data(), ga, m, n, k);
                }
                if self.requires_grad(*b) {
                    let gb = slot(grads, *b, n * k);
                    tensor::matmul_tn_into(g, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        add_into(slot(grads, v, g.len()), g, 1.0);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if self.requires_grad(*a) {
                    add_into(slot(grads, *a, g.len()), g, 1.0);
                }
                if self.requires_grad(*b) {
                    let n = self.value(*b).numel();
                    let gb = slot(grads, *b, n);
                    for row in g.chunks(n) {
                        add_into(gb, row, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let vb = self.value(*b).data();
                    let ga = slot(grads, *a, g.len());
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(vb) {
                        *o += gi * bi;
                    }
                }
                if self.requires_grad(*b) {
                    let va = self.value(*a).data();
                    let gb = slot(grads, *b, g.len());
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(va) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.requires_grad(*a) {
                    add_into(slot(grads, *a, g.len()), g, *s);
                }
            }
            Op::Tanh(a) => {
                if self.requires_grad(*a) {
                    let ga = slot(grads, *a, g.len());
                    for ((o, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.requires_grad(*a) {
                    let ga = slot(grads, *a, g.len());
                    for ((o, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Gelu(a) => {
                if self.requires_grad(*a) {
                    let x = self.value(*a).data();
                    let ga = slot(grads, *a, g.len());
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        *o += gi * tensor::gelu_grad(xi);
                    }
                }
            }
            Op::Softmax(a) => {
                if self.requires_grad(*a) {
                    let c = node.value.cols();
                    let ga = slot(grads, *a, g.len());
                    for ((gr, yr), or) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, &gi), &yi) in or.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => {
                let d = node.value.cols();
                if self.requires_grad(*gamma) {
                    let gg = slot(grads, *gamma, d);
                    for (gr, xr) in g.chunks(d).zip(x_hat.chunks(d)) {
                        for ((o, &gi), &xi) in gg.iter_mut().zip(gr).zip(xr) {
                            *o += gi * xi;
                        }
                    }
                }
                if self.requires_grad(*beta) {
                    let gb = slot(grads, *beta, d);
                    for gr in g.chunks(d) {
                        add_into(gb, gr, 1.0);
                    }
                }
                if self.requires_grad(*x) {
                    let gam = self.value(*gamma).data();
                    let gx = slot(grads, *x, g.len());
                    let mut dxh = vec![0.0; d];
                    for (r, ((gr, xr), or)) in g
                        .chunks(d)
                        .zip(x_hat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        for j in 0..d {
                            dxh[j] = gr[j] * gam[j];
                        }
                        let mean_d = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            or[j] += inv_std[r] * (dxh[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.requires_grad(*table) {
                    let (vocab, d) = self.value(*table).dims2();
                    let gt = slot(grads, *table, vocab * d);
                    for (gr, &id) in g.chunks(d).zip(ids) {
                        add_into(&mut gt[id * d..(id + 1) * d], gr, 1.0);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.requires_grad(*x) {
                    let gx = slot(grads, *x, g.len());
                    for ((o, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.value(p).dims2();
                    if self.requires_grad(p) {
                        let gp = slot(grads, p, r * c);
                        for i in 0..r {
                            add_into(
                                &mut gp[i * c..(i + 1) * c],
                                &g[i * total + offset..i * total + offset + c],
                                1.0,
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.requires_grad(p) {
                        add_into(slot(grads, p, n), &g[offset..offset + n], 1.0);
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                if self.requires_grad(*x) {
                    let (r, c) = self.value(*x).dims2();
                    let w = node.value.cols();
                    let gx = slot(grads, *x, r * c);
                    for i in 0..r {
                        add_into(
                            &mut gx[i * c + start..i * c + start + w],
                            &g[i * w..(i + 1) * w],
                            1.0,
                        );
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if self.requires_grad(*x) {
                    let (r, c) = self.value(*x).dims2();
                    let gx = slot(grads, *x, r * c);
                    add_into(&mut gx[start * c..start * c + g.len()], g, 1.0);
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                if self.requires_grad(*logits) {
                    let gl = slot(grads, *logits, probs.len());
                    for (j, (o, &p)) in gl.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *o += g[0] * (p - onehot);
                    }
                }
            }
            Op::Sum(x) => {
                if self.requires_grad(*x) {
                    let n = self.value(*x).numel();
                    slot(grads, *x, n).iter_mut().for_each(|o| *o += g[0]);
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a node, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients in ascending id order. Parameters bound on the
    /// tape but untouched by the loss are omitted.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(p, v)| self.wrt(v).map(|g| (p, g)))
    }

    pub fn into_param_grads(mut self) -> Vec<(ParamId, Vec<f64>)> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .filter_map(|(p, v)| self.grads[v.0].take().map(|g| (p, g)))
            .collect()
    }
}
