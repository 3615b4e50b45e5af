//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamSet`] without copying; inputs are owned by the
//! graph. [`Graph::backward`] propagates the gradient of a scalar node to
//! every node and [`Graph::param_grads`] gathers the parameter gradients.

use std::borrow::Cow;
use std::collections::HashMap;
use std::rc::Rc;

use super::attention::{self, SeqLayout};
use super::params::ParamSet;
use super::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulConst(Var, Rc<Tensor>),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Tanh(Var),
    Gelu(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<f64>,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    PermuteCols {
        a: Var,
        perm: Rc<Vec<usize>>,
    },
    RepeatRow {
        a: Var,
    },
    SumRows(Var),
    SumAll(Var),
    LocalAttn {
        q: Var,
        k: Var,
        v: Var,
        bias: Var,
        layout: Rc<SeqLayout>,
        heads: usize,
        window: usize,
        probs: Vec<f64>,
    },
    GlobalAttn {
        q: Var,
        k: Var,
        v: Var,
        bias: Var,
        layout: Rc<SeqLayout>,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: Option<&'p ParamSet>,
    param_nodes: HashMap<usize, Var>,
    /// Forward-only graphs skip the caches needed by `backward`.
    record: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(params),
            param_nodes: HashMap::new(),
            record: true,
        }
    }

    /// A graph that only evaluates values; `backward` is unavailable.
    pub fn inference(params: &'p ParamSet) -> Self {
        Self {
            record: false,
            ..Self::new(params)
        }
    }

    /// A graph without parameters, for differentiating plain functions.
    pub fn detached() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_nodes: HashMap::new(),
            record: true,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.as_ref()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Node for parameter `idx` of the bound [`ParamSet`]; repeated calls
    /// return the same node.
    pub fn param(&mut self, idx: usize) -> Var {
        if let Some(&v) = self.param_nodes.get(&idx) {
            return v;
        }
        let params = self.params.expect("graph has no parameter set");
        self.nodes.push(Node {
            value: Cow::Borrowed(params.get(idx)),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(idx, v);
        v
    }

    /// `x · wᵀ + b` with `w` shaped `out × in` and `b` shaped `1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = Tensor::zeros(xv.rows, wv.rows);
        if let Some(b) = b {
            let bv = self.value(b);
            for r in 0..out.rows {
                out.row_mut(r).copy_from_slice(&bv.data);
            }
            gemm(1.0, xv, false, wv, true, 1.0, &mut out);
        } else {
            gemm(1.0, xv, false, wv, true, 0.0, &mut out);
        }
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = super::tensor::matmul(self.value(a), ta, self.value(b), tb);
        self.push(out, Op::MatMul { a, b, ta, tb })
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_vec(av.rows, av.cols, data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::from_vec(av.rows, av.cols, av.data.iter().map(|x| f(*x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 × m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!((rv.rows, rv.cols), (1, av.cols), "add_row shape mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Elementwise product with a constant (dropout masks, weight masks).
    pub fn mul_const(&mut self, a: Var, c: Rc<Tensor>) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), c.shape(), "mul_const shape mismatch");
        let data = av.data.iter().zip(&c.data).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        self.push(out, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Var {
        let out = self.map(a, |x| x * f);
        self.push(out, Op::Scale(a, f))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x * x);
        self.push(out, Op::Square(a))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 × d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let d = xv.cols;
        let mut out = Tensor::zeros(xv.rows, d);
        let mut inv_std = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let o = out.row_mut(r);
            for j in 0..d {
                o[j] = (row[j] - mean) * is * gv.data[j] + bv.data[j];
            }
        }
        if !self.record {
            inv_std.clear();
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                inv_std,
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let av = self.value(a);
        assert!(start + width <= av.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(av.rows, width);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + width]);
        }
        self.push(out, Op::SliceCols { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Output column `j` is input column `perm[j]`.
    pub fn permute_cols(&mut self, a: Var, perm: Rc<Vec<usize>>) -> Var {
        let av = self.value(a);
        assert_eq!(perm.len(), av.cols);
        let mut out = Tensor::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            let src = av.row(r);
            let dst = out.row_mut(r);
            for (j, &p) in perm.iter().enumerate() {
                dst[j] = src[p];
            }
        }
        self.push(out, Op::PermuteCols { a, perm })
    }

    /// Stacks `n` copies of a `1 × m` row.
    pub fn repeat_row(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows, 1);
        let mut out = Tensor::zeros(n, av.cols);
        for r in 0..n {
            out.row_mut(r).copy_from_slice(&av.data);
        }
        self.push(out, Op::RepeatRow { a })
    }

    /// Row sums as an `n × 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows).map(|r| av.row(r).iter().sum()).collect();
        let out = Tensor::from_vec(av.rows, 1, data);
        self.push(out, Op::SumRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::from_vec(1, 1, vec![self.value(a).sum()]);
        self.push(out, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn local_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Var,
        layout: Rc<SeqLayout>,
        heads: usize,
        window: usize,
    ) -> Var {
        let d = self.value(q).cols;
        let rows = self.value(q).rows;
        let (out, mut probs) = attention::local_forward(
            &self.value(q).data,
            &self.value(k).data,
            &self.value(v).data,
            d,
            &self.value(bias).data,
            &layout,
            heads,
            window,
        );
        if !self.record {
            probs = Vec::new();
        }
        self.push(
            Tensor::from_vec(rows, d, out),
            Op::LocalAttn {
                q,
                k,
                v,
                bias,
                layout,
                heads,
                window,
                probs,
            },
        )
    }

    pub fn global_attention(&mut self, q: Var, k: Var, v: Var, bias: Var, layout: Rc<SeqLayout>, heads: usize) -> Var {
        let d = self.value(q).cols;
        let n_buckets = self.value(bias).len() / heads;
        let (out, mut probs) = attention::global_forward(
            &self.value(q).data,
            &self.value(k).data,
            &self.value(v).data,
            d,
            &self.value(bias).data,
            n_buckets,
            &layout,
            heads,
        );
        if !self.record {
            probs = Vec::new();
        }
        self.push(
            Tensor::from_vec(layout.n_seq, d, out),
            Op::GlobalAttn {
                q,
                k,
                v,
                bias,
                layout,
                heads,
                probs,
            },
        )
    }

    /// Gradients of the scalar node `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert!(self.record, "backward on an inference graph");
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                gemm(1.0, g, false, wv, false, 0.0, &mut dx);
                let mut dw = Tensor::zeros(wv.rows, wv.cols);
                gemm(1.0, g, true, xv, false, 0.0, &mut dw);
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                if let Some(b) = b {
                    let mut db = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, x) in db.data.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(grads, *b, db);
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                // C = op(A) op(B)
                let mut da = Tensor::zeros(av.rows, av.cols);
                if *ta {
                    gemm(1.0, bv, *tb, g, true, 0.0, &mut da);
                } else {
                    gemm(1.0, g, false, bv, !*tb, 0.0, &mut da);
                }
                let mut db = Tensor::zeros(bv.rows, bv.cols);
                if *tb {
                    gemm(1.0, g, true, av, *ta, 0.0, &mut db);
                } else {
                    gemm(1.0, av, !*ta, g, false, 0.0, &mut db);
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                let mut n = g.clone();
                n.scale(-1.0);
                acc(grads, *b, n);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                let db = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                acc(grads, *a, Tensor::from_vec(g.rows, g.cols, da));
                acc(grads, *b, Tensor::from_vec(g.rows, g.cols, db));
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                let mut dr = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, x) in dr.data.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(grads, *row, dr);
            }
            Op::MulConst(a, c) => {
                let da = g.data.iter().zip(&c.data).map(|(x, y)| x * y).collect();
                acc(grads, *a, Tensor::from_vec(g.rows, g.cols, da));
            }
            Op::Scale(a, f) => {
                let mut da = g.clone();
                da.scale(*f);
                acc(grads, *a, da);
            }
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Exp(a) => {
                let out = &node.value;
                let da = g.data.iter().zip(&out.data).map(|(x, y)| x * y).collect();
                acc(grads, *a, Tensor::from_vec(g.rows, g.cols, da));
            }
            Op::Tanh(a) => {
                let out = &node.value;
                let da = g.data.iter().zip(&out.data).map(|(x, y)| x * (1.0 - y * y)).collect();
                acc(grads, *a, Tensor::from_vec(g.rows, g.cols, da));
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let da = g.data.iter().zip(&av.data).map(|(x, y)| x * gelu_grad(*y)).collect();
                acc(grads, *a, Tensor::from_vec(g.rows, g.cols, da));
            }
            Op::Square(a) => {
                let av = self.value(*a);
                let da = g.data.iter().zip(&av.data).map(|(x, y)| 2.0 * x * y).collect();
                acc(grads, *a, Tensor::from_vec(g.rows, g.cols, da));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                inv_std,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let d = xv.cols;
                let mut dx = Tensor::zeros(xv.rows, d);
                let mut dgamma = Tensor::zeros(1, d);
                let mut dbeta = Tensor::zeros(1, d);
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..xv.rows {
                    let row = xv.row(r);
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let is = inv_std[r];
                    let gr = g.row(r);
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * is;
                        dxhat[j] = gr[j] * gv.data[j];
                        dgamma.data[j] += gr[j] * xhat[j];
                        dbeta.data[j] += gr[j];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let out = dx.row_mut(r);
                    for j in 0..d {
                        out[j] = is / d as f64 * (d as f64 * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::SliceCols { a, start } => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    da.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let cols = self.value(*p).cols;
                    let mut dp = Tensor::zeros(g.rows, cols);
                    for r in 0..g.rows {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                    }
                    off += cols;
                    acc(grads, *p, dp);
                }
            }
            Op::PermuteCols { a, perm } => {
                let mut da = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let src = g.row(r);
                    let dst = da.row_mut(r);
                    for (j, &p) in perm.iter().enumerate() {
                        dst[p] += src[j];
                    }
                }
                acc(grads, *a, da);
            }
            Op::RepeatRow { a } => {
                let mut da = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, x) in da.data.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(grads, *a, da);
            }
            Op::SumRows(a) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    da.row_mut(r).iter_mut().for_each(|x| *x = g.data[r]);
                }
                acc(grads, *a, da);
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                acc(grads, *a, Tensor::filled(av.rows, av.cols, g.data[0]));
            }
            Op::LocalAttn {
                q,
                k,
                v,
                bias,
                layout,
                heads,
                window,
                probs,
            } => {
                let qv = self.value(*q);
                let d = qv.cols;
                let (dq, dk, dv, db) = attention::local_backward(
                    &qv.data,
                    &self.value(*k).data,
                    &self.value(*v).data,
                    d,
                    layout,
                    *heads,
                    *window,
                    probs,
                    &g.data,
                );
                let rows = qv.rows;
                acc(grads, *q, Tensor::from_vec(rows, d, dq));
                acc(grads, *k, Tensor::from_vec(rows, d, dk));
                acc(grads, *v, Tensor::from_vec(rows, d, dv));
                let bv = self.value(*bias);
                acc(grads, *bias, Tensor::from_vec(bv.rows, bv.cols, db));
            }
            Op::GlobalAttn {
                q,
                k,
                v,
                bias,
                layout,
                heads,
                probs,
            } => {
                let qv = self.value(*q);
                let d = qv.cols;
                let bv = self.value(*bias);
                let n_buckets = bv.len() / heads;
                let (dq, dk, dv, db) = attention::global_backward(
                    &qv.data,
                    &self.value(*k).data,
                    &self.value(*v).data,
                    d,
                    n_buckets,
                    layout,
                    *heads,
                    probs,
                    &g.data,
                );
                let krows = self.value(*k).rows;
                acc(grads, *q, Tensor::from_vec(qv.rows, d, dq));
                acc(grads, *k, Tensor::from_vec(krows, d, dk));
                acc(grads, *v, Tensor::from_vec(krows, d, dv));
                acc(grads, *bias, Tensor::from_vec(bv.rows, bv.cols, db));
            }
        }
    }

    /// Gradients of all parameters of the bound set, zero for unused ones.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        let params = self.params.expect("graph has no parameter set");
        let mut out: Vec<Tensor> = (0..params.len())
            .map(|i| {
                let p = params.get(i);
                Tensor::zeros(p.rows, p.cols)
            })
            .collect();
        for (&idx, &var) in &self.param_nodes {
            if let Some(g) = grads.get(var) {
                out[idx] = g.clone();
            }
        }
        out
    }
}

impl std::ops::Index<Var> for Graph<'_> {
    type Output = Tensor;
    fn index(&self, v: Var) -> &Tensor {
        self.value(v)
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of a scalar function of one input tensor.
    fn check(build: impl Fn(&mut Graph, Var) -> Var, x0: Tensor) {
        let mut g = Graph::detached();
        let x = g.input(x0.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.get(x).cloned().unwrap_or(Tensor::zeros(x0.rows, x0.cols));
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data[i] += delta;
                let mut g = Graph::detached();
                let x = g.input(xp);
                let y = build(&mut g, x);
                g.value(y).data[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data[i];
            assert!(
                (a - fd).abs() <= 1e-6 * (1.0 + a.abs().max(fd.abs())),
                "component {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    fn sample(rows: usize, cols: usize, seed: f64) -> Tensor {
        let data = (0..rows * cols).map(|i| ((i as f64 + 1.0) * seed).sin()).collect();
        Tensor::from_vec(rows, cols, data)
    }

    #[test]
    fn elementwise_ops_gradients() {
        check(
            |g, x| {
                let a = g.gelu(x);
                let b = g.tanh(a);
                let c = g.exp(b);
                let d = g.square(c);
                let e = g.mul(d, x);
                let f = g.scale(e, 0.3);
                let h = g.add_scalar(f, 2.0);
                g.sum_all(h)
            },
            sample(3, 4, 0.7),
        );
    }

    #[test]
    fn matmul_and_layer_norm_gradients() {
        let w = sample(4, 5, 1.3);
        check(
            move |g, x| {
                let wv = g.input(w.clone());
                let y = g.matmul(x, false, wv, false);
                let yt = g.matmul(wv, true, x, true);
                let gamma = g.input(sample(1, 5, 0.4));
                let beta = g.input(sample(1, 5, 0.9));
                let n = g.layer_norm(y, gamma, beta);
                let s = g.square(n);
                let a = g.sum_all(s);
                let st = g.square(yt);
                let b = g.sum_all(st);
                let z = g.add(a, b);
                g.scale(z, 0.5)
            },
            sample(3, 4, 0.2),
        );
    }

    #[test]
    fn structural_ops_gradients() {
        check(
            |g, x| {
                let a = g.slice_cols(x, 1, 2);
                let b = g.slice_cols(x, 0, 1);
                let c = g.concat_cols(&[a, b, a]);
                let p = g.permute_cols(c, Rc::new(vec![3, 0, 4, 2, 1]));
                let row = g.slice_cols(x, 0, 4);
                let r = g.sum_rows(row);
                let rs = g.square(r);
                let s = g.square(p);
                let t = g.sum_all(s);
                let u = g.sum_all(rs);
                g.sub(t, u)
            },
            sample(2, 4, 0.5),
        );
    }

    #[test]
    fn attention_gradients() {
        let len = 7;
        let d = 4;
        let heads = 2;
        let window = 2;
        let n_seq = 2;
        let mut valid = vec![true; n_seq * len];
        valid[len] = false;
        let layout = Rc::new(SeqLayout { n_seq, len, valid });
        let k0 = sample(n_seq * len, d, 0.31);
        let v0 = sample(n_seq * len, d, 0.17);
        let lb = sample(heads, 2 * window + 1, 0.8);
        let gb = sample(heads, 3, 0.6);
        let cls = sample(n_seq, d, 0.45);
        check(
            move |g, x| {
                let k = g.input(k0.clone());
                let v = g.input(v0.clone());
                let kx = g.add(k, x);
                let b = g.input(lb.clone());
                let o = g.local_attention(x, kx, v, b, layout.clone(), heads, window);
                let o2 = g.mul(o, x);
                let q = g.input(cls.clone());
                let gbv = g.input(gb.clone());
                let go = g.global_attention(q, x, o2, gbv, layout.clone(), heads);
                let s = g.square(go);
                let a = g.sum_all(s);
                let t = g.square(o);
                let b2 = g.sum_all(t);
                g.add(a, b2)
            },
            sample(n_seq * len, d, 0.23),
        );
    }

    #[test]
    fn attention_bias_gradient() {
        let len = 6;
        let d = 4;
        let heads = 2;
        let window = 1;
        let layout = Rc::new(SeqLayout::all_valid(1, len));
        let q0 = sample(len, d, 0.3);
        let k0 = sample(len, d, 0.7);
        let v0 = sample(len, d, 1.1);
        check(
            move |g, b| {
                let q = g.input(q0.clone());
                let k = g.input(k0.clone());
                let v = g.input(v0.clone());
                let o = g.local_attention(q, k, v, b, layout.clone(), heads, window);
                let s = g.square(o);
                g.sum_all(s)
            },
            sample(heads, 2 * window + 1, 0.9),
        );
    }
}
