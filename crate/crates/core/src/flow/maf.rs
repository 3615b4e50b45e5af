//! Conditional masked autoregressive flow.
//!
//! A fixed standardizing affine map is followed by `K` affine MADE
//! transforms `z_i = (x_i − μ_i(x_<i, c)) · exp(s_i(x_<i, c))`, with the
//! coordinate order reversed between transforms. Log-scales are soft-clamped
//! to `[−7, 7]` by `s = 7 · tanh(r / 7)`.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::Standardizer;
use crate::error::{Error, Result};
use crate::nn::{apply_dropout, Dropout, Graph, ParamSet, Tensor, Var};

const SCALE_CLAMP: f64 = 7.0;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    pub num_transforms: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub eps_softplus: f64,
}

impl FlowConfig {
    pub fn for_dim(dim: usize) -> Self {
        Self {
            dim,
            num_transforms: 5,
            hidden: vec![64, 64],
            dropout: 0.2,
            eps_softplus: super::EPS_SOFTPLUS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("flow dimension must be positive".into()));
        }
        if self.num_transforms > 0 && (self.hidden.is_empty() || self.hidden.contains(&0)) {
            return Err(Error::Config("MADE needs at least one non-empty hidden layer".into()));
        }
        if !(self.eps_softplus > 0.0) {
            return Err(Error::Config("eps_softplus must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("flow dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Made {
    w_in: usize,
    w_ctx: usize,
    b_in: usize,
    /// `(weight, bias)` of hidden layers after the first.
    hidden: Vec<(usize, usize)>,
    w_out: usize,
    b_out: usize,
}

/// Dropout masks of every hidden layer of every transform.
pub type FlowMasks = Vec<Vec<Option<Rc<Tensor>>>>;

/// Parameter indices and connectivity masks of a flow in a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Maf {
    pub cfg: FlowConfig,
    pub context_dim: usize,
    /// Standardization applied to `u` before the first transform.
    pub base: Standardizer,
    transforms: Vec<Made>,
    /// Connectivity masks: input→hidden, hidden→hidden…, hidden→output.
    masks: Vec<Rc<Tensor>>,
    perm: Rc<Vec<usize>>,
}

/// MADE degrees: inputs `1..=D`, hidden units `j mod D`.
fn made_masks(dim: usize, hidden: &[usize]) -> Vec<Rc<Tensor>> {
    let deg_in: Vec<usize> = (1..=dim).collect();
    let deg_hidden: Vec<Vec<usize>> = hidden.iter().map(|&h| (0..h).map(|j| j % dim).collect()).collect();
    let mut out = Vec::new();
    let mut prev = deg_in;
    for deg in &deg_hidden {
        let mut m = Tensor::zeros(deg.len(), prev.len());
        for (r, &dr) in deg.iter().enumerate() {
            for (c, &dc) in prev.iter().enumerate() {
                if dr >= dc {
                    m.set(r, c, 1.0);
                }
            }
        }
        out.push(Rc::new(m));
        prev = deg.clone();
    }
    // outputs for coordinate i (degree i+1) see hidden units of degree < i+1
    let mut m = Tensor::zeros(2 * dim, prev.len());
    for i in 0..dim {
        for (c, &dc) in prev.iter().enumerate() {
            if i + 1 > dc {
                m.set(i, c, 1.0);
                m.set(dim + i, c, 1.0);
            }
        }
    }
    out.push(Rc::new(m));
    out
}

impl Maf {
    pub fn new<R: Rng + ?Sized>(cfg: &FlowConfig, context_dim: usize, p: &mut ParamSet, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let masks = made_masks(d, &cfg.hidden);
        let transforms = (0..cfg.num_transforms)
            .map(|k| {
                let h0 = cfg.hidden[0];
                let w_in = p.push_glorot(format!("flow.t{k}.in.w"), h0, d, rng);
                let w_ctx = p.push_glorot(format!("flow.t{k}.ctx.w"), h0, context_dim.max(1), rng);
                let b_in = p.push_zeros(format!("flow.t{k}.in.b"), 1, h0);
                let hidden = cfg
                    .hidden
                    .windows(2)
                    .enumerate()
                    .map(|(l, w)| {
                        (
                            p.push_glorot(format!("flow.t{k}.h{}.w", l + 1), w[1], w[0], rng),
                            p.push_zeros(format!("flow.t{k}.h{}.b", l + 1), 1, w[1]),
                        )
                    })
                    .collect();
                let last = *cfg.hidden.last().unwrap();
                let w_out = p.push_glorot(format!("flow.t{k}.out.w"), 2 * d, last, rng);
                p.get_mut(w_out).scale(0.1);
                let b_out = p.push_zeros(format!("flow.t{k}.out.b"), 1, 2 * d);
                Made {
                    w_in,
                    w_ctx,
                    b_in,
                    hidden,
                    w_out,
                    b_out,
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            context_dim,
            base: Standardizer::identity(d),
            transforms,
            masks,
            perm: Rc::new((0..d).rev().collect()),
        })
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    /// Draws dropout masks for `rows` rows of every hidden layer.
    pub fn draw_masks(&self, rows: usize, dropout: &mut Dropout) -> FlowMasks {
        self.transforms
            .iter()
            .map(|_| self.cfg.hidden.iter().map(|&h| dropout.mask(rows, h)).collect())
            .collect()
    }

    /// `(μ, s)` of transform `k` at input `x`.
    fn made(&self, g: &mut Graph, k: usize, x: Var, ctx: Var, masks: &[Option<Rc<Tensor>>]) -> (Var, Var) {
        let t = &self.transforms[k];
        let d = self.cfg.dim;
        let w = g.param(t.w_in);
        let w = g.mul_const(w, self.masks[0].clone());
        let b = g.param(t.b_in);
        let h = g.linear(x, w, Some(b));
        let wc = g.param(t.w_ctx);
        let hc = g.linear(ctx, wc, None);
        let h = g.add(h, hc);
        let h = g.gelu(h);
        let mut h = apply_dropout(g, h, masks[0].clone());
        for (l, &(wi, bi)) in t.hidden.iter().enumerate() {
            let w = g.param(wi);
            let w = g.mul_const(w, self.masks[l + 1].clone());
            let b = g.param(bi);
            let z = g.linear(h, w, Some(b));
            let z = g.gelu(z);
            h = apply_dropout(g, z, masks[l + 1].clone());
        }
        let w = g.param(t.w_out);
        let w = g.mul_const(w, self.masks.last().unwrap().clone());
        let b = g.param(t.b_out);
        let out = g.linear(h, w, Some(b));
        let mu = g.slice_cols(out, 0, d);
        let r = g.slice_cols(out, d, d);
        let r = g.scale(r, 1.0 / SCALE_CLAMP);
        let r = g.tanh(r);
        let s = g.scale(r, SCALE_CLAMP);
        (mu, s)
    }

    fn standardize(&self, g: &mut Graph, u: Var) -> Var {
        let n = g.value(u).rows;
        let d = self.cfg.dim;
        let mut scale = Tensor::zeros(n, d);
        for r in 0..n {
            for j in 0..d {
                scale.set(r, j, 1.0 / self.base.std[j]);
            }
        }
        let shift: Vec<f64> = (0..d).map(|j| -self.base.mean[j] / self.base.std[j]).collect();
        let z = g.mul_const(u, Rc::new(scale));
        let shift = g.input(Tensor::row_vector(shift));
        g.add_row(z, shift)
    }

    fn base_log_det(&self) -> f64 {
        -self.base.std.iter().map(|s| s.ln()).sum::<f64>()
    }

    /// Forward pass `u → z`, returning `z` and the per-row log-determinant
    /// (an `n × 1` column, including the standardization).
    pub fn forward(&self, g: &mut Graph, u: Var, ctx: Var, masks: &FlowMasks) -> (Var, Var) {
        let n = g.value(u).rows;
        let mut z = self.standardize(g, u);
        let mut logdet = g.input(Tensor::filled(n, 1, self.base_log_det()));
        let k_last = self.transforms.len().saturating_sub(1);
        for k in 0..self.transforms.len() {
            let (mu, s) = self.made(g, k, z, ctx, &masks[k]);
            let diff = g.sub(z, mu);
            let es = g.exp(s);
            z = g.mul(diff, es);
            let ld = g.sum_rows(s);
            logdet = g.add(logdet, ld);
            if k != k_last {
                z = g.permute_cols(z, self.perm.clone());
            }
        }
        (z, logdet)
    }

    /// `log q(u | c)` per row as an `n × 1` column.
    pub fn log_prob(&self, g: &mut Graph, u: Var, ctx: Var, masks: &FlowMasks) -> Var {
        let (z, logdet) = self.forward(g, u, ctx, masks);
        let sq = g.square(z);
        let sq = g.sum_rows(sq);
        let base = g.scale(sq, -0.5);
        let base = g.add_scalar(base, -(self.cfg.dim as f64) * HALF_LOG_2PI);
        g.add(base, logdet)
    }

    /// Inverts the flow for base points `z` by sequential autoregressive
    /// passes, holding the dropout masks fixed.
    pub fn inverse(&self, params: &ParamSet, z: &Tensor, ctx: &Tensor, masks: &FlowMasks) -> Tensor {
        let d = self.cfg.dim;
        let n = z.rows;
        let mut cur = z.clone();
        for k in (0..self.transforms.len()).rev() {
            if k + 1 != self.transforms.len() {
                cur = permute(&cur, &self.perm);
            }
            let mut x = Tensor::zeros(n, d);
            for i in 0..d {
                let mut g = Graph::inference(params);
                let xv = g.input(x.clone());
                let cv = g.input(ctx.clone());
                let (mu, s) = self.made(&mut g, k, xv, cv, &masks[k]);
                for r in 0..n {
                    let v = cur.get(r, i) * (-g[s].get(r, i)).exp() + g[mu].get(r, i);
                    x.set(r, i, v);
                }
            }
            cur = x;
        }
        for r in 0..n {
            for j in 0..d {
                let v = cur.get(r, j) * self.base.std[j] + self.base.mean[j];
                cur.set(r, j, v);
            }
        }
        cur
    }

    /// `n` draws of `u` given a single context row.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        params: &ParamSet,
        ctx_row: &[f64],
        n: usize,
        rng: &mut R,
        dropout: &mut Dropout,
    ) -> Tensor {
        let z = Tensor::from_vec(
            n,
            self.cfg.dim,
            (0..n * self.cfg.dim).map(|_| rng.sample(StandardNormal)).collect(),
        );
        let mut ctx = Tensor::zeros(n, ctx_row.len());
        for r in 0..n {
            ctx.row_mut(r).copy_from_slice(ctx_row);
        }
        let masks = self.draw_masks(n, dropout);
        self.inverse(params, &z, &ctx, &masks)
    }
}

fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    // reversal is its own inverse
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        for (j, &p) in perm.iter().enumerate() {
            out.set(r, j, x.get(r, p));
        }
    }
    out
}
