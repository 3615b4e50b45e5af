//! Local–global attention encoder for follower windows.
//!
//! Each step `(s, v, dv)` is standardized with frozen per-channel statistics
//! and projected to `d_model`. Every pre-norm layer applies
//!
//! 1. banded multi-head self-attention over tokens within `local_window`
//!    steps, with a learnable bias per `(head, offset)`;
//! 2. attention from a learnable summary token over all valid tokens, with
//!    a learnable bias per `(head, log-spaced distance bucket)`;
//! 3. a GELU feed-forward block shared by tokens and the summary token.
//!
//! The layer-normalized final summary state is the context vector.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::attention::buckets_for_len;
use crate::nn::{apply_dropout, Dropout, Graph, ParamSet, SeqLayout, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub local_window: usize,
    pub dropout: f64,
    pub ffn_mult: usize,
    pub target_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 3,
            d_model: 64,
            layers: 2,
            heads: 4,
            local_window: 4,
            dropout: 0.2,
            ffn_mult: 4,
            target_len: 75,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.input_dim == 0 || self.target_len == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Frozen per-channel affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Column statistics of the rows of `x`, with standard deviations
    /// floored at `1e-6`.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in rows {
            n += 1;
            for j in 0..dim {
                sum[j] += r[j];
                sq[j] += r[j] * r[j];
            }
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &mut [f64]) {
        let d = self.mean.len();
        for (i, v) in x.iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
    }
}

/// Fits `x` to exactly `target_len` rows: longer inputs keep their last
/// rows, shorter ones are left-padded with copies of the first row, which
/// are flagged invalid.
pub fn pad_or_crop(x: &Tensor, target_len: usize) -> (Tensor, Vec<bool>) {
    let n = x.rows;
    if n >= target_len {
        let idx: Vec<usize> = (n - target_len..n).collect();
        return (x.select_rows(&idx), vec![true; target_len]);
    }
    let pad = target_len - n;
    let mut idx = vec![0; pad];
    idx.extend(0..n);
    let mut valid = vec![false; pad];
    valid.extend(std::iter::repeat_n(true, n));
    (x.select_rows(&idx), valid)
}

/// A batch of equal-length observation windows stacked row-wise.
#[derive(Debug, Clone)]
pub struct ObsBatch {
    pub x: Tensor,
    pub layout: Rc<SeqLayout>,
}

impl ObsBatch {
    pub fn len(&self) -> usize {
        self.layout.n_seq
    }

    pub fn is_empty(&self) -> bool {
        self.layout.n_seq == 0
    }

    /// Pads or crops every window to `target_len` rows.
    pub fn from_windows(windows: &[&Tensor], target_len: usize) -> Result<Self> {
        let cols = windows.first().map_or(3, |w| w.cols);
        let mut data = Vec::with_capacity(windows.len() * target_len * cols);
        let mut valid = Vec::with_capacity(windows.len() * target_len);
        for w in windows {
            if w.rows == 0 {
                return Err(Error::EmptyInput("observation window".into()));
            }
            if w.cols != cols {
                return Err(Error::Shape(format!("window has {} channels, expected {cols}", w.cols)));
            }
            let (p, m) = pad_or_crop(w, target_len);
            data.extend_from_slice(&p.data);
            valid.extend(m);
        }
        Ok(Self {
            x: Tensor::from_vec(windows.len() * target_len, cols, data),
            layout: Rc::new(SeqLayout {
                n_seq: windows.len(),
                len: target_len,
                valid,
            }),
        })
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let len = self.layout.len;
        let rows: Vec<usize> = idx.iter().flat_map(|&i| i * len..(i + 1) * len).collect();
        Self {
            x: self.x.select_rows(&rows),
            layout: Rc::new(SeqLayout {
                n_seq: idx.len(),
                len,
                valid: rows.iter().map(|&r| self.layout.valid[r]).collect(),
            }),
        }
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    ln1: (usize, usize),
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    o: (usize, usize),
    local_bias: usize,
    ln2: (usize, usize),
    gq: (usize, usize),
    gk: (usize, usize),
    gv: (usize, usize),
    go: (usize, usize),
    global_bias: usize,
    ln3: (usize, usize),
    ff1: (usize, usize),
    ff2: (usize, usize),
}

/// Parameter indices of an encoder inside a shared [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    input: (usize, usize),
    cls: usize,
    layers: Vec<LayerParams>,
    final_ln: (usize, usize),
    n_buckets: usize,
}

fn push_linear<R: Rng + ?Sized>(p: &mut ParamSet, name: &str, out: usize, inp: usize, rng: &mut R) -> (usize, usize) {
    let w = p.push_glorot(format!("{name}.w"), out, inp, rng);
    let b = p.push_zeros(format!("{name}.b"), 1, out);
    (w, b)
}

fn push_ln(p: &mut ParamSet, name: &str, d: usize) -> (usize, usize) {
    let g = p.push_filled(format!("{name}.gamma"), 1, d, 1.0);
    let b = p.push_zeros(format!("{name}.beta"), 1, d);
    (g, b)
}

impl Encoder {
    /// Registers freshly initialized encoder parameters in `p`.
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, p: &mut ParamSet, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let n_buckets = buckets_for_len(cfg.target_len);
        let input = push_linear(p, "enc.in", d, cfg.input_dim, rng);
        let cls = p.push_zeros("enc.cls", 1, d);
        let layers = (0..cfg.layers)
            .map(|l| {
                let n = |s: &str| format!("enc.l{l}.{s}");
                LayerParams {
                    ln1: push_ln(p, &n("ln1"), d),
                    q: push_linear(p, &n("q"), d, d, rng),
                    k: push_linear(p, &n("k"), d, d, rng),
                    v: push_linear(p, &n("v"), d, d, rng),
                    o: push_linear(p, &n("o"), d, d, rng),
                    local_bias: p.push_zeros(n("local_bias"), cfg.heads, 2 * cfg.local_window + 1),
                    ln2: push_ln(p, &n("ln2"), d),
                    gq: push_linear(p, &n("gq"), d, d, rng),
                    gk: push_linear(p, &n("gk"), d, d, rng),
                    gv: push_linear(p, &n("gv"), d, d, rng),
                    go: push_linear(p, &n("go"), d, d, rng),
                    global_bias: p.push_zeros(n("global_bias"), cfg.heads, n_buckets),
                    ln3: push_ln(p, &n("ln3"), d),
                    ff1: push_linear(p, &n("ff1"), cfg.ffn_mult * d, d, rng),
                    ff2: push_linear(p, &n("ff2"), d, cfg.ffn_mult * d, rng),
                }
            })
            .collect();
        let final_ln = push_ln(p, "enc.final_ln", d);
        Ok(Self {
            cfg: cfg.clone(),
            input,
            cls,
            layers,
            final_ln,
            n_buckets,
        })
    }

    pub fn n_buckets(&self) -> usize {
        self.n_buckets
    }

    fn lin(g: &mut Graph, x: Var, wb: (usize, usize)) -> Var {
        let w = g.param(wb.0);
        let b = g.param(wb.1);
        g.linear(x, w, Some(b))
    }

    fn ln(g: &mut Graph, x: Var, gb: (usize, usize)) -> Var {
        let gamma = g.param(gb.0);
        let beta = g.param(gb.1);
        g.layer_norm(x, gamma, beta)
    }

    fn ffn(&self, g: &mut Graph, x: Var, lp: &LayerParams, dropout: &mut Dropout) -> Var {
        let rows = g.value(x).rows;
        let h = Self::ln(g, x, lp.ln3);
        let h = Self::lin(g, h, lp.ff1);
        let h = g.gelu(h);
        let h = apply_dropout(g, h, dropout.mask(rows, self.cfg.ffn_mult * self.cfg.d_model));
        let h = Self::lin(g, h, lp.ff2);
        let h = apply_dropout(g, h, dropout.mask(rows, self.cfg.d_model));
        g.add(x, h)
    }

    /// Builds the encoder on `x`, already standardized, returning the
    /// `n_seq × d_model` context matrix.
    pub fn forward(&self, g: &mut Graph, x: Var, layout: &Rc<SeqLayout>, dropout: &mut Dropout) -> Var {
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let n = layout.n_seq;
        let rows = n * layout.len;
        let mut h = Self::lin(g, x, self.input);
        let cls = g.param(self.cls);
        let mut c = g.repeat_row(cls, n);
        let last = self.layers.len().saturating_sub(1);
        for (li, lp) in self.layers.iter().enumerate() {
            // local self-attention
            let hn = Self::ln(g, h, lp.ln1);
            let q = Self::lin(g, hn, lp.q);
            let k = Self::lin(g, hn, lp.k);
            let v = Self::lin(g, hn, lp.v);
            let bias = g.param(lp.local_bias);
            let a = g.local_attention(q, k, v, bias, layout.clone(), cfg.heads, cfg.local_window);
            let a = Self::lin(g, a, lp.o);
            let a = apply_dropout(g, a, dropout.mask(rows, d));
            h = g.add(h, a);

            // summary-token attention
            let cn = Self::ln(g, c, lp.ln2);
            let hn = Self::ln(g, h, lp.ln2);
            let q = Self::lin(g, cn, lp.gq);
            let k = Self::lin(g, hn, lp.gk);
            let v = Self::lin(g, hn, lp.gv);
            let bias = g.param(lp.global_bias);
            let a = g.global_attention(q, k, v, bias, layout.clone(), cfg.heads);
            let a = Self::lin(g, a, lp.go);
            let a = apply_dropout(g, a, dropout.mask(n, d));
            c = g.add(c, a);

            // tokens after the last layer never reach the output
            if li != last {
                h = self.ffn(g, h, lp, dropout);
            }
            c = self.ffn(g, c, lp, dropout);
        }
        Self::ln(g, c, self.final_ln)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::attention::{local_logits_dense, local_mask};
    use crate::rng;

    fn tiny() -> (Encoder, ParamSet) {
        let cfg = EncoderConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            local_window: 2,
            target_len: 12,
            ..EncoderConfig::default()
        };
        let mut p = ParamSet::new();
        let mut r = rng::from_seed(0);
        let enc = Encoder::new(&cfg, &mut p, &mut r).unwrap();
        // perturb the zero-initialized tensors so every path carries signal
        for t in p.tensors_mut() {
            for x in &mut t.data {
                *x += 0.1 * r.random_range(-1.0..1.0);
            }
        }
        (enc, p)
    }

    fn batch(n: usize, len: usize, seed: u64) -> ObsBatch {
        let mut r = rng::from_seed(seed);
        let ws: Vec<Tensor> = (0..n)
            .map(|_| Tensor::from_vec(len, 3, (0..len * 3).map(|_| r.random_range(-1.0..1.0)).collect()))
            .collect();
        let refs: Vec<&Tensor> = ws.iter().collect();
        ObsBatch::from_windows(&refs, 12).unwrap()
    }

    fn encode(enc: &Encoder, p: &ParamSet, b: &ObsBatch, dropout: &mut Dropout) -> Tensor {
        let mut g = Graph::inference(p);
        let x = g.input(b.x.clone());
        let c = enc.forward(&mut g, x, &b.layout, dropout);
        g[c].clone()
    }

    #[test]
    fn pad_and_crop() {
        let x = Tensor::from_vec(100, 3, (0..300).map(f64::from).collect());
        let (y, m) = pad_or_crop(&x, 75);
        assert_eq!(y.row(0), x.row(25));
        assert!(m.iter().all(|v| *v));
        let (y, m) = pad_or_crop(&x.select_rows(&(0..50).collect::<Vec<_>>()), 75);
        assert_eq!(m.iter().filter(|v| !**v).count(), 25);
        assert!(m[..25].iter().all(|v| !*v) && m[25..].iter().all(|v| *v));
        assert_eq!(y.row(0), x.row(0));
        assert_eq!(y.row(25), x.row(0));
        assert_eq!(y.row(74), x.row(49));
        assert_eq!(pad_or_crop(&x, 100).0, x);
    }

    #[test]
    fn eval_is_deterministic_and_dropout_is_not() {
        let (enc, p) = tiny();
        let b = batch(3, 12, 1);
        let c1 = encode(&enc, &p, &b, &mut Dropout::Off);
        let c2 = encode(&enc, &p, &b, &mut Dropout::Off);
        assert_eq!(c1, c2);
        assert_eq!(c1.shape(), (3, 8));
        let d1 = encode(&enc, &p, &b, &mut Dropout::realization(0.2, 1));
        let d2 = encode(&enc, &p, &b, &mut Dropout::realization(0.2, 2));
        assert_ne!(d1, d2);
        assert_eq!(d1, encode(&enc, &p, &b, &mut Dropout::realization(0.2, 1)));
        let mut r = rng::from_seed(5);
        assert_ne!(c1, encode(&enc, &p, &b, &mut Dropout::train(0.2, &mut r)));
    }

    #[test]
    fn padded_positions_do_not_matter() {
        let (enc, p) = tiny();
        let mut r = rng::from_seed(4);
        let short = Tensor::from_vec(7, 3, (0..21).map(|_| r.random_range(-1.0..1.0)).collect());
        let b = ObsBatch::from_windows(&[&short], 12).unwrap();
        let mut b2 = b.clone();
        for row in 0..5 {
            b2.x.row_mut(row).copy_from_slice(&[9.0, -9.0, 3.0]);
        }
        assert_eq!(
            encode(&enc, &p, &b, &mut Dropout::Off),
            encode(&enc, &p, &b2, &mut Dropout::Off)
        );
    }

    #[test]
    fn local_mask_matches_band() {
        let len = 12;
        let w = 2;
        let valid: Vec<bool> = (0..len).map(|t| t >= 3).collect();
        let mask = local_mask(len, w, &valid);
        let q: Vec<f64> = (0..len * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..len * 4).map(|i| (i as f64 * 0.11).cos()).collect();
        let bias = vec![0.1; 2 * (2 * w + 1)];
        let logits = local_logits_dense(&q, &k, 4, &bias, 1, 2, w, &valid);
        for t in 0..len {
            for tau in 0..len {
                let admissible = t.abs_diff(tau) <= w && valid[tau];
                assert_eq!(mask[t * len + tau], admissible);
                assert_eq!(logits[t * len + tau] == f64::NEG_INFINITY, !admissible);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (enc, mut p) = tiny();
        let b = batch(2, 12, 3);
        let weights = Rc::new(Tensor::from_vec(
            2,
            8,
            (0..16).map(|i| (i as f64 * 0.7).sin()).collect(),
        ));
        let loss = |p: &ParamSet| -> f64 {
            let mut g = Graph::inference(p);
            let x = g.input(b.x.clone());
            let c = enc.forward(&mut g, x, &b.layout, &mut Dropout::Off);
            let y = g.mul_const(c, weights.clone());
            let s = g.sum_all(y);
            g[s].data[0]
        };
        let grads = {
            let mut g = Graph::new(&p);
            let x = g.input(b.x.clone());
            let c = enc.forward(&mut g, x, &b.layout, &mut Dropout::Off);
            let y = g.mul_const(c, weights.clone());
            let s = g.sum_all(y);
            let gr = g.backward(s);
            g.param_grads(&gr)
        };
        let h = 1e-5;
        let mut checked = 0;
        for pi in 0..p.len() {
            for j in 0..p.get(pi).len() {
                let orig = p.get(pi).data[j];
                p.get_mut(pi).data[j] = orig + h;
                let up = loss(&p);
                p.get_mut(pi).data[j] = orig - h;
                let dn = loss(&p);
                p.get_mut(pi).data[j] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = grads[pi].data[j];
                assert!(
                    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) + 1e-8,
                    "{} [{j}]: fd {fd} vs analytic {an}",
                    p.name(pi)
                );
                checked += 1;
            }
        }
        assert!(checked > 500);
    }

    #[test]
    fn local_sublayer_only_sees_its_band() {
        let (enc, p) = tiny();
        let b = batch(1, 12, 8);
        let tokens = |x: &Tensor| -> Tensor {
            let mut g = Graph::inference(&p);
            let x = g.input(x.clone());
            let h = Encoder::lin(&mut g, x, enc.input);
            let lp = &enc.layers[0];
            let hn = Encoder::ln(&mut g, h, lp.ln1);
            let q = Encoder::lin(&mut g, hn, lp.q);
            let k = Encoder::lin(&mut g, hn, lp.k);
            let v = Encoder::lin(&mut g, hn, lp.v);
            let bias = g.param(lp.local_bias);
            let a = g.local_attention(q, k, v, bias, b.layout.clone(), 2, 2);
            g[a].clone()
        };
        let base = tokens(&b.x);
        let mut changed = b.x.clone();
        changed.row_mut(9).copy_from_slice(&[0.0, 0.0, 0.0]);
        let after = tokens(&changed);
        for t in 0..12 {
            let same = base.row(t) == after.row(t);
            assert_eq!(same, t.abs_diff(9) > 2, "position {t}");
        }
        // the summary path does see the row
        assert_ne!(
            encode(&enc, &p, &b, &mut Dropout::Off),
            encode(
                &enc,
                &p,
                &ObsBatch {
                    x: changed,
                    layout: b.layout.clone()
                },
                &mut Dropout::Off
            )
        );
    }
}
