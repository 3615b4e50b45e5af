//! Posterior model: encoder and flow sharing one parameter set, with
//! persistence as a versioned bundle.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, ObsBatch, Standardizer};
use crate::error::{Error, Result};
use crate::flow::{from_physical, log_det_jacobian, to_physical, FlowConfig, Maf};
use crate::nn::{Dropout, Graph, ParamSet, Tensor};
use crate::rng;
use crate::sim::{ParamVector, ResidualKind};

pub const MODEL_FORMAT_VERSION: u32 = 1;

const ENCODE_CHUNK: usize = 64;
const FLOW_CHUNK: usize = 4096;

/// Where a model snapshot came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub root_seed: u64,
    pub round: usize,
    pub simulations: usize,
}

#[derive(Debug, Clone)]
pub struct PosteriorModel {
    pub kind: ResidualKind,
    pub encoder: Encoder,
    pub flow: Maf,
    pub params: ParamSet,
    pub input_norm: Standardizer,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Bundle {
    format_version: u32,
    kind: ResidualKind,
    encoder: EncoderConfig,
    flow: FlowConfig,
    input_norm: Standardizer,
    theta_norm: Standardizer,
    provenance: Provenance,
    params: ParamSet,
}

/// Runs `f` on consecutive row ranges, rebuilding shared-realization
/// dropout for each chunk so every chunk sees the same network.
fn chunked<T>(
    total: usize,
    chunk: usize,
    dropout: &mut Dropout,
    mut f: impl FnMut(std::ops::Range<usize>, &mut Dropout) -> T,
) -> Vec<T> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < total {
        let end = (start + chunk).min(total);
        let r = if let Dropout::Realization { rate, seed, .. } = *dropout {
            f(start..end, &mut Dropout::realization(rate, seed))
        } else {
            f(start..end, &mut *dropout)
        };
        out.push(r);
        start = end;
    }
    out
}

fn stack_rows(parts: Vec<Tensor>, cols: usize) -> Tensor {
    let rows = parts.iter().map(|t| t.rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend(p.data);
    }
    Tensor::from_vec(rows, cols, data)
}

impl PosteriorModel {
    pub fn new(kind: ResidualKind, enc: &EncoderConfig, flow: &FlowConfig, seed: u64) -> Result<Self> {
        if flow.dim != kind.dim() {
            return Err(Error::ModelMismatch(format!(
                "flow dimension {} does not match {} parameters of the {kind} residual",
                flow.dim,
                kind.dim()
            )));
        }
        let mut params = ParamSet::new();
        let mut r = rng::stream(seed, "model_init", 0);
        let encoder = Encoder::new(enc, &mut params, &mut r)?;
        let flow = Maf::new(flow, enc.d_model, &mut params, &mut r)?;
        Ok(Self {
            kind,
            encoder,
            flow,
            params,
            input_norm: Standardizer::identity(enc.input_dim),
            provenance: Provenance::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    pub fn eps(&self) -> f64 {
        self.flow.cfg.eps_softplus
    }

    pub fn context_dim(&self) -> usize {
        self.encoder.cfg.d_model
    }

    /// Fits the input and parameter standardizations.
    pub fn fit_normalization(&mut self, windows: &[&Tensor], u: &Tensor) {
        let d = self.encoder.cfg.input_dim;
        self.input_norm = Standardizer::fit(windows.iter().flat_map(|w| (0..w.rows).map(move |r| w.row(r))), d);
        self.flow.base = Standardizer::fit((0..u.rows).map(|r| u.row(r)), u.cols);
    }

    /// Validates, pads or crops, and standardizes observation windows.
    pub fn obs_batch(&self, windows: &[&Tensor]) -> Result<ObsBatch> {
        for w in windows {
            if w.cols != self.encoder.cfg.input_dim {
                return Err(Error::Shape(format!(
                    "observation has {} channels, encoder expects {}",
                    w.cols, self.encoder.cfg.input_dim
                )));
            }
            if !w.is_finite() {
                return Err(Error::Domain("observation contains non-finite values".into()));
            }
        }
        let mut b = ObsBatch::from_windows(windows, self.encoder.cfg.target_len)?;
        self.input_norm.apply(&mut b.x.data);
        Ok(b)
    }

    /// Context vectors, one row per observation.
    pub fn encode(&self, obs: &ObsBatch, dropout: &mut Dropout) -> Result<Tensor> {
        if obs.layout.len != self.encoder.cfg.target_len {
            return Err(Error::Shape(format!(
                "windows have {} steps, encoder expects {}",
                obs.layout.len, self.encoder.cfg.target_len
            )));
        }
        let parts = chunked(obs.len(), ENCODE_CHUNK, dropout, |r, d| {
            let sub = obs.select(&r.collect::<Vec<_>>());
            let mut g = Graph::inference(&self.params);
            let x = g.input(sub.x.clone());
            let c = self.encoder.forward(&mut g, x, &sub.layout, d);
            g[c].clone()
        });
        let c = stack_rows(parts, self.context_dim());
        if !c.is_finite() {
            return Err(Error::Numerical("encoder produced non-finite context".into()));
        }
        Ok(c)
    }

    /// `log q(u | c)` for paired rows of `u` and `ctx`.
    pub fn log_prob_u(&self, u: &Tensor, ctx: &Tensor, dropout: &mut Dropout) -> Result<Vec<f64>> {
        if u.cols != self.dim() || ctx.cols != self.context_dim() || u.rows != ctx.rows {
            return Err(Error::Shape(format!(
                "u {:?} and context {:?} do not match the model",
                u.shape(),
                ctx.shape()
            )));
        }
        let parts = chunked(u.rows, FLOW_CHUNK, dropout, |r, d| {
            let idx: Vec<usize> = r.collect();
            let mut g = Graph::inference(&self.params);
            let uv = g.input(u.select_rows(&idx));
            let cv = g.input(ctx.select_rows(&idx));
            let masks = self.flow.draw_masks(idx.len(), d);
            let lp = self.flow.log_prob(&mut g, uv, cv, &masks);
            g[lp].data.clone()
        });
        let out: Vec<f64> = parts.into_iter().flatten().collect();
        if out.iter().any(|x| x.is_nan()) {
            return Err(Error::Numerical("flow log-density is NaN".into()));
        }
        Ok(out)
    }

    /// Physical-space log-density `log q(u|c) − Σ log σ(u_i)`.
    pub fn log_prob_theta(&self, thetas: &[ParamVector], ctx: &Tensor) -> Result<Vec<f64>> {
        let u = self.to_u(thetas)?;
        let lp = self.log_prob_u(&u, ctx, &mut Dropout::Off)?;
        Ok(lp
            .iter()
            .enumerate()
            .map(|(i, l)| l - log_det_jacobian(u.row(i)))
            .collect())
    }

    pub fn to_u(&self, thetas: &[ParamVector]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(thetas.len() * self.dim());
        for t in thetas {
            if t.kind() != self.kind {
                return Err(Error::ModelMismatch(format!(
                    "parameter of kind {} for a {} model",
                    t.kind(),
                    self.kind
                )));
            }
            data.extend(from_physical(t, self.eps())?);
        }
        Ok(Tensor::from_vec(thetas.len(), self.dim(), data))
    }

    pub fn to_theta(&self, u: &Tensor) -> Result<Vec<ParamVector>> {
        (0..u.rows)
            .map(|r| to_physical(u.row(r), self.kind, self.eps()))
            .collect()
    }

    pub fn sample_u<R: Rng + ?Sized>(&self, ctx_row: &[f64], n: usize, rng: &mut R, dropout: &mut Dropout) -> Tensor {
        self.flow.sample(&self.params, ctx_row, n, rng, dropout)
    }

    pub fn sample_theta<R: Rng + ?Sized>(&self, ctx_row: &[f64], n: usize, rng: &mut R) -> Result<Vec<ParamVector>> {
        let u = self.sample_u(ctx_row, n, rng, &mut Dropout::Off);
        self.to_theta(&u)
    }

    /// Negative mean physical-space log-likelihood of `(u, x)` pairs and its
    /// gradient with respect to every parameter.
    pub fn nll_and_grad(&self, u: &Tensor, obs: &ObsBatch) -> Result<(f64, Vec<Tensor>)> {
        self.loss_and_grad(u, obs, &mut Dropout::Off, &mut Dropout::Off)
    }

    /// Training-mode loss and gradient: fresh per-row dropout masks in the
    /// encoder and the flow at their configured rates.
    pub fn train_loss_and_grad(&self, u: &Tensor, obs: &ObsBatch, rng: &mut rng::Rng) -> Result<(f64, Vec<Tensor>)> {
        let mut flow_rng = rng::from_seed(rng.random());
        let mut enc = Dropout::train(self.encoder.cfg.dropout, rng);
        let mut flow = Dropout::train(self.flow.cfg.dropout, &mut flow_rng);
        self.loss_and_grad(u, obs, &mut enc, &mut flow)
    }

    fn loss_and_grad(
        &self,
        u: &Tensor,
        obs: &ObsBatch,
        enc_dropout: &mut Dropout,
        flow_dropout: &mut Dropout,
    ) -> Result<(f64, Vec<Tensor>)> {
        if u.rows == 0 || u.rows != obs.len() {
            return Err(Error::Shape(format!(
                "{} parameter rows for {} observations",
                u.rows,
                obs.len()
            )));
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(obs.x.clone());
        let c = self.encoder.forward(&mut g, x, &obs.layout, enc_dropout);
        let uv = g.input(u.clone());
        let masks = self.flow.draw_masks(u.rows, flow_dropout);
        let lp = self.flow.log_prob(&mut g, uv, c, &masks);
        let mean = g.mean_all(lp);
        let loss = g.scale(mean, -1.0);
        let jac: f64 = (0..u.rows).map(|r| log_det_jacobian(u.row(r))).sum::<f64>() / u.rows as f64;
        let value = g[loss].data[0] + jac;
        if !value.is_finite() {
            let worst = g[lp].data.iter().copied().fold(f64::INFINITY, f64::min);
            return Err(Error::Numerical(format!(
                "non-finite loss on a batch of {} (lowest row log-density {worst})",
                u.rows
            )));
        }
        let grads = g.backward(loss);
        Ok((value, g.param_grads(&grads)))
    }

    /// Evaluation-mode negative mean log-likelihood.
    pub fn nll(&self, u: &Tensor, obs: &ObsBatch) -> Result<f64> {
        let c = self.encode(obs, &mut Dropout::Off)?;
        let lp = self.log_prob_u(u, &c, &mut Dropout::Off)?;
        let n = u.rows as f64;
        Ok(-(0..u.rows).map(|r| lp[r] - log_det_jacobian(u.row(r))).sum::<f64>() / n)
    }

    /// MC-dropout epistemic score of each candidate, z-scored across
    /// candidates. For every pass `m` one dropout realization of the whole
    /// network is drawn; `α(θ, c) = mean_m ℓ + log(var_m ℓ + ε_α)` is then
    /// averaged over the contexts.
    pub fn mc_dropout_alpha<R: Rng + ?Sized>(
        &self,
        theta_u: &Tensor,
        contexts: &ObsBatch,
        passes: usize,
        eps_alpha: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if passes < 2 {
            return Err(Error::Config("MC-dropout needs at least two passes".into()));
        }
        if contexts.is_empty() {
            return Err(Error::EmptyInput("MC-dropout context subset".into()));
        }
        let alpha = self.raw_alpha(
            theta_u,
            contexts,
            passes,
            eps_alpha,
            self.encoder.cfg.dropout,
            self.flow.cfg.dropout,
            rng,
        )?;
        Ok(zscore(&alpha))
    }

    /// Unstandardized scores, with explicit dropout rates.
    #[allow(clippy::too_many_arguments)]
    pub fn raw_alpha<R: Rng + ?Sized>(
        &self,
        theta_u: &Tensor,
        contexts: &ObsBatch,
        passes: usize,
        eps_alpha: f64,
        enc_rate: f64,
        flow_rate: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let k = theta_u.rows;
        let s = contexts.len();
        let jac: Vec<f64> = (0..k).map(|i| log_det_jacobian(theta_u.row(i))).collect();
        // Welford accumulators per (candidate, context)
        let mut mean = vec![0.0; k * s];
        let mut m2 = vec![0.0; k * s];
        let mut u_rows = Tensor::zeros(k * s, self.dim());
        for i in 0..k {
            for j in 0..s {
                u_rows.row_mut(i * s + j).copy_from_slice(theta_u.row(i));
            }
        }
        for m in 0..passes {
            let seed_enc: u64 = rng.random();
            let seed_flow: u64 = rng.random();
            let c = self.encode(contexts, &mut Dropout::realization(enc_rate, seed_enc))?;
            let mut ctx_rows = Tensor::zeros(k * s, self.context_dim());
            for i in 0..k {
                for j in 0..s {
                    ctx_rows.row_mut(i * s + j).copy_from_slice(c.row(j));
                }
            }
            let lp = self.log_prob_u(&u_rows, &ctx_rows, &mut Dropout::realization(flow_rate, seed_flow))?;
            let cnt = (m + 1) as f64;
            for (idx, l) in lp.iter().enumerate() {
                let x = l - jac[idx / s];
                let delta = x - mean[idx];
                mean[idx] += delta / cnt;
                m2[idx] += delta * (x - mean[idx]);
            }
        }
        Ok((0..k)
            .map(|i| {
                (0..s)
                    .map(|j| {
                        let idx = i * s + j;
                        let var = m2[idx] / passes as f64;
                        mean[idx] + (var + eps_alpha).ln()
                    })
                    .sum::<f64>()
                    / s as f64
            })
            .collect())
    }

    fn bundle(&self) -> Bundle {
        Bundle {
            format_version: MODEL_FORMAT_VERSION,
            kind: self.kind,
            encoder: self.encoder.cfg.clone(),
            flow: self.flow.cfg.clone(),
            input_norm: self.input_norm.clone(),
            theta_norm: self.flow.base.clone(),
            provenance: self.provenance.clone(),
            params: self.params.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.bundle())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: Bundle = serde_json::from_str(text)?;
        if b.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelMismatch(format!(
                "unsupported model format {}",
                b.format_version
            )));
        }
        let mut m = Self::new(b.kind, &b.encoder, &b.flow, 0)?;
        if m.params.len() != b.params.len() {
            return Err(Error::ModelMismatch(
                "parameter count differs from the configuration".into(),
            ));
        }
        for ((name, t), (bname, bt)) in m.params.iter().zip(b.params.iter()) {
            if name != bname || t.shape() != bt.shape() {
                return Err(Error::ModelMismatch(format!("parameter {bname} does not match {name}")));
            }
        }
        m.params = b.params;
        m.input_norm = b.input_norm;
        m.flow.base = b.theta_norm;
        m.provenance = b.provenance;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Standard scores; a constant input maps to zeros.
pub fn zscore(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    if x.is_empty() {
        return Vec::new();
    }
    let m = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - m) / sd).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Adam;
    use crate::sim::Prior;

    fn tiny(kind: ResidualKind) -> PosteriorModel {
        let enc = EncoderConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            local_window: 2,
            target_len: 10,
            ..EncoderConfig::default()
        };
        let flow = FlowConfig {
            num_transforms: 2,
            hidden: vec![8, 8],
            ..FlowConfig::for_dim(kind.dim())
        };
        PosteriorModel::new(kind, &enc, &flow, 3).unwrap()
    }

    fn data(model: &PosteriorModel, n: usize, seed: u64) -> (Tensor, ObsBatch) {
        let mut r = rng::from_seed(seed);
        let prior = Prior::new(model.kind);
        let thetas: Vec<ParamVector> = (0..n).map(|_| prior.sample(&mut r, 10_000).unwrap()).collect();
        let u = model.to_u(&thetas).unwrap();
        let ws: Vec<Tensor> = thetas
            .iter()
            .map(|t| {
                Tensor::from_vec(
                    10,
                    3,
                    (0..30)
                        .map(|i| t.idm.v0 / 30.0 + t.sigma * ((i as f64) * 0.3).sin() + r.random_range(-0.1..0.1))
                        .collect(),
                )
            })
            .collect();
        let refs: Vec<&Tensor> = ws.iter().collect();
        (u, model.obs_batch(&refs).unwrap())
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut model = tiny(ResidualKind::IidGaussian);
        let mut r = rng::from_seed(17);
        for t in model.params.tensors_mut() {
            for x in &mut t.data {
                *x += 0.05 * r.random_range(-1.0..1.0);
            }
        }
        let (u, obs) = data(&model, 6, 1);
        model.fit_normalization(&[], &u);
        let (_, grads) = model.nll_and_grad(&u, &obs).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        for pi in 0..model.params.len() {
            let len = model.params.get(pi).len();
            for j in (0..len).step_by(len.div_ceil(6).max(1)) {
                let orig = model.params.get(pi).data[j];
                model.params.get_mut(pi).data[j] = orig + h;
                let up = model.nll(&u, &obs).unwrap();
                model.params.get_mut(pi).data[j] = orig - h;
                let dn = model.nll(&u, &obs).unwrap();
                model.params.get_mut(pi).data[j] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = grads[pi].data[j];
                assert!(
                    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) + 1e-7,
                    "{}[{j}]: fd {fd} vs {an}",
                    model.params.name(pi)
                );
                checked += 1;
            }
        }
        assert!(checked >= 100, "only {checked} weights checked");
    }

    #[test]
    fn duplicated_batch_has_same_loss() {
        let model = tiny(ResidualKind::Matern52);
        let (u, obs) = data(&model, 5, 2);
        let (l1, _) = model.nll_and_grad(&u, &obs).unwrap();
        let idx: Vec<usize> = (0..5).chain(0..5).collect();
        let (l2, _) = model.nll_and_grad(&u.select_rows(&idx), &obs.select(&idx)).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        assert!((l1 - model.nll(&u, &obs).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let mut model = tiny(ResidualKind::IidGaussian);
        let (u, obs) = data(&model, 32, 3);
        model.fit_normalization(&[], &u);
        let mut adam = Adam::new(1e-2);
        let first = model.nll(&u, &obs).unwrap();
        for _ in 0..50 {
            let (_, g) = model.nll_and_grad(&u, &obs).unwrap();
            adam.step(&mut model.params, &g);
        }
        let last = model.nll(&u, &obs).unwrap();
        assert!(last < first - 0.1, "{first} -> {last}");
    }

    #[test]
    fn change_of_variables_identity() {
        let model = tiny(ResidualKind::Matern52);
        let (_, obs) = data(&model, 1, 4);
        let c = model.encode(&obs, &mut Dropout::Off).unwrap();
        let thetas = model.sample_theta(c.row(0), 200, &mut rng::from_seed(6)).unwrap();
        assert!(thetas.iter().all(|t| t.to_vec().iter().all(|x| *x > model.eps())));
        let mut ctx = Tensor::zeros(200, c.cols);
        for r in 0..200 {
            ctx.row_mut(r).copy_from_slice(c.row(0));
        }
        let lt = model.log_prob_theta(&thetas, &ctx).unwrap();
        let u = model.to_u(&thetas).unwrap();
        let lu = model.log_prob_u(&u, &ctx, &mut Dropout::Off).unwrap();
        for i in 0..200 {
            assert!(lt[i].is_finite());
            assert!((lt[i] + log_det_jacobian(u.row(i)) - lu[i]).abs() <= 1e-12 * lu[i].abs().max(1.0));
        }
    }

    #[test]
    fn alpha_without_dropout_is_mean_plus_log_eps() {
        let model = tiny(ResidualKind::IidGaussian);
        let (u, obs) = data(&model, 4, 5);
        let raw = model
            .raw_alpha(&u, &obs, 3, 1e-6, 0.0, 0.0, &mut rng::from_seed(1))
            .unwrap();
        let c = model.encode(&obs, &mut Dropout::Off).unwrap();
        for i in 0..4 {
            let thetas = model.to_theta(&u.select_rows(&[i])).unwrap();
            let mean: f64 = (0..4)
                .map(|j| model.log_prob_theta(&thetas, &c.select_rows(&[j])).unwrap()[0])
                .sum::<f64>()
                / 4.0;
            assert!((raw[i] - (mean + 1e-6f64.ln())).abs() < 1e-9);
        }
        let z = model
            .mc_dropout_alpha(&u, &obs, 20, 1e-6, &mut rng::from_seed(2))
            .unwrap();
        let m = z.iter().sum::<f64>() / 4.0;
        let sd = (z.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0).sqrt();
        assert!(m.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
        assert!(model
            .mc_dropout_alpha(&u, &obs, 1, 1e-6, &mut rng::from_seed(2))
            .is_err());
    }

    #[test]
    fn bundle_round_trip_and_mismatch() {
        let mut model = tiny(ResidualKind::Matern52);
        let (u, obs) = data(&model, 3, 7);
        model.fit_normalization(&[&obs.x], &u);
        model.provenance.round = 2;
        let back = PosteriorModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.provenance, model.provenance);
        assert_eq!(back.nll(&u, &obs).unwrap(), model.nll(&u, &obs).unwrap());
        let flow = FlowConfig::for_dim(6);
        assert!(matches!(
            PosteriorModel::new(ResidualKind::Matern52, &EncoderConfig::default(), &flow, 0),
            Err(Error::ModelMismatch(_))
        ));
    }
}
