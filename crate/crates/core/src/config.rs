//! Run configuration: one flat TOML document whose keys are the
//! hyperparameter names used throughout the pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::active::{LoopConfig, Variant};
use crate::bank::BankConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::flow::FlowConfig;
use crate::ingest::{DEFAULT_FRAME_RATE, DEFAULT_T_MIN};
use crate::sim::ResidualKind;
use crate::synth::LeaderProfileConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // run
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: usize,
    pub residual: ResidualKind,

    // data
    pub tracks: Vec<PathBuf>,
    pub frame_rate: f64,
    pub dt: f64,
    pub t_min: f64,
    pub split_ratios: [f64; 3],

    // synthetic data
    pub synth_pairs: usize,
    pub synth_steps: usize,

    // encoder
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub local_window: usize,
    pub dropout: f64,
    pub ffn_mult: usize,
    pub encoder_target_len: usize,

    // flow
    pub num_transforms: usize,
    pub hidden_features: Vec<usize>,
    pub flow_dropout: f64,
    pub eps_softplus: f64,

    // leader bank
    #[serde(rename = "W")]
    pub window: usize,
    pub window_stride: usize,
    #[serde(rename = "L_syn_cap")]
    pub l_syn_cap: usize,
    pub time_scale_range: [f64; 2],
    pub scale_range: [f64; 2],
    pub vel_jitter: f64,
    pub a_phys_max: f64,
    pub j_max: f64,
    pub eps_kin: f64,
    pub envelope_percentiles: [f64; 2],
    #[serde(rename = "K_rho")]
    pub k_rho: usize,
    pub eps_rho: f64,
    pub max_attempts_per_window: usize,

    // active loop
    pub rounds: usize,
    pub samples_initial: usize,
    pub samples_per_round: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub train_buffer_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub min_rounds: usize,
    pub patience_round: usize,
    pub min_delta_round: f64,
    pub lambda_schedule: Vec<f64>,
    pub alpha_schedule: Vec<f64>,
    #[serde(rename = "K_candidates")]
    pub k_candidates: usize,
    pub pairs_per_theta: usize,
    pub gamma: f64,
    #[serde(rename = "tau_L")]
    pub tau_l: f64,
    pub tau_theta: f64,
    #[serde(rename = "M")]
    pub mc_passes: usize,
    pub eps_alpha: f64,
    pub eval_val_size: usize,
    pub proposal_samples_per_obs: usize,
    pub val_fraction: f64,
    pub patience_epochs: usize,
    pub holdout_size: usize,
    pub max_sim_failure_rate: f64,
    pub variant: Variant,

    // evaluation
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "S")]
    pub stride: usize,
    #[serde(rename = "m")]
    pub max_windows: usize,
    pub eval_n_samples: usize,
    pub pi_level: f64,
    /// Posterior samples per pair written by `infer`.
    pub infer_n_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let flow = FlowConfig::for_dim(ResidualKind::IidGaussian.dim());
        let bank = BankConfig::default();
        let lp = LoopConfig::default();
        let ev = EvalConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            threads: 1,
            residual: ResidualKind::IidGaussian,
            tracks: Vec::new(),
            frame_rate: DEFAULT_FRAME_RATE,
            dt: 0.2,
            t_min: DEFAULT_T_MIN,
            split_ratios: [0.6, 0.1, 0.3],
            synth_pairs: 300,
            synth_steps: 300,
            d_model: enc.d_model,
            layers: enc.layers,
            heads: enc.heads,
            local_window: enc.local_window,
            dropout: enc.dropout,
            ffn_mult: enc.ffn_mult,
            encoder_target_len: enc.target_len,
            num_transforms: flow.num_transforms,
            hidden_features: flow.hidden,
            flow_dropout: flow.dropout,
            eps_softplus: flow.eps_softplus,
            window: bank.window,
            window_stride: bank.stride,
            l_syn_cap: bank.syn_cap,
            time_scale_range: bank.time_scale_range,
            scale_range: bank.scale_range,
            vel_jitter: bank.vel_jitter,
            a_phys_max: bank.a_phys_max,
            j_max: bank.j_max,
            eps_kin: bank.eps_kin,
            envelope_percentiles: bank.envelope_pct,
            k_rho: bank.k_rho,
            eps_rho: bank.eps_rho,
            max_attempts_per_window: bank.max_attempts_per_window,
            rounds: lp.rounds,
            samples_initial: lp.samples_initial,
            samples_per_round: lp.samples_per_round,
            b: lp.b,
            train_buffer_size: lp.train_buffer_size,
            epochs: lp.epochs,
            batch_size: lp.batch_size,
            lr: lp.lr,
            clip_norm: lp.clip_norm,
            min_rounds: lp.min_rounds,
            patience_round: lp.patience_round,
            min_delta_round: lp.min_delta_round,
            lambda_schedule: lp.lambda_schedule,
            alpha_schedule: lp.alpha_schedule,
            k_candidates: lp.k_candidates,
            pairs_per_theta: lp.pairs_per_theta,
            gamma: lp.gamma,
            tau_l: lp.tau_l,
            tau_theta: lp.tau_theta,
            mc_passes: lp.mc_passes,
            eps_alpha: lp.eps_alpha,
            eval_val_size: lp.eval_val_size,
            proposal_samples_per_obs: lp.proposal_samples_per_obs,
            val_fraction: lp.val_fraction,
            patience_epochs: lp.patience_epochs,
            holdout_size: lp.holdout_size,
            max_sim_failure_rate: lp.max_sim_failure_rate,
            variant: lp.variant,
            horizon: ev.horizon,
            stride: ev.stride,
            max_windows: ev.max_windows,
            eval_n_samples: ev.n_samples,
            pi_level: ev.pi_level,
            infer_n_samples: 1000,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical TOML rendering, leaving out the output
    /// directory and thread count, which do not change any result.
    pub fn hash(&self) -> Result<String> {
        let canonical = Self {
            out_dir: PathBuf::new(),
            threads: 1,
            ..self.clone()
        };
        Ok(hex::encode(Sha256::digest(canonical.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frame_rate > 0.0 && self.dt > 0.0 && self.t_min >= 0.0) {
            return Err(Error::Config(
                "frame_rate and dt must be positive, t_min non-negative".into(),
            ));
        }
        let factor = self.dt * self.frame_rate;
        if (factor - factor.round()).abs() > 1e-6 || factor.round() < 1.0 {
            return Err(Error::Config(format!(
                "dt {} is not a whole number of frames at {} Hz",
                self.dt, self.frame_rate
            )));
        }
        if self.window != self.encoder_target_len {
            log::warn!(
                "leader window W = {} differs from encoder_target_len = {}",
                self.window,
                self.encoder_target_len
            );
        }
        if self.infer_n_samples == 0 || self.synth_steps < 2 {
            return Err(Error::Config("infer_n_samples and synth_steps must be positive".into()));
        }
        self.encoder().validate()?;
        self.flow().validate()?;
        self.loop_config().validate()?;
        self.eval().validate()?;
        let bank = self.bank();
        if bank.window < 2 || bank.stride == 0 || bank.k_rho == 0 {
            return Err(Error::Config(
                "W ≥ 2, window_stride ≥ 1 and K_rho ≥ 1 are required".into(),
            ));
        }
        if bank.envelope_pct[0] >= bank.envelope_pct[1] || bank.envelope_pct[0] < 0.0 || bank.envelope_pct[1] > 100.0 {
            return Err(Error::Config(
                "envelope_percentiles must be increasing within [0, 100]".into(),
            ));
        }
        Ok(())
    }

    /// Frames per simulation step.
    pub fn downsample_factor(&self) -> usize {
        (self.dt * self.frame_rate).round() as usize
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: 3,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            local_window: self.local_window,
            dropout: self.dropout,
            ffn_mult: self.ffn_mult,
            target_len: self.encoder_target_len,
        }
    }

    pub fn flow(&self) -> FlowConfig {
        FlowConfig {
            dim: self.residual.dim(),
            num_transforms: self.num_transforms,
            hidden: self.hidden_features.clone(),
            dropout: self.flow_dropout,
            eps_softplus: self.eps_softplus,
        }
    }

    pub fn bank(&self) -> BankConfig {
        BankConfig {
            window: self.window,
            stride: self.window_stride,
            syn_cap: self.l_syn_cap,
            time_scale_range: self.time_scale_range,
            scale_range: self.scale_range,
            vel_jitter: self.vel_jitter,
            a_phys_max: self.a_phys_max,
            j_max: self.j_max,
            eps_kin: self.eps_kin,
            envelope_pct: self.envelope_percentiles,
            k_rho: self.k_rho,
            eps_rho: self.eps_rho,
            max_attempts_per_window: self.max_attempts_per_window,
        }
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            rounds: self.rounds,
            samples_initial: self.samples_initial,
            samples_per_round: self.samples_per_round,
            b: self.b,
            train_buffer_size: self.train_buffer_size,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            clip_norm: self.clip_norm,
            min_rounds: self.min_rounds,
            patience_round: self.patience_round,
            min_delta_round: self.min_delta_round,
            lambda_schedule: self.lambda_schedule.clone(),
            alpha_schedule: self.alpha_schedule.clone(),
            k_candidates: self.k_candidates,
            pairs_per_theta: self.pairs_per_theta,
            gamma: self.gamma,
            tau_l: self.tau_l,
            tau_theta: self.tau_theta,
            mc_passes: self.mc_passes,
            eps_alpha: self.eps_alpha,
            eval_val_size: self.eval_val_size,
            proposal_samples_per_obs: self.proposal_samples_per_obs,
            val_fraction: self.val_fraction,
            patience_epochs: self.patience_epochs,
            holdout_size: self.holdout_size,
            max_sim_failure_rate: self.max_sim_failure_rate,
            prior_max_retries: 10_000,
            variant: self.variant,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            horizon: self.horizon,
            stride: self.stride,
            max_windows: self.max_windows,
            n_samples: self.eval_n_samples,
            pi_level: self.pi_level,
        }
    }

    pub fn synth(&self) -> crate::synth::SynthConfig {
        crate::synth::SynthConfig {
            n_pairs: self.synth_pairs,
            steps: self.synth_steps,
            dt: self.dt,
            residual: self.residual,
            leader: LeaderProfileConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("samples_per_round = 5000"));
        assert!(text.contains("train_buffer_size = 4000"));
        assert!(text.contains("K_candidates = 5000"));
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
        assert_eq!(cfg.downsample_factor(), 5);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml("samples_per_rounds = 3").is_err());
        assert!(RunConfig::from_toml("B = 0").is_err());
        assert!(RunConfig::from_toml("lambda_schedule = [1.5]").is_err());
        assert!(RunConfig::from_toml("dt = 0.03").is_err());
        let cfg = RunConfig::from_toml("residual = \"matern52\"\nrounds = 0").unwrap();
        assert_eq!(cfg.flow().dim, 7);
        assert_eq!(cfg.loop_config().rounds, 0);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.out_dir = PathBuf::from("elsewhere");
        b.threads = 4;
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.gamma = 0.2;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
