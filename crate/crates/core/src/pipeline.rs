//! File-level pipeline stages. Each stage reads its inputs from disk, writes
//! its artifacts into an output directory together with a JSON manifest of
//! content hashes, and returns a short summary.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::active::{make_synthetic_holdout, ActiveLoop, RoundReport, Variant};
use crate::bank::LeaderBank;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_pair, evaluate_pair_prior, posterior_samples, relative_change, summarize, write_window_csv, MetricSummary,
    WindowResult, VARIABLES,
};
use crate::ingest::{align_phase, downsample, extract_segments, read_tracks, split_by_follower, Split};
use crate::model::PosteriorModel;
use crate::nn::Tensor;
use crate::rng;
use crate::sim::{rollout, states_to_tensor, ParamVector, Prior, ResidualKind};
use crate::synth::{synth_pairs, write_tracks_csv, write_truth_csv};
use crate::trajectory::Segment;
use crate::trajio::{load_segments, save_segments, Metadata};

pub const MANIFEST_SUFFIX: &str = "_manifest.json";
pub const RUN_LOG: &str = "run_log.jsonl";
pub const MODEL_FILE: &str = "model.json";
pub const BANK_FILE: &str = "bank.json";
pub const SAMPLES_FILE: &str = "posterior_samples.csv";
pub const TIMING_FILE: &str = "infer_timing.csv";
pub const SIMULATIONS_FILE: &str = "simulations.csv";
pub const WINDOWS_FILE: &str = "eval_windows.csv";
pub const PRIOR_WINDOWS_FILE: &str = "eval_windows_prior.csv";
pub const ERRORS_FILE: &str = "error_distribution.csv";
pub const EVAL_SUMMARY_FILE: &str = "eval_summary.json";
pub const CONVERGENCE_FILE: &str = "convergence.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const TRACKS_FILE: &str = "tracks.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const SPLIT_FILE: &str = "split.json";

pub fn segments_file(split: Split) -> String {
    format!("segments_{}.csv", split.as_str())
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

/// Inputs, outputs and counts of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub info: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    fn new(command: &str, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            seed: cfg.seed,
            config_hash: cfg.hash()?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            info: BTreeMap::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    fn output(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.outputs.insert(name.into(), file_sha256(&dir.join(name))?);
        Ok(())
    }

    fn info(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.info.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    /// Writes `<command>_manifest.json` into `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}{MANIFEST_SUFFIX}", self.command));
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        require(path)?;
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn check_kind(model: &PosteriorModel, cfg: &RunConfig) -> Result<()> {
    if model.kind != cfg.residual {
        return Err(Error::ModelMismatch(format!(
            "model was trained for the {} residual but the configuration asks for {}",
            model.kind, cfg.residual
        )));
    }
    Ok(())
}

fn load_nonempty_segments(path: &Path) -> Result<Vec<Segment>> {
    let (_, segs) = load_segments(path)?;
    if segs.is_empty() {
        return Err(Error::EmptyInput(format!("no segments in {}", path.display())));
    }
    Ok(segs)
}

/// Reads track files, downsamples them to the simulation step, extracts
/// segments and writes one segment file per split.
pub fn ingest(cfg: &RunConfig, tracks: &[PathBuf], out: &Path) -> Result<Manifest> {
    if tracks.is_empty() {
        return Err(Error::EmptyInput("no track files given".into()));
    }
    let factor = cfg.downsample_factor();
    if factor == 0 || (cfg.dt * cfg.frame_rate - factor as f64).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "dt = {} s is not a whole number of frames at {} Hz",
            cfg.dt, cfg.frame_rate
        )));
    }
    fs::create_dir_all(out)?;
    let mut manifest = Manifest::new("ingest", cfg)?;
    let mut all = Vec::new();
    for path in tracks {
        require(path)?;
        let raw = read_tracks(path, cfg.frame_rate).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            e => e,
        })?;
        let down = raw
            .iter()
            .map(|t| downsample(&align_phase(t, factor), factor))
            .collect::<Result<Vec<_>>>()?;
        all.extend(down);
        manifest.input(path)?;
    }
    let segments = extract_segments(&all, cfg.t_min)?;
    if segments.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no leader-follower segment lasts {} s",
            cfg.t_min
        )));
    }
    let split = split_by_follower(&segments, cfg.split_ratios, rng::derive_seed(cfg.seed, "split", 0))?;
    for s in Split::ALL {
        let part: Vec<Segment> = split.select(&segments, s).into_iter().cloned().collect();
        let mut meta = Metadata::new();
        meta.insert("dt".into(), cfg.dt.to_string());
        meta.insert("t_min".into(), cfg.t_min.to_string());
        meta.insert("split".into(), s.as_str().into());
        meta.insert("seed".into(), cfg.seed.to_string());
        let name = segments_file(s);
        save_segments(&out.join(&name), &meta, &part)?;
        manifest.output(out, &name)?;
        manifest.info(&format!("{}_segments", s.as_str()), part.len())?;
        manifest.info(&format!("{}_followers", s.as_str()), split.count(s))?;
    }
    fs::write(out.join(SPLIT_FILE), serde_json::to_string_pretty(&split)? + "\n")?;
    manifest.output(out, SPLIT_FILE)?;
    manifest.info("tracks", all.len())?;
    manifest.info("segments", segments.len())?;
    manifest.write(out)?;
    Ok(manifest)
}

/// Builds the leader bank from a segment file.
pub fn build_bank(cfg: &RunConfig, segments: &Path, out: &Path) -> Result<Manifest> {
    let segs = load_nonempty_segments(segments)?;
    fs::create_dir_all(out)?;
    let bank = LeaderBank::build(&segs, &cfg.bank(), &mut rng::stream(cfg.seed, "bank", 0))?;
    bank.save(&out.join(BANK_FILE))?;
    let mut manifest = Manifest::new("build-bank", cfg)?;
    manifest.input(segments)?;
    manifest.output(out, BANK_FILE)?;
    manifest.info("real_windows", bank.real.len())?;
    manifest.info("synthetic_windows", bank.synthetic.len())?;
    manifest.write(out)?;
    Ok(manifest)
}

/// The first `t_e` steps of a segment, or all of it when shorter.
pub fn conditioning_window(seg: &Segment, t_e: usize) -> Tensor {
    states_to_tensor(&seg.states[..t_e.min(seg.len())])
}

/// One conditioning window per follower, from its first segment.
pub fn observed_windows(segs: &[Segment], t_e: usize) -> Vec<Tensor> {
    let mut seen = std::collections::BTreeSet::new();
    segs.iter()
        .filter(|s| seen.insert(s.follower_id))
        .map(|s| conditioning_window(s, t_e))
        .collect()
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PosteriorModel,
    pub reports: Vec<RoundReport>,
    pub manifest: Manifest,
}

/// Warm-up and active rounds. Writes the run log, one checkpoint per round
/// under `checkpoints/`, and the final model (the checkpoint with the lowest
/// hold-out NLL).
pub fn train(cfg: &RunConfig, segments: &Path, bank_path: &Path, out: &Path) -> Result<TrainOutcome> {
    let segs = load_nonempty_segments(segments)?;
    let bank = LeaderBank::load(bank_path)?;
    let loop_cfg = cfg.loop_config();
    let prior = Prior::new(cfg.residual);
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;

    let holdout = make_synthetic_holdout(
        &prior,
        &bank,
        loop_cfg.holdout_size,
        rng::derive_seed(cfg.seed, "holdout", 0),
        loop_cfg.prior_max_retries,
    )?;
    let model = PosteriorModel::new(
        cfg.residual,
        &cfg.encoder(),
        &cfg.flow(),
        rng::derive_seed(cfg.seed, "model", 0),
    )?;
    let observed = observed_windows(&segs, cfg.encoder_target_len);
    let runner = ActiveLoop::new(&loop_cfg, prior, &bank, &observed, &holdout, cfg.seed)?.with_threads(cfg.threads);

    let mut log = fs::File::create(out.join(RUN_LOG))?;
    let state = runner.run(model, |state, report| {
        writeln!(log, "{}", serde_json::to_string(report)?)?;
        state
            .model
            .save(&ckpt_dir.join(format!("round_{:02}.json", report.round)))
    })?;
    drop(log);
    state.model.save(&out.join(MODEL_FILE))?;

    let mut manifest = Manifest::new("train", cfg)?;
    manifest.input(segments)?;
    manifest.input(bank_path)?;
    manifest.output(out, MODEL_FILE)?;
    manifest.info("rounds", state.round)?;
    manifest.info("simulations", state.simulations)?;
    manifest.info("best_round", state.model.provenance.round)?;
    manifest.info("variant", loop_cfg.variant)?;
    manifest.info("residual", cfg.residual)?;
    manifest.write(out)?;
    Ok(TrainOutcome {
        model: state.model,
        reports: state.reports,
        manifest,
    })
}

/// Posterior draws for every segment of a file. Segment `k` is conditioned
/// on its first `T_E` steps and sampled from stream `("infer", k)`. Per-pair
/// wall times go to a separate timing file that the manifest does not hash.
pub fn infer(cfg: &RunConfig, model_path: &Path, segments: &Path, out: &Path) -> Result<Manifest> {
    let model = PosteriorModel::load(model_path)?;
    check_kind(&model, cfg)?;
    let segs = load_nonempty_segments(segments)?;
    fs::create_dir_all(out)?;
    let names = model.kind.param_names();
    let mut samples = csv::Writer::from_path(out.join(SAMPLES_FILE))?;
    let mut header = vec!["pair_id".to_string(), "segment".into(), "sample".into()];
    header.extend(names.iter().map(|s| s.to_string()));
    samples.write_record(&header)?;
    let mut timing = csv::Writer::from_path(out.join(TIMING_FILE))?;
    timing.write_record(["pair_id", "segment", "seconds"])?;
    let t_e = model.encoder.cfg.target_len;
    for (k, seg) in segs.iter().enumerate() {
        let start = Instant::now();
        let thetas = posterior_samples(
            &model,
            &conditioning_window(seg, t_e),
            cfg.infer_n_samples,
            rng::derive_seed(cfg.seed, "infer", k as u64),
        )?;
        let secs = start.elapsed().as_secs_f64();
        for (i, th) in thetas.iter().enumerate() {
            let mut row = vec![seg.follower_id.to_string(), k.to_string(), i.to_string()];
            row.extend(th.to_vec().iter().map(|x| x.to_string()));
            samples.write_record(&row)?;
        }
        timing.write_record([seg.follower_id.to_string(), k.to_string(), format!("{secs:.6}")])?;
        log::debug!("pair {}: {} samples in {secs:.3} s", seg.follower_id, thetas.len());
    }
    samples.flush()?;
    timing.flush()?;
    let mut manifest = Manifest::new("infer", cfg)?;
    manifest.input(model_path)?;
    manifest.input(segments)?;
    manifest.output(out, SAMPLES_FILE)?;
    manifest.info("pairs", segs.len())?;
    manifest.info("samples_per_pair", cfg.infer_n_samples)?;
    manifest.write(out)?;
    Ok(manifest)
}

/// Parameter rows of a CSV whose columns include `pair_id` or `follower_id`
/// and the parameter names of one residual kind; `segment` and `sample`
/// columns are optional.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRow {
    pub pair_id: u64,
    pub segment: Option<usize>,
    pub sample: usize,
    pub theta: ParamVector,
}

pub fn read_param_rows(path: &Path) -> Result<Vec<ParamRow>> {
    require(path)?;
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("pair_id")
        .or_else(|| col("follower_id"))
        .ok_or_else(|| Error::Format(format!("{}: needs a pair_id or follower_id column", path.display())))?;
    let kind = if col("ell").is_some() {
        ResidualKind::Matern52
    } else {
        ResidualKind::IidGaussian
    };
    let param_cols = kind
        .param_names()
        .iter()
        .map(|n| col(n).ok_or_else(|| Error::Format(format!("{}: missing column {n}", path.display()))))
        .collect::<Result<Vec<_>>>()?;
    let (seg_col, sample_col) = (col("segment"), col("sample"));
    rdr.records()
        .enumerate()
        .map(|(k, rec)| {
            let rec = rec?;
            let bad = |what: &str| Error::Format(format!("{} row {}: bad {what}", path.display(), k + 2));
            let x: Vec<f64> = param_cols
                .iter()
                .map(|&c| rec[c].parse::<f64>().map_err(|_| bad(&headers[c])))
                .collect::<Result<_>>()?;
            Ok(ParamRow {
                pair_id: rec[id_col].parse().map_err(|_| bad("pair id"))?,
                segment: seg_col
                    .map(|c| rec[c].parse().map_err(|_| bad("segment")))
                    .transpose()?,
                sample: match sample_col {
                    Some(c) => rec[c].parse().map_err(|_| bad("sample"))?,
                    None => 0,
                },
                theta: ParamVector::from_slice(kind, &x)?,
            })
        })
        .collect()
}

/// Rolls each parameter row out over its pair's segment from the observed
/// initial state under the recorded leader, row `k` on stream
/// `("simulate", k)`. Rows name their segment by index or, failing that, by
/// the follower's first segment; rows without a segment are skipped.
pub fn simulate(cfg: &RunConfig, params: &Path, segments: &Path, out: &Path) -> Result<Manifest> {
    let rows = read_param_rows(params)?;
    let segs = load_nonempty_segments(segments)?;
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join(SIMULATIONS_FILE))?;
    w.write_record([
        "pair_id",
        "segment",
        "sample",
        "step",
        "s",
        "v",
        "dv",
        "a",
        "degenerate",
    ])?;
    let (mut degenerate, mut skipped) = (0usize, 0usize);
    for (k, row) in rows.iter().enumerate() {
        let found = match row.segment {
            Some(i) if segs.get(i).is_some_and(|s| s.follower_id == row.pair_id) => Some(i),
            _ => segs.iter().position(|s| s.follower_id == row.pair_id),
        };
        let Some(idx) = found else {
            skipped += 1;
            continue;
        };
        let seg = &segs[idx];
        let leader: Vec<f64> = seg.leader.iter().map(|l| l.v).collect();
        let roll = rollout(
            &row.theta,
            row.theta.kind(),
            seg.states[0],
            &leader,
            seg.dt,
            &mut rng::stream(cfg.seed, "simulate", k as u64),
        )?;
        degenerate += usize::from(roll.degenerate());
        for (t, (st, a)) in roll.states.iter().zip(&roll.accel).enumerate() {
            w.write_record([
                row.pair_id.to_string(),
                idx.to_string(),
                row.sample.to_string(),
                t.to_string(),
                st.s.to_string(),
                st.v.to_string(),
                st.dv.to_string(),
                a.to_string(),
                u8::from(roll.degenerate()).to_string(),
            ])?;
        }
    }
    w.flush()?;
    if skipped == rows.len() {
        return Err(Error::InsufficientData(format!(
            "no parameter row of {} names a pair in {}",
            params.display(),
            segments.display()
        )));
    }
    if skipped > 0 {
        log::warn!("{skipped} parameter rows name pairs without a segment; skipped");
    }
    let mut manifest = Manifest::new("simulate", cfg)?;
    manifest.input(params)?;
    manifest.input(segments)?;
    manifest.output(out, SIMULATIONS_FILE)?;
    manifest.info("rollouts", rows.len() - skipped)?;
    manifest.info("degenerate_rollouts", degenerate)?;
    manifest.write(out)?;
    Ok(manifest)
}

/// Contents of the evaluation summary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub config_hash: String,
    pub model_root_seed: u64,
    pub model_round: usize,
    pub pairs: usize,
    pub skipped_pairs: usize,
    pub posterior: MetricSummary,
    pub prior: Option<MetricSummary>,
    /// Relative Energy Score change of the posterior against the prior
    /// baseline, in percent.
    pub es_change_vs_prior: Option<f64>,
}

/// Windowed posterior-predictive evaluation of every segment long enough
/// for one window; segment `k` uses seed `("evaluate", k)`. With
/// `prior_baseline` the prior-predictive baseline runs under the same
/// protocol and seeds.
pub fn evaluate(
    cfg: &RunConfig,
    model_path: &Path,
    segments: &Path,
    out: &Path,
    prior_baseline: bool,
) -> Result<(EvalReport, Vec<WindowResult>)> {
    let model = PosteriorModel::load(model_path)?;
    check_kind(&model, cfg)?;
    let segs = load_nonempty_segments(segments)?;
    let ecfg = cfg.eval();
    ecfg.validate()?;
    fs::create_dir_all(out)?;
    let prior = Prior::new(cfg.residual);
    let t_e = model.encoder.cfg.target_len;
    let (mut post, mut base) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    let mut pairs = 0;
    for (k, seg) in segs.iter().enumerate() {
        let seed = rng::derive_seed(cfg.seed, "evaluate", k as u64);
        match evaluate_pair(&model, seg, &ecfg, seed, cfg.threads) {
            Ok(r) => post.extend(r),
            Err(Error::InsufficientLength { needed, available }) => {
                log::warn!("segment {k} has {available} steps, fewer than H = {needed}; skipped");
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        }
        pairs += 1;
        if prior_baseline {
            base.extend(evaluate_pair_prior(&prior, t_e, seg, &ecfg, seed, cfg.threads)?);
        }
    }
    if post.is_empty() {
        return Err(Error::InsufficientData(
            "no segment is long enough for one evaluation window".into(),
        ));
    }
    write_window_csv(fs::File::create(out.join(WINDOWS_FILE))?, &post)?;
    write_error_distribution(
        &out.join(ERRORS_FILE),
        &post,
        if prior_baseline { Some(&base) } else { None },
    )?;
    let posterior = summarize(&post);
    let prior_summary = prior_baseline.then(|| summarize(&base));
    if prior_baseline {
        write_window_csv(fs::File::create(out.join(PRIOR_WINDOWS_FILE))?, &base)?;
    }
    let report = EvalReport {
        seed: cfg.seed,
        config_hash: cfg.hash()?,
        model_root_seed: model.provenance.root_seed,
        model_round: model.provenance.round,
        pairs,
        skipped_pairs: skipped,
        es_change_vs_prior: prior_summary
            .as_ref()
            .map(|p| relative_change(p.es_avg_mean, posterior.es_avg_mean)),
        posterior,
        prior: prior_summary,
    };
    fs::write(
        out.join(EVAL_SUMMARY_FILE),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;

    let mut manifest = Manifest::new("evaluate", cfg)?;
    manifest.input(model_path)?;
    manifest.input(segments)?;
    for name in [WINDOWS_FILE, ERRORS_FILE, EVAL_SUMMARY_FILE] {
        manifest.output(out, name)?;
    }
    if prior_baseline {
        manifest.output(out, PRIOR_WINDOWS_FILE)?;
    }
    manifest.info("windows", post.len())?;
    manifest.write(out)?;
    Ok((report, post))
}

/// Long-format plot data: one row per window, variable and predictor.
fn write_error_distribution(path: &Path, post: &[WindowResult], prior: Option<&[WindowResult]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["predictor", "pair_id", "offset", "variable", "rmse", "es"])?;
    let sets = std::iter::once(("posterior", post)).chain(prior.map(|p| ("prior", p)));
    for (label, results) in sets {
        for r in results {
            for (k, var) in VARIABLES.iter().enumerate() {
                w.write_record([
                    label.to_string(),
                    r.pair_id.to_string(),
                    r.offset.to_string(),
                    var.to_string(),
                    r.rmse[k].to_string(),
                    r.es[k].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a run log written by [`train`].
pub fn read_run_log(path: &Path) -> Result<Vec<RoundReport>> {
    require(path)?;
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Run label: the name of the directory holding the file.
fn run_label(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Collates run logs into convergence plot data (one row per active round,
/// the warm-up NLL as reference) and evaluation summaries into an ablation
/// table whose relative change is taken against the first summary.
pub fn report(cfg: &RunConfig, logs: &[PathBuf], summaries: &[PathBuf], out: &Path) -> Result<Manifest> {
    if logs.is_empty() && summaries.is_empty() {
        return Err(Error::EmptyInput(
            "report needs run logs or evaluation summaries".into(),
        ));
    }
    fs::create_dir_all(out)?;
    let mut manifest = Manifest::new("report", cfg)?;
    if !logs.is_empty() {
        let mut w = csv::Writer::from_path(out.join(CONVERGENCE_FILE))?;
        w.write_record([
            "run",
            "variant",
            "seed",
            "round",
            "simulations",
            "holdout_nll",
            "warmup_nll",
            "stop",
        ])?;
        let mut rows = 0;
        for path in logs {
            let log = read_run_log(path)?;
            let warmup = log.iter().find(|r| r.round == 0).map(|r| r.holdout_nll);
            for r in log.iter().filter(|r| r.round > 0) {
                w.write_record([
                    run_label(path),
                    r.variant.as_str().to_string(),
                    r.seed.to_string(),
                    r.round.to_string(),
                    r.simulations.to_string(),
                    r.holdout_nll.to_string(),
                    warmup.map(|x| x.to_string()).unwrap_or_default(),
                    r.stop.to_string(),
                ])?;
                rows += 1;
            }
            manifest.input(path)?;
        }
        w.flush()?;
        manifest.output(out, CONVERGENCE_FILE)?;
        manifest.info("convergence_rows", rows)?;
    }
    if !summaries.is_empty() {
        let reports = summaries
            .iter()
            .map(|p| {
                require(p)?;
                let r: EvalReport = serde_json::from_str(&fs::read_to_string(p)?)?;
                manifest.input(p)?;
                Ok((run_label(p), r))
            })
            .collect::<Result<Vec<_>>>()?;
        let reference = reports[0].1.posterior.es_avg_mean;
        let mut w = csv::Writer::from_path(out.join(ABLATION_FILE))?;
        w.write_record([
            "run",
            "es_mean",
            "es_std",
            "rmse_s",
            "rmse_v",
            "rmse_a",
            "es_change_vs_first_pct",
        ])?;
        for (label, r) in &reports {
            let p = &r.posterior;
            w.write_record([
                label.clone(),
                p.es_avg_mean.to_string(),
                p.es_avg_std.to_string(),
                p.rmse_mean[0].to_string(),
                p.rmse_mean[1].to_string(),
                p.rmse_mean[2].to_string(),
                relative_change(p.es_avg_mean, reference).to_string(),
            ])?;
        }
        w.flush()?;
        manifest.output(out, ABLATION_FILE)?;
    }
    manifest.write(out)?;
    Ok(manifest)
}

/// Synthetic pairs written as a track file at the configured frame rate plus
/// the generating parameters.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let factor = cfg.downsample_factor();
    if factor == 0 || (cfg.dt * cfg.frame_rate - factor as f64).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "dt = {} s is not a whole number of frames at {} Hz",
            cfg.dt, cfg.frame_rate
        )));
    }
    fs::create_dir_all(out)?;
    let pairs = synth_pairs(&cfg.synth(), cfg.seed)?;
    write_tracks_csv(
        std::io::BufWriter::new(fs::File::create(out.join(TRACKS_FILE))?),
        &pairs,
        factor,
    )?;
    write_truth_csv(fs::File::create(out.join(TRUTH_FILE))?, &pairs)?;
    let mut manifest = Manifest::new("synth", cfg)?;
    manifest.output(out, TRACKS_FILE)?;
    manifest.output(out, TRUTH_FILE)?;
    manifest.info("pairs", pairs.len())?;
    manifest.info("degenerate_pairs", pairs.iter().filter(|p| p.degenerate).count())?;
    manifest.write(out)?;
    Ok(manifest)
}

/// Per-variant outcome of [`run_ablation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub best_holdout_nll: f64,
    pub es_mean: f64,
    /// `(ES_variant − ES_full) / ES_variant · 100`.
    pub es_change_pct: f64,
}

/// Trains and evaluates every variant under the same configuration, seed
/// and budget, each in its own subdirectory of `out`.
pub fn run_ablation(
    cfg: &RunConfig,
    train_segments: &Path,
    bank: &Path,
    test_segments: &Path,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let vcfg = RunConfig { variant, ..cfg.clone() };
        let dir = out.join(variant.as_str());
        let trained = train(&vcfg, train_segments, bank, &dir)?;
        let (report, _) = evaluate(&vcfg, &dir.join(MODEL_FILE), test_segments, &dir, false)?;
        let best = trained
            .reports
            .iter()
            .map(|r| r.holdout_nll)
            .fold(f64::INFINITY, f64::min);
        rows.push(AblationRow {
            variant,
            seed: cfg.seed,
            best_holdout_nll: best,
            es_mean: report.posterior.es_avg_mean,
            es_change_pct: 0.0,
        });
    }
    let full = rows[0].es_mean;
    for r in &mut rows {
        r.es_change_pct = relative_change(r.es_mean, full);
    }
    let mut w = csv::Writer::from_path(out.join(ABLATION_FILE))?;
    w.write_record(["variant", "seed", "best_holdout_nll", "es_mean", "es_change_pct"])?;
    for r in &rows {
        w.write_record([
            r.variant.as_str().to_string(),
            r.seed.to_string(),
            r.best_holdout_nll.to_string(),
            r.es_mean.to_string(),
            r.es_change_pct.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}
