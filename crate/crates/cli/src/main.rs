//! `asbc`: command-line front end for the calibration pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use asbc::active::Variant;
use asbc::config::RunConfig;
use asbc::ingest::Split;
use asbc::pipeline::{self, segments_file};
use asbc::sim::ResidualKind;

#[derive(Debug, Parser)]
#[command(
    name = "asbc",
    version,
    about = "Active amortized calibration of stochastic car-following models"
)]
struct Cli {
    /// TOML run configuration; defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker thread cap, overriding the configuration.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract leader-follower segments from track CSV files and split them by follower.
    Ingest {
        /// Track files; defaults to `tracks` from the configuration.
        tracks: Vec<PathBuf>,
        /// Minimum segment duration in seconds.
        #[arg(long)]
        t_min: Option<f64>,
    },
    /// Build the real and synthetic leader-window bank.
    BuildBank {
        /// Segment file [default: <out>/segments_train.csv].
        #[arg(long)]
        segments: Option<PathBuf>,
    },
    /// Warm-up and active rounds; writes the model, checkpoints and run log.
    Train {
        /// Segment file [default: <out>/segments_train.csv].
        #[arg(long)]
        segments: Option<PathBuf>,
        /// Leader bank [default: <out>/bank.json].
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Maximum number of active rounds; 0 trains the warm-up only.
        #[arg(long)]
        rounds: Option<usize>,
        /// Residual model: iid_gaussian or matern52.
        #[arg(long)]
        residual: Option<ResidualKind>,
        /// full, prior_only or theta_only.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Draw posterior samples for every segment of a file.
    Infer {
        /// Model bundle [default: <out>/model.json].
        #[arg(long)]
        model: Option<PathBuf>,
        /// Segment file [default: <out>/segments_test.csv].
        #[arg(long)]
        segments: Option<PathBuf>,
        /// Samples per pair.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Roll out parameter rows over their segments.
    Simulate {
        /// CSV with a pair_id (or follower_id) column and parameter columns.
        #[arg(long)]
        params: PathBuf,
        /// Segment file [default: <out>/segments_test.csv].
        #[arg(long)]
        segments: Option<PathBuf>,
    },
    /// Windowed posterior-predictive evaluation.
    Evaluate {
        /// Model bundle [default: <out>/model.json].
        #[arg(long)]
        model: Option<PathBuf>,
        /// Segment file [default: <out>/segments_test.csv].
        #[arg(long)]
        segments: Option<PathBuf>,
        /// Also evaluate the prior-predictive baseline.
        #[arg(long)]
        prior_baseline: bool,
    },
    /// Collate run logs and evaluation summaries into plot data.
    Report {
        /// Run logs [default: <out>/run_log.jsonl when present].
        #[arg(long = "log")]
        logs: Vec<PathBuf>,
        /// Evaluation summaries.
        #[arg(long = "summary")]
        summaries: Vec<PathBuf>,
    },
    /// Generate synthetic leader-follower tracks with known parameters.
    Synth {
        /// Number of pairs.
        #[arg(long)]
        pairs: Option<usize>,
        /// Steps per pair.
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    Ok(cfg)
}

fn or_default(path: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| out.join(name))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Ingest { tracks, t_min } => {
            if let Some(t) = t_min {
                cfg.t_min = *t;
            }
            cfg.validate()?;
            let tracks = if tracks.is_empty() {
                cfg.tracks.clone()
            } else {
                tracks.clone()
            };
            let m = pipeline::ingest(&cfg, &tracks, &cfg.out_dir).context("ingest")?;
            log::info!("ingest: {} segments", m.info["segments"]);
        }
        Command::BuildBank { segments } => {
            let segments = or_default(segments, &cfg.out_dir, &segments_file(Split::Train));
            let m = pipeline::build_bank(&cfg, &segments, &cfg.out_dir).context("build-bank")?;
            log::info!(
                "bank: {} real and {} synthetic windows",
                m.info["real_windows"],
                m.info["synthetic_windows"]
            );
        }
        Command::Train {
            segments,
            bank,
            rounds,
            residual,
            variant,
        } => {
            if let Some(r) = rounds {
                cfg.rounds = *r;
            }
            if let Some(k) = residual {
                cfg.residual = *k;
            }
            if let Some(v) = variant {
                cfg.variant = *v;
            }
            cfg.validate()?;
            let segments = or_default(segments, &cfg.out_dir, &segments_file(Split::Train));
            let bank = or_default(bank, &cfg.out_dir, pipeline::BANK_FILE);
            let t = pipeline::train(&cfg, &segments, &bank, &cfg.out_dir).context("train")?;
            log::info!(
                "trained {} rounds with {} simulations; kept round {}",
                t.manifest.info["rounds"],
                t.manifest.info["simulations"],
                t.model.provenance.round
            );
        }
        Command::Infer { model, segments, n } => {
            if let Some(n) = n {
                cfg.infer_n_samples = *n;
            }
            let model = or_default(model, &cfg.out_dir, pipeline::MODEL_FILE);
            let segments = or_default(segments, &cfg.out_dir, &segments_file(Split::Test));
            pipeline::infer(&cfg, &model, &segments, &cfg.out_dir).context("infer")?;
        }
        Command::Simulate { params, segments } => {
            let segments = or_default(segments, &cfg.out_dir, &segments_file(Split::Test));
            pipeline::simulate(&cfg, params, &segments, &cfg.out_dir).context("simulate")?;
        }
        Command::Evaluate {
            model,
            segments,
            prior_baseline,
        } => {
            let model = or_default(model, &cfg.out_dir, pipeline::MODEL_FILE);
            let segments = or_default(segments, &cfg.out_dir, &segments_file(Split::Test));
            let (report, _) =
                pipeline::evaluate(&cfg, &model, &segments, &cfg.out_dir, *prior_baseline).context("evaluate")?;
            log::info!(
                "evaluated {} windows over {} pairs; mean ES {:.4}",
                report.posterior.windows,
                report.pairs,
                report.posterior.es_avg_mean
            );
        }
        Command::Report { logs, summaries } => {
            let mut logs = logs.clone();
            let default_log = cfg.out_dir.join(pipeline::RUN_LOG);
            if logs.is_empty() && summaries.is_empty() && default_log.exists() {
                logs.push(default_log);
            }
            pipeline::report(&cfg, &logs, summaries, &cfg.out_dir).context("report")?;
        }
        Command::Synth { pairs, steps } => {
            if let Some(n) = pairs {
                cfg.synth_pairs = *n;
            }
            if let Some(n) = steps {
                cfg.synth_steps = *n;
            }
            cfg.validate()?;
            pipeline::synth(&cfg, &cfg.out_dir).context("synth")?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<asbc::Error>())
                .map_or(1, asbc::Error::exit_code);
            ExitCode::from(code)
        }
    }
}
