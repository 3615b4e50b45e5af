use asbc::active::{make_synthetic_holdout, ActiveLoop, LoopConfig, Variant};
use asbc::bank::{BankConfig, LeaderBank};
use asbc::encoder::EncoderConfig;
use asbc::flow::FlowConfig;
use asbc::model::PosteriorModel;
use asbc::nn::Tensor;
use asbc::rng;
use asbc::sim::{states_to_tensor, Prior, ResidualKind};
use asbc::synth::{synth_pairs, SynthConfig};

struct Fixture {
    bank: LeaderBank,
    observed: Vec<Tensor>,
}

fn fixture() -> Fixture {
    let pairs = synth_pairs(
        &SynthConfig {
            n_pairs: 12,
            steps: 200,
            ..SynthConfig::default()
        },
        21,
    )
    .unwrap();
    let segs: Vec<_> = pairs.iter().map(|p| p.segment.clone()).collect();
    let bank = LeaderBank::build(
        &segs,
        &BankConfig {
            syn_cap: 20,
            ..BankConfig::default()
        },
        &mut rng::stream(21, "bank", 0),
    )
    .unwrap();
    let observed = segs.iter().map(|s| states_to_tensor(&s.states[..75])).collect();
    Fixture { bank, observed }
}

fn tiny_config(variant: Variant) -> LoopConfig {
    LoopConfig {
        rounds: 2,
        samples_initial: 60,
        samples_per_round: 60,
        b: 20,
        train_buffer_size: 90,
        epochs: 2,
        batch_size: 32,
        min_rounds: 10,
        k_candidates: 40,
        pairs_per_theta: 2,
        mc_passes: 3,
        eval_val_size: 4,
        proposal_samples_per_obs: 5,
        holdout_size: 16,
        variant,
        ..LoopConfig::default()
    }
}

fn tiny_model(seed: u64) -> PosteriorModel {
    let kind = ResidualKind::IidGaussian;
    let enc = EncoderConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        ..EncoderConfig::default()
    };
    let flow = FlowConfig {
        num_transforms: 2,
        hidden: vec![8],
        ..FlowConfig::for_dim(kind.dim())
    };
    PosteriorModel::new(kind, &enc, &flow, seed).unwrap()
}

#[test]
fn loop_accounts_budget_and_is_reproducible() {
    let fx = fixture();
    let cfg = tiny_config(Variant::Full);
    let prior = Prior::new(ResidualKind::IidGaussian);
    let holdout = make_synthetic_holdout(&prior, &fx.bank, cfg.holdout_size, 5, 10_000).unwrap();
    assert_eq!(
        holdout,
        make_synthetic_holdout(&prior, &fx.bank, cfg.holdout_size, 5, 10_000).unwrap()
    );

    let run = || {
        let lp = ActiveLoop::new(&cfg, prior.clone(), &fx.bank, &fx.observed, &holdout, 9).unwrap();
        let mut seen = Vec::new();
        let state = lp
            .run(tiny_model(1), |s, r| {
                seen.push((r.round, s.buffer.len()));
                Ok(())
            })
            .unwrap();
        (state, seen)
    };
    let (a, seen) = run();
    assert_eq!(a.round, cfg.rounds);
    assert_eq!(a.reports.len(), cfg.rounds + 1);
    assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    for r in &a.reports {
        assert_eq!(r.simulations, cfg.budget(r.round));
        let stored = cfg.samples_initial + r.round * cfg.b - {
            let failed: usize = a.reports[..=r.round].iter().map(|x| x.failed_simulations).sum();
            failed
        };
        assert_eq!(r.buffer_len, stored.min(cfg.train_buffer_size));
        assert!(r.holdout_nll.is_finite());
    }
    assert_eq!(a.reports[0].synthetic_leaders, 0);
    assert_eq!(a.reports[0].lambda, 1.0);

    let best = a.reports.iter().map(|r| r.holdout_nll).fold(f64::INFINITY, f64::min);
    assert_eq!(holdout.nll(&a.model).unwrap(), best);

    let (b, _) = run();
    assert_eq!(a.model.to_json().unwrap(), b.model.to_json().unwrap());
    let nll = |s: &asbc::active::LoopState| s.reports.iter().map(|r| r.holdout_nll).collect::<Vec<_>>();
    assert_eq!(nll(&a), nll(&b));
}

#[test]
fn prior_only_draws_every_candidate_from_the_prior() {
    let fx = fixture();
    let cfg = LoopConfig {
        rounds: 1,
        ..tiny_config(Variant::PriorOnly)
    };
    let prior = Prior::new(ResidualKind::IidGaussian);
    let holdout = make_synthetic_holdout(&prior, &fx.bank, cfg.holdout_size, 5, 10_000).unwrap();
    let lp = ActiveLoop::new(&cfg, prior, &fx.bank, &fx.observed, &holdout, 4).unwrap();
    let state = lp.run(tiny_model(2), |_, _| Ok(())).unwrap();
    let r = &state.reports[1];
    assert_eq!(r.lambda, 1.0);
    assert_eq!(r.prior_draws, cfg.samples_per_round);
}

#[test]
fn zero_rounds_trains_the_warm_up_only() {
    let fx = fixture();
    let cfg = LoopConfig {
        rounds: 0,
        ..tiny_config(Variant::Full)
    };
    let prior = Prior::new(ResidualKind::IidGaussian);
    let holdout = make_synthetic_holdout(&prior, &fx.bank, cfg.holdout_size, 5, 10_000).unwrap();
    let lp = ActiveLoop::new(&cfg, prior, &fx.bank, &fx.observed, &holdout, 4).unwrap();
    let state = lp.run(tiny_model(3), |_, _| Ok(())).unwrap();
    assert_eq!(state.round, 0);
    assert_eq!(state.simulations, cfg.samples_initial);
    assert_eq!(state.model.provenance.round, 0);
}
