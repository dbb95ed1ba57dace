//! End-to-end behavior of the Gibbs sampler on synthetic data.

use bmef::config::{FitConfig, ModelSpec, VarianceMode};
use bmef::posterior::{self, PosteriorChain};
use bmef::sampler::{self, fit};
use bmef::simulate::{self, Scenario, SimulationConfig, VarianceSetting};

fn desk_sim(seed: u64, rank: usize) -> SimulationConfig {
    SimulationConfig {
        scenario: Scenario::S1,
        rank,
        variance_setting: VarianceSetting::H1,
        n_subjects: 12,
        n_conditions: 3,
        t_len: 20,
        f_len: 20,
        k_time: 6,
        k_freq: 6,
        sigma_gamma2: 0.16,
        sigma_eps2: 0.01,
        missingness: None,
        seed,
    }
}

fn quick_cfg(seed: u64) -> FitConfig {
    let mut cfg = FitConfig::default();
    cfg.burn_in = 400;
    cfg.n_draws = 100;
    cfg.threads = 1;
    cfg.seed = seed;
    cfg
}

#[test]
fn chain_has_requested_length_and_consistent_rank() {
    let (ds, _) = simulate::generate(&desk_sim(1, 2)).unwrap();
    let cfg = quick_cfg(10);
    let chain = fit(&ds, &cfg).unwrap();
    assert_eq!(chain.len(), cfg.n_draws);
    assert!(chain
        .draws
        .iter()
        .all(|d| d.fixed.rank() == chain.meta.final_rank));
    for d in &chain.draws {
        assert!(d.fixed.orthonormality_drift() < 1e-8);
        assert!(d.random.sigma_eps2 > 0.0);
    }
}

#[test]
fn identical_seeds_give_bit_identical_chains() {
    let (ds, _) = simulate::generate(&desk_sim(2, 2)).unwrap();
    let cfg = quick_cfg(77);
    let a = fit(&ds, &cfg).unwrap();
    let b = fit(&ds, &cfg).unwrap();
    assert_eq!(a.len(), b.len());
    for (da, db) in a.draws.iter().zip(&b.draws) {
        assert_eq!(da.fixed.u, db.fixed.u);
        assert_eq!(da.fixed.v, db.fixed.v);
        assert_eq!(da.fixed.delta, db.fixed.delta);
        assert_eq!(da.random.gamma, db.random.gamma);
        assert_eq!(da.random.omega, db.random.omega);
        assert_eq!(da.random.sigma_eps2, db.random.sigma_eps2);
    }

    let mut other = cfg.clone();
    other.seed = 78;
    let c = fit(&ds, &other).unwrap();
    assert_ne!(a.draws[0].fixed.u, c.draws[0].fixed.u);
}

#[test]
fn per_index_parallelism_does_not_change_the_chain() {
    let (ds, _) = simulate::generate(&desk_sim(3, 2)).unwrap();
    let mut cfg = quick_cfg(5);
    cfg.burn_in = 150;
    cfg.n_draws = 30;
    let sequential = fit(&ds, &cfg).unwrap();
    cfg.threads = 4;
    let parallel = fit(&ds, &cfg).unwrap();
    for (a, b) in sequential.draws.iter().zip(&parallel.draws) {
        assert_eq!(a.random.gamma, b.random.gamma);
        assert_eq!(a.random.omega, b.random.omega);
        assert_eq!(a.fixed.u, b.fixed.u);
    }
}

#[test]
fn warm_start_recovers_true_rank_on_easy_data() {
    let (ds, truth) = simulate::generate(&desk_sim(4, 2)).unwrap();
    assert_eq!(truth.fixed.rank(), 2);
    let chain = fit(&ds, &quick_cfg(21)).unwrap();
    assert_eq!(chain.meta.final_rank, 2, "selected rank");
}

#[test]
fn fixed_effects_recovered_without_random_effect_levels() {
    // model A on nearly noise-free rank-structured data
    let mut sim = desk_sim(5, 2);
    sim.sigma_gamma2 = 1e-12;
    sim.sigma_eps2 = 1e-6;
    let (ds, truth) = simulate::generate(&sim).unwrap();
    // zero out the subject effects entirely for a pure fixed-effect dataset
    let mut cfg = quick_cfg(31);
    cfg.model_spec = ModelSpec::A;
    cfg.burn_in = 300;
    cfg.n_draws = 60;
    let chain = fit(&ds, &cfg).unwrap();
    let basis = chain.basis().unwrap();
    let est = posterior::posterior_mean_fixed_surfaces(&chain, &basis, truth_covariates(&truth))
        .unwrap();
    let err = simulate::mse_fixed(&truth, &est).unwrap();
    // sigma_omega stays at its generating scale, so that level dominates the error
    let omega_var: f64 = truth.sigma_omega2.iter().sum::<f64>() / truth.sigma_omega2.len() as f64;
    assert!(
        err < 4.0 * omega_var * ds.grid_len() as f64 / 100.0,
        "MSE(A) = {err}, omega variance = {omega_var}"
    );
}

fn truth_covariates(truth: &simulate::GroundTruth) -> &nalgebra::DMatrix<f64> {
    &truth.covariates
}

#[test]
fn warm_start_step_follows_the_threshold_rules() {
    use bmef::sampler::{warm_start_rank_step, RankAction, WarmStart};
    let mut rng = bmef::rng::master_rng(0);
    let cfg = FitConfig::default();
    let mut fixed = sampler::initial_fixed_effect(&cfg, 2, 3, &mut rng).unwrap();
    let mut warm = WarmStart::default();

    // tau above the threshold: grow
    fixed.tau[0] = 0.5;
    let action = warm_start_rank_step(&mut fixed, &mut warm, &cfg, &mut rng).unwrap();
    assert_eq!(action, RankAction::Added);
    assert_eq!(fixed.rank(), 2);
    assert_eq!(fixed.tau[1], cfg.h1);
    assert!(fixed.membership[1]);
    assert!(fixed.delta.iter().all(|d| d.column(1).amax() == 0.0));
    assert!(fixed.orthonormality_drift() < 1e-10);

    // one tau below the threshold: remove exactly that rank and lock growth
    fixed.tau = vec![0.5, 0.01];
    let before_u = fixed.u.column(0).clone_owned();
    let action = warm_start_rank_step(&mut fixed, &mut warm, &cfg, &mut rng).unwrap();
    assert_eq!(action, RankAction::Removed { index: 1 });
    assert_eq!(fixed.rank(), 1);
    assert_eq!(fixed.u.column(0), before_u); // survivors untouched
    assert!(fixed.orthonormality_drift() < 1e-10);
    assert!(warm.removal_occurred);

    // growth stays disabled afterwards
    fixed.tau = vec![0.5];
    let action = warm_start_rank_step(&mut fixed, &mut warm, &cfg, &mut rng).unwrap();
    assert_eq!(action, RankAction::None);
    assert_eq!(fixed.rank(), 1);
}

#[test]
fn single_rank_is_never_removed() {
    use bmef::sampler::{warm_start_rank_step, RankAction, WarmStart};
    let mut rng = bmef::rng::master_rng(1);
    let cfg = FitConfig::default();
    let mut fixed = sampler::initial_fixed_effect(&cfg, 1, 2, &mut rng).unwrap();
    let mut warm = WarmStart::default();
    fixed.tau = vec![1e-6];
    let action = warm_start_rank_step(&mut fixed, &mut warm, &cfg, &mut rng).unwrap();
    assert_eq!(action, RankAction::None);
    assert_eq!(fixed.rank(), 1);
    assert!(warm.removal_occurred);
}

#[test]
fn homogeneous_variance_mode_pools_subjects() {
    let mut sim = desk_sim(6, 2);
    sim.n_subjects = 6;
    let (ds, _) = simulate::generate(&sim).unwrap();
    let mut cfg = quick_cfg(41);
    cfg.variance_mode = VarianceMode::Homogeneous;
    cfg.burn_in = 120;
    cfg.n_draws = 20;
    let chain = fit(&ds, &cfg).unwrap();
    for d in &chain.draws {
        match &d.random.sigma_omega2 {
            bmef::sampler::SigmaOmega::Pooled(v) => assert!(*v > 0.0),
            other => panic!("expected pooled variance, got {other:?}"),
        }
    }
}

#[test]
fn model_specs_drop_the_right_effects() {
    let (ds, _) = simulate::generate(&desk_sim(7, 2)).unwrap();
    let mut cfg = quick_cfg(51);
    cfg.burn_in = 100;
    cfg.n_draws = 10;

    cfg.model_spec = ModelSpec::Ab;
    let chain = fit(&ds, &cfg).unwrap();
    assert!(chain.draws[0].random.has_gamma());
    assert!(!chain.draws[0].random.has_omega());

    cfg.model_spec = ModelSpec::A;
    let chain = fit(&ds, &cfg).unwrap();
    assert!(!chain.draws[0].random.has_gamma());
    assert!(!chain.draws[0].random.has_omega());
}

#[test]
fn checkpoints_fire_and_carry_partial_draws() {
    struct Recorder {
        sizes: Vec<usize>,
    }
    impl sampler::FitObserver for Recorder {
        fn checkpoint(&mut self, chain: &PosteriorChain) {
            self.sizes.push(chain.len());
        }
    }
    let mut sim = desk_sim(8, 2);
    sim.n_subjects = 5;
    sim.t_len = 12;
    sim.f_len = 12;
    let (ds, _) = simulate::generate(&sim).unwrap();
    let mut cfg = quick_cfg(61);
    cfg.burn_in = 60;
    cfg.n_draws = 25;
    cfg.checkpoint_interval = Some(10);
    let mut rec = Recorder { sizes: vec![] };
    sampler::fit_observed(&ds, &cfg, &mut rec).unwrap();
    assert_eq!(rec.sizes, vec![10, 20]);
}
