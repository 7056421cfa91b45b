use hei_core::fem::{assemble_mass, assemble_stiffness, generate_channel_permeability, rasterize, DEFAULT_LAYOUT};
use hei_core::multiscale::{build_decomposition, explicit_stability_indicator, project_system};
use hei_core::nn::AdamConfig;
use hei_core::pipeline::{
    assimilation_rollout, error_report, hybrid_rollout, make_windows, make_windows_from, scheduled_lr, train,
    FeatureStats, NeuralPredictor, NormalizationStats, OraclePredictor, Strategy, Surrogate, TrainingConfig,
    WindowShape, STD_FLOOR,
};
use hei_core::splitting::{project_initial, run_trajectory, LinearStepper, NewtonConfig};
use hei_core::transformer::{TransformerConfig, TransformerModel};
use hei_core::{CoarseMesh, FineMesh, ProjectedSystem, SolverConfig, SparseMatrix, SpaceDecomposition, Trajectory};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SHAPE: WindowShape = WindowShape { n_e: 2, n_d: 2 };

struct Fixture {
    mesh: FineMesh,
    mass: SparseMatrix,
    stiffness: SparseMatrix,
    dec: SpaceDecomposition,
    ps: ProjectedSystem,
    tau: f64,
    traj: Trajectory,
}

fn fixture(n_steps: usize) -> Fixture {
    let mesh = FineMesh::new(8).unwrap();
    let coarse = CoarseMesh::new(&mesh, 2).unwrap();
    let kappa = generate_channel_permeability(8, 1.0, 1e3, &rasterize(&DEFAULT_LAYOUT, 8)).unwrap();
    let mass = assemble_mass(&mesh);
    let stiffness = assemble_stiffness(&mesh, &kappa).unwrap();
    let dec = build_decomposition(&mesh, &coarse, &kappa, 2, 2, &mass).unwrap();
    let ps = project_system(&dec, &mass, &stiffness).unwrap();
    let tau = 1.0 / explicit_stability_indicator(&ps).unwrap();
    let u0 = mesh.interpolate(|x, y| (-((x - 0.5).powi(2) + (y - 0.5).powi(2)) / 0.01).exp());
    let cfg = SolverConfig {
        tau,
        n_steps,
        omega: 0.5,
        nonlinear: false,
        newton: NewtonConfig::default(),
    };
    let mut stepper = LinearStepper::new(&ps, tau, 0.5).unwrap();
    let traj = run_trajectory(project_initial(&dec, &mass, &u0).unwrap(), &cfg, &mut stepper).unwrap();
    Fixture {
        mesh,
        mass,
        stiffness,
        dec,
        ps,
        tau,
        traj,
    }
}

fn sequence(len: usize, dim: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0))).collect()
}

#[test]
fn window_counts_and_layout() {
    let (s, t) = (sequence(30, 3, 1), sequence(30, 2, 2));
    assert_eq!(make_windows_from(&s, &t, 4, SHAPE).unwrap().len(), 1);
    let windows = make_windows_from(&s, &t, 25, SHAPE).unwrap();
    assert_eq!(windows.len(), 22);
    let w = &windows[0];
    assert_eq!(w.anchor, 1);
    assert_eq!(w.encoder, vec![s[1].clone(), s[0].clone()]);
    assert_eq!(w.decoder, vec![t[1].clone(), t[2].clone()]);
    assert_eq!(w.target, vec![t[2].clone(), t[3].clone()]);
    assert_eq!(windows.last().unwrap().target.last().unwrap(), &t[24]);

    assert!(make_windows_from(&s, &t, 3, SHAPE).is_err());
    assert!(make_windows_from(&s, &t, 31, SHAPE).is_err());
    assert_eq!(SHAPE.anchors(50), Some(1..=47));
    assert_eq!(WindowShape { n_e: 0, n_d: 2 }.anchors(50), None);
    assert_eq!(WindowShape { n_e: 2, n_d: 0 }.anchors(50), None);
}

#[test]
fn windows_shift_with_the_sequence() {
    let (s, t) = (sequence(20, 3, 3), sequence(20, 2, 4));
    let full = make_windows_from(&s, &t, 20, SHAPE).unwrap();
    let shifted = make_windows_from(&s[1..], &t[1..], 19, SHAPE).unwrap();
    assert_eq!(shifted.len() + 1, full.len());
    for (a, b) in shifted.iter().zip(&full[1..]) {
        assert_eq!((&a.encoder, &a.decoder, &a.target), (&b.encoder, &b.decoder, &b.target));
        assert_eq!(a.anchor + 1, b.anchor);
    }
}

#[test]
fn strategy_roles_swap_the_sequences() {
    let f = fixture(10);
    let (s1, t1) = Strategy::PredictU1.roles(&f.traj);
    let (s2, t2) = Strategy::PredictU2.roles(&f.traj);
    assert_eq!((&s1, &t1), (&t2, &s2));
    assert_eq!(t1, f.traj.u1());
    assert_eq!(Strategy::Assimilation.roles(&f.traj), (s1, t1));
    let w = make_windows(&f.traj, 10, SHAPE, Strategy::PredictU2).unwrap();
    assert_eq!(w[0].target[0], f.traj.states[2].u2);
}

#[test]
fn normalization_examples() {
    let states = vec![DVector::from_vec(vec![1.0, 5.0]), DVector::from_vec(vec![3.0, 5.0])];
    let stats = FeatureStats::fit(&states).unwrap();
    assert_eq!(stats.mean, DVector::from_vec(vec![2.0, 5.0]));
    assert_eq!(stats.std, DVector::from_vec(vec![1.0, STD_FLOOR]));
    let z = stats.normalize(&states[0]);
    assert_eq!(z, DVector::from_vec(vec![-1.0, 0.0]));
    assert!(FeatureStats::fit(&[]).is_err());
    assert!(NormalizationStats::fit(&states, &states, 3).is_err());
}

#[test]
fn learning_rate_schedule() {
    let cfg = TrainingConfig {
        epochs: 100,
        adam: AdamConfig { lr: 0.01, ..AdamConfig::default() },
        cosine: true,
    };
    assert_eq!(scheduled_lr(&cfg, 0), 0.01);
    assert!((scheduled_lr(&cfg, 50) - 0.005).abs() < 1e-15);
    assert!(scheduled_lr(&cfg, 99) < 1e-5);
    let flat = TrainingConfig { cosine: false, ..cfg };
    assert_eq!(scheduled_lr(&flat, 77), 0.01);
}

fn small_model(source_dim: usize, target_dim: usize) -> TransformerModel {
    TransformerModel::new(TransformerConfig {
        d_model: 16,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        d_ff: 32,
        n_e: 2,
        n_d: 2,
        source_dim,
        target_dim,
        seed: 3,
        positional_encoding: true,
    })
    .unwrap()
}

fn training_setup(f: &Fixture, m: usize) -> (Vec<hei_core::pipeline::WindowSample>, NormalizationStats) {
    let (source, target) = Strategy::PredictU1.roles(&f.traj);
    let samples = make_windows_from(&source, &target, m, SHAPE).unwrap();
    let stats = NormalizationStats::fit(&source, &target, m).unwrap();
    (samples, stats)
}

#[test]
fn zero_epochs_leave_the_model_alone() {
    let f = fixture(30);
    let (samples, stats) = training_setup(&f, 20);
    let mut model = small_model(f.dec.m2(), f.dec.m1());
    let before = model.store.clone();
    let cfg = TrainingConfig { epochs: 0, ..TrainingConfig::default() };
    assert!(train(&mut model, &samples, &stats, &cfg).unwrap().is_empty());
    assert_eq!(model.store, before);
    assert!(train(&mut model, &[], &stats, &cfg).is_err());
}

#[test]
fn training_is_deterministic_and_reduces_the_loss() {
    let f = fixture(30);
    let (samples, stats) = training_setup(&f, 20);
    let cfg = TrainingConfig {
        epochs: 300,
        adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
        cosine: true,
    };
    let mut a = small_model(f.dec.m2(), f.dec.m1());
    let mut b = small_model(f.dec.m2(), f.dec.m1());
    let ha = train(&mut a, &samples, &stats, &cfg).unwrap();
    let hb = train(&mut b, &samples, &stats, &cfg).unwrap();
    assert_eq!(ha.len(), 300);
    assert!(ha.iter().zip(&hb).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.store, b.store);
    assert!(*ha.last().unwrap() < 0.1 * ha[0], "{} -> {}", ha[0], ha.last().unwrap());
}

#[test]
fn oracle_rollouts_reproduce_the_splitting() {
    let f = fixture(40);
    let m = 10;
    for which in 0..3 {
        let mut stepper = LinearStepper::new(&f.ps, f.tau, 0.5).unwrap();
        let mut o1 = OraclePredictor { target: f.traj.u1(), shape: SHAPE };
        let mut o2 = OraclePredictor { target: f.traj.u2(), shape: SHAPE };
        let surrogate = match which {
            0 => Surrogate::U1(&mut o1),
            1 => Surrogate::U2(&mut o2),
            _ => Surrogate::Both { u1: &mut o1, u2: &mut o2 },
        };
        let out = hybrid_rollout(surrogate, &mut stepper, &f.traj, m, f.traj.len()).unwrap();
        assert_eq!(out.len(), f.traj.len());
        for (a, b) in out.states.iter().zip(&f.traj.states) {
            assert_eq!(a.step, b.step);
            assert!((&a.u1 - &b.u1).amax() <= 1e-12 * b.u1.amax());
            assert!((&a.u2 - &b.u2).amax() <= 1e-12 * b.u2.amax().max(1e-300));
        }
    }
}

#[test]
fn rollout_with_nothing_to_predict_returns_the_prefix() {
    let f = fixture(12);
    let mut stepper = LinearStepper::new(&f.ps, f.tau, 0.5).unwrap();
    let mut oracle = OraclePredictor { target: f.traj.u1(), shape: SHAPE };
    let out = hybrid_rollout(Surrogate::U1(&mut oracle), &mut stepper, &f.traj, 8, 8).unwrap();
    assert_eq!(out.states, f.traj.states[..8].to_vec());
    let mut oracle = OraclePredictor { target: f.traj.u1(), shape: SHAPE };
    assert!(hybrid_rollout(Surrogate::U1(&mut oracle), &mut stepper, &f.traj, 8, 7).is_err());
    let mut oracle = OraclePredictor { target: f.traj.u1(), shape: SHAPE };
    assert!(hybrid_rollout(Surrogate::U1(&mut oracle), &mut stepper, &f.traj, 14, 20).is_err());
}

#[test]
fn oracle_assimilation_pairs_truth_with_the_observation() {
    let f = fixture(30);
    let mut oracle = OraclePredictor { target: f.traj.u1(), shape: SHAPE };
    let out = assimilation_rollout(&mut oracle, &f.traj.u2(), &f.traj.u1(), 10, 31, f.tau, 0.5).unwrap();
    assert_eq!(out.states, f.traj.states);
    let mut oracle = OraclePredictor { target: f.traj.u1(), shape: SHAPE };
    assert!(assimilation_rollout(&mut oracle, &f.traj.u2()[..20], &f.traj.u1(), 10, 31, f.tau, 0.5).is_err());
}

#[test]
fn trained_predictor_drives_a_finite_rollout() {
    let f = fixture(40);
    let (samples, stats) = training_setup(&f, 20);
    let mut model = small_model(f.dec.m2(), f.dec.m1());
    let cfg = TrainingConfig { epochs: 50, ..TrainingConfig::default() };
    train(&mut model, &samples, &stats, &cfg).unwrap();
    let mut neural = NeuralPredictor { model: &model, stats: &stats };
    let mut stepper = LinearStepper::new(&f.ps, f.tau, 0.5).unwrap();
    let out = hybrid_rollout(Surrogate::U1(&mut neural), &mut stepper, &f.traj, 20, 41).unwrap();
    assert_eq!(out.len(), 41);
    assert!(out.states.iter().all(|s| s.is_finite()));
    assert_eq!(out.states[..20].to_vec(), f.traj.states[..20].to_vec());
}

#[test]
fn error_report_examples() {
    let f = fixture(5);
    let fine = f.traj.reconstruct(&f.dec);
    let same = error_report(&fine, &fine, 2, &f.mass, &f.stiffness).unwrap();
    assert_eq!(same.mean_l2(), Some(0.0));
    assert_eq!(same.max_energy(), Some(0.0));

    let doubled: Vec<_> = fine.iter().map(|u| u * 2.0).collect();
    let r = error_report(&doubled, &fine, 0, &f.mass, &f.stiffness).unwrap();
    assert!((r.mean_l2().unwrap() - 1.0).abs() < 1e-14);
    assert!((r.mean_energy().unwrap() - 1.0).abs() < 1e-14);

    let zero = vec![DVector::zeros(f.mesh.node_count()); 3];
    let r = error_report(&fine[..3], &zero, 0, &f.mass, &f.stiffness).unwrap();
    assert!(r.steps.iter().all(|s| s.rel_l2.is_none()));
    assert_eq!(r.mean_l2(), None);
    let csv = r.to_csv();
    assert_eq!(csv.lines().next(), Some("step,rel_l2,rel_energy"));
    assert_eq!(csv.lines().nth(1), Some("0,nan,nan"));

    assert!(error_report(&fine[..2], &fine, 0, &f.mass, &f.stiffness).is_err());
}

#[test]
fn report_averages_only_predicted_steps() {
    let f = fixture(5);
    let fine = f.traj.reconstruct(&f.dec);
    let mut cand = fine.clone();
    cand[4] *= 3.0;
    // Steps 4 and 5 are counted.
    let r = error_report(&cand, &fine, 4, &f.mass, &f.stiffness).unwrap();
    assert!((r.mean_l2().unwrap() - 1.0).abs() < 1e-13);
    let r = error_report(&cand, &fine, 0, &f.mass, &f.stiffness).unwrap();
    assert!((r.mean_l2().unwrap() - 2.0 / 6.0).abs() < 1e-13);
    assert!((r.max_l2().unwrap() - 2.0).abs() < 1e-13);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalization_round_trips(seed in 0u64..10_000, len in 2usize..12) {
        let states = sequence(len, 4, seed);
        let stats = FeatureStats::fit(&states).unwrap();
        for s in &states {
            let back = stats.denormalize(&stats.normalize(s));
            prop_assert!((back - s).amax() < 1e-12);
        }
    }

    #[test]
    fn window_count_formula(m in 4usize..60, n_e in 1usize..4, n_d in 1usize..4) {
        let (s, t) = (sequence(60, 1, 0), sequence(60, 1, 1));
        let shape = WindowShape { n_e, n_d };
        match make_windows_from(&s, &t, m, shape) {
            Ok(w) => prop_assert_eq!(w.len(), m - n_e - n_d + 1),
            Err(_) => prop_assert!(m < n_e + n_d),
        }
    }
}
