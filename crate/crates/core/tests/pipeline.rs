use nalgebra::DVector;
use proptest::prelude::*;

use flowlab::data::{load_dataset, save_dataset_csv, synthetic};
use flowlab::dynamics::{generate, integrate_ode, integrate_sde, make_grid, GridKind, Method, Snap, DEFAULT_SNAP_TOL};
use flowlab::field::OptimalField;
use flowlab::geometry::{concentration_bound, estimate_nonconcentration, min_separation};
use flowlab::osdnet::{compute_quadratic_data, kappa_euler, kappa_flow, kappa_limit, EmbeddingConfig, OsdNet};
use flowlab::paths::{optimal_velocity, softmax_weights, OtSchedule};
use flowlab::rng::sample_standard_gaussian;
use flowlab::subspace::{svd_decompose, DEFAULT_RANK_TOL};
use flowlab::trainer::{load_checkpoint, save_checkpoint, OffsubspaceConfig, OffsubspaceTrainer};
use flowlab::{exec, DataFormat, DataMatrix, RngSpec, VelocityField};

#[test]
fn saved_dataset_generates_to_its_own_points() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic::sparse(RngSpec::new(3, 10), 5, 3, 10.0, 5.0).unwrap();
    let path = dir.path().join("d.csv");
    save_dataset_csv(&path, &data).unwrap();
    let back = load_dataset(&path, DataFormat::Csv).unwrap();
    assert_eq!(back, data);

    let field = OptimalField::ot(back.clone());
    let grid = make_grid(GridKind::Geometric, 200, 1e-4).unwrap();
    let starts = sample_standard_gaussian(RngSpec::new(3, 1), 3, 16).unwrap();
    let snapped = exec::map_indexed(16, |j| {
        generate(&field, &starts.column(j).into_owned(), &grid, &back, DEFAULT_SNAP_TOL, Method::Rk4).unwrap().snapped
    });
    assert!(snapped.iter().all(|s| matches!(s, Snap::Index(_))), "{snapped:?}");
}

#[test]
fn field_matches_weighted_formula() {
    let data = synthetic::sparse(RngSpec::new(4, 10), 4, 2, 5.0, 1.0).unwrap();
    let field = OptimalField::ot(data.clone());
    let x = DVector::from_vec(vec![0.3, -0.7]);
    for t in [0.0, 0.4, 0.9] {
        let w = softmax_weights(&x, t, &data, &OtSchedule).unwrap().w;
        let expected = (data.matrix() * &w - &x) / (1.0 - t);
        assert!((field.velocity(&x, t) - &expected).norm() < 1e-12);
        assert!((optimal_velocity(&x, t, &data, &OtSchedule).unwrap() - expected).norm() < 1e-12);
    }
}

#[test]
fn zero_noise_sde_is_euler() {
    let data = synthetic::sparse(RngSpec::new(5, 10), 3, 2, 5.0, 1.0).unwrap();
    let field = OptimalField::ot(data);
    let grid = make_grid(GridKind::Uniform, 50, 0.1).unwrap();
    let x0 = DVector::from_vec(vec![0.1, 0.2]);
    let ode = integrate_ode(&field, &x0, &grid, Method::Euler).unwrap();
    let sde = integrate_sde(&field, 0.0, &x0, &grid, RngSpec::new(5, 2)).unwrap();
    assert!((ode.terminal() - sde.terminal()).norm() < 1e-14);
}

#[test]
fn bound_dominates_estimate_on_clustered_data() {
    let data = synthetic::four_clusters(RngSpec::new(6, 12), 10, 0.5).unwrap();
    let m = min_separation(&data).unwrap();
    for t in [0.8, 0.95] {
        let b = concentration_bound(t, 0.9, m, data.len()).unwrap();
        let (p, se) = estimate_nonconcentration(t, 0.9, &data, 5000, RngSpec::new(6, 30)).unwrap();
        assert!(p - 3.0 * se <= b, "t = {t}: {p} vs {b}");
    }
}

#[test]
fn optimal_osdnet_reproduces_field_off_subspace_data() {
    let data = synthetic::unit_cube_subspace(RngSpec::new(7, 13), 30, 12, 4).unwrap();
    let basis = svd_decompose(&data, DEFAULT_RANK_TOL).unwrap();
    assert_eq!(basis.rank(), 4);
    let net = OsdNet::optimal(basis);
    let field = OptimalField::ot(data.clone());
    let xs = sample_standard_gaussian(RngSpec::new(7, 1), 12, 20).unwrap();
    for (j, x) in xs.column_iter().enumerate() {
        let t = 0.05 * j as f64 % 0.99;
        let x = x.into_owned();
        assert!((net.velocity(&x, t) - field.velocity(&x, t)).norm() < 1e-9);
    }
}

#[test]
fn kappa_flow_agrees_with_fine_euler_and_approaches_limit() {
    let emb = EmbeddingConfig::new(1.0, 10000.0, 4).unwrap();
    let q = compute_quadratic_data(&emb, 1024).unwrap();
    let k0 = DVector::zeros(4);
    let tau = 5.0;
    let h = 1e-4;
    let flow = kappa_flow(tau, &k0, &q).unwrap();
    let euler = kappa_euler(&k0, &q, h, (tau / h) as usize);
    assert!((&flow - &euler).norm() / flow.norm().max(1.0) < 1e-3);
    let limit = kappa_limit(&q).unwrap();
    assert!(q.loss(&limit) <= q.loss(&flow) + 1e-12);
    assert!(q.gradient(&limit).norm() < 1e-6 * q.gradient(&k0).norm().max(1.0));
}

#[test]
fn training_checkpoint_round_trip_resumes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic::unit_cube_subspace(RngSpec::new(8, 13), 20, 8, 3).unwrap();
    let basis = svd_decompose(&data, DEFAULT_RANK_TOL).unwrap();
    let mut cfg = OffsubspaceConfig::default();
    cfg.emb.dim = 8;
    cfg.train.epochs = 20;
    cfg.train.checkpoint_every = 10;
    cfg.train.batch = 64;
    cfg.train.eval_samples = 100;
    cfg.panels = 512;
    let mut a = OffsubspaceTrainer::new(&basis, cfg, None).unwrap();
    a.run_to(10, |_| Ok(())).unwrap();
    let path = dir.path().join("ck.json");
    save_checkpoint(&path, &a.checkpoint()).unwrap();
    a.run_to(20, |_| Ok(())).unwrap();

    let mut b = OffsubspaceTrainer::resume(&load_checkpoint(&path).unwrap(), &basis).unwrap();
    b.run_to(20, |_| Ok(())).unwrap();
    assert_eq!(a.kappa, b.kappa);
    assert_eq!(a.history, b.history);
}

fn points(max_n: usize) -> impl Strategy<Value = DataMatrix> {
    (1..=max_n, 1usize..4).prop_flat_map(|(n, d)| {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), n)
            .prop_map(|rows| DataMatrix::from_points(&rows).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_weights_form_a_distribution(data in points(6), t in 0.0f64..0.999, seed in 0u64..1000) {
        let x = sample_standard_gaussian(RngSpec::new(seed, 0), data.dim(), 1).unwrap().column(0).into_owned();
        let w = softmax_weights(&x, t, &data, &OtSchedule).unwrap().w;
        prop_assert!((w.sum() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn single_point_flow_is_straight(data in points(1), t in 0.0f64..0.99) {
        // one data point y: x_t = (1 - t) x0 + t y exactly
        let field = OptimalField::ot(data.clone());
        let x0 = DVector::from_element(data.dim(), 0.5);
        let y = data.point(0).into_owned();
        let xt = &x0 * (1.0 - t) + &y * t;
        let v = field.velocity(&xt, t);
        prop_assert!((v - (&y - &x0)).norm() < 1e-9 * (1.0 + y.norm()));
    }

    #[test]
    fn bound_is_decreasing_in_t(m in 0.5f64..20.0, n in 2usize..50, t in 0.1f64..0.9) {
        let tau = 0.99;
        prop_assume!(tau > 1.0 / n as f64);
        let a = concentration_bound(t, tau, m, n).unwrap();
        let b = concentration_bound(t + 0.05, tau, m, n).unwrap();
        prop_assert!(b <= a);
    }
}
