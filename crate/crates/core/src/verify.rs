//! The invariant suite: one check per verifiable claim, each reporting measured values
//! against their requirements. Sizes come from [`SuiteConfig`]; [`SuiteConfig::full`] uses
//! the reference problem sizes, [`SuiteConfig::quick`] a reduced set for routine runs.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{synthetic, DataMatrix};
use crate::dynamics::{
    generate_endpoint, integrate_ode, integrate_ode_final, integrate_sde, lipschitz_estimate, make_grid, GridKind,
    Method, Snap, DEFAULT_SNAP_TOL,
};
use crate::exec;
use crate::field::OptimalField;
use crate::geometry::{
    concentration_bound, confinement_check_cached, estimate_nonconcentration, min_separation, region_membership,
    separation_time, BlendCache, ConvexRegion, HierarchySpec, Level, DEFAULT_BISECTION_TOL, MEMBERSHIP_TOL,
};
use crate::osdnet::{
    compute_quadratic_data, diagonal_exponential, embedding_fit_error, generation_factor, kappa_euler, kappa_flow,
    kappa_limit, kappa_limit_pinv, loss_o_exact, loss_o_mc, osd_loss_grad, Activation, DiagonalField,
    EmbeddingConfig, ExpFactor, McSpec, NetConfig, Objective, OptimalSubspace, OsdNet, PerturbedSubspace,
    SubspaceNet, DEFAULT_PANELS, DEFAULT_PINV_RCOND,
};
use crate::paths::{optimal_velocity, sample_marginal, OtSchedule};
use crate::rng::{sample_standard_gaussian, standard_normal, RngSpec};
use crate::stats;
use crate::subspace::{svd_decompose, SubspaceBasis, DEFAULT_RANK_TOL};
use crate::trainer::{
    chi_mean, draw_subspace_batch, subspace_loss_grad, OffsubspaceConfig, OffsubspaceTrainer, SubspaceConfig,
    SubspaceTrainer,
};
use crate::Result;

pub const CHECK_COUNT: u32 = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measure {
    pub name: String,
    pub value: f64,
    /// Human-readable requirement, `"info"` for values that are reported only.
    pub required: String,
    pub pass: bool,
}

impl Measure {
    pub fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Self::new(name, value, format!("<= {limit}"), value <= limit)
    }

    pub fn below(name: &str, value: f64, limit: f64) -> Self {
        Self::new(name, value, format!("< {limit}"), value < limit)
    }

    pub fn at_least(name: &str, value: f64, limit: f64) -> Self {
        Self::new(name, value, format!(">= {limit}"), value >= limit)
    }

    pub fn above(name: &str, value: f64, limit: f64) -> Self {
        Self::new(name, value, format!("> {limit}"), value > limit)
    }

    pub fn within(name: &str, value: f64, target: f64, tol: f64) -> Self {
        Self::new(name, value, format!("{target} ± {tol}"), (value - target).abs() <= tol)
    }

    pub fn holds(name: &str, value: f64, required: &str, pass: bool) -> Self {
        Self::new(name, value, required.to_string(), pass)
    }

    pub fn info(name: &str, value: f64) -> Self {
        Self::new(name, value, "info".to_string(), true)
    }

    fn new(name: &str, value: f64, required: String, pass: bool) -> Self {
        Self {
            name: name.to_string(),
            value,
            required,
            pass: pass && !value.is_nan(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub id: u32,
    pub module: String,
    pub name: String,
    pub pass: bool,
    pub measures: Vec<Measure>,
    pub error: Option<String>,
    pub seconds: f64,
}

impl Check {
    /// `PASS #3 geometry/concentration-bound: a=1 (<= 2); ...`
    pub fn line(&self) -> String {
        let status = if self.pass { "PASS" } else { "FAIL" };
        let mut parts: Vec<String> = self
            .measures
            .iter()
            .map(|m| {
                let mark = if m.pass { "" } else { " !" };
                format!("{}={:.6e} ({}){mark}", m.name, m.value, m.required)
            })
            .collect();
        if let Some(e) = &self.error {
            parts.push(format!("error: {e}"));
        }
        format!("{status} #{} {}/{} [{:.1}s]: {}", self.id, self.module, self.name, self.seconds, parts.join("; "))
    }

    pub fn measure(&self, name: &str) -> Option<&Measure> {
        self.measures.iter().find(|m| m.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub checks: Vec<Check>,
    pub all_pass: bool,
}

/// Reference value for the final off-subspace norm in check 9.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffReference {
    /// `E‖V⊥ᵀx₀‖·exp(−bᵀA⁻¹e)`, the `τ → ∞` limit.
    Limit,
    /// The same with `κ` from deterministic gradient descent over the trained epochs.
    FiniteTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub memorization_starts: usize,
    pub memorization_time_limit: f64,
    pub bound_samples: usize,
    pub confinement_trajectories: usize,
    pub identity_points: usize,
    /// Constant offset added to the optimal subspace field in check 5 (negative control).
    pub perturb_optimal: f64,
    pub loss_samples: usize,
    pub offsubspace: OffsubspaceConfig,
    pub off_reference: OffReference,
    pub offsubspace_time_limit: f64,
    pub subspace: SubspaceConfig,
    pub sde_realizations: usize,
    pub perturbation_starts: usize,
    pub gradient_probes: usize,
}

impl SuiteConfig {
    /// The reference problem sizes.
    pub fn full(seed: u64) -> Self {
        let mut offsubspace = OffsubspaceConfig::default();
        offsubspace.train.rng = RngSpec::new(seed, 0);
        Self {
            seed,
            memorization_starts: 10_000,
            memorization_time_limit: 60.0,
            bound_samples: 100_000,
            confinement_trajectories: 500,
            identity_points: 1000,
            perturb_optimal: 0.0,
            loss_samples: 100_000,
            offsubspace,
            off_reference: OffReference::Limit,
            offsubspace_time_limit: 600.0,
            subspace: reduced_subspace(seed, 20_000, 1000),
            sde_realizations: 10_000,
            perturbation_starts: 100,
            gradient_probes: 50,
        }
    }

    /// Smaller sample counts and shorter training, compared against finite-time predictions.
    pub fn quick(seed: u64) -> Self {
        let mut s = Self::full(seed);
        s.memorization_starts = 2000;
        s.bound_samples = 20_000;
        s.confinement_trajectories = 100;
        s.loss_samples = 20_000;
        s.offsubspace.train.epochs = 4000;
        s.offsubspace.train.checkpoint_every = 1000;
        s.offsubspace.train.eval_samples = 2000;
        s.off_reference = OffReference::FiniteTime;
        s.subspace = reduced_subspace(seed, 2000, 100);
        s.subspace.train.learning_rate = 1e-3;
        s.sde_realizations = 2000;
        s.perturbation_starts = 20;
        s
    }
}

/// Subspace training at `d = D = 20` with a width-64 network and batch 256.
fn reduced_subspace(seed: u64, epochs: usize, checkpoint_every: usize) -> SubspaceConfig {
    let mut c = SubspaceConfig::with_sub_dim(20);
    c.train.rng = RngSpec::new(seed, 0);
    c.train.epochs = epochs;
    c.train.checkpoint_every = checkpoint_every;
    c.train.batch = 256;
    c.train.eval_samples = 1000;
    c.net.hidden = 64;
    c.eval_batch = 1024;
    c
}

/// Runs the checks in `ids` (all when empty) in order.
pub fn run_suite(cfg: &SuiteConfig, ids: &[u32]) -> Report {
    let checks: Vec<Check> = (1..=CHECK_COUNT)
        .filter(|id| ids.is_empty() || ids.contains(id))
        .map(|id| run_check(id, cfg))
        .collect();
    let all_pass = checks.iter().all(|c| c.pass);
    Report { checks, all_pass }
}

pub fn check_meta(id: u32) -> (&'static str, &'static str) {
    match id {
        1 => ("dynamics", "memorization"),
        2 => ("dynamics", "single-point-flow"),
        3 => ("geometry", "concentration-bound"),
        4 => ("geometry", "hierarchy-confinement"),
        5 => ("osdnet", "optimal-identity"),
        6 => ("osdnet", "off-loss-reduction"),
        7 => ("osdnet", "gradient-flow-closed-form"),
        8 => ("osdnet", "embedding-limit"),
        9 => ("trainer", "offsubspace-training"),
        10 => ("trainer", "subspace-training"),
        11 => ("dynamics", "perturbation-scaling"),
        12 => ("osdnet", "gradient-correctness"),
        _ => ("unknown", "unknown"),
    }
}

pub fn run_check(id: u32, cfg: &SuiteConfig) -> Check {
    let (module, name) = check_meta(id);
    let start = Instant::now();
    let res = match id {
        1 => check_memorization(cfg),
        2 => check_single_point(cfg),
        3 => check_concentration(cfg),
        4 => check_hierarchy(cfg),
        5 => check_optimal_identity(cfg),
        6 => check_loss_reduction(cfg),
        7 => check_gradient_flow(cfg),
        8 => check_embedding(cfg),
        9 => check_offsubspace_training(cfg),
        10 => check_subspace_training(cfg),
        11 => check_perturbation(cfg),
        12 => check_gradients(cfg),
        _ => Err(crate::Error::InvalidParameter(format!("no check with id {id}"))),
    };
    let (measures, error) = match res {
        Ok(m) => (m, None),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    let pass = error.is_none() && !measures.is_empty() && measures.iter().all(|m| m.pass);
    Check {
        id,
        module: module.to_string(),
        name: name.to_string(),
        pass,
        measures,
        error,
        seconds: start.elapsed().as_secs_f64(),
    }
}

// ---------------------------------------------------------------------------------------------
// Fixtures

/// Six points in `[−10, 10]²`, pairwise at least 5 apart.
pub fn sparse_fixture(seed: u64) -> Result<DataMatrix> {
    synthetic::sparse(RngSpec::new(seed, 10), 6, 2, 10.0, 5.0)
}

/// 200 points of the unit cube in the first `active` of `d` coordinates, with their basis.
pub fn subspace_fixture(seed: u64, d: usize, active: usize) -> Result<(DataMatrix, SubspaceBasis)> {
    let data = synthetic::unit_cube_subspace(RngSpec::new(seed, 13), 200, d, active)?;
    let basis = svd_decompose(&data, DEFAULT_RANK_TOL)?;
    Ok((data, basis))
}

fn interval(a: f64, b: f64) -> Result<ConvexRegion> {
    ConvexRegion::from_points(&[vec![a], vec![b]])
}

// ---------------------------------------------------------------------------------------------
// Checks

fn check_memorization(cfg: &SuiteConfig) -> Result<Vec<Measure>> {
    let data = sparse_fixture(cfg.seed)?;
    let field = OptimalField::ot(data.clone());
    let n = cfg.memorization_starts;
    let x0 = sample_standard_gaussian(RngSpec::new(cfg.seed, 11), 2, n)?;
    let start = Instant::now();
    let grid = make_grid(GridKind::Geometric, 200, 1e-4)?;
    let ends = exec::map_indexed(n, |j| {
        generate_endpoint(&field, &x0.column(j).into_owned(), &grid, &data, DEFAULT_SNAP_TOL, Method::Rk4)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let elapsed = start.elapsed().as_secs_f64();
    let snapped = ends
        .iter()
        .filter(|e| matches!(e.snapped, Snap::Index(_)) && e.snap_distance <= 1e-3)
        .count();
    let ties = ends.iter().filter(|e| matches!(e.snapped, Snap::Tie(..))).count();
    Ok(vec![
        Measure::at_least("snap_fraction", snapped as f64 / n as f64, 0.999),
        Measure::below("tie_fraction", ties as f64 / n as f64, 1e-3),
        Measure::below("seconds", elapsed, cfg.memorization_time_limit),
        Measure::info("threads", exec::current_threads() as f64),
    ])
}

fn check_single_point(cfg: &SuiteConfig) -> Result<Vec<Measure>> {
    let y = sample_standard_gaussian(RngSpec::new(cfg.seed, 20), 3, 1)?.column(0) * 4.0;
    let data = DataMatrix::new(DMatrix::from_column_slice(3, 1, y.as_slice()))?;
    let field = OptimalField::ot(data);
    let starts = sample_standard_gaussian(RngSpec::new(cfg.seed, 21), 3, 20)?;
    let mut worst: f64 = 0.0;
    for grid in [make_grid(GridKind::Uniform, 100, 1e-4)?, make_grid(GridKind::Geometric, 200, 1e-4)?] {
        for x0 in starts.column_iter() {
            let x0 = x0.into_owned();
            let traj = integrate_ode(&field, &x0, &grid, Method::Rk4)?;
            for (k, &t) in traj.times.iter().enumerate() {
                let exact = &x0 * (1.0 - t) + &y * t;
                worst = worst.max((traj.state(k) - exact).amax());
            }
        }
    }
    Ok(vec![Measure::below("max_node_error", worst, 1e-10)])
}

fn check_concentration(cfg: &SuiteConfig) -> Result<Vec<Measure>> {
    let data = sparse_fixture(cfg.seed)?;
    let m = min_separation(&data)?;
    let mut excess = f64::NEG_INFINITY;
    for (a, &t) in [0.5, 0.7, 0.9, 0.99].iter().enumerate() {
        for (b, &tau) in [0.9, 0.99].iter().enumerate() {
            let rng = RngSpec::new(cfg.seed, 30).fork((a * 2 + b) as u64);
            let (p, se) = estimate_nonconcentration(t, tau, &data, cfg.bound_samples, rng)?;
            let bound = concentration_bound(t, tau, m, data.len())?;
            excess = excess.max(p - 3.0 * se - bound);
        }
    }
    Ok(vec![
        Measure::at_most("max_mc_minus_3se_minus_bound", excess, 0.0),
        Measure::within("bound_t0.9_tau0.99_M10_N6", concentration_bound(0.9, 0.99, 10.0, 6)?, 0.8251, 1e-3),
        Measure::info("min_separation", m),
    ])
}

/// Standard normal starts restricted to `region`, by rejection.
pub fn starts_in_region(region: &ConvexRegion, count: usize, rng: RngSpec) -> Result<DMatrix<f64>> {
    let d = region.dim();
    let cols = exec::map_indexed(count, |j| -> Result<DVector<f64>> {
        let mut r = rng.fork(j as u64).rng();
        for _ in 0..10_000 {
            let x = DVector::from_fn(d, |_, _| standard_normal(&mut r));
            if region_membership(&x, region, MEMBERSHIP_TOL)? {
                return Ok(x);
            }
        }
        Err(crate::Error::InvalidParameter("source region holds almost no Gaussian mass".into()))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_columns(&cols))
}

fn check_hierarchy(cfg: &SuiteConfig) -> Result<Vec<Measure>> {
    let s = interval(-1.0, 1.0)?;
    let leaves = vec![ConvexRegion::from_points(&[vec![-2.0]])?, ConvexRegion::from_points(&[vec![2.0]])?];
    let t_1d = separation_time(&s, &leaves, DEFAULT_BISECTION_TOL)?;

    let data = synthetic::four_clusters(RngSpec::new(cfg.seed, 12), 30, 0.5)?;
    let spec = HierarchySpec::four_clusters(&data, 30)?;
    let t1 = separation_time(&spec.source, &spec.group_hulls(), DEFAULT_BISECTION_TOL)?;
    let t2 = separation_time(&spec.source, &spec.leaves(), DEFAULT_BISECTION_TOL)?;

    let field = OptimalField::ot(data);
    let grid = make_grid(GridKind::Uniform, 100, 1e-3)?;
    let x0 = starts_in_region(&spec.source, cfg.confinement_trajectories, RngSpec::new(cfg.seed, 40))?;
    let trajs = exec::map_indexed(x0.ncols(), |j| integrate_ode(&field, &x0.column(j).into_owned(), &grid, Method::Rk4))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (level, t_from) in [(Level::Group, t1 + 0.01), (Level::Leaf, t2 + 0.01)] {
        let start = grid.nodes.iter().position(|&t| t >= t_from).unwrap_or(grid.nodes.len() - 1);
        let cache = BlendCache::new(&spec, level, &grid.nodes[start..])?;
        let reports = exec::map_indexed(trajs.len(), |j| confinement_check_cached(&trajs[j], &cache, start))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let violations = reports.iter().filter(|r| r.violation.is_some()).count();
        let outside = reports.iter().filter(|r| r.out_of_support.is_some()).count();
        out.push((violations, outside));
    }
    Ok(vec![
        Measure::within("t1_interval", t_1d, 1.0 / 3.0, 1e-3),
        Measure::info("t1", t1),
        Measure::info("t2", t2),
        Measure::holds("t1_lt_t2_lt_1", (t2 - t1).min(1.0 - t2), "> 0", t1 < t2 && t2 < 1.0),
        Measure::holds("group_violations", out[0].0 as f64, "= 0", out[0].0 == 0),
        Measure::info("group_out_of_support", out[0].1 as f64),
        Measure::info("leaf_violations", out[1].0 as f64),
        Measure::info("leaf_out_of_support", out[1].1 as f64),
    ])
}

fn check_optimal_identity(cfg: &SuiteConfig) -> Result<Vec<Measure>> {
    let (data, basis) = subspace_fixture(cfg.seed, 100, 20)?;
    let mut offset = DVector::zeros(basis.rank());
    offset[0] = cfg.perturb_optimal;
    let osd = OsdNet::new(
        basis.clone(),
        DiagonalField::Optimal,
        PerturbedSubspace {
            inner: OptimalSubspace::new(&basis),
            offset,
        },
    )?;
    let n = cfg.identity_points;
    let errs = exec::map_indexed(n, |j| -> Result<f64> {
        let mut r = RngSpec::new(cfg.seed, 50).fork(j as u64).rng();
        let t = 0.99 * rand::Rng::random::<f64>(&mut r);
        let i = rand::Rng::random_range(&mut r, 0..data.len());
        let x = DVector::from_fn(data.dim(), |k, _| t * data.point(i)[k] + (1.0 - t) * standard_normal(&mut r));
        let exact = optimal_velocity(&x, t, &data, &OtSchedule)?;
        Ok((crate::field::VelocityField::velocity(&osd, &x, t) - exact).amax())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let worst = errs.into_iter().fold(0.0, f64::max);
    Ok(vec![Measure::below("max_abs_error", worst, 1e-9)])
}

fn check_loss_reduction(cfg: &SuiteConfig) -> Result<Vec<Measure>> {
    let (data, basis) = subspace_fixture(cfg.seed, 100, 20)?;
    let off = basis.off_dim() as f64;
    let mut out = Vec::new();
    for (k, c) in [0.0, 0.5, -1.5].into_iter().enumerate() {
        let o = DiagonalField::Constant { value: c };
        let mc = McSpec::new(cfg.loss_samples, 0.0, RngSpec::new(cfg.seed, 60).fork(k as u64))?;
        let (mean, se) = loss_o_mc(&o, &basis, &data, &mc)?;
        let exact = loss_o_exact(&o, basis.off_dim(), 0.0, DEFAULT_PANELS)?;
        let closed = (c * c / 3.0 + c + 1.0) * off;
        out.push(Measure::at_most(&format!("mc_gap_in_se_c{c}"), (mean - exact).abs() / se, 3.0));
        out.push(Measure::at_most(&format!("exact_vs_closed_c{c}"), (exact - closed).abs(), 1e-9));
    }
    Ok(out)
}

fn check_gradient_flow(_cfg: &SuiteConfig) -> Result<Vec<Measure>> {
    let mut out = Vec::new();
    for (scale, dim) in [(1.0, 2), (1000.0, 8)] {
        let emb = EmbeddingConfig::new(scale, 10000.0, dim)?;
        let q = compute_quadratic_data(&emb, DEFAULT_PANELS)?;
        let k0 = DVector::zeros(dim);
        let tau = 100.0;
        let h = 1e-4;
        let flow = kappa_flow(tau, &k0, &q)?;
        let euler = kappa_euler(&k0, &q, h, (tau / h).round() as usize);
        let lim = kappa_limit(&q)?;
        let residual = (&q.a * &lim + &q.b).norm();
        let a_inv_e = q.a.clone().lu().solve(&q.e).ok_or(crate::Error::IllConditioned {
            condition: f64::INFINITY,
        })?;
        let oracle = (-q.b.dot(&a_inv_e)).exp();
        let factor = match diagonal_exponential(&DiagonalField::shared(emb, &lim)?, DEFAULT_PANELS)? {
            ExpFactor::Shared(f) => f,
            ExpFactor::PerEntry(v) => v[0],
        };
        let tag = format!("s{scale}_dim{dim}");
        out.push(Measure::below(&format!("flow_vs_euler_{tag}"), (flow - euler).amax(), 1e-5));
        out.push(Measure::below(&format!("limit_residual_{tag}"), residual, 1e-10));
        out.push(Measure::below(&format!("limit_factor_error_{tag}"), (factor - oracle).abs(), 1e-8));
    }
    Ok(out)
}

fn check_embedding(_cfg: &SuiteConfig) -> Result<Vec<Measure>> {
    let mut out = Vec::new();
    for dim in [32, 64, 128, 256] {
        let err = |s: f64| -> Result<f64> {
            let emb = EmbeddingConfig::new(s, 10000.0, dim)?;
            let q = compute_quadratic_data(&emb, DEFAULT_PANELS)?;
            let (k, _) = kappa_limit_pinv(&q, DEFAULT_PINV_RCOND);
            Ok(embedding_fit_error(&k, &emb, 0.9, DEFAULT_PANELS))
        };
        let (e1, e1000) = (err(1.0)?, err(1000.0)?);
        out.push(Measure::info(&format!("err_s1_dim{dim}"), e1));
        out.push(Measure::below(&format!("err_s1000_dim{dim}"), e1000, e1));
    }
    Ok(out)
}

fn check_offsubspace_training(cfg: &SuiteConfig) -> Result<Vec<Measure>> {
    let (_, basis) = subspace_fixture(cfg.seed, 100, 20)?;
    let c = cfg.offsubspace.clone();
    let start = Instant::now();
    let mut trainer = OffsubspaceTrainer::new(&basis, c.clone(), None)?;
    trainer.run_to(c.train.epochs, |_| Ok(()))?;
    let elapsed = start.elapsed().as_secs_f64();
    let means: Vec<f64> = trainer
        .history
        .iter()
        .filter(|m| m.epoch > 0)
        .filter_map(|m| m.off_norm_mean)
        .collect();
    let decreasing = means.len() >= 2 && means.windows(2).all(|w| w[1] < w[0]);
    let final_mean = *means.last().unwrap_or(&f64::NAN);
    let scale = chi_mean(basis.off_dim());
    let q = &trainer.quad;
    let limit = scale * kappa_limit_pinv(q, DEFAULT_PINV_RCOND).0.dot(&q.e).exp();
    // expected SGD step is lr·(Aκ + b), i.e. Euler on the gradient flow with h = lr/2
    let gd = kappa_euler(&DVector::zeros(c.emb.dim), q, 0.5 * c.train.learning_rate, c.train.epochs);
    let finite = scale * generation_factor(&DiagonalField::shared(c.emb, &gd)?, c.gen_epsilon)?.abs();
    let reference = match cfg.off_reference {
        OffReference::Limit => limit,
        OffReference::FiniteTime => finite,
    };
    let ratio = final_mean / reference;
    let mut out = vec![Measure::holds("checkpoint_means_decreasing", means.len() as f64, "strictly decreasing", decreasing)];
    for (k, m) in means.iter().enumerate() {
        out.push(Measure::info(&format!("mean_{}", k + 1), *m));
    }
    out.push(Measure::info("limit_prediction", limit));
    out.push(Measure::info("finite_time_prediction", finite));
    out.push(Measure::holds(
        match cfg.off_reference {
            OffReference::Limit => "final_over_limit",
            OffReference::FiniteTime => "final_over_finite_time",
        },
        ratio,
        "within x2",
        (0.5..=2.0).contains(&ratio),
    ));
    out.push(Measure::below("seconds", elapsed, cfg.offsubspace_time_limit));
    Ok(out)
}

fn check_subspace_training(cfg: &SuiteConfig) -> Result<Vec<Measure>> {
    let (_, basis) = subspace_fixture(cfg.seed, 20, 20)?;
    let c = cfg.subspace.clone();
    let mut trainer = SubspaceTrainer::new(&basis, c.clone(), None)?;
    trainer.run_to(c.train.epochs, |_| Ok(()))?;
    let h = &trainer.history;
    let mse: Vec<f64> = h.iter().map(|m| m.mse.unwrap_or(f64::NAN)).collect();
    let loss: Vec<f64> = h.iter().map(|m| m.loss).collect();
    let rho = stats::spearman(&mse, &loss);
    let quarter = (c.train.epochs / 4).max(1);
    let nearest: Vec<f64> = h
        .iter()
        .filter(|m| m.epoch > 0 && m.epoch % quarter == 0)
        .filter_map(|m| m.nearest_mean)
        .collect();
    let decreasing = nearest.len() >= 2 && nearest.windows(2).all(|w| w[1] < w[0]);
    let mut out = vec![
        Measure::above("spearman_mse_loss", rho, 0.8),
        Measure::holds("nearest_distance_decreasing", nearest.len() as f64, "strictly decreasing", decreasing),
    ];
    for (k, v) in nearest.iter().enumerate() {
        out.push(Measure::info(&format!("nearest_{}", k + 1), *v));
    }
    out.push(Measure::info("final_mse", *mse.last().unwrap_or(&f64::NAN)));
    out.push(Measure::info("final_loss", *loss.last().unwrap_or(&f64::NAN)));
    Ok(out)
}

fn check_perturbation(cfg: &SuiteConfig) -> Result<Vec<Measure>> {
    let data = synthetic::unit_cube_subspace(RngSpec::new(cfg.seed, 70), 10, 6, 2)?;
    let basis = svd_decompose(&data, DEFAULT_RANK_TOL)?;
    let eps = 0.1;
    let grid = make_grid(GridKind::Uniform, 100, eps)?;
    let drift = OsdNet::new(basis.clone(), DiagonalField::Constant { value: 0.0 }, OptimalSubspace::new(&basis))?;

    let n = cfg.sde_realizations;
    let x0 = sample_standard_gaussian(RngSpec::new(cfg.seed, 71), data.dim(), n)?;
    let sigmas = [0.01, 0.02, 0.04];
    let per = exec::map_indexed(n, |j| -> Result<[f64; 3]> {
        let x = x0.column(j).into_owned();
        let reference = integrate_ode_final(&drift, &x, &grid, Method::Euler)?;
        let mut dev = [0.0; 3];
        for (k, &s) in sigmas.iter().enumerate() {
            let noisy = integrate_sde(&drift, s, &x, &grid, RngSpec::new(cfg.seed, 72).fork(j as u64))?;
            dev[k] = (noisy.terminal() - &reference).norm_squared();
        }
        Ok(dev)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let y: Vec<f64> = (0..3).map(|k| stats::mean(&per.iter().map(|d| d[k]).collect::<Vec<_>>())).collect();
    let a: Vec<f64> = sigmas.iter().map(|s| s * s).collect();
    let b: Vec<f64> = sigmas.iter().map(|s| s.powi(4)).collect();
    let fit = stats::nonneg_two_term_fit(&a, &b, &y);

    let mut delta = DVector::zeros(basis.rank());
    delta[0] = 0.01;
    let perturbed = OsdNet::new(
        basis.clone(),
        DiagonalField::Constant { value: 0.0 },
        PerturbedSubspace {
            inner: OptimalSubspace::new(&basis),
            offset: delta.clone(),
        },
    )?;
    let samples = sample_marginal(0.5, &data, RngSpec::new(cfg.seed, 73), 32)?;
    let l_hat = lipschitz_estimate(&drift, &samples, &make_grid(GridKind::Uniform, 20, eps)?)?;
    let end = grid.end();
    let rhs = (2.0 * l_hat).exp() * end * end * delta.norm_squared();
    let starts = sample_standard_gaussian(RngSpec::new(cfg.seed, 74), data.dim(), cfg.perturbation_starts)?;
    let ratios = exec::map_indexed(starts.ncols(), |j| -> Result<f64> {
        let x = starts.column(j).into_owned();
        let a = integrate_ode_final(&drift, &x, &grid, Method::Rk4)?;
        let b = integrate_ode_final(&perturbed, &x, &grid, Method::Rk4)?;
        Ok((a - b).norm_squared() / rhs)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let worst = ratios.into_iter().fold(0.0, f64::max);
    Ok(vec![
        Measure::at_least("c2", fit.c2, 0.0),
        Measure::at_least("c3", fit.c3, 0.0),
        Measure::above("r_squared", fit.r_squared, 0.95),
        Measure::info("lipschitz_estimate", l_hat),
        Measure::at_most("max_deviation_over_bound", worst, 1.0),
    ])
}

/// Directional derivative check: `|g·u − FD| / max(|g·u|, |FD|, 1e-6)`.
fn directional_error<F>(f: F, x: &[f64], grad: &[f64], u: &[f64]) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let h = 1e-5;
    let shift = |s: f64| -> Vec<f64> { x.iter().zip(u).map(|(a, b)| a + s * h * b).collect() };
    let fd = (f(&shift(1.0)) - f(&shift(-1.0))) / (2.0 * h);
    let an: f64 = grad.iter().zip(u).map(|(a, b)| a * b).sum();
    (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6)
}

fn unit_direction(n: usize, rng: RngSpec) -> Vec<f64> {
    let mut r = rng.rng();
    let v: Vec<f64> = (0..n).map(|_| standard_normal(&mut r)).collect();
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / norm).collect()
}

fn gradient_probe(kind: usize, probe: RngSpec) -> Result<f64> {
    let activation = if kind % 2 == 0 { Activation::Silu } else { Activation::Tanh };
    let net_cfg = NetConfig {
        sub_dim: 3,
        hidden: 8,
        blocks: 2,
        emb: EmbeddingConfig::new(10.0, 10000.0, 4)?,
        activation,
    };
    let mut net = SubspaceNet::init(net_cfg, probe.with_stream(1))?;
    // nonzero biases so every parameter is exercised
    let mut r = probe.with_stream(2).rng();
    for p in net.params_mut() {
        *p += 0.1 * standard_normal(&mut r);
    }
    let z = sample_standard_gaussian(probe.with_stream(3), 3, 5)?;
    let ts: Vec<f64> = (0..5).map(|k| 0.1 + 0.18 * k as f64).collect();
    let up = sample_standard_gaussian(probe.with_stream(4), 3, 5)?;
    match kind {
        0 => {
            let cache = net.forward_cached(&z, &ts);
            let (g, _) = net.backward(&cache, &up);
            let f = |p: &[f64]| {
                let n = SubspaceNet::from_params(net_cfg, p.to_vec()).unwrap();
                n.forward_cached(&z, &ts).output.dot(&up)
            };
            Ok(directional_error(f, net.params(), &g, &unit_direction(g.len(), probe.with_stream(5))))
        }
        1 => {
            let cache = net.forward_cached(&z, &ts);
            let (_, dz) = net.backward(&cache, &up);
            let f = |p: &[f64]| net.forward_cached(&DMatrix::from_column_slice(3, 5, p), &ts).output.dot(&up);
            Ok(directional_error(f, z.as_slice(), dz.as_slice(), &unit_direction(15, probe.with_stream(5))))
        }
        2 => {
            let data = synthetic::unit_cube_subspace(probe.with_stream(6), 6, 3, 3)?;
            let basis = svd_decompose(&data, DEFAULT_RANK_TOL)?;
            let batch = draw_subspace_batch(&OptimalSubspace::new(&basis), probe.with_stream(7), 20, 1e-2);
            let (_, g) = subspace_loss_grad(&net, &batch, true);
            let g = g.unwrap_or_default();
            let f = |p: &[f64]| subspace_loss_grad(&SubspaceNet::from_params(net_cfg, p.to_vec()).unwrap(), &batch, false).0;
            Ok(directional_error(f, net.params(), &g, &unit_direction(g.len(), probe.with_stream(5))))
        }
        3 | 4 => {
            let data = synthetic::unit_cube_subspace(probe.with_stream(6), 6, 5, 3)?;
            let basis = svd_decompose(&data, DEFAULT_RANK_TOL)?;
            let emb = EmbeddingConfig::new(10.0, 10000.0, 4)?;
            let kappa = DVector::from_column_slice(&unit_direction(4, probe.with_stream(8)));
            let objective = if kind == 3 { Objective::Cfm } else { Objective::Decomposed };
            let mc = McSpec::new(16, 1e-2, probe.with_stream(9))?;
            let nk = kappa.len();
            let build = |p: &[f64]| -> Result<OsdNet<SubspaceNet>> {
                OsdNet::new(
                    basis.clone(),
                    DiagonalField::shared(emb, &DVector::from_column_slice(&p[..nk]))?,
                    SubspaceNet::from_params(net_cfg, p[nk..].to_vec())?,
                )
            };
            let mut x: Vec<f64> = kappa.iter().copied().collect();
            x.extend_from_slice(net.params());
            let g = osd_loss_grad(&build(&x)?, objective, &data, &mc)?;
            let mut gv: Vec<f64> = g.kappa.iter().copied().collect();
            gv.extend(g.net);
            let f = |p: &[f64]| osd_loss_grad(&build(p).unwrap(), objective, &data, &mc).unwrap().loss;
            Ok(directional_error(f, &x, &gv, &unit_direction(x.len(), probe.with_stream(5))))
        }
        5 => {
            let emb = EmbeddingConfig::new(1000.0, 10000.0, 8)?;
            let q = compute_quadratic_data(&emb, 256)?;
            let k = DVector::from_column_slice(&unit_direction(8, probe.with_stream(8)));
            let g = q.gradient(&k);
            let f = |p: &[f64]| q.loss(&DVector::from_column_slice(p));
            Ok(directional_error(f, k.as_slice(), g.as_slice(), &unit_direction(8, probe.with_stream(5))))
        }
        _ => {
            let data = synthetic::unit_cube_subspace(probe.with_stream(6), 20, 6, 2)?;
            let basis = svd_decompose(&data, DEFAULT_RANK_TOL)?;
            let mut c = OffsubspaceConfig::default();
            c.emb = EmbeddingConfig::new(1000.0, 10000.0, 8)?;
            c.panels = 256;
            c.train.batch = 64;
            c.train.eval_samples = 16;
            c.train.rng = probe.with_stream(10);
            let k0 = DVector::from_column_slice(&unit_direction(8, probe.with_stream(8)));
            let mut tr = OffsubspaceTrainer::new(&basis, c, Some(k0.clone()))?;
            let (_, g) = tr.batch_gradient(1)?;
            let u = unit_direction(8, probe.with_stream(5));
            let x = k0.as_slice().to_vec();
            let cell = std::cell::RefCell::new(&mut tr);
            let f = |p: &[f64]| {
                let mut t = cell.borrow_mut();
                t.kappa = p.to_vec();
                t.batch_gradient(1).map(|r| r.0).unwrap_or(f64::NAN)
            };
            Ok(directional_error(f, &x, &g, &u))
        }
    }
}

fn check_gradients(cfg: &SuiteConfig) -> Result<Vec<Measure>> {
    const KINDS: [&str; 7] = ["net_params", "net_input", "subspace_loss", "cfm_loss", "decomposed_loss", "reduced_loss", "offsubspace_batch"];
    let errs = (0..cfg.gradient_probes)
        .map(|p| gradient_probe(p % KINDS.len(), RngSpec::new(cfg.seed, 80).fork(p as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (k, name) in KINDS.iter().enumerate() {
        let worst = errs.iter().skip(k).step_by(KINDS.len()).copied().fold(f64::NAN, f64::max);
        if !worst.is_nan() {
            out.push(Measure::at_most(&format!("max_rel_error_{name}"), worst, 1e-4));
        }
    }
    out.push(Measure::info("probes", errs.len() as f64));
    Ok(out)
}
