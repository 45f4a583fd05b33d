//! ODE/SDE integration of generation paths, endpoint snapping and flow-map derivatives.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, DataMatrix};
use crate::error::{invalid, Error, Result};
use crate::field::VelocityField;
use crate::rng::{standard_normal, RngSpec};

pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DEFAULT_SNAP_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Uniform,
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    #[default]
    Rk4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub nodes: Vec<f64>,
    pub epsilon: f64,
    pub kind: GridKind,
}

impl TimeGrid {
    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn end(&self) -> f64 {
        *self.nodes.last().unwrap()
    }
}

/// Uniform: `t_k = k(1−ε)/steps`. Geometric: `1 − t_k = ε^{k/steps}`, so gaps to 1 shrink by
/// the constant ratio `ε^{1/steps}`.
pub fn make_grid(kind: GridKind, steps: usize, epsilon: f64) -> Result<TimeGrid> {
    if steps == 0 {
        return Err(invalid("grid needs at least one step"));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(invalid(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    let end = 1.0 - epsilon;
    let mut nodes: Vec<f64> = match kind {
        GridKind::Uniform => (0..=steps).map(|k| k as f64 * end / steps as f64).collect(),
        GridKind::Geometric => (0..=steps)
            .map(|k| 1.0 - epsilon.powf(k as f64 / steps as f64))
            .collect(),
    };
    nodes[0] = 0.0;
    nodes[steps] = end;
    if nodes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("grid nodes are not strictly increasing at double precision"));
    }
    Ok(TimeGrid { nodes, epsilon, kind })
}

/// Uniform grid on an arbitrary interval `[s, t]`.
pub fn interval_grid(s: f64, t: f64, steps: usize) -> Result<TimeGrid> {
    if steps == 0 || !(t > s) {
        return Err(invalid(format!("need s < t and steps >= 1 (s = {s}, t = {t})")));
    }
    let mut nodes: Vec<f64> = (0..=steps)
        .map(|k| s + (t - s) * k as f64 / steps as f64)
        .collect();
    nodes[steps] = t;
    Ok(TimeGrid {
        nodes,
        epsilon: 1.0 - t,
        kind: GridKind::Uniform,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Snap {
    /// Not snapped (plain integration).
    Unresolved,
    Index(usize),
    /// The two nearest data points are equally close within the snap tolerance.
    Tie(usize, usize),
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// `d × #nodes`.
    pub states: DMatrix<f64>,
    /// Snapped data point; `None` when unresolved or tied.
    pub endpoint: Option<DVector<f64>>,
    pub snapped: Snap,
    /// State after closing the last gap `ε` with one Euler step (only set by [`generate`]).
    pub closure: Option<DVector<f64>>,
    /// Distance from the closure state to the snapped data point.
    pub snap_distance: Option<f64>,
}

impl Trajectory {
    pub fn terminal(&self) -> DVector<f64> {
        self.states.column(self.states.ncols() - 1).into_owned()
    }

    pub fn state(&self, k: usize) -> DVector<f64> {
        self.states.column(k).into_owned()
    }

    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    /// CSV with header `t,x0,...,x{d−1}`, one row per node.
    pub fn to_csv_string(&self) -> String {
        let d = self.dim();
        let mut s = String::from("t");
        for k in 0..d {
            s.push_str(&format!(",x{k}"));
        }
        s.push('\n');
        for (j, t) in self.times.iter().enumerate() {
            s.push_str(&fmt_f64(*t));
            for k in 0..d {
                s.push(',');
                s.push_str(&fmt_f64(self.states[(k, j)]));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }
}

fn check_field(field: &dyn VelocityField, x0: &DVector<f64>) -> Result<()> {
    if field.dim() != x0.len() {
        return Err(Error::Shape(format!(
            "field dimension {} does not match start point dimension {}",
            field.dim(),
            x0.len()
        )));
    }
    Ok(())
}

fn step(field: &dyn VelocityField, x: &DVector<f64>, t: f64, h: f64, method: Method) -> DVector<f64> {
    match method {
        Method::Euler => x + field.velocity(x, t) * h,
        Method::Rk4 => {
            let k1 = field.velocity(x, t);
            let k2 = field.velocity(&(x + &k1 * (0.5 * h)), t + 0.5 * h);
            let k3 = field.velocity(&(x + &k2 * (0.5 * h)), t + 0.5 * h);
            let k4 = field.velocity(&(x + &k3 * h), t + h);
            x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
        }
    }
}

fn finite_or_fail(x: &DVector<f64>, node: usize, t: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { node, t })
    }
}

/// Explicit integration of `dx/dt = v(x, t)` over the grid, keeping every node.
pub fn integrate_ode(
    field: &dyn VelocityField,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    method: Method,
) -> Result<Trajectory> {
    check_field(field, x0)?;
    let n = grid.nodes.len();
    let mut states = DMatrix::zeros(x0.len(), n);
    states.set_column(0, x0);
    let mut x = x0.clone();
    finite_or_fail(&x, 0, grid.nodes[0])?;
    for k in 0..n - 1 {
        let (t, h) = (grid.nodes[k], grid.nodes[k + 1] - grid.nodes[k]);
        x = step(field, &x, t, h, method);
        finite_or_fail(&x, k + 1, grid.nodes[k + 1])?;
        states.set_column(k + 1, &x);
    }
    Ok(Trajectory {
        times: grid.nodes.clone(),
        states,
        endpoint: None,
        snapped: Snap::Unresolved,
        closure: None,
        snap_distance: None,
    })
}

/// Terminal state only; no per-node storage.
pub fn integrate_ode_final(
    field: &dyn VelocityField,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    method: Method,
) -> Result<DVector<f64>> {
    check_field(field, x0)?;
    let mut x = x0.clone();
    for k in 0..grid.nodes.len() - 1 {
        let (t, h) = (grid.nodes[k], grid.nodes[k + 1] - grid.nodes[k]);
        x = step(field, &x, t, h, method);
        finite_or_fail(&x, k + 1, grid.nodes[k + 1])?;
    }
    Ok(x)
}

/// Euler–Maruyama for `dx = v(x, t) dt + σ dW`. With `σ = 0` no noise is drawn and the result
/// equals Euler integration bit for bit.
pub fn integrate_sde(
    drift: &dyn VelocityField,
    sigma: f64,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    rng: RngSpec,
) -> Result<Trajectory> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("sigma must be finite and nonnegative, got {sigma}")));
    }
    check_field(drift, x0)?;
    let n = grid.nodes.len();
    let d = x0.len();
    let mut states = DMatrix::zeros(d, n);
    states.set_column(0, x0);
    let mut x = x0.clone();
    let mut r = rng.rng();
    for k in 0..n - 1 {
        let (t, h) = (grid.nodes[k], grid.nodes[k + 1] - grid.nodes[k]);
        x = step(drift, &x, t, h, Method::Euler);
        if sigma > 0.0 {
            let scale = sigma * h.sqrt();
            for v in x.iter_mut() {
                *v += scale * standard_normal(&mut r);
            }
        }
        finite_or_fail(&x, k + 1, grid.nodes[k + 1])?;
        states.set_column(k + 1, &x);
    }
    Ok(Trajectory {
        times: grid.nodes.clone(),
        states,
        endpoint: None,
        snapped: Snap::Unresolved,
        closure: None,
        snap_distance: None,
    })
}

/// Closes the last gap with one Euler step and snaps to the nearest data point, flagging a
/// tie when the two smallest distances differ by less than `snap_tol` times their mean.
pub fn snap_endpoint(
    field: &dyn VelocityField,
    terminal: &DVector<f64>,
    t_end: f64,
    data: &DataMatrix,
    snap_tol: f64,
) -> (DVector<f64>, Snap, f64) {
    let closure = terminal + field.velocity(terminal, t_end) * (1.0 - t_end);
    let (snap, dist) = classify(&closure, data, snap_tol);
    (closure, snap, dist)
}

pub fn classify(x: &DVector<f64>, data: &DataMatrix, snap_tol: f64) -> (Snap, f64) {
    let mut d: Vec<(f64, usize)> = data
        .matrix()
        .column_iter()
        .enumerate()
        .map(|(i, y)| ((x - y).norm(), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0));
    if d.len() >= 2 && (d[1].0 - d[0].0) < snap_tol * 0.5 * (d[0].0 + d[1].0) {
        let (a, b) = (d[0].1.min(d[1].1), d[0].1.max(d[1].1));
        return (Snap::Tie(a, b), d[0].0);
    }
    (Snap::Index(d[0].1), d[0].0)
}

/// Integrates to `1−ε`, then resolves the endpoint against the data.
pub fn generate(
    field: &dyn VelocityField,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    data: &DataMatrix,
    snap_tol: f64,
    method: Method,
) -> Result<Trajectory> {
    if data.dim() != x0.len() {
        return Err(Error::Shape("data and start point dimensions differ".into()));
    }
    let mut traj = integrate_ode(field, x0, grid, method)?;
    let (closure, snap, dist) = snap_endpoint(field, &traj.terminal(), grid.end(), data, snap_tol);
    traj.endpoint = match snap {
        Snap::Index(i) => Some(data.point(i).into_owned()),
        _ => None,
    };
    traj.snapped = snap;
    traj.closure = Some(closure);
    traj.snap_distance = Some(dist);
    Ok(traj)
}

/// Endpoint classification only (no stored states), for large batches.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedEndpoint {
    pub terminal: DVector<f64>,
    pub closure: DVector<f64>,
    pub snapped: Snap,
    pub snap_distance: f64,
}

pub fn generate_endpoint(
    field: &dyn VelocityField,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    data: &DataMatrix,
    snap_tol: f64,
    method: Method,
) -> Result<GeneratedEndpoint> {
    let terminal = integrate_ode_final(field, x0, grid, method)?;
    let (closure, snapped, snap_distance) = snap_endpoint(field, &terminal, grid.end(), data, snap_tol);
    Ok(GeneratedEndpoint {
        terminal,
        closure,
        snapped,
        snap_distance,
    })
}

/// Flow map `φ_{s,t}(x)` by RK4 with `steps` uniform steps.
pub fn flow_map(field: &dyn VelocityField, x: &DVector<f64>, s: f64, t: f64, steps: usize) -> Result<DVector<f64>> {
    integrate_ode_final(field, x, &interval_grid(s, t, steps)?, Method::Rk4)
}

/// Default finite-difference step `1e-4·(1 + ‖x‖)`.
pub fn fd_step(x: &DVector<f64>) -> f64 {
    1e-4 * (1.0 + x.norm())
}

/// Central-difference Jacobian of `x ↦ φ_{s,t}(x)`.
pub fn flow_jacobian_fd(
    field: &dyn VelocityField,
    x: &DVector<f64>,
    s: f64,
    t: f64,
    h: f64,
    steps: usize,
) -> Result<DMatrix<f64>> {
    if !(h > 0.0) || !(s < t) {
        return Err(invalid("flow Jacobian needs h > 0 and s < t"));
    }
    let d = x.len();
    let mut jac = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (flow_map(field, &xp, s, t, steps)? - flow_map(field, &xm, s, t, steps)?) / (2.0 * h);
        jac.set_column(j, &col);
    }
    Ok(jac)
}

/// Central-difference Hessians of the flow map: entry `k` is `∇²(φ_{s,t})_k`.
pub fn flow_hessian_fd(
    field: &dyn VelocityField,
    x: &DVector<f64>,
    s: f64,
    t: f64,
    h: f64,
    steps: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let map = |p: &DVector<f64>| flow_map(field, p, s, t, steps);
    hessian_fd(&map, x, h)
}

fn hessian_fd<F>(f: &F, x: &DVector<f64>, h: f64) -> Result<Vec<DMatrix<f64>>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let d = x.len();
    let f0 = f(x)?;
    let m = f0.len();
    let mut hess = vec![DMatrix::zeros(d, d); m];
    let shifted = |i: usize, si: f64, j: usize, sj: f64| {
        let mut p = x.clone();
        p[i] += si * h;
        p[j] += sj * h;
        f(&p)
    };
    for i in 0..d {
        let fp = shifted(i, 1.0, i, 0.0)?;
        let fm = shifted(i, -1.0, i, 0.0)?;
        let diag = (&fp - &f0 * 2.0 + &fm) / (h * h);
        for k in 0..m {
            hess[k][(i, i)] = diag[k];
        }
        for j in i + 1..d {
            let pp = shifted(i, 1.0, j, 1.0)?;
            let pm = shifted(i, 1.0, j, -1.0)?;
            let mp = shifted(i, -1.0, j, 1.0)?;
            let mm = shifted(i, -1.0, j, -1.0)?;
            let mixed = (pp - pm - mp + mm) / (4.0 * h * h);
            for k in 0..m {
                hess[k][(i, j)] = mixed[k];
                hess[k][(j, i)] = mixed[k];
            }
        }
    }
    Ok(hess)
}

/// Frobenius norm of a third-order tensor stored as a list of matrices.
pub fn tensor_frobenius(h: &[DMatrix<f64>]) -> f64 {
    h.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt()
}

/// Central-difference Jacobian of the field in `x` at fixed `t`.
pub fn field_jacobian_fd(field: &dyn VelocityField, x: &DVector<f64>, t: f64, h: f64) -> DMatrix<f64> {
    let d = x.len();
    let mut jac = DMatrix::zeros(field.dim(), d);
    for j in 0..d {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        jac.set_column(j, &((field.velocity(&xp, t) - field.velocity(&xm, t)) / (2.0 * h)));
    }
    jac
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().max()
}

/// Max over sampled `(x, t)` of the spectral norm of the field's finite-difference Jacobian.
pub fn lipschitz_estimate(field: &dyn VelocityField, region_samples: &DMatrix<f64>, t_grid: &TimeGrid) -> Result<f64> {
    if region_samples.ncols() < 2 {
        return Err(invalid("lipschitz_estimate needs at least two samples"));
    }
    let per_sample = crate::exec::map_indexed(region_samples.ncols(), |j| {
        let x = region_samples.column(j).into_owned();
        let h = fd_step(&x);
        t_grid
            .nodes
            .iter()
            .map(|&t| spectral_norm(&field_jacobian_fd(field, &x, t, h)))
            .fold(0.0, f64::max)
    });
    Ok(per_sample.into_iter().fold(0.0, f64::max))
}

/// Max over sampled `(x, t)` of the Frobenius norm of the field's finite-difference Hessian.
pub fn hessian_estimate(field: &dyn VelocityField, region_samples: &DMatrix<f64>, t_grid: &TimeGrid) -> Result<f64> {
    if region_samples.ncols() < 2 {
        return Err(invalid("hessian_estimate needs at least two samples"));
    }
    let per_sample = crate::exec::map_indexed(region_samples.ncols(), |j| {
        let x = region_samples.column(j).into_owned();
        let h = 1e-3 * (1.0 + x.norm());
        t_grid
            .nodes
            .iter()
            .map(|&t| {
                let f = |p: &DVector<f64>| Ok(field.velocity(p, t));
                hessian_fd(&f, &x, h).map(|hs| tensor_frobenius(&hs)).unwrap_or(f64::NAN)
            })
            .fold(0.0, f64::max)
    });
    Ok(per_sample.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ConstantField, LinearField, OptimalField, ZeroField};
    use crate::rng::sample_standard_gaussian;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn uniform_grid_spacing() {
        let g = make_grid(GridKind::Uniform, 100, 1e-4).unwrap();
        assert_eq!(g.nodes.len(), 101);
        for w in g.nodes.windows(2) {
            assert!((w[1] - w[0] - (1.0 - 1e-4) / 100.0).abs() < 1e-15);
        }
    }

    #[test]
    fn geometric_grid_examples() {
        let g = make_grid(GridKind::Geometric, 1, 0.5).unwrap();
        assert_eq!(g.nodes, vec![0.0, 0.5]);
        let g = make_grid(GridKind::Geometric, 50, 1e-6).unwrap();
        assert_eq!(g.nodes[0], 0.0);
        assert_eq!(*g.nodes.last().unwrap(), 1.0 - 1e-6);
        let gaps: Vec<f64> = g.nodes.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(gaps.last().unwrap() < &gaps[0]);
        // constant ratio of remaining gaps to 1
        let r = (1e-6f64).powf(1.0 / 50.0);
        for k in 0..50 {
            let ratio = (1.0 - g.nodes[k + 1]) / (1.0 - g.nodes[k]);
            assert!((ratio - r).abs() < 1e-8, "k={k} ratio={ratio}");
        }
    }

    #[test]
    fn grid_rejects_bad_parameters() {
        assert!(make_grid(GridKind::Uniform, 0, 0.1).is_err());
        assert!(make_grid(GridKind::Uniform, 10, 0.0).is_err());
        assert!(make_grid(GridKind::Geometric, 10, 1.0).is_err());
    }

    #[test]
    fn single_point_flow_is_exact() {
        let y = v(&[2.0, -1.0]);
        let data = DataMatrix::from_points(&[vec![2.0, -1.0]]).unwrap();
        let field = OptimalField::ot(data);
        let x0 = v(&[0.3, 0.8]);
        let grid = make_grid(GridKind::Uniform, 100, 1e-4).unwrap();
        let traj = integrate_ode(&field, &x0, &grid, Method::Rk4).unwrap();
        for (k, &t) in traj.times.iter().enumerate() {
            let exact = &x0 * (1.0 - t) + &y * t;
            assert!((traj.state(k) - exact).amax() < 1e-10);
        }
    }

    #[test]
    fn symmetric_midpoint_is_stationary_and_tied() {
        let data = DataMatrix::from_points(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let field = OptimalField::ot(data.clone());
        let x0 = v(&[0.0, 0.0]);
        let grid = make_grid(GridKind::Geometric, 200, 1e-4).unwrap();
        let traj = generate(&field, &x0, &grid, &data, DEFAULT_SNAP_TOL, Method::Rk4).unwrap();
        assert!(traj.states.column_iter().all(|c| c.amax() == 0.0));
        assert_eq!(traj.snapped, Snap::Tie(0, 1));
        assert!(traj.endpoint.is_none());
    }

    #[test]
    fn single_point_generate_snaps_exactly() {
        let data = DataMatrix::from_points(&[vec![2.0, 0.0]]).unwrap();
        let field = OptimalField::ot(data.clone());
        let grid = make_grid(GridKind::Geometric, 200, 1e-4).unwrap();
        let traj = generate(&field, &v(&[-1.0, 3.0]), &grid, &data, DEFAULT_SNAP_TOL, Method::Rk4).unwrap();
        assert_eq!(traj.snapped, Snap::Index(0));
        assert_eq!(traj.endpoint.unwrap(), v(&[2.0, 0.0]));
    }

    #[test]
    fn sde_with_zero_sigma_equals_euler() {
        let data = DataMatrix::from_points(&[vec![1.0, 2.0], vec![-3.0, 0.0]]).unwrap();
        let field = OptimalField::ot(data);
        let grid = make_grid(GridKind::Uniform, 50, 1e-2).unwrap();
        let x0 = v(&[0.4, -0.7]);
        let a = integrate_ode(&field, &x0, &grid, Method::Euler).unwrap();
        let b = integrate_sde(&field, 0.0, &x0, &grid, RngSpec::new(1, 2)).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn wiener_endpoint_variance() {
        let grid = make_grid(GridKind::Uniform, 10, 1e-2).unwrap();
        let n = 20_000;
        let base = RngSpec::new(5, 0);
        let ends: Vec<f64> = (0..n)
            .map(|i| {
                integrate_sde(&ZeroField(1), 1.0, &v(&[0.0]), &grid, base.fork(i as u64))
                    .unwrap()
                    .terminal()[0]
            })
            .collect();
        let var = crate::stats::variance(&ends);
        // variance of the sample variance for a Gaussian: 2σ⁴/(n−1)
        let se = (2.0 * 0.99f64.powi(2) / (n as f64 - 1.0)).sqrt();
        assert!((var - 0.99).abs() < 3.0 * se, "var {var}");
    }

    #[test]
    fn non_finite_state_reports_node() {
        let f = crate::field::FnField::new(1, |x: &DVector<f64>, t: f64| {
            if t > 0.5 {
                x * f64::INFINITY
            } else {
                x.clone()
            }
        });
        let grid = make_grid(GridKind::Uniform, 10, 0.1).unwrap();
        match integrate_ode(&f, &v(&[1.0]), &grid, Method::Euler) {
            Err(Error::NonFiniteState { node, .. }) => assert_eq!(node, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jacobian_examples() {
        let data = DataMatrix::from_points(&[vec![2.0, -1.0]]).unwrap();
        let field = OptimalField::ot(data);
        let x = v(&[0.5, 0.5]);
        let t = 0.7;
        let j = flow_jacobian_fd(&field, &x, 0.0, t, fd_step(&x), 100).unwrap();
        assert!((j - DMatrix::identity(2, 2) * (1.0 - t)).amax() < 1e-6);
        let j0 = flow_jacobian_fd(&ZeroField(2), &x, 0.0, t, fd_step(&x), 10).unwrap();
        assert!((j0 - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn jacobian_bounded_by_lipschitz_growth() {
        let data = DataMatrix::from_points(&[vec![3.0, 0.0], vec![-3.0, 1.0], vec![0.0, 4.0]]).unwrap();
        let field = OptimalField::ot(data);
        let samples = sample_standard_gaussian(RngSpec::new(2, 0), 2, 8).unwrap();
        let grid = make_grid(GridKind::Uniform, 10, 0.5).unwrap();
        let l = lipschitz_estimate(&field, &samples, &grid).unwrap();
        for c in samples.column_iter() {
            let x = c.into_owned();
            let j = flow_jacobian_fd(&field, &x, 0.0, 0.5, fd_step(&x), 100).unwrap();
            assert!(spectral_norm(&j) <= (l * 0.5).exp() + 1e-3);
        }
    }

    #[test]
    fn lipschitz_examples() {
        let samples = sample_standard_gaussian(RngSpec::new(1, 0), 3, 5).unwrap();
        let grid = make_grid(GridKind::Uniform, 4, 0.1).unwrap();
        let c = lipschitz_estimate(&ConstantField(v(&[1.0, 2.0, 3.0])), &samples, &grid).unwrap();
        assert!(c < 1e-6);
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 0.0, -1.0, 0.5, 3.0, 0.0, 1.0]);
        let l = lipschitz_estimate(&LinearField(a.clone()), &samples, &grid).unwrap();
        assert!((l - spectral_norm(&a)).abs() < 1e-4);

        let eps = 1e-2;
        let data = DataMatrix::from_points(&[vec![1.0, 1.0, 1.0]]).unwrap();
        let g = make_grid(GridKind::Geometric, 20, eps).unwrap();
        let l = lipschitz_estimate(&OptimalField::ot(data), &samples, &g).unwrap();
        assert!((l - 1.0 / eps).abs() < 1e-3 / eps);
    }

    #[test]
    fn trajectory_csv_header_and_rows() {
        let grid = make_grid(GridKind::Uniform, 2, 0.5).unwrap();
        let traj = integrate_ode(&ZeroField(2), &v(&[1.0, 2.0]), &grid, Method::Rk4).unwrap();
        let s = traj.to_csv_string();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "t,x0,x1");
        assert_eq!(lines.len(), 4);
        let parsed: Vec<f64> = lines[3].split(',').map(|f| f.parse().unwrap()).collect();
        assert_eq!(parsed, vec![0.5, 1.0, 2.0]);
    }
}
