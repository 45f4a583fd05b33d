//! Weight-concentration bound and its Monte-Carlo estimate; convex regions, blended
//! regions `(1−t)S + tC`, separation times and trajectory confinement.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::dynamics::Trajectory;
use crate::error::{invalid, Error, Result};
use crate::exec;
use crate::paths::{weights_into, OtSchedule};
use crate::rng::{standard_normal, RngSpec};

pub const DEFAULT_DISTANCE_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_ITER: usize = 10_000;
pub const DEFAULT_GENERATOR_CAP: usize = 100_000;
pub const DEFAULT_BISECTION_TOL: f64 = 1e-4;
pub const BALL_POLYGON_VERTICES: usize = 64;

/// Upper bound on `P(max_i w_t(x)_i ≤ τ)` for data with pairwise separation at least `M`:
/// `(1/√(2π))·((1−t)/t)·(1/M)·ln(τ(N−1)/(1−τ))·N(N−1)`. It may exceed 1.
pub fn concentration_bound(t: f64, tau: f64, m: f64, n: usize) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::TimeOutOfRange { t, range: "(0, 1)" });
    }
    if n < 2 {
        return Err(invalid("concentration bound needs N >= 2"));
    }
    let nf = n as f64;
    if !(tau > 1.0 / nf && tau < 1.0) {
        return Err(invalid(format!("tau must lie in (1/N, 1) = ({}, 1), got {tau}", 1.0 / nf)));
    }
    if !(m > 0.0) {
        return Err(invalid(format!("separation M must be positive, got {m}")));
    }
    let log_term = (tau * (nf - 1.0) / (1.0 - tau)).ln();
    Ok((2.0 * PI).sqrt().recip() * ((1.0 - t) / t) / m * log_term * nf * (nf - 1.0))
}

/// Monte-Carlo frequency of `max w_t(x) ≤ τ` under `x ∼ p_t`, with its binomial standard error.
pub fn estimate_nonconcentration(
    t: f64,
    tau: f64,
    data: &DataMatrix,
    samples: usize,
    rng: RngSpec,
) -> Result<(f64, f64)> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::TimeOutOfRange { t, range: "(0, 1)" });
    }
    if samples == 0 {
        return Err(invalid("need at least one sample"));
    }
    let (d, n) = (data.dim(), data.len());
    let hits: u64 = exec::chunked_reduce(
        samples,
        || 0u64,
        |acc, j| {
            let mut r = rng.fork(j as u64).rng();
            let i = r.random_range(0..n);
            let y = data.point(i);
            let x = DVector::from_fn(d, |k, _| t * y[k] + (1.0 - t) * standard_normal(&mut r));
            let mut w = vec![0.0; n];
            weights_into(&x, t, data, &OtSchedule, &mut w);
            if w.iter().copied().fold(0.0, f64::max) <= tau {
                *acc += 1;
            }
        },
        |a, b| *a += b,
    );
    let p = hits as f64 / samples as f64;
    Ok((p, (p * (1.0 - p) / samples as f64).sqrt()))
}

pub fn min_separation(data: &DataMatrix) -> Result<f64> {
    if data.len() < 2 {
        return Err(invalid("min_separation needs N >= 2"));
    }
    let mut best = f64::INFINITY;
    for i in 0..data.len() {
        for j in i + 1..data.len() {
            best = best.min((data.point(i) - data.point(j)).norm());
        }
    }
    Ok(best)
}

/// Convex hull of the columns of `generators`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexRegion {
    generators: DMatrix<f64>,
}

impl ConvexRegion {
    pub fn new(generators: DMatrix<f64>) -> Result<Self> {
        if generators.nrows() == 0 || generators.ncols() == 0 {
            return Err(invalid("a convex region needs at least one generator"));
        }
        if generators.iter().any(|v| !v.is_finite()) {
            return Err(invalid("region generators must be finite"));
        }
        Ok(Self { generators })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let d = points.first().map(|p| p.len()).unwrap_or(0);
        if points.iter().any(|p| p.len() != d) {
            return Err(invalid("region generators have differing dimensions"));
        }
        Self::new(DMatrix::from_fn(d, points.len(), |i, j| points[j][i]))
    }

    pub fn point(x: &DVector<f64>) -> Self {
        Self {
            generators: DMatrix::from_column_slice(x.len(), 1, x.as_slice()),
        }
    }

    /// A polytope containing the closed ball of radius `r` around `center`: an interval in
    /// 1-D, a circumscribed regular polygon with [`BALL_POLYGON_VERTICES`] vertices in 2-D,
    /// and the cross-polytope `{‖x − c‖₁ ≤ r√d}` otherwise.
    pub fn ball_proxy(center: &DVector<f64>, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(invalid("ball radius must be nonnegative"));
        }
        let d = center.len();
        let g = match d {
            0 => return Err(invalid("ball needs d >= 1")),
            1 => DMatrix::from_row_slice(1, 2, &[center[0] - radius, center[0] + radius]),
            2 => {
                let k = BALL_POLYGON_VERTICES;
                let rc = radius / (PI / k as f64).cos();
                DMatrix::from_fn(2, k, |i, j| {
                    let a = 2.0 * PI * j as f64 / k as f64;
                    center[i] + rc * if i == 0 { a.cos() } else { a.sin() }
                })
            }
            _ => {
                let r = radius * (d as f64).sqrt();
                DMatrix::from_fn(d, 2 * d, |i, j| {
                    center[i] + if j / 2 == i { if j % 2 == 0 { r } else { -r } } else { 0.0 }
                })
            }
        };
        Self::new(g)
    }

    pub fn dim(&self) -> usize {
        self.generators.nrows()
    }

    pub fn generators(&self) -> &DMatrix<f64> {
        &self.generators
    }

    pub fn len(&self) -> usize {
        self.generators.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.generators.ncols() == 0
    }

    pub fn centroid(&self) -> DVector<f64> {
        self.generators.column_mean()
    }

    /// Same hull with redundant generators removed (only in 1-D and 2-D).
    pub fn pruned(&self) -> ConvexRegion {
        match self.dim() {
            1 => {
                let lo = self.generators.min();
                let hi = self.generators.max();
                let g = if lo == hi {
                    DMatrix::from_element(1, 1, lo)
                } else {
                    DMatrix::from_row_slice(1, 2, &[lo, hi])
                };
                ConvexRegion { generators: g }
            }
            2 => {
                let pts: Vec<[f64; 2]> = self.generators.column_iter().map(|c| [c[0], c[1]]).collect();
                let hull = planar::hull(&pts);
                ConvexRegion {
                    generators: DMatrix::from_fn(2, hull.len(), |i, j| hull[j][i]),
                }
            }
            _ => self.clone(),
        }
    }
}

/// Exact computations for hulls in the plane.
mod planar {
    pub type P = [f64; 2];

    fn cross(o: P, a: P, b: P) -> f64 {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    }

    /// Monotone-chain hull, counter-clockwise, collinear points dropped. Degenerate input
    /// yields one or two vertices.
    pub fn hull(points: &[P]) -> Vec<P> {
        let mut pts = points.to_vec();
        pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        pts.dedup();
        if pts.len() <= 2 {
            return pts;
        }
        let mut lower: Vec<P> = Vec::new();
        for &p in &pts {
            while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
                lower.pop();
            }
            lower.push(p);
        }
        let mut upper: Vec<P> = Vec::new();
        for &p in pts.iter().rev() {
            while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
                upper.pop();
            }
            upper.push(p);
        }
        lower.pop();
        upper.pop();
        lower.extend(upper);
        if lower.len() < 2 {
            // all points coincide after the collinearity sweep
            return vec![pts[0], pts[pts.len() - 1]];
        }
        lower
    }

    fn dist(a: P, b: P) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    fn point_segment(p: P, a: P, b: P) -> f64 {
        let ab = [b[0] - a[0], b[1] - a[1]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        if len2 == 0.0 {
            return dist(p, a);
        }
        let s = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
        dist(p, [a[0] + s * ab[0], a[1] + s * ab[1]])
    }

    fn segment_segment(a: P, b: P, c: P, d: P) -> f64 {
        let (o1, o2) = (cross(a, b, c), cross(a, b, d));
        let (o3, o4) = (cross(c, d, a), cross(c, d, b));
        if o1 * o2 < 0.0 && o3 * o4 < 0.0 {
            return 0.0;
        }
        point_segment(a, c, d)
            .min(point_segment(b, c, d))
            .min(point_segment(c, a, b))
            .min(point_segment(d, a, b))
    }

    fn contains(poly: &[P], p: P) -> bool {
        if poly.len() < 3 {
            return false;
        }
        (0..poly.len()).all(|k| cross(poly[k], poly[(k + 1) % poly.len()], p) >= 0.0)
    }

    fn edges(poly: &[P]) -> Vec<(P, P)> {
        match poly.len() {
            1 => vec![(poly[0], poly[0])],
            2 => vec![(poly[0], poly[1])],
            n => (0..n).map(|k| (poly[k], poly[(k + 1) % n])).collect(),
        }
    }

    /// Distance between two hulls given by their counter-clockwise vertex lists.
    pub fn hull_distance(p: &[P], q: &[P]) -> f64 {
        if contains(q, p[0]) || contains(p, q[0]) {
            return 0.0;
        }
        let (ep, eq) = (edges(p), edges(q));
        let mut best = f64::INFINITY;
        for &(a, b) in &ep {
            for &(c, d) in &eq {
                best = best.min(segment_segment(a, b, c, d));
            }
        }
        best
    }
}

/// Outcome of the Frank–Wolfe distance solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceBounds {
    pub lower: f64,
    pub upper: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Pairwise (away-step) Frank–Wolfe for `min ‖Aλ − Bμ‖` over the product of simplices,
/// written over the Minkowski-difference vertices `aᵢ − bⱼ`. Each iterate `z` gives the
/// upper bound `‖z‖`; the supporting half-space through the Frank–Wolfe vertex gives the
/// lower bound `⟨z, s⟩/‖z‖`.
pub fn frank_wolfe_distance(a: &ConvexRegion, b: &ConvexRegion, tol: f64, max_iter: usize) -> Result<DistanceBounds> {
    if a.dim() != b.dim() {
        return Err(Error::Shape("regions live in different dimensions".into()));
    }
    let (ga, gb) = (a.generators(), b.generators());
    let vertex = |i: usize, j: usize| ga.column(i) - gb.column(j);

    let u = a.centroid() - b.centroid();
    let i0 = argmin(ga.ncols(), |i| ga.column(i).dot(&u));
    let j0 = argmin(gb.ncols(), |j| -gb.column(j).dot(&u));
    let mut active: Vec<(usize, usize, f64)> = vec![(i0, j0, 1.0)];
    let mut z = vertex(i0, j0);

    let mut bounds = DistanceBounds {
        lower: 0.0,
        upper: z.norm(),
        iterations: 0,
        converged: false,
    };
    for it in 0..max_iter {
        bounds.iterations = it;
        let zn = z.norm();
        bounds.upper = zn;
        if zn <= tol {
            bounds.lower = 0.0;
            bounds.converged = true;
            return Ok(bounds);
        }
        let i_s = argmin(ga.ncols(), |i| ga.column(i).dot(&z));
        let j_s = argmin(gb.ncols(), |j| -gb.column(j).dot(&z));
        let s = vertex(i_s, j_s);
        let zs = z.dot(&s);
        bounds.lower = bounds.lower.max(zs / zn).max(0.0);
        if bounds.upper - bounds.lower <= tol {
            bounds.converged = true;
            return Ok(bounds);
        }
        let k_away = argmin(active.len(), |k| -vertex(active[k].0, active[k].1).dot(&z));
        let (ia, ja, wa) = active[k_away];
        let dir = &s - vertex(ia, ja);
        let dd = dir.norm_squared();
        if dd == 0.0 {
            bounds.converged = bounds.upper - bounds.lower <= tol;
            break;
        }
        let gamma = (-z.dot(&dir) / dd).clamp(0.0, wa);
        z += &dir * gamma;
        active[k_away].2 -= gamma;
        match active.iter_mut().find(|e| e.0 == i_s && e.1 == j_s) {
            Some(e) => e.2 += gamma,
            None => active.push((i_s, j_s, gamma)),
        }
        active.retain(|e| e.2 > 1e-15);
    }
    bounds.upper = bounds.upper.min(z.norm());
    Ok(bounds)
}

fn argmin<F: Fn(usize) -> f64>(n: usize, f: F) -> usize {
    let mut best = (0, f64::INFINITY);
    for k in 0..n {
        let v = f(k);
        if v < best.1 {
            best = (k, v);
        }
    }
    best.0
}

/// Upper/lower bounds on the hull distance: exact in 1-D and 2-D, Frank–Wolfe otherwise.
pub fn distance_bounds(a: &ConvexRegion, b: &ConvexRegion, tol: f64) -> Result<DistanceBounds> {
    if a.dim() != b.dim() {
        return Err(Error::Shape("regions live in different dimensions".into()));
    }
    let exact = |v: f64| DistanceBounds {
        lower: v,
        upper: v,
        iterations: 0,
        converged: true,
    };
    match a.dim() {
        1 => {
            let (alo, ahi) = (a.generators.min(), a.generators.max());
            let (blo, bhi) = (b.generators.min(), b.generators.max());
            Ok(exact((blo - ahi).max(alo - bhi).max(0.0)))
        }
        2 => {
            let to_pts = |r: &ConvexRegion| -> Vec<planar::P> {
                let pts: Vec<planar::P> = r.generators.column_iter().map(|c| [c[0], c[1]]).collect();
                planar::hull(&pts)
            };
            Ok(exact(planar::hull_distance(&to_pts(a), &to_pts(b))))
        }
        _ => frank_wolfe_distance(a, b, tol, DEFAULT_MAX_ITER),
    }
}

/// `min ‖p − q‖` over `p ∈ hull(A)`, `q ∈ hull(B)`, to accuracy `tol`.
pub fn convex_distance(a: &ConvexRegion, b: &ConvexRegion, tol: f64) -> Result<f64> {
    let bnd = distance_bounds(a, b, tol)?;
    if !bnd.converged {
        return Err(Error::DistanceNotConverged {
            iterations: bnd.iterations,
            lower: bnd.lower,
            upper: bnd.upper,
        });
    }
    Ok(0.5 * (bnd.lower + bnd.upper))
}

/// `(1−t)S + tC`, generated by all pairwise sums `(1−t)sₖ + t·cₗ`.
pub fn blend_region(s: &ConvexRegion, c: &ConvexRegion, t: f64, cap: usize) -> Result<ConvexRegion> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange { t, range: "[0, 1]" });
    }
    if s.dim() != c.dim() {
        return Err(Error::Shape("source and target regions differ in dimension".into()));
    }
    if t == 0.0 {
        return Ok(s.clone());
    }
    if t == 1.0 {
        return Ok(c.clone());
    }
    let (sp, cp) = (s.pruned(), c.pruned());
    let (ms, mc) = (sp.len(), cp.len());
    if ms * mc > cap {
        return Err(Error::TooManyGenerators { count: ms * mc, cap });
    }
    let g = DMatrix::from_fn(s.dim(), ms * mc, |i, j| {
        (1.0 - t) * sp.generators[(i, j / mc)] + t * cp.generators[(i, j % mc)]
    });
    Ok(ConvexRegion::new(g)?.pruned())
}

/// `g(t)`: the smallest pairwise distance among the blended regions, measured by its bounds.
pub fn blended_gap(s: &ConvexRegion, regions: &[ConvexRegion], t: f64, tol: f64) -> Result<DistanceBounds> {
    let blends = regions
        .iter()
        .map(|c| blend_region(s, c, t, DEFAULT_GENERATOR_CAP))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(usize, usize)> = (0..blends.len())
        .flat_map(|i| (i + 1..blends.len()).map(move |j| (i, j)))
        .collect();
    let results = exec::map_indexed(pairs.len(), |k| distance_bounds(&blends[pairs[k].0], &blends[pairs[k].1], tol));
    let mut best = DistanceBounds {
        lower: f64::INFINITY,
        upper: f64::INFINITY,
        iterations: 0,
        converged: true,
    };
    for r in results {
        let r = r?;
        best.lower = best.lower.min(r.lower);
        best.upper = best.upper.min(r.upper);
        best.iterations = best.iterations.max(r.iterations);
        best.converged &= r.converged;
    }
    Ok(best)
}

fn touching(bounds: &DistanceBounds, tol: f64) -> bool {
    if bounds.lower > tol {
        false
    } else if bounds.upper <= tol {
        true
    } else {
        0.5 * (bounds.lower + bounds.upper) <= tol
    }
}

/// Largest `t` at which two of the regions `(1−t)S + tCᵢ` still touch, by bisection to width
/// `tol` (the touching set is a closed interval containing 0).
pub fn separation_time(s: &ConvexRegion, regions: &[ConvexRegion], tol: f64) -> Result<f64> {
    if regions.len() < 2 {
        return Err(invalid("separation time needs at least two regions"));
    }
    let dist_tol = DEFAULT_DISTANCE_TOL;
    for i in 0..regions.len() {
        for j in i + 1..regions.len() {
            let b = distance_bounds(&regions[i], &regions[j], dist_tol)?;
            if touching(&b, dist_tol) {
                return Err(Error::RegionsIntersect(i, j));
            }
        }
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if touching(&blended_gap(s, regions, mid, dist_tol)?, dist_tol) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn region_membership(x: &DVector<f64>, region: &ConvexRegion, tol: f64) -> Result<bool> {
    let b = distance_bounds(&ConvexRegion::point(x), region, tol.min(DEFAULT_DISTANCE_TOL))?;
    Ok(b.lower <= tol && 0.5 * (b.lower + b.upper) <= tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Group,
    Leaf,
}

/// Leaves `C_{i,j}` grouped into `C_i = conv(∪ⱼ C_{i,j})`, plus the source region `S`.
#[derive(Debug, Clone)]
pub struct HierarchySpec {
    pub source: ConvexRegion,
    /// `groups[i][j]` is leaf `C_{i,j}`.
    pub groups: Vec<Vec<ConvexRegion>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HierarchyJson {
    #[serde(rename = "S")]
    s: Vec<Vec<f64>>,
    groups: Vec<GroupJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroupJson {
    leaves: Vec<Vec<Vec<f64>>>,
}

fn region_rows(r: &ConvexRegion) -> Vec<Vec<f64>> {
    r.generators.column_iter().map(|c| c.iter().copied().collect()).collect()
}

impl HierarchySpec {
    pub fn new(source: ConvexRegion, groups: Vec<Vec<ConvexRegion>>) -> Result<Self> {
        if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
            return Err(invalid("every group needs at least one leaf"));
        }
        let d = source.dim();
        if groups.iter().flatten().any(|l| l.dim() != d) {
            return Err(Error::Shape("leaves and source differ in dimension".into()));
        }
        Ok(Self { source, groups })
    }

    pub fn group_hulls(&self) -> Vec<ConvexRegion> {
        self.groups
            .iter()
            .map(|leaves| {
                let cols: Vec<_> = leaves.iter().flat_map(|l| l.generators.column_iter()).collect();
                ConvexRegion::new(DMatrix::from_columns(&cols)).expect("nonempty").pruned()
            })
            .collect()
    }

    pub fn leaves(&self) -> Vec<ConvexRegion> {
        self.groups.iter().flatten().cloned().collect()
    }

    pub fn regions(&self, level: Level) -> Vec<ConvexRegion> {
        match level {
            Level::Group => self.group_hulls(),
            Level::Leaf => self.leaves(),
        }
    }

    /// Checks that leaves are pairwise disjoint and group hulls are pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        for level in [Level::Leaf, Level::Group] {
            let regs = self.regions(level);
            for i in 0..regs.len() {
                for j in i + 1..regs.len() {
                    let b = distance_bounds(&regs[i], &regs[j], DEFAULT_DISTANCE_TOL)?;
                    if touching(&b, DEFAULT_DISTANCE_TOL) {
                        return Err(Error::RegionsIntersect(i, j));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        let j = HierarchyJson {
            s: region_rows(&self.source),
            groups: self
                .groups
                .iter()
                .map(|g| GroupJson {
                    leaves: g.iter().map(region_rows).collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let j: HierarchyJson = serde_json::from_str(text)?;
        let source = ConvexRegion::from_points(&j.s)?;
        let groups = j
            .groups
            .iter()
            .map(|g| g.leaves.iter().map(|l| ConvexRegion::from_points(l)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Self::new(source, groups)
    }

    /// Four clusters of `per_cluster` consecutive columns each, with `S` the ball proxy of
    /// radius `√d + 3` at the origin. Of the two ways to pair the clusters into groups, the
    /// one whose group hulls are farther apart is used.
    pub fn four_clusters(data: &DataMatrix, per_cluster: usize) -> Result<Self> {
        if data.len() != 4 * per_cluster {
            return Err(invalid("expected four clusters of equal size"));
        }
        let leaf = |c: usize| -> Result<ConvexRegion> {
            Ok(ConvexRegion::new(data.matrix().columns(c * per_cluster, per_cluster).into_owned())?.pruned())
        };
        let leaves: Vec<ConvexRegion> = (0..4).map(leaf).collect::<Result<_>>()?;
        let d = data.dim();
        let source = ConvexRegion::ball_proxy(&DVector::zeros(d), (d as f64).sqrt() + 3.0)?;
        // cluster order: (−2, 2), (−2, −2), (2, 2), (2, −2)
        let pairings = [[[0, 1], [2, 3]], [[0, 2], [1, 3]]];
        let mut best: Option<(f64, HierarchySpec)> = None;
        for p in pairings {
            let groups = p
                .iter()
                .map(|g| g.iter().map(|&k| leaves[k].clone()).collect())
                .collect();
            let spec = HierarchySpec::new(source.clone(), groups)?;
            let hulls = spec.group_hulls();
            let gap = convex_distance(&hulls[0], &hulls[1], DEFAULT_DISTANCE_TOL)?;
            if best.as_ref().is_none_or(|(g, _)| gap > *g) {
                best = Some((gap, spec));
            }
        }
        Ok(best.unwrap().1)
    }
}

/// Blended regions `(1−t)S + tCᵢ` precomputed on a time grid.
pub struct BlendCache {
    pub times: Vec<f64>,
    /// `blends[k][i]` is region `i` blended at `times[k]`.
    pub blends: Vec<Vec<ConvexRegion>>,
}

impl BlendCache {
    pub fn new(spec: &HierarchySpec, level: Level, times: &[f64]) -> Result<Self> {
        let regions = spec.regions(level);
        let blends = exec::map_indexed(times.len(), |k| {
            regions
                .iter()
                .map(|c| blend_region(&spec.source, c, times[k], DEFAULT_GENERATOR_CAP))
                .collect::<Result<Vec<_>>>()
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            times: times.to_vec(),
            blends,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub node: usize,
    pub t: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfinementReport {
    /// Index (at the requested level) of the region holding the state at `t_from`.
    pub region: Option<usize>,
    pub start_node: usize,
    /// Set when the state at `t_from` lies in no region; carries the smallest distance.
    pub out_of_support: Option<f64>,
    pub violation: Option<Violation>,
}

impl ConfinementReport {
    pub fn confined(&self) -> bool {
        self.out_of_support.is_none() && self.violation.is_none()
    }
}

pub const MEMBERSHIP_TOL: f64 = 1e-6;

/// Checks that once a trajectory is inside a blended region at `t_from` it stays in the
/// correspondingly blended region for every later node.
pub fn confinement_check(traj: &Trajectory, spec: &HierarchySpec, t_from: f64, level: Level) -> Result<ConfinementReport> {
    let start = traj
        .times
        .iter()
        .position(|&t| t >= t_from)
        .ok_or_else(|| invalid(format!("trajectory ends before t_from = {t_from}")))?;
    let cache = BlendCache::new(spec, level, &traj.times[start..])?;
    confinement_check_cached(traj, &cache, start)
}

/// As [`confinement_check`], with blends precomputed for `traj.times[start..]`.
pub fn confinement_check_cached(traj: &Trajectory, cache: &BlendCache, start: usize) -> Result<ConfinementReport> {
    let mut report = ConfinementReport {
        region: None,
        start_node: start,
        out_of_support: None,
        violation: None,
    };
    let dist_to = |k: usize, i: usize| -> Result<f64> {
        let x = traj.state(start + k);
        let b = distance_bounds(&ConvexRegion::point(&x), &cache.blends[k][i], DEFAULT_DISTANCE_TOL)?;
        Ok(0.5 * (b.lower + b.upper))
    };
    let mut nearest = f64::INFINITY;
    for i in 0..cache.blends[0].len() {
        let d = dist_to(0, i)?;
        nearest = nearest.min(d);
        if d <= MEMBERSHIP_TOL {
            report.region = Some(i);
            break;
        }
    }
    let Some(region) = report.region else {
        report.out_of_support = Some(nearest);
        return Ok(report);
    };
    for k in 1..cache.times.len() {
        let d = dist_to(k, region)?;
        if d > MEMBERSHIP_TOL {
            report.violation = Some(Violation {
                node: start + k,
                t: cache.times[k],
                distance: d,
            });
            break;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn interval(a: f64, b: f64) -> ConvexRegion {
        ConvexRegion::from_points(&[vec![a], vec![b]]).unwrap()
    }

    fn square(cx: f64, cy: f64) -> ConvexRegion {
        ConvexRegion::from_points(&[
            vec![cx - 0.5, cy - 0.5],
            vec![cx + 0.5, cy - 0.5],
            vec![cx + 0.5, cy + 0.5],
            vec![cx - 0.5, cy + 0.5],
        ])
        .unwrap()
    }

    #[test]
    fn bound_examples() {
        let b = concentration_bound(0.9, 0.99, 10.0, 6).unwrap();
        let oracle = (1.0 / (2.0 * PI).sqrt()) * (1.0 / 9.0) * 0.1 * 495f64.ln() * 30.0;
        assert!((b - oracle).abs() < 1e-14);
        assert!((b - 0.8251).abs() < 1e-3);
        let b99 = concentration_bound(0.99, 0.99, 10.0, 6).unwrap();
        assert!((b99 - 0.0750).abs() < 1e-4);
        assert!(concentration_bound(0.5, 1.0 / 6.0 + 1e-12, 10.0, 6).unwrap() < 1e-9);
        assert!(concentration_bound(1.0 - 1e-12, 0.9, 10.0, 6).unwrap() < 1e-9);
        assert!(concentration_bound(0.5, 1.0 / 6.0, 10.0, 6).is_err());
        assert!(concentration_bound(0.0, 0.9, 10.0, 6).is_err());
    }

    #[test]
    fn nonconcentration_examples() {
        let one = DataMatrix::from_points(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(estimate_nonconcentration(0.5, 0.9, &one, 500, RngSpec::new(1, 0)).unwrap().0, 0.0);
        let two = DataMatrix::from_points(&[vec![0.5, 0.0], vec![-0.5, 0.0]]).unwrap();
        // with two points max(w) > 1/2 almost surely, so τ sits just above it
        let (p, _) = estimate_nonconcentration(0.01, 0.51, &two, 2000, RngSpec::new(1, 0)).unwrap();
        assert!(p > 0.99, "p = {p}");
        let (p, _) = estimate_nonconcentration(0.01, 0.5, &two, 2000, RngSpec::new(1, 0)).unwrap();
        assert_eq!(p, 0.0);
    }

    #[test]
    fn separation_examples() {
        let d = DataMatrix::from_points(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(min_separation(&d).unwrap(), 5.0);
        let dup = DataMatrix::from_points(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(min_separation(&dup).unwrap(), 0.0);
        let one = DataMatrix::from_points(&[vec![1.0]]).unwrap();
        assert!(min_separation(&one).is_err());
    }

    #[test]
    fn distance_examples() {
        assert_eq!(convex_distance(&interval(-1.0, 1.0), &interval(2.0, 3.0), 1e-7).unwrap(), 1.0);
        assert_eq!(convex_distance(&interval(-1.0, 1.0), &interval(0.5, 3.0), 1e-7).unwrap(), 0.0);
        let d = convex_distance(&square(0.0, 0.0), &square(3.0, 3.0), 1e-7).unwrap();
        assert!((d - 8f64.sqrt()).abs() < 1e-12);
        let d = convex_distance(&square(0.0, 0.0), &square(0.7, 0.2), 1e-7).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn frank_wolfe_matches_planar_examples() {
        let fw = frank_wolfe_distance(&square(0.0, 0.0), &square(3.0, 3.0), 1e-7, DEFAULT_MAX_ITER).unwrap();
        assert!(fw.converged);
        assert!((0.5 * (fw.lower + fw.upper) - 8f64.sqrt()).abs() < 1e-7);
        let fw = frank_wolfe_distance(&square(0.0, 0.0), &square(0.7, 0.2), 1e-7, DEFAULT_MAX_ITER).unwrap();
        assert!(fw.converged && fw.upper <= 1e-7);
        let fw = frank_wolfe_distance(&interval(-1.0, 1.0), &interval(2.0, 3.0), 1e-7, DEFAULT_MAX_ITER).unwrap();
        assert!((fw.upper - 1.0).abs() < 1e-7);
    }

    #[test]
    fn frank_wolfe_in_three_dimensions() {
        // unit cubes offset along the diagonal by 3: gap is 2 along each axis, distance 2√3
        let cube = |o: f64| {
            let pts: Vec<Vec<f64>> = (0..8)
                .map(|k| (0..3).map(|b| o + ((k >> b) & 1) as f64).collect())
                .collect();
            ConvexRegion::from_points(&pts).unwrap()
        };
        let d = convex_distance(&cube(0.0), &cube(3.0), 1e-7).unwrap();
        assert!((d - 2.0 * 3f64.sqrt()).abs() < 1e-7);
        assert_eq!(convex_distance(&cube(0.0), &cube(0.5), 1e-7).unwrap() < 1e-7, true);
    }

    #[test]
    fn frank_wolfe_reports_non_convergence() {
        let a = ConvexRegion::from_points(&[vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let b = ConvexRegion::from_points(&[vec![0.3, 0.3, 1.0], vec![0.3, 0.3, -1.0]]).unwrap();
        let r = frank_wolfe_distance(&a, &b, 1e-15, 1).unwrap();
        assert!(!r.converged);
        assert!(r.lower <= r.upper);
    }

    #[test]
    fn blend_examples() {
        let s = interval(-1.0, 1.0);
        let c = ConvexRegion::from_points(&[vec![2.0]]).unwrap();
        assert_eq!(blend_region(&s, &c, 0.0, 10).unwrap(), s);
        assert_eq!(blend_region(&s, &c, 1.0, 10).unwrap(), c);
        let b = blend_region(&s, &c, 0.5, 10).unwrap();
        assert_eq!((b.generators().min(), b.generators().max()), (0.5, 1.5));
        let big = ConvexRegion::new(DMatrix::from_fn(3, 400, |i, j| (i * j) as f64)).unwrap();
        assert!(matches!(
            blend_region(&big, &big, 0.5, 1000),
            Err(Error::TooManyGenerators { .. })
        ));
    }

    #[test]
    fn separation_time_examples() {
        let s = interval(-1.0, 1.0);
        let cs = vec![
            ConvexRegion::from_points(&[vec![-2.0]]).unwrap(),
            ConvexRegion::from_points(&[vec![2.0]]).unwrap(),
        ];
        let t1 = separation_time(&s, &cs, 1e-4).unwrap();
        assert!((t1 - 1.0 / 3.0).abs() < 1e-4);
        let point = ConvexRegion::from_points(&[vec![0.0]]).unwrap();
        assert!(separation_time(&point, &cs, 1e-4).unwrap() < 1e-4);
        let overlapping = vec![interval(0.0, 1.0), interval(0.5, 2.0)];
        assert!(matches!(separation_time(&s, &overlapping, 1e-4), Err(Error::RegionsIntersect(0, 1))));
    }

    #[test]
    fn membership_examples() {
        let r = ConvexRegion::from_points(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert!(region_membership(&DVector::from_vec(vec![2.0, 0.0]), &r, 1e-9).unwrap());
        assert!(region_membership(&r.centroid(), &r, 1e-9).unwrap());
        assert!(!region_membership(&DVector::from_vec(vec![2.0, 2.0]), &r, 1e-9).unwrap());
        assert!(!region_membership(&DVector::from_vec(vec![2.0]), &interval(0.0, 1.0), 1e-9).unwrap());
    }

    #[test]
    fn ball_proxy_contains_ball() {
        let c = DVector::from_vec(vec![1.0, -1.0]);
        let b = ConvexRegion::ball_proxy(&c, 2.0).unwrap();
        for k in 0..360 {
            let a = k as f64 * PI / 180.0;
            let x = &c + DVector::from_vec(vec![a.cos(), a.sin()]) * 2.0;
            assert!(region_membership(&x, &b, 1e-9).unwrap());
        }
        let b3 = ConvexRegion::ball_proxy(&DVector::zeros(3), 1.0).unwrap();
        let x = DVector::from_vec(vec![1.0, 1.0, 1.0]) / 3f64.sqrt();
        let fw = frank_wolfe_distance(&ConvexRegion::point(&x), &b3, 1e-9, DEFAULT_MAX_ITER).unwrap();
        assert!(fw.upper <= 1e-9);
    }

    #[test]
    fn hierarchy_json_round_trip() {
        let spec = HierarchySpec::new(
            interval(-1.0, 1.0),
            vec![vec![interval(-3.0, -2.5), interval(-2.0, -1.5)], vec![interval(2.0, 3.0)]],
        )
        .unwrap();
        spec.validate().unwrap();
        let text = spec.to_json_string().unwrap();
        assert!(text.contains("\"S\"") && text.contains("\"groups\"") && text.contains("\"leaves\""));
        let back = HierarchySpec::from_json_str(&text).unwrap();
        assert_eq!(back.leaves(), spec.leaves());
        assert_eq!(back.source, spec.source);
    }

    #[test]
    fn confinement_trivial_and_adversarial() {
        use crate::dynamics::{integrate_ode, make_grid, GridKind, Method};
        use crate::field::{ConstantField, OptimalField};
        let data = DataMatrix::from_points(&[vec![2.0]]).unwrap();
        let spec = HierarchySpec::new(interval(-4.0, 4.0), vec![vec![ConvexRegion::from_points(&[vec![2.0]]).unwrap()]]).unwrap();
        let grid = make_grid(GridKind::Uniform, 50, 1e-3).unwrap();
        let traj = integrate_ode(&OptimalField::ot(data), &DVector::from_vec(vec![1.0]), &grid, Method::Rk4).unwrap();
        let rep = confinement_check(&traj, &spec, 0.2, Level::Leaf).unwrap();
        assert!(rep.confined(), "{rep:?}");

        let two = HierarchySpec::new(
            interval(-1.0, 1.0),
            vec![
                vec![ConvexRegion::from_points(&[vec![-2.0]]).unwrap()],
                vec![ConvexRegion::from_points(&[vec![2.0]]).unwrap()],
            ],
        )
        .unwrap();
        let drift = ConstantField(DVector::from_vec(vec![4.0]));
        let traj = integrate_ode(&drift, &DVector::from_vec(vec![-1.0]), &grid, Method::Euler).unwrap();
        // x(t) = −1 + 4t sits in (1−t)S + t·{2} = [3t − 1, 1 + t] until t = 2/3
        let rep = confinement_check(&traj, &two, 0.34, Level::Group).unwrap();
        assert_eq!(rep.region, Some(1));
        let v = rep.violation.expect("constant drift leaves the region");
        assert!(v.node > rep.start_node);
        assert!(v.t > 2.0 / 3.0 && traj.times[v.node - 1] <= 2.0 / 3.0);
    }

    fn arb_poly() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 1..6)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn distance_properties(a in arb_poly(), b in arb_poly(), shift in -4.0f64..4.0) {
            let ra = ConvexRegion::from_points(&a).unwrap();
            let rb = ConvexRegion::from_points(&b.iter().map(|p| vec![p[0] + shift, p[1]]).collect::<Vec<_>>()).unwrap();
            let dab = convex_distance(&ra, &rb, 1e-7).unwrap();
            let dba = convex_distance(&rb, &ra, 1e-7).unwrap();
            prop_assert!(dab >= 0.0);
            prop_assert!((dab - dba).abs() < 1e-12);
            let fw = frank_wolfe_distance(&ra, &rb, 1e-7, DEFAULT_MAX_ITER).unwrap();
            if fw.converged {
                prop_assert!(fw.lower - 1e-9 <= dab && dab <= fw.upper + 1e-9, "{fw:?} vs {dab}");
            }
            // sampling oracle: random convex combinations never beat the solver
            let mut r = RngSpec::new(3, 0).rng();
            for _ in 0..200 {
                let wa: Vec<f64> = (0..ra.len()).map(|_| r.random::<f64>()).collect();
                let wb: Vec<f64> = (0..rb.len()).map(|_| r.random::<f64>()).collect();
                let (sa, sb): (f64, f64) = (wa.iter().sum(), wb.iter().sum());
                let p = ra.generators() * DVector::from_vec(wa) / sa;
                let q = rb.generators() * DVector::from_vec(wb) / sb;
                prop_assert!((p - q).norm() >= dab - 1e-9);
            }
        }

        #[test]
        fn blend_membership(s in arb_poly(), c in arb_poly(), t in 0.0f64..=1.0, ws in 0usize..6, wc in 0usize..6) {
            let rs = ConvexRegion::from_points(&s).unwrap();
            let rc = ConvexRegion::from_points(&c).unwrap();
            let x0 = rs.generators().column(ws % rs.len()).into_owned();
            let x1 = rc.generators().column(wc % rc.len()).into_owned();
            let blend = blend_region(&rs, &rc, t, DEFAULT_GENERATOR_CAP).unwrap();
            let x = &x0 * (1.0 - t) + &x1 * t;
            prop_assert!(region_membership(&x, &blend, 1e-9).unwrap());
        }
    }
}
