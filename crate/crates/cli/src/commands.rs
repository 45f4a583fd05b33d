//! One function per subcommand. Each returns `Ok(true)` when every invariant it checks holds.

use std::fmt::Write as _;

use anyhow::{bail, Context};
use nalgebra::{DMatrix, DVector};

use flowlab::data::{dataset_csv_string, fmt_f64, load_dataset, synthetic};
use flowlab::dynamics::{flow_map, generate, generate_endpoint, make_grid, Snap, Trajectory};
use flowlab::exec;
use flowlab::field::OptimalField;
use flowlab::geometry::{
    concentration_bound, convex_distance, estimate_nonconcentration, min_separation, separation_time, ConvexRegion,
    HierarchySpec, DEFAULT_BISECTION_TOL, DEFAULT_DISTANCE_TOL,
};
use flowlab::osdnet::{compute_quadratic_data, embedding_fit_error, kappa_limit_pinv, EmbeddingConfig, DEFAULT_PINV_RCOND};
use flowlab::rng::sample_standard_gaussian;
use flowlab::subspace::{svd_decompose, SubspaceBasis, DEFAULT_RANK_TOL};
use flowlab::trainer::{
    histograms_json, load_checkpoint, metrics_csv_string, CheckpointMetrics, OffsubspaceConfig, OffsubspaceTrainer,
    SubspaceConfig, SubspaceTrainer,
};
use flowlab::verify::{run_suite, starts_in_region, Report, SuiteConfig};
use flowlab::{DataFormat, DataMatrix, RngSpec};

use crate::config::{Config, DatasetMode, DatasetSection, SuiteScale, TrainMode, TrainSection};
use crate::output::Output;
use crate::svg::{Plot, PALETTE};
use crate::ConfigError;

/// Stream ids under the run seed.
const START_STREAM: u64 = 1;
const SNAPSHOT_STREAM: u64 = 2;
const DATA_STREAM: u64 = 13;
const BOUND_STREAM: u64 = 30;

pub fn load_data(ds: &DatasetSection, seed: u64) -> anyhow::Result<DataMatrix> {
    let data = match ds.mode {
        DatasetMode::Sparse => synthetic::sparse(RngSpec::new(seed, 10), ds.points, ds.dim, ds.half_width, ds.min_separation)?,
        DatasetMode::Hierarchical => synthetic::four_clusters(RngSpec::new(seed, 12), ds.per_cluster, ds.cluster_std)?,
        DatasetMode::File => {
            let path = ds.path.as_ref().ok_or_else(|| ConfigError("dataset mode \"file\" needs a path".into()))?;
            if !path.exists() {
                return Err(ConfigError(format!("dataset file {} not found", path.display())).into());
            }
            load_dataset(path, DataFormat::from_path(path))?
        }
    };
    Ok(data)
}

fn csv_header(prefix: &str, d: usize) -> String {
    (0..d).map(|k| format!(",{prefix}{k}")).collect()
}

fn csv_values(v: &DVector<f64>) -> String {
    v.iter().map(|x| format!(",{}", fmt_f64(*x))).collect()
}

fn snap_fields(s: &Snap) -> (i64, i64) {
    match *s {
        Snap::Index(i) => (i as i64, -1),
        Snap::Tie(a, b) => (a as i64, b as i64),
        Snap::Unresolved => (-1, -1),
    }
}

// ---------------------------------------------------------------------------------------------
// gen-paths

pub fn gen_paths(cfg: &Config, out: &mut Output, svg: bool) -> anyhow::Result<bool> {
    let g = &cfg.gen_paths;
    let seed = cfg.run.seed;
    let data = load_data(&g.dataset, seed)?;
    let d = data.dim();
    out.write("dataset.csv", &dataset_csv_string(&data))?;
    let grid = make_grid(g.grid, g.steps, g.epsilon)?;
    let method = g.method();
    let field = OptimalField::ot(data.clone());
    let hierarchy = match g.dataset.mode {
        DatasetMode::Hierarchical => Some(HierarchySpec::four_clusters(&data, g.dataset.per_cluster)?),
        _ => None,
    };
    let starts = |n: usize, stream: u64| -> anyhow::Result<DMatrix<f64>> {
        Ok(match &hierarchy {
            Some(h) => starts_in_region(&h.source, n, RngSpec::new(seed, stream))?,
            None => sample_standard_gaussian(RngSpec::new(seed, stream), d, n)?,
        })
    };
    let x0 = starts(g.trajectories, START_STREAM)?;
    let trajs: Vec<Trajectory> = exec::map_indexed(x0.ncols(), |j| {
        generate(&field, &x0.column(j).into_owned(), &grid, &data, g.snap_tol, method)
    })
    .into_iter()
    .collect::<flowlab::Result<_>>()?;

    let mut summary = format!("traj,snapped,tie_with,snap_distance{}{}{}\n", csv_header("x0_", d), csv_header("terminal_", d), csv_header("closure_", d));
    for (j, t) in trajs.iter().enumerate() {
        out.write(&format!("trajectories/traj_{j:04}.csv"), &t.to_csv_string())?;
        let (a, b) = snap_fields(&t.snapped);
        let closure = t.closure.clone().unwrap_or_else(|| t.terminal());
        let _ = writeln!(
            summary,
            "{j},{a},{b},{}{}{}{}",
            fmt_f64(t.snap_distance.unwrap_or(f64::NAN)),
            csv_values(&x0.column(j).into_owned()),
            csv_values(&t.terminal()),
            csv_values(&closure)
        );
    }
    out.write("endpoints.csv", &summary)?;

    if let Some(h) = &hierarchy {
        hierarchy_outputs(cfg, out, &field, &data, h, starts(g.snapshot_samples, SNAPSHOT_STREAM)?)?;
    }
    if svg {
        let mut p = Plot::new("generation paths", "x0", if d >= 2 { "x1" } else { "t" });
        for (j, t) in trajs.iter().enumerate() {
            let pts = (0..t.times.len())
                .map(|k| if d >= 2 { (t.states[(0, k)], t.states[(1, k)]) } else { (t.states[(0, k)], t.times[k]) })
                .collect();
            p.line(pts, PALETTE[j % PALETTE.len()], 1.0);
        }
        let pts = data
            .matrix()
            .column_iter()
            .map(|c| if d >= 2 { (c[0], c[1]) } else { (c[0], 1.0) })
            .collect();
        p.dots(pts, "black", 3.0).legend("data", "black");
        out.write("paths.svg", &p.render())?;
    }
    Ok(true)
}

/// Separation times, intermediate-state snapshots, and the smallest hull gap between the
/// snapshot clouds of different clusters at each snapshot time.
fn hierarchy_outputs(
    cfg: &Config,
    out: &mut Output,
    field: &OptimalField,
    data: &DataMatrix,
    h: &HierarchySpec,
    x0: DMatrix<f64>,
) -> anyhow::Result<()> {
    let g = &cfg.gen_paths;
    let t1 = separation_time(&h.source, &h.group_hulls(), DEFAULT_BISECTION_TOL)?;
    let t2 = separation_time(&h.source, &h.leaves(), DEFAULT_BISECTION_TOL)?;
    out.write("separation.csv", &format!("level,t\ngroup,{}\nleaf,{}\n", fmt_f64(t1), fmt_f64(t2)))?;
    out.write("hierarchy.json", &h.to_json_string()?)?;

    let grid = make_grid(g.grid, g.steps, g.epsilon)?;
    let per = g.dataset.per_cluster;
    let labels: Vec<Option<usize>> = exec::map_indexed(x0.ncols(), |j| {
        generate_endpoint(field, &x0.column(j).into_owned(), &grid, data, g.snap_tol, g.method())
            .ok()
            .and_then(|e| match e.snapped {
                Snap::Index(i) => Some(i / per),
                _ => None,
            })
    });
    let d = data.dim();
    let mut snaps = format!("t,traj,cluster{}\n", csv_header("x", d));
    let mut gaps = String::from("t,min_cluster_gap\n");
    for &t in &g.snapshot_times {
        let states: Vec<DVector<f64>> = exec::map_indexed(x0.ncols(), |j| {
            let x = x0.column(j).into_owned();
            if t <= 0.0 {
                return Ok(x);
            }
            let steps = ((g.steps as f64 * t).ceil() as usize).max(1);
            flow_map(field, &x, 0.0, t, steps)
        })
        .into_iter()
        .collect::<flowlab::Result<_>>()?;
        for (j, x) in states.iter().enumerate() {
            let c = labels[j].map(|c| c as i64).unwrap_or(-1);
            let _ = writeln!(snaps, "{},{j},{c}{}", fmt_f64(t), csv_values(x));
        }
        let clouds: Vec<ConvexRegion> = (0..4)
            .filter_map(|c| {
                let pts: Vec<Vec<f64>> = states
                    .iter()
                    .zip(&labels)
                    .filter(|(_, l)| **l == Some(c))
                    .map(|(x, _)| x.iter().copied().collect())
                    .collect();
                ConvexRegion::from_points(&pts).ok().map(|r| r.pruned())
            })
            .collect();
        let mut gap = f64::INFINITY;
        for a in 0..clouds.len() {
            for b in a + 1..clouds.len() {
                gap = gap.min(convex_distance(&clouds[a], &clouds[b], DEFAULT_DISTANCE_TOL)?);
            }
        }
        let _ = writeln!(gaps, "{},{}", fmt_f64(t), fmt_f64(gap));
    }
    out.write("snapshots.csv", &snaps)?;
    out.write("snapshot_gaps.csv", &gaps)?;
    Ok(())
}

// ---------------------------------------------------------------------------------------------
// bound-check

pub fn bound_check(cfg: &Config, out: &mut Output, svg: bool) -> anyhow::Result<bool> {
    let b = &cfg.bound_check;
    let data = load_data(&b.dataset, cfg.run.seed)?;
    if b.samples == 0 {
        bail!(ConfigError("bound_check.samples must be positive".into()));
    }
    // with a single data point every weight vector is one-hot, so the event is empty
    let m = if data.len() >= 2 { min_separation(&data)? } else { f64::NAN };
    let mut csv = String::from("t,tau,bound,p_hat,stderr,ok\n");
    let mut all_ok = true;
    let mut rows = Vec::new();
    let mut k = 0u64;
    for &t in &b.t {
        for &tau in &b.tau {
            let bound = if data.len() >= 2 { concentration_bound(t, tau, m, data.len())? } else { 0.0 };
            let (p, se) = estimate_nonconcentration(t, tau, &data, b.samples, RngSpec::new(cfg.run.seed, BOUND_STREAM).fork(k))?;
            k += 1;
            let ok = p - 3.0 * se <= bound;
            all_ok &= ok;
            let _ = writeln!(csv, "{},{},{},{},{},{}", fmt_f64(t), fmt_f64(tau), fmt_f64(bound), fmt_f64(p), fmt_f64(se), ok as u8);
            rows.push((t, tau, bound, p));
        }
    }
    out.write("bound.csv", &csv)?;
    if svg {
        let mut p = Plot::new("concentration bound vs Monte-Carlo", "t", "probability");
        for (i, &tau) in b.tau.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let sel: Vec<_> = rows.iter().filter(|r| r.1 == tau).collect();
            p.line(sel.iter().map(|r| (r.0, r.2.min(1.0))).collect(), color, 1.5)
                .dots(sel.iter().map(|r| (r.0, r.3)).collect(), color, 3.0)
                .legend(&format!("tau = {tau}"), color);
        }
        out.write("bound.svg", &p.render())?;
    }
    Ok(all_ok)
}

// ---------------------------------------------------------------------------------------------
// emb-approx

fn sign_changes(xs: &[f64]) -> usize {
    xs.windows(2).filter(|w| w[0] != 0.0 && w[1] != 0.0 && (w[0] > 0.0) != (w[1] > 0.0)).count()
}

pub fn emb_approx(cfg: &Config, out: &mut Output, svg: bool) -> anyhow::Result<bool> {
    let e = &cfg.emb_approx;
    if e.points < 2 || !(e.t_max > 0.0 && e.t_max < 1.0) || !(e.zoom > 0.0 && e.zoom < 1.0) {
        bail!(ConfigError("emb_approx needs points >= 2 and t_max, zoom in (0, 1)".into()));
    }
    let grid = |end: f64| -> Vec<f64> { (0..e.points).map(|k| k as f64 * end / (e.points - 1) as f64).collect() };
    let (full, zoom) = (grid(e.t_max), grid(e.zoom));
    let mut summary = String::from("scale,dim,rank,condition,fit_error,zoom_sign_changes\n");
    for &dim in &e.dims {
        let mut plot = Plot::new(&format!("limit curves, dim = {dim}"), "t", "|kappa . emb(t)|");
        plot.line(full.iter().map(|&t| (t, 1.0 / (1.0 - t))).collect(), "black", 1.0).legend("1/(1-t)", "black");
        for (i, &scale) in e.scales.iter().enumerate() {
            let emb = EmbeddingConfig::new(scale, e.wavelength, dim).map_err(|err| ConfigError(err.to_string()))?;
            let q = compute_quadratic_data(&emb, e.panels)?;
            let (kappa, rank) = kappa_limit_pinv(&q, DEFAULT_PINV_RCOND);
            let embedder = emb.embedder();
            let curve = |ts: &[f64]| -> (String, Vec<f64>) {
                let mut s = String::from("t,approx,target\n");
                let mut res = Vec::with_capacity(ts.len());
                for &t in ts {
                    let a = embedder.dot(kappa.as_slice(), t).abs();
                    let target = 1.0 / (1.0 - t);
                    res.push(a - target);
                    let _ = writeln!(s, "{},{},{}", fmt_f64(t), fmt_f64(a), fmt_f64(target));
                }
                (s, res)
            };
            let (main_csv, _) = curve(&full);
            let (zoom_csv, zoom_res) = curve(&zoom);
            out.write(&format!("emb/s{scale}_dim{dim}.csv"), &main_csv)?;
            out.write(&format!("emb/zoom_s{scale}_dim{dim}.csv"), &zoom_csv)?;
            let err = embedding_fit_error(&kappa, &emb, e.fit_t_max, e.panels);
            let _ = writeln!(
                summary,
                "{},{dim},{rank},{},{},{}",
                fmt_f64(scale),
                fmt_f64(q.condition()),
                fmt_f64(err),
                sign_changes(&zoom_res)
            );
            let color = PALETTE[i % PALETTE.len()];
            plot.line(full.iter().map(|&t| (t, embedder.dot(kappa.as_slice(), t).abs())).collect(), color, 1.0)
                .legend(&format!("s = {scale}"), color);
        }
        if svg {
            out.write(&format!("emb/dim{dim}.svg"), &plot.render())?;
        }
    }
    out.write("emb_summary.csv", &summary)?;
    Ok(true)
}

// ---------------------------------------------------------------------------------------------
// train

fn train_data(t: &TrainSection, seed: u64) -> anyhow::Result<(DataMatrix, SubspaceBasis)> {
    let data = match &t.data {
        Some(path) => {
            if !path.exists() {
                bail!(ConfigError(format!("training data {} not found", path.display())));
            }
            load_dataset(path, DataFormat::from_path(path))?
        }
        None => {
            let d = t.ambient_dim.unwrap_or(match t.mode {
                TrainMode::Offsubspace => 100,
                TrainMode::Subspace => 20,
            });
            let active = t.sub_dim.unwrap_or(20).min(d);
            synthetic::unit_cube_subspace(RngSpec::new(seed, DATA_STREAM), t.points.unwrap_or(200), d, active)?
        }
    };
    let basis = svd_decompose(&data, DEFAULT_RANK_TOL)?;
    Ok((data, basis))
}

fn apply_train_overrides(t: &TrainSection, c: &mut flowlab::trainer::TrainConfig, seed: u64) {
    c.rng = RngSpec::new(seed, 0);
    if let Some(v) = t.optimizer {
        c.optimizer = v;
    }
    if let Some(v) = t.learning_rate {
        c.learning_rate = v;
    }
    if let Some(v) = t.epochs {
        c.epochs = v;
    }
    if let Some(v) = t.batch {
        c.batch = v;
    }
    if let Some(v) = t.checkpoint_every {
        c.checkpoint_every = v;
    }
    if let Some(v) = t.eval_samples {
        c.eval_samples = v;
    }
    if let Some(v) = t.clip_norm {
        c.clip_norm = (v > 0.0).then_some(v);
    }
}

fn ckpt_name(epoch: usize) -> String {
    format!("checkpoints/ckpt_{epoch:06}.json")
}

pub fn train(cfg: &Config, out: &mut Output, svg: bool) -> anyhow::Result<bool> {
    let t = &cfg.train;
    let seed = cfg.run.seed;
    let (data, basis) = train_data(t, seed)?;
    out.write("dataset.csv", &dataset_csv_string(&data))?;
    out.write("basis.json", &serde_json::to_string_pretty(&basis.to_json())?)?;
    let resume = match &t.resume {
        Some(p) => Some(load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?),
        None => None,
    };
    let (history, result) = match t.mode {
        TrainMode::Offsubspace => {
            let mut c = OffsubspaceConfig::default();
            apply_train_overrides(t, &mut c.train, seed);
            if let Some(s) = t.emb_scale {
                c.emb.scale = s;
            }
            if let Some(d) = t.emb_dim {
                c.emb.dim = d;
            }
            let mut tr = match &resume {
                Some(ck) => OffsubspaceTrainer::resume(ck, &basis)?,
                None => OffsubspaceTrainer::new(&basis, c.clone(), None).map_err(config_or_runtime)?,
            };
            let epochs = tr.cfg.train.epochs;
            if resume.is_none() {
                out.write(&ckpt_name(0), &tr.checkpoint().to_json_string()?)?;
            }
            let res = tr.run_to(epochs, |s| {
                out.write(&ckpt_name(s.epoch), &s.checkpoint().to_json_string()?)
                    .map_err(|e| flowlab::Error::InvalidParameter(e.to_string()))
            });
            out.write("histograms.json", &histograms_json(&tr.history)?)?;
            (tr.history.clone(), res)
        }
        TrainMode::Subspace => {
            let mut c = SubspaceConfig::with_sub_dim(basis.rank());
            apply_train_overrides(t, &mut c.train, seed);
            if let Some(v) = t.hidden {
                c.net.hidden = v;
            }
            if let Some(v) = t.blocks {
                c.net.blocks = v;
            }
            if let Some(v) = t.emb_scale {
                c.net.emb.scale = v;
            }
            if let Some(v) = t.emb_dim {
                c.net.emb.dim = v;
            }
            let mut tr = match &resume {
                Some(ck) => SubspaceTrainer::resume(ck, &basis)?,
                None => SubspaceTrainer::new(&basis, c, None).map_err(config_or_runtime)?,
            };
            let epochs = tr.cfg.train.epochs;
            if resume.is_none() {
                out.write(&ckpt_name(0), &tr.checkpoint().to_json_string()?)?;
            }
            let res = tr.run_to(epochs, |s| {
                out.write(&ckpt_name(s.epoch), &s.checkpoint().to_json_string()?)
                    .map_err(|e| flowlab::Error::InvalidParameter(e.to_string()))
            });
            (tr.history.clone(), res)
        }
    };
    out.write("metrics.csv", &metrics_csv_string(&history))?;
    if svg {
        out.write("metrics.svg", &metrics_plot(&history, t.mode).render())?;
    }
    result?;
    Ok(true)
}

fn config_or_runtime(e: flowlab::Error) -> anyhow::Error {
    match e {
        flowlab::Error::InvalidParameter(m) | flowlab::Error::Shape(m) => ConfigError(m).into(),
        other => other.into(),
    }
}

fn metrics_plot(history: &[CheckpointMetrics], mode: TrainMode) -> Plot {
    let rel = |vals: Vec<(f64, f64)>| -> Vec<(f64, f64)> {
        let first = vals.first().map(|v| v.1).filter(|v| *v != 0.0).unwrap_or(1.0);
        vals.into_iter().map(|(e, v)| (e, v / first)).collect()
    };
    let mut p = Plot::new("training metrics (relative to epoch 0)", "epoch", "relative value");
    p.line(rel(history.iter().map(|m| (m.epoch as f64, m.loss)).collect()), PALETTE[0], 1.5)
        .legend("loss", PALETTE[0]);
    match mode {
        TrainMode::Offsubspace => {
            let pts = history.iter().filter_map(|m| m.off_norm_mean.map(|v| (m.epoch as f64, v))).collect();
            p.line(rel(pts), PALETTE[1], 1.5).legend("off-subspace norm", PALETTE[1]);
        }
        TrainMode::Subspace => {
            let pts = history.iter().filter_map(|m| m.mse.map(|v| (m.epoch as f64, v))).collect();
            p.line(rel(pts), PALETTE[1], 1.5).legend("mse", PALETTE[1]);
        }
    }
    p
}

// ---------------------------------------------------------------------------------------------
// verify

pub fn suite_config(cfg: &Config) -> SuiteConfig {
    let mut s = match cfg.verify.scale {
        SuiteScale::Quick => SuiteConfig::quick(cfg.run.seed),
        SuiteScale::Full => SuiteConfig::full(cfg.run.seed),
    };
    s.perturb_optimal = cfg.verify.perturb_optimal;
    s
}

pub fn verify(cfg: &Config, out: &mut Output, json: bool) -> anyhow::Result<bool> {
    let report: Report = run_suite(&suite_config(cfg), &cfg.verify.checks);
    let text: String = report.checks.iter().map(|c| c.line() + "\n").collect();
    let js = serde_json::to_string_pretty(&report)?;
    out.write("verify.txt", &text)?;
    out.write("verify.json", &js)?;
    if json {
        println!("{js}");
    } else {
        print!("{text}");
    }
    Ok(report.all_pass)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_change_count() {
        assert_eq!(sign_changes(&[1.0, -1.0, -2.0, 3.0, 0.0, 1.0]), 2);
    }

    #[test]
    fn missing_file_is_config_error() {
        let ds = DatasetSection {
            mode: DatasetMode::File,
            path: Some("/nonexistent/x.csv".into()),
            ..DatasetSection::default()
        };
        let e = load_data(&ds, 0).unwrap_err();
        assert!(e.downcast_ref::<ConfigError>().is_some());
    }
}
