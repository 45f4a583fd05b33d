//! Optimizers, the two teacher-student training loops, checkpoint metrics and resumable
//! checkpoints.
//!
//! One epoch is one optimizer step on a freshly drawn Monte-Carlo batch. Batch `k` draws from
//! `rng.with_stream(TRAIN).fork(k)`, so a resumed run replays the same batches.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::fmt_f64;
use crate::dynamics::{make_grid, GridKind, Method};
use crate::error::{invalid, Error, Result};
use crate::exec;
use crate::osdnet::{
    compute_quadratic_data, generation_factor, generate_subspace, DiagonalField, EmbeddingConfig, NetConfig,
    OptimalSubspace, QuadraticData, SubspaceModel, SubspaceNet, DEFAULT_PANELS, DEFAULT_TRAIN_EPSILON,
};
use crate::rng::{sample_standard_gaussian, standard_normal, RngSpec};
use crate::stats::{self, Histogram};
use crate::subspace::SubspaceBasis;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_CLIP_NORM: f64 = 10.0;
/// Training aborts once the monitored loss exceeds this multiple of its initial value.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const METRICS_HEADER: &str = "epoch,loss,off_norm_mean,off_norm_std,mse";

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const DIVERGENCE_CHECK_EVERY: usize = 100;
const GRAD_CHUNK: usize = 128;

// ---------------------------------------------------------------------------------------------
// Optimizers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

fn check_step(params: &[f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(invalid("non-finite gradient"));
    }
    Ok(())
}

/// `p ← p − lr·g`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    check_step(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

/// Decoupled weight decay followed by the bias-corrected Adam update.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, hp: &AdamWParams) -> Result<()> {
    check_step(params, grads)?;
    if state.m.len() != params.len() {
        return Err(Error::Shape("optimizer state does not match parameter count".into()));
    }
    state.step += 1;
    let c1 = 1.0 - hp.beta1.powi(state.step as i32);
    let c2 = 1.0 - hp.beta2.powi(state.step as i32);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = hp.beta1 * state.m[k] + (1.0 - hp.beta1) * g;
        state.v[k] = hp.beta2 * state.v[k] + (1.0 - hp.beta2) * g * g;
        params[k] -= lr * hp.weight_decay * params[k];
        params[k] -= lr * (state.m[k] / c1) / ((state.v[k] / c2).sqrt() + hp.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub adamw: AdamWParams,
    pub state: AdamState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            adamw: AdamWParams::default(),
            state: AdamState::new(if kind == OptimizerKind::Adamw { n } else { 0 }),
        })
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, grads, self.lr),
            OptimizerKind::Adamw => adamw_step(params, grads, &mut self.state, self.lr, &self.adamw),
        }
    }
}

/// Rescales `grads` to global norm at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let n = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if n > max_norm && n.is_finite() {
        let s = max_norm / n;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    n
}

// ---------------------------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch: usize,
    pub checkpoint_every: usize,
    /// Training times are drawn from `U[0, 1 − ε]`.
    pub epsilon: f64,
    pub rng: RngSpec,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Samples generated at each checkpoint.
    pub eval_samples: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch == 0 || self.checkpoint_every == 0 || self.eval_samples == 0 {
            return Err(invalid("batch, checkpoint_every and eval_samples must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(invalid(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(invalid("clip_norm must be positive"));
            }
        }
        Ok(())
    }

    pub fn is_checkpoint(&self, epoch: usize) -> bool {
        epoch % self.checkpoint_every == 0 || epoch == self.epochs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsubspaceConfig {
    pub train: TrainConfig,
    pub emb: EmbeddingConfig,
    pub panels: usize,
    /// Terminal gap of the generation grid used for the checkpoint samples.
    pub gen_epsilon: f64,
    pub histogram_bins: usize,
}

impl Default for OffsubspaceConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                optimizer: OptimizerKind::Sgd,
                learning_rate: 0.1,
                epochs: 80_000,
                batch: 1024,
                checkpoint_every: 20_000,
                epsilon: DEFAULT_TRAIN_EPSILON,
                rng: RngSpec::new(0, 0),
                clip_norm: Some(DEFAULT_CLIP_NORM),
                eval_samples: 10_000,
            },
            emb: EmbeddingConfig {
                scale: 1000.0,
                wavelength: 10000.0,
                dim: 256,
            },
            panels: DEFAULT_PANELS,
            gen_epsilon: 1e-4,
            histogram_bins: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceConfig {
    pub train: TrainConfig,
    pub net: NetConfig,
    /// Size of the frozen batch on which the reported loss is evaluated.
    pub eval_batch: usize,
    pub grid_steps: usize,
    pub grid_kind: GridKind,
    pub gen_epsilon: f64,
    pub method: Method,
}

impl SubspaceConfig {
    pub fn with_sub_dim(sub_dim: usize) -> Self {
        Self {
            train: TrainConfig {
                optimizer: OptimizerKind::Adamw,
                learning_rate: 1e-4,
                epochs: 20_000,
                batch: 1024,
                checkpoint_every: 1000,
                epsilon: DEFAULT_TRAIN_EPSILON,
                rng: RngSpec::new(0, 0),
                clip_norm: Some(DEFAULT_CLIP_NORM),
                eval_samples: 10_000,
            },
            net: NetConfig {
                sub_dim,
                hidden: 256,
                blocks: 2,
                emb: EmbeddingConfig {
                    scale: 10.0,
                    wavelength: 10000.0,
                    dim: 16,
                },
                activation: crate::osdnet::Activation::Silu,
            },
            eval_batch: 1024,
            grid_steps: 100,
            grid_kind: GridKind::Uniform,
            gen_epsilon: 1e-3,
            method: Method::Rk4,
        }
    }
}

// ---------------------------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub off_norm_mean: Option<f64>,
    pub off_norm_std: Option<f64>,
    pub histogram: Option<Histogram>,
    pub mse: Option<f64>,
    /// Mean distance from each generated sample to its nearest data point.
    pub nearest_mean: Option<f64>,
}

fn opt_field(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn metrics_csv_string(history: &[CheckpointMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in history {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            m.epoch,
            fmt_f64(m.loss),
            opt_field(m.off_norm_mean),
            opt_field(m.off_norm_std),
            opt_field(m.mse)
        ));
    }
    s
}

pub fn write_metrics_csv(path: &Path, history: &[CheckpointMetrics]) -> Result<()> {
    std::fs::write(path, metrics_csv_string(history))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRecord {
    pub epoch: usize,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean: f64,
    pub std: f64,
}

pub fn histograms_json(history: &[CheckpointMetrics]) -> Result<String> {
    let recs: Vec<HistogramRecord> = history
        .iter()
        .filter_map(|m| {
            m.histogram.as_ref().map(|h| HistogramRecord {
                epoch: m.epoch,
                edges: h.edges.clone(),
                counts: h.counts.clone(),
                mean: m.off_norm_mean.unwrap_or(f64::NAN),
                std: m.off_norm_std.unwrap_or(f64::NAN),
            })
        })
        .collect();
    Ok(serde_json::to_string_pretty(&recs)?)
}

/// Endpoint statistics of a subspace model against cached optimal endpoints from the same
/// noise: per-coordinate MSE and the mean nearest-data distance.
pub fn subspace_metrics(
    model: &dyn SubspaceModel,
    z0: &DMatrix<f64>,
    optimal_ends: &DMatrix<f64>,
    basis: &SubspaceBasis,
    grid: &crate::dynamics::TimeGrid,
    method: Method,
) -> Result<(f64, f64)> {
    let ends = generate_subspace(model, z0, grid, method)?;
    let n = ends.ncols();
    let mse = (&ends - optimal_ends).norm_squared() / (n * basis.ambient_dim()) as f64;
    let r = &basis.r;
    let nearest: Vec<f64> = exec::map_indexed(n, |j| {
        let e = ends.column(j);
        r.column_iter().map(|c| (e - c).norm()).fold(f64::INFINITY, f64::min)
    });
    Ok((mse, stats::mean(&nearest)))
}

// ---------------------------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ModelState {
    Offsubspace {
        ambient_dim: usize,
        off_dim: usize,
        emb: EmbeddingConfig,
        kappa: Vec<f64>,
    },
    Subspace {
        net: NetConfig,
        params: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RunConfig {
    Offsubspace(OffsubspaceConfig),
    Subspace(SubspaceConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: usize,
    pub rng: RngSpec,
    pub initial_loss: f64,
    pub config: RunConfig,
    pub model: ModelState,
    pub optimizer: Optimizer,
    pub history: Vec<CheckpointMetrics>,
}

impl Checkpoint {
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks the version before decoding the body; malformed input reports line and column.
    pub fn from_json_str(s: &str) -> Result<Checkpoint> {
        let value: serde_json::Value = serde_json::from_str(s)?;
        let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(serde_json::from_str(s)?)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_json_string()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json_str(&std::fs::read_to_string(path)?)
}

fn diverged(epoch: usize, loss: f64, initial: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial {
        return Err(Error::Diverged { epoch, loss, initial });
    }
    Ok(())
}

// ---------------------------------------------------------------------------------------------
// Off-subspace training: ŝ fixed at the optimum, κ trained on the reduced loss

/// Trains the shared `κ` of `Ô_t = κᵀemb(t)`.
///
/// Only `V⊥ᵀx` enters the off-subspace loss and `V⊥ᵀx = (1−t)V⊥ᵀξ` under the OT path, so a
/// sample reduces to `(t, q)` with `q = ‖V⊥ᵀξ‖² ∼ χ²(d−D)`. The per-sample loss is
/// `((1−t)ô + 1)²·q/(2(d−D))`, whose expectation is half the per-entry reduced loss.
pub struct OffsubspaceTrainer {
    pub cfg: OffsubspaceConfig,
    pub ambient_dim: usize,
    pub off_dim: usize,
    pub kappa: Vec<f64>,
    pub optimizer: Optimizer,
    pub epoch: usize,
    pub history: Vec<CheckpointMetrics>,
    pub initial_loss: f64,
    pub quad: QuadraticData,
    x0_norms: Vec<f64>,
    embedder: crate::osdnet::Embedder,
}

impl OffsubspaceTrainer {
    /// `kappa0 = None` starts from `κ = 0` (`Ô ≡ 0`).
    pub fn new(basis: &SubspaceBasis, cfg: OffsubspaceConfig, kappa0: Option<DVector<f64>>) -> Result<Self> {
        cfg.train.validate()?;
        cfg.emb.validate()?;
        if basis.off_dim() == 0 {
            return Err(invalid("off-subspace training needs d > D"));
        }
        let kappa: Vec<f64> = match kappa0 {
            Some(k) if k.len() == cfg.emb.dim => k.iter().copied().collect(),
            Some(k) => return Err(Error::Shape(format!("kappa0 has {} entries, expected {}", k.len(), cfg.emb.dim))),
            None => vec![0.0; cfg.emb.dim],
        };
        let optimizer = Optimizer::new(cfg.train.optimizer, cfg.train.learning_rate, kappa.len())?;
        let mut t = Self::assemble(basis.ambient_dim(), basis.off_dim(), cfg, kappa, optimizer, basis)?;
        t.initial_loss = t.exact_loss();
        t.history.push(t.metrics()?);
        Ok(t)
    }

    fn assemble(
        ambient_dim: usize,
        off_dim: usize,
        cfg: OffsubspaceConfig,
        kappa: Vec<f64>,
        optimizer: Optimizer,
        basis: &SubspaceBasis,
    ) -> Result<Self> {
        let quad = compute_quadratic_data(&cfg.emb, cfg.panels)?;
        let x0 = sample_standard_gaussian(cfg.train.rng.with_stream(NOISE_STREAM), ambient_dim, cfg.train.eval_samples)?;
        let proj = basis.v_perp.tr_mul(&x0);
        let x0_norms = proj.column_iter().map(|c| c.norm()).collect();
        Ok(Self {
            embedder: cfg.emb.embedder(),
            ambient_dim,
            off_dim,
            kappa,
            optimizer,
            epoch: 0,
            history: Vec::new(),
            initial_loss: f64::NAN,
            quad,
            x0_norms,
            cfg,
        })
    }

    pub fn resume(ckpt: &Checkpoint, basis: &SubspaceBasis) -> Result<Self> {
        let cfg = match &ckpt.config {
            RunConfig::Offsubspace(c) => c.clone(),
            _ => return Err(invalid("checkpoint is not an off-subspace run")),
        };
        let (ambient_dim, off_dim, kappa) = match &ckpt.model {
            ModelState::Offsubspace {
                ambient_dim,
                off_dim,
                kappa,
                ..
            } => (*ambient_dim, *off_dim, kappa.clone()),
            _ => return Err(invalid("checkpoint model is not a diagonal field")),
        };
        if ambient_dim != basis.ambient_dim() || off_dim != basis.off_dim() {
            return Err(Error::Shape("checkpoint dimensions do not match the basis".into()));
        }
        let mut t = Self::assemble(ambient_dim, off_dim, cfg, kappa, ckpt.optimizer.clone(), basis)?;
        t.epoch = ckpt.epoch;
        t.history = ckpt.history.clone();
        t.initial_loss = ckpt.initial_loss;
        Ok(t)
    }

    pub fn diagonal(&self) -> DiagonalField {
        DiagonalField::Shared {
            emb: self.cfg.emb,
            kappa: self.kappa.clone(),
        }
    }

    /// `(d−D)·(κᵀAκ + 2bᵀκ + 1)`, the reduced loss over `[0, 1]`.
    pub fn exact_loss(&self) -> f64 {
        self.off_dim as f64 * self.quad.loss(&DVector::from_column_slice(&self.kappa))
    }

    /// Off-subspace norms of the checkpoint samples: the off-subspace ODE is `ṗ = ô_t p`, so
    /// every endpoint is `factor·V⊥ᵀx₀` with one scalar factor for the whole batch.
    pub fn off_norms(&self) -> Result<Vec<f64>> {
        let f = generation_factor(&self.diagonal(), self.cfg.gen_epsilon)?.abs();
        Ok(self.x0_norms.iter().map(|n| f * n).collect())
    }

    fn metrics(&self) -> Result<CheckpointMetrics> {
        let norms = self.off_norms()?;
        Ok(CheckpointMetrics {
            epoch: self.epoch,
            loss: self.exact_loss(),
            off_norm_mean: Some(stats::mean(&norms)),
            off_norm_std: Some(stats::std_dev(&norms)),
            histogram: Some(Histogram::from_samples(&norms, self.cfg.histogram_bins)),
            mse: None,
            nearest_mean: None,
        })
    }

    /// Batch loss and gradient for epoch `epoch`.
    pub fn batch_gradient(&self, epoch: usize) -> Result<(f64, Vec<f64>)> {
        let spec = self.cfg.train.rng.with_stream(TRAIN_STREAM).fork(epoch as u64);
        let chi = ChiSquared::new(self.off_dim as f64).map_err(|e| invalid(e.to_string()))?;
        let (b, dim, off) = (self.cfg.train.batch, self.cfg.emb.dim, self.off_dim as f64);
        let end = 1.0 - self.cfg.train.epsilon;
        let (loss, grad) = exec::chunked_reduce(
            b,
            || (0.0, vec![0.0; dim]),
            |acc, j| {
                let mut r = spec.fork(j as u64).rng();
                let t = r.random::<f64>() * end;
                let q = chi.sample(&mut r);
                let mut e = vec![0.0; dim];
                self.embedder.embed_into(t, &mut e);
                let o: f64 = e.iter().zip(&self.kappa).map(|(a, k)| a * k).sum();
                let res = (1.0 - t) * o + 1.0;
                acc.0 += res * res * q / (2.0 * off);
                let w = res * (1.0 - t) * q / off;
                for (g, v) in acc.1.iter_mut().zip(&e) {
                    *g += w * v;
                }
            },
            |a, b| {
                a.0 += b.0;
                for (x, y) in a.1.iter_mut().zip(b.1) {
                    *x += y;
                }
            },
        );
        let inv = 1.0 / b as f64;
        Ok((loss * inv, grad.into_iter().map(|g| g * inv).collect()))
    }

    pub fn step(&mut self) -> Result<()> {
        let epoch = self.epoch + 1;
        let (_, mut grad) = self.batch_gradient(epoch)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { epoch });
        }
        if let Some(c) = self.cfg.train.clip_norm {
            clip_global_norm(&mut grad, c);
        }
        self.optimizer.step(&mut self.kappa, &grad)?;
        self.epoch = epoch;
        if epoch % DIVERGENCE_CHECK_EVERY == 0 {
            diverged(epoch, self.exact_loss(), self.initial_loss)?;
        }
        Ok(())
    }

    /// Steps until `until` (capped at the configured epochs), recording metrics and calling
    /// `on_checkpoint` at every checkpoint epoch.
    pub fn run_to<F>(&mut self, until: usize, mut on_checkpoint: F) -> Result<()>
    where
        F: FnMut(&Self) -> Result<()>,
    {
        let until = until.min(self.cfg.train.epochs);
        while self.epoch < until {
            self.step()?;
            if self.cfg.train.is_checkpoint(self.epoch) {
                let m = self.metrics()?;
                diverged(self.epoch, m.loss, self.initial_loss)?;
                self.history.push(m);
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            rng: self.cfg.train.rng,
            initial_loss: self.initial_loss,
            config: RunConfig::Offsubspace(self.cfg.clone()),
            model: ModelState::Offsubspace {
                ambient_dim: self.ambient_dim,
                off_dim: self.off_dim,
                emb: self.cfg.emb,
                kappa: self.kappa.clone(),
            },
            optimizer: self.optimizer.clone(),
            history: self.history.clone(),
        }
    }
}

pub fn train_offsubspace(basis: &SubspaceBasis, cfg: OffsubspaceConfig) -> Result<OffsubspaceTrainer> {
    let epochs = cfg.train.epochs;
    let mut t = OffsubspaceTrainer::new(basis, cfg, None)?;
    t.run_to(epochs, |_| Ok(()))?;
    Ok(t)
}

// ---------------------------------------------------------------------------------------------
// Subspace training: Ô fixed at the optimum, ŝ trained against ŝ*

/// A batch of `(z, t)` inputs with optimal targets.
#[derive(Debug, Clone)]
pub struct SubspaceBatch {
    pub z: DMatrix<f64>,
    pub ts: Vec<f64>,
    pub target: DMatrix<f64>,
}

/// `z = Vᵀx` for `x ∼ p_t` is `t·rⁱ + (1−t)ξ` with `ξ ∼ N(0, I_D)`. Sample `j` uses
/// `spec.fork(j)`.
pub fn draw_subspace_batch(opt: &OptimalSubspace, spec: RngSpec, size: usize, epsilon: f64) -> SubspaceBatch {
    let (dsub, n) = (opt.r.nrows(), opt.r.ncols());
    let cols: Vec<(f64, DVector<f64>, DVector<f64>)> = exec::map_indexed(size, |j| {
        let mut r = spec.fork(j as u64).rng();
        let t = r.random::<f64>() * (1.0 - epsilon);
        let i = r.random_range(0..n);
        let z = DVector::from_fn(dsub, |k, _| t * opt.r[(k, i)] + (1.0 - t) * standard_normal(&mut r));
        let target = opt.forward(&z, t);
        (t, z, target)
    });
    let mut z = DMatrix::zeros(dsub, size);
    let mut target = DMatrix::zeros(dsub, size);
    let mut ts = Vec::with_capacity(size);
    for (j, (t, zc, tc)) in cols.into_iter().enumerate() {
        ts.push(t);
        z.set_column(j, &zc);
        target.set_column(j, &tc);
    }
    SubspaceBatch { z, ts, target }
}

/// Mean squared residual `‖ŝ − ŝ*‖²` over the batch and, if requested, its parameter gradient.
pub fn subspace_loss_grad(net: &SubspaceNet, batch: &SubspaceBatch, with_grad: bool) -> (f64, Option<Vec<f64>>) {
    let b = batch.ts.len();
    let chunks = b.div_ceil(GRAD_CHUNK);
    let np = net.num_params();
    let parts: Vec<(f64, Vec<f64>)> = exec::map_indexed(chunks, |c| {
        let start = c * GRAD_CHUNK;
        let w = GRAD_CHUNK.min(b - start);
        let z = batch.z.columns(start, w).into_owned();
        let ts = &batch.ts[start..start + w];
        let cache = net.forward_cached(&z, ts);
        let res = &cache.output - batch.target.columns(start, w);
        let loss = res.norm_squared();
        if !with_grad {
            return (loss, Vec::new());
        }
        let (g, _) = net.backward(&cache, &(res * (2.0 / b as f64)));
        (loss, g)
    });
    let mut loss = 0.0;
    let mut grad = if with_grad { vec![0.0; np] } else { Vec::new() };
    for (l, g) in parts {
        loss += l;
        for (a, v) in grad.iter_mut().zip(g) {
            *a += v;
        }
    }
    (loss / b as f64, with_grad.then_some(grad))
}

pub struct SubspaceTrainer {
    pub cfg: SubspaceConfig,
    pub net: SubspaceNet,
    pub optimizer: Optimizer,
    pub epoch: usize,
    pub history: Vec<CheckpointMetrics>,
    pub initial_loss: f64,
    basis: SubspaceBasis,
    opt: OptimalSubspace,
    eval: SubspaceBatch,
    z0: DMatrix<f64>,
    optimal_ends: DMatrix<f64>,
    grid: crate::dynamics::TimeGrid,
}

impl SubspaceTrainer {
    pub fn new(basis: &SubspaceBasis, cfg: SubspaceConfig, net: Option<SubspaceNet>) -> Result<Self> {
        cfg.train.validate()?;
        if cfg.net.sub_dim != basis.rank() {
            return Err(Error::Shape(format!(
                "network sub_dim {} differs from basis rank {}",
                cfg.net.sub_dim,
                basis.rank()
            )));
        }
        let net = match net {
            Some(n) if n.config() == &cfg.net => n,
            Some(_) => return Err(invalid("initial network does not match the configured architecture")),
            None => SubspaceNet::init(cfg.net, cfg.train.rng.with_stream(0).fork(0))?,
        };
        let optimizer = Optimizer::new(cfg.train.optimizer, cfg.train.learning_rate, net.num_params())?;
        let mut t = Self::assemble(basis, cfg, net, optimizer)?;
        t.initial_loss = t.eval_loss();
        t.history.push(t.metrics()?);
        Ok(t)
    }

    fn assemble(basis: &SubspaceBasis, cfg: SubspaceConfig, net: SubspaceNet, optimizer: Optimizer) -> Result<Self> {
        let opt = OptimalSubspace::new(basis);
        let eval = draw_subspace_batch(&opt, cfg.train.rng.with_stream(EVAL_STREAM).fork(0), cfg.eval_batch, cfg.train.epsilon);
        let x0 = sample_standard_gaussian(cfg.train.rng.with_stream(NOISE_STREAM), basis.ambient_dim(), cfg.train.eval_samples)?;
        let z0 = basis.v.tr_mul(&x0);
        let grid = make_grid(cfg.grid_kind, cfg.grid_steps, cfg.gen_epsilon)?;
        let optimal_ends = generate_subspace(&opt, &z0, &grid, cfg.method)?;
        Ok(Self {
            basis: basis.clone(),
            net,
            optimizer,
            epoch: 0,
            history: Vec::new(),
            initial_loss: f64::NAN,
            opt,
            eval,
            z0,
            optimal_ends,
            grid,
            cfg,
        })
    }

    pub fn resume(ckpt: &Checkpoint, basis: &SubspaceBasis) -> Result<Self> {
        let cfg = match &ckpt.config {
            RunConfig::Subspace(c) => c.clone(),
            _ => return Err(invalid("checkpoint is not a subspace run")),
        };
        let net = match &ckpt.model {
            ModelState::Subspace { net, params } => SubspaceNet::from_params(*net, params.clone())?,
            _ => return Err(invalid("checkpoint model is not a subspace network")),
        };
        if net.sub_dim() != basis.rank() {
            return Err(Error::Shape("checkpoint network does not match the basis rank".into()));
        }
        let mut t = Self::assemble(basis, cfg, net, ckpt.optimizer.clone())?;
        t.epoch = ckpt.epoch;
        t.history = ckpt.history.clone();
        t.initial_loss = ckpt.initial_loss;
        Ok(t)
    }

    pub fn eval_loss(&self) -> f64 {
        subspace_loss_grad(&self.net, &self.eval, false).0
    }

    pub fn optimal_model(&self) -> &OptimalSubspace {
        &self.opt
    }

    /// MSE and nearest-data distance of an arbitrary model on this run's frozen noise.
    pub fn endpoint_metrics(&self, model: &dyn SubspaceModel) -> Result<(f64, f64)> {
        subspace_metrics(model, &self.z0, &self.optimal_ends, &self.basis, &self.grid, self.cfg.method)
    }

    fn metrics(&self) -> Result<CheckpointMetrics> {
        let (mse, nearest) = self.endpoint_metrics(&self.net)?;
        Ok(CheckpointMetrics {
            epoch: self.epoch,
            loss: self.eval_loss(),
            off_norm_mean: None,
            off_norm_std: None,
            histogram: None,
            mse: Some(mse),
            nearest_mean: Some(nearest),
        })
    }

    pub fn step(&mut self) -> Result<()> {
        let epoch = self.epoch + 1;
        let spec = self.cfg.train.rng.with_stream(TRAIN_STREAM).fork(epoch as u64);
        let batch = draw_subspace_batch(&self.opt, spec, self.cfg.train.batch, self.cfg.train.epsilon);
        let (_, grad) = subspace_loss_grad(&self.net, &batch, true);
        let mut grad = grad.unwrap();
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { epoch });
        }
        if let Some(c) = self.cfg.train.clip_norm {
            clip_global_norm(&mut grad, c);
        }
        self.optimizer.step(self.net.params_mut(), &grad)?;
        self.epoch = epoch;
        Ok(())
    }

    pub fn run_to<F>(&mut self, until: usize, mut on_checkpoint: F) -> Result<()>
    where
        F: FnMut(&Self) -> Result<()>,
    {
        let until = until.min(self.cfg.train.epochs);
        while self.epoch < until {
            self.step()?;
            if self.cfg.train.is_checkpoint(self.epoch) {
                let m = self.metrics()?;
                diverged(self.epoch, m.loss, self.initial_loss)?;
                self.history.push(m);
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            rng: self.cfg.train.rng,
            initial_loss: self.initial_loss,
            config: RunConfig::Subspace(self.cfg.clone()),
            model: ModelState::Subspace {
                net: *self.net.config(),
                params: self.net.params().to_vec(),
            },
            optimizer: self.optimizer.clone(),
            history: self.history.clone(),
        }
    }
}

pub fn train_subspace(basis: &SubspaceBasis, cfg: SubspaceConfig) -> Result<SubspaceTrainer> {
    let epochs = cfg.train.epochs;
    let mut t = SubspaceTrainer::new(basis, cfg, None)?;
    t.run_to(epochs, |_| Ok(()))?;
    Ok(t)
}

/// Mean of `‖V⊥ᵀx₀‖` for `x₀ ∼ N(0, I_d)`: the chi mean `√2·Γ((k+1)/2)/Γ(k/2)`, `k = d − D`.
pub fn chi_mean(k: usize) -> f64 {
    let k = k as f64;
    (0.5 * 2f64.ln() + libm::lgamma((k + 1.0) / 2.0) - libm::lgamma(k / 2.0)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataMatrix;
    use crate::osdnet::{kappa_limit_pinv, Activation, DEFAULT_PINV_RCOND};
    use crate::subspace::{svd_decompose, DEFAULT_RANK_TOL};

    fn basis(seed: u64, n: usize, d: usize, active: usize) -> (DataMatrix, SubspaceBasis) {
        let data = crate::data::synthetic::unit_cube_subspace(RngSpec::new(seed, 0), n, d, active).unwrap();
        let b = svd_decompose(&data, DEFAULT_RANK_TOL).unwrap();
        (data, b)
    }

    fn small_off_cfg() -> OffsubspaceConfig {
        let mut c = OffsubspaceConfig::default();
        c.train.epochs = 300;
        c.train.batch = 64;
        c.train.checkpoint_every = 100;
        c.train.eval_samples = 500;
        c.emb = EmbeddingConfig::new(20.0, 100.0, 8).unwrap();
        c.panels = 64;
        c.histogram_bins = 10;
        c
    }

    fn small_sub_cfg(d: usize) -> SubspaceConfig {
        let mut c = SubspaceConfig::with_sub_dim(d);
        c.train.epochs = 200;
        c.train.batch = 64;
        c.train.checkpoint_every = 50;
        c.train.eval_samples = 100;
        c.train.learning_rate = 1e-3;
        c.net.hidden = 16;
        c.net.activation = Activation::Silu;
        c.eval_batch = 128;
        c.grid_steps = 20;
        c
    }

    #[test]
    fn optimizer_examples() {
        let mut p = vec![1.0, -2.0];
        sgd_step(&mut p, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        // f(p) = ½p²: p ← 0.9p
        let mut p = vec![3.0];
        for _ in 0..5 {
            let g = [p[0]];
            sgd_step(&mut p, &g, 0.1).unwrap();
        }
        assert!((p[0] - 3.0 * 0.9f64.powi(5)).abs() < 1e-14);
        let hp = AdamWParams {
            weight_decay: 0.0,
            ..AdamWParams::default()
        };
        for scale in [1e-6, 1.0, 1e6] {
            let mut p = vec![0.5];
            let mut s = AdamState::new(1);
            adamw_step(&mut p, &[scale], &mut s, 1e-3, &hp).unwrap();
            assert!(((0.5 - p[0]) - 1e-3).abs() < 1e-5, "scale {scale}");
        }
        let mut p = vec![0.5];
        let mut s = AdamState::new(1);
        adamw_step(&mut p, &[0.0], &mut s, 1e-3, &hp).unwrap();
        assert_eq!(p[0], 0.5);
        assert!(sgd_step(&mut p, &[f64::NAN], 0.1).is_err());
        assert!(sgd_step(&mut p, &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g, vec![3.0, 4.0]);
        clip_global_norm(&mut g, 1.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn chi_mean_values() {
        assert!((chi_mean(1) - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
        assert!((chi_mean(2) - (std::f64::consts::PI / 2.0).sqrt()).abs() < 1e-12);
        let m80 = chi_mean(80);
        // √k·(1 − 1/(4k)) to second order
        assert!((m80 - 80f64.sqrt() * (1.0 - 1.0 / 320.0)).abs() < 1e-4);
    }

    #[test]
    fn offsubspace_batch_gradient_is_unbiased() {
        let (_, b) = basis(1, 12, 10, 3);
        let cfg = small_off_cfg();
        let mut big = cfg.clone();
        big.train.batch = 200_000;
        let k0 = DVector::from_vec(vec![0.3, -0.5, 0.1, -0.2, 0.0, 0.4, -0.1, 0.2]);
        let t = OffsubspaceTrainer::new(&b, big, Some(k0.clone())).unwrap();
        let (_, g) = t.batch_gradient(1).unwrap();
        // E[grad] = (Aκ + b)/(1−ε) up to the truncation of t at 1−ε
        let expect = t.quad.gradient(&k0) * 0.5;
        let err = (DVector::from_vec(g) - &expect).amax();
        assert!(err < 0.02 * expect.amax().max(0.1), "{err}");
    }

    #[test]
    fn offsubspace_training_decreases_off_norm() {
        let (_, b) = basis(2, 12, 10, 3);
        let t = train_offsubspace(&b, small_off_cfg()).unwrap();
        assert_eq!(t.history.len(), 4);
        let means: Vec<f64> = t.history.iter().map(|m| m.off_norm_mean.unwrap()).collect();
        assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
        for m in &t.history {
            assert_eq!(m.histogram.as_ref().unwrap().total(), 500);
        }
        let losses: Vec<f64> = t.history.iter().map(|m| m.loss).collect();
        let epochs: Vec<f64> = t.history.iter().map(|m| m.epoch as f64).collect();
        assert!(stats::ls_slope(&epochs, &losses) < 0.0);
    }

    #[test]
    fn offsubspace_fixed_point_is_flat() {
        let (_, b) = basis(3, 12, 10, 3);
        let cfg = small_off_cfg();
        let q = compute_quadratic_data(&cfg.emb, cfg.panels).unwrap();
        let (k, _) = kappa_limit_pinv(&q, DEFAULT_PINV_RCOND);
        let mut t = OffsubspaceTrainer::new(&b, cfg, Some(k)).unwrap();
        t.run_to(300, |_| Ok(())).unwrap();
        let m0 = t.history[0].off_norm_mean.unwrap();
        for m in &t.history {
            assert!((m.off_norm_mean.unwrap() / m0 - 1.0).abs() < 0.05);
            assert!((m.loss / t.history[0].loss - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let (_, b) = basis(4, 12, 10, 3);
        let mut cfg = small_off_cfg();
        cfg.train.learning_rate = 50.0;
        cfg.train.clip_norm = None;
        let err = train_offsubspace(&b, cfg).err().unwrap();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn offsubspace_resume_is_bit_identical() {
        let (_, b) = basis(5, 12, 10, 3);
        let mut cfg = small_off_cfg();
        cfg.train.epochs = 150;
        cfg.train.checkpoint_every = 50;
        let full = train_offsubspace(&b, cfg.clone()).unwrap();
        let mut part = OffsubspaceTrainer::new(&b, cfg, None).unwrap();
        part.run_to(50, |_| Ok(())).unwrap();
        let text = part.checkpoint().to_json_string().unwrap();
        let mut resumed = OffsubspaceTrainer::resume(&Checkpoint::from_json_str(&text).unwrap(), &b).unwrap();
        resumed.run_to(150, |_| Ok(())).unwrap();
        assert_eq!(resumed.kappa, full.kappa);
        assert_eq!(resumed.history, full.history);
    }

    #[test]
    fn subspace_training_and_resume() {
        let (_, b) = basis(6, 30, 4, 4);
        let cfg = small_sub_cfg(4);
        let full = train_subspace(&b, cfg.clone()).unwrap();
        assert_eq!(full.history.len(), 5);
        assert!(full.history.last().unwrap().loss < full.history[0].loss);
        let mut part = SubspaceTrainer::new(&b, cfg, None).unwrap();
        part.run_to(100, |_| Ok(())).unwrap();
        let text = part.checkpoint().to_json_string().unwrap();
        let back = Checkpoint::from_json_str(&text).unwrap();
        assert_eq!(back.to_json_string().unwrap(), text);
        let mut resumed = SubspaceTrainer::resume(&back, &b).unwrap();
        resumed.run_to(200, |_| Ok(())).unwrap();
        assert_eq!(resumed.net.params(), full.net.params());
        assert_eq!(resumed.history, full.history);
        assert_eq!(resumed.optimizer, full.optimizer);
    }

    #[test]
    fn optimal_model_has_zero_mse() {
        let (_, b) = basis(7, 30, 4, 4);
        let t = SubspaceTrainer::new(&b, small_sub_cfg(4), None).unwrap();
        let (mse, _) = t.endpoint_metrics(t.optimal_model()).unwrap();
        assert_eq!(mse, 0.0);
    }

    #[test]
    fn checkpoint_errors() {
        assert!(matches!(
            Checkpoint::from_json_str("{\"version\": 99}"),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));
        match Checkpoint::from_json_str("{\"version\": 1,\n \"epoch\": ") {
            Err(Error::Json { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn metrics_csv_layout() {
        let h = vec![CheckpointMetrics {
            epoch: 0,
            loss: 1.5,
            off_norm_mean: Some(2.0),
            off_norm_std: None,
            histogram: None,
            mse: None,
            nearest_mean: None,
        }];
        let s = metrics_csv_string(&h);
        let mut lines = s.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 5);
        assert_eq!(row[0], "0");
        assert_eq!(row[1].parse::<f64>().unwrap(), 1.5);
        assert_eq!(row[3], "");
    }
}
