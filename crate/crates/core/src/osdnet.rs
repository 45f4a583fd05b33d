//! Orthogonal subspace decomposition of a velocity field,
//! `v̂_t(x) = V⊥·Ô_t·V⊥ᵀx + V·ŝ_t(Vᵀx)`.
//!
//! `Ô_t` is diagonal, each entry a linear read-out `κᵀemb(t)` of a sinusoidal time embedding,
//! which makes its squared loss a quadratic in `κ` with closed-form gradient flow. `ŝ_t` is
//! either the optimal subspace field or a small residual network.

use nalgebra::{DMatrix, DMatrixView, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::dynamics::{Method, TimeGrid};
use crate::error::{check_open_time, invalid, Error, Result};
use crate::exec;
use crate::field::VelocityField;
use crate::paths::{softmax_in_place, softmax_weights, OtSchedule, PathSchedule};
use crate::quadrature;
use crate::rng::{standard_normal, RngSpec};
use crate::subspace::SubspaceBasis;

pub const DEFAULT_PANELS: usize = 2048;
/// Agreement required between `panels` and `2·panels` quadrature.
pub const CERTIFY_TOL: f64 = 1e-9;
pub const MAX_CONDITION: f64 = 1e12;
/// Relative eigenvalue cutoff of the truncated pseudo-inverse.
pub const DEFAULT_PINV_RCOND: f64 = 1e-10;
/// Terminal gap for training-time sampling, `t ∼ U[0, 1 − ε]`.
pub const DEFAULT_TRAIN_EPSILON: f64 = 1e-3;
/// Columns per parallel work item in batched evaluation.
const BATCH_CHUNK: usize = 128;

// ---------------------------------------------------------------------------------------------
// Time embedding

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub scale: f64,
    pub wavelength: f64,
    pub dim: usize,
}

impl EmbeddingConfig {
    pub fn new(scale: f64, wavelength: f64, dim: usize) -> Result<Self> {
        let cfg = Self {
            scale,
            wavelength,
            dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.dim % 2 != 0 {
            return Err(invalid(format!("embedding dim must be even and >= 2, got {}", self.dim)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(invalid(format!("embedding scale must be positive, got {}", self.scale)));
        }
        if !(self.wavelength > 1.0 && self.wavelength.is_finite()) {
            return Err(invalid(format!("embedding wavelength must exceed 1, got {}", self.wavelength)));
        }
        Ok(())
    }

    /// `ω_k = s / ℓ^{2k/dim}` for `k < dim/2`.
    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.dim / 2)
            .map(|k| self.scale / self.wavelength.powf(2.0 * k as f64 / self.dim as f64))
            .collect()
    }

    pub fn embedder(&self) -> Embedder {
        Embedder {
            cfg: *self,
            freqs: self.frequencies(),
        }
    }

    pub fn embed(&self, t: f64) -> DVector<f64> {
        self.embedder().embed(t)
    }

    /// `∫_a^b emb(t) dt` from the antiderivatives, in product form to avoid cancellation at
    /// small frequencies.
    pub fn integral(&self, a: f64, b: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for (k, w) in self.frequencies().into_iter().enumerate() {
            let half = 0.5 * w * (b - a);
            let mid = 0.5 * w * (a + b);
            let s = 2.0 * half.sin() / w;
            out[2 * k] = mid.sin() * s;
            out[2 * k + 1] = mid.cos() * s;
        }
        out
    }
}

/// An embedding with precomputed frequencies.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub cfg: EmbeddingConfig,
    freqs: Vec<f64>,
}

impl Embedder {
    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    /// Entry `2k = sin(ω_k t)`, entry `2k+1 = cos(ω_k t)`.
    pub fn embed_into(&self, t: f64, out: &mut [f64]) {
        for (k, w) in self.freqs.iter().enumerate() {
            let (s, c) = (w * t).sin_cos();
            out[2 * k] = s;
            out[2 * k + 1] = c;
        }
    }

    pub fn embed(&self, t: f64) -> DVector<f64> {
        let mut v = DVector::zeros(self.cfg.dim);
        self.embed_into(t, v.as_mut_slice());
        v
    }

    /// `κᵀemb(t)` without allocating.
    pub fn dot(&self, kappa: &[f64], t: f64) -> f64 {
        self.freqs
            .iter()
            .enumerate()
            .map(|(k, w)| {
                let (s, c) = (w * t).sin_cos();
                kappa[2 * k] * s + kappa[2 * k + 1] * c
            })
            .sum()
    }
}

pub fn emb(t: f64, cfg: &EmbeddingConfig) -> Result<DVector<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange { t, range: "[0, 1]" });
    }
    cfg.validate()?;
    Ok(cfg.embed(t))
}

// ---------------------------------------------------------------------------------------------
// Diagonal off-subspace dynamics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DiagonalField {
    /// Every diagonal entry equals `κᵀemb(t)`.
    Shared { emb: EmbeddingConfig, kappa: Vec<f64> },
    /// Entry `j` equals `κ_jᵀemb(t)`; one row per off-subspace direction.
    PerEntry { emb: EmbeddingConfig, kappa: Vec<Vec<f64>> },
    Constant { value: f64 },
    /// `ô_t = −1/(1−t)`.
    Optimal,
}

impl DiagonalField {
    pub fn shared(emb: EmbeddingConfig, kappa: &DVector<f64>) -> Result<Self> {
        emb.validate()?;
        if kappa.len() != emb.dim {
            return Err(Error::Shape(format!("kappa has {} entries, embedding dim is {}", kappa.len(), emb.dim)));
        }
        Ok(DiagonalField::Shared {
            emb,
            kappa: kappa.iter().copied().collect(),
        })
    }

    pub fn is_per_entry(&self) -> bool {
        matches!(self, DiagonalField::PerEntry { .. })
    }

    /// The common diagonal value, or `None` in per-entry mode.
    pub fn shared_value(&self, t: f64) -> Option<f64> {
        match self {
            DiagonalField::Shared { emb, kappa } => Some(emb.embedder().dot(kappa, t)),
            DiagonalField::PerEntry { .. } => None,
            DiagonalField::Constant { value } => Some(*value),
            DiagonalField::Optimal => Some(-1.0 / (1.0 - t)),
        }
    }

    /// All `off_dim` diagonal values at time `t`.
    pub fn entries(&self, t: f64, off_dim: usize) -> Vec<f64> {
        match self {
            DiagonalField::PerEntry { emb, kappa } => {
                let e = emb.embedder();
                kappa.iter().map(|k| e.dot(k, t)).collect()
            }
            other => vec![other.shared_value(t).expect("shared mode"); off_dim],
        }
    }

    pub fn kappa(&self) -> Option<DVector<f64>> {
        match self {
            DiagonalField::Shared { kappa, .. } => Some(DVector::from_column_slice(kappa)),
            _ => None,
        }
    }
}

/// `∫₀¹ ô_t dt` exponentiated: the endpoint multiplier of `V⊥V⊥ᵀx` when the diagonal entries
/// commute (always, here).
#[derive(Debug, Clone, PartialEq)]
pub enum ExpFactor {
    Shared(f64),
    PerEntry(Vec<f64>),
}

pub fn diagonal_exponential(o: &DiagonalField, panels: usize) -> Result<ExpFactor> {
    if panels == 0 {
        return Err(invalid("panels must be >= 1"));
    }
    Ok(match o {
        DiagonalField::Optimal => ExpFactor::Shared(0.0),
        DiagonalField::Constant { value } => ExpFactor::Shared(value.exp()),
        DiagonalField::Shared { emb, kappa } => {
            let e = emb.embedder();
            ExpFactor::Shared(quadrature::integrate(|t| e.dot(kappa, t), 0.0, 1.0, panels).exp())
        }
        DiagonalField::PerEntry { emb, kappa } => {
            let e = emb.embedder();
            ExpFactor::PerEntry(
                kappa
                    .iter()
                    .map(|k| quadrature::integrate(|t| e.dot(k, t), 0.0, 1.0, panels).exp())
                    .collect(),
            )
        }
    })
}

/// Off-subspace multiplier of generation: exact solution of `ṗ = ô_t p` up to `1−ε`, then the
/// closing Euler step, `exp(∫₀^{1−ε} ô)·(1 + ε·ô_{1−ε})`. Shared modes only.
pub fn generation_factor(o: &DiagonalField, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(invalid(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    let end = 1.0 - epsilon;
    let integral = match o {
        // exp(ln ε)·(1 − ε/ε)
        DiagonalField::Optimal => return Ok(0.0),
        DiagonalField::Constant { value } => value * end,
        DiagonalField::Shared { emb, kappa } => emb.integral(0.0, end).dot(&DVector::from_column_slice(kappa)),
        DiagonalField::PerEntry { .. } => return Err(invalid("generation_factor needs a shared diagonal")),
    };
    let last = o.shared_value(end).unwrap();
    Ok(integral.exp() * (1.0 + epsilon * last))
}

// ---------------------------------------------------------------------------------------------
// Quadratic form of the off-subspace loss

/// `A = ∫(1−t)² emb embᵀ`, `b = ∫(1−t) emb`, `e = ∫ emb` over `[0, 1]`.
///
/// Per diagonal entry the reduced loss is `∫((1−t)κᵀemb + 1)² dt = κᵀAκ + 2bᵀκ + 1`.
#[derive(Debug, Clone)]
pub struct QuadraticData {
    pub emb: EmbeddingConfig,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub e: DVector<f64>,
    pub panels: usize,
    /// Max entry difference against the half-resolution evaluation.
    pub certified_diff: f64,
}

fn raw_quadratic(emb: &Embedder, panels: usize) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let dim = emb.dim();
    let nodes: Vec<(f64, f64)> = quadrature::nodes(0.0, 1.0, panels).collect();
    let mut weighted = DMatrix::zeros(dim, nodes.len());
    let mut b = DVector::zeros(dim);
    let mut e = DVector::zeros(dim);
    let mut buf = vec![0.0; dim];
    for (j, &(t, w)) in nodes.iter().enumerate() {
        emb.embed_into(t, &mut buf);
        let scale = w.sqrt() * (1.0 - t);
        for k in 0..dim {
            weighted[(k, j)] = scale * buf[k];
            b[k] += w * (1.0 - t) * buf[k];
            e[k] += w * buf[k];
        }
    }
    let a = &weighted * weighted.transpose();
    let a = (&a + a.transpose()) * 0.5;
    (a, b, e)
}

/// Quadrature at `panels` and `2·panels`; returns the finer result if they agree to 1e-9.
pub fn compute_quadratic_data(cfg: &EmbeddingConfig, panels: usize) -> Result<QuadraticData> {
    cfg.validate()?;
    if panels == 0 {
        return Err(invalid("panels must be >= 1"));
    }
    let emb = cfg.embedder();
    let (a1, b1, e1) = raw_quadratic(&emb, panels);
    let (a2, b2, e2) = raw_quadratic(&emb, 2 * panels);
    let diff = (&a2 - &a1).amax().max((&b2 - &b1).amax()).max((&e2 - &e1).amax());
    if !(diff < CERTIFY_TOL) {
        return Err(Error::QuadratureNotConverged {
            panels,
            doubled: 2 * panels,
            diff,
        });
    }
    Ok(QuadraticData {
        emb: *cfg,
        a: a2,
        b: b2,
        e: e2,
        panels: 2 * panels,
        certified_diff: diff,
    })
}

impl QuadraticData {
    /// Eigenvalues ascending with matching eigenvector columns.
    pub fn eigen(&self) -> (DVector<f64>, DMatrix<f64>) {
        let se = SymmetricEigen::new(self.a.clone());
        let mut order: Vec<usize> = (0..se.eigenvalues.len()).collect();
        order.sort_by(|&i, &j| se.eigenvalues[i].total_cmp(&se.eigenvalues[j]));
        let vals = DVector::from_iterator(order.len(), order.iter().map(|&i| se.eigenvalues[i]));
        let vecs = DMatrix::from_fn(self.a.nrows(), order.len(), |r, c| se.eigenvectors[(r, order[c])]);
        (vals, vecs)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigen().0[0]
    }

    /// `λ_max / λ_min`, infinite when `λ_min ≤ 0`.
    pub fn condition(&self) -> f64 {
        let (vals, _) = self.eigen();
        let (lo, hi) = (vals[0], vals[vals.len() - 1]);
        if lo <= 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    /// `κᵀAκ + 2bᵀκ + 1`.
    pub fn loss(&self, kappa: &DVector<f64>) -> f64 {
        kappa.dot(&(&self.a * kappa)) + 2.0 * self.b.dot(kappa) + 1.0
    }

    pub fn gradient(&self, kappa: &DVector<f64>) -> DVector<f64> {
        (&self.a * kappa + &self.b) * 2.0
    }
}

/// Solves `Aκ = −b` by Cholesky after an eigenvalue conditioning check.
pub fn kappa_limit(q: &QuadraticData) -> Result<DVector<f64>> {
    let condition = q.condition();
    if !(condition <= MAX_CONDITION) {
        return Err(Error::IllConditioned { condition });
    }
    let chol = q.a.clone().cholesky().ok_or(Error::IllConditioned { condition })?;
    Ok(chol.solve(&(-&q.b)))
}

/// Minimum-norm minimizer through the eigenvalue-truncated pseudo-inverse; also returns the
/// retained rank.
pub fn kappa_limit_pinv(q: &QuadraticData, rcond: f64) -> (DVector<f64>, usize) {
    let (vals, vecs) = q.eigen();
    let cut = rcond * vals[vals.len() - 1];
    let mut kappa = DVector::zeros(vals.len());
    let mut rank = 0;
    for k in 0..vals.len() {
        if vals[k] > cut {
            let col = vecs.column(k);
            kappa -= col * (col.dot(&q.b) / vals[k]);
            rank += 1;
        }
    }
    (kappa, rank)
}

/// Gradient flow `dκ/dτ = −2(Aκ + b)` from `κ(0) = κ₀`, as
/// `κ(τ) = Q[e^{−2Λτ}Qᵀκ₀ − φ(Λ)Qᵀb]` with `φ(λ) = (1 − e^{−2λτ})/λ`.
/// Finite for singular `A`; the directions with `λ = 0` drift linearly.
pub fn kappa_flow(tau: f64, kappa0: &DVector<f64>, q: &QuadraticData) -> Result<DVector<f64>> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(invalid(format!("tau must be finite and nonnegative, got {tau}")));
    }
    if kappa0.len() != q.b.len() {
        return Err(Error::Shape(format!("kappa0 has {} entries, expected {}", kappa0.len(), q.b.len())));
    }
    if tau == 0.0 {
        return Ok(kappa0.clone());
    }
    let (vals, vecs) = q.eigen();
    let k0 = vecs.tr_mul(kappa0);
    let qb = vecs.tr_mul(&q.b);
    let coef = DVector::from_fn(vals.len(), |k, _| {
        let l = vals[k];
        let phi = if l.abs() < 1e-300 {
            2.0 * tau
        } else {
            -(-2.0 * l * tau).exp_m1() / l
        };
        (-2.0 * l * tau).exp() * k0[k] - phi * qb[k]
    });
    Ok(vecs * coef)
}

/// The same flow written as `exp(−2Aτ)·c − A⁻¹b` with `c = κ₀ + A⁻¹b`.
pub fn kappa_flow_from_c(tau: f64, c: &DVector<f64>, q: &QuadraticData) -> Result<DVector<f64>> {
    let limit = kappa_limit(q)?;
    let (vals, vecs) = q.eigen();
    let qc = vecs.tr_mul(c);
    let decayed = DVector::from_fn(vals.len(), |k, _| (-2.0 * vals[k] * tau).exp() * qc[k]);
    Ok(vecs * decayed + limit)
}

/// Explicit Euler on the gradient flow: `κ ← κ − 2h(Aκ + b)`.
pub fn kappa_euler(kappa0: &DVector<f64>, q: &QuadraticData, h: f64, steps: usize) -> DVector<f64> {
    let mut k = kappa0.clone();
    for _ in 0..steps {
        let g = q.gradient(&k);
        k -= g * h;
    }
    k
}

/// `exp(−bᵀA⁻¹e)`: the multiplier of `V⊥V⊥ᵀx` at the endpoint once `κ` has reached its limit.
pub fn offsubspace_limit_factor(q: &QuadraticData) -> Result<f64> {
    Ok(kappa_limit(q)?.dot(&q.e).exp())
}

pub fn offsubspace_limit_factor_pinv(q: &QuadraticData, rcond: f64) -> f64 {
    kappa_limit_pinv(q, rcond).0.dot(&q.e).exp()
}

/// `∫₀^{t_max} (1−t)²(|κᵀemb(t)| − 1/(1−t))² dt`: how well the magnitude of the fitted entry
/// tracks the optimal `1/(1−t)`.
pub fn embedding_fit_error(kappa: &DVector<f64>, cfg: &EmbeddingConfig, t_max: f64, panels: usize) -> f64 {
    let e = cfg.embedder();
    let k = kappa.as_slice();
    quadrature::integrate(
        |t| {
            let r = (1.0 - t) * e.dot(k, t).abs() - 1.0;
            r * r
        },
        0.0,
        t_max,
        panels,
    )
}

// ---------------------------------------------------------------------------------------------
// Subspace fields

/// `ŝ_t` on subspace coordinates `z = Vᵀx`.
pub trait SubspaceModel: Send + Sync {
    fn sub_dim(&self) -> usize;

    fn forward(&self, z: &DVector<f64>, t: f64) -> DVector<f64>;

    /// Column `j` of the result is `ŝ_{ts[j]}(z[:, j])`.
    fn forward_batch(&self, z: &DMatrix<f64>, ts: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.sub_dim(), z.ncols());
        for (j, &t) in ts.iter().enumerate() {
            out.set_column(j, &self.forward(&z.column(j).into_owned(), t));
        }
        out
    }
}

impl<M: SubspaceModel + ?Sized> SubspaceModel for &M {
    fn sub_dim(&self) -> usize {
        (**self).sub_dim()
    }
    fn forward(&self, z: &DVector<f64>, t: f64) -> DVector<f64> {
        (**self).forward(z, t)
    }
    fn forward_batch(&self, z: &DMatrix<f64>, ts: &[f64]) -> DMatrix<f64> {
        (**self).forward_batch(z, ts)
    }
}

impl<M: SubspaceModel + ?Sized> SubspaceModel for Box<M> {
    fn sub_dim(&self) -> usize {
        (**self).sub_dim()
    }
    fn forward(&self, z: &DVector<f64>, t: f64) -> DVector<f64> {
        (**self).forward(z, t)
    }
    fn forward_batch(&self, z: &DMatrix<f64>, ts: &[f64]) -> DMatrix<f64> {
        (**self).forward_batch(z, ts)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroSubspace(pub usize);

impl SubspaceModel for ZeroSubspace {
    fn sub_dim(&self) -> usize {
        self.0
    }
    fn forward(&self, _z: &DVector<f64>, _t: f64) -> DVector<f64> {
        DVector::zeros(self.0)
    }
}

/// `ŝ*_t = (R·w_t − z)/(1−t)`. The softmax logits `−‖x − t yⁱ‖²/(2(1−t)²)` only depend on
/// `x` through `z` once the common off-subspace term cancels, so `z` alone suffices.
#[derive(Debug, Clone)]
pub struct OptimalSubspace {
    pub r: DMatrix<f64>,
}

impl OptimalSubspace {
    pub fn new(basis: &SubspaceBasis) -> Self {
        Self { r: basis.r.clone() }
    }

    pub fn weights(&self, z: &DVector<f64>, t: f64) -> Vec<f64> {
        let s = 1.0 - t;
        let scale = -0.5 / (s * s);
        let mut w: Vec<f64> = self
            .r
            .column_iter()
            .map(|c| {
                let mut d2 = 0.0;
                for k in 0..z.len() {
                    let r = z[k] - t * c[k];
                    d2 += r * r;
                }
                scale * d2
            })
            .collect();
        softmax_in_place(&mut w);
        w
    }
}

impl SubspaceModel for OptimalSubspace {
    fn sub_dim(&self) -> usize {
        self.r.nrows()
    }
    fn forward(&self, z: &DVector<f64>, t: f64) -> DVector<f64> {
        let w = DVector::from_vec(self.weights(z, t));
        (&self.r * w - z) / (1.0 - t)
    }
}

/// `ŝ + offset`: a controlled error on top of another subspace field.
#[derive(Debug, Clone)]
pub struct PerturbedSubspace<M> {
    pub inner: M,
    pub offset: DVector<f64>,
}

impl<M: SubspaceModel> SubspaceModel for PerturbedSubspace<M> {
    fn sub_dim(&self) -> usize {
        self.inner.sub_dim()
    }
    fn forward(&self, z: &DVector<f64>, t: f64) -> DVector<f64> {
        self.inner.forward(z, t) + &self.offset
    }
}

// ---------------------------------------------------------------------------------------------
// Residual network

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }
}

/// Input `(z, emb(t))` → affine to width `hidden` → `blocks` residual blocks
/// `h ← h + W₂·act(W₁h + b₁) + b₂` → affine to `sub_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub sub_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub emb: EmbeddingConfig,
    pub activation: Activation,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        self.emb.validate()?;
        if self.sub_dim == 0 || self.hidden == 0 {
            return Err(invalid("network widths must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.sub_dim + self.emb.dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BlockOffsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Offsets of each tensor in the flat parameter vector; matrices are column-major.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    w_in: usize,
    b_in: usize,
    blocks: Vec<BlockOffsets>,
    w_out: usize,
    b_out: usize,
    len: usize,
}

impl Layout {
    fn new(cfg: &NetConfig) -> Layout {
        let (h, i, o) = (cfg.hidden, cfg.input_dim(), cfg.sub_dim);
        let mut off = 0;
        let mut take = |n: usize| {
            let at = off;
            off += n;
            at
        };
        let w_in = take(h * i);
        let b_in = take(h);
        let blocks = (0..cfg.blocks)
            .map(|_| BlockOffsets {
                w1: take(h * h),
                b1: take(h),
                w2: take(h * h),
                b2: take(h),
            })
            .collect();
        let w_out = take(o * h);
        let b_out = take(o);
        Layout {
            w_in,
            b_in,
            blocks,
            w_out,
            b_out,
            len: off,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SubspaceNet {
    cfg: NetConfig,
    layout: Layout,
    params: Vec<f64>,
    embedder: Embedder,
}

/// Intermediate activations of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: DMatrix<f64>,
    /// Hidden state entering each block, plus the final one.
    hidden: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    act: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

fn add_bias(m: &mut DMatrix<f64>, b: &[f64]) {
    for mut col in m.column_iter_mut() {
        for (v, bb) in col.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn row_sums_into(m: &DMatrix<f64>, out: &mut [f64]) {
    for col in m.column_iter() {
        for (o, v) in out.iter_mut().zip(col.iter()) {
            *o += v;
        }
    }
}

impl SubspaceNet {
    pub fn zeros(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        Ok(Self {
            params: vec![0.0; layout.len],
            layout,
            embedder: cfg.emb.embedder(),
            cfg,
        })
    }

    /// Weights uniform on `±√(6/fan_in)` (variance `2/fan_in`), biases zero.
    pub fn init(cfg: NetConfig, rng: RngSpec) -> Result<Self> {
        let mut net = Self::zeros(cfg)?;
        let mut r = rng.rng();
        let (h, i, o) = (cfg.hidden, cfg.input_dim(), cfg.sub_dim);
        let mut fill = |params: &mut [f64], at: usize, n: usize, fan_in: usize| {
            let a = (6.0 / fan_in as f64).sqrt();
            for p in &mut params[at..at + n] {
                *p = r.random_range(-a..a);
            }
        };
        let layout = net.layout.clone();
        fill(&mut net.params, layout.w_in, h * i, i);
        for b in &layout.blocks {
            fill(&mut net.params, b.w1, h * h, h);
            fill(&mut net.params, b.w2, h * h, h);
        }
        fill(&mut net.params, layout.w_out, o * h, h);
        Ok(net)
    }

    pub fn from_params(cfg: NetConfig, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(cfg)?;
        if params.len() != net.params.len() {
            return Err(Error::Shape(format!(
                "network expects {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn mat(&self, at: usize, rows: usize, cols: usize) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.params[at..at + rows * cols], rows, cols)
    }

    fn vec(&self, at: usize, n: usize) -> &[f64] {
        &self.params[at..at + n]
    }

    fn input_matrix(&self, z: &DMatrix<f64>, ts: &[f64]) -> DMatrix<f64> {
        let (d, e) = (self.cfg.sub_dim, self.cfg.emb.dim);
        let mut input = DMatrix::zeros(d + e, z.ncols());
        for (j, &t) in ts.iter().enumerate() {
            let mut col = input.column_mut(j);
            col.rows_mut(0, d).copy_from(&z.column(j));
            self.embedder.embed_into(t, &mut col.as_mut_slice()[d..]);
        }
        input
    }

    pub fn forward_cached(&self, z: &DMatrix<f64>, ts: &[f64]) -> ForwardCache {
        let c = &self.cfg;
        let l = &self.layout;
        let (h, i, o) = (c.hidden, c.input_dim(), c.sub_dim);
        let input = self.input_matrix(z, ts);
        let mut cur = self.mat(l.w_in, h, i) * &input;
        add_bias(&mut cur, self.vec(l.b_in, h));
        let mut hidden = Vec::with_capacity(c.blocks + 1);
        let mut pre = Vec::with_capacity(c.blocks);
        let mut act = Vec::with_capacity(c.blocks);
        for b in &l.blocks {
            let mut p = self.mat(b.w1, h, h) * &cur;
            add_bias(&mut p, self.vec(b.b1, h));
            let a = p.map(|v| c.activation.apply(v));
            let mut next = self.mat(b.w2, h, h) * &a;
            add_bias(&mut next, self.vec(b.b2, h));
            next += &cur;
            hidden.push(cur);
            pre.push(p);
            act.push(a);
            cur = next;
        }
        let mut output = self.mat(l.w_out, o, h) * &cur;
        add_bias(&mut output, self.vec(l.b_out, o));
        hidden.push(cur);
        ForwardCache {
            input,
            hidden,
            pre,
            act,
            output,
        }
    }

    /// Reverse pass for `Σ_j ⟨G[:, j], ŝ(z_j)⟩`: parameter gradient (summed over the batch) and
    /// the gradient with respect to `z`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let c = &self.cfg;
        let l = &self.layout;
        let (h, i, o) = (c.hidden, c.input_dim(), c.sub_dim);
        let mut grad = vec![0.0; l.len];
        let last = &cache.hidden[c.blocks];
        let gw_out = upstream * last.transpose();
        grad[l.w_out..l.w_out + o * h].copy_from_slice(gw_out.as_slice());
        row_sums_into(upstream, &mut grad[l.b_out..l.b_out + o]);
        let mut dh = self.mat(l.w_out, o, h).tr_mul(upstream);
        for (k, b) in l.blocks.iter().enumerate().rev() {
            let gw2 = &dh * cache.act[k].transpose();
            grad[b.w2..b.w2 + h * h].copy_from_slice(gw2.as_slice());
            row_sums_into(&dh, &mut grad[b.b2..b.b2 + h]);
            let mut dp = self.mat(b.w2, h, h).tr_mul(&dh);
            dp.zip_apply(&cache.pre[k], |g, p| *g *= c.activation.derivative(p));
            let gw1 = &dp * cache.hidden[k].transpose();
            grad[b.w1..b.w1 + h * h].copy_from_slice(gw1.as_slice());
            row_sums_into(&dp, &mut grad[b.b1..b.b1 + h]);
            dh += self.mat(b.w1, h, h).tr_mul(&dp);
        }
        let gw_in = &dh * cache.input.transpose();
        grad[l.w_in..l.w_in + h * i].copy_from_slice(gw_in.as_slice());
        row_sums_into(&dh, &mut grad[l.b_in..l.b_in + h]);
        let dz = self.mat(l.w_in, h, i).tr_mul(&dh).rows(0, o).into_owned();
        (grad, dz)
    }

    /// `∂ŝ/∂z`, one reverse pass per output coordinate.
    pub fn jacobian(&self, z: &DVector<f64>, t: f64) -> DMatrix<f64> {
        let d = self.cfg.sub_dim;
        let zm = DMatrix::from_column_slice(d, 1, z.as_slice());
        let cache = self.forward_cached(&zm, &[t]);
        let mut jac = DMatrix::zeros(d, d);
        for k in 0..d {
            let mut up = DMatrix::zeros(d, 1);
            up[(k, 0)] = 1.0;
            let (_, dz) = self.backward(&cache, &up);
            jac.row_mut(k).copy_from(&dz.column(0).transpose());
        }
        jac
    }
}

impl SubspaceModel for SubspaceNet {
    fn sub_dim(&self) -> usize {
        self.cfg.sub_dim
    }
    fn forward(&self, z: &DVector<f64>, t: f64) -> DVector<f64> {
        let zm = DMatrix::from_column_slice(z.len(), 1, z.as_slice());
        self.forward_cached(&zm, &[t]).output.column(0).into_owned()
    }
    fn forward_batch(&self, z: &DMatrix<f64>, ts: &[f64]) -> DMatrix<f64> {
        self.forward_cached(z, ts).output
    }
}

// ---------------------------------------------------------------------------------------------
// The composed field

#[derive(Debug, Clone)]
pub struct OsdNet<M> {
    pub basis: SubspaceBasis,
    pub diag: DiagonalField,
    pub sub: M,
}

impl<M: SubspaceModel> OsdNet<M> {
    pub fn new(basis: SubspaceBasis, diag: DiagonalField, sub: M) -> Result<Self> {
        if sub.sub_dim() != basis.rank() {
            return Err(Error::Shape(format!(
                "subspace model has dimension {}, basis rank is {}",
                sub.sub_dim(),
                basis.rank()
            )));
        }
        if let DiagonalField::PerEntry { kappa, emb } = &diag {
            if kappa.len() != basis.off_dim() || kappa.iter().any(|k| k.len() != emb.dim) {
                return Err(Error::Shape("per-entry kappa must be (d − D) × dim".into()));
            }
        }
        if let DiagonalField::Shared { kappa, emb } = &diag {
            if kappa.len() != emb.dim {
                return Err(Error::Shape("kappa length must equal the embedding dim".into()));
            }
        }
        Ok(Self { basis, diag, sub })
    }

    /// `(Ô_t V⊥ᵀx, ŝ_t(Vᵀx))` in basis coordinates.
    pub fn components(&self, x: &DVector<f64>, t: f64) -> (DVector<f64>, DVector<f64>) {
        let p = self.basis.project_perp(x);
        let o = self.diag.entries(t, p.len());
        let off = DVector::from_fn(p.len(), |j, _| o[j] * p[j]);
        (off, self.sub.forward(&self.basis.project(x), t))
    }
}

impl OsdNet<OptimalSubspace> {
    /// The instance that reproduces the optimal OT field exactly.
    pub fn optimal(basis: SubspaceBasis) -> Self {
        let sub = OptimalSubspace::new(&basis);
        Self {
            basis,
            diag: DiagonalField::Optimal,
            sub,
        }
    }
}

impl<M: SubspaceModel> VelocityField for OsdNet<M> {
    fn dim(&self) -> usize {
        self.basis.ambient_dim()
    }
    fn velocity(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let (off, sub) = self.components(x, t);
        &self.basis.v_perp * off + &self.basis.v * sub
    }
}

/// `V⊥·Ô_t·V⊥ᵀx + V·ŝ_t(Vᵀx)` with shape checks.
pub fn osdnet_eval(
    x: &DVector<f64>,
    t: f64,
    basis: &SubspaceBasis,
    o: &DiagonalField,
    s_net: &dyn SubspaceModel,
) -> Result<DVector<f64>> {
    if x.len() != basis.ambient_dim() {
        return Err(Error::Shape(format!("point has dimension {}, basis has {}", x.len(), basis.ambient_dim())));
    }
    if s_net.sub_dim() != basis.rank() {
        return Err(Error::Shape("subspace model dimension differs from basis rank".into()));
    }
    if let DiagonalField::PerEntry { kappa, .. } = o {
        if kappa.len() != basis.off_dim() {
            return Err(Error::Shape("per-entry kappa needs one row per off-subspace direction".into()));
        }
    }
    if matches!(o, DiagonalField::Optimal) {
        check_open_time(t)?;
    }
    let p = basis.project_perp(x);
    let vals = o.entries(t, p.len());
    let off = DVector::from_fn(p.len(), |j, _| vals[j] * p[j]);
    Ok(&basis.v_perp * off + &basis.v * s_net.forward(&basis.project(x), t))
}

/// `Ô*_t = −1/(1−t)` and `ŝ*_t(x) = (R·w_t(x) − Vᵀx)/(1−t)` with the full-space weights.
pub fn optimal_params(t: f64, x: &DVector<f64>, basis: &SubspaceBasis, data: &DataMatrix) -> Result<(f64, DVector<f64>)> {
    check_open_time(t)?;
    let w = softmax_weights(x, t, data, &OtSchedule)?;
    let s = (&basis.r * &w.w - basis.project(x)) / (1.0 - t);
    Ok((-1.0 / (1.0 - t), s))
}

/// `(V Vᵀx, V⊥V⊥ᵀx, ‖V⊥V⊥ᵀx‖)`.
pub fn endpoint_decompose(x: &DVector<f64>, basis: &SubspaceBasis) -> (DVector<f64>, DVector<f64>, f64) {
    let sub = &basis.v * basis.project(x);
    let off = &basis.v_perp * basis.project_perp(x);
    let n = off.norm();
    (sub, off, n)
}

// ---------------------------------------------------------------------------------------------
// Losses

/// Monte-Carlo sample spec: `t ∼ U[0, 1−ε]`, `x1` uniform over the data, standard normal noise.
/// Sample `j` draws from stream `rng.fork(j)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McSpec {
    pub samples: usize,
    pub epsilon: f64,
    pub rng: RngSpec,
}

impl McSpec {
    pub fn new(samples: usize, epsilon: f64, rng: RngSpec) -> Result<Self> {
        if samples == 0 {
            return Err(invalid("MC sample count must be positive"));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(invalid(format!("epsilon must lie in [0, 1), got {epsilon}")));
        }
        Ok(Self { samples, epsilon, rng })
    }

    /// `(t, data index, noise)` of sample `j`.
    pub fn draw(&self, j: usize, n: usize, d: usize) -> (f64, usize, DVector<f64>) {
        let mut r = self.rng.fork(j as u64).rng();
        let t = r.random::<f64>() * (1.0 - self.epsilon);
        let i = r.random_range(0..n);
        let noise = DVector::from_fn(d, |_, _| standard_normal(&mut r));
        (t, i, noise)
    }
}

fn mean_stderr_of(sum: f64, sum_sq: f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = sum / nf;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    (mean, (var / nf).sqrt())
}

fn mc_mean<F>(mc: &McSpec, f: F) -> (f64, f64)
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let (s, s2) = exec::chunked_reduce(
        mc.samples,
        || (0.0, 0.0),
        |acc, j| {
            let v = f(j);
            acc.0 += v;
            acc.1 += v * v;
        },
        |a, b| {
            a.0 += b.0;
            a.1 += b.1;
        },
    );
    mean_stderr_of(s, s2, mc.samples)
}

fn check_basis_data(basis: &SubspaceBasis, data: &DataMatrix) -> Result<()> {
    if basis.ambient_dim() != data.dim() || basis.r.ncols() != data.len() {
        return Err(Error::Shape("basis does not belong to this data matrix".into()));
    }
    Ok(())
}

/// `E‖(Ô_t + I/(1−t))V⊥ᵀx‖²` with `x ∼ p_t`, as `(mean, standard error)`.
pub fn loss_o_mc(o: &DiagonalField, basis: &SubspaceBasis, data: &DataMatrix, mc: &McSpec) -> Result<(f64, f64)> {
    check_basis_data(basis, data)?;
    let (n, d, off) = (data.len(), data.dim(), basis.off_dim());
    Ok(mc_mean(mc, |j| {
        let (t, i, noise) = mc.draw(j, n, d);
        let x = data.point(i) * t + noise * (1.0 - t);
        let p = basis.project_perp(&x);
        let vals = o.entries(t, off);
        (0..off).map(|k| ((vals[k] + 1.0 / (1.0 - t)) * p[k]).powi(2)).sum()
    }))
}

/// Reduced form `(1/(1−ε))∫₀^{1−ε} ‖(1−t)Ô_t + I‖²_F dt`, the exact value of [`loss_o_mc`]
/// under the same `t` distribution.
pub fn loss_o_exact(o: &DiagonalField, off_dim: usize, epsilon: f64, panels: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(invalid(format!("epsilon must lie in [0, 1), got {epsilon}")));
    }
    if panels == 0 {
        return Err(invalid("panels must be >= 1"));
    }
    let end = 1.0 - epsilon;
    let integral = match o {
        DiagonalField::Optimal => 0.0,
        DiagonalField::Constant { value } => {
            off_dim as f64 * quadrature::integrate(|t| ((1.0 - t) * value + 1.0).powi(2), 0.0, end, panels)
        }
        DiagonalField::Shared { emb, kappa } => {
            let e = emb.embedder();
            off_dim as f64
                * quadrature::integrate(|t| ((1.0 - t) * e.dot(kappa, t) + 1.0).powi(2), 0.0, end, panels)
        }
        DiagonalField::PerEntry { emb, kappa } => {
            let e = emb.embedder();
            kappa
                .iter()
                .map(|k| quadrature::integrate(|t| ((1.0 - t) * e.dot(k, t) + 1.0).powi(2), 0.0, end, panels))
                .sum()
        }
    };
    Ok(integral / end)
}

/// `E‖ŝ_t(Vᵀx) − ŝ*_t(x)‖²` with `x ∼ p_t`.
pub fn tst_loss_s(
    model: &dyn SubspaceModel,
    basis: &SubspaceBasis,
    data: &DataMatrix,
    mc: &McSpec,
) -> Result<(f64, f64)> {
    check_basis_data(basis, data)?;
    if model.sub_dim() != basis.rank() {
        return Err(Error::Shape("subspace model dimension differs from basis rank".into()));
    }
    let opt = OptimalSubspace::new(basis);
    let (n, d) = (data.len(), data.dim());
    Ok(mc_mean(mc, |j| {
        let (t, i, noise) = mc.draw(j, n, d);
        let z = basis.project(&(data.point(i) * t + noise * (1.0 - t)));
        (model.forward(&z, t) - opt.forward(&z, t)).norm_squared()
    }))
}

/// `E‖v̂_t(x) − u_t(x | x1)‖²` with `x = μ_t(x1) + σ_t·noise`.
pub fn cfm_loss<M: SubspaceModel>(
    osd: &OsdNet<M>,
    sched: &dyn PathSchedule,
    data: &DataMatrix,
    mc: &McSpec,
) -> Result<(f64, f64)> {
    check_basis_data(&osd.basis, data)?;
    let (n, d) = (data.len(), data.dim());
    Ok(mc_mean(mc, |j| {
        let (t, i, noise) = mc.draw(j, n, d);
        let y = data.point(i).into_owned();
        let x = sched.mu(t, &y) + &noise * sched.sigma(t);
        let u = &noise * sched.sigma_dt(t) + sched.mu_dt(t, &y);
        (osd.velocity(&x, t) - u).norm_squared()
    }))
}

/// Per-sample OT losses on one common sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub cfm: Vec<f64>,
    pub off: Vec<f64>,
    pub sub: Vec<f64>,
}

impl LossTerms {
    /// `cfm − off − sub` per sample; its mean is parameter independent.
    pub fn residual(&self) -> Vec<f64> {
        self.cfm
            .iter()
            .zip(&self.off)
            .zip(&self.sub)
            .map(|((c, o), s)| c - o - s)
            .collect()
    }
}

pub fn loss_terms<M: SubspaceModel>(osd: &OsdNet<M>, data: &DataMatrix, mc: &McSpec) -> Result<LossTerms> {
    check_basis_data(&osd.basis, data)?;
    let (n, d) = (data.len(), data.dim());
    let opt = OptimalSubspace::new(&osd.basis);
    let per: Vec<(f64, f64, f64)> = exec::map_indexed(mc.samples, |j| {
        let (t, i, noise) = mc.draw(j, n, d);
        let y = data.point(i);
        let x = y * t + &noise * (1.0 - t);
        let u = y - &noise;
        let (off, sub) = osd.components(&x, t);
        let p = osd.basis.project_perp(&x);
        let z = osd.basis.project(&x);
        let cfm = (&off - osd.basis.project_perp(&u)).norm_squared() + (&sub - osd.basis.project(&u)).norm_squared();
        let o = (off + p / (1.0 - t)).norm_squared();
        let s = (sub - opt.forward(&z, t)).norm_squared();
        (cfm, o, s)
    });
    Ok(LossTerms {
        cfm: per.iter().map(|p| p.0).collect(),
        off: per.iter().map(|p| p.1).collect(),
        sub: per.iter().map(|p| p.2).collect(),
    })
}

/// Loss value with gradients for the shared `κ` and the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OsdGrad {
    pub loss: f64,
    pub kappa: DVector<f64>,
    pub net: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Regression onto the conditional velocity.
    Cfm,
    /// `loss_O + tst_loss_s`: regression onto the optimal field.
    Decomposed,
}

/// Monte-Carlo loss and exact gradient of its sample mean (OT path). The diagonal must be in
/// shared `κ` mode.
pub fn osd_loss_grad(
    osd: &OsdNet<SubspaceNet>,
    objective: Objective,
    data: &DataMatrix,
    mc: &McSpec,
) -> Result<OsdGrad> {
    check_basis_data(&osd.basis, data)?;
    let (emb, kappa) = match &osd.diag {
        DiagonalField::Shared { emb, kappa } => (emb.embedder(), kappa.as_slice()),
        _ => return Err(invalid("gradients need a shared-kappa diagonal")),
    };
    let (n, d, dk, np) = (data.len(), data.dim(), kappa.len(), osd.sub.num_params());
    let opt = OptimalSubspace::new(&osd.basis);
    let dsub = osd.basis.rank();
    let zero = || (0.0, DVector::zeros(dk), vec![0.0; np]);
    let (loss, gk, gn) = exec::chunked_reduce(
        mc.samples,
        zero,
        |acc, j| {
            let (t, i, noise) = mc.draw(j, n, d);
            let y = data.point(i);
            let x = y * t + &noise * (1.0 - t);
            let p = osd.basis.project_perp(&x);
            let z = osd.basis.project(&x);
            let e = emb.embed(t);
            let o = e.dot(&DVector::from_column_slice(kappa));
            let (off_target, sub_target) = match objective {
                Objective::Cfm => {
                    let u = y - &noise;
                    (osd.basis.project_perp(&u), osd.basis.project(&u))
                }
                Objective::Decomposed => (-&p / (1.0 - t), opt.forward(&z, t)),
            };
            let off_res = &p * o - off_target;
            let zm = DMatrix::from_column_slice(dsub, 1, z.as_slice());
            let cache = osd.sub.forward_cached(&zm, &[t]);
            let sub_res = cache.output.column(0) - sub_target;
            acc.0 += off_res.norm_squared() + sub_res.norm_squared();
            acc.1 += e * (2.0 * off_res.dot(&p));
            let up = DMatrix::from_column_slice(dsub, 1, (sub_res * 2.0).as_slice());
            let (g, _) = osd.sub.backward(&cache, &up);
            for (a, b) in acc.2.iter_mut().zip(g) {
                *a += b;
            }
        },
        |a, b| {
            a.0 += b.0;
            a.1 += b.1;
            for (x, y) in a.2.iter_mut().zip(b.2) {
                *x += y;
            }
        },
    );
    let inv = 1.0 / mc.samples as f64;
    Ok(OsdGrad {
        loss: loss * inv,
        kappa: gk * inv,
        net: gn.into_iter().map(|g| g * inv).collect(),
    })
}

// ---------------------------------------------------------------------------------------------
// Batched generation

/// Integrates `ż = ŝ_t(z)` for every column of `z0` over the grid, then closes the final gap
/// `ε` with one Euler step. Columns are processed in fixed chunks, so the result does not
/// depend on the thread count.
pub fn generate_subspace(model: &dyn SubspaceModel, z0: &DMatrix<f64>, grid: &TimeGrid, method: Method) -> Result<DMatrix<f64>> {
    if z0.nrows() != model.sub_dim() {
        return Err(Error::Shape(format!("start points have {} rows, model expects {}", z0.nrows(), model.sub_dim())));
    }
    let b = z0.ncols();
    let chunks = b.div_ceil(BATCH_CHUNK);
    let parts: Vec<Result<DMatrix<f64>>> = exec::map_indexed(chunks, |c| {
        let start = c * BATCH_CHUNK;
        let width = BATCH_CHUNK.min(b - start);
        let mut z = z0.columns(start, width).into_owned();
        let eval = |z: &DMatrix<f64>, t: f64| model.forward_batch(z, &vec![t; width]);
        for k in 0..grid.steps() {
            let (t, h) = (grid.nodes[k], grid.nodes[k + 1] - grid.nodes[k]);
            z = match method {
                Method::Euler => &z + eval(&z, t) * h,
                Method::Rk4 => {
                    let k1 = eval(&z, t);
                    let k2 = eval(&(&z + &k1 * (0.5 * h)), t + 0.5 * h);
                    let k3 = eval(&(&z + &k2 * (0.5 * h)), t + 0.5 * h);
                    let k4 = eval(&(&z + &k3 * h), t + h);
                    &z + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
                }
            };
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState {
                    node: k + 1,
                    t: grid.nodes[k + 1],
                });
            }
        }
        let t_end = grid.end();
        Ok(&z + eval(&z, t_end) * (1.0 - t_end))
    });
    let mut out = DMatrix::zeros(z0.nrows(), b);
    for (c, part) in parts.into_iter().enumerate() {
        let part = part?;
        out.columns_mut(c * BATCH_CHUNK, part.ncols()).copy_from(&part);
    }
    Ok(out)
}
