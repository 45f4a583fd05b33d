//! Gaussian conditional paths, softmax weights, the closed-form optimal velocity and the
//! induced marginal mixture.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{check_open_time, invalid, Error, Result};
use crate::exec;
use crate::rng::{standard_normal, RngSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Ot,
    Vp,
    Custom,
}

/// A Gaussian conditional path `p_t(x | x1) = N(μ_t(x1), σ_t² I)`.
pub trait PathSchedule: Send + Sync {
    fn mu(&self, t: f64, x1: &DVector<f64>) -> DVector<f64>;
    fn sigma(&self, t: f64) -> f64;
    fn mu_dt(&self, t: f64, x1: &DVector<f64>) -> DVector<f64>;
    fn sigma_dt(&self, t: f64) -> f64;
    fn kind(&self) -> ScheduleKind;

    /// `Some((m, m'))` when `μ_t(x1) = m·x1` and `μ'_t(x1) = m'·x1`; enables allocation-free
    /// evaluation of the optimal field.
    fn linear_mean(&self, _t: f64) -> Option<(f64, f64)> {
        None
    }
}

/// `μ_t = t·x1`, `σ_t = 1 − t`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OtSchedule;

impl PathSchedule for OtSchedule {
    fn mu(&self, t: f64, x1: &DVector<f64>) -> DVector<f64> {
        x1 * t
    }
    fn sigma(&self, t: f64) -> f64 {
        1.0 - t
    }
    fn mu_dt(&self, _t: f64, x1: &DVector<f64>) -> DVector<f64> {
        x1.clone()
    }
    fn sigma_dt(&self, _t: f64) -> f64 {
        -1.0
    }
    fn kind(&self) -> ScheduleKind {
        ScheduleKind::Ot
    }
    fn linear_mean(&self, t: f64) -> Option<(f64, f64)> {
        Some((t, 1.0))
    }
}

/// Variance-preserving path with constant `β(s) = β₀`: `μ_t = α_{1−t}·x1`,
/// `σ_t = √(1 − α²_{1−t})`, `α_s = exp(−β₀ s / 2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VpSchedule {
    pub beta0: f64,
}

impl Default for VpSchedule {
    fn default() -> Self {
        Self { beta0: 1.0 }
    }
}

impl VpSchedule {
    pub fn new(beta0: f64) -> Result<Self> {
        if !(beta0 > 0.0 && beta0.is_finite()) {
            return Err(invalid(format!("VP beta0 must be positive, got {beta0}")));
        }
        Ok(Self { beta0 })
    }

    pub fn alpha(&self, s: f64) -> f64 {
        (-0.5 * self.beta0 * s).exp()
    }
}

impl PathSchedule for VpSchedule {
    fn mu(&self, t: f64, x1: &DVector<f64>) -> DVector<f64> {
        x1 * self.alpha(1.0 - t)
    }
    fn sigma(&self, t: f64) -> f64 {
        let a = self.alpha(1.0 - t);
        (1.0 - a * a).sqrt()
    }
    fn mu_dt(&self, t: f64, x1: &DVector<f64>) -> DVector<f64> {
        x1 * (0.5 * self.beta0 * self.alpha(1.0 - t))
    }
    fn sigma_dt(&self, t: f64) -> f64 {
        let a = self.alpha(1.0 - t);
        -0.5 * self.beta0 * a * a / self.sigma(t)
    }
    fn kind(&self) -> ScheduleKind {
        ScheduleKind::Vp
    }
    fn linear_mean(&self, t: f64) -> Option<(f64, f64)> {
        let a = self.alpha(1.0 - t);
        Some((a, 0.5 * self.beta0 * a))
    }
}

/// `u_t(x | x1) = (σ'_t/σ_t)(x − μ_t(x1)) + μ'_t(x1)`.
pub fn conditional_velocity(
    x: &DVector<f64>,
    x1: &DVector<f64>,
    sched: &dyn PathSchedule,
    t: f64,
) -> Result<DVector<f64>> {
    check_open_time(t)?;
    check_dims(x.len(), x1.len())?;
    let ratio = sched.sigma_dt(t) / sched.sigma(t);
    Ok((x - sched.mu(t, x1)) * ratio + sched.mu_dt(t, x1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxWeights {
    pub w: DVector<f64>,
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("point has dimension {a}, data has {b}")));
    }
    Ok(())
}

/// Normalizes `logits` in place into softmax probabilities (max-subtracted).
pub(crate) fn softmax_in_place(logits: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - m).exp();
        s += *l;
    }
    for l in logits.iter_mut() {
        *l /= s;
    }
}

/// Weights `w_i ∝ exp(−‖x − μ_t(yⁱ)‖² / (2σ_t²))`.
pub fn softmax_weights(
    x: &DVector<f64>,
    t: f64,
    data: &DataMatrix,
    sched: &dyn PathSchedule,
) -> Result<SoftmaxWeights> {
    check_open_time(t)?;
    check_dims(x.len(), data.dim())?;
    let mut w = vec![0.0; data.len()];
    weights_into(x, t, data, sched, &mut w);
    Ok(SoftmaxWeights {
        w: DVector::from_vec(w),
    })
}

/// Unchecked weight evaluation into a caller-owned buffer of length `N`.
pub(crate) fn weights_into(x: &DVector<f64>, t: f64, data: &DataMatrix, sched: &dyn PathSchedule, w: &mut [f64]) {
    let sigma = sched.sigma(t);
    let scale = -0.5 / (sigma * sigma);
    let y = data.matrix();
    match sched.linear_mean(t) {
        Some((m, _)) => {
            for (i, col) in y.column_iter().enumerate() {
                let mut d2 = 0.0;
                for k in 0..x.len() {
                    let r = x[k] - m * col[k];
                    d2 += r * r;
                }
                w[i] = scale * d2;
            }
        }
        None => {
            for (i, col) in y.column_iter().enumerate() {
                w[i] = scale * (x - sched.mu(t, &col.into_owned())).norm_squared();
            }
        }
    }
    softmax_in_place(w);
}

/// The minimizer of the CFM loss: `v*_t(x) = Σᵢ wᵢ u_t(x | yⁱ)`; for OT this is
/// `(Y·w − x)/(1 − t)`.
pub fn optimal_velocity(
    x: &DVector<f64>,
    t: f64,
    data: &DataMatrix,
    sched: &dyn PathSchedule,
) -> Result<DVector<f64>> {
    check_open_time(t)?;
    check_dims(x.len(), data.dim())?;
    Ok(optimal_velocity_unchecked(x, t, data, sched))
}

pub(crate) fn optimal_velocity_unchecked(
    x: &DVector<f64>,
    t: f64,
    data: &DataMatrix,
    sched: &dyn PathSchedule,
) -> DVector<f64> {
    let mut w = vec![0.0; data.len()];
    weights_into(x, t, data, sched, &mut w);
    let ratio = sched.sigma_dt(t) / sched.sigma(t);
    let y = data.matrix();
    match sched.linear_mean(t) {
        Some((m, mdt)) => {
            // Σ wᵢ[(σ'/σ)(x − m yⁱ) + m' yⁱ] = (σ'/σ)x + (m' − (σ'/σ) m)·Y w
            let yw = y * DVector::from_vec(w);
            x * ratio + yw * (mdt - ratio * m)
        }
        None => {
            let mut v = DVector::zeros(x.len());
            for (i, col) in y.column_iter().enumerate() {
                let col = col.into_owned();
                v += ((x - sched.mu(t, &col)) * ratio + sched.mu_dt(t, &col)) * w[i];
            }
            v
        }
    }
}

/// `log p_t(x)` for the OT marginal `(1/N) Σ N(x; t·yⁱ, (1−t)² I)`.
pub fn log_marginal_density(x: &DVector<f64>, t: f64, data: &DataMatrix) -> Result<f64> {
    check_open_time(t)?;
    check_dims(x.len(), data.dim())?;
    let s = 1.0 - t;
    let d = data.dim() as f64;
    let logs: Vec<f64> = data
        .matrix()
        .column_iter()
        .map(|y| -(x - y * t).norm_squared() / (2.0 * s * s))
        .collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    Ok(lse - (data.len() as f64).ln() - 0.5 * d * (2.0 * PI).ln() - d * s.ln())
}

pub fn marginal_density(x: &DVector<f64>, t: f64, data: &DataMatrix) -> Result<f64> {
    log_marginal_density(x, t, data).map(f64::exp)
}

/// `count` draws from the OT marginal; column `j` uses stream `rng.fork(j)`.
pub fn sample_marginal(t: f64, data: &DataMatrix, rng: RngSpec, count: usize) -> Result<DMatrix<f64>> {
    check_open_time(t)?;
    if count == 0 {
        return Err(invalid("sample_marginal needs count >= 1"));
    }
    let d = data.dim();
    let n = data.len();
    let cols = exec::map_indexed(count, |j| {
        let mut r = rng.fork(j as u64).rng();
        let i = r.random_range(0..n);
        let y = data.point(i);
        (0..d)
            .map(|k| t * y[k] + (1.0 - t) * standard_normal(&mut r))
            .collect::<Vec<f64>>()
    });
    Ok(DMatrix::from_vec(d, count, cols.into_iter().flatten().collect()))
}

/// Mean `t·ȳ` and covariance `(1−t)² I + t² S_Y` of the OT marginal.
pub fn marginal_moments(t: f64, data: &DataMatrix) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange { t, range: "[0, 1]" });
    }
    let d = data.dim();
    let mean = data.mean() * t;
    let cov = DMatrix::identity(d, d) * (1.0 - t).powi(2) + data.population_covariance() * (t * t);
    Ok((mean, cov))
}
