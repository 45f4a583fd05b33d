//! The velocity-field evaluation contract and simple implementations.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::data::DataMatrix;
use crate::paths::{optimal_velocity_unchecked, OtSchedule, PathSchedule};

/// `v(x, t) → ℝᵈ`. Implementations must be pure so trajectories can be integrated in parallel.
pub trait VelocityField: Send + Sync {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &DVector<f64>, t: f64) -> DVector<f64>;
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn velocity(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (**self).velocity(x, t)
    }
}

impl<F: VelocityField + ?Sized> VelocityField for Box<F> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn velocity(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (**self).velocity(x, t)
    }
}

impl<F: VelocityField + ?Sized> VelocityField for Arc<F> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn velocity(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (**self).velocity(x, t)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroField(pub usize);

impl VelocityField for ZeroField {
    fn dim(&self) -> usize {
        self.0
    }
    fn velocity(&self, _x: &DVector<f64>, _t: f64) -> DVector<f64> {
        DVector::zeros(self.0)
    }
}

#[derive(Debug, Clone)]
pub struct ConstantField(pub DVector<f64>);

impl VelocityField for ConstantField {
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn velocity(&self, _x: &DVector<f64>, _t: f64) -> DVector<f64> {
        self.0.clone()
    }
}

/// `v(x, t) = A·x`.
#[derive(Debug, Clone)]
pub struct LinearField(pub DMatrix<f64>);

impl VelocityField for LinearField {
    fn dim(&self) -> usize {
        self.0.nrows()
    }
    fn velocity(&self, x: &DVector<f64>, _t: f64) -> DVector<f64> {
        &self.0 * x
    }
}

/// Wraps a closure as a field (the plugin route for user-defined fields).
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn velocity(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.f)(x, t)
    }
}

/// `v + c` for a constant offset `c` (used for deterministic perturbation checks).
pub struct OffsetField<F> {
    pub inner: F,
    pub offset: DVector<f64>,
}

impl<F: VelocityField> VelocityField for OffsetField<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn velocity(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        self.inner.velocity(x, t) + &self.offset
    }
}

/// The closed-form optimal field of a discrete target under a Gaussian path.
///
/// Evaluation assumes `t < 1`; callers keep `t` on `[0, 1−ε]`.
pub struct OptimalField<S = OtSchedule> {
    pub data: DataMatrix,
    pub sched: S,
}

impl OptimalField<OtSchedule> {
    pub fn ot(data: DataMatrix) -> Self {
        Self {
            data,
            sched: OtSchedule,
        }
    }
}

impl<S: PathSchedule> OptimalField<S> {
    pub fn new(data: DataMatrix, sched: S) -> Self {
        Self { data, sched }
    }
}

impl<S: PathSchedule> VelocityField for OptimalField<S> {
    fn dim(&self) -> usize {
        self.data.dim()
    }
    fn velocity(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        optimal_velocity_unchecked(x, t, &self.data, &self.sched)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_fields() {
        let x = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(ZeroField(2).velocity(&x, 0.3), DVector::zeros(2));
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert_eq!(LinearField(a).velocity(&x, 0.0), DVector::from_vec(vec![2.0, -1.0]));
        let f = FnField::new(2, |x: &DVector<f64>, t| x * t);
        assert_eq!(f.velocity(&x, 2.0), DVector::from_vec(vec![2.0, 4.0]));
    }

    #[test]
    fn optimal_field_matches_function() {
        let data = DataMatrix::from_points(&[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let f = OptimalField::ot(data.clone());
        let x = DVector::from_vec(vec![0.2, 0.1]);
        let v = crate::paths::optimal_velocity(&x, 0.4, &data, &OtSchedule).unwrap();
        assert_eq!(f.velocity(&x, 0.4), v);
    }
}
