//! Scalar abstraction shared by all numerical modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Feasibility / pivot tolerance used by the simplex solver.
    fn solver_tol() -> Self;

    /// Converts an `f64` literal. Panics only if the value is not representable,
    /// which cannot happen for `f32`/`f64`.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    fn solver_tol() -> Self {
        1e-5
    }
}

impl Real for f64 {
    fn solver_tol() -> Self {
        1e-10
    }
}

/// Numerically stable `ln(1 + exp(z))`.
pub fn softplus<F: Real>(z: F) -> F {
    if z > F::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `ln σ(z)` without overflow for either sign of `z`.
pub fn ln_sigmoid<F: Real>(z: F) -> F {
    -softplus(-z)
}

/// Plain logistic function, stable for large |z|.
pub fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_helpers_agree_with_naive_forms() {
        for &z in &[-30.0f64, -2.5, -0.1, 0.0, 0.7, 4.0, 35.0] {
            let naive = 1.0 / (1.0 + (-z).exp());
            assert!((sigmoid(z) - naive).abs() < 1e-15);
            assert!((ln_sigmoid(z) - naive.ln()).abs() < 1e-12);
        }
        assert!(ln_sigmoid(-800.0f64).is_finite());
        assert_eq!(sigmoid(800.0f64), 1.0);
    }

    #[test]
    fn f32_helpers() {
        assert!((sigmoid(1.0f32) - 0.731_058_6).abs() < 1e-6);
        assert!(softplus(100.0f32).is_finite());
    }
}
