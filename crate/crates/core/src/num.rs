//! Scalar abstraction for the numeric kernels.
//!
//! Scoring, losses, and the adaptable transition model are generic over
//! [`Real`] so they run identically at `f32` and `f64` precision. The rest of
//! the crate pins `f64` through the aliases exported from the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by every numeric kernel in this crate.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum<Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from `f64` for constants and config values.
    fn from_config(value: f64) -> Self {
        Self::from_f64(value).expect("finite f64 converts to any Real")
    }
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + Sum<Self>
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}

/// Numerically stable log-sum-exp over a non-empty slice.
pub fn log_sum_exp<R: Real>(values: &[R]) -> R {
    let max = values
        .iter()
        .copied()
        .fold(R::neg_infinity(), |acc, v| if v > acc { v } else { acc });
    if max.is_infinite() && max < R::zero() {
        return R::neg_infinity();
    }
    let sum: R = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_direct_computation() {
        let vals = [1.0f64, 2.0, 3.0];
        let direct = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((log_sum_exp(&vals) - direct).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_is_stable_for_large_inputs() {
        let vals = [1000.0f64, 1000.0];
        let got = log_sum_exp(&vals);
        assert!((got - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn log_sum_exp_works_at_f32() {
        let vals = [0.5f32, -0.5];
        let direct = (0.5f32.exp() + (-0.5f32).exp()).ln();
        assert!((log_sum_exp(&vals) - direct).abs() < 1e-6);
    }
}
