//! Floating-point abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the model and solvers are generic over: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Byte width used in the model file.
    const WIDTH: u8;

    /// Converts an `f64` literal or config value.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const WIDTH: u8 = 4;
}

impl Scalar for f64 {
    const WIDTH: u8 = 8;
}

/// Logistic function, branching on sign so `exp` never overflows.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + exp(x))` without overflow; `-ln(sigmoid(x)) = softplus(-x)`.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, x| if x > m { x } else { m });
    let mut out: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: T = out.iter().copied().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// Backward pass of softmax: given `p = softmax(z)` and `dL/dp`, returns `dL/dz`.
pub fn softmax_backward<T: Scalar>(probs: &[T], upstream: &[T]) -> Vec<T> {
    let dot: T = probs.iter().zip(upstream).map(|(&p, &g)| p * g).sum();
    probs
        .iter()
        .zip(upstream)
        .map(|(&p, &g)| p * (g - dot))
        .collect()
}

/// True when `weights` is nonnegative and sums to one within `tol`.
pub fn is_simplex<T: Scalar>(weights: &[T], tol: f64) -> bool {
    let sum: f64 = weights.iter().map(|w| w.as_f64()).sum();
    !weights.is_empty()
        && weights.iter().all(|w| w.as_f64() >= 0.0 && w.is_finite())
        && (sum - 1.0).abs() <= tol
}
