//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Training runs in `f32`; gradient checks and formula conformance tests run
//! the very same code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used for constants and hyperparameters.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Lower clamp applied to every probability before it enters a logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// `-ln(clamp(p, eps, 1 - eps))` together with its derivative w.r.t. `p`.
///
/// The derivative is zero when the clamp is active.
pub fn neg_log_clamped<T: Scalar>(p: T) -> (T, T) {
    let lo = T::of(PROB_EPS);
    let hi = T::one() - lo;
    if p < lo {
        (-lo.ln(), T::zero())
    } else if p > hi {
        (-hi.ln(), T::zero())
    } else {
        (-p.ln(), -p.recip())
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = out.iter().copied().sum();
    for v in out.iter_mut() {
        *v = *v / total;
    }
    out
}
