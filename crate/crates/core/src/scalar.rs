//! Scalar type used for ratio-valued indicators.
//!
//! Time accounting is done in exact integer milliseconds; only the derived
//! indicators (availability, utilization, effectiveness, efficiency) are
//! floating point. They are computed over any [`Scalar`], with `f64` being the
//! concrete choice re-exported at the crate root.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};
use serde::Serialize;

/// Floating point type the indicators are computed in: `f32` or `f64`.
pub trait Scalar: Float + FromPrimitive + Display + Debug + Default + Serialize + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `num / den`, or `None` when the denominator is zero.
pub fn ratio<S: Scalar>(num: u64, den: u64) -> Option<S> {
    if den == 0 {
        return None;
    }
    // u64 -> float never fails for f32/f64 (it may round).
    let n = S::from_u64(num)?;
    let d = S::from_u64(den)?;
    Some(n / d)
}

/// Fixed-precision rendering used by every CSV writer, so that two runs (or a
/// run and its replay) produce byte-identical files.
pub fn format_fixed<S: Scalar>(value: S, decimals: usize) -> String {
    format!("{value:.decimals$}")
}
