use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar used for scores, thresholds and metric values.
///
/// Implemented for `f32` and `f64`. Time in seconds is always `f64`
/// (it comes off the frame clock); everything derived from scores is `T`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    fn from_seconds(secs: f64) -> Self {
        <Self as FromPrimitive>::from_f64(secs).unwrap_or_else(Self::nan)
    }

    fn from_count(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).unwrap_or_else(Self::nan)
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// `true` when the value lies in the closed unit interval (NaN is rejected).
    fn in_unit_interval(self) -> bool {
        self >= Self::zero() && self <= Self::one()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_interval_rejects_nan_and_outside() {
        assert!(0.0f64.in_unit_interval());
        assert!(1.0f32.in_unit_interval());
        assert!(!f64::NAN.in_unit_interval());
        assert!(!(-0.1f64).in_unit_interval());
        assert!(!1.3f32.in_unit_interval());
    }

    #[test]
    fn conversions() {
        assert_eq!(f32::from_count(3), 3.0);
        assert_eq!(f64::from_seconds(1.5), 1.5);
        assert_eq!(0.25f32.to_f64_lossy(), 0.25);
    }
}
