//! Response triggers (`need_response`) and the score-trace transforms used
//! around them.
//!
//! Two triggers are provided. The sum trigger accumulates informative scores
//! and fires once the running sum reaches `s` (`>=`), then resets to zero.
//! The combined trigger fires on any frame whose informative plus relevance
//! score is strictly larger than `t`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("sum threshold must be > 0, got {0}")]
    InvalidThreshold(f64),
    #[error("cannot normalize an empty score list")]
    EmptyInput,
    #[error("bad policy spec `{0}` (expected `sum:s=<real>` or `combo:t=<real>`)")]
    BadSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyConfig<T> {
    SumThreshold { s: T },
    CombinedThreshold { t: T },
}

impl<T: Scalar> PolicyConfig<T> {
    pub fn sum(s: T) -> Result<Self, PolicyError> {
        if s > T::zero() && s.is_finite() {
            Ok(Self::SumThreshold { s })
        } else {
            Err(PolicyError::InvalidThreshold(s.to_f64_lossy()))
        }
    }

    pub fn combined(t: T) -> Result<Self, PolicyError> {
        if t.is_nan() {
            return Err(PolicyError::BadSpec(format!("combo:t={t}")));
        }
        Ok(Self::CombinedThreshold { t })
    }
}

impl<T: Scalar> FromStr for PolicyConfig<T> {
    type Err = PolicyError;

    fn from_str(spec: &str) -> Result<Self, Self::Err> {
        let bad = || PolicyError::BadSpec(spec.to_owned());
        let (kind, param) = spec.trim().split_once(':').ok_or_else(bad)?;
        let (key, value) = param.split_once('=').ok_or_else(bad)?;
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        let value = T::from_f64(value).ok_or_else(bad)?;
        match (kind.trim(), key.trim()) {
            ("sum", "s") => Self::sum(value),
            ("combo", "t") => Self::combined(value).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl<T: Scalar> fmt::Display for PolicyConfig<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SumThreshold { s } => write!(f, "sum:s={s}"),
            Self::CombinedThreshold { t } => write!(f, "combo:t={t}"),
        }
    }
}

impl<T: Scalar> Serialize for PolicyConfig<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for PolicyConfig<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let spec = String::deserialize(deserializer)?;
        spec.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SumState<T> {
    pub accumulator: T,
}

fn check_score<T: Scalar>(score: T) -> Result<(), PolicyError> {
    if score.in_unit_interval() {
        Ok(())
    } else {
        Err(PolicyError::ScoreOutOfRange(score.to_f64_lossy()))
    }
}

pub fn sum_threshold_step<T: Scalar>(
    state: SumState<T>,
    informative: T,
    s: T,
) -> Result<(SumState<T>, bool), PolicyError> {
    check_score(informative)?;
    let accumulator = state.accumulator + informative;
    if accumulator >= s {
        Ok((SumState::default(), true))
    } else {
        Ok((SumState { accumulator }, false))
    }
}

pub fn combined_threshold_step<T: Scalar>(
    informative: T,
    relevance: T,
    t: T,
) -> Result<bool, PolicyError> {
    check_score(informative)?;
    check_score(relevance)?;
    Ok(informative + relevance > t)
}

/// Outcome of evaluating the trigger on one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyDecision<T> {
    pub fired: bool,
    /// Sum trigger: the accumulator after this frame (0 after firing).
    /// Combined trigger: the informative + relevance value compared to `t`.
    pub acc: T,
}

/// Stateful `need_response`: a policy config plus the running sum state.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsePolicy<T> {
    config: PolicyConfig<T>,
    sum: SumState<T>,
}

impl<T: Scalar> ResponsePolicy<T> {
    pub fn new(config: PolicyConfig<T>) -> Self {
        Self {
            config,
            sum: SumState::default(),
        }
    }

    pub fn config(&self) -> PolicyConfig<T> {
        self.config
    }

    pub fn accumulator(&self) -> T {
        self.sum.accumulator
    }

    /// Swaps the policy. The sum accumulator carries over unless `reset`.
    pub fn set_config(&mut self, config: PolicyConfig<T>, reset: bool) {
        self.config = config;
        if reset {
            self.reset();
        }
    }

    pub fn reset(&mut self) {
        self.sum = SumState::default();
    }

    pub fn evaluate(&mut self, informative: T, relevance: T) -> Result<PolicyDecision<T>, PolicyError> {
        match self.config {
            PolicyConfig::SumThreshold { s } => {
                let (state, fired) = sum_threshold_step(self.sum, informative, s)?;
                self.sum = state;
                Ok(PolicyDecision {
                    fired,
                    acc: state.accumulator,
                })
            }
            PolicyConfig::CombinedThreshold { t } => {
                let fired = combined_threshold_step(informative, relevance, t)?;
                Ok(PolicyDecision {
                    fired,
                    acc: informative + relevance,
                })
            }
        }
    }
}

/// Frame indices at which a fresh policy fires over a fixed score trace.
pub fn fire_indices<T: Scalar>(
    config: PolicyConfig<T>,
    scores: &[(T, T)],
) -> Result<Vec<usize>, PolicyError> {
    let mut policy = ResponsePolicy::new(config);
    let mut fired = Vec::new();
    for (i, &(inf, rel)) in scores.iter().enumerate() {
        if policy.evaluate(inf, rel)?.fired {
            fired.push(i);
        }
    }
    Ok(fired)
}

/// Symmetric moving average with radius `w`; the window is truncated at
/// both ends rather than padded.
pub fn smooth<T: Scalar>(scores: &[T], w: usize) -> Vec<T> {
    let n = scores.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(w);
            let hi = (i + w).min(n - 1);
            let window = &scores[lo..=hi];
            let mean = window.iter().copied().sum::<T>() / T::from_count(window.len());
            // Clamp away rounding so a constant window maps to itself exactly.
            let (min, max) = window
                .iter()
                .fold((window[0], window[0]), |(a, b), &x| (a.min(x), b.max(x)));
            mean.max(min).min(max)
        })
        .collect()
}

/// Min-max normalization to [0, 1]. A constant input maps to all zeros.
pub fn minmax_normalize<T: Scalar>(scores: &[T]) -> Result<Vec<T>, PolicyError> {
    let first = *scores.first().ok_or(PolicyError::EmptyInput)?;
    let (min, max) = scores
        .iter()
        .fold((first, first), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = max - min;
    if range <= T::zero() {
        return Ok(vec![T::zero(); scores.len()]);
    }
    Ok(scores.iter().map(|&x| (x - min) / range).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_fires_on_third_step() {
        let mut state = SumState::default();
        let mut fires = vec![];
        for x in [0.9, 0.8, 0.5] {
            let (next, fired) = sum_threshold_step(state, x, 2.0).unwrap();
            state = next;
            fires.push(fired);
        }
        assert_eq!(fires, [false, false, true]);
        assert_eq!(state.accumulator, 0.0);
    }

    #[test]
    fn sum_reaching_threshold_exactly_fires() {
        let (state, fired) = sum_threshold_step(SumState { accumulator: 1.0 }, 1.0, 2.0).unwrap();
        assert!(fired);
        assert_eq!(state.accumulator, 0.0);
    }

    #[test]
    fn sum_never_fires_on_zeros() {
        let scores = vec![(0.0f64, 0.0); 50];
        assert!(fire_indices(PolicyConfig::sum(2.0).unwrap(), &scores)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn out_of_range_scores_rejected() {
        assert_eq!(
            sum_threshold_step(SumState::default(), 2.0, 2.0),
            Err(PolicyError::ScoreOutOfRange(2.0))
        );
        assert!(combined_threshold_step(0.5, -0.1, 0.3).is_err());
        assert!(combined_threshold_step(f64::NAN, 0.1, 0.3).is_err());
    }

    #[test]
    fn combined_is_strict() {
        assert!(combined_threshold_step(0.35, 0.30, 0.6).unwrap());
        assert!(!combined_threshold_step(0.30, 0.30, 0.6).unwrap());
        assert!(!combined_threshold_step(0.0, 0.0, 0.3).unwrap());
    }

    #[test]
    fn policy_spec_strings() {
        let p: PolicyConfig<f64> = "sum:s=2".parse().unwrap();
        assert_eq!(p, PolicyConfig::SumThreshold { s: 2.0 });
        let p: PolicyConfig<f32> = "combo:t=0.5".parse().unwrap();
        assert_eq!(p, PolicyConfig::CombinedThreshold { t: 0.5 });
        assert_eq!(p.to_string(), "combo:t=0.5");
        for bad in ["sum:s=0", "sum:s=-1", "sum:t=2", "combo", "combo:t=x", "max:t=1"] {
            assert!(bad.parse::<PolicyConfig<f64>>().is_err(), "{bad}");
        }
    }

    #[test]
    fn set_config_keeps_accumulator_unless_reset() {
        let mut p = ResponsePolicy::new(PolicyConfig::sum(2.0).unwrap());
        p.evaluate(0.7, 0.0).unwrap();
        p.set_config(PolicyConfig::sum(3.0).unwrap(), false);
        assert_eq!(p.accumulator(), 0.7);
        p.set_config(PolicyConfig::sum(3.0).unwrap(), true);
        assert_eq!(p.accumulator(), 0.0);
    }

    #[test]
    fn smooth_examples() {
        let out = smooth(&[0.0f64, 1.0, 0.0, 0.0, 1.0], 1);
        let expected = [0.5, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.5];
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let x = [0.3f32, 0.9, 0.1];
        assert_eq!(smooth(&x, 0), x);
        assert_eq!(smooth(&[0.25f64; 7], 3), vec![0.25; 7]);
        assert!(smooth::<f64>(&[], 2).is_empty());
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0]).unwrap(), [0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[3.0f32; 3]).unwrap(), [0.0; 3]);
        assert_eq!(minmax_normalize(&[-1.0, 0.0, 3.0]).unwrap(), [0.0, 0.25, 1.0]);
        assert_eq!(minmax_normalize::<f64>(&[]), Err(PolicyError::EmptyInput));
    }
}
