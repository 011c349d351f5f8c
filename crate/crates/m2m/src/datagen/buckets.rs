//! Discretization of heavy-tailed nonnegative features into buckets.
//!
//! Buckets are half-open on the left boundary: with boundaries b_0 < b_1 < …
//! a value lands in the count of boundaries at or below it, so a value equal
//! to a boundary takes the higher bucket. Boundary 0 is implicit: everything
//! below b_0 (including 0) is bucket 0.

use super::DataError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BucketSpec {
    boundaries: Vec<f64>,
}

impl BucketSpec {
    pub fn new(boundaries: Vec<f64>) -> Result<BucketSpec, DataError> {
        if boundaries.is_empty()
            || boundaries[0] <= 0.0
            || boundaries.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(DataError::Config(
                "bucket boundaries must be positive and strictly increasing".into(),
            ));
        }
        Ok(BucketSpec { boundaries })
    }

    /// Geometrically spaced boundaries from `lo` to `hi` inclusive, giving
    /// `count` buckets in total (count - 1 boundaries).
    pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Result<BucketSpec, DataError> {
        if !(lo > 0.0 && hi > lo && count >= 2) {
            return Err(DataError::Config(format!(
                "log_spaced needs 0 < lo < hi and count >= 2, got lo={lo} hi={hi} count={count}"
            )));
        }
        let n = count - 1;
        let step = (hi / lo).ln() / (n - 1).max(1) as f64;
        let boundaries = (0..n).map(|i| lo * (step * i as f64).exp()).collect();
        BucketSpec::new(boundaries)
    }

    pub fn n_buckets(&self) -> usize {
        self.boundaries.len() + 1
    }

    /// Bucket id of a nonnegative value.
    pub fn discretize(&self, value: f64) -> Result<usize, DataError> {
        if !(value >= 0.0) {
            return Err(DataError::Config(format!(
                "cannot discretize negative or non-finite value {value}"
            )));
        }
        Ok(self.boundaries.partition_point(|&b| b <= value))
    }
}
