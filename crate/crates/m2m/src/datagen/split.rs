//! Time-axis partitioning.
//!
//! Cuts are placed at the requested fractions of *sample mass* along the
//! anchor-day axis, then the last `gap_days` worth of days before the first
//! cut move from train into the validation band. That keeps the three splits
//! an exact partition while guaranteeing that no label horizon bridges train
//! and test: the closest train anchor sits at least the gap plus the whole
//! validation band away from the earliest test anchor.

use super::{DataError, Sample};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub valid_frac: f64,
    pub test_frac: f64,
    pub gap_days: u32,
}

impl Default for SplitSpec {
    fn default() -> SplitSpec {
        SplitSpec {
            train_frac: 0.8,
            valid_frac: 0.1,
            test_frac: 0.1,
            gap_days: 7,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let sum = self.train_frac + self.valid_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::Config(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        if self.train_frac <= 0.0 || self.valid_frac <= 0.0 || self.test_frac <= 0.0 {
            return Err(DataError::Config("split fractions must be positive".into()));
        }
        if self.gap_days < 7 {
            return Err(DataError::Config(format!(
                "gap must cover at least one week, got {} days",
                self.gap_days
            )));
        }
        Ok(())
    }
}

/// Partitions samples into (train, valid, test) along the anchor-day axis.
/// Every sample lands in exactly one split.
pub fn split(
    samples: Vec<Sample>,
    spec: &SplitSpec,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>), DataError> {
    spec.validate()?;
    if samples.is_empty() {
        return Ok((Vec::new(), Vec::new(), Vec::new()));
    }

    let mut day_counts: Vec<(u32, usize)> = Vec::new();
    {
        let mut days: Vec<u32> = samples.iter().map(|s| s.day_index).collect();
        days.sort_unstable();
        for d in days {
            match day_counts.last_mut() {
                Some((last, n)) if *last == d => *n += 1,
                _ => day_counts.push((d, 1)),
            }
        }
    }
    let n = samples.len() as f64;
    let cut = |frac: f64| -> u32 {
        let mut cum = 0usize;
        for &(day, count) in &day_counts {
            cum += count;
            if cum as f64 >= frac * n * (1.0 - 1e-12) {
                return day + 1;
            }
        }
        day_counts.last().unwrap().0 + 1
    };
    let c1 = cut(spec.train_frac);
    let c2 = cut(spec.train_frac + spec.valid_frac).max(c1);
    let train_end = c1.saturating_sub(spec.gap_days);

    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for s in samples {
        if s.day_index < train_end {
            train.push(s);
        } else if s.day_index < c2 {
            valid.push(s);
        } else {
            test.push(s);
        }
    }
    if train.is_empty() || valid.is_empty() || test.is_empty() {
        return Err(DataError::TooFewDays(format!(
            "cuts at day {train_end}/{c2} leave splits of {}/{}/{} samples",
            train.len(),
            valid.len(),
            test.len()
        )));
    }
    Ok((train, valid, test))
}
