//! Count-forecast metrics. NMAE divides total absolute error by total label
//! mass, so it is invariant to rescaling both arguments; SMAPE averages a
//! symmetric relative error bounded by 2.

/// Below this magnitude a prediction/label pair counts as (0, 0) and its
/// SMAPE term is defined as zero instead of 0/0.
const ZERO_EPS: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("metric inputs differ in length: {lhs} vs {rhs}")]
    LengthMismatch { lhs: usize, rhs: usize },
    #[error("metric over an empty slice is undefined")]
    Empty,
    /// NMAE normalizes by the label sum, so a slice of all-zero labels has
    /// no defined value. Reported as an error, never as zero or NaN.
    #[error("nmae undefined: label sum is not positive")]
    AllZeroLabels,
}

/// Compensated (Neumaier) summation; keeps long metric reductions exact to
/// the last bit regardless of accumulation order.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.c
    }
}

fn check_lengths(pred: &[f64], labels: &[f64]) -> Result<(), MetricsError> {
    if pred.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            lhs: pred.len(),
            rhs: labels.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// `sum |pred - label| / sum label`. Errors if the label sum is not positive.
pub fn nmae(pred: &[f64], labels: &[f64]) -> Result<f64, MetricsError> {
    check_lengths(pred, labels)?;
    let mut err = Kahan::default();
    let mut mass = Kahan::default();
    for (&p, &y) in pred.iter().zip(labels) {
        err.add((p - y).abs());
        mass.add(y);
    }
    if !(mass.value() > 0.0) {
        return Err(MetricsError::AllZeroLabels);
    }
    Ok(err.value() / mass.value())
}

/// `mean of |pred - label| / ((pred + label) / 2)`, in [0, 2]. A pair where
/// both sides are below 1e-9 contributes zero.
pub fn smape(pred: &[f64], labels: &[f64]) -> Result<f64, MetricsError> {
    check_lengths(pred, labels)?;
    let mut sum = Kahan::default();
    for (&p, &y) in pred.iter().zip(labels) {
        if p.abs() < ZERO_EPS && y.abs() < ZERO_EPS {
            continue;
        }
        sum.add((p - y).abs() / ((p + y) / 2.0));
    }
    Ok(sum.value() / pred.len() as f64)
}
