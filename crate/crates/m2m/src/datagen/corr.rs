//! Correlation machinery for the generator: sample Pearson, a
//! semidefinite-tolerant Cholesky, and the compensation that turns a target
//! correlation between observed counts into the latent correlation the
//! generator must install.
//!
//! Counts are Poisson draws around advertiser-level rates, and Poisson noise
//! dilutes correlation: if two rates correlate at rho, the counts correlate
//! at rho * att_i * att_j with att = 1 / sqrt(1 + 1/(cv^2 mu)). Independent
//! per-scenario noise of weight eta dilutes further by (1 - eta^2). The
//! generator therefore installs rho / ((1 - eta^2) att_i att_j) in the latent
//! layer so the observable correlation lands on target.

use super::DataError;

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, DataError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(DataError::Config(format!(
            "pearson needs two equal-length series of length >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y.iter()) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(DataError::ZeroVariance);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Cholesky factor L (lower triangular, row-major) with LL^T = a.
///
/// Tolerates positive semidefinite input: a pivot within `tol` of zero
/// flattens its row instead of failing, so perfectly correlated scenarios
/// (duplicate rows) factor cleanly. A pivot below `-tol` means the matrix is
/// not a correlation matrix at all.
pub fn cholesky_psd(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, DataError> {
    let n = a.len();
    let tol = 1e-9;
    if a.iter().any(|row| row.len() != n) {
        return Err(DataError::Config("correlation matrix must be square".into()));
    }
    let mut l = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s < -tol {
                    return Err(DataError::NotPositiveSemidefinite { pivot: i, value: s });
                }
                l[i][j] = s.max(0.0).sqrt();
            } else if l[j][j] > tol {
                l[i][j] = s / l[j][j];
            } else {
                l[i][j] = 0.0;
            }
        }
    }
    Ok(l)
}

/// Correlation dilution from Poisson sampling at rate scale `mu` with rate
/// coefficient of variation `cv`.
pub fn attenuation(mu: f64, cv: f64) -> f64 {
    1.0 / (1.0 + 1.0 / (cv * cv * mu)).sqrt()
}

/// Latent correlation that yields `target` between observed counts after
/// noise and Poisson dilution. Errors when no such correlation exists.
pub fn compensate(target: f64, eta: f64, att_i: f64, att_j: f64) -> Result<f64, DataError> {
    let denom = (1.0 - eta * eta) * att_i * att_j;
    if denom <= 0.0 {
        return Err(DataError::Config(format!(
            "correlation target {target} unreachable: dilution factor {denom} is not positive"
        )));
    }
    let latent = target / denom;
    if latent.abs() > 1.0 + 1e-9 {
        return Err(DataError::InfeasibleCorrelation { target, latent });
    }
    Ok(latent.clamp(-1.0, 1.0))
}
