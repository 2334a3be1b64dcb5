//! Fixed-effects logistic regression by iteratively reweighted least squares.

use super::dist::normal_cdf;
use super::AnalysisError;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-10;
/// Linear predictors beyond this magnitude mean a fitted probability of 0 or 1.
const SEPARATION_ETA: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub p_values: Vec<f64>,
    pub loglik: f64,
    pub n_obs: usize,
    pub n_params: usize,
    pub iterations: usize,
    /// Log-likelihood after every accepted step, starting from all-zero coefficients.
    pub loglik_trace: Vec<f64>,
}

impl LogisticFit {
    pub fn aic(&self) -> f64 {
        2.0 * self.n_params as f64 - 2.0 * self.loglik
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let beta = DVector::from_column_slice(&self.coefficients);
        (x * beta).iter().map(|&e| sigmoid(e)).collect()
    }
}

pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bernoulli log-likelihood at linear predictors `eta`.
pub fn log_likelihood(eta: &DVector<f64>, y: &[f64]) -> f64 {
    eta.iter()
        .zip(y)
        .map(|(&e, &yi)| yi * e - softplus(e))
        .sum()
}

pub fn logistic_irls(x: &DMatrix<f64>, y: &[f64]) -> Result<LogisticFit, AnalysisError> {
    let (n, p) = x.shape();
    if n != y.len() {
        return Err(AnalysisError::InvalidInput(format!(
            "design has {n} rows but y has {} values",
            y.len()
        )));
    }
    if n == 0 || p == 0 {
        return Err(AnalysisError::InsufficientData("empty design".into()));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(AnalysisError::InvalidInput(
            "logistic response must be 0 or 1".into(),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::InvalidInput(
            "non-finite design value".into(),
        ));
    }
    let yv = DVector::from_column_slice(y);
    let mut beta = DVector::zeros(p);
    let mut eta = x * &beta;
    let mut ll = log_likelihood(&eta, y);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    let mut info = DMatrix::zeros(p, p);
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mu = eta.map(sigmoid);
        let w = mu.map(|m| m * (1.0 - m));
        let grad = x.transpose() * (&yv - &mu);
        let mut xw = x.clone();
        for (i, mut row) in xw.row_iter_mut().enumerate() {
            row *= w[i];
        }
        info = x.transpose() * xw;
        let Some(chol) = info.clone().cholesky() else {
            // At the start every weight is 1/4, so only collinearity can make
            // the information singular; later it means weights collapsed to 0.
            return Err(if iterations == 1 {
                AnalysisError::Singular("design matrix is rank deficient".into())
            } else {
                AnalysisError::Separation("fitted probabilities reached 0 or 1".into())
            });
        };
        let step = chol.solve(&grad);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &beta + &step * scale;
            let cand_eta = x * &cand;
            let cand_ll = log_likelihood(&cand_eta, y);
            if cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                accepted = Some((cand, cand_eta, cand_ll));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, cand_eta, cand_ll)) = accepted else {
            converged = true;
            break;
        };
        let delta = (&cand - &beta).amax();
        beta = cand;
        eta = cand_eta;
        ll = cand_ll.max(ll);
        trace.push(ll);
        if delta < TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged || eta.iter().any(|e| e.abs() > SEPARATION_ETA) {
        return Err(AnalysisError::Separation(format!(
            "coefficients diverge (max |linear predictor| {:.1} after {iterations} iterations)",
            eta.amax()
        )));
    }
    let cov = info
        .try_inverse()
        .ok_or_else(|| AnalysisError::Singular("information matrix is singular".into()))?;
    let std_errors: Vec<f64> = (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let p_values = beta
        .iter()
        .zip(&std_errors)
        .map(|(b, se)| 2.0 * (1.0 - normal_cdf((b / se).abs())))
        .collect();
    Ok(LogisticFit {
        coefficients: beta.iter().copied().collect(),
        std_errors,
        p_values,
        loglik: ll,
        n_obs: n,
        n_params: p,
        iterations,
        loglik_trace: trace,
    })
}
