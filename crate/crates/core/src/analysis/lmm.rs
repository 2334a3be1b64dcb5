//! Linear mixed model with a random intercept per group, fitted by maximum
//! likelihood with the variance ratio profiled out.
//!
//! With `lambda = sigma2_b / sigma2_e`, the marginal covariance of group `g`
//! is `sigma2_e * (I + lambda * 1 1')`, whose inverse is
//! `(I - c_g 1 1') / sigma2_e` with `c_g = lambda / (1 + lambda * n_g)`.
//! For fixed `lambda` the fixed effects are a GLS solve and `sigma2_e` has a
//! closed form, leaving a one-dimensional search over `log lambda`.

use super::dist::normal_cdf;
use super::AnalysisError;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

pub const LOG_LAMBDA_MIN: f64 = -12.0;
pub const LOG_LAMBDA_MAX: f64 = 12.0;
const GRID_STEP: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub p_values: Vec<f64>,
    pub sigma2_b: f64,
    pub sigma2_e: f64,
    pub lambda: f64,
    pub loglik: f64,
    pub n_obs: usize,
    pub n_groups: usize,
    /// Fixed effects plus both variance components.
    pub n_params: usize,
    pub r2_marginal: f64,
    pub r2_conditional: f64,
    /// Set when there is a single group and the model reduced to OLS.
    pub random_effect_dropped: bool,
}

impl LmmFit {
    pub fn aic(&self) -> f64 {
        2.0 * self.n_params as f64 - 2.0 * self.loglik
    }
}

struct Group {
    n: f64,
    xtx: DMatrix<f64>,
    xt1: DVector<f64>,
    xty: DVector<f64>,
    rows: Vec<usize>,
}

struct Profile<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    groups: Vec<Group>,
    n: f64,
}

struct Eval {
    beta: DVector<f64>,
    xhx: DMatrix<f64>,
    sigma2_e: f64,
    loglik: f64,
}

impl<'a> Profile<'a> {
    fn new(x: &'a DMatrix<f64>, y: &'a DVector<f64>, labels: &[usize]) -> Self {
        let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &g) in labels.iter().enumerate() {
            by_group.entry(g).or_default().push(i);
        }
        let p = x.ncols();
        let groups = by_group
            .into_values()
            .map(|rows| {
                let mut xtx = DMatrix::zeros(p, p);
                let mut xt1 = DVector::zeros(p);
                let mut xty = DVector::zeros(p);
                for &i in &rows {
                    let xi = x.row(i).transpose();
                    xtx += &xi * xi.transpose();
                    xt1 += &xi;
                    xty += &xi * y[i];
                }
                Group {
                    n: rows.len() as f64,
                    xtx,
                    xt1,
                    xty,
                    rows,
                }
            })
            .collect();
        Self {
            x,
            y,
            groups,
            n: x.nrows() as f64,
        }
    }

    fn eval(&self, lambda: f64) -> Option<Eval> {
        let p = self.x.ncols();
        let mut xhx = DMatrix::zeros(p, p);
        let mut xhy = DVector::zeros(p);
        let mut logdet = 0.0;
        for g in &self.groups {
            let c = lambda / (1.0 + lambda * g.n);
            let sy: f64 = g.rows.iter().map(|&i| self.y[i]).sum();
            xhx += &g.xtx - &g.xt1 * g.xt1.transpose() * c;
            xhy += &g.xty - &g.xt1 * (c * sy);
            logdet += (lambda * g.n).ln_1p();
        }
        let beta = xhx.clone().cholesky()?.solve(&xhy);
        let resid = self.y - self.x * &beta;
        let mut quad = 0.0;
        for g in &self.groups {
            let c = lambda / (1.0 + lambda * g.n);
            let (mut ss, mut s) = (0.0, 0.0);
            for &i in &g.rows {
                ss += resid[i] * resid[i];
                s += resid[i];
            }
            quad += ss - c * s * s;
        }
        let sigma2_e = quad / self.n;
        if !(sigma2_e > 0.0) {
            return None;
        }
        let loglik = -0.5 * self.n * ((2.0 * PI * sigma2_e).ln() + 1.0) - 0.5 * logdet;
        Some(Eval {
            beta,
            xhx,
            sigma2_e,
            loglik,
        })
    }

    fn loglik_at_log(&self, log_lambda: f64) -> f64 {
        self.eval(log_lambda.exp())
            .map_or(f64::NEG_INFINITY, |e| e.loglik)
    }
}

/// Profiled log-likelihood at a given variance ratio; exposed for diagnostics.
pub fn profile_loglik(x: &DMatrix<f64>, y: &[f64], groups: &[usize], lambda: f64) -> Option<f64> {
    let yv = DVector::from_column_slice(y);
    Profile::new(x, &yv, groups).eval(lambda).map(|e| e.loglik)
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > 1e-10 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Fits `y = X beta + b_group + e` by maximum likelihood.
///
/// `groups` holds one label per row. A single group leaves the random
/// intercept unidentifiable; the fit then falls back to OLS and sets
/// `random_effect_dropped`.
pub fn lmm_random_intercept(
    x: &DMatrix<f64>,
    y: &[f64],
    groups: &[usize],
) -> Result<LmmFit, AnalysisError> {
    let (n, p) = x.shape();
    if y.len() != n || groups.len() != n {
        return Err(AnalysisError::InvalidInput(format!(
            "design has {n} rows, y has {}, groups has {}",
            y.len(),
            groups.len()
        )));
    }
    if n <= p {
        return Err(AnalysisError::InsufficientData(format!(
            "{n} observations for {p} fixed effects"
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(AnalysisError::InvalidInput("non-finite value".into()));
    }
    let yv = DVector::from_column_slice(y);
    let prof = Profile::new(x, &yv, groups);
    let single = prof.groups.len() < 2;

    let lambda = if single {
        0.0
    } else {
        let steps = ((LOG_LAMBDA_MAX - LOG_LAMBDA_MIN) / GRID_STEP).round() as usize;
        let grid: Vec<f64> = (0..=steps)
            .map(|k| LOG_LAMBDA_MIN + k as f64 * GRID_STEP)
            .collect();
        let (best_k, _) = grid
            .iter()
            .map(|&l| prof.loglik_at_log(l))
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (k, v)| if v > acc.1 { (k, v) } else { acc },
            );
        let lo = grid[best_k.saturating_sub(1)];
        let hi = grid[(best_k + 1).min(steps)];
        let log_l = golden_max(|l| prof.loglik_at_log(l), lo, hi);
        let at_zero = prof.eval(0.0).map_or(f64::NEG_INFINITY, |e| e.loglik);
        if at_zero >= prof.loglik_at_log(log_l) {
            0.0
        } else {
            log_l.exp()
        }
    };
    let fit = prof
        .eval(lambda)
        .ok_or_else(|| AnalysisError::Singular("fixed-effects design is rank deficient".into()))?;

    let cov =
        fit.xhx.clone().try_inverse().ok_or_else(|| {
            AnalysisError::Singular("fixed-effects design is rank deficient".into())
        })? * fit.sigma2_e;
    let std_errors: Vec<f64> = (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let p_values = fit
        .beta
        .iter()
        .zip(&std_errors)
        .map(|(b, se)| 2.0 * (1.0 - normal_cdf((b / se).abs())))
        .collect();
    let fitted = x * &fit.beta;
    let mean_f = fitted.mean();
    let var_f = fitted.iter().map(|v| (v - mean_f).powi(2)).sum::<f64>() / n as f64;
    let sigma2_b = lambda * fit.sigma2_e;
    let denom = var_f + sigma2_b + fit.sigma2_e;
    Ok(LmmFit {
        coefficients: fit.beta.iter().copied().collect(),
        std_errors,
        p_values,
        sigma2_b,
        sigma2_e: fit.sigma2_e,
        lambda,
        loglik: fit.loglik,
        n_obs: n,
        n_groups: prof.groups.len(),
        n_params: p + if single { 1 } else { 2 },
        r2_marginal: var_f / denom,
        r2_conditional: (var_f + sigma2_b) / denom,
        random_effect_dropped: single,
    })
}
