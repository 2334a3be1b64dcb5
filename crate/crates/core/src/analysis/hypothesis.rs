//! Classical tests: t tests, Holm step-down, Pearson chi-square.

use super::dist::{chi_square_sf, student_t_quantile, student_t_two_sided};
use super::AnalysisError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
    /// Mean (one-sample) or mean difference (two-sample).
    pub estimate: f64,
    pub std_error: f64,
    pub ci95: (f64, f64),
    pub cohens_d: f64,
    pub n: usize,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, ss / (n - 1.0))
}

fn finite(xs: &[f64]) -> Result<(), AnalysisError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(AnalysisError::InvalidInput(
            "non-finite sample value".into(),
        ))
    }
}

/// Two-sided one-sample t test of `mean(xs) == mu0`.
pub fn one_sample_t(xs: &[f64], mu0: f64) -> Result<TTest, AnalysisError> {
    if xs.len() < 2 {
        return Err(AnalysisError::InsufficientData(format!(
            "one-sample t needs n >= 2, got {}",
            xs.len()
        )));
    }
    finite(xs)?;
    let (mean, var) = mean_var(xs);
    if var <= 0.0 {
        return Err(AnalysisError::DegenerateSample("zero variance".into()));
    }
    let n = xs.len();
    let se = (var / n as f64).sqrt();
    let t = (mean - mu0) / se;
    let df = (n - 1) as f64;
    let q = student_t_quantile(0.975, df);
    Ok(TTest {
        statistic: t,
        df,
        p_value: student_t_two_sided(t, df),
        estimate: mean,
        std_error: se,
        ci95: (mean - q * se, mean + q * se),
        cohens_d: (mean - mu0) / var.sqrt(),
        n,
    })
}

/// Welch's unequal-variance two-sample t test of `mean(xs) == mean(ys)`.
pub fn welch_t(xs: &[f64], ys: &[f64]) -> Result<TTest, AnalysisError> {
    if xs.len() < 2 || ys.len() < 2 {
        return Err(AnalysisError::InsufficientData(format!(
            "Welch t needs n >= 2 per sample, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    finite(xs)?;
    finite(ys)?;
    let (mx, vx) = mean_var(xs);
    let (my, vy) = mean_var(ys);
    if vx <= 0.0 && vy <= 0.0 {
        return Err(AnalysisError::DegenerateSample(
            "both samples have zero variance".into(),
        ));
    }
    let (nx, ny) = (xs.len() as f64, ys.len() as f64);
    let (ax, ay) = (vx / nx, vy / ny);
    let se = (ax + ay).sqrt();
    let t = (mx - my) / se;
    let df = (ax + ay).powi(2) / (ax * ax / (nx - 1.0) + ay * ay / (ny - 1.0));
    let pooled = (((nx - 1.0) * vx + (ny - 1.0) * vy) / (nx + ny - 2.0)).sqrt();
    let q = student_t_quantile(0.975, df);
    let diff = mx - my;
    Ok(TTest {
        statistic: t,
        df,
        p_value: student_t_two_sided(t, df),
        estimate: diff,
        std_error: se,
        ci95: (diff - q * se, diff + q * se),
        cohens_d: diff / pooled,
        n: xs.len() + ys.len(),
    })
}

/// Holm step-down adjusted p-values, returned in input order.
pub fn holm_bonferroni(pvals: &[f64]) -> Result<Vec<f64>, AnalysisError> {
    if let Some(p) = pvals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(AnalysisError::InvalidInput(format!(
            "p-value {p} outside [0, 1]"
        )));
    }
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]));
    let mut out = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        let adj = ((m - rank) as f64 * pvals[i]).min(1.0);
        running = running.max(adj);
        out[i] = running;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Pearson chi-square on the table `[[a, b], [c, d]]`, no continuity correction.
pub fn chi_square_2x2(a: u64, b: u64, c: u64, d: u64) -> Result<ChiSquare, AnalysisError> {
    let (a, b, c, d) = (a as f64, b as f64, c as f64, d as f64);
    let n = a + b + c + d;
    let margins = [a + b, c + d, a + c, b + d];
    if margins.iter().any(|&m| m == 0.0) {
        return Err(AnalysisError::DegenerateTable(
            "a row or column total is zero".into(),
        ));
    }
    let det = a * d - b * c;
    let stat = n * det * det / margins.iter().product::<f64>();
    Ok(ChiSquare {
        statistic: stat,
        df: 1.0,
        p_value: chi_square_sf(stat, 1.0),
    })
}
