//! Forward stepwise selection by likelihood-ratio tests.

use super::dist::chi_square_sf;
use super::AnalysisError;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub const ALPHA: f64 = 0.05;

/// Named columns of a full design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub names: Vec<String>,
    pub matrix: DMatrix<f64>,
}

impl Design {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Sub-design with the named columns, in the given order.
    pub fn select(&self, names: &[String]) -> Result<DMatrix<f64>, AnalysisError> {
        let idx = names
            .iter()
            .map(|n| {
                self.column(n)
                    .ok_or_else(|| AnalysisError::InvalidInput(format!("unknown column {n:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.matrix.select_columns(&idx))
    }
}

/// A term entered as a unit; it may span several columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub name: String,
    pub columns: Vec<String>,
}

/// What stepwise selection needs to know about a fitted model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub loglik: f64,
    /// Free parameters, including variance components.
    pub n_params: usize,
}

impl FitSummary {
    pub fn aic(&self) -> f64 {
        2.0 * self.n_params as f64 - 2.0 * self.loglik
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrtStep {
    pub candidate: String,
    pub loglik_base: f64,
    pub loglik_extended: f64,
    pub chi_square: f64,
    pub df: usize,
    pub p_value: f64,
    /// AIC of the smaller model minus AIC of the larger one.
    pub delta_aic: f64,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stepwise {
    pub selected: Vec<String>,
    pub steps: Vec<LrtStep>,
    pub final_fit: FitSummary,
}

/// Numerical rank via singular values.
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.ncols() == 0 || m.nrows() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let tol = max * (m.nrows().max(m.ncols()) as f64) * f64::EPSILON * 16.0;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Likelihood-ratio comparison of two fits whose designs differ by `df` columns.
pub fn lrt(candidate: &str, base: FitSummary, ext: FitSummary, df: usize) -> LrtStep {
    let chi = 2.0 * (ext.loglik - base.loglik);
    let p = chi_square_sf(chi.max(0.0), df as f64);
    LrtStep {
        candidate: candidate.to_owned(),
        loglik_base: base.loglik,
        loglik_extended: ext.loglik,
        chi_square: chi,
        df,
        p_value: p,
        delta_aic: base.aic() - ext.aic(),
        retained: p < ALPHA,
    }
}

/// Enters `candidates` one at a time in the given order, keeping each one
/// whose likelihood-ratio test against the current model has `p < 0.05`.
pub fn lrt_stepwise<F>(
    design: &Design,
    base: &[String],
    candidates: &[Candidate],
    mut fit: F,
) -> Result<Stepwise, AnalysisError>
where
    F: FnMut(&DMatrix<f64>) -> Result<FitSummary, AnalysisError>,
{
    let mut current: Vec<String> = base.to_vec();
    let base_x = design.select(&current)?;
    let mut current_fit = fit(&base_x)?;
    let mut current_rank = rank(&base_x);
    let mut steps = Vec::new();
    for cand in candidates {
        let mut cols = current.clone();
        for c in &cand.columns {
            if !cols.contains(c) {
                cols.push(c.clone());
            }
        }
        let x = design.select(&cols)?;
        let r = rank(&x);
        if r <= current_rank {
            return Err(AnalysisError::NonNested(format!(
                "adding {:?} does not enlarge the model (rank {} -> {})",
                cand.name, current_rank, r
            )));
        }
        let ext = fit(&x)?;
        let step = lrt(&cand.name, current_fit, ext, r - current_rank);
        if step.retained {
            current = cols;
            current_fit = ext;
            current_rank = r;
        }
        steps.push(step);
    }
    Ok(Stepwise {
        selected: current,
        steps,
        final_fit: current_fit,
    })
}
