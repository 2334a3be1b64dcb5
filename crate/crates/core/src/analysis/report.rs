//! The full analysis over a set of outcomes: rate tables, group contrasts,
//! stepwise model selection and head-rotation bias.

use super::stepwise::{lrt_stepwise, Candidate, Design, FitSummary, Stepwise};
use super::{
    chi_square_2x2, head_bias, lmm_random_intercept, logistic_irls, rates, AnalysisError,
    ChiSquare, Group, HeadBiasRow, RateKey, RateRow, TrialKind, TrialOutcome,
};
use crate::engine::ResponseClass;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Logistic,
    Lmm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    /// Estimate on z-scored predictors.
    pub estimate: f64,
    pub std_error: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub family: Family,
    pub n_obs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stepwise: Option<Stepwise>,
    pub coefficients: Vec<Coefficient>,
    pub loglik: Option<f64>,
    pub aic: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_e: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2_marginal: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2_conditional: Option<f64>,
    /// Predictors left out because they do not vary over the rows.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constant_predictors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupContrast {
    pub measure: String,
    /// `[[hh_yes, hh_no], [nv_yes, nv_no]]`
    pub table: [[u64; 2]; 2],
    pub test: Option<ChiSquare>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRt {
    pub group: Group,
    pub kind: TrialKind,
    pub n: usize,
    pub median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub n_sessions: usize,
    pub n_trials: usize,
    pub response_counts: BTreeMap<Group, BTreeMap<ResponseClass, usize>>,
    pub rates_by_group: Vec<RateRow>,
    pub rates_by_condition: Vec<RateRow>,
    pub rates_by_side: Vec<RateRow>,
    pub contrasts: Vec<GroupContrast>,
    pub median_rt: Vec<MedianRt>,
    pub models: Vec<ModelReport>,
    pub head_bias: Vec<HeadBiasRow>,
}

/// Column-wise z-scores; constant columns become zero and are reported.
fn zscore(col: &[f64]) -> Option<Vec<f64>> {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (var > 1e-24).then(|| col.iter().map(|v| (v - mean) / var.sqrt()).collect())
}

struct Built {
    design: Design,
    candidates: Vec<Candidate>,
    constant: Vec<String>,
}

/// Builds an intercept plus z-scored main effects and their pairwise products.
fn build_design(mains: &[(&str, Vec<f64>)], interactions: &[(&str, &str)], n: usize) -> Built {
    let mut names = vec!["intercept".to_owned()];
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
    let mut z: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut constant = Vec::new();
    let mut candidates = Vec::new();
    for (name, raw) in mains {
        match zscore(raw) {
            Some(v) => {
                z.insert(name, v.clone());
                names.push((*name).to_owned());
                cols.push(v);
                candidates.push(Candidate {
                    name: (*name).to_owned(),
                    columns: vec![(*name).to_owned()],
                });
            }
            None => constant.push((*name).to_owned()),
        }
    }
    for (a, b) in interactions {
        let name = format!("{a}:{b}");
        let (Some(za), Some(zb)) = (z.get(a), z.get(b)) else {
            constant.push(name);
            continue;
        };
        let prod: Vec<f64> = za.iter().zip(zb).map(|(x, y)| x * y).collect();
        if zscore(&prod).is_none() {
            constant.push(name);
            continue;
        }
        names.push(name.clone());
        cols.push(prod);
        candidates.push(Candidate {
            name: name.clone(),
            columns: vec![name],
        });
    }
    let matrix = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    Built {
        design: Design { names, matrix },
        candidates,
        constant,
    }
}

fn coefs(names: &[String], est: &[f64], se: &[f64], p: &[f64]) -> Vec<Coefficient> {
    names
        .iter()
        .enumerate()
        .map(|(j, n)| Coefficient {
            name: n.clone(),
            estimate: est[j],
            std_error: se[j],
            p_value: p[j],
        })
        .collect()
}

fn empty_model(
    name: &str,
    family: Family,
    n: usize,
    constant: Vec<String>,
    err: String,
) -> ModelReport {
    ModelReport {
        name: name.to_owned(),
        family,
        n_obs: n,
        stepwise: None,
        coefficients: vec![],
        loglik: None,
        aic: None,
        sigma2_b: None,
        sigma2_e: None,
        r2_marginal: None,
        r2_conditional: None,
        constant_predictors: constant,
        error: Some(err),
    }
}

/// Fits a model either by stepwise selection over `built.candidates` or, when
/// `stepwise` is false, with every available column at once.
fn fit_model(
    name: &str,
    family: Family,
    built: Built,
    y: &[f64],
    groups: &[usize],
    stepwise: bool,
) -> ModelReport {
    let n = y.len();
    let fit_summary = |x: &DMatrix<f64>| -> Result<FitSummary, AnalysisError> {
        match family {
            Family::Logistic => logistic_irls(x, y).map(|f| FitSummary {
                loglik: f.loglik,
                n_params: f.n_params,
            }),
            Family::Lmm => lmm_random_intercept(x, y, groups).map(|f| FitSummary {
                loglik: f.loglik,
                n_params: f.n_params,
            }),
        }
    };
    let (selected, sw) = if stepwise {
        match lrt_stepwise(
            &built.design,
            &["intercept".to_owned()],
            &built.candidates,
            fit_summary,
        ) {
            Ok(s) => (s.selected.clone(), Some(s)),
            Err(e) => return empty_model(name, family, n, built.constant, e.to_string()),
        }
    } else {
        (built.design.names.clone(), None)
    };
    let x = match built.design.select(&selected) {
        Ok(x) => x,
        Err(e) => return empty_model(name, family, n, built.constant, e.to_string()),
    };
    let mut report = empty_model(name, family, n, built.constant, String::new());
    report.error = None;
    report.stepwise = sw;
    match family {
        Family::Logistic => match logistic_irls(&x, y) {
            Ok(f) => {
                report.coefficients = coefs(&selected, &f.coefficients, &f.std_errors, &f.p_values);
                report.loglik = Some(f.loglik);
                report.aic = Some(f.aic());
            }
            Err(e) => report.error = Some(e.to_string()),
        },
        Family::Lmm => match lmm_random_intercept(&x, y, groups) {
            Ok(f) => {
                report.coefficients = coefs(&selected, &f.coefficients, &f.std_errors, &f.p_values);
                report.loglik = Some(f.loglik);
                report.aic = Some(f.aic());
                report.sigma2_b = Some(f.sigma2_b);
                report.sigma2_e = Some(f.sigma2_e);
                report.r2_marginal = Some(f.r2_marginal);
                report.r2_conditional = Some(f.r2_conditional);
            }
            Err(e) => report.error = Some(e.to_string()),
        },
    }
    report
}

fn session_index(rows: &[&TrialOutcome]) -> Vec<usize> {
    let ids: BTreeSet<&str> = rows.iter().map(|o| o.session_id.as_str()).collect();
    let map: BTreeMap<&str, usize> = ids.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
    rows.iter().map(|o| map[o.session_id.as_str()]).collect()
}

fn main_effects(rows: &[&TrialOutcome]) -> Vec<(&'static str, Vec<f64>)> {
    vec![
        (
            "group",
            rows.iter()
                .map(|o| (o.group == Group::Hh) as u8 as f64)
                .collect(),
        ),
        (
            "kind",
            rows.iter()
                .map(|o| (o.kind == TrialKind::Overtaken) as u8 as f64)
                .collect(),
        ),
        (
            "bearing",
            rows.iter().map(|o| o.beta_std.unwrap_or(0.0)).collect(),
        ),
    ]
}

const INTERACTIONS: [(&str, &str); 3] =
    [("group", "kind"), ("group", "bearing"), ("kind", "bearing")];

fn side_effects(rows: &[&TrialOutcome]) -> Vec<(&'static str, Vec<f64>)> {
    vec![
        (
            "blind_side",
            rows.iter()
                .map(|o| (o.beta_std.unwrap_or(0.0) < 0.0) as u8 as f64)
                .collect(),
        ),
        (
            "abs_bearing",
            rows.iter()
                .map(|o| o.beta_std.unwrap_or(0.0).abs())
                .collect(),
        ),
    ]
}

fn contrast(
    measure: &str,
    targets: &[&TrialOutcome],
    pred: impl Fn(&TrialOutcome) -> bool,
) -> GroupContrast {
    let mut table = [[0u64; 2]; 2];
    for o in targets {
        let r = if o.group == Group::Hh { 0 } else { 1 };
        let c = if pred(o) { 0 } else { 1 };
        table[r][c] += 1;
    }
    let res = chi_square_2x2(table[0][0], table[0][1], table[1][0], table[1][1]);
    GroupContrast {
        measure: measure.to_owned(),
        table,
        error: res.as_ref().err().map(|e| e.to_string()),
        test: res.ok(),
    }
}

pub fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    Some(if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    })
}

/// Runs the whole pipeline over outcomes from any number of sessions.
pub fn analyze(outcomes: &[TrialOutcome]) -> Report {
    let sessions: BTreeSet<&str> = outcomes.iter().map(|o| o.session_id.as_str()).collect();
    let mut response_counts: BTreeMap<Group, BTreeMap<ResponseClass, usize>> = BTreeMap::new();
    for o in outcomes {
        *response_counts
            .entry(o.group)
            .or_default()
            .entry(o.response_class)
            .or_default() += 1;
    }
    let targets: Vec<&TrialOutcome> = outcomes
        .iter()
        .filter(|o| o.kind != TrialKind::Null)
        .collect();

    let contrasts = vec![
        contrast("miss", &targets, |o| !o.detected),
        contrast("collision", &targets, |o| o.collided),
    ];

    let mut median_rt = Vec::new();
    for g in [Group::Nv, Group::Hh] {
        for k in [TrialKind::Approaching, TrialKind::Overtaken] {
            let mut rts: Vec<f64> = outcomes
                .iter()
                .filter(|o| {
                    o.group == g && o.kind == k && o.response_class == ResponseClass::HitCorrect
                })
                .filter_map(|o| o.rt)
                .collect();
            median_rt.push(MedianRt {
                group: g,
                kind: k,
                n: rts.len(),
                median: median(&mut rts),
            });
        }
    }

    let mut models = Vec::new();
    if !targets.is_empty() {
        let n = targets.len();
        let groups = session_index(&targets);
        let y_det: Vec<f64> = targets.iter().map(|o| o.detected as u8 as f64).collect();
        let y_col: Vec<f64> = targets.iter().map(|o| o.collided as u8 as f64).collect();
        models.push(fit_model(
            "detection",
            Family::Logistic,
            build_design(&main_effects(&targets), &INTERACTIONS, n),
            &y_det,
            &groups,
            true,
        ));
        models.push(fit_model(
            "collision",
            Family::Logistic,
            build_design(&main_effects(&targets), &INTERACTIONS, n),
            &y_col,
            &groups,
            true,
        ));
    }
    let rt_rows: Vec<&TrialOutcome> = targets
        .iter()
        .copied()
        .filter(|o| o.response_class == ResponseClass::HitCorrect && o.rt.is_some_and(|r| r > 0.0))
        .collect();
    if !rt_rows.is_empty() {
        let y: Vec<f64> = rt_rows.iter().map(|o| o.rt.unwrap().ln()).collect();
        models.push(fit_model(
            "log_rt",
            Family::Lmm,
            build_design(&main_effects(&rt_rows), &INTERACTIONS, rt_rows.len()),
            &y,
            &session_index(&rt_rows),
            true,
        ));
    }
    let hh: Vec<&TrialOutcome> = targets
        .iter()
        .copied()
        .filter(|o| o.group == Group::Hh)
        .collect();
    if !hh.is_empty() {
        let inter = [("blind_side", "abs_bearing")];
        let y_det: Vec<f64> = hh.iter().map(|o| o.detected as u8 as f64).collect();
        let y_col: Vec<f64> = hh.iter().map(|o| o.collided as u8 as f64).collect();
        models.push(fit_model(
            "hh_side_detection",
            Family::Logistic,
            build_design(&side_effects(&hh), &inter, hh.len()),
            &y_det,
            &session_index(&hh),
            false,
        ));
        models.push(fit_model(
            "hh_side_collision",
            Family::Logistic,
            build_design(&side_effects(&hh), &inter, hh.len()),
            &y_col,
            &session_index(&hh),
            false,
        ));
        let hh_rt: Vec<&TrialOutcome> = rt_rows
            .iter()
            .copied()
            .filter(|o| o.group == Group::Hh)
            .collect();
        if !hh_rt.is_empty() {
            let y: Vec<f64> = hh_rt.iter().map(|o| o.rt.unwrap().ln()).collect();
            models.push(fit_model(
                "hh_side_log_rt",
                Family::Lmm,
                build_design(&side_effects(&hh_rt), &inter, hh_rt.len()),
                &y,
                &session_index(&hh_rt),
                false,
            ));
        }
    }

    Report {
        n_sessions: sessions.len(),
        n_trials: outcomes.len(),
        response_counts,
        rates_by_group: rates(outcomes, &[RateKey::Group]),
        rates_by_condition: rates(outcomes, &[RateKey::Group, RateKey::Kind, RateKey::BetaStd]),
        rates_by_side: rates(outcomes, &[RateKey::Group, RateKey::Side]),
        contrasts,
        median_rt,
        models,
        head_bias: head_bias(outcomes),
    }
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.prec$}"))
}

fn name_of<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

impl Report {
    /// Plain-text summary for people; the JSON form carries everything.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "sessions: {}  trials: {}",
            self.n_sessions, self.n_trials
        );
        let _ = writeln!(s, "\nresponses");
        for (g, counts) in &self.response_counts {
            let parts: Vec<String> = counts
                .iter()
                .map(|(k, v)| format!("{}={v}", name_of(k)))
                .collect();
            let _ = writeln!(s, "  {:<3} {}", name_of(g), parts.join(" "));
        }
        let _ = writeln!(
            s,
            "\nrates by condition (group kind beta_std: n detected% collided%)"
        );
        for r in &self.rates_by_condition {
            let _ = writeln!(
                s,
                "  {:<3} {:<11} {:>6}: n={:<4} det={:>6} col={:>6}",
                r.group.map(|g| name_of(&g)).unwrap_or_default(),
                r.kind.map(|k| name_of(&k)).unwrap_or_default(),
                opt(r.beta_std, 0),
                r.n,
                opt(r.detection_rate.map(|x| 100.0 * x), 1),
                opt(r.collision_rate.map(|x| 100.0 * x), 1),
            );
        }
        let _ = writeln!(s, "\ngroup contrasts (Pearson chi-square, df 1)");
        for c in &self.contrasts {
            match &c.test {
                Some(t) => {
                    let _ = writeln!(
                        s,
                        "  {:<10} HH {}/{}  NV {}/{}  chi2={:.2} p={:.4}",
                        c.measure,
                        c.table[0][0],
                        c.table[0][0] + c.table[0][1],
                        c.table[1][0],
                        c.table[1][0] + c.table[1][1],
                        t.statistic,
                        t.p_value
                    );
                }
                None => {
                    let _ = writeln!(
                        s,
                        "  {:<10} {}",
                        c.measure,
                        c.error.as_deref().unwrap_or("")
                    );
                }
            }
        }
        let _ = writeln!(s, "\nmedian RT of correct hits, s");
        for m in &self.median_rt {
            let _ = writeln!(
                s,
                "  {:<3} {:<11} n={:<5} median={}",
                name_of(&m.group),
                name_of(&m.kind),
                m.n,
                opt(m.median, 3)
            );
        }
        for m in &self.models {
            let _ = writeln!(
                s,
                "\nmodel {} ({}, n={})",
                m.name,
                name_of(&m.family),
                m.n_obs
            );
            if let Some(e) = &m.error {
                let _ = writeln!(s, "  not fitted: {e}");
                continue;
            }
            if let Some(sw) = &m.stepwise {
                for st in &sw.steps {
                    let _ = writeln!(
                        s,
                        "  + {:<14} dAIC={:>7.2} chi2({})={:>7.2} p={:.4} {}",
                        st.candidate,
                        st.delta_aic,
                        st.df,
                        st.chi_square,
                        st.p_value,
                        if st.retained { "retained" } else { "dropped" }
                    );
                }
            }
            for c in &m.coefficients {
                let _ = writeln!(
                    s,
                    "  {:<24} std.b={:>8.3} se={:.3} p={:.4}",
                    c.name, c.estimate, c.std_error, c.p_value
                );
            }
            if let (Some(rm), Some(rc)) = (m.r2_marginal, m.r2_conditional) {
                let _ = writeln!(s, "  R2 marginal={rm:.3} conditional={rc:.3}");
            }
            if !m.constant_predictors.is_empty() {
                let _ = writeln!(
                    s,
                    "  constant, omitted: {}",
                    m.constant_predictors.join(", ")
                );
            }
        }
        let _ = writeln!(
            s,
            "\nhead rotation bias (deg, standardized; t vs 0, Holm within group)"
        );
        for h in &self.head_bias {
            let t = h.test.as_ref();
            let _ = writeln!(
                s,
                "  {:<3} {:<5} {:<6} mean={:>7} n={:<4} t={:>7} p_holm={}",
                name_of(&h.group),
                name_of(&h.channel),
                name_of(&h.window),
                opt(h.mean, 2),
                h.n_subjects,
                opt(t.map(|t| t.statistic), 2),
                opt(h.p_holm, 4)
            );
        }
        s
    }
}
