//! Scenario files: a TOML description of a subject, engine settings, the
//! session design or an explicit trial list, and named policy profiles.
//!
//! ```toml
//! schema_version = 1
//! seed = 7
//!
//! [subject]
//! pws = 0.9
//! field_loss = "left_hemianopia"
//!
//! [engine]
//! dt = 0.013888888888888888
//!
//! [[trials]]
//! kind = "approaching"
//! beta_deg = -20.0
//!
//! [profiles.wide-scan]
//! base = "hh-left"
//! scan_amplitude = 70.0
//! ```
//!
//! Every table is optional except `subject`. Violations are reported with the
//! 1-based line they come from.

use crate::agents::{PolicyParams, Profile};
use crate::engine::EngineConfig;
use crate::scenario::{
    generate_session_with, CollisionCourse, CourseKind, SessionDesign, SubjectParams, TrialSpec,
    DEFAULT_DISTRACTOR_COUNT, DEFAULT_END_TRIGGER, DEFAULT_OVERTAKEN_INIT_DISTANCE,
    DEFAULT_START_TRIGGER, DEFAULT_TTC,
};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use std::collections::BTreeMap;
use std::fmt;
use toml::de::{DeTable, DeValue};
use toml::Spanned;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// 1-based; 0 when the problem has no location (e.g. a missing table).
    pub line: usize,
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line > 0 {
            write!(f, "line {}: {}: {}", self.line, self.path, self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

/// One `[[trials]]` entry. A missing `kind` makes a null trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    #[serde(default)]
    pub trial_id: Option<u32>,
    #[serde(default)]
    pub kind: Option<CourseKind>,
    #[serde(default)]
    pub beta_deg: Option<f64>,
    #[serde(default = "default_ttc")]
    pub ttc_design: f64,
    #[serde(default = "default_init_distance")]
    pub overtaken_init_distance: f64,
    #[serde(default = "default_distractors")]
    pub distractor_count: u32,
    #[serde(default)]
    pub rng_seed: Option<u64>,
    #[serde(default = "default_start")]
    pub start_trigger_distance: f64,
    #[serde(default = "default_end")]
    pub end_trigger_distance: f64,
}

fn default_ttc() -> f64 {
    DEFAULT_TTC
}
fn default_init_distance() -> f64 {
    DEFAULT_OVERTAKEN_INIT_DISTANCE
}
fn default_distractors() -> u32 {
    DEFAULT_DISTRACTOR_COUNT
}
fn default_start() -> f64 {
    DEFAULT_START_TRIGGER
}
fn default_end() -> f64 {
    DEFAULT_END_TRIGGER
}

impl Default for TrialEntry {
    fn default() -> Self {
        Self {
            trial_id: None,
            kind: None,
            beta_deg: None,
            ttc_design: DEFAULT_TTC,
            overtaken_init_distance: DEFAULT_OVERTAKEN_INIT_DISTANCE,
            distractor_count: DEFAULT_DISTRACTOR_COUNT,
            rng_seed: None,
            start_trigger_distance: DEFAULT_START_TRIGGER,
            end_trigger_distance: DEFAULT_END_TRIGGER,
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawScenario {
    schema_version: Spanned<u32>,
    #[serde(default)]
    seed: u64,
    subject: Spanned<SubjectParams>,
    #[serde(default)]
    engine: Option<Spanned<EngineConfig>>,
    #[serde(default)]
    design: Option<Spanned<SessionDesign>>,
    #[serde(default)]
    trials: Vec<Spanned<TrialEntry>>,
    #[serde(default)]
    profiles: BTreeMap<String, Spanned<toml::Table>>,
}

/// A validated scenario file.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub subject: SubjectParams,
    pub engine: EngineConfig,
    pub design: SessionDesign,
    /// Explicit trials; `None` means the design generates the schedule.
    pub trials: Option<Vec<TrialSpec>>,
    pub profiles: BTreeMap<String, (Profile, PolicyParams)>,
}

impl Scenario {
    /// The trial list: explicit trials if given, otherwise the generated schedule.
    pub fn schedule(&self) -> Vec<TrialSpec> {
        match &self.trials {
            Some(t) => t.clone(),
            None => generate_session_with(&self.design, &self.subject, self.seed),
        }
    }
}

struct LineIndex(Vec<usize>);

impl LineIndex {
    fn new(text: &str) -> Self {
        let mut starts = vec![0];
        starts.extend(text.match_indices('\n').map(|(i, _)| i + 1));
        Self(starts)
    }

    fn line(&self, offset: usize) -> usize {
        match self.0.binary_search(&offset) {
            Ok(i) => i + 1,
            Err(i) => i,
        }
    }
}

fn keys_of<T: Serialize>(v: &T) -> Json {
    serde_json::to_value(v).unwrap_or(Json::Null)
}

fn schema() -> Json {
    let mut top = serde_json::Map::new();
    for k in ["schema_version", "seed"] {
        top.insert(k.into(), Json::Null);
    }
    top.insert(
        "subject".into(),
        keys_of(&SubjectParams::new(1.0, crate::scenario::FieldLoss::None)),
    );
    top.insert("engine".into(), keys_of(&EngineConfig::default()));
    top.insert("design".into(), keys_of(&SessionDesign::default()));
    top.insert(
        "trials".into(),
        Json::Array(vec![keys_of(&TrialEntry::default())]),
    );
    Json::Object(top)
}

/// Reports keys that no part of the schema knows about.
fn unknown_keys(
    table: &DeTable<'_>,
    schema: &Json,
    path: &str,
    lines: &LineIndex,
    out: &mut Vec<Violation>,
) {
    let Json::Object(known) = schema else { return };
    for (key, value) in table {
        let name = key.get_ref().as_ref();
        let here = if path.is_empty() {
            name.to_owned()
        } else {
            format!("{path}.{name}")
        };
        if path.is_empty() && name == "profiles" {
            if let Some(profiles) = value.get_ref().as_table() {
                let params = keys_of(&PolicyParams::nv_default());
                for (pname, pval) in profiles {
                    if let Some(t) = pval.get_ref().as_table() {
                        let mut allowed = params.clone();
                        if let Json::Object(m) = &mut allowed {
                            m.insert("base".into(), Json::Null);
                        }
                        let p = format!("profiles.{}", pname.get_ref());
                        unknown_keys(t, &allowed, &p, lines, out);
                    }
                }
            }
            continue;
        }
        let Some(sub) = known.get(name) else {
            out.push(Violation {
                line: lines.line(key.span().start),
                path: here,
                message: "unknown key".into(),
            });
            continue;
        };
        match (value.get_ref(), sub) {
            (DeValue::Table(t), Json::Object(_)) => unknown_keys(t, sub, &here, lines, out),
            (DeValue::Array(items), Json::Array(elem)) if !elem.is_empty() => {
                for (i, item) in items.iter().enumerate() {
                    if let Some(t) = item.get_ref().as_table() {
                        unknown_keys(t, &elem[0], &format!("{here}[{i}]"), lines, out);
                    }
                }
            }
            _ => {}
        }
    }
}

fn build_profile(base_params: &mut PolicyParams, overrides: &toml::Table) -> Result<(), String> {
    let mut merged = toml::Table::try_from(&*base_params).map_err(|e| e.to_string())?;
    for (k, v) in overrides {
        if k != "base" {
            merged.insert(k.clone(), v.clone());
        }
    }
    *base_params = merged
        .try_into()
        .map_err(|e: toml::de::Error| e.message().to_owned())?;
    Ok(())
}

/// Parses and checks a scenario file, collecting every violation found.
pub fn load_scenario(text: &str) -> Result<Scenario, Vec<Violation>> {
    let lines = LineIndex::new(text);
    let table = DeTable::parse(text).map_err(|e| {
        vec![Violation {
            line: e.span().map_or(0, |s| lines.line(s.start)),
            path: "<file>".into(),
            message: e.message().to_owned(),
        }]
    })?;
    let mut out = Vec::new();
    unknown_keys(table.get_ref(), &schema(), "", &lines, &mut out);

    let raw: RawScenario = toml::from_str(text).map_err(|e| {
        let mut v = std::mem::take(&mut out);
        v.push(Violation {
            line: e.span().map_or(0, |s| lines.line(s.start)),
            path: "<file>".into(),
            message: e.message().to_owned(),
        });
        v
    })?;

    let at = |s: std::ops::Range<usize>| lines.line(s.start);
    if *raw.schema_version.get_ref() != CONFIG_SCHEMA_VERSION {
        out.push(Violation {
            line: at(raw.schema_version.span()),
            path: "schema_version".into(),
            message: format!(
                "unsupported version {} (expected {CONFIG_SCHEMA_VERSION})",
                raw.schema_version.get_ref()
            ),
        });
    }
    let subject = *raw.subject.get_ref();
    if let Err(e) = subject.validate() {
        out.push(Violation {
            line: at(raw.subject.span()),
            path: "subject".into(),
            message: e.to_string(),
        });
    }
    let engine_line = raw.engine.as_ref().map_or(0, |e| at(e.span()));
    let engine = raw.engine.map(Spanned::into_inner).unwrap_or_default();
    if let Err(e) = engine.validate() {
        out.push(Violation {
            line: engine_line,
            path: "engine".into(),
            message: e.to_string(),
        });
    }
    let design_line = raw.design.as_ref().map_or(0, |d| at(d.span()));
    let design = raw.design.map(Spanned::into_inner).unwrap_or_default();
    if !(design.ttc_design > 0.0 && design.ttc_design.is_finite()) {
        out.push(Violation {
            line: design_line,
            path: "design.ttc_design".into(),
            message: "must be > 0".into(),
        });
    }

    let trials = if raw.trials.is_empty() {
        for spec in generate_session_with(&design, &subject, raw.seed) {
            check_trial(&spec, &subject, &engine, design_line, "design", &mut out);
        }
        None
    } else {
        let mut specs = Vec::with_capacity(raw.trials.len());
        for (i, entry) in raw.trials.iter().enumerate() {
            let line = at(entry.span());
            let path = format!("trials[{i}]");
            let e = entry.get_ref();
            let course = match (e.kind, e.beta_deg) {
                (Some(kind), Some(beta_deg)) => Some(CollisionCourse {
                    kind,
                    beta_deg,
                    ttc_design: e.ttc_design,
                    overtaken_init_distance: e.overtaken_init_distance,
                }),
                (Some(_), None) => {
                    out.push(Violation {
                        line,
                        path: path.clone(),
                        message: "a colliding trial needs beta_deg".into(),
                    });
                    None
                }
                (None, Some(_)) => {
                    out.push(Violation {
                        line,
                        path: path.clone(),
                        message: "beta_deg given without kind".into(),
                    });
                    None
                }
                (None, None) => None,
            };
            let spec = TrialSpec {
                trial_id: e.trial_id.unwrap_or(i as u32),
                course,
                distractor_count: e.distractor_count,
                rng_seed: e.rng_seed.unwrap_or(raw.seed.wrapping_add(i as u64)),
                start_trigger_distance: e.start_trigger_distance,
                end_trigger_distance: e.end_trigger_distance,
            };
            check_trial(&spec, &subject, &engine, line, &path, &mut out);
            specs.push(spec);
        }
        let mut ids: Vec<u32> = specs.iter().map(|s| s.trial_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            out.push(Violation {
                line: at(raw.trials[0].span()),
                path: "trials".into(),
                message: "trial_id values must be unique".into(),
            });
        }
        Some(specs)
    };

    let mut profiles = BTreeMap::new();
    for (name, table) in &raw.profiles {
        let line = at(table.span());
        let path = format!("profiles.{name}");
        let t = table.get_ref();
        let base = match t.get("base").and_then(|v| v.as_str()) {
            Some(b) => match b.parse::<Profile>() {
                Ok(p) => p,
                Err(e) => {
                    out.push(Violation {
                        line,
                        path,
                        message: e,
                    });
                    continue;
                }
            },
            None => {
                out.push(Violation {
                    line,
                    path,
                    message: "missing base profile (nv, hh-left or hh-right)".into(),
                });
                continue;
            }
        };
        let mut params = base.default_params();
        if let Err(e) = build_profile(&mut params, t).and_then(|_| params.validate()) {
            out.push(Violation {
                line,
                path,
                message: e,
            });
            continue;
        }
        profiles.insert(name.clone(), (base, params));
    }

    if out.is_empty() {
        Ok(Scenario {
            seed: raw.seed,
            subject,
            engine,
            design,
            trials,
            profiles,
        })
    } else {
        out.sort_by_key(|v| v.line);
        Err(out)
    }
}

fn check_trial(
    spec: &TrialSpec,
    subject: &SubjectParams,
    engine: &EngineConfig,
    line: usize,
    path: &str,
    out: &mut Vec<Violation>,
) {
    let mut push = |message: String| {
        out.push(Violation {
            line,
            path: path.to_owned(),
            message,
        })
    };
    if let Err(e) = spec.validate(&engine.placement) {
        push(e.to_string());
        return;
    }
    if let Some(course) = &spec.course {
        if subject.pws > 0.0 {
            if let Err(e) = course.place(subject.pws, &engine.placement) {
                push(e.to_string());
            }
        }
    }
}
