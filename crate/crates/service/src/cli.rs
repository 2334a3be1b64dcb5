//! The `pedtrial` command.
//!
//! Exit codes: 0 ok, 1 usage, 2 data error, 3 internal error.

use crate::server::{self, ServerConfig};
use clap::{Args, Parser, Subcommand};
use pedtrial_core::agents::Profile;
use pedtrial_core::analysis::{self, derive_outcomes, pws_estimate, trial_walking_speed, RateKey};
use pedtrial_core::config::{load_scenario, Scenario};
use pedtrial_core::engine::EngineConfig;
use pedtrial_core::scenario::SessionDesign;
use pedtrial_core::session::{simulate_session, SessionSettings};
use pedtrial_core::store::{self, Block};
use rayon::prelude::*;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "pedtrial",
    version,
    about = "Pedestrian collision-detection trials: simulate, analyze, serve"
)]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

/// Defaults that can come from the environment.
#[derive(Debug, Clone, Args)]
pub struct Overrides {
    /// Engine time step in seconds.
    #[arg(long, global = true, env = "PEDTRIAL_DT")]
    pub dt: Option<f64>,
    /// Designed time to collision in seconds.
    #[arg(long, global = true, env = "PEDTRIAL_TTC")]
    pub ttc: Option<f64>,
    /// Distractor pedestrians per trial.
    #[arg(long, global = true, env = "PEDTRIAL_DISTRACTORS")]
    pub distractors: Option<u32>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run synthetic sessions and write them to a store directory.
    Simulate(SimulateArgs),
    /// Estimate preferred walking speed from the preferred-speed block of sessions.
    Pws {
        /// Session directories or directories containing them.
        #[arg(required = true)]
        logs: Vec<PathBuf>,
    },
    /// Derive outcomes and run the statistics over sessions.
    Analyze(AnalyzeArgs),
    /// Serve live sessions over websockets.
    Serve(ServeArgs),
    /// Check a scenario file and report every violation.
    Validate { file: PathBuf },
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// nv, hh-left, hh-right, or a profile defined in --config.
    #[arg(long)]
    pub profile: String,
    #[arg(long, default_value_t = 1)]
    pub sessions: u32,
    /// Defaults to the scenario file's seed, or 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "sessions", env = "PEDTRIAL_OUT")]
    pub out: PathBuf,
    /// Scenario file supplying engine, design, trials and profiles.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Session directories or directories containing them.
    #[arg(required = true)]
    pub sessions: Vec<PathBuf>,
    /// Where the artifacts go.
    #[arg(long, default_value = "analysis")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8750", env = "PEDTRIAL_BIND")]
    pub bind: String,
    /// Finished sessions are written here.
    #[arg(long, default_value = "sessions", env = "PEDTRIAL_OUT")]
    pub store: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(CliError::Usage(e.render().to_string()));
        }
    };
    match cli.command {
        Command::Simulate(a) => simulate(&cli.overrides, a),
        Command::Pws { logs } => pws(&logs),
        Command::Analyze(a) => analyze(&a),
        Command::Serve(a) => serve(&cli.overrides, a),
        Command::Validate { file } => validate(&file),
    }
}

fn read_scenario(path: &Path) -> Result<Scenario, CliError> {
    let text = fs::read_to_string(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    load_scenario(&text).map_err(|violations| {
        let lines: Vec<String> = violations
            .iter()
            .map(|v| format!("{}:{v}", path.display()))
            .collect();
        CliError::Data(lines.join("\n"))
    })
}

fn apply(
    o: &Overrides,
    engine: &mut EngineConfig,
    design: &mut SessionDesign,
) -> Result<(), CliError> {
    if let Some(dt) = o.dt {
        engine.dt = dt;
    }
    if let Some(ttc) = o.ttc {
        design.ttc_design = ttc;
    }
    if let Some(n) = o.distractors {
        design.distractor_count = n;
    }
    engine
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn simulate(o: &Overrides, a: SimulateArgs) -> Result<(), CliError> {
    let scenario = a.config.as_deref().map(read_scenario).transpose()?;
    let mut settings = SessionSettings::default();
    let mut seed = a.seed;
    if let Some(s) = &scenario {
        settings.engine = s.engine.clone();
        settings.design = s.design.clone();
        settings.trials = s.trials.clone();
        seed = seed.or(Some(s.seed));
    }
    apply(o, &mut settings.engine, &mut settings.design)?;
    let profile = match scenario.as_ref().and_then(|s| s.profiles.get(&a.profile)) {
        Some((base, params)) => {
            settings.policy = Some(params.clone());
            *base
        }
        None => a.profile.parse::<Profile>().map_err(CliError::Usage)?,
    };
    let seed = seed.unwrap_or(0);
    fs::create_dir_all(&a.out).map_err(|e| data(format!("{}: {e}", a.out.display())))?;

    let written: Result<Vec<PathBuf>, CliError> = (0..a.sessions)
        .into_par_iter()
        .map(|i| {
            let session = simulate_session(&settings, profile, seed, i).map_err(data)?;
            let dir = store::session_dir(&a.out, &session.manifest.session_id);
            store::write_session(&dir, &session).map_err(data)?;
            Ok(dir)
        })
        .collect();
    for dir in written? {
        println!("{}", dir.display());
    }
    Ok(())
}

fn session_dirs(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut dirs = Vec::new();
    for p in paths {
        dirs.extend(store::list_sessions(p).map_err(data)?);
    }
    if dirs.is_empty() {
        return Err(data("no session directories found"));
    }
    Ok(dirs)
}

fn pws(logs: &[PathBuf]) -> Result<(), CliError> {
    println!("session_id\ttrials\tcompleted\tpws");
    for dir in session_dirs(logs)? {
        let session = store::read_session(&dir).map_err(data)?;
        let block: Vec<_> = session.block(Block::Pws).collect();
        let completed = block
            .iter()
            .filter(|r| trial_walking_speed(r).is_some())
            .count();
        let est = pws_estimate(block.iter().copied())
            .map_err(|e| data(format!("{}: {e}", session.manifest.session_id)))?;
        println!(
            "{}\t{}\t{}\t{:.4}",
            session.manifest.session_id,
            block.len(),
            completed,
            est
        );
    }
    Ok(())
}

fn analyze(a: &AnalyzeArgs) -> Result<(), CliError> {
    let dirs = session_dirs(&a.sessions)?;
    let outcomes: Result<Vec<Vec<_>>, CliError> = dirs
        .par_iter()
        .map(|dir| {
            let session = store::read_session(dir).map_err(data)?;
            derive_outcomes(&session).map_err(|e| data(format!("{}: {e}", dir.display())))
        })
        .collect();
    let mut outcomes: Vec<_> = outcomes?.into_iter().flatten().collect();
    outcomes.sort_by(|x, y| (&x.session_id, x.trial_id).cmp(&(&y.session_id, y.trial_id)));

    let report = analysis::report::analyze(&outcomes);
    let internal = |e: std::io::Error| CliError::Internal(format!("{}: {e}", a.out.display()));
    fs::create_dir_all(&a.out).map_err(internal)?;
    let create = |name: &str| fs::File::create(a.out.join(name)).map_err(internal);
    analysis::write_outcomes_csv(create("outcomes.csv")?, &outcomes)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let rows = analysis::rates(
        &outcomes,
        &[RateKey::Group, RateKey::Kind, RateKey::BetaStd],
    );
    analysis::write_rates_csv(create("rates.csv")?, &rows)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Internal(e.to_string()))?;
    fs::write(a.out.join("report.json"), json + "\n").map_err(internal)?;
    let text = report.to_text();
    fs::write(a.out.join("report.txt"), &text).map_err(internal)?;
    print!("{text}");
    Ok(())
}

fn serve(o: &Overrides, a: ServeArgs) -> Result<(), CliError> {
    let (mut engine, mut design) = match a.config.as_deref().map(read_scenario).transpose()? {
        Some(s) => (s.engine, s.design),
        None => (EngineConfig::default(), SessionDesign::default()),
    };
    apply(o, &mut engine, &mut design)?;
    let config = ServerConfig {
        engine,
        design,
        store_root: Some(a.store),
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .map_err(|e| data(format!("bind {}: {e}", a.bind)))?;
        let addr = listener
            .local_addr()
            .map_err(|e| CliError::Internal(e.to_string()))?;
        println!("listening on ws://{addr}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        server::run(listener, config, shutdown)
            .await
            .map_err(|e| CliError::Internal(e.to_string()))
    })
}

fn validate(file: &Path) -> Result<(), CliError> {
    let scenario = read_scenario(file)?;
    let n = scenario.schedule().len();
    println!(
        "{}: ok ({n} trials, {} profiles)",
        file.display(),
        scenario.profiles.len()
    );
    Ok(())
}
