//! Experiment runner: configuration, dispatch and deterministic artefacts.
//!
//! A run resolves its configuration (file, then `SLOWFAST_SECTION__KEY`
//! environment overrides, then `--seed`), hashes the resolved TOML and
//! writes everything into `<out>/<command>-<hash prefix>/`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::averaging::{estimate_fbar, AveragedDrift, ErgodicBudget};
use crate::control::Control;
use crate::error::{Error, Result};
use crate::mc::{ldp_sweep, DeltaRule, Event, Method, SweepSpec};
use crate::model::{make_builtin, ModelSpec};
use crate::ratefn::{minimize_rate, Constraint, RateProblem, DEFAULT_STARTS};
use crate::sde::{
    simulate_controlled_stream, simulate_coupled_stream, simulate_flow_controlled, simulate_frozen_stream, PathSample,
    SimConfig,
};
use crate::skeleton::{solve_skeleton, SkeletonSystem};
use crate::stream::derive_seed;
use crate::suite::{run_suite, Budget};

pub const ENV_PREFIX: &str = "SLOWFAST_";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_ACCEPTANCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "slowfast", version, about = "Slow-fast SDE experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; never changes numeric output.
    #[arg(long, global = true, default_value_t = 1)]
    pub parallelism: usize,
    /// Root of the output tree (overrides `out` in the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, ValueEnum)]
pub enum Command {
    /// Coupled or controlled slow-fast paths.
    Simulate,
    /// Frozen fast process at fixed slow state.
    Frozen,
    /// Tabulate the averaged drift by ergodic averaging.
    Average,
    /// Solve the skeleton equation for a control.
    Skeleton,
    /// Minimise the rate functional for a constraint.
    Rate,
    /// Estimate `eps log P` along an epsilon ladder.
    Sweep,
    /// Common-noise flow moments over a grid of initial points.
    Flow,
    /// Run the property suite and print a pass/fail table.
    Check,
}

impl Command {
    pub fn as_str(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Frozen => "frozen",
            Command::Average => "average",
            Command::Skeleton => "skeleton",
            Command::Rate => "rate",
            Command::Sweep => "sweep",
            Command::Flow => "flow",
            Command::Check => "check",
        }
    }
}

// ------------------------------------------------------------------ config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelSection,
    pub sim: SimSection,
    pub control: ControlSection,
    pub frozen: FrozenSection,
    pub average: AverageSection,
    pub skeleton: SkeletonSection,
    pub rate: RateSection,
    pub sweep: SweepSection,
    pub flow: FlowSection,
    pub check: CheckSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            out: PathBuf::from("runs"),
            model: ModelSection::default(),
            sim: SimSection::default(),
            control: ControlSection::default(),
            frozen: FrozenSection::default(),
            average: AverageSection::default(),
            skeleton: SkeletonSection::default(),
            rate: RateSection::default(),
            sweep: SweepSection::default(),
            flow: FlowSection::default(),
            check: CheckSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub name: String,
    pub params: BTreeMap<String, f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            name: "LIN1D".into(),
            params: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub epsilon: f64,
    /// Defaults to `epsilon^2`.
    pub delta: Option<f64>,
    pub t_end: f64,
    pub n_steps: usize,
    /// Defaults to one slow step.
    pub khasminskii_delta: Option<f64>,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub n_paths: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            epsilon: 0.1,
            delta: None,
            t_end: 1.0,
            n_steps: 100,
            khasminskii_delta: None,
            x0: vec![0.0],
            y0: vec![0.0],
            n_paths: 100,
        }
    }
}

/// Control used by `simulate`, `skeleton` and `flow`: a CSV file, a constant
/// slow control, or zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ControlSection {
    pub file: Option<PathBuf>,
    pub constant: Option<Vec<f64>>,
    pub intervals: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrozenSection {
    pub x: Vec<f64>,
    pub y0: Vec<f64>,
    pub t_end: f64,
    pub n_steps: usize,
    pub n_paths: usize,
}

impl Default for FrozenSection {
    fn default() -> Self {
        FrozenSection {
            x: vec![0.0],
            y0: vec![1.0],
            t_end: 5.0,
            n_steps: 500,
            n_paths: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AverageSection {
    pub grid: Vec<f64>,
    /// Defaults to `10 / beta1`.
    pub t_burn: Option<f64>,
    pub t_avg: f64,
    pub n_reps: usize,
    pub step: f64,
}

impl Default for AverageSection {
    fn default() -> Self {
        AverageSection {
            grid: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            t_burn: None,
            t_avg: 20.0,
            n_reps: 32,
            step: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkeletonSection {
    pub x0: Vec<f64>,
    pub t_end: f64,
    pub levels: u32,
    /// Tabulated drift (`x, fbar, se`); closed form when omitted.
    pub fbar_file: Option<PathBuf>,
}

impl Default for SkeletonSection {
    fn default() -> Self {
        SkeletonSection {
            x0: vec![0.0],
            t_end: 1.0,
            levels: 14,
            fbar_file: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// `X_T = z`.
    Point,
    /// `normal · X_T >= offset`.
    Halfspace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateSection {
    pub x0: Vec<f64>,
    pub t_end: f64,
    pub constraint: ConstraintKind,
    pub z: Vec<f64>,
    pub normal: Vec<f64>,
    pub offset: f64,
    pub tol: f64,
    pub intervals: usize,
    pub starts: usize,
}

impl Default for RateSection {
    fn default() -> Self {
        RateSection {
            x0: vec![0.0],
            t_end: 1.0,
            constraint: ConstraintKind::Point,
            z: vec![1.0],
            normal: vec![1.0],
            offset: 1.0,
            tol: 1e-4,
            intervals: 20,
            starts: DEFAULT_STARTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub epsilons: Vec<f64>,
    pub delta_factor: f64,
    pub delta_power: f64,
    pub n_paths: usize,
    pub method: Method,
    /// Event `normal · X_T >= offset`.
    pub normal: Vec<f64>,
    pub offset: f64,
    /// Reference rate; computed with the `[rate]` machinery when omitted.
    pub i_ref: Option<f64>,
    pub intervals: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            epsilons: vec![0.5, 0.2, 0.1, 0.05],
            delta_factor: 1.0,
            delta_power: 2.0,
            n_paths: 10_000,
            method: Method::Tilted,
            normal: vec![1.0],
            offset: 1.0,
            i_ref: None,
            intervals: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    /// One-dimensional initial points.
    pub x0_grid: Vec<f64>,
    pub n_paths: usize,
    pub p: f64,
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection {
            x0_grid: vec![
                0.5,
                0.5 + 1.0 / 256.0,
                0.5 + 1.0 / 128.0,
                0.5 + 1.0 / 64.0,
                0.5 + 1.0 / 32.0,
            ],
            n_paths: 200,
            p: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSection {
    /// Multiplies every Monte Carlo budget of the suite.
    pub budget: f64,
}

impl Default for CheckSection {
    fn default() -> Self {
        CheckSection { budget: 1.0 }
    }
}

impl ExperimentConfig {
    /// Parses TOML; diagnostics carry line and column.
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        ExperimentConfig::from_toml(&text)
    }

    /// Applies `SLOWFAST_SECTION__KEY=value` overrides (`SLOWFAST_SEED`
    /// for top-level keys). Values are parsed as TOML, falling back to a
    /// plain string.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(self, vars: I) -> Result<ExperimentConfig> {
        let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        if vars.is_empty() {
            return Ok(self);
        }
        vars.sort();
        let mut doc = toml::Value::try_from(&self).map_err(|e| Error::config(e.to_string()))?;
        for (key, raw) in vars {
            let path: Vec<String> = key[ENV_PREFIX.len()..]
                .split("__")
                .map(|s| s.to_ascii_lowercase())
                .collect();
            let value = parse_env_value(&raw);
            let (last, parents) = path.split_last().expect("split yields at least one part");
            let mut table = doc.as_table_mut().expect("config serialises to a table");
            for part in parents {
                table = table
                    .entry(part.clone())
                    .or_insert_with(|| toml::Value::Table(Default::default()))
                    .as_table_mut()
                    .ok_or_else(|| Error::config(format!("{key}: {part} is not a section")))?;
            }
            table.insert(last.clone(), value);
        }
        doc.try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("environment override: {e}")))
    }

    /// Canonical TOML of everything that can influence numeric output.
    pub fn canonical(&self) -> Result<String> {
        let mut c = self.clone();
        c.out = PathBuf::new();
        toml::to_string(&c).map_err(|e| Error::config(e.to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn model(&self) -> Result<ModelSpec> {
        make_builtin(&self.model.name, &self.model.params)
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let s = &self.sim;
        let cfg = SimConfig {
            epsilon: s.epsilon,
            delta: s.delta.unwrap_or(s.epsilon * s.epsilon),
            t_end: s.t_end,
            n_steps: s.n_steps,
            khasminskii_delta: s.khasminskii_delta.unwrap_or(s.t_end / s.n_steps.max(1) as f64),
            seed: self.seed,
        };
        cfg.validate().map_err(|e| match e {
            Error::Config(m) => Error::config(format!("[sim]: {m}")),
            other => other,
        })?;
        Ok(cfg)
    }

    /// `None` means "no control given"; `simulate` then runs the coupled system.
    pub fn control(&self, t_end: f64, dim_slow: usize, dim_fast: usize) -> Result<Option<Control>> {
        let c = &self.control;
        match (&c.file, &c.constant) {
            (Some(_), Some(_)) => Err(Error::config("[control]: give either file or constant, not both")),
            (Some(path), None) => {
                let f =
                    File::open(path).map_err(|e| Error::config(format!("[control] file {}: {e}", path.display())))?;
                let ctl = Control::read_csv(f, t_end)?;
                if ctl.dim_slow() != dim_slow || ctl.dim_fast() != dim_fast {
                    return Err(Error::config("[control]: file dimensions do not match the model"));
                }
                Ok(Some(ctl))
            }
            (None, Some(v)) => {
                if v.len() != dim_slow {
                    return Err(Error::config(
                        "[control] constant: length must equal the slow dimension",
                    ));
                }
                Ok(Some(Control::constant_slow(
                    t_end,
                    c.intervals.unwrap_or(1),
                    v,
                    dim_fast,
                )?))
            }
            (None, None) => Ok(None),
        }
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Probe {
        v: toml::Value,
    }
    toml::from_str::<Probe>(&format!("v = {raw}"))
        .map(|p| p.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

// ------------------------------------------------------------------ runner

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: &'a str,
    seed: u64,
    version: &'a str,
    parallelism: usize,
    wall_time_s: f64,
    files: Vec<String>,
}

/// Maps an error to its exit status.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Domain(_) => EXIT_CONFIG,
        _ => EXIT_NUMERIC,
    }
}

/// Outcome of a successful run.
#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub exit: i32,
    /// Pass/fail table printed by `check`.
    pub report: Option<String>,
}

/// Resolves the configuration and runs `command` on a pool of
/// `cli.parallelism` threads.
pub fn run(cli: &Cli) -> Result<RunOutcome> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg = cfg.apply_env(std::env::vars())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if cli.parallelism == 0 {
        return Err(Error::config("--parallelism must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.parallelism)
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    pool.install(|| execute(cli.command, &cfg, cli.parallelism))
}

fn execute(command: Command, cfg: &ExperimentConfig, parallelism: usize) -> Result<RunOutcome> {
    let start = Instant::now();
    let hash = cfg.hash()?;
    let dir = cfg.out.join(format!("{}-{}", command.as_str(), &hash[..12]));
    fs::create_dir_all(&dir)?;
    let mut files = vec!["config.toml".to_string()];
    fs::write(dir.join("config.toml"), cfg.canonical()?)?;
    let mut exit = EXIT_OK;
    let mut report = None;
    match command {
        Command::Simulate => files.extend(cmd_simulate(cfg, &dir)?),
        Command::Frozen => files.extend(cmd_frozen(cfg, &dir)?),
        Command::Average => files.extend(cmd_average(cfg, &dir)?),
        Command::Skeleton => files.extend(cmd_skeleton(cfg, &dir)?),
        Command::Rate => files.extend(cmd_rate(cfg, &dir)?),
        Command::Sweep => files.extend(cmd_sweep(cfg, &dir)?),
        Command::Flow => files.extend(cmd_flow(cfg, &dir)?),
        Command::Check => {
            let (names, ok, table) = cmd_check(cfg, &dir)?;
            files.extend(names);
            report = Some(table);
            if !ok {
                exit = EXIT_ACCEPTANCE;
            }
        }
    }
    let manifest = Manifest {
        command: command.as_str(),
        config_hash: &hash,
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
        parallelism,
        wall_time_s: start.elapsed().as_secs_f64(),
        files,
    };
    write_json(&dir.join("manifest.json"), &serde_json::to_value(&manifest)?)?;
    Ok(RunOutcome { dir, exit, report })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_terminals(path: &Path, paths: &[PathSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let first = &paths[0];
    let mut header = vec!["path".to_string()];
    header.extend((0..first.dim_slow).map(|i| format!("x_{i}")));
    header.extend((0..first.dim_fast).map(|i| format!("y_{i}")));
    w.write_record(&header)?;
    let last = first.times.len() - 1;
    for (k, p) in paths.iter().enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(p.slow_at(last).iter().chain(p.fast_at(last)).map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn need_paths(n: usize, section: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::config(format!("[{section}] n_paths must be at least 1")));
    }
    Ok(())
}

fn cmd_simulate(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<String>> {
    let model = cfg.model()?;
    let sim = cfg.sim_config()?;
    need_paths(cfg.sim.n_paths, "sim")?;
    let control = cfg.control(sim.t_end, model.dim_slow(), model.dim_fast())?;
    let (x0, y0) = (&cfg.sim.x0, &cfg.sim.y0);
    let paths = (0..cfg.sim.n_paths as u64)
        .into_par_iter()
        .map(|s| match &control {
            Some(c) => simulate_controlled_stream(&model, &sim, x0, y0, c, s),
            None => simulate_coupled_stream(&model, &sim, x0, y0, s),
        })
        .collect::<Result<Vec<_>>>()?;
    paths[0].write_csv(create(&dir.join("path.csv"))?)?;
    write_terminals(&dir.join("terminal.csv"), &paths)?;
    Ok(vec!["path.csv".into(), "terminal.csv".into()])
}

fn cmd_frozen(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<String>> {
    let model = cfg.model()?;
    let f = &cfg.frozen;
    need_paths(f.n_paths, "frozen")?;
    let paths = (0..f.n_paths as u64)
        .into_par_iter()
        .map(|s| simulate_frozen_stream(&model, &f.x, &f.y0, f.t_end, f.n_steps, cfg.seed, s))
        .collect::<Result<Vec<_>>>()?;
    paths[0].write_csv(create(&dir.join("frozen.csv"))?)?;
    write_terminals(&dir.join("terminal.csv"), &paths)?;
    Ok(vec!["frozen.csv".into(), "terminal.csv".into()])
}

fn cmd_average(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<String>> {
    let model = cfg.model()?;
    let a = &cfg.average;
    let mut budget = ErgodicBudget::for_model(&model, a.t_avg, a.n_reps);
    budget.step = a.step;
    if let Some(b) = a.t_burn {
        budget.t_burn = b;
    }
    let drift = estimate_fbar(&model, &a.grid, &budget, cfg.seed)?;
    drift.write_csv(create(&dir.join("fbar.csv"))?)?;
    Ok(vec!["fbar.csv".into()])
}

fn cmd_skeleton(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<String>> {
    let model = cfg.model()?;
    let s = &cfg.skeleton;
    let drift = match &s.fbar_file {
        Some(p) => {
            AveragedDrift::read_csv(File::open(p).map_err(|e| Error::config(format!("[skeleton] fbar_file: {e}")))?)?
        }
        None => AveragedDrift::from_model(&model)?,
    };
    let sys = SkeletonSystem::from_model(&model, drift)?;
    let control = match cfg.control(s.t_end, model.dim_slow(), model.dim_fast())? {
        Some(c) => c,
        None => Control::zero(s.t_end, 1, model.dim_slow(), model.dim_fast())?,
    };
    let sol = solve_skeleton(&sys, &control, &s.x0, s.levels)?;
    sol.write_csv(create(&dir.join("skeleton.csv"))?)?;
    write_json(
        &dir.join("skeleton.json"),
        &serde_json::json!({
            "level": sol.level,
            "estimated_error": sol.estimated_error,
            "history": sol.history,
            "terminal": sol.terminal(),
        }),
    )?;
    Ok(vec!["skeleton.csv".into(), "skeleton.json".into()])
}

fn rate_problem(model: &ModelSpec, r: &RateSection, constraint: Constraint, intervals: usize) -> Result<RateProblem> {
    let sys = SkeletonSystem::from_model(model, AveragedDrift::from_model(model)?)?;
    let mut p = RateProblem::new(sys, r.x0.clone(), r.t_end, constraint, intervals);
    p.dim_fast = model.dim_fast();
    Ok(p)
}

fn cmd_rate(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<String>> {
    let model = cfg.model()?;
    let r = &cfg.rate;
    let constraint = match r.constraint {
        ConstraintKind::Point => Constraint::TerminalPoint {
            z: r.z.clone(),
            tol: r.tol,
        },
        ConstraintKind::Halfspace => Constraint::TerminalHalfspace {
            normal: r.normal.clone(),
            offset: r.offset,
            tol: r.tol,
        },
    };
    let result = minimize_rate(&rate_problem(&model, r, constraint, r.intervals)?, r.starts, cfg.seed)?;
    result.minimizer.write_csv(create(&dir.join("control.csv"))?)?;
    write_json(&dir.join("rate.json"), &result.to_json(Some("control.csv")))?;
    Ok(vec!["rate.json".into(), "control.csv".into()])
}

fn cmd_sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<String>> {
    let model = cfg.model()?;
    let sw = &cfg.sweep;
    let base = cfg.sim_config()?;
    let needs_rate = sw.i_ref.is_none() || sw.method == Method::Tilted;
    let rate = if needs_rate {
        let constraint = Constraint::TerminalHalfspace {
            normal: sw.normal.clone(),
            offset: sw.offset,
            tol: cfg.rate.tol,
        };
        let mut r = cfg.rate.clone();
        r.x0 = cfg.sim.x0.clone();
        r.t_end = base.t_end;
        Some(minimize_rate(
            &rate_problem(&model, &r, constraint, sw.intervals)?,
            cfg.rate.starts,
            derive_seed(cfg.seed, 0),
        )?)
    } else {
        None
    };
    let i_ref = match (sw.i_ref, &rate) {
        (Some(v), _) => v,
        (None, Some(r)) => r.value,
        (None, None) => unreachable!("rate is computed whenever i_ref is missing"),
    };
    let mut base = base;
    base.seed = derive_seed(cfg.seed, 1);
    let spec = SweepSpec {
        base,
        x0: cfg.sim.x0.clone(),
        y0: cfg.sim.y0.clone(),
        event: Event::Halfspace {
            normal: sw.normal.clone(),
            offset: sw.offset,
        },
        epsilons: sw.epsilons.clone(),
        delta_rule: DeltaRule::Power {
            factor: sw.delta_factor,
            power: sw.delta_power,
        },
        n_paths: sw.n_paths,
        i_ref,
        method: sw.method,
        tilt: rate
            .as_ref()
            .filter(|_| sw.method == Method::Tilted)
            .map(|r| &r.minimizer),
    };
    let sweep = ldp_sweep(&model, &spec)?;
    sweep.write_csv(create(&dir.join("sweep.csv"))?)?;
    write_json(&dir.join("sweep.json"), &sweep.summary_json())?;
    Ok(vec!["sweep.csv".into(), "sweep.json".into()])
}

fn cmd_flow(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<String>> {
    let model = cfg.model()?;
    let sim = cfg.sim_config()?;
    let f = &cfg.flow;
    need_paths(f.n_paths, "flow")?;
    let grid: Vec<Vec<f64>> = f.x0_grid.iter().map(|&x| vec![x]).collect();
    let control = match cfg.control(sim.t_end, model.dim_slow(), model.dim_fast())? {
        Some(c) => c,
        None => Control::zero(sim.t_end, 1, model.dim_slow(), model.dim_fast())?,
    };
    let field = simulate_flow_controlled(&model, &sim, &grid, &cfg.sim.y0, f.n_paths, &control)?;
    let moments = field.moments(f.p)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("flow.csv"))?);
    w.write_record(["i", "j", "separation", "moment", "se", "n"])?;
    for m in &moments {
        w.write_record([
            m.i.to_string(),
            m.j.to_string(),
            m.separation.to_string(),
            m.estimate.mean.to_string(),
            m.estimate.se.to_string(),
            m.estimate.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(vec!["flow.csv".into()])
}

fn cmd_check(cfg: &ExperimentConfig, dir: &Path) -> Result<(Vec<String>, bool, String)> {
    if !(cfg.check.budget > 0.0) {
        return Err(Error::config("[check] budget must be positive"));
    }
    let results = run_suite(cfg.seed, Budget(cfg.check.budget));
    let mut table = format!(
        "{:>3}  {:<22} {:<6} {:>8}  detail\n",
        "id", "criterion", "result", "seconds"
    );
    for c in &results {
        table += &format!(
            "{:>3}  {:<22} {:<6} {:>8.2}  {}\n",
            c.id,
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.seconds,
            c.detail
        );
    }
    let rows: Vec<serde_json::Value> = results
        .iter()
        .map(|c| serde_json::json!({"id": c.id, "name": c.name, "passed": c.passed, "detail": c.detail}))
        .collect();
    write_json(&dir.join("check.json"), &serde_json::Value::Array(rows))?;
    Ok((vec!["check.json".into()], results.iter().all(|c| c.passed), table))
}

/// Entry point used by the binary; returns the process exit status.
pub fn main_with(cli: Cli) -> i32 {
    match run(&cli) {
        Ok(outcome) => {
            if let Some(table) = &outcome.report {
                print!("{table}");
            }
            println!("{}", outcome.dir.display());
            outcome.exit
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Numeric { history, .. } = &e {
                if !history.is_empty() {
                    eprintln!("history: {history:?}");
                }
            }
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_field_reports_location() {
        let err = ExperimentConfig::from_toml("seed = 1\n[sim]\nepsilon = 0.1\nbogus = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus") && msg.contains("line 4"), "{msg}");
    }

    #[test]
    fn env_overrides_nested_and_top_level_keys() {
        let vars = vec![
            ("SLOWFAST_SIM__EPSILON".to_string(), "0.25".to_string()),
            ("SLOWFAST_SEED".to_string(), "7".to_string()),
            ("SLOWFAST_MODEL__PARAMS__A1".to_string(), "-1".to_string()),
            ("SLOWFAST_MODEL__NAME".to_string(), "NONLIP1D".to_string()),
            ("OTHER".to_string(), "x".to_string()),
        ];
        let c = ExperimentConfig::default().apply_env(vars).unwrap();
        assert_eq!(c.sim.epsilon, 0.25);
        assert_eq!(c.seed, 7);
        assert_eq!(c.model.params["a1"], -1.0);
        assert_eq!(c.model.name, "NONLIP1D");
    }

    #[test]
    fn bad_env_override_is_a_config_error() {
        let vars = vec![("SLOWFAST_SIM__N_STEPS".to_string(), "\"many\"".to_string())];
        let err = ExperimentConfig::default().apply_env(vars).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_CONFIG);
    }

    #[test]
    fn hash_ignores_output_root_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed += 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn invalid_sim_section_is_a_config_error() {
        let mut c = ExperimentConfig::default();
        c.sim.delta = Some(1.0);
        assert_eq!(exit_code(&c.sim_config().unwrap_err()), EXIT_CONFIG);
    }
}
