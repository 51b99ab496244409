//! Experiment files, seeded batches of runs, summaries and comparisons.
//!
//! An experiment directory holds the resolved `config.json`, one log and
//! one summary per trial, `report.json` with the aggregate statistics and
//! `trials.csv` as plot data.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{mean_power, post_settle, rmse, welch_t_test, ErrorSource, WelchResult};
use super::{BenchError, CubeSpec, RunLog, RunStatus, Trajectory, SIGNIFICANCE};
use crate::control::{run_closed_loop, run_open_loop, ControllerConfig, Simulation};
use crate::dynamics::{CameraRig, FluidSpec, NoiseSpec, PlantModel};
use crate::fieldmodel::{DipoleSourceSet, Workspace};
use crate::inversion::{count_switches, SolverOptions, StableSearchOptions, StrategyKind};
use crate::magnetics::{DriveSpec, SampleSpec};

pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
const TRIALS_CSV: &str = "trials.csv";

/// A built-in coil array or a coil-set JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum CoilSetRef {
    FiveCoil,
    FourCoil,
    File(PathBuf),
}

impl From<String> for CoilSetRef {
    fn from(s: String) -> Self {
        match s.as_str() {
            "five-coil" => CoilSetRef::FiveCoil,
            "four-coil" => CoilSetRef::FourCoil,
            _ => CoilSetRef::File(PathBuf::from(s)),
        }
    }
}

impl From<CoilSetRef> for String {
    fn from(c: CoilSetRef) -> Self {
        match c {
            CoilSetRef::FiveCoil => "five-coil".into(),
            CoilSetRef::FourCoil => "four-coil".into(),
            CoilSetRef::File(p) => p.to_string_lossy().into_owned(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyChoice {
    MinDelta,
    MinNorm,
    RefTrack,
    OpenLoop,
}

impl StrategyChoice {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyChoice::MinDelta => "min-delta",
            StrategyChoice::MinNorm => "min-norm",
            StrategyChoice::RefTrack => "ref-track",
            StrategyChoice::OpenLoop => "open-loop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::MinDelta, Self::MinNorm, Self::RefTrack, Self::OpenLoop]
            .into_iter()
            .find(|c| c.name() == s)
    }

    fn needs_schedule(&self) -> bool {
        matches!(self, StrategyChoice::RefTrack | StrategyChoice::OpenLoop)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectorySpec {
    Cube(CubeSpec),
    Waypoints(Trajectory),
    /// JSON waypoint list or `t,x,y,z` CSV.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_coil_set")]
    pub coil_set: CoilSetRef,
    /// Defaults to the built-in array's workspace.
    #[serde(default)]
    pub workspace: Option<Workspace>,
    #[serde(default = "SampleSpec::default_aluminium")]
    pub sample: SampleSpec,
    #[serde(default)]
    pub drive: DriveSpec,
    #[serde(default)]
    pub fluid: FluidSpec,
    /// Camera rig JSON; defaults to three cameras around the workspace.
    #[serde(default)]
    pub cameras: Option<PathBuf>,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub controller: ControllerConfig,
    pub strategy: StrategyChoice,
    /// Defaults to the cube matching the coil array.
    #[serde(default)]
    pub trajectory: Option<TrajectorySpec>,
    pub trials: usize,
    pub seeds: Vec<u64>,
    /// The controller believes the effective weight is this multiple of
    /// the true one.
    #[serde(default = "one")]
    pub model_weight_factor: f64,
    #[serde(default)]
    pub error_source: ErrorSource,
    /// Coil lag override (s).
    #[serde(default)]
    pub coil_time_constant: Option<f64>,
    /// Relative paths resolve against this directory.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn default_coil_set() -> CoilSetRef {
    CoilSetRef::FiveCoil
}

fn one() -> f64 {
    1.0
}

fn config_err(e: impl std::fmt::Display) -> BenchError {
    BenchError::Config(e.to_string())
}

impl ExperimentConfig {
    /// Five-coil defaults with the given strategy and seeds.
    pub fn new(strategy: StrategyChoice, seeds: Vec<u64>) -> Self {
        Self {
            name: String::new(),
            coil_set: CoilSetRef::FiveCoil,
            workspace: None,
            sample: SampleSpec::default_aluminium(),
            drive: DriveSpec::default(),
            fluid: FluidSpec::default(),
            cameras: None,
            noise: NoiseSpec::default(),
            controller: ControllerConfig::default(),
            strategy,
            trajectory: None,
            trials: seeds.len(),
            seeds,
            model_weight_factor: 1.0,
            error_source: ErrorSource::Estimated,
            coil_time_constant: None,
            base_dir: None,
        }
    }

    pub fn from_json_str(text: &str, base_dir: Option<&Path>) -> Result<Self, BenchError> {
        let mut cfg: Self = serde_json::from_str(text).map_err(config_err)?;
        cfg.base_dir = base_dir.map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text, path.parent())
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    /// Label used in reports: the name, or the strategy when unnamed.
    pub fn label(&self) -> String {
        if self.name.is_empty() {
            self.strategy.name().to_string()
        } else {
            self.name.clone()
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Copy with every file reference made absolute-or-base-joined, so it
    /// can be stored elsewhere.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let CoilSetRef::File(p) = &self.coil_set {
            c.coil_set = CoilSetRef::File(self.resolve(p));
        }
        c.cameras = self.cameras.as_deref().map(|p| self.resolve(p));
        if let Some(TrajectorySpec::File(p)) = &self.trajectory {
            c.trajectory = Some(TrajectorySpec::File(self.resolve(p)));
        }
        c.base_dir = None;
        c
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.trials != self.seeds.len() {
            return Err(BenchError::Config(format!(
                "trials ({}) must equal the number of seeds ({})",
                self.trials,
                self.seeds.len()
            )));
        }
        if !(self.model_weight_factor.is_finite() && self.model_weight_factor > 0.0) {
            return Err(BenchError::Config("model weight factor must be positive".into()));
        }
        if self.coil_time_constant.is_some_and(|t| !(t > 0.0)) {
            return Err(BenchError::Config("coil time constant must be positive".into()));
        }
        self.controller.validate()?;
        self.noise.validate().map_err(config_err)?;
        self.sample.validate().map_err(config_err)?;
        Ok(())
    }

    pub fn coil_set(&self) -> Result<DipoleSourceSet, BenchError> {
        match &self.coil_set {
            CoilSetRef::FiveCoil => Ok(DipoleSourceSet::five_coil_default()),
            CoilSetRef::FourCoil => Ok(DipoleSourceSet::four_coil_default()),
            CoilSetRef::File(p) => DipoleSourceSet::load(self.resolve(p)).map_err(config_err),
        }
    }

    pub fn workspace(&self) -> Workspace {
        self.workspace.unwrap_or(match self.coil_set {
            CoilSetRef::FourCoil => Workspace::four_coil_default(),
            _ => Workspace::five_coil_default(),
        })
    }

    pub fn trajectory(&self) -> Result<Trajectory, BenchError> {
        let ws = self.workspace();
        let traj = match &self.trajectory {
            None => match self.coil_set {
                CoilSetRef::FourCoil => CubeSpec::four_coil_default(),
                _ => CubeSpec::five_coil_default(),
            }
            .build(Some(&ws))?,
            Some(TrajectorySpec::Cube(c)) => c.build(Some(&ws))?,
            Some(TrajectorySpec::Waypoints(t)) => t.clone(),
            Some(TrajectorySpec::File(p)) => read_trajectory(self.resolve(p))?,
        };
        traj.check_inside(&ws)?;
        Ok(traj)
    }

    /// Truth plant, controller model (with the weight misestimate) and
    /// cameras.
    pub fn simulation(&self) -> Result<Simulation, BenchError> {
        let set = self.coil_set()?;
        let ws = self.workspace();
        let mut plant =
            PlantModel::new(self.sample.clone(), self.fluid, set, &self.drive, &ws).map_err(config_err)?;
        if let Some(tau) = self.coil_time_constant {
            plant.coil_time_constant = tau;
        }
        let mut model = plant.clone();
        model.sample.effective_weight = self.sample.effective_weight * self.model_weight_factor;
        let rig = match &self.cameras {
            Some(p) => CameraRig::load(self.resolve(p)).map_err(config_err)?,
            None => CameraRig::default_for(&ws, self.noise.pixel_sigma),
        };
        Ok(Simulation {
            plant,
            model,
            rig,
            noise: self.noise,
            controller: self.controller,
            solver: SolverOptions::default(),
            stable_search: StableSearchOptions::default(),
        })
    }
}

/// Per-trial metrics, all over the post-settle window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub seed: u64,
    /// mm, from the configured error source. `None` when no row survived
    /// the settle window.
    pub rmse_mm: Option<f64>,
    /// mm, from the simulated true position.
    pub rmse_true_mm: Option<f64>,
    pub switch_count: usize,
    /// A².
    pub mean_power: Option<f64>,
    pub failed: bool,
    #[serde(default)]
    pub failure: Option<String>,
    /// Log file name inside the experiment directory.
    #[serde(default)]
    pub log_file: Option<String>,
}

/// Metrics of one log; a pure function of the log and the settings.
pub fn summarize(
    log: &RunLog,
    seed: u64,
    settle_time: f64,
    switch_threshold: f64,
    source: ErrorSource,
) -> TrialSummary {
    let window = RunLog {
        coil_count: log.coil_count,
        rows: post_settle(log, settle_time).to_vec(),
        status: log.status.clone(),
    };
    let failure = match &log.status {
        RunStatus::Completed => None,
        RunStatus::Failed(reason) => Some(reason.clone()),
    };
    TrialSummary {
        seed,
        rmse_mm: rmse(log, settle_time, source).ok(),
        rmse_true_mm: rmse(log, settle_time, ErrorSource::True).ok(),
        switch_count: count_switches(&window.times(), &window.commanded(), switch_threshold),
        mean_power: mean_power(&window).ok(),
        failed: failure.is_some(),
        failure,
        log_file: None,
    }
}

/// Count, mean and sample standard deviation over successful trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub n: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl MetricStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = (n > 0).then(|| values.iter().sum::<f64>() / n as f64);
        let std = match mean {
            Some(m) if n > 1 => Some((values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()),
            _ => None,
        };
        Self { n, mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub strategy: StrategyChoice,
    pub settle_time: f64,
    pub switch_threshold: f64,
    pub error_source: ErrorSource,
    pub trials: Vec<TrialSummary>,
    pub failed_trials: usize,
    pub rmse_mm: MetricStats,
    pub rmse_true_mm: MetricStats,
    pub switch_count: MetricStats,
    pub mean_power: MetricStats,
}

impl ExperimentReport {
    fn assemble(cfg: &ExperimentConfig, trials: Vec<TrialSummary>) -> Self {
        let ok: Vec<&TrialSummary> = trials.iter().filter(|t| !t.failed).collect();
        let pick = |f: &dyn Fn(&TrialSummary) -> Option<f64>| ok.iter().filter_map(|t| f(t)).collect::<Vec<f64>>();
        Self {
            name: cfg.label(),
            strategy: cfg.strategy,
            settle_time: cfg.controller.settle_time,
            switch_threshold: cfg.controller.switch_threshold,
            error_source: cfg.error_source,
            failed_trials: trials.len() - ok.len(),
            rmse_mm: MetricStats::of(&pick(&|t| t.rmse_mm)),
            rmse_true_mm: MetricStats::of(&pick(&|t| t.rmse_true_mm)),
            switch_count: MetricStats::of(&pick(&|t| Some(t.switch_count as f64))),
            mean_power: MetricStats::of(&pick(&|t| t.mean_power)),
            trials,
        }
    }

    /// Per-trial values of successful trials.
    pub fn rmse_values(&self) -> Vec<f64> {
        self.trials.iter().filter(|t| !t.failed).filter_map(|t| t.rmse_mm).collect()
    }

    pub fn power_values(&self) -> Vec<f64> {
        self.trials.iter().filter(|t| !t.failed).filter_map(|t| t.mean_power).collect()
    }
}

fn log_name(i: usize, seed: u64) -> String {
    format!("trial_{i:03}_seed_{seed}.csv")
}

fn summary_name(i: usize) -> String {
    format!("trial_{i:03}_summary.json")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), BenchError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| BenchError::Parse(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Runs every seed of `config` (in parallel) and, if `out_dir` is given,
/// persists logs, summaries, the report and plot data there. A trial that
/// fails is recorded as failed and the others still run. Errors are
/// returned only for invalid configurations and for reference schedules
/// that cannot be built.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentReport, BenchError> {
    config.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join(CONFIG_FILE), &config.resolved())?;
    }
    if config.trials == 0 {
        let report = ExperimentReport::assemble(config, Vec::new());
        if let Some(dir) = out_dir {
            write_json(&dir.join(REPORT_FILE), &report)?;
            write_trials_csv(&dir.join(TRIALS_CSV), &report)?;
        }
        return Ok(report);
    }

    let sim = config.simulation()?;
    let trajectory = config.trajectory()?;
    let schedule = if config.strategy.needs_schedule() {
        Some(sim.openloop_schedule(&trajectory)?)
    } else {
        None
    };
    let strategy = match config.strategy {
        StrategyChoice::MinDelta => Some(StrategyKind::MinDelta),
        StrategyChoice::MinNorm => Some(StrategyKind::MinNorm),
        StrategyChoice::RefTrack => Some(StrategyKind::RefTrack(schedule.clone().unwrap_or_default())),
        StrategyChoice::OpenLoop => None,
    };

    let settle = config.controller.settle_time;
    let threshold = config.controller.switch_threshold;
    let trials: Vec<Result<TrialSummary, BenchError>> = config
        .seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let result = match (&strategy, &schedule) {
                (Some(s), _) => run_closed_loop(&sim, s, &trajectory, seed),
                (None, Some(sched)) => run_open_loop(&sim, &trajectory, sched, seed),
                (None, None) => unreachable!("open loop always has a schedule"),
            };
            let summary = match result {
                Ok(log) => {
                    let mut s = summarize(&log, seed, settle, threshold, config.error_source);
                    if let Some(dir) = out_dir {
                        let name = log_name(i, seed);
                        log.write(BufWriter::new(File::create(dir.join(&name))?))?;
                        s.log_file = Some(name);
                    }
                    s
                }
                Err(e) => {
                    log::warn!("trial {i} (seed {seed}) did not start: {e}");
                    TrialSummary {
                        seed,
                        rmse_mm: None,
                        rmse_true_mm: None,
                        switch_count: 0,
                        mean_power: None,
                        failed: true,
                        failure: Some(e.to_string()),
                        log_file: None,
                    }
                }
            };
            if summary.failed {
                log::warn!(
                    "trial {i} (seed {seed}) failed: {}",
                    summary.failure.as_deref().unwrap_or("unknown")
                );
            }
            if let Some(dir) = out_dir {
                write_json(&dir.join(summary_name(i)), &summary)?;
            }
            Ok(summary)
        })
        .collect();
    let trials = trials.into_iter().collect::<Result<Vec<_>, _>>()?;

    let report = ExperimentReport::assemble(config, trials);
    if let Some(dir) = out_dir {
        write_json(&dir.join(REPORT_FILE), &report)?;
        write_trials_csv(&dir.join(TRIALS_CSV), &report)?;
    }
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn write_trials_csv(path: &Path, report: &ExperimentReport) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| BenchError::Parse(e.to_string()))?;
    let csv_err = |e: csv::Error| BenchError::Parse(e.to_string());
    w.write_record(["strategy", "seed", "rmse_mm", "rmse_true_mm", "switch_count", "mean_power_A2", "failed"])
        .map_err(csv_err)?;
    for t in &report.trials {
        w.write_record([
            report.strategy.name().to_string(),
            t.seed.to_string(),
            opt(t.rmse_mm),
            opt(t.rmse_true_mm),
            t.switch_count.to_string(),
            opt(t.mean_power),
            (t.failed as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_report(dir: impl AsRef<Path>) -> Result<ExperimentReport, BenchError> {
    let text = std::fs::read_to_string(dir.as_ref().join(REPORT_FILE))?;
    serde_json::from_str(&text).map_err(|e| BenchError::Parse(e.to_string()))
}

/// Stored report and the summaries recomputed from the persisted logs.
pub fn recompute_summaries(dir: impl AsRef<Path>) -> Result<(ExperimentReport, Vec<TrialSummary>), BenchError> {
    let dir = dir.as_ref();
    let report = load_report(dir)?;
    let mut out = Vec::with_capacity(report.trials.len());
    for stored in &report.trials {
        match &stored.log_file {
            Some(name) => {
                let log = RunLog::read(File::open(dir.join(name))?)?;
                let mut s = summarize(
                    &log,
                    stored.seed,
                    report.settle_time,
                    report.switch_threshold,
                    report.error_source,
                );
                s.log_file = Some(name.clone());
                out.push(s);
            }
            None => out.push(stored.clone()),
        }
    }
    Ok((report, out))
}

/// Welch comparison of two experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub rmse: WelchResult,
    pub power: WelchResult,
    pub rmse_significant: bool,
    pub power_significant: bool,
}

/// Pairwise Welch tests on RMSE and mean power between all reports.
pub fn compare(reports: &[ExperimentReport]) -> Result<Vec<Comparison>, BenchError> {
    if reports.len() < 2 {
        return Err(BenchError::InsufficientSamples(format!(
            "comparison needs at least two reports, got {}",
            reports.len()
        )));
    }
    for r in reports {
        let n = r.rmse_values().len().min(r.power_values().len());
        if n < 2 {
            return Err(BenchError::InsufficientSamples(format!(
                "report {:?} has {n} usable trials, need at least 2",
                r.name
            )));
        }
    }
    let mut out = Vec::new();
    for i in 0..reports.len() {
        for j in i + 1..reports.len() {
            let (a, b) = (&reports[i], &reports[j]);
            let rmse = welch_t_test(&a.rmse_values(), &b.rmse_values())?;
            let power = welch_t_test(&a.power_values(), &b.power_values())?;
            out.push(Comparison {
                a: a.name.clone(),
                b: b.name.clone(),
                rmse_significant: rmse.p < SIGNIFICANCE,
                power_significant: power.p < SIGNIFICANCE,
                rmse,
                power,
            });
        }
    }
    Ok(out)
}

/// Reads waypoints from JSON (`[[t, [x, y, z]], …]`) or from `t,x,y,z` CSV
/// with an optional header.
pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Trajectory, BenchError> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    if path.extension().is_some_and(|e| e == "json") {
        return serde_json::from_str(&text).map_err(|e| BenchError::Parse(e.to_string()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut waypoints = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| BenchError::Parse(e.to_string()))?;
        if row == 0 && rec.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        let v = rec
            .iter()
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| BenchError::Parse(format!("row {}: {e}", row + 1)))?;
        if v.len() != 4 {
            return Err(BenchError::Parse(format!("row {}: expected t,x,y,z", row + 1)));
        }
        waypoints.push((v[0], Vector3::new(v[1], v[2], v[3])));
    }
    Trajectory::new(waypoints)
}

/// Writes waypoints as JSON or CSV, chosen by extension like
/// [`read_trajectory`].
pub fn write_trajectory(path: impl AsRef<Path>, trajectory: &Trajectory) -> Result<(), BenchError> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "json") {
        return write_json(path, trajectory);
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t_s,x_m,y_m,z_m")?;
    for (t, p) in trajectory.waypoints() {
        writeln!(w, "{t},{},{},{}", p.x, p.y, p.z)?;
    }
    w.flush()?;
    Ok(())
}
