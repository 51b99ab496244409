//! `indmanip`: calibration, stable-point search, reference generation,
//! experiment runs and their analysis.
//!
//! Exit codes: 0 success, 2 configuration error, 3 infeasible force or no
//! stable solution, 4 runtime failure (partial logs are kept).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::{Vector2, Vector3};

use inductive_manip::bench::{
    compare, cube_trajectory, load_report, read_trajectory, recompute_summaries, run_experiment, write_trajectory,
    BenchError, CoilSetRef, CubeSpec, ExperimentConfig, ExperimentReport, MetricStats, StrategyChoice, TrialSummary,
};
use inductive_manip::control::ControlError;
use inductive_manip::fieldmodel::{
    calibrate, read_field_samples, CalibrationOptions, DipoleSourceSet, FieldError, Workspace,
};
use inductive_manip::inversion::{
    find_stable_currents, openloop_trajectory, write_reference_currents, InversionError, StableSearchOptions,
};
use inductive_manip::magnetics::{dipole_gain, DriveSpec, SampleSpec};

const EXIT_CONFIG: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(name = "indmanip", version, about = "Induced-dipole manipulation: simulation, control and experiments")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a dipole model to field measurements.
    Calibrate {
        /// Field samples: x,y,z,coil_index,current,Bx,By,Bz.
        samples: PathBuf,
        /// Initial coil set (JSON).
        init: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 200)]
        max_iterations: usize,
    },
    /// List stable current solutions that hold the sample at a point.
    StablePoints {
        /// Coil-set JSON, or `five-coil` / `four-coil`.
        coilset: String,
        /// Position x,y,z (m).
        #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
        at: Vector3<f64>,
        /// Effective weight to support (N, acting downward).
        #[arg(long, default_value_t = 56e-6)]
        weight: f64,
        #[arg(long, default_value_t = 64)]
        starts: usize,
        /// Also write the table to this CSV file.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        sample: SampleArgs,
    },
    /// Open-loop reference currents along a trajectory.
    GenRef {
        /// Coil-set JSON, or `five-coil` / `four-coil`.
        coilset: String,
        /// Waypoints as JSON or t,x,y,z CSV.
        trajectory: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Control rate (Hz).
        #[arg(long, default_value_t = 50.0)]
        rate: f64,
        #[arg(long, default_value_t = 56e-6)]
        weight: f64,
        #[command(flatten)]
        sample: SampleArgs,
    },
    /// Run an experiment and write logs, summaries and a report.
    Run {
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Override the configured strategy.
        #[arg(long, value_parser = ["min-delta", "min-norm", "ref-track", "open-loop"])]
        strategy: Option<String>,
    },
    /// Recompute and print the summaries of an experiment directory.
    Analyze { dir: PathBuf },
    /// Pairwise Welch tests between experiment directories.
    Compare {
        #[arg(num_args = 2.., required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the comparison table to this CSV file.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Write the two-square cube trajectory.
    CubePath {
        #[arg(short, long)]
        output: PathBuf,
        /// Use the four-coil heights.
        #[arg(long)]
        four_coil: bool,
        #[arg(long)]
        z_lo: Option<f64>,
        #[arg(long)]
        z_hi: Option<f64>,
        #[arg(long)]
        side: Option<f64>,
        /// Motion time after settling (s).
        #[arg(long)]
        total_time: Option<f64>,
        /// Hold time at the cube centre (s).
        #[arg(long)]
        settle_time: Option<f64>,
    },
}

#[derive(Args)]
struct SampleArgs {
    /// Sphere radius (m).
    #[arg(long, default_value_t = 0.0125)]
    radius: f64,
    /// Electrical conductivity (S/m).
    #[arg(long, default_value_t = 3.5e7)]
    conductivity: f64,
    /// Drive frequency (Hz); defaults to the standard drive.
    #[arg(long)]
    frequency: Option<f64>,
}

impl SampleArgs {
    fn alpha(&self) -> Result<f64> {
        let mut sample = SampleSpec::default_aluminium();
        sample.radius = self.radius;
        sample.conductivity = self.conductivity;
        let drive = self.frequency.map_or_else(DriveSpec::default, DriveSpec::from_frequency_hz);
        Ok(dipole_gain(&sample, &drive).map_err(|e| BenchError::Config(e.to_string()))?.alpha)
    }
}

fn parse_vec3(s: &str) -> Result<Vector3<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [x, y, z] => Ok(Vector3::new(*x, *y, *z)),
        _ => Err(format!("expected x,y,z, got {s:?}")),
    }
}

fn load_coil_set(name: &str) -> Result<DipoleSourceSet> {
    match CoilSetRef::from(name.to_string()) {
        CoilSetRef::FiveCoil => Ok(DipoleSourceSet::five_coil_default()),
        CoilSetRef::FourCoil => Ok(DipoleSourceSet::four_coil_default()),
        CoilSetRef::File(p) => {
            DipoleSourceSet::load(&p).with_context(|| format!("loading coil set {}", p.display()))
        }
    }
}

fn support(weight: f64) -> Vector3<f64> {
    Vector3::new(0.0, 0.0, weight)
}

fn cmd_calibrate(samples: &Path, init: &Path, output: &Path, max_iterations: usize) -> Result<()> {
    let file = File::open(samples).with_context(|| format!("opening {}", samples.display()))?;
    let samples = read_field_samples(BufReader::new(file))?;
    let init = DipoleSourceSet::load(init).with_context(|| format!("loading {}", init.display()))?;
    let options = CalibrationOptions {
        max_iterations,
        ..CalibrationOptions::default()
    };
    let res = calibrate(&samples, &init, &options)?;
    res.set.save(output)?;
    println!(
        "R^2 = {:.6}, SSR = {:.6e} T^2, {} iterations{}{}",
        res.r_squared,
        res.sum_squared_residuals,
        res.iterations,
        if res.converged { "" } else { ", not converged" },
        if res.rank_deficient { ", rank deficient" } else { "" }
    );
    println!("wrote {}", output.display());
    Ok(())
}

fn cmd_stable_points(
    coilset: &str,
    at: &Vector3<f64>,
    weight: f64,
    starts: usize,
    output: Option<&Path>,
    sample: &SampleArgs,
) -> Result<()> {
    let set = load_coil_set(coilset)?;
    let opts = StableSearchOptions {
        n_starts: starts,
        ..StableSearchOptions::default()
    };
    let sols = find_stable_currents(&set, at, &support(weight), sample.alpha()?, &opts)?;
    if sols.is_empty() {
        return Err(InversionError::NoStableSolution { index: 0, position: *at }.into());
    }
    let mut table = String::from("rank,margin_N_per_m");
    for i in 1..=set.coil_count() {
        table.push_str(&format!(",I{i}_A"));
    }
    table.push('\n');
    for (k, s) in sols.iter().enumerate() {
        table.push_str(&format!("{},{}", k + 1, s.stability_margin()));
        for c in s.currents.iter() {
            table.push_str(&format!(",{c}"));
        }
        table.push('\n');
    }
    print!("{table}");
    if let Some(path) = output {
        std::fs::write(path, &table)?;
    }
    Ok(())
}

fn cmd_gen_ref(coilset: &str, trajectory: &Path, output: &Path, rate: f64, weight: f64, sample: &SampleArgs) -> Result<()> {
    if !(rate > 0.0) {
        bail!(BenchError::Config("rate must be positive".into()));
    }
    let set = load_coil_set(coilset)?;
    let traj = read_trajectory(trajectory).with_context(|| format!("reading {}", trajectory.display()))?;
    let path = traj.on_grid(rate);
    let currents = openloop_trajectory(&set, &path, &support(weight), sample.alpha()?, &StableSearchOptions::default())?;
    let times: Vec<f64> = path.iter().map(|(t, _)| *t).collect();
    write_reference_currents(BufWriter::new(File::create(output)?), &times, &currents)?;
    println!("wrote {} reference points to {}", times.len(), output.display());
    Ok(())
}

fn fmt_stat(s: &MetricStats) -> String {
    match (s.mean, s.std) {
        (Some(m), Some(sd)) => format!("{m:.4} ± {sd:.4}"),
        (Some(m), None) => format!("{m:.4}"),
        _ => "n/a".into(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn print_trials(trials: &[TrialSummary]) {
    println!("{:>8} {:>12} {:>14} {:>9} {:>14}  status", "seed", "rmse_mm", "rmse_true_mm", "switches", "power_A2");
    for t in trials {
        println!(
            "{:>8} {:>12} {:>14} {:>9} {:>14}  {}",
            t.seed,
            fmt_opt(t.rmse_mm),
            fmt_opt(t.rmse_true_mm),
            t.switch_count,
            t.mean_power.map_or_else(|| "n/a".into(), |p| format!("{p:.1}")),
            match &t.failure {
                Some(reason) => format!("failed: {reason}"),
                None => "ok".into(),
            }
        );
    }
}

fn print_report(r: &ExperimentReport) {
    println!("experiment {} ({})", r.name, r.strategy.name());
    print_trials(&r.trials);
    println!(
        "mean ± sd over {} successful trials: rmse {} mm, true rmse {} mm, switches {}, power {} A^2",
        r.rmse_mm.n,
        fmt_stat(&r.rmse_mm),
        fmt_stat(&r.rmse_true_mm),
        fmt_stat(&r.switch_count),
        fmt_stat(&r.mean_power)
    );
}

fn cmd_run(config: &Path, output: &Path, strategy: Option<&str>) -> Result<u8> {
    let mut cfg = ExperimentConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(s) = strategy {
        let choice = StrategyChoice::parse(s).ok_or_else(|| BenchError::Config(format!("unknown strategy {s}")))?;
        if choice != cfg.strategy && !cfg.name.is_empty() {
            cfg.name = format!("{}-{}", cfg.name, choice.name());
        }
        cfg.strategy = choice;
    }
    let report = run_experiment(&cfg, Some(output))?;
    print_report(&report);
    println!("wrote {}", output.display());
    if report.failed_trials > 0 {
        eprintln!("{} of {} trials failed; partial logs kept", report.failed_trials, report.trials.len());
        return Ok(EXIT_RUNTIME);
    }
    Ok(0)
}

fn cmd_analyze(dir: &Path) -> Result<u8> {
    let (stored, recomputed) = recompute_summaries(dir).with_context(|| format!("reading {}", dir.display()))?;
    let mut shown = stored.clone();
    shown.trials = recomputed.clone();
    print_report(&shown);
    let mismatched: Vec<u64> = stored
        .trials
        .iter()
        .zip(&recomputed)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.seed)
        .collect();
    if !mismatched.is_empty() {
        eprintln!("stored summaries differ from the logs for seeds {mismatched:?}");
        return Ok(EXIT_RUNTIME);
    }
    println!("stored summaries match the logs");
    Ok(0)
}

fn cmd_compare(dirs: &[PathBuf], output: Option<&Path>) -> Result<()> {
    let reports = dirs
        .iter()
        .map(|d| load_report(d).with_context(|| format!("reading {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    for r in &reports {
        println!(
            "{:<20} rmse {} mm, power {} A^2 (n = {})",
            r.name,
            fmt_stat(&r.rmse_mm),
            fmt_stat(&r.mean_power),
            r.rmse_mm.n
        );
    }
    let rows = compare(&reports)?;
    let mut table = String::from("a,b,rmse_t,rmse_dof,rmse_p,rmse_significant,power_t,power_dof,power_p,power_significant\n");
    for c in &rows {
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            c.a,
            c.b,
            c.rmse.t,
            c.rmse.dof,
            c.rmse.p,
            c.rmse_significant as u8,
            c.power.t,
            c.power.dof,
            c.power.p,
            c.power_significant as u8
        ));
        println!(
            "{} vs {}: rmse p = {:.4}{}, power p = {:.4}{}",
            c.a,
            c.b,
            c.rmse.p,
            if c.rmse_significant { " *" } else { "" },
            c.power.p,
            if c.power_significant { " *" } else { "" }
        );
    }
    if let Some(path) = output {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(table.as_bytes())?;
        w.flush()?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_cube_path(
    output: &Path,
    four_coil: bool,
    z_lo: Option<f64>,
    z_hi: Option<f64>,
    side: Option<f64>,
    total_time: Option<f64>,
    settle_time: Option<f64>,
) -> Result<()> {
    let (base, ws) = if four_coil {
        (CubeSpec::four_coil_default(), Workspace::four_coil_default())
    } else {
        (CubeSpec::five_coil_default(), Workspace::five_coil_default())
    };
    let traj = cube_trajectory(
        z_lo.unwrap_or(base.z_lo),
        z_hi.unwrap_or(base.z_hi),
        side.unwrap_or(base.side),
        Vector2::new(base.center_xy.x, base.center_xy.y),
        total_time.unwrap_or(base.total_time),
        settle_time.unwrap_or(base.settle_time),
        Some(&ws),
    )?;
    write_trajectory(output, &traj)?;
    println!("wrote {} waypoints to {}", traj.waypoints().len(), output.display());
    Ok(())
}

fn inversion_code(e: &InversionError) -> u8 {
    match e {
        InversionError::Infeasible { .. } | InversionError::NoStableSolution { .. } => EXIT_INFEASIBLE,
        _ => EXIT_CONFIG,
    }
}

/// Maps an error to the documented exit code.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<BenchError>() {
            return match e {
                BenchError::Inversion(e) => inversion_code(e),
                BenchError::Control(ControlError::Inversion(e)) => inversion_code(e),
                BenchError::Control(ControlError::Dynamics(_)) | BenchError::Control(ControlError::SingularInnovation) => {
                    EXIT_RUNTIME
                }
                _ => EXIT_CONFIG,
            };
        }
        if let Some(e) = cause.downcast_ref::<InversionError>() {
            return inversion_code(e);
        }
        if cause.downcast_ref::<FieldError>().is_some() || cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_CONFIG;
        }
    }
    EXIT_RUNTIME
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result: Result<u8> = match &cli.command {
        Command::Calibrate {
            samples,
            init,
            output,
            max_iterations,
        } => cmd_calibrate(samples, init, output, *max_iterations).map(|_| 0),
        Command::StablePoints {
            coilset,
            at,
            weight,
            starts,
            output,
            sample,
        } => cmd_stable_points(coilset, at, *weight, *starts, output.as_deref(), sample).map(|_| 0),
        Command::GenRef {
            coilset,
            trajectory,
            output,
            rate,
            weight,
            sample,
        } => cmd_gen_ref(coilset, trajectory, output, *rate, *weight, sample).map(|_| 0),
        Command::Run {
            config,
            output,
            strategy,
        } => cmd_run(config, output, strategy.as_deref()),
        Command::Analyze { dir } => cmd_analyze(dir),
        Command::Compare { dirs, output } => cmd_compare(dirs, output.as_deref()).map(|_| 0),
        Command::CubePath {
            output,
            four_coil,
            z_lo,
            z_hi,
            side,
            total_time,
            settle_time,
        } => cmd_cube_path(output, *four_coil, *z_lo, *z_hi, *side, *total_time, *settle_time).map(|_| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
