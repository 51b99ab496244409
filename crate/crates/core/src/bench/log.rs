//! Per-tick telemetry of one run and its CSV form.
//!
//! The file starts with a `# run_status: …` comment, then a header row whose
//! column names carry units. Floats are written in shortest round-trip form,
//! so reading and re-writing a log reproduces it byte for byte.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use nalgebra::{DVector, Vector3};

use super::BenchError;
use crate::inversion::CurrentVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverFlag {
    Converged,
    MaxIterations,
    /// No current met the force; previous currents were held.
    Infeasible,
    /// Currents replayed from a schedule without solving.
    OpenLoop,
}

impl SolverFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolverFlag::Converged => "converged",
            SolverFlag::MaxIterations => "max_iterations",
            SolverFlag::Infeasible => "infeasible",
            SolverFlag::OpenLoop => "open_loop",
        }
    }
}

impl FromStr for SolverFlag {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, BenchError> {
        Ok(match s {
            "converged" => SolverFlag::Converged,
            "max_iterations" => SolverFlag::MaxIterations,
            "infeasible" => SolverFlag::Infeasible,
            "open_loop" => SolverFlag::OpenLoop,
            _ => return Err(BenchError::Parse(format!("unknown solver flag {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub desired_position: Vector3<f64>,
    pub true_position: Vector3<f64>,
    pub estimated_position: Vector3<f64>,
    pub commanded: CurrentVector,
    pub actual: CurrentVector,
    pub desired_force: Vector3<f64>,
    pub realized_force: Vector3<f64>,
    /// Some coil flipped sign with a jump above the switch threshold.
    pub switch_event: bool,
    pub solver: SolverFlag,
    /// No position measurement was available this tick.
    pub dropout: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    Failed(String),
}

impl RunStatus {
    pub fn is_failed(&self) -> bool {
        matches!(self, RunStatus::Failed(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub coil_count: usize,
    pub rows: Vec<LogRow>,
    pub status: RunStatus,
}

impl RunLog {
    pub fn new(coil_count: usize) -> Self {
        Self {
            coil_count,
            rows: Vec::new(),
            status: RunStatus::Completed,
        }
    }

    pub fn header(coil_count: usize) -> String {
        let mut cols: Vec<String> = vec!["t_s".into()];
        for prefix in ["desired", "true", "estimated"] {
            for axis in ["x", "y", "z"] {
                cols.push(format!("{prefix}_{axis}_m"));
            }
        }
        for prefix in ["commanded", "actual"] {
            for i in 1..=coil_count {
                cols.push(format!("{prefix}_I{i}_A"));
            }
        }
        for prefix in ["desired_force", "realized_force"] {
            for axis in ["x", "y", "z"] {
                cols.push(format!("{prefix}_{axis}_N"));
            }
        }
        cols.extend(["switch_event", "solver_status", "dropout"].map(String::from));
        cols.join(",")
    }

    pub fn write(&self, mut w: impl Write) -> Result<(), BenchError> {
        let mut out = String::new();
        match &self.status {
            RunStatus::Completed => out.push_str("# run_status: completed\n"),
            RunStatus::Failed(reason) => {
                let _ = writeln!(out, "# run_status: failed: {}", reason.replace('\n', " "));
            }
        }
        out.push_str(&Self::header(self.coil_count));
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}", r.t);
            for v in [&r.desired_position, &r.true_position, &r.estimated_position] {
                for x in v.iter() {
                    let _ = write!(out, ",{x}");
                }
            }
            for v in [&r.commanded, &r.actual] {
                for x in v.iter() {
                    let _ = write!(out, ",{x}");
                }
            }
            for v in [&r.desired_force, &r.realized_force] {
                for x in v.iter() {
                    let _ = write!(out, ",{x}");
                }
            }
            let _ = writeln!(
                out,
                ",{},{},{}",
                r.switch_event as u8,
                r.solver.as_str(),
                r.dropout as u8
            );
        }
        w.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn read(r: impl Read) -> Result<Self, BenchError> {
        let mut lines = BufReader::new(r).lines();
        let first = lines.next().ok_or_else(|| BenchError::Parse("empty log".into()))??;
        let status = match first.strip_prefix("# run_status: ") {
            Some("completed") => RunStatus::Completed,
            Some(rest) => match rest.strip_prefix("failed: ") {
                Some(reason) => RunStatus::Failed(reason.to_string()),
                None => return Err(BenchError::Parse(format!("bad status line {first:?}"))),
            },
            None => return Err(BenchError::Parse("missing run_status line".into())),
        };
        let header = lines.next().ok_or_else(|| BenchError::Parse("missing header".into()))??;
        let ncols = header.split(',').count();
        // 1 + 9 + 2n + 6 + 3 columns.
        if ncols < 19 || (ncols - 19) % 2 != 0 {
            return Err(BenchError::Parse(format!("unexpected column count {ncols}")));
        }
        let n = (ncols - 19) / 2;
        if header != Self::header(n) {
            return Err(BenchError::Parse("header does not match the log schema".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != ncols {
                return Err(BenchError::Parse(format!("row {}: expected {ncols} fields", i + 1)));
            }
            let num = |k: usize| -> Result<f64, BenchError> {
                fields[k]
                    .parse::<f64>()
                    .map_err(|_| BenchError::Parse(format!("row {}: bad number {:?}", i + 1, fields[k])))
            };
            let vec3 = |k: usize| -> Result<Vector3<f64>, BenchError> { Ok(Vector3::new(num(k)?, num(k + 1)?, num(k + 2)?)) };
            let vecn = |k: usize| -> Result<DVector<f64>, BenchError> {
                (0..n).map(|j| num(k + j)).collect::<Result<Vec<_>, _>>().map(DVector::from_vec)
            };
            let flag = |k: usize| -> Result<bool, BenchError> {
                match fields[k] {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(BenchError::Parse(format!("row {}: bad flag {other:?}", i + 1))),
                }
            };
            let base = 10 + 2 * n;
            rows.push(LogRow {
                t: num(0)?,
                desired_position: vec3(1)?,
                true_position: vec3(4)?,
                estimated_position: vec3(7)?,
                commanded: vecn(10)?,
                actual: vecn(10 + n)?,
                desired_force: vec3(base)?,
                realized_force: vec3(base + 3)?,
                switch_event: flag(base + 6)?,
                solver: fields[base + 7].parse()?,
                dropout: flag(base + 8)?,
            });
        }
        if rows.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(BenchError::Parse("log times must strictly increase".into()));
        }
        Ok(Self {
            coil_count: n,
            rows,
            status,
        })
    }

    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t).collect()
    }

    pub fn commanded(&self) -> Vec<CurrentVector> {
        self.rows.iter().map(|r| r.commanded.clone()).collect()
    }
}
