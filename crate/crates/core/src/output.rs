//! Result files written by the command line tool.
//!
//! Structured results are pretty-printed JSON with matrices stored row-major
//! next to their dimensions. Tables are CSV with a header row. Wall-clock
//! timings only ever appear in files whose name ends in `timings.csv` so that
//! every other file is reproducible from the configuration and seed. The
//! configuration embedded in result files has `out` cleared.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::linalg::{Mat, Vec64};
use crate::model::{ConstraintValues, TubeOcp};
use crate::zoro::{ClosedLoopLog, SolveReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub data: Vec<f64>,
}

impl MatrixData {
    pub fn to_mat(&self) -> Result<Mat> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::DimensionMismatch {
                what: "matrix data".into(),
                expected: self.rows * self.cols,
                got: self.data.len(),
            });
        }
        Ok(Mat::from_row_slice(self.rows, self.cols, &self.data))
    }

    /// Stacks equally sized vectors as rows.
    pub fn from_rows(rows: &[Vec64]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        MatrixData {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }
}

impl From<&Mat> for MatrixData {
    fn from(m: &Mat) -> Self {
        MatrixData {
            rows: m.nrows(),
            cols: m.ncols(),
            data: (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageVectors {
    pub stage: Vec<Vec<f64>>,
    pub terminal: Vec<f64>,
}

impl From<&ConstraintValues> for StageVectors {
    fn from(c: &ConstraintValues) -> Self {
        StageVectors {
            stage: c.stage.iter().map(|v| v.as_slice().to_vec()).collect(),
            terminal: c.terminal.as_slice().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub objective: f64,
    pub backoff_change: f64,
    pub iterate_change: f64,
    pub kkt: f64,
    pub slack_norm: f64,
    pub sqp_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationarityData {
    pub c_hat_norm: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxOuterIters,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveResult {
    pub config: RunConfig,
    pub status: SolveStatus,
    pub outer_iterations: usize,
    pub objective: f64,
    pub kkt: f64,
    pub slack_norm: f64,
    /// `(N + 1) x nx`.
    pub x: MatrixData,
    /// `N x nu`.
    pub u: MatrixData,
    pub tube_p: Vec<MatrixData>,
    pub gains: Vec<MatrixData>,
    pub constraints: StageVectors,
    pub backoffs: StageVectors,
    pub multipliers: StageVectors,
    pub history: Vec<HistoryEntry>,
    pub stationarity: Option<StationarityData>,
}

impl SolveResult {
    pub fn new(config: &RunConfig, ocp: &TubeOcp, report: &SolveReport) -> Self {
        let status = if report.slack_norm > (10.0 * config.algo.nominal.kkt_tol).max(1e-7) {
            SolveStatus::Infeasible
        } else if report.converged {
            SolveStatus::Converged
        } else {
            SolveStatus::MaxOuterIters
        };
        SolveResult {
            config: recorded(config),
            status,
            outer_iterations: report.outer_iterations,
            objective: report.objective,
            kkt: report.kkt,
            slack_norm: report.slack_norm,
            x: MatrixData::from_rows(&report.trajectory.x),
            u: MatrixData::from_rows(&report.trajectory.u),
            tube_p: report.tube.p.iter().map(MatrixData::from).collect(),
            gains: report.tube.k.iter().map(MatrixData::from).collect(),
            constraints: (&ocp.constraint_values(&report.trajectory)).into(),
            backoffs: (&report.backoffs).into(),
            multipliers: (&report.multipliers).into(),
            history: report
                .history
                .iter()
                .map(|h| HistoryEntry {
                    iteration: h.iteration,
                    objective: h.objective,
                    backoff_change: h.backoff_change,
                    iterate_change: h.iterate_change,
                    kkt: h.kkt,
                    slack_norm: h.slack_norm,
                    sqp_iterations: h.sqp_iterations,
                })
                .collect(),
            stationarity: report.stationarity.as_ref().map(|s| StationarityData {
                c_hat_norm: s.c_hat_norm,
                residual: s.residual,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedLoopSummary {
    pub config: RunConfig,
    pub runs: usize,
    pub steps: usize,
    pub violations: usize,
    /// Violated steps over all simulated steps; zero when nothing was simulated.
    pub violation_frequency: f64,
    pub violations_per_run: Vec<usize>,
    pub final_states: MatrixData,
}

impl ClosedLoopSummary {
    pub fn new(config: &RunConfig, logs: &[ClosedLoopLog]) -> Self {
        let violations: usize = logs.iter().map(|l| l.violations).sum();
        let total: usize = logs.iter().map(|l| l.steps.len()).sum();
        let finals: Vec<Vec64> = logs.iter().map(|l| l.final_state.clone()).collect();
        ClosedLoopSummary {
            config: recorded(config),
            runs: logs.len(),
            steps: config.simulation.steps,
            violations,
            violation_frequency: if total == 0 { 0.0 } else { violations as f64 / total as f64 },
            violations_per_run: logs.iter().map(|l| l.violations).collect(),
            final_states: MatrixData::from_rows(&finals),
        }
    }
}

fn recorded(config: &RunConfig) -> RunConfig {
    RunConfig {
        out: String::new(),
        ..config.clone()
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::InvalidParameter(format!("{}: {e}", path.display()))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("result serializes");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)).map_err(|e| io_err(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

/// In-memory CSV table.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
        w.write_record(&self.header).map_err(|e| io_err(path, e))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }
}

pub fn num(v: f64) -> String {
    format!("{v:e}")
}

fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// One row per stage `k = 0..N`: state, control, trace of `P_k`, and the
/// constraint values, backoffs and multipliers of the stage constraints.
/// Control and constraint cells of the terminal row are empty.
pub fn stage_table(ocp: &TubeOcp, report: &SolveReport) -> Table {
    let d = ocp.dims();
    let n = ocp.horizon();
    let nc = (0..n).map(|k| ocp.num_constraints(k)).max().unwrap_or(0);
    let mut header = vec!["k".to_string()];
    header.extend(numbered("x", d.nx));
    header.extend(numbered("u", d.nu));
    header.push("trace_p".into());
    header.extend(numbered("h", nc));
    header.extend(numbered("b", nc));
    header.extend(numbered("mu", nc));
    let h = ocp.constraint_values(&report.trajectory);
    let mut t = Table::new(header);
    for k in 0..=n {
        let mut row = vec![k.to_string()];
        row.extend(report.trajectory.x[k].iter().map(|v| num(*v)));
        let cell = |v: Option<&Vec64>, i: usize| v.and_then(|v| v.get(i)).map_or(String::new(), |x| num(*x));
        let stage = |c: &ConstraintValues| (k < n).then(|| c.stage[k].clone());
        let u = (k < n).then(|| report.trajectory.u[k].clone());
        row.extend((0..d.nu).map(|i| cell(u.as_ref(), i)));
        row.push(report.tube.p.get(k).map_or(String::new(), |p| num(p.trace())));
        for c in [&h, &report.backoffs, &report.multipliers] {
            let v = stage(c);
            row.extend((0..nc).map(|i| cell(v.as_ref(), i)));
        }
        t.push(row);
    }
    t
}

pub fn timing_table(report: &SolveReport) -> Table {
    let mut t = Table::new(["iteration", "sensitivities", "riccati", "lyapunov", "backoff", "nominal"]);
    t.push(vec![
        "0".into(),
        num(0.0),
        num(0.0),
        num(0.0),
        num(0.0),
        num(report.init_time),
    ]);
    for h in &report.history {
        let p = &h.timings;
        t.push(vec![
            h.iteration.to_string(),
            num(p.sensitivities),
            num(p.riccati),
            num(p.lyapunov),
            num(p.backoff),
            num(p.nominal),
        ]);
    }
    t
}

/// Per-step closed-loop log over all runs, without timings.
pub fn closed_loop_table(logs: &[ClosedLoopLog], nx: usize, nu: usize, nw: usize) -> Table {
    let mut header: Vec<String> = vec!["run".into(), "step".into()];
    header.extend(numbered("x", nx));
    header.extend(numbered("u", nu));
    header.extend(numbered("w", nw));
    header.extend(["max_constraint".into(), "violated".into(), "outer_iterations".into()]);
    let mut t = Table::new(header);
    for (r, log) in logs.iter().enumerate() {
        for s in &log.steps {
            let mut row = vec![r.to_string(), s.step.to_string()];
            row.extend(s.x.iter().chain(s.u.iter()).chain(s.w.iter()).map(|v| num(*v)));
            row.push(num(s.max_constraint));
            row.push((s.violated as u8).to_string());
            row.push(s.outer_iterations.to_string());
            t.push(row);
        }
    }
    t
}

/// Per-step phase timings: nominal SQP work against the backoff update.
pub fn closed_loop_timing_table(logs: &[ClosedLoopLog]) -> Table {
    let mut t = Table::new(["run", "step", "sqp", "riccati", "lyapunov", "backoff"]);
    for (r, log) in logs.iter().enumerate() {
        for s in &log.steps {
            let p = &s.timings;
            t.push(vec![
                r.to_string(),
                s.step.to_string(),
                num(p.sqp),
                num(p.riccati),
                num(p.lyapunov),
                num(p.backoff),
            ]);
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_data_is_row_major() {
        let m = Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d = MatrixData::from(&m);
        assert_eq!(d.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(d.to_mat().unwrap(), m);
        let bad = MatrixData {
            rows: 2,
            cols: 2,
            data: vec![1.0],
        };
        assert!(bad.to_mat().is_err());
    }

    #[test]
    fn numbers_round_trip_through_text() {
        for v in [0.1, -0.0, 1e-300, 123456.789, f64::MIN_POSITIVE, 1.0 / 3.0] {
            assert_eq!(num(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
