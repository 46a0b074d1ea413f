//! Commands behind the `rzoro` binary: single solves, closed-loop
//! simulations and the mass-chain scaling study.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, RunConfig};
use crate::error::{Error, Result};
use crate::linalg::Vec64;
use crate::model::{ConstraintValues, TubeOcp};
use crate::nominal::{initial_guess, sqp_iterate, SqpState};
use crate::oracle::{time_oracle_iterations, MAX_ORACLE_HORIZON, MAX_ORACLE_NX};
use crate::output::{self, ClosedLoopSummary, SolveResult, SolveStatus, Table};
use crate::problems::{build_problem, list_problems, ProblemParams};
use crate::zoro::{
    self, monte_carlo, zero_gains, AlgoOptions, ClosedLoopLog, ClosedLoopOptions, InnerMode, NoiseSampler,
    SolveReport,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;

fn ensure_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::InvalidParameter(format!("{}: {e}", out.display())))
}

/// Runs one solve and returns the problem, the report and its status.
pub fn solve_config(cfg: &RunConfig) -> Result<(TubeOcp, SolveReport, SolveStatus)> {
    let ocp = cfg.build_problem()?;
    let opts = cfg.algo.options(&ocp)?;
    let report = zoro::run(&ocp, &opts)?;
    let status = SolveResult::new(cfg, &ocp, &report).status;
    Ok((ocp, report, status))
}

/// Writes `result.json`, `stages.csv` and `timings.csv` to `out`.
pub fn cmd_solve(cfg: &RunConfig, out: &Path) -> Result<SolveStatus> {
    let (ocp, report, status) = solve_config(cfg)?;
    ensure_dir(out)?;
    let result = SolveResult::new(cfg, &ocp, &report);
    output::write_json(&out.join("result.json"), &result)?;
    output::stage_table(&ocp, &report).write(&out.join("stages.csv"))?;
    output::timing_table(&report).write(&out.join("timings.csv"))?;

    let t = report.timings();
    println!("problem           {}", cfg.problem.name);
    println!("algorithm         {}", cfg.algo.kind.name());
    println!("status            {:?}", status);
    println!("outer iterations  {}", report.outer_iterations);
    println!("objective         {:.10e}", report.objective);
    println!("kkt               {:.3e}", report.kkt);
    println!("max backoff       {:.6e}", report.backoffs.inf_norm());
    if let Some(s) = &report.stationarity {
        println!("stationarity      {:.3e} (|c_hat| = {:.3e})", s.residual, s.c_hat_norm);
    }
    println!(
        "time [s]          nominal {:.3e}, backoff update {:.3e}, initial solve {:.3e}",
        t.nominal + t.sensitivities,
        t.backoff_update(),
        report.init_time
    );
    println!("wrote             {}", out.display());
    Ok(status)
}

/// Monte-Carlo closed-loop simulation of `cfg.simulation.runs` runs.
pub fn closed_loop_config(cfg: &RunConfig) -> Result<Vec<ClosedLoopLog>> {
    let sim = &cfg.simulation;
    let reference = build_problem(&cfg.problem)?;
    let noise = NoiseSampler::for_ocp(sim.noise, &reference)?;
    let controller_ocp = cfg.build_problem()?;
    let mut controller = cfg.algo.options(&controller_ocp)?;
    controller.compute_stationarity = false;
    let mut params: ProblemParams = cfg.problem.clone();
    if cfg.algo.kind == Algorithm::Nominal {
        params.sigma = 0.0;
    }
    let model = reference.model_arc();
    let template = |t: usize, x: &Vec64| {
        let mut p = params.clone();
        p.time_offset = t;
        if !x.is_empty() {
            p.initial_state = Some(x.as_slice().to_vec());
        }
        build_problem(&p)
    };
    let plant = |_t: usize, x: &Vec64, u: &Vec64, w: &Vec64| model.dynamics(0, x, u, w);
    let cl = ClosedLoopOptions {
        steps: sim.steps,
        seed: cfg.seed,
        rti_sqp_iters: (sim.rti_sqp_iters > 0).then_some(sim.rti_sqp_iters),
    };
    monte_carlo(template, &controller, plant, &noise, &cl, sim.runs)
}

/// Writes `closed_loop.json`, `closed_loop.csv` and `closed_loop_timings.csv`.
pub fn cmd_closed_loop(cfg: &RunConfig, out: &Path) -> Result<ClosedLoopSummary> {
    let logs = closed_loop_config(cfg)?;
    let d = build_problem(&cfg.problem)?.dims();
    ensure_dir(out)?;
    let summary = ClosedLoopSummary::new(cfg, &logs);
    output::write_json(&out.join("closed_loop.json"), &summary)?;
    output::closed_loop_table(&logs, d.nx, d.nu, d.nw).write(&out.join("closed_loop.csv"))?;
    output::closed_loop_timing_table(&logs).write(&out.join("closed_loop_timings.csv"))?;
    println!("problem           {}", cfg.problem.name);
    println!("algorithm         {}", cfg.algo.kind.name());
    println!("runs x steps      {} x {}", summary.runs, summary.steps);
    println!(
        "violations        {} ({:.4}%)",
        summary.violations,
        100.0 * summary.violation_frequency
    );
    println!("wrote             {}", out.display());
    Ok(summary)
}

pub const SCALING_COLUMNS: [&str; 5] = [
    "nominal",
    "zoro",
    "riccati_zoro_constant",
    "riccati_zoro_adaptive",
    "oracle",
];

/// Median per-iteration wall time of each algorithm at one chain size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub masses: usize,
    pub nx: usize,
    /// Seconds, ordered as [`SCALING_COLUMNS`]; `None` where not run.
    pub times: [Option<f64>; 5],
    /// Median backoff-update time of adaptive Riccati-ZORO.
    pub backoff_update: f64,
    /// Median nominal SQP step time (linearization included) of adaptive Riccati-ZORO.
    pub sqp_step: f64,
}

pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Least-squares slope of `ln y` against `ln x`; `None` below two points.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = points.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

fn nominal_iteration_times(ocp: &TubeOcp, cfg: &RunConfig, iters: usize) -> Result<Vec<f64>> {
    let zero = ConstraintValues::zeros(ocp);
    let mut st = SqpState::cold(ocp, initial_guess(ocp))?;
    let mut weight = 1.0;
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        let step = sqp_iterate(ocp, &zero, &st, &mut weight, &cfg.algo.nominal)?;
        times.push(t.elapsed().as_secs_f64());
        st = step.state;
    }
    Ok(times)
}

fn outer_iteration_times(ocp: &TubeOcp, opts: &AlgoOptions, iters: usize) -> Result<SolveReport> {
    let opts = AlgoOptions {
        inner_mode: InnerMode::SingleSqpStep,
        max_outer_iters: iters,
        backoff_tol: f64::MIN_POSITIVE,
        compute_stationarity: false,
        ..opts.clone()
    };
    zoro::run(ocp, &opts)
}

/// Per-iteration timings on `mass_chain(M)` for every `M` in `cfg.scaling.masses`.
/// Every algorithm runs real-time-iteration style: one SQP step per iteration.
pub fn scaling_study(cfg: &RunConfig) -> Result<Vec<ScalingRow>> {
    let sc = &cfg.scaling;
    if sc.iterations == 0 || sc.horizon == 0 {
        return Err(Error::InvalidParameter("scaling needs iterations > 0 and horizon > 0".into()));
    }
    let mut rows = Vec::with_capacity(sc.masses.len());
    for &m in &sc.masses {
        let params = ProblemParams {
            name: format!("mass_chain({m})"),
            horizon: Some(sc.horizon),
            ..cfg.problem.clone()
        };
        let ocp = build_problem(&params)?;
        let nx = ocp.dims().nx;
        let mut times = [None; 5];
        times[0] = Some(median(&mut nominal_iteration_times(&ocp, cfg, sc.iterations)?));

        let mut base = cfg.algo.clone();
        let mut per_iter = |kind: Algorithm| -> Result<SolveReport> {
            base.kind = kind;
            outer_iteration_times(&ocp, &base.options(&ocp)?, sc.iterations)
        };
        let zoro_report = per_iter(Algorithm::Zoro)?;
        let constant = per_iter(Algorithm::RiccatiZoroConstant)?;
        let adaptive = per_iter(Algorithm::RiccatiZoroAdaptive)?;
        let total = |r: &SolveReport| median(&mut r.history.iter().map(|h| h.timings.total()).collect::<Vec<_>>());
        times[1] = Some(total(&zoro_report));
        times[2] = Some(total(&constant));
        times[3] = Some(total(&adaptive));
        if nx <= MAX_ORACLE_NX && sc.horizon <= MAX_ORACLE_HORIZON {
            times[4] = Some(median(&mut time_oracle_iterations(&ocp, &zero_gains(&ocp), sc.iterations)?));
        }
        let backoff_update = median(&mut adaptive.history.iter().map(|h| h.timings.backoff_update()).collect::<Vec<_>>());
        let sqp_step = median(
            &mut adaptive
                .history
                .iter()
                .map(|h| h.timings.nominal + h.timings.sensitivities)
                .collect::<Vec<_>>(),
        );
        rows.push(ScalingRow {
            masses: m,
            nx,
            times,
            backoff_update,
            sqp_step,
        });
    }
    Ok(rows)
}

/// Log-log slope per algorithm column over the sizes where it ran.
pub fn scaling_slopes(rows: &[ScalingRow]) -> [Option<f64>; 5] {
    let mut out = [None; 5];
    for (j, o) in out.iter_mut().enumerate() {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| r.times[j].map(|t| (r.nx as f64, t)))
            .collect();
        *o = fit_loglog_slope(&pts);
    }
    out
}

/// Writes `scaling_timings.csv` and `scaling_fit_timings.csv`.
pub fn cmd_scaling(cfg: &RunConfig, out: &Path) -> Result<Vec<ScalingRow>> {
    let rows = scaling_study(cfg)?;
    ensure_dir(out)?;
    let mut header = vec!["masses", "nx"];
    header.extend(SCALING_COLUMNS);
    header.extend(["backoff_update", "sqp_step"]);
    let mut t = Table::new(header);
    for r in &rows {
        let mut row = vec![r.masses.to_string(), r.nx.to_string()];
        row.extend(r.times.iter().map(|v| v.map_or(String::new(), output::num)));
        row.push(output::num(r.backoff_update));
        row.push(output::num(r.sqp_step));
        t.push(row);
    }
    t.write(&out.join("scaling_timings.csv"))?;
    let slopes = scaling_slopes(&rows);
    let mut fit = Table::new(["algorithm", "slope", "sizes"]);
    for (j, name) in SCALING_COLUMNS.iter().enumerate() {
        let sizes = rows.iter().filter(|r| r.times[j].is_some()).count();
        fit.push(vec![
            name.to_string(),
            slopes[j].map_or(String::new(), output::num),
            sizes.to_string(),
        ]);
    }
    fit.write(&out.join("scaling_fit_timings.csv"))?;

    println!("{:>6} {:>4} {}", "masses", "nx", SCALING_COLUMNS.map(|c| format!("{c:>22}")).join(""));
    for r in &rows {
        let cells: String = r
            .times
            .iter()
            .map(|v| v.map_or(format!("{:>22}", "-"), |t| format!("{t:>22.3e}")))
            .collect();
        println!("{:>6} {:>4} {cells}", r.masses, r.nx);
    }
    let cells: String = slopes
        .iter()
        .map(|s| s.map_or(format!("{:>22}", "-"), |s| format!("{s:>22.2}")))
        .collect();
    println!("{:>11} {cells}", "slope");
    println!("wrote {}", out.display());
    Ok(rows)
}

pub fn problems_text() -> String {
    let mut s = String::new();
    for p in list_problems() {
        s.push_str(&format!("{:<20} {}\n", p.name, p.description));
    }
    s
}

/// Exit code of a command: 0 success, 1 error or no fixed point, 2 infeasible.
pub fn exit_code<T>(r: &Result<T>, status: impl Fn(&T) -> Option<SolveStatus>) -> i32 {
    match r {
        Ok(v) => match status(v) {
            Some(SolveStatus::Infeasible) => EXIT_INFEASIBLE,
            Some(SolveStatus::MaxOuterIters) => EXIT_ERROR,
            _ => EXIT_OK,
        },
        Err(Error::Infeasible { .. }) => EXIT_INFEASIBLE,
        Err(_) => EXIT_ERROR,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_power_law() {
        let pts: Vec<(f64, f64)> = [2.0, 4.0, 8.0].iter().map(|&x: &f64| (x, 3.0 * x.powi(3))).collect();
        assert!((fit_loglog_slope(&pts).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(fit_loglog_slope(&pts[..1]), None);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }
}
