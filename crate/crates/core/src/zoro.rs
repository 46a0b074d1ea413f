//! The Riccati-ZORO outer loop, its fixed-gain special case, the stationarity
//! diagnostic and closed-loop simulation.
//!
//! Every outer iteration runs, in order: sensitivities along the current
//! nominal trajectory, the weight design, the tube Riccati recursion (skipped
//! when gains are fixed), the Lyapunov propagation, the backoffs, and a
//! nominal solve (or a single SQP step) with those backoffs frozen.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inf_norm, psd_sqrt, Mat, Vec64};
use crate::model::{evaluate_sensitivities, rollout, ConstraintValues, NominalTrajectory, TubeOcp};
use crate::nominal::{
    complementarity, initial_guess, kkt_residual, solve_nominal, solve_nominal_from, sqp_iterate, NominalSolveOptions, NominalStatus,
    SqpState,
};
use crate::tube::{
    adaptive_weights, compute_backoffs, propagate_ellipsoids, riccati_recursion, siro_weights, Backoffs,
    Multipliers, StageWeight, StageWeights, TubeTrajectory, DEFAULT_BARRIER_CLAMP, DEFAULT_SIRO_BACKOFF_FLOOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum WeightMode {
    /// `C_k = C̄` at every iteration.
    Constant,
    /// Barrier-curvature weighting with clamp `delta`.
    Adaptive { delta: f64 },
    /// Multiplier weighting with backoff floor `eps_b`.
    Siro { eps_b: f64 },
}

impl WeightMode {
    pub fn adaptive() -> Self {
        WeightMode::Adaptive {
            delta: DEFAULT_BARRIER_CLAMP,
        }
    }

    pub fn siro() -> Self {
        WeightMode::Siro {
            eps_b: DEFAULT_SIRO_BACKOFF_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMode {
    /// Solve the nominal problem to `kkt_tol` each outer iteration.
    Converged,
    /// One SQP step per outer iteration (real-time iteration style).
    SingleSqpStep,
}

#[derive(Debug, Clone)]
pub enum NominalInit {
    User(NominalTrajectory),
    /// Solve the problem with zero backoffs first.
    NominalOcpSolution,
}

#[derive(Debug, Clone)]
pub struct AlgoOptions {
    pub weight_mode: WeightMode,
    /// `C̄`; `None` means `Q = I`, `R = 1e-2 I`, `S = 0`, `Q_N = I`.
    pub base_weights: Option<StageWeights>,
    /// Frozen feedback gains; skips the Riccati recursion (ZORO).
    pub fixed_gains: Option<Vec<Mat>>,
    pub max_outer_iters: usize,
    /// Convergence threshold on the change of backoffs and of the nominal iterate.
    pub backoff_tol: f64,
    pub inner_mode: InnerMode,
    pub nominal_init: NominalInit,
    /// Backoff update `b <- b + theta (b_new - b)`, `theta` in `(0, 1]`.
    pub relaxation: f64,
    pub nominal: NominalSolveOptions,
    pub compute_stationarity: bool,
}

impl Default for AlgoOptions {
    fn default() -> Self {
        AlgoOptions {
            weight_mode: WeightMode::Constant,
            base_weights: None,
            fixed_gains: None,
            max_outer_iters: 30,
            backoff_tol: 1e-6,
            inner_mode: InnerMode::Converged,
            nominal_init: NominalInit::NominalOcpSolution,
            relaxation: 1.0,
            nominal: NominalSolveOptions {
                kkt_tol: 1e-9,
                ..Default::default()
            },
            compute_stationarity: true,
        }
    }
}

impl AlgoOptions {
    /// ZORO: constant weights and gains frozen at `gains`.
    pub fn zoro(gains: Vec<Mat>) -> Self {
        AlgoOptions {
            fixed_gains: Some(gains),
            ..Default::default()
        }
    }

    pub fn with_weights(mode: WeightMode) -> Self {
        AlgoOptions {
            weight_mode: mode,
            ..Default::default()
        }
    }

    fn validate(&self, ocp: &TubeOcp) -> Result<()> {
        if self.max_outer_iters == 0 {
            return Err(Error::InvalidParameter("max_outer_iters must be positive".into()));
        }
        if !(self.backoff_tol > 0.0) {
            return Err(Error::InvalidParameter("backoff_tol must be positive".into()));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "relaxation must lie in (0, 1], got {}",
                self.relaxation
            )));
        }
        if let Some(gains) = &self.fixed_gains {
            let d = ocp.dims();
            if gains.len() != ocp.horizon() {
                return Err(Error::DimensionMismatch {
                    what: "fixed gains".into(),
                    expected: ocp.horizon(),
                    got: gains.len(),
                });
            }
            if let Some(bad) = gains.iter().find(|k| k.shape() != (d.nu, d.nx)) {
                return Err(Error::DimensionMismatch {
                    what: "fixed gain shape".into(),
                    expected: d.nu * d.nx,
                    got: bad.len(),
                });
            }
        }
        self.nominal.validate()
    }
}

/// Zero gains of the right shape for `ocp`.
pub fn zero_gains(ocp: &TubeOcp) -> Vec<Mat> {
    let d = ocp.dims();
    vec![Mat::zeros(d.nu, d.nx); ocp.horizon()]
}

pub fn default_base_weights(ocp: &TubeOcp) -> StageWeights {
    let d = ocp.dims();
    StageWeights {
        stages: vec![
            StageWeight {
                q: Mat::identity(d.nx, d.nx),
                s: Mat::zeros(d.nu, d.nx),
                r: Mat::identity(d.nu, d.nu) * 1e-2,
            };
            ocp.horizon()
        ],
        terminal: Mat::identity(d.nx, d.nx),
    }
}

/// Wall time per phase of one outer iteration, seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub sensitivities: f64,
    /// Weight assembly and the Riccati recursion.
    pub riccati: f64,
    pub lyapunov: f64,
    pub backoff: f64,
    pub nominal: f64,
}

impl PhaseTimings {
    pub fn backoff_update(&self) -> f64 {
        self.riccati + self.lyapunov + self.backoff
    }

    pub fn total(&self) -> f64 {
        self.sensitivities + self.riccati + self.lyapunov + self.backoff + self.nominal
    }

    fn add(&mut self, o: &PhaseTimings) {
        self.sensitivities += o.sensitivities;
        self.riccati += o.riccati;
        self.lyapunov += o.lyapunov;
        self.backoff += o.backoff;
        self.nominal += o.nominal;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    /// Infinity norm of the backoff change in this iteration.
    pub backoff_change: f64,
    /// Infinity norm of the nominal iterate change in this iteration.
    pub iterate_change: f64,
    pub kkt: f64,
    pub slack_norm: f64,
    pub sqp_iterations: usize,
    pub timings: PhaseTimings,
}

/// Everything that maps a nominal trajectory to backoffs at the final iterate.
#[derive(Debug, Clone)]
pub struct TubeDesign {
    pub weight_mode: WeightMode,
    pub base: StageWeights,
    pub fixed_gains: Option<Vec<Mat>>,
    /// Backoffs entering the SIRO denominator.
    pub prev_backoffs: Option<Backoffs>,
    /// Multipliers of the SIRO weighting.
    pub multipliers: Multipliers,
}

#[derive(Debug, Clone)]
pub struct Stationarity {
    /// `d/du b(u, K(u))' mu`, divided by `sigma` (zero for `sigma = 0`), stacked over stages.
    pub c_hat: Vec<Vec64>,
    pub c_hat_norm: f64,
    /// KKT residual of the gradient-perturbed problem.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub trajectory: NominalTrajectory,
    pub tube: TubeTrajectory,
    /// Backoffs of the last nominal solve.
    pub backoffs: Backoffs,
    pub multipliers: Multipliers,
    pub pi: Vec<Vec64>,
    pub weights: StageWeights,
    pub objective: f64,
    pub outer_iterations: usize,
    pub converged: bool,
    pub kkt: f64,
    pub slack_norm: f64,
    pub history: Vec<IterationRecord>,
    pub design: TubeDesign,
    pub stationarity: Option<Stationarity>,
    /// Time spent computing the initial nominal solution, seconds.
    pub init_time: f64,
}

impl SolveReport {
    pub fn timings(&self) -> PhaseTimings {
        let mut t = PhaseTimings::default();
        for h in &self.history {
            t.add(&h.timings);
        }
        t
    }
}

pub(crate) struct TubeEval {
    pub weights: StageWeights,
    pub gains: Vec<Mat>,
    pub p: Vec<Mat>,
    pub backoffs: Backoffs,
    pub timings: PhaseTimings,
}

pub(crate) fn evaluate_tube(ocp: &TubeOcp, design: &TubeDesign, traj: &NominalTrajectory) -> Result<TubeEval> {
    let mut timings = PhaseTimings::default();
    let t = Instant::now();
    let sens = evaluate_sensitivities(ocp, traj)?;
    timings.sensitivities = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let weights = match design.weight_mode {
        WeightMode::Constant => design.base.clone(),
        WeightMode::Adaptive { delta } => adaptive_weights(&sens, &design.base, delta)?,
        WeightMode::Siro { eps_b } => {
            let zero = ConstraintValues::zeros(ocp);
            let b = design.prev_backoffs.as_ref().unwrap_or(&zero);
            siro_weights(&sens, &design.multipliers, b, &design.base, eps_b)?
        }
    };
    let gains = match &design.fixed_gains {
        Some(k) => k.clone(),
        None => riccati_recursion(&sens, &weights)?.0,
    };
    timings.riccati = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let p = propagate_ellipsoids(&sens, &gains, ocp.initial_ellipsoid(), ocp.sigma())?;
    timings.lyapunov = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let backoffs = compute_backoffs(&sens, &p, &gains, ocp.gamma())?;
    timings.backoff = t.elapsed().as_secs_f64();
    Ok(TubeEval {
        weights,
        gains,
        p,
        backoffs,
        timings,
    })
}

fn argmax_stage(b: &Backoffs) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in b.iter().enumerate() {
        let m = inf_norm(v);
        if m > best.1 {
            best = (k, m);
        }
    }
    best.0
}

/// Runs the outer loop. Non-convergence and infeasibility come back as a
/// report with `converged == false` or a positive slack norm; hard failures
/// are errors.
pub(crate) fn run(ocp: &TubeOcp, opts: &AlgoOptions) -> Result<SolveReport> {
    opts.validate(ocp)?;
    let base = opts.base_weights.clone().unwrap_or_else(|| default_base_weights(ocp));
    if base.horizon() != ocp.horizon() {
        return Err(Error::InvalidWeights(format!(
            "base weights cover {} stages, expected {}",
            base.horizon(),
            ocp.horizon()
        )));
    }
    base.validate()?;

    let t0 = Instant::now();
    let mut state = match &opts.nominal_init {
        NominalInit::User(traj) => SqpState::cold(ocp, traj.clone())?,
        NominalInit::NominalOcpSolution => {
            let sol = solve_nominal(ocp, &ConstraintValues::zeros(ocp), &initial_guess(ocp), &opts.nominal)?;
            if sol.status == NominalStatus::LocallyInfeasible {
                return Err(Error::QpSubproblemFailure(format!(
                    "the problem without backoffs is infeasible (slack norm {:.3e})",
                    sol.slack_norm
                )));
            }
            sol.state()
        }
    };
    let init_time = t0.elapsed().as_secs_f64();

    let mut current_b = ConstraintValues::zeros(ocp);
    let mut prev_b: Option<Backoffs> = None;
    let mut history = Vec::new();
    let mut merit_weight = 1.0;
    let mut converged = false;
    let mut last = None;
    let mut kkt = f64::INFINITY;
    let mut slack = 0.0;

    for it in 1..=opts.max_outer_iters {
        let design = TubeDesign {
            weight_mode: opts.weight_mode,
            base: base.clone(),
            fixed_gains: opts.fixed_gains.clone(),
            prev_backoffs: prev_b.clone(),
            multipliers: state.lam.clone(),
        };
        let mut eval = evaluate_tube(ocp, &design, &state.traj).map_err(|e| e.at_outer(it))?;
        let b = if it == 1 || opts.relaxation == 1.0 {
            eval.backoffs.clone()
        } else {
            current_b.map2(&eval.backoffs, |old, new| old + opts.relaxation * (new - old))
        };
        let old_norm = current_b.inf_norm();
        if it > 1 && b.inf_norm() > 1e3 * old_norm && b.inf_norm() > 1e-6 {
            return Err(Error::DivergentTube { stage: argmax_stage(&b) }.at_outer(it));
        }
        let db = b.max_abs_diff(&current_b);

        let t = Instant::now();
        let (next, it_kkt, it_slack, sqp_iters) = match opts.inner_mode {
            InnerMode::Converged => {
                let sol = solve_nominal_from(ocp, &b, &state, &opts.nominal).map_err(|e| e.at_outer(it))?;
                eval.timings.nominal = t.elapsed().as_secs_f64();
                let st = sol.state();
                (st, sol.kkt, sol.slack_norm, sol.iterations)
            }
            InnerMode::SingleSqpStep => {
                let step = sqp_iterate(ocp, &b, &state, &mut merit_weight, &opts.nominal).map_err(|e| e.at_outer(it))?;
                eval.timings.nominal = t.elapsed().as_secs_f64();
                let k = kkt_residual(ocp, &b, &step.state).map_err(|e| e.at_outer(it))?;
                (step.state, k, step.slack_norm, 1)
            }
        };
        let dz = next.traj.distance(&state.traj);
        history.push(IterationRecord {
            iteration: it,
            objective: ocp.objective(&next.traj),
            backoff_change: db,
            iterate_change: dz,
            kkt: it_kkt,
            slack_norm: it_slack,
            sqp_iterations: sqp_iters,
            timings: eval.timings,
        });
        state = next;
        kkt = it_kkt;
        slack = it_slack;
        prev_b = Some(b.clone());
        current_b = b;
        last = Some((eval, design));
        if db <= opts.backoff_tol && dz <= opts.backoff_tol {
            converged = true;
            break;
        }
    }

    let (eval, mut design) = last.expect("at least one outer iteration");
    design.multipliers = state.lam.clone();
    design.prev_backoffs = Some(current_b.clone());
    let mut report = SolveReport {
        objective: ocp.objective(&state.traj),
        trajectory: state.traj,
        tube: TubeTrajectory {
            p: eval.p,
            k: eval.gains,
        },
        backoffs: current_b,
        multipliers: state.lam,
        pi: state.pi,
        weights: eval.weights,
        outer_iterations: history.len(),
        converged,
        kkt,
        slack_norm: slack,
        history,
        design,
        stationarity: None,
        init_time,
    };
    if converged && opts.compute_stationarity && report.slack_norm <= infeasibility_threshold(opts) {
        report.stationarity = Some(stationarity_residual(ocp, &report)?);
    }
    Ok(report)
}

fn infeasibility_threshold(opts: &AlgoOptions) -> f64 {
    (10.0 * opts.nominal.kkt_tol).max(1e-7)
}

/// Algorithm 1. Returns [`Error::OuterMaxIters`] or [`Error::Infeasible`]
/// with the last report attached when the loop does not end at a feasible
/// fixed point.
pub fn solve(ocp: &TubeOcp, opts: &AlgoOptions) -> Result<SolveReport> {
    let report = run(ocp, opts)?;
    if report.slack_norm > infeasibility_threshold(opts) {
        return Err(Error::Infeasible {
            slack_norm: report.slack_norm,
            report: Box::new(report),
        });
    }
    if !report.converged {
        return Err(Error::OuterMaxIters {
            iterations: report.outer_iterations,
            report: Box::new(report),
        });
    }
    Ok(report)
}

/// Gradient of `u -> mu' b(rollout(u))` with the weight design held fixed.
fn backoff_gradient(ocp: &TubeOcp, design: &TubeDesign, u: &[Vec64], mu: &Multipliers) -> Result<Vec<Vec64>> {
    let nu = ocp.dims().nu;
    let n = ocp.horizon();
    let mut flat = Vec64::zeros(n * nu);
    for (k, uk) in u.iter().enumerate() {
        flat.rows_mut(k * nu, nu).copy_from(uk);
    }
    let map = |z: &Vec64| -> Result<Vec64> {
        let uu: Vec<Vec64> = (0..n).map(|k| z.rows(k * nu, nu).into_owned()).collect();
        let traj = rollout(ocp, &uu)?;
        let b = evaluate_tube(ocp, design, &traj)?.backoffs;
        let v: f64 = b.iter().zip(mu.iter()).map(|(bk, mk)| bk.dot(mk)).sum();
        Ok(Vec64::from_element(1, v))
    };
    let jac = crate::oracle::finite_difference_jacobian(map, &flat, crate::model::FD_STEP)?;
    Ok((0..n).map(|k| jac.row(0).columns(k * nu, nu).transpose().into_owned()).collect())
}

/// Reduced gradient of `u -> l(rollout(u)) + mu' h(rollout(u))` by an adjoint sweep.
fn reduced_gradient(ocp: &TubeOcp, traj: &NominalTrajectory, mu: &Multipliers) -> Vec<Vec64> {
    let m = ocp.model();
    let n = ocp.horizon();
    let zw = Vec64::zeros(ocp.dims().nw);
    let xn = &traj.x[n];
    let mut adj = m.terminal_cost_gradient(xn) + m.terminal_constraint_jacobian(xn).transpose() * &mu.terminal;
    let mut grad = vec![Vec64::zeros(0); n];
    for k in (0..n).rev() {
        let (x, u) = (&traj.x[k], &traj.u[k]);
        let jac = m.dynamics_jacobians(k, x, u, &zw);
        let (gx, gu) = m.stage_cost_gradient(k, x, u);
        let (hx, hu) = m.stage_constraint_jacobians(k, x, u);
        grad[k] = gu + hu.transpose() * &mu.stage[k] + jac.b.transpose() * &adj;
        adj = gx + hx.transpose() * &mu.stage[k] + jac.a.transpose() * &adj;
    }
    grad
}

/// Perturbed-KKT diagnostic at the report's trajectory.
///
/// The gradient perturbation cancels the neglected backoff gradient, so the
/// residual combines the reduced stationarity of the nominal problem with
/// feasibility and complementarity against backoffs recomputed from the
/// trajectory itself.
pub fn stationarity_residual(ocp: &TubeOcp, report: &SolveReport) -> Result<Stationarity> {
    if !report.converged {
        return Err(Error::NotConverged);
    }
    stationarity_at(ocp, &report.design, &report.trajectory.u, &report.multipliers)
}

/// Same diagnostic at an arbitrary control sequence and multiplier estimate.
pub fn stationarity_at(ocp: &TubeOcp, design: &TubeDesign, u: &[Vec64], mu: &Multipliers) -> Result<Stationarity> {
    let traj = rollout(ocp, u)?;
    let sigma = ocp.sigma();
    let grad_b = backoff_gradient(ocp, design, u, mu)?;
    let c_hat: Vec<Vec64> = if sigma > 0.0 {
        grad_b.iter().map(|g| g / sigma).collect()
    } else {
        grad_b.iter().map(|g| Vec64::zeros(g.len())).collect()
    };
    let reduced = reduced_gradient(ocp, &traj, mu);
    // grad f + grad h' mu + grad b' mu - sigma c_hat
    let mut residual: f64 = 0.0;
    for k in 0..u.len() {
        let s = &reduced[k] + &grad_b[k] - &c_hat[k] * sigma;
        residual = residual.max(inf_norm(&s));
    }
    let b = evaluate_tube(ocp, design, &traj)?.backoffs;
    let h = ocp.constraint_values(&traj);
    for ((hk, bk), mk) in h.iter().zip(b.iter()).zip(mu.iter()) {
        for i in 0..hk.len() {
            let g = hk[i] + bk[i];
            residual = residual.max(g.max(0.0)).max((-mk[i]).max(0.0)).max(complementarity(g, mk[i]));
        }
    }
    let c_hat_norm = c_hat.iter().map(inf_norm).fold(0.0, f64::max);
    Ok(Stationarity {
        c_hat,
        c_hat_norm,
        residual,
    })
}

// ---------------------------------------------------------------------------
// closed loop

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Disturbance sequence on the boundary of the joint ellipsoid
    /// `E(0, blkdiag(W, ..., W))` over the whole run.
    Set,
    /// Independent `N(0, W)` per step.
    Stochastic,
}

#[derive(Debug, Clone)]
pub struct NoiseSampler {
    mode: NoiseMode,
    root: Mat,
}

impl NoiseSampler {
    /// `shape` is the per-step disturbance shape or covariance.
    pub fn new(mode: NoiseMode, shape: &Mat) -> Result<Self> {
        crate::linalg::check_psd(shape, "noise shape").map_err(Error::InvalidParameter)?;
        Ok(NoiseSampler {
            mode,
            root: psd_sqrt(shape),
        })
    }

    /// Noise matching `ocp`: `sigma^2 W_0`.
    pub fn for_ocp(mode: NoiseMode, ocp: &TubeOcp) -> Result<Self> {
        let s = ocp.sigma();
        Self::new(mode, &(&ocp.disturbance_shapes()[0] * (s * s)))
    }

    pub fn mode(&self) -> NoiseMode {
        self.mode
    }

    pub fn sample(&self, steps: usize, rng: &mut ChaCha8Rng) -> Vec<Vec64> {
        let nw = self.root.nrows();
        let mut xi: Vec<Vec64> = (0..steps)
            .map(|_| Vec64::from_fn(nw, |_, _| StandardNormal.sample(rng)))
            .collect();
        if self.mode == NoiseMode::Set {
            let norm = xi.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in &mut xi {
                    *v /= norm;
                }
            }
        }
        xi.iter().map(|v| &self.root * v).collect()
    }
}

/// Constraint values above this count as violated.
pub const VIOLATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTimings {
    /// Nominal SQP work including the linearization.
    pub sqp: f64,
    pub riccati: f64,
    pub lyapunov: f64,
    pub backoff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopStep {
    pub step: usize,
    pub x: Vec64,
    pub u: Vec64,
    pub w: Vec64,
    /// Stage constraints of the applied pair `(x, u)`.
    pub constraints: Vec64,
    pub max_constraint: f64,
    pub violated: bool,
    pub outer_iterations: usize,
    pub timings: StepTimings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopLog {
    pub steps: Vec<ClosedLoopStep>,
    pub final_state: Vec64,
    pub violations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ClosedLoopOptions {
    pub steps: usize,
    pub seed: u64,
    /// `Some(n)`: real-time iteration with `n` SQP steps, each followed by a
    /// backoff update. `None`: solve to convergence at every step.
    pub rti_sqp_iters: Option<usize>,
}

fn shift(traj: &NominalTrajectory, x0: &Vec64) -> NominalTrajectory {
    let n = traj.u.len();
    let mut u: Vec<Vec64> = traj.u[1..].to_vec();
    u.push(traj.u[n - 1].clone());
    let mut x: Vec<Vec64> = traj.x[1..].to_vec();
    x.push(traj.x[n].clone());
    x[0] = x0.clone();
    NominalTrajectory { x, u }
}

/// Closed-loop MPC simulation. `template(step, x)` builds the problem solved
/// at each step; `true_dynamics(step, x, u, w)` advances the plant.
pub fn closed_loop_simulate<T, D>(
    template: T,
    controller: &AlgoOptions,
    true_dynamics: D,
    noise: &NoiseSampler,
    cl: &ClosedLoopOptions,
) -> Result<ClosedLoopLog>
where
    T: Fn(usize, &Vec64) -> Result<TubeOcp>,
    D: Fn(usize, &Vec64, &Vec64, &Vec64) -> Vec64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cl.seed);
    let disturbances = noise.sample(cl.steps, &mut rng);
    let mut x = template(0, &Vec64::zeros(0)).map(|o| o.initial_state().clone()).unwrap_or_default();
    let mut warm: Option<NominalTrajectory> = None;
    let mut rows = Vec::with_capacity(cl.steps);
    let mut violations = 0;
    for (t, w) in disturbances.into_iter().enumerate() {
        let wrap = |e: Error| Error::ClosedLoopStep {
            step: t,
            source: Box::new(e),
        };
        let ocp = template(t, &x).map_err(wrap)?;
        let mut opts = controller.clone();
        opts.compute_stationarity = false;
        if let Some(w) = &warm {
            opts.nominal_init = NominalInit::User(w.clone());
        }
        let report = match cl.rti_sqp_iters {
            Some(iters) => {
                opts.inner_mode = InnerMode::SingleSqpStep;
                opts.max_outer_iters = iters.max(1);
                run(&ocp, &opts).map_err(wrap)?
            }
            None => solve(&ocp, &opts).map_err(wrap)?,
        };
        let u = report.trajectory.u[0].clone();
        let h = ocp.model().stage_constraints(0, &x, &u);
        let max_h = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let violated = max_h > VIOLATION_TOL;
        violations += violated as usize;
        let pt = report.timings();
        let timings = StepTimings {
            sqp: pt.nominal + pt.sensitivities + report.init_time,
            riccati: pt.riccati,
            lyapunov: pt.lyapunov,
            backoff: pt.backoff,
        };
        let next = true_dynamics(t, &x, &u, &w);
        if !crate::linalg::vec_is_finite(&next) {
            return Err(wrap(Error::NonFiniteDynamics { stage: 0 }));
        }
        rows.push(ClosedLoopStep {
            step: t,
            x: x.clone(),
            u,
            w,
            constraints: h,
            max_constraint: max_h,
            violated,
            outer_iterations: report.outer_iterations,
            timings,
        });
        warm = Some(shift(&report.trajectory, &next));
        x = next;
    }
    Ok(ClosedLoopLog {
        steps: rows,
        final_state: x,
        violations,
    })
}

/// Seed of Monte-Carlo run `run`.
pub fn run_seed(seed: u64, run: usize) -> u64 {
    seed ^ (run as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Independent closed-loop runs in parallel; results are ordered by run index.
pub fn monte_carlo<T, D>(
    template: T,
    controller: &AlgoOptions,
    true_dynamics: D,
    noise: &NoiseSampler,
    cl: &ClosedLoopOptions,
    runs: usize,
) -> Result<Vec<ClosedLoopLog>>
where
    T: Fn(usize, &Vec64) -> Result<TubeOcp> + Sync,
    D: Fn(usize, &Vec64, &Vec64, &Vec64) -> Vec64 + Sync,
{
    (0..runs)
        .into_par_iter()
        .map(|r| {
            let opts = ClosedLoopOptions {
                seed: run_seed(cl.seed, r),
                ..*cl
            };
            closed_loop_simulate(&template, controller, &true_dynamics, noise, &opts)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{build_problem, ProblemParams};

    #[test]
    fn no_uncertainty_converges_in_one_iteration() {
        let ocp = build_problem(&ProblemParams::named("double_integrator"))
            .unwrap()
            .with_sigma(0.0)
            .unwrap();
        let report = solve(&ocp, &AlgoOptions::default()).unwrap();
        assert_eq!(report.outer_iterations, 1);
        assert_eq!(report.backoffs.inf_norm(), 0.0);
        let st = report.stationarity.unwrap();
        assert_eq!(st.c_hat_norm, 0.0);
    }

    #[test]
    fn zoro_mode_never_changes_the_gains() {
        let ocp = build_problem(&ProblemParams::named("pendulum")).unwrap();
        let k = vec![Mat::from_row_slice(1, 2, &[-2.0, -0.5]); ocp.horizon()];
        let report = solve(&ocp, &AlgoOptions::zoro(k.clone())).unwrap();
        assert_eq!(report.tube.k, k);
    }

    #[test]
    fn relaxation_outside_unit_interval_is_rejected() {
        let ocp = build_problem(&ProblemParams::named("double_integrator")).unwrap();
        let opts = AlgoOptions {
            relaxation: 1.5,
            ..Default::default()
        };
        assert!(matches!(solve(&ocp, &opts), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn stationarity_needs_a_converged_report() {
        let ocp = build_problem(&ProblemParams::named("double_integrator")).unwrap();
        let opts = AlgoOptions {
            max_outer_iters: 1,
            ..Default::default()
        };
        let report = match solve(&ocp, &opts) {
            Err(Error::OuterMaxIters { report, .. }) => *report,
            Ok(r) => r,
            Err(e) => panic!("{e}"),
        };
        let mut report = report;
        report.converged = false;
        assert!(matches!(stationarity_residual(&ocp, &report), Err(Error::NotConverged)));
    }

    #[test]
    fn noise_sampler_set_mode_lies_on_the_joint_boundary() {
        let w = Mat::from_diagonal(&Vec64::from_vec(vec![4.0, 1.0]));
        let s = NoiseSampler::new(NoiseMode::Set, &w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq = s.sample(7, &mut rng);
        let winv = w.try_inverse().unwrap();
        let total: f64 = seq.iter().map(|v| v.dot(&(&winv * v))).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
