//! Nominal OCP with fixed constraint backoffs, solved by SQP.
//!
//! ```text
//! min  sum_k l_k(x_k, u_k) + l_N(x_N)
//! s.t. x_0 = x0,  x_{k+1} = f_k(x_k, u_k, 0),  h_k(x_k, u_k) + b_k <= 0
//! ```
//!
//! States are kept as decision variables (multiple shooting). Globalization
//! uses the l1 merit function with Armijo backtracking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inf_norm, symmetrize, Mat, Vec64};
use crate::model::{central_jacobian, rollout, ConstraintValues, Model, NominalTrajectory, TubeOcp};
use crate::qp::{solve_qp, OcpQp, QpOptions, QpSolution, QpStage};
use crate::tube::{Backoffs, Multipliers};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// Cost Hessian only.
    GaussNewton,
    /// Lagrangian Hessian with constraint and dynamics curvature by finite
    /// differences; `lambda I` is added to each stage block (starting at
    /// 1e-8, growing x10) until it factorizes.
    ExactRegularized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineSearch {
    None,
    /// Backtracking factor 0.5, sufficient decrease 1e-4.
    Armijo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NominalSolveOptions {
    pub max_sqp_iters: usize,
    /// Tolerance on the infinity norm of the KKT residual.
    pub kkt_tol: f64,
    /// Exact-penalty weight on constraint violation.
    pub penalty_weight: f64,
    pub hessian_mode: HessianMode,
    pub linesearch: LineSearch,
    pub qp_max_iters: usize,
}

impl Default for NominalSolveOptions {
    fn default() -> Self {
        NominalSolveOptions {
            max_sqp_iters: 50,
            kkt_tol: 1e-6,
            penalty_weight: 1e4,
            hessian_mode: HessianMode::GaussNewton,
            linesearch: LineSearch::Armijo,
            qp_max_iters: 100,
        }
    }
}

impl NominalSolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.kkt_tol > 0.0 && self.penalty_weight > 1.0 && self.max_sqp_iters > 0) {
            return Err(Error::InvalidParameter(
                "nominal options need kkt_tol > 0, penalty_weight > 1 and max_sqp_iters > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NominalStatus {
    Converged,
    /// The SQP stalled with nonzero elastic slacks: no point satisfies the
    /// backed-off constraints near the iterate.
    LocallyInfeasible,
}

#[derive(Debug, Clone)]
pub struct NominalSolution {
    pub traj: NominalTrajectory,
    /// Multipliers of `h + b <= 0`.
    pub multipliers: Multipliers,
    /// Dynamics multipliers, `pi_k` belongs to `x_{k+1} = f_k(x_k, u_k)`.
    pub pi: Vec<Vec64>,
    pub objective: f64,
    pub kkt: f64,
    pub iterations: usize,
    /// Infinity norm of the last QP's elastic slacks.
    pub slack_norm: f64,
    pub status: NominalStatus,
}

/// Primal-dual point of the SQP.
#[derive(Debug, Clone)]
pub struct SqpState {
    pub traj: NominalTrajectory,
    pub lam: Multipliers,
    pub pi: Vec<Vec64>,
}

impl SqpState {
    /// Zero multipliers at the given trajectory; `x_0` is reset to the problem's initial state.
    pub fn cold(ocp: &TubeOcp, traj: NominalTrajectory) -> Result<Self> {
        ocp.check_trajectory(&traj)?;
        let mut traj = traj;
        traj.x[0] = ocp.initial_state().clone();
        Ok(SqpState {
            traj,
            lam: ConstraintValues::zeros(ocp),
            pi: vec![Vec64::zeros(ocp.dims().nx); ocp.horizon()],
        })
    }
}

/// Zero-control rollout, or the constant initial state if that rollout fails.
pub fn initial_guess(ocp: &TubeOcp) -> NominalTrajectory {
    let u = vec![Vec64::zeros(ocp.dims().nu); ocp.horizon()];
    rollout(ocp, &u).unwrap_or_else(|_| NominalTrajectory {
        x: vec![ocp.initial_state().clone(); ocp.horizon() + 1],
        u,
    })
}

/// Outcome of one SQP step.
#[derive(Debug, Clone)]
pub struct SqpStep {
    pub state: SqpState,
    pub step_norm: f64,
    pub alpha: f64,
    pub slack_norm: f64,
}

struct Linearization {
    qp: OcpQp,
    grad_x: Vec<Vec64>,
    grad_u: Vec<Vec64>,
    defects: Vec<Vec64>,
    g: ConstraintValues,
}

/// Solves the QP, adding `lambda I` to every Hessian block (`lambda` from
/// `1e-8`, growing by 10) until the factorization succeeds.
fn solve_levenberg(qp: &OcpQp, opts: &QpOptions) -> Result<QpSolution> {
    let strict = QpOptions {
        regularize: false,
        ..*opts
    };
    match solve_qp(qp, &strict) {
        Err(Error::QpSubproblemFailure(_)) => {}
        other => return other,
    }
    let mut reg = 1e-8;
    loop {
        let mut trial = qp.clone();
        for st in &mut trial.stages {
            st.q += Mat::identity(st.q.nrows(), st.q.ncols()) * reg;
            st.r += Mat::identity(st.r.nrows(), st.r.ncols()) * reg;
        }
        trial.qn += Mat::identity(trial.qn.nrows(), trial.qn.ncols()) * reg;
        match solve_qp(&trial, &strict) {
            Err(Error::QpSubproblemFailure(_)) if reg < 1e12 => reg *= 10.0,
            other => return other,
        }
    }
}

fn stack(x: &Vec64, u: &Vec64) -> Vec64 {
    let mut z = Vec64::zeros(x.len() + u.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), u.len()).copy_from(u);
    z
}

/// Hessian of `pi' f(x, u, 0) + lam' h(x, u)` by differencing the analytic (or default) Jacobians.
fn constraint_curvature(m: &dyn Model, k: usize, x: &Vec64, u: &Vec64, pi: &Vec64, lam: &Vec64) -> Mat {
    let nx = x.len();
    let nu = u.len();
    let zw = Vec64::zeros(m.dims().nw);
    let grad = |z: &Vec64| {
        let xx = z.rows(0, nx).into_owned();
        let uu = z.rows(nx, nu).into_owned();
        let jac = m.dynamics_jacobians(k, &xx, &uu, &zw);
        let (hx, hu) = m.stage_constraint_jacobians(k, &xx, &uu);
        let gx = jac.a.transpose() * pi + hx.transpose() * lam;
        let gu = jac.b.transpose() * pi + hu.transpose() * lam;
        stack(&gx, &gu)
    };
    let mut h = central_jacobian(grad, &stack(x, u), 1e-5);
    symmetrize(&mut h);
    h
}

fn linearize(ocp: &TubeOcp, backoffs: &Backoffs, st: &SqpState, opts: &NominalSolveOptions) -> Result<Linearization> {
    let m = ocp.model();
    let n = ocp.horizon();
    let dims = ocp.dims();
    let zw = Vec64::zeros(dims.nw);
    let traj = &st.traj;
    let mut stages = Vec::with_capacity(n);
    let mut grad_x = Vec::with_capacity(n + 1);
    let mut grad_u = Vec::with_capacity(n);
    let mut defects = Vec::with_capacity(n);
    let mut g = ConstraintValues::zeros(ocp);
    for k in 0..n {
        let (x, u) = (&traj.x[k], &traj.u[k]);
        let next = m.dynamics(k, x, u, &zw);
        if !crate::linalg::vec_is_finite(&next) {
            return Err(Error::NonFiniteDynamics { stage: k });
        }
        let jac = m.dynamics_jacobians(k, x, u, &zw);
        let (gx, gu) = m.stage_cost_gradient(k, x, u);
        let hess = m.stage_cost_hessian(k, x, u);
        let h = m.stage_constraints(k, x, u);
        let (hx, hu) = m.stage_constraint_jacobians(k, x, u);
        let mut full = Mat::zeros(dims.nx + dims.nu, dims.nx + dims.nu);
        full.view_mut((0, 0), (dims.nx, dims.nx)).copy_from(&hess.q);
        full.view_mut((dims.nx, 0), (dims.nu, dims.nx)).copy_from(&hess.s);
        full.view_mut((0, dims.nx), (dims.nx, dims.nu)).copy_from(&hess.s.transpose());
        full.view_mut((dims.nx, dims.nx), (dims.nu, dims.nu)).copy_from(&hess.r);
        if opts.hessian_mode == HessianMode::ExactRegularized {
            full += constraint_curvature(m, k, x, u, &st.pi[k], &st.lam.stage[k]);
        }
        let gk = &h + &backoffs.stage[k];
        let defect = &next - &traj.x[k + 1];
        stages.push(QpStage {
            q: full.view((0, 0), (dims.nx, dims.nx)).into_owned(),
            s: full.view((dims.nx, 0), (dims.nu, dims.nx)).into_owned(),
            r: full.view((dims.nx, dims.nx), (dims.nu, dims.nu)).into_owned(),
            qv: gx.clone(),
            rv: gu.clone(),
            a: jac.a,
            b: jac.b,
            f: defect.clone(),
            c: hx,
            d: hu,
            g: gk.clone(),
        });
        grad_x.push(gx);
        grad_u.push(gu);
        defects.push(defect);
        g.stage[k] = gk;
    }
    let xn = &traj.x[n];
    let gn = m.terminal_cost_gradient(xn);
    let mut qn = m.terminal_cost_hessian(xn);
    let hn = m.terminal_constraints(xn);
    let cn = m.terminal_constraint_jacobian(xn);
    if opts.hessian_mode == HessianMode::ExactRegularized {
        if !hn.is_empty() {
            let lam = &st.lam.terminal;
            let mut curv = central_jacobian(|x| m.terminal_constraint_jacobian(x).transpose() * lam, xn, 1e-5);
            symmetrize(&mut curv);
            qn += curv;
        }
    }
    g.terminal = &hn + &backoffs.terminal;
    grad_x.push(gn.clone());
    let qp = OcpQp {
        stages,
        qn,
        qvn: gn,
        cn,
        gn: g.terminal.clone(),
    };

    Ok(Linearization {
        qp,
        grad_x,
        grad_u,
        defects,
        g,
    })
}

fn violation_l1(defects: &[Vec64], g: &ConstraintValues) -> f64 {
    let d: f64 = defects.iter().map(|v| v.lp_norm(1)).sum();
    let c: f64 = g.iter().flat_map(|v| v.iter()).map(|v| v.max(0.0)).sum();
    d + c
}

fn merit_at(ocp: &TubeOcp, backoffs: &Backoffs, traj: &NominalTrajectory, weight: f64) -> Option<f64> {
    let m = ocp.model();
    let zw = Vec64::zeros(ocp.dims().nw);
    let mut viol = 0.0;
    for k in 0..ocp.horizon() {
        let next = m.dynamics(k, &traj.x[k], &traj.u[k], &zw);
        viol += (&next - &traj.x[k + 1]).lp_norm(1);
        let h = m.stage_constraints(k, &traj.x[k], &traj.u[k]) + &backoffs.stage[k];
        viol += h.iter().map(|v| v.max(0.0)).sum::<f64>();
    }
    let hn = m.terminal_constraints(&traj.x[ocp.horizon()]) + &backoffs.terminal;
    viol += hn.iter().map(|v| v.max(0.0)).sum::<f64>();
    let phi = ocp.objective(traj) + weight * viol;
    phi.is_finite().then_some(phi)
}

/// KKT residual (stationarity, feasibility, complementarity, dual sign) of the
/// backed-off nominal problem at a primal-dual point.
pub fn kkt_residual(ocp: &TubeOcp, backoffs: &Backoffs, st: &SqpState) -> Result<f64> {
    if !st.lam.dims_match(&ConstraintValues::zeros(ocp)) {
        return Err(Error::InvalidMultipliers("layout does not match the constraints".into()));
    }
    if let Some(bad) = st.lam.iter().flat_map(|v| v.iter()).find(|m| !(**m >= 0.0)) {
        return Err(Error::InvalidMultipliers(format!("negative or non-finite multiplier {bad}")));
    }
    let opts = NominalSolveOptions::default();
    let lin = linearize(ocp, backoffs, st, &opts)?;
    Ok(kkt_from(&lin, st))
}

/// `|g lam| / max(1, lam)`: the plain product for moderate multipliers, the
/// constraint value itself for large ones.
pub(crate) fn complementarity(g: f64, lam: f64) -> f64 {
    (g * lam).abs() / lam.abs().max(1.0)
}

fn kkt_from(lin: &Linearization, st: &SqpState) -> f64 {
    let n = lin.qp.horizon();
    let mut r: f64 = 0.0;
    for k in 0..n {
        let s = &lin.qp.stages[k];
        let lam = &st.lam.stage[k];
        if k > 0 {
            let gx = &lin.grad_x[k] + s.a.transpose() * &st.pi[k] - &st.pi[k - 1] + s.c.transpose() * lam;
            r = r.max(inf_norm(&gx));
        }
        let gu = &lin.grad_u[k] + s.b.transpose() * &st.pi[k] + s.d.transpose() * lam;
        r = r.max(inf_norm(&gu));
        r = r.max(inf_norm(&lin.defects[k]));
    }
    let gn = &lin.grad_x[n] - &st.pi[n - 1] + lin.qp.cn.transpose() * &st.lam.terminal;
    r = r.max(inf_norm(&gn));
    for (g, lam) in lin.g.iter().zip(st.lam.iter()) {
        for i in 0..g.len() {
            r = r.max(g[i].max(0.0)).max((-lam[i]).max(0.0)).max(complementarity(g[i], lam[i]));
        }
    }
    r
}

/// One SQP step with l1-merit backtracking. `merit_weight` is raised in place
/// when the QP multipliers require it.
pub fn sqp_iterate(
    ocp: &TubeOcp,
    backoffs: &Backoffs,
    st: &SqpState,
    merit_weight: &mut f64,
    opts: &NominalSolveOptions,
) -> Result<SqpStep> {
    let lin = linearize(ocp, backoffs, st, opts)?;
    sqp_step_from(ocp, backoffs, st, &lin, merit_weight, opts)
}

fn sqp_step_from(
    ocp: &TubeOcp,
    backoffs: &Backoffs,
    st: &SqpState,
    lin: &Linearization,
    merit_weight: &mut f64,
    opts: &NominalSolveOptions,
) -> Result<SqpStep> {
    let qp_opts = QpOptions {
        rho: opts.penalty_weight,
        max_iter: opts.qp_max_iters,
        tol: (1e-2 * opts.kkt_tol).clamp(1e-12, 1e-10),
        ..Default::default()
    };
    let sol = match opts.hessian_mode {
        HessianMode::GaussNewton => solve_qp(&lin.qp, &qp_opts)?,
        HessianMode::ExactRegularized => solve_levenberg(&lin.qp, &qp_opts)?,
    };
    let n = ocp.horizon();

    let dual_max = sol
        .lam
        .iter()
        .chain(sol.pi.iter())
        .map(inf_norm)
        .fold(0.0, f64::max);
    if sol.slack_norm() <= 1e-9 && *merit_weight < 1.1 * dual_max {
        *merit_weight = (2.0 * dual_max).max(1.0);
    }
    let weight = *merit_weight;

    let step_norm = sol.x.iter().chain(sol.u.iter()).map(inf_norm).fold(0.0, f64::max);
    let mut deriv: f64 = (0..n)
        .map(|k| lin.grad_x[k].dot(&sol.x[k]) + lin.grad_u[k].dot(&sol.u[k]))
        .sum::<f64>()
        + lin.grad_x[n].dot(&sol.x[n]);
    let viol = violation_l1(&lin.defects, &lin.g);
    let slack_l1: f64 = sol.slack.iter().map(|v| v.sum()).sum();
    deriv -= weight * (viol - slack_l1).max(0.0);

    let phi0 = merit_at(ocp, backoffs, &st.traj, weight).ok_or(Error::NonFiniteDynamics { stage: 0 })?;
    let trial = |alpha: f64| NominalTrajectory {
        x: st.traj.x.iter().zip(&sol.x).map(|(x, d)| x + d * alpha).collect(),
        u: st.traj.u.iter().zip(&sol.u).map(|(u, d)| u + d * alpha).collect(),
    };
    let mut alpha = 1.0;
    let mut accepted = None;
    if opts.linesearch == LineSearch::None {
        accepted = Some(trial(1.0));
    }
    while accepted.is_none() && alpha >= 1e-10 {
        let cand = trial(alpha);
        if let Some(phi) = merit_at(ocp, backoffs, &cand, weight) {
            let noise = 1e-13 * (1.0 + phi0.abs());
            if phi <= phi0 + 1e-4 * alpha * deriv.min(0.0) + noise || step_norm * alpha < 1e-14 {
                accepted = Some(cand);
                break;
            }
        }
        alpha *= 0.5;
    }
    let traj = match accepted {
        Some(t) => t,
        None => {
            // the merit model is unreliable at this scale; take a tiny step
            alpha = 1e-10;
            trial(alpha)
        }
    };
    // multipliers of an elastic QP sit at the penalty weight and say nothing about the problem
    let alpha_dual = if sol.slack_norm() > 1e-9 { 0.0 } else { alpha };
    let blend = |old: &Vec64, new: &Vec64| old + (new - old) * alpha_dual;
    let lam = ConstraintValues {
        stage: (0..n).map(|k| blend(&st.lam.stage[k], &sol.lam[k])).collect(),
        terminal: blend(&st.lam.terminal, &sol.lam[n]),
    };
    let pi = st.pi.iter().zip(&sol.pi).map(|(o, p)| blend(o, p)).collect();
    Ok(SqpStep {
        state: SqpState { traj, lam, pi },
        step_norm,
        alpha,
        slack_norm: sol.slack_norm(),
    })
}

/// Solves the backed-off nominal problem from a primal initial guess.
pub fn solve_nominal(
    ocp: &TubeOcp,
    backoffs: &Backoffs,
    init: &NominalTrajectory,
    opts: &NominalSolveOptions,
) -> Result<NominalSolution> {
    solve_nominal_from(ocp, backoffs, &SqpState::cold(ocp, init.clone())?, opts)
}

/// Solves the backed-off nominal problem from a primal-dual point.
pub fn solve_nominal_from(
    ocp: &TubeOcp,
    backoffs: &Backoffs,
    start: &SqpState,
    opts: &NominalSolveOptions,
) -> Result<NominalSolution> {
    opts.validate()?;
    if !backoffs.dims_match(&ConstraintValues::zeros(ocp)) {
        return Err(Error::DimensionMismatch {
            what: "backoffs".into(),
            expected: ocp.total_constraints(),
            got: backoffs.iter().map(|v| v.len()).sum(),
        });
    }
    let mut st = start.clone();
    st.traj.x[0] = ocp.initial_state().clone();
    let mut weight = 1.0;
    let mut slack = 0.0;
    let mut stalled = 0;
    for iter in 0..opts.max_sqp_iters {
        let lin = linearize(ocp, backoffs, &st, opts)?;
        let kkt = kkt_from(&lin, &st);
        if kkt <= opts.kkt_tol {
            return Ok(finish(ocp, st, kkt, iter, slack, NominalStatus::Converged));
        }
        let step = sqp_step_from(ocp, backoffs, &st, &lin, &mut weight, opts)?;
        slack = step.slack_norm;
        let tiny = step.step_norm * step.alpha < 1e-12;
        st = step.state;
        if slack > 1e-7 && tiny {
            stalled += 1;
            if stalled >= 3 {
                let kkt = kkt_residual(ocp, backoffs, &st)?;
                return Ok(finish(ocp, st, kkt, iter + 1, slack, NominalStatus::LocallyInfeasible));
            }
        } else {
            stalled = 0;
        }
    }
    let kkt = kkt_residual(ocp, backoffs, &st)?;
    if kkt <= opts.kkt_tol {
        return Ok(finish(ocp, st, kkt, opts.max_sqp_iters, slack, NominalStatus::Converged));
    }
    let status = if slack > 1e-7 {
        NominalStatus::LocallyInfeasible
    } else {
        NominalStatus::Converged
    };
    let best = finish(ocp, st, kkt, opts.max_sqp_iters, slack, status);
    if status == NominalStatus::LocallyInfeasible {
        return Ok(best);
    }
    Err(Error::MaxItersExceeded {
        iterations: opts.max_sqp_iters,
        kkt,
        best: Box::new(best),
    })
}

fn finish(ocp: &TubeOcp, st: SqpState, kkt: f64, iterations: usize, slack: f64, status: NominalStatus) -> NominalSolution {
    NominalSolution {
        objective: ocp.objective(&st.traj),
        traj: st.traj,
        multipliers: st.lam,
        pi: st.pi,
        kkt,
        iterations,
        slack_norm: slack,
        status,
    }
}

impl NominalSolution {
    pub fn state(&self) -> SqpState {
        SqpState {
            traj: self.traj.clone(),
            lam: self.multipliers.clone(),
            pi: self.pi.clone(),
        }
    }
}
