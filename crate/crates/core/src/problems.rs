//! Built-in benchmark problems and a generic linear-quadratic model.
//!
//! | name                | state                    | control   | constraints                               |
//! |---------------------|--------------------------|-----------|-------------------------------------------|
//! | `double_integrator` | `(p, v)`, dt = 0.1       | `a`       | `p <= 1` (or braking), `abs(v) <= 1`, `abs(a) <= 2` |
//! | `pendulum`          | `(theta, omega)`, dt = 0.05 | torque | `theta <= 0.8`, `abs(omega) <= 3`, `abs(tau) <= 8` |
//! | `diff_drive`        | `(px, py, theta, v, omega)`, dt = 0.1 | `(a, alpha)` | one circular obstacle, speed and actuator boxes |
//! | `mass_chain(M)`     | `(q_1..q_M, v_1..v_M)`, dt = 0.05 | end force | `q_i <= 0.8`, `abs(u) <= 20` |
//!
//! All disturbances are additive; the stage disturbance shapes are listed in
//! each constructor.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vec64};
use crate::model::{Dims, DynamicsJacobians, Model, StageHessian, TubeOcp};

/// Time-invariant linear dynamics `x+ = A x + B u + G w` with quadratic
/// tracking costs and polytopic constraints `Cx x + Cu u <= d`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: Mat,
    pub b: Mat,
    pub gamma: Mat,
    pub q: Mat,
    pub r: Mat,
    pub qn: Mat,
    pub x_ref: Vec64,
    pub u_ref: Vec64,
    pub cx: Mat,
    pub cu: Mat,
    pub d: Vec64,
    pub cx_terminal: Mat,
    pub d_terminal: Vec64,
}

impl LinearModel {
    pub fn new(a: Mat, b: Mat, gamma: Mat) -> Self {
        let nx = a.nrows();
        let nu = b.ncols();
        LinearModel {
            q: Mat::identity(nx, nx),
            r: Mat::identity(nu, nu),
            qn: Mat::identity(nx, nx),
            x_ref: Vec64::zeros(nx),
            u_ref: Vec64::zeros(nu),
            cx: Mat::zeros(0, nx),
            cu: Mat::zeros(0, nu),
            d: Vec64::zeros(0),
            cx_terminal: Mat::zeros(0, nx),
            d_terminal: Vec64::zeros(0),
            a,
            b,
            gamma,
        }
    }

    pub fn with_cost(mut self, q: Mat, r: Mat, qn: Mat) -> Self {
        self.q = q;
        self.r = r;
        self.qn = qn;
        self
    }

    pub fn with_reference(mut self, x_ref: Vec64, u_ref: Vec64) -> Self {
        self.x_ref = x_ref;
        self.u_ref = u_ref;
        self
    }

    pub fn with_stage_constraints(mut self, cx: Mat, cu: Mat, d: Vec64) -> Self {
        self.cx = cx;
        self.cu = cu;
        self.d = d;
        self
    }

    pub fn with_terminal_constraints(mut self, cx: Mat, d: Vec64) -> Self {
        self.cx_terminal = cx;
        self.d_terminal = d;
        self
    }
}

impl Model for LinearModel {
    fn dims(&self) -> Dims {
        Dims {
            nx: self.a.nrows(),
            nu: self.b.ncols(),
            nw: self.gamma.ncols(),
        }
    }

    fn dynamics(&self, _k: usize, x: &Vec64, u: &Vec64, w: &Vec64) -> Vec64 {
        &self.a * x + &self.b * u + &self.gamma * w
    }

    fn dynamics_jacobians(&self, _k: usize, _x: &Vec64, _u: &Vec64, _w: &Vec64) -> DynamicsJacobians {
        DynamicsJacobians {
            a: self.a.clone(),
            b: self.b.clone(),
            gamma: self.gamma.clone(),
        }
    }

    fn stage_cost(&self, _k: usize, x: &Vec64, u: &Vec64) -> f64 {
        let dx = x - &self.x_ref;
        let du = u - &self.u_ref;
        0.5 * (dx.dot(&(&self.q * &dx)) + du.dot(&(&self.r * &du)))
    }

    fn stage_cost_gradient(&self, _k: usize, x: &Vec64, u: &Vec64) -> (Vec64, Vec64) {
        (&self.q * (x - &self.x_ref), &self.r * (u - &self.u_ref))
    }

    fn stage_cost_hessian(&self, _k: usize, _x: &Vec64, _u: &Vec64) -> StageHessian {
        StageHessian {
            q: self.q.clone(),
            s: Mat::zeros(self.b.ncols(), self.a.nrows()),
            r: self.r.clone(),
        }
    }

    fn terminal_cost(&self, x: &Vec64) -> f64 {
        let dx = x - &self.x_ref;
        0.5 * dx.dot(&(&self.qn * &dx))
    }

    fn terminal_cost_gradient(&self, x: &Vec64) -> Vec64 {
        &self.qn * (x - &self.x_ref)
    }

    fn terminal_cost_hessian(&self, _x: &Vec64) -> Mat {
        self.qn.clone()
    }

    fn stage_constraints(&self, _k: usize, x: &Vec64, u: &Vec64) -> Vec64 {
        &self.cx * x + &self.cu * u - &self.d
    }

    fn stage_constraint_jacobians(&self, _k: usize, _x: &Vec64, _u: &Vec64) -> (Mat, Mat) {
        (self.cx.clone(), self.cu.clone())
    }

    fn terminal_constraints(&self, x: &Vec64) -> Vec64 {
        &self.cx_terminal * x - &self.d_terminal
    }

    fn terminal_constraint_jacobian(&self, _x: &Vec64) -> Mat {
        self.cx_terminal.clone()
    }
}

/// Diagonal least-squares tracking cost `0.5 |x - x_ref(t)|_Q^2 + 0.5 |u|_R^2`.
#[derive(Debug, Clone)]
struct Tracking {
    q: Vec64,
    r: Vec64,
    qn: Vec64,
}

impl Tracking {
    fn stage(&self, x: &Vec64, xr: &Vec64, u: &Vec64) -> f64 {
        let dx = x - xr;
        0.5 * (dx.component_mul(&dx).dot(&self.q) + u.component_mul(u).dot(&self.r))
    }

    fn stage_gradient(&self, x: &Vec64, xr: &Vec64, u: &Vec64) -> (Vec64, Vec64) {
        ((x - xr).component_mul(&self.q), u.component_mul(&self.r))
    }

    fn stage_hessian(&self) -> StageHessian {
        StageHessian {
            q: Mat::from_diagonal(&self.q),
            s: Mat::zeros(self.r.len(), self.q.len()),
            r: Mat::from_diagonal(&self.r),
        }
    }

    fn terminal(&self, x: &Vec64, xr: &Vec64) -> f64 {
        let dx = x - xr;
        0.5 * dx.component_mul(&dx).dot(&self.qn)
    }
}

/// Parameters shared by the registry constructors.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemParams {
    pub name: String,
    /// Horizon; `None` uses the problem default.
    pub horizon: Option<usize>,
    pub sigma: f64,
    pub gamma: f64,
    /// Number of masses for `mass_chain` when the name carries no `(M)`.
    pub masses: usize,
    /// Replace the double integrator position bound by `p + v^2 / (2 a_max) <= p_max`.
    pub braking: bool,
    /// `P0 = p0_scale * W_0` (initial state uncertainty).
    pub p0_scale: f64,
    /// Scale applied to every disturbance shape.
    pub noise_scale: f64,
    /// Stage offset of time-varying references (closed loop).
    #[serde(skip)]
    pub time_offset: usize,
    #[serde(skip)]
    pub initial_state: Option<Vec<f64>>,
}

impl Default for ProblemParams {
    fn default() -> Self {
        ProblemParams {
            name: "double_integrator".into(),
            horizon: None,
            sigma: 1.0,
            gamma: 1.0,
            masses: 3,
            braking: false,
            p0_scale: 0.0,
            noise_scale: 1.0,
            time_offset: 0,
            initial_state: None,
        }
    }
}

impl ProblemParams {
    pub fn named(name: &str) -> Self {
        ProblemParams {
            name: name.into(),
            ..Default::default()
        }
    }
}

pub struct ProblemInfo {
    pub name: &'static str,
    pub description: &'static str,
}

pub fn list_problems() -> Vec<ProblemInfo> {
    vec![
        ProblemInfo {
            name: "double_integrator",
            description: "linear double integrator, position/velocity/acceleration bounds (braking=true: nonlinear stopping-distance bound)",
        },
        ProblemInfo {
            name: "pendulum",
            description: "damped pendulum pushed against an angle bound",
        },
        ProblemInfo {
            name: "diff_drive",
            description: "unicycle with accelerations tracking a line past a circular obstacle",
        },
        ProblemInfo {
            name: "mass_chain(M)",
            description: "M masses on cubic springs, end force actuated, wall bound on positions (nx = 2M)",
        },
    ]
}

/// Splits `mass_chain(4)` into `("mass_chain", Some(4))`.
fn parse_name(name: &str) -> Result<(String, Option<usize>)> {
    let name = name.trim();
    match name.find('(') {
        None => Ok((name.to_string(), None)),
        Some(open) => {
            let inner = name[open + 1..]
                .strip_suffix(')')
                .ok_or_else(|| Error::UnknownProblem(name.to_string()))?;
            let m = inner
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::UnknownProblem(name.to_string()))?;
            Ok((name[..open].to_string(), Some(m)))
        }
    }
}

pub fn build_problem(params: &ProblemParams) -> Result<TubeOcp> {
    let (base, arg) = parse_name(&params.name)?;
    let ocp = match (base.as_str(), arg) {
        ("double_integrator", None) => double_integrator(params)?,
        ("pendulum", None) => pendulum(params)?,
        ("diff_drive", None) => diff_drive(params)?,
        ("mass_chain", m) => mass_chain(params, m.unwrap_or(params.masses))?,
        _ => return Err(Error::UnknownProblem(params.name.clone())),
    };
    ocp.with_sigma(params.sigma)?.with_gamma(params.gamma)
}

fn finish(params: &ProblemParams, model: Arc<dyn Model>, horizon: usize, x0: Vec64, w: Mat) -> Result<TubeOcp> {
    let n = params.horizon.unwrap_or(horizon);
    let x0 = match &params.initial_state {
        Some(v) => Vec64::from_column_slice(v),
        None => x0,
    };
    let g = model.dims();
    let w = w * params.noise_scale;
    // P0 lives in state space; reuse the disturbance shape when G is square.
    let p0 = if g.nw == g.nx {
        &w * params.p0_scale
    } else {
        Mat::identity(g.nx, g.nx) * (params.p0_scale * w.amax())
    };
    TubeOcp::new(model, n, x0, p0, vec![w; n])
}

// ---------------------------------------------------------------------------
// double integrator

const DI_DT: f64 = 0.1;
const DI_P_MAX: f64 = 1.0;
const DI_V_MAX: f64 = 1.0;
const DI_A_MAX: f64 = 2.0;

/// Linear double integrator. `W = diag(0.005^2, 0.02^2)` on `(p, v)`,
/// reference `p = 1.2` beyond the bound `p <= 1`.
pub fn double_integrator(params: &ProblemParams) -> Result<TubeOcp> {
    let model: Arc<dyn Model> = if params.braking {
        Arc::new(BrakingIntegrator)
    } else {
        Arc::new(double_integrator_linear())
    };
    let w = Mat::from_diagonal(&Vec64::from_vec(vec![0.005f64.powi(2), 0.02f64.powi(2)]));
    finish(params, model, 20, Vec64::zeros(2), w)
}

pub fn double_integrator_linear() -> LinearModel {
    let dt = DI_DT;
    let a = Mat::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
    let b = Mat::from_row_slice(2, 1, &[0.5 * dt * dt, dt]);
    let (cx, cu, d) = di_linear_constraints();
    LinearModel::new(a, b, Mat::identity(2, 2))
        .with_cost(
            Mat::from_diagonal(&Vec64::from_vec(vec![1.0, 0.1])),
            Mat::from_element(1, 1, 0.01),
            Mat::from_diagonal(&Vec64::from_vec(vec![10.0, 1.0])),
        )
        .with_reference(Vec64::from_vec(vec![1.2, 0.0]), Vec64::zeros(1))
        .with_stage_constraints(cx, cu, d)
        .with_terminal_constraints(
            Mat::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, -1.0]),
            Vec64::from_vec(vec![DI_P_MAX, DI_V_MAX, DI_V_MAX]),
        )
}

fn di_linear_constraints() -> (Mat, Mat, Vec64) {
    // p <= p_max, |v| <= v_max, |a| <= a_max
    let cx = Mat::from_row_slice(5, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
    let cu = Mat::from_row_slice(5, 1, &[0.0, 0.0, 0.0, 1.0, -1.0]);
    let d = Vec64::from_vec(vec![DI_P_MAX, DI_V_MAX, DI_V_MAX, DI_A_MAX, DI_A_MAX]);
    (cx, cu, d)
}

/// Double integrator with the stopping-distance bound `p + v^2 / (2 a_max) <= p_max`.
struct BrakingIntegrator;

impl BrakingIntegrator {
    fn lin() -> LinearModel {
        double_integrator_linear()
    }

    fn state_constraints(x: &Vec64) -> Vec64 {
        Vec64::from_vec(vec![
            x[0] + x[1] * x[1] / (2.0 * DI_A_MAX) - DI_P_MAX,
            x[1] - DI_V_MAX,
            -x[1] - DI_V_MAX,
        ])
    }

    fn state_jacobian(x: &Vec64) -> Mat {
        Mat::from_row_slice(3, 2, &[1.0, x[1] / DI_A_MAX, 0.0, 1.0, 0.0, -1.0])
    }
}

impl Model for BrakingIntegrator {
    fn dims(&self) -> Dims {
        Dims { nx: 2, nu: 1, nw: 2 }
    }
    fn dynamics(&self, k: usize, x: &Vec64, u: &Vec64, w: &Vec64) -> Vec64 {
        Self::lin().dynamics(k, x, u, w)
    }
    fn dynamics_jacobians(&self, k: usize, x: &Vec64, u: &Vec64, w: &Vec64) -> DynamicsJacobians {
        Self::lin().dynamics_jacobians(k, x, u, w)
    }
    fn stage_cost(&self, k: usize, x: &Vec64, u: &Vec64) -> f64 {
        Self::lin().stage_cost(k, x, u)
    }
    fn stage_cost_gradient(&self, k: usize, x: &Vec64, u: &Vec64) -> (Vec64, Vec64) {
        Self::lin().stage_cost_gradient(k, x, u)
    }
    fn stage_cost_hessian(&self, k: usize, x: &Vec64, u: &Vec64) -> StageHessian {
        Self::lin().stage_cost_hessian(k, x, u)
    }
    fn terminal_cost(&self, x: &Vec64) -> f64 {
        Self::lin().terminal_cost(x)
    }
    fn terminal_cost_gradient(&self, x: &Vec64) -> Vec64 {
        Self::lin().terminal_cost_gradient(x)
    }
    fn terminal_cost_hessian(&self, x: &Vec64) -> Mat {
        Self::lin().terminal_cost_hessian(x)
    }
    fn stage_constraints(&self, _k: usize, x: &Vec64, u: &Vec64) -> Vec64 {
        let s = Self::state_constraints(x);
        Vec64::from_vec(vec![s[0], s[1], s[2], u[0] - DI_A_MAX, -u[0] - DI_A_MAX])
    }
    fn stage_constraint_jacobians(&self, _k: usize, x: &Vec64, _u: &Vec64) -> (Mat, Mat) {
        let mut hx = Mat::zeros(5, 2);
        hx.view_mut((0, 0), (3, 2)).copy_from(&Self::state_jacobian(x));
        let hu = Mat::from_row_slice(5, 1, &[0.0, 0.0, 0.0, 1.0, -1.0]);
        (hx, hu)
    }
    fn terminal_constraints(&self, x: &Vec64) -> Vec64 {
        Self::state_constraints(x)
    }
    fn terminal_constraint_jacobian(&self, x: &Vec64) -> Mat {
        Self::state_jacobian(x)
    }
}

// ---------------------------------------------------------------------------
// pendulum

#[derive(Debug, Clone)]
struct Pendulum {
    dt: f64,
    g_over_l: f64,
    damping: f64,
    theta_max: f64,
    omega_max: f64,
    tau_max: f64,
    cost: Tracking,
    x_ref: Vec64,
}

impl Model for Pendulum {
    fn dims(&self) -> Dims {
        Dims { nx: 2, nu: 1, nw: 2 }
    }
    fn dynamics(&self, _k: usize, x: &Vec64, u: &Vec64, w: &Vec64) -> Vec64 {
        let acc = -self.g_over_l * x[0].sin() - self.damping * x[1] + u[0];
        Vec64::from_vec(vec![x[0] + self.dt * x[1] + w[0], x[1] + self.dt * acc + w[1]])
    }
    fn dynamics_jacobians(&self, _k: usize, x: &Vec64, _u: &Vec64, _w: &Vec64) -> DynamicsJacobians {
        let dt = self.dt;
        DynamicsJacobians {
            a: Mat::from_row_slice(2, 2, &[1.0, dt, -dt * self.g_over_l * x[0].cos(), 1.0 - dt * self.damping]),
            b: Mat::from_row_slice(2, 1, &[0.0, dt]),
            gamma: Mat::identity(2, 2),
        }
    }
    fn stage_cost(&self, _k: usize, x: &Vec64, u: &Vec64) -> f64 {
        self.cost.stage(x, &self.x_ref, u)
    }
    fn stage_cost_gradient(&self, _k: usize, x: &Vec64, u: &Vec64) -> (Vec64, Vec64) {
        self.cost.stage_gradient(x, &self.x_ref, u)
    }
    fn stage_cost_hessian(&self, _k: usize, _x: &Vec64, _u: &Vec64) -> StageHessian {
        self.cost.stage_hessian()
    }
    fn terminal_cost(&self, x: &Vec64) -> f64 {
        self.cost.terminal(x, &self.x_ref)
    }
    fn terminal_cost_gradient(&self, x: &Vec64) -> Vec64 {
        (x - &self.x_ref).component_mul(&self.cost.qn)
    }
    fn terminal_cost_hessian(&self, _x: &Vec64) -> Mat {
        Mat::from_diagonal(&self.cost.qn)
    }
    fn stage_constraints(&self, _k: usize, x: &Vec64, u: &Vec64) -> Vec64 {
        Vec64::from_vec(vec![
            x[0] - self.theta_max,
            x[1] - self.omega_max,
            -x[1] - self.omega_max,
            u[0] - self.tau_max,
            -u[0] - self.tau_max,
        ])
    }
    fn stage_constraint_jacobians(&self, _k: usize, _x: &Vec64, _u: &Vec64) -> (Mat, Mat) {
        (
            Mat::from_row_slice(5, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0]),
            Mat::from_row_slice(5, 1, &[0.0, 0.0, 0.0, 1.0, -1.0]),
        )
    }
    fn terminal_constraints(&self, x: &Vec64) -> Vec64 {
        Vec64::from_element(1, x[0] - self.theta_max)
    }
    fn terminal_constraint_jacobian(&self, _x: &Vec64) -> Mat {
        Mat::from_row_slice(1, 2, &[1.0, 0.0])
    }
}

/// Pendulum `theta'' = -(g/l) sin(theta) - c theta' + tau`, explicit Euler,
/// driven toward `theta = 1.0` against `theta <= 0.8`.
/// `W = diag(1e-3^2, 1e-2^2)` on `(theta, omega)`.
pub fn pendulum(params: &ProblemParams) -> Result<TubeOcp> {
    let model = Pendulum {
        dt: 0.05,
        g_over_l: 9.81,
        damping: 0.5,
        theta_max: 0.8,
        omega_max: 3.0,
        tau_max: 8.0,
        cost: Tracking {
            q: Vec64::from_vec(vec![10.0, 0.1]),
            r: Vec64::from_element(1, 0.01),
            qn: Vec64::from_vec(vec![50.0, 1.0]),
        },
        x_ref: Vec64::from_vec(vec![1.0, 0.0]),
    };
    let w = Mat::from_diagonal(&Vec64::from_vec(vec![1e-6, 1e-4]));
    finish(params, Arc::new(model), 30, Vec64::zeros(2), w)
}

// ---------------------------------------------------------------------------
// differential drive

#[derive(Debug, Clone)]
struct DiffDrive {
    dt: f64,
    v_ref: f64,
    horizon: usize,
    time_offset: usize,
    obstacles: Vec<(f64, f64, f64)>,
    v_min: f64,
    v_max: f64,
    omega_max: f64,
    a_max: f64,
    alpha_max: f64,
    cost: Tracking,
}

impl DiffDrive {
    fn reference(&self, k: usize) -> Vec64 {
        let t = (k + self.time_offset) as f64 * self.dt;
        Vec64::from_vec(vec![self.v_ref * t, 0.0, 0.0, self.v_ref, 0.0])
    }

    fn state_constraints(&self, x: &Vec64) -> Vec<f64> {
        let mut h: Vec<f64> = self
            .obstacles
            .iter()
            .map(|&(ox, oy, r)| r * r - (x[0] - ox).powi(2) - (x[1] - oy).powi(2))
            .collect();
        h.extend([x[3] - self.v_max, self.v_min - x[3], x[4] - self.omega_max, -x[4] - self.omega_max]);
        h
    }

    fn state_jacobian(&self, x: &Vec64) -> Mat {
        let no = self.obstacles.len();
        let mut j = Mat::zeros(no + 4, 5);
        for (i, &(ox, oy, _)) in self.obstacles.iter().enumerate() {
            j[(i, 0)] = -2.0 * (x[0] - ox);
            j[(i, 1)] = -2.0 * (x[1] - oy);
        }
        j[(no, 3)] = 1.0;
        j[(no + 1, 3)] = -1.0;
        j[(no + 2, 4)] = 1.0;
        j[(no + 3, 4)] = -1.0;
        j
    }
}

impl Model for DiffDrive {
    fn dims(&self) -> Dims {
        Dims { nx: 5, nu: 2, nw: 5 }
    }
    fn dynamics(&self, _k: usize, x: &Vec64, u: &Vec64, w: &Vec64) -> Vec64 {
        let dt = self.dt;
        Vec64::from_vec(vec![
            x[0] + dt * x[3] * x[2].cos() + w[0],
            x[1] + dt * x[3] * x[2].sin() + w[1],
            x[2] + dt * x[4] + w[2],
            x[3] + dt * u[0] + w[3],
            x[4] + dt * u[1] + w[4],
        ])
    }
    fn dynamics_jacobians(&self, _k: usize, x: &Vec64, _u: &Vec64, _w: &Vec64) -> DynamicsJacobians {
        let dt = self.dt;
        let (s, c) = x[2].sin_cos();
        let mut a = Mat::identity(5, 5);
        a[(0, 2)] = -dt * x[3] * s;
        a[(0, 3)] = dt * c;
        a[(1, 2)] = dt * x[3] * c;
        a[(1, 3)] = dt * s;
        a[(2, 4)] = dt;
        let mut b = Mat::zeros(5, 2);
        b[(3, 0)] = dt;
        b[(4, 1)] = dt;
        DynamicsJacobians {
            a,
            b,
            gamma: Mat::identity(5, 5),
        }
    }
    fn stage_cost(&self, k: usize, x: &Vec64, u: &Vec64) -> f64 {
        self.cost.stage(x, &self.reference(k), u)
    }
    fn stage_cost_gradient(&self, k: usize, x: &Vec64, u: &Vec64) -> (Vec64, Vec64) {
        self.cost.stage_gradient(x, &self.reference(k), u)
    }
    fn stage_cost_hessian(&self, _k: usize, _x: &Vec64, _u: &Vec64) -> StageHessian {
        self.cost.stage_hessian()
    }
    fn terminal_cost(&self, x: &Vec64) -> f64 {
        self.cost.terminal(x, &self.reference(self.horizon))
    }
    fn terminal_cost_gradient(&self, x: &Vec64) -> Vec64 {
        (x - self.reference(self.horizon)).component_mul(&self.cost.qn)
    }
    fn terminal_cost_hessian(&self, _x: &Vec64) -> Mat {
        Mat::from_diagonal(&self.cost.qn)
    }
    fn stage_constraints(&self, _k: usize, x: &Vec64, u: &Vec64) -> Vec64 {
        let mut h = self.state_constraints(x);
        h.extend([u[0] - self.a_max, -u[0] - self.a_max, u[1] - self.alpha_max, -u[1] - self.alpha_max]);
        Vec64::from_vec(h)
    }
    fn stage_constraint_jacobians(&self, _k: usize, x: &Vec64, _u: &Vec64) -> (Mat, Mat) {
        let sx = self.state_jacobian(x);
        let ns = sx.nrows();
        let mut hx = Mat::zeros(ns + 4, 5);
        hx.view_mut((0, 0), (ns, 5)).copy_from(&sx);
        let mut hu = Mat::zeros(ns + 4, 2);
        hu[(ns, 0)] = 1.0;
        hu[(ns + 1, 0)] = -1.0;
        hu[(ns + 2, 1)] = 1.0;
        hu[(ns + 3, 1)] = -1.0;
        (hx, hu)
    }
    fn terminal_constraints(&self, x: &Vec64) -> Vec64 {
        Vec64::from_vec(self.state_constraints(x))
    }
    fn terminal_constraint_jacobian(&self, x: &Vec64) -> Mat {
        self.state_jacobian(x)
    }
}

/// Unicycle with speed and turn-rate states tracking `(0.5 t, 0)` past an
/// obstacle of radius 0.25 at `(0.8, 0.05)`.
/// `W = diag(1e-3^2, 1e-3^2, 2e-3^2, 1e-2^2, 2e-2^2)`.
pub fn diff_drive(params: &ProblemParams) -> Result<TubeOcp> {
    let n = params.horizon.unwrap_or(20);
    let model = DiffDrive {
        dt: 0.1,
        v_ref: 0.5,
        horizon: n,
        time_offset: params.time_offset,
        obstacles: vec![(0.8, 0.05, 0.25)],
        v_min: -0.2,
        v_max: 1.0,
        omega_max: 1.5,
        a_max: 1.0,
        alpha_max: 2.0,
        cost: Tracking {
            q: Vec64::from_vec(vec![1.0, 1.0, 0.1, 0.1, 0.01]),
            r: Vec64::from_vec(vec![0.1, 0.1]),
            qn: Vec64::from_vec(vec![5.0, 5.0, 0.5, 0.5, 0.05]),
        },
    };
    let x0 = Vec64::from_vec(vec![0.0, 0.0, 0.0, 0.5, 0.0]);
    let w = Mat::from_diagonal(&Vec64::from_vec(vec![1e-6, 1e-6, 4e-6, 1e-4, 4e-4]));
    finish(params, Arc::new(model), n, x0, w)
}

// ---------------------------------------------------------------------------
// mass chain

#[derive(Debug, Clone)]
struct MassChain {
    m: usize,
    dt: f64,
    stiffness: f64,
    cubic: f64,
    damping: f64,
    wall: f64,
    u_max: f64,
    cost: Tracking,
    x_ref: Vec64,
}

impl MassChain {
    fn spring(&self, d: f64) -> f64 {
        self.stiffness * d + self.cubic * d * d * d
    }

    fn spring_slope(&self, d: f64) -> f64 {
        self.stiffness + 3.0 * self.cubic * d * d
    }

    /// Stretch of the spring left of mass `i` (the first is tied to the wall at 0).
    fn stretch(&self, q: &[f64], i: usize) -> f64 {
        if i == 0 {
            q[0]
        } else {
            q[i] - q[i - 1]
        }
    }

    fn acceleration(&self, x: &Vec64, u: f64) -> Vec64 {
        let m = self.m;
        let q = &x.as_slice()[..m];
        Vec64::from_fn(m, |i, _| {
            let left = self.spring(self.stretch(q, i));
            let right = if i + 1 < m { self.spring(self.stretch(q, i + 1)) } else { 0.0 };
            let force = if i + 1 == m { u } else { 0.0 };
            right - left - self.damping * x[m + i] + force
        })
    }
}

impl Model for MassChain {
    fn dims(&self) -> Dims {
        Dims {
            nx: 2 * self.m,
            nu: 1,
            nw: self.m,
        }
    }

    // semi-implicit Euler; w is a velocity impulse
    fn dynamics(&self, _k: usize, x: &Vec64, u: &Vec64, w: &Vec64) -> Vec64 {
        let m = self.m;
        let acc = self.acceleration(x, u[0]);
        let mut next = Vec64::zeros(2 * m);
        for i in 0..m {
            let v = x[m + i] + self.dt * acc[i] + w[i];
            next[m + i] = v;
            next[i] = x[i] + self.dt * v;
        }
        next
    }

    fn dynamics_jacobians(&self, _k: usize, x: &Vec64, _u: &Vec64, _w: &Vec64) -> DynamicsJacobians {
        let m = self.m;
        let dt = self.dt;
        let q = &x.as_slice()[..m];
        // d acc / d q, tridiagonal
        let mut jq = Mat::zeros(m, m);
        for i in 0..m {
            let kl = self.spring_slope(self.stretch(q, i));
            jq[(i, i)] -= kl;
            if i > 0 {
                jq[(i, i - 1)] += kl;
            }
            if i + 1 < m {
                let kr = self.spring_slope(self.stretch(q, i + 1));
                jq[(i, i + 1)] += kr;
                jq[(i, i)] -= kr;
            }
        }
        let dv_dq = &jq * dt;
        let dv_dv = Mat::identity(m, m) * (1.0 - dt * self.damping);
        let mut a = Mat::zeros(2 * m, 2 * m);
        a.view_mut((m, 0), (m, m)).copy_from(&dv_dq);
        a.view_mut((m, m), (m, m)).copy_from(&dv_dv);
        a.view_mut((0, 0), (m, m)).copy_from(&(Mat::identity(m, m) + &dv_dq * dt));
        a.view_mut((0, m), (m, m)).copy_from(&(&dv_dv * dt));
        let mut b = Mat::zeros(2 * m, 1);
        b[(2 * m - 1, 0)] = dt;
        b[(m - 1, 0)] = dt * dt;
        let mut gamma = Mat::zeros(2 * m, m);
        for i in 0..m {
            gamma[(i, i)] = dt;
            gamma[(m + i, i)] = 1.0;
        }
        DynamicsJacobians { a, b, gamma }
    }

    fn stage_cost(&self, _k: usize, x: &Vec64, u: &Vec64) -> f64 {
        self.cost.stage(x, &self.x_ref, u)
    }
    fn stage_cost_gradient(&self, _k: usize, x: &Vec64, u: &Vec64) -> (Vec64, Vec64) {
        self.cost.stage_gradient(x, &self.x_ref, u)
    }
    fn stage_cost_hessian(&self, _k: usize, _x: &Vec64, _u: &Vec64) -> StageHessian {
        self.cost.stage_hessian()
    }
    fn terminal_cost(&self, x: &Vec64) -> f64 {
        self.cost.terminal(x, &self.x_ref)
    }
    fn terminal_cost_gradient(&self, x: &Vec64) -> Vec64 {
        (x - &self.x_ref).component_mul(&self.cost.qn)
    }
    fn terminal_cost_hessian(&self, _x: &Vec64) -> Mat {
        Mat::from_diagonal(&self.cost.qn)
    }

    fn stage_constraints(&self, _k: usize, x: &Vec64, u: &Vec64) -> Vec64 {
        let m = self.m;
        let mut h = Vec64::zeros(m + 2);
        for i in 0..m {
            h[i] = x[i] - self.wall;
        }
        h[m] = u[0] - self.u_max;
        h[m + 1] = -u[0] - self.u_max;
        h
    }

    fn stage_constraint_jacobians(&self, _k: usize, _x: &Vec64, _u: &Vec64) -> (Mat, Mat) {
        let m = self.m;
        let mut hx = Mat::zeros(m + 2, 2 * m);
        for i in 0..m {
            hx[(i, i)] = 1.0;
        }
        let mut hu = Mat::zeros(m + 2, 1);
        hu[(m, 0)] = 1.0;
        hu[(m + 1, 0)] = -1.0;
        (hx, hu)
    }

    fn terminal_constraints(&self, x: &Vec64) -> Vec64 {
        Vec64::from_iterator(self.m, (0..self.m).map(|i| x[i] - self.wall))
    }

    fn terminal_constraint_jacobian(&self, _x: &Vec64) -> Mat {
        Mat::identity(self.m, 2 * self.m)
    }
}

/// `m` unit masses on springs `F(d) = 10 d + d^3` with the last one pulled
/// toward the uniform stretch `q_i = i / m`, bounded by `q_i <= 0.8`.
/// Velocity impulses with `W = 1e-2^2 I`.
pub fn mass_chain(params: &ProblemParams, m: usize) -> Result<TubeOcp> {
    if m == 0 {
        return Err(Error::InvalidParameter("mass_chain needs at least one mass".into()));
    }
    let mut x_ref = Vec64::zeros(2 * m);
    for i in 0..m {
        x_ref[i] = (i + 1) as f64 / m as f64;
    }
    let mut q = Vec64::from_element(2 * m, 0.1);
    q.rows_mut(0, m).fill(1.0);
    let model = MassChain {
        m,
        dt: 0.05,
        stiffness: 10.0,
        cubic: 1.0,
        damping: 0.5,
        wall: 0.8,
        u_max: 20.0,
        cost: Tracking {
            qn: &q * 5.0,
            q,
            r: Vec64::from_element(1, 0.01),
        },
        x_ref,
    };
    let w = Mat::identity(m, m) * 1e-4;
    finish(params, Arc::new(model), 20, Vec64::zeros(2 * m), w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::central_jacobian;

    fn fd_check(ocp: &TubeOcp, x: &Vec64, u: &Vec64) {
        let m = ocp.model();
        let d = ocp.dims();
        let w = Vec64::zeros(d.nw);
        let jac = m.dynamics_jacobians(0, x, u, &w);
        let a = central_jacobian(|x| m.dynamics(0, x, u, &w), x, 1e-6);
        let b = central_jacobian(|u| m.dynamics(0, x, u, &w), u, 1e-6);
        let g = central_jacobian(|w| m.dynamics(0, x, u, w), &w, 1e-6);
        assert!((jac.a - a).amax() < 1e-6);
        assert!((jac.b - b).amax() < 1e-6);
        assert!((jac.gamma - g).amax() < 1e-6);
        let (hx, hu) = m.stage_constraint_jacobians(0, x, u);
        let fx = central_jacobian(|x| m.stage_constraints(0, x, u), x, 1e-6);
        let fu = central_jacobian(|u| m.stage_constraints(0, x, u), u, 1e-6);
        assert!((hx - fx).amax() < 1e-6);
        assert!((hu - fu).amax() < 1e-6);
        let tj = central_jacobian(|x| m.terminal_constraints(x), x, 1e-6);
        assert!((m.terminal_constraint_jacobian(x) - tj).amax() < 1e-6);
        let (gx, gu) = m.stage_cost_gradient(0, x, u);
        let cx = central_jacobian(|x| Vec64::from_element(1, m.stage_cost(0, x, u)), x, 1e-6);
        let cu = central_jacobian(|u| Vec64::from_element(1, m.stage_cost(0, x, u)), u, 1e-6);
        assert!((gx - cx.row(0).transpose()).amax() < 1e-5);
        assert!((gu - cu.row(0).transpose()).amax() < 1e-5);
    }

    fn probe(nx: usize, nu: usize) -> (Vec64, Vec64) {
        (
            Vec64::from_fn(nx, |i, _| 0.3 + 0.17 * i as f64),
            Vec64::from_fn(nu, |i, _| -0.4 + 0.9 * i as f64),
        )
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        for name in ["double_integrator", "pendulum", "diff_drive", "mass_chain(3)"] {
            let ocp = build_problem(&ProblemParams::named(name)).unwrap();
            let (x, u) = probe(ocp.dims().nx, ocp.dims().nu);
            fd_check(&ocp, &x, &u);
        }
        let braking = ProblemParams {
            braking: true,
            ..Default::default()
        };
        let ocp = build_problem(&braking).unwrap();
        let (x, u) = probe(2, 1);
        fd_check(&ocp, &x, &u);
    }

    #[test]
    fn mass_chain_dimension_follows_the_name() {
        let ocp = build_problem(&ProblemParams::named("mass_chain(4)")).unwrap();
        assert_eq!(ocp.dims().nx, 8);
        assert_eq!(ocp.num_constraints(0), 6);
        assert_eq!(ocp.num_constraints(ocp.horizon()), 4);
    }

    #[test]
    fn unknown_names_are_rejected() {
        for bad in ["rocket", "mass_chain(x)", "mass_chain(3", "pendulum(2)"] {
            assert!(matches!(
                build_problem(&ProblemParams::named(bad)),
                Err(Error::UnknownProblem(_))
            ));
        }
    }

    #[test]
    fn mass_chain_rest_is_an_equilibrium() {
        let ocp = build_problem(&ProblemParams::named("mass_chain(5)")).unwrap();
        let x = Vec64::zeros(10);
        let next = ocp.model().dynamics(0, &x, &Vec64::zeros(1), &Vec64::zeros(5));
        assert_eq!(next, x);
    }
}
