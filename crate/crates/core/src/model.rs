//! Uncertain OCP data, nominal rollouts and first-order sensitivities.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linalg::{check_psd, is_finite, vec_is_finite, Mat, Vec64};

/// Relative step of the central-difference fallback, scaled by `1 + ||point||`.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub nx: usize,
    pub nu: usize,
    pub nw: usize,
}

#[derive(Debug, Clone)]
pub struct DynamicsJacobians {
    /// `df/dx`, `nx x nx`.
    pub a: Mat,
    /// `df/du`, `nx x nu`.
    pub b: Mat,
    /// `df/dw`, `nx x nw`.
    pub gamma: Mat,
}

/// Second-order cost information for one stage, blocks of `[[Q, S'], [S, R]]`.
#[derive(Debug, Clone)]
pub struct StageHessian {
    pub q: Mat,
    pub s: Mat,
    pub r: Mat,
}

/// Central differences of `f` at `point`; the step is `rel_step * (1 + ||point||)`.
pub(crate) fn central_jacobian<F>(f: F, point: &Vec64, rel_step: f64) -> Mat
where
    F: Fn(&Vec64) -> Vec64,
{
    let h = rel_step * (1.0 + point.norm());
    let f0 = f(point);
    let mut jac = Mat::zeros(f0.len(), point.len());
    let mut p = point.clone();
    for j in 0..point.len() {
        let orig = p[j];
        p[j] = orig + h;
        let fp = f(&p);
        p[j] = orig - h;
        let fm = f(&p);
        p[j] = orig;
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    jac
}

fn concat(a: &Vec64, b: &Vec64) -> Vec64 {
    let mut z = Vec64::zeros(a.len() + b.len());
    z.rows_mut(0, a.len()).copy_from(a);
    z.rows_mut(a.len(), b.len()).copy_from(b);
    z
}

/// A discrete-time uncertain optimal control model.
///
/// Derivative methods have central-difference defaults so prototypes only need
/// the value callbacks; benchmark models override them with analytic versions.
/// Cost Hessians must be positive semidefinite (exact or Gauss-Newton).
pub trait Model: Send + Sync {
    fn dims(&self) -> Dims;

    fn dynamics(&self, k: usize, x: &Vec64, u: &Vec64, w: &Vec64) -> Vec64;

    fn dynamics_jacobians(&self, k: usize, x: &Vec64, u: &Vec64, w: &Vec64) -> DynamicsJacobians {
        let Dims { nx, nu, nw } = self.dims();
        let z = concat(&concat(x, u), w);
        let jac = central_jacobian(
            |z| {
                let x = z.rows(0, nx).into_owned();
                let u = z.rows(nx, nu).into_owned();
                let w = z.rows(nx + nu, nw).into_owned();
                self.dynamics(k, &x, &u, &w)
            },
            &z,
            FD_STEP,
        );
        DynamicsJacobians {
            a: jac.columns(0, nx).into_owned(),
            b: jac.columns(nx, nu).into_owned(),
            gamma: jac.columns(nx + nu, nw).into_owned(),
        }
    }

    fn stage_cost(&self, k: usize, x: &Vec64, u: &Vec64) -> f64;

    fn stage_cost_gradient(&self, k: usize, x: &Vec64, u: &Vec64) -> (Vec64, Vec64) {
        let nx = x.len();
        let z = concat(x, u);
        let g = central_jacobian(
            |z| {
                let x = z.rows(0, nx).into_owned();
                let u = z.rows(nx, z.len() - nx).into_owned();
                DVector::from_element(1, self.stage_cost(k, &x, &u))
            },
            &z,
            FD_STEP,
        );
        let g = g.row(0).transpose();
        (g.rows(0, nx).into_owned(), g.rows(nx, u.len()).into_owned())
    }

    fn stage_cost_hessian(&self, k: usize, x: &Vec64, u: &Vec64) -> StageHessian {
        let nx = x.len();
        let nu = u.len();
        let z = concat(x, u);
        let mut h = central_jacobian(
            |z| {
                let x = z.rows(0, nx).into_owned();
                let u = z.rows(nx, nu).into_owned();
                let (gx, gu) = self.stage_cost_gradient(k, &x, &u);
                concat(&gx, &gu)
            },
            &z,
            1e-4,
        );
        crate::linalg::symmetrize(&mut h);
        StageHessian {
            q: h.view((0, 0), (nx, nx)).into_owned(),
            s: h.view((nx, 0), (nu, nx)).into_owned(),
            r: h.view((nx, nx), (nu, nu)).into_owned(),
        }
    }

    fn terminal_cost(&self, x: &Vec64) -> f64;

    fn terminal_cost_gradient(&self, x: &Vec64) -> Vec64 {
        central_jacobian(|x| DVector::from_element(1, self.terminal_cost(x)), x, FD_STEP)
            .row(0)
            .transpose()
    }

    fn terminal_cost_hessian(&self, x: &Vec64) -> Mat {
        let mut h = central_jacobian(|x| self.terminal_cost_gradient(x), x, 1e-4);
        crate::linalg::symmetrize(&mut h);
        h
    }

    /// Stage inequalities `h_k(x, u) <= 0`.
    fn stage_constraints(&self, _k: usize, _x: &Vec64, _u: &Vec64) -> Vec64 {
        Vec64::zeros(0)
    }

    /// Jacobians `(dh/dx, dh/du)`, one row per constraint.
    fn stage_constraint_jacobians(&self, k: usize, x: &Vec64, u: &Vec64) -> (Mat, Mat) {
        let nx = x.len();
        let nu = u.len();
        let z = concat(x, u);
        let jac = central_jacobian(
            |z| {
                let x = z.rows(0, nx).into_owned();
                let u = z.rows(nx, nu).into_owned();
                self.stage_constraints(k, &x, &u)
            },
            &z,
            FD_STEP,
        );
        (jac.columns(0, nx).into_owned(), jac.columns(nx, nu).into_owned())
    }

    fn terminal_constraints(&self, _x: &Vec64) -> Vec64 {
        Vec64::zeros(0)
    }

    fn terminal_constraint_jacobian(&self, x: &Vec64) -> Mat {
        central_jacobian(|x| self.terminal_constraints(x), x, FD_STEP)
    }
}

/// Full tube OCP definition. Immutable once built; clones share the model.
#[derive(Clone)]
pub struct TubeOcp {
    model: Arc<dyn Model>,
    horizon: usize,
    dims: Dims,
    x0: Vec64,
    p0: Mat,
    w: Vec<Mat>,
    sigma: f64,
    gamma: f64,
    nh: Vec<usize>,
    nh_terminal: usize,
}

impl fmt::Debug for TubeOcp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TubeOcp")
            .field("horizon", &self.horizon)
            .field("dims", &self.dims)
            .field("sigma", &self.sigma)
            .field("gamma", &self.gamma)
            .field("nh", &self.nh)
            .field("nh_terminal", &self.nh_terminal)
            .finish()
    }
}

impl TubeOcp {
    /// Builds and validates the problem. Every callback is probed at zero
    /// inputs so malformed models fail here rather than mid-solve.
    pub fn new(
        model: Arc<dyn Model>,
        horizon: usize,
        x0: Vec64,
        p0: Mat,
        disturbance_shapes: Vec<Mat>,
    ) -> Result<Self> {
        let dims = model.dims();
        if horizon == 0 {
            return Err(Error::InvalidModel("horizon must be positive".into()));
        }
        if dims.nx == 0 || dims.nu == 0 || dims.nw == 0 {
            return Err(Error::InvalidModel("dimensions must be positive".into()));
        }
        expect_dim("initial state", dims.nx, x0.len())?;
        expect_dim("initial ellipsoid rows", dims.nx, p0.nrows())?;
        check_psd(&p0, "initial ellipsoid").map_err(Error::InvalidModel)?;
        expect_dim("disturbance shape count", horizon, disturbance_shapes.len())?;
        for (k, wk) in disturbance_shapes.iter().enumerate() {
            expect_dim(&format!("disturbance shape {k}"), dims.nw, wk.nrows())?;
            check_psd(wk, &format!("disturbance shape {k}")).map_err(Error::InvalidModel)?;
        }

        let zx = Vec64::zeros(dims.nx);
        let zu = Vec64::zeros(dims.nu);
        let zw = Vec64::zeros(dims.nw);
        let mut nh = Vec::with_capacity(horizon);
        for k in 0..horizon {
            expect_dim(&format!("dynamics output at stage {k}"), dims.nx, model.dynamics(k, &zx, &zu, &zw).len())?;
            let jac = model.dynamics_jacobians(k, &zx, &zu, &zw);
            expect_shape(&format!("A at stage {k}"), (dims.nx, dims.nx), &jac.a)?;
            expect_shape(&format!("B at stage {k}"), (dims.nx, dims.nu), &jac.b)?;
            expect_shape(&format!("Gamma at stage {k}"), (dims.nx, dims.nw), &jac.gamma)?;
            let (gx, gu) = model.stage_cost_gradient(k, &zx, &zu);
            expect_dim(&format!("cost x-gradient at stage {k}"), dims.nx, gx.len())?;
            expect_dim(&format!("cost u-gradient at stage {k}"), dims.nu, gu.len())?;
            let hess = model.stage_cost_hessian(k, &zx, &zu);
            expect_shape(&format!("cost Hessian Q at stage {k}"), (dims.nx, dims.nx), &hess.q)?;
            expect_shape(&format!("cost Hessian S at stage {k}"), (dims.nu, dims.nx), &hess.s)?;
            expect_shape(&format!("cost Hessian R at stage {k}"), (dims.nu, dims.nu), &hess.r)?;
            let h = model.stage_constraints(k, &zx, &zu);
            let (hx, hu) = model.stage_constraint_jacobians(k, &zx, &zu);
            expect_shape(&format!("constraint x-Jacobian at stage {k}"), (h.len(), dims.nx), &hx)?;
            expect_shape(&format!("constraint u-Jacobian at stage {k}"), (h.len(), dims.nu), &hu)?;
            nh.push(h.len());
        }
        expect_dim("terminal cost gradient", dims.nx, model.terminal_cost_gradient(&zx).len())?;
        expect_shape("terminal cost Hessian", (dims.nx, dims.nx), &model.terminal_cost_hessian(&zx))?;
        let hn = model.terminal_constraints(&zx);
        expect_shape("terminal constraint Jacobian", (hn.len(), dims.nx), &model.terminal_constraint_jacobian(&zx))?;

        Ok(TubeOcp {
            model,
            horizon,
            dims,
            x0,
            p0,
            w: disturbance_shapes,
            sigma: 1.0,
            gamma: 1.0,
            nh,
            nh_terminal: hn.len(),
        })
    }

    /// Uncertainty level; scales `P0` and every `W_k` by `sigma^2`. Zero disables the tube.
    pub fn with_sigma(mut self, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        self.sigma = sigma;
        Ok(self)
    }

    /// Backoff multiplier, e.g. a quantile factor for chance constraints.
    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidParameter(format!("gamma must be finite and > 0, got {gamma}")));
        }
        self.gamma = gamma;
        Ok(self)
    }

    pub fn with_initial_state(mut self, x0: Vec64) -> Result<Self> {
        expect_dim("initial state", self.dims.nx, x0.len())?;
        self.x0 = x0;
        Ok(self)
    }

    pub fn with_initial_ellipsoid(mut self, p0: Mat) -> Result<Self> {
        expect_dim("initial ellipsoid rows", self.dims.nx, p0.nrows())?;
        check_psd(&p0, "initial ellipsoid").map_err(Error::InvalidModel)?;
        self.p0 = p0;
        Ok(self)
    }

    pub fn model(&self) -> &dyn Model {
        self.model.as_ref()
    }

    pub fn model_arc(&self) -> Arc<dyn Model> {
        self.model.clone()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn initial_state(&self) -> &Vec64 {
        &self.x0
    }

    pub fn initial_ellipsoid(&self) -> &Mat {
        &self.p0
    }

    pub fn disturbance_shapes(&self) -> &[Mat] {
        &self.w
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Number of inequalities at stage `k`; `k == N` gives the terminal count.
    pub fn num_constraints(&self, k: usize) -> usize {
        if k == self.horizon {
            self.nh_terminal
        } else {
            self.nh[k]
        }
    }

    pub fn total_constraints(&self) -> usize {
        self.nh.iter().sum::<usize>() + self.nh_terminal
    }

    /// Nominal objective `sum l_k + l_N`.
    pub fn objective(&self, traj: &NominalTrajectory) -> f64 {
        let m = self.model();
        let stage: f64 = (0..self.horizon).map(|k| m.stage_cost(k, &traj.x[k], &traj.u[k])).sum();
        stage + m.terminal_cost(&traj.x[self.horizon])
    }

    /// Constraint values along a trajectory, without backoffs.
    pub fn constraint_values(&self, traj: &NominalTrajectory) -> ConstraintValues {
        let m = self.model();
        ConstraintValues {
            stage: (0..self.horizon).map(|k| m.stage_constraints(k, &traj.x[k], &traj.u[k])).collect(),
            terminal: m.terminal_constraints(&traj.x[self.horizon]),
        }
    }

    pub fn check_trajectory(&self, traj: &NominalTrajectory) -> Result<()> {
        expect_dim("trajectory states", self.horizon + 1, traj.x.len())?;
        expect_dim("trajectory controls", self.horizon, traj.u.len())?;
        for x in &traj.x {
            expect_dim("state", self.dims.nx, x.len())?;
        }
        for u in &traj.u {
            expect_dim("control", self.dims.nu, u.len())?;
        }
        Ok(())
    }
}

pub(crate) fn expect_dim(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            what: what.to_string(),
            expected,
            got,
        });
    }
    Ok(())
}

fn expect_shape(what: &str, shape: (usize, usize), m: &Mat) -> Result<()> {
    expect_dim(&format!("{what} rows"), shape.0, m.nrows())?;
    expect_dim(&format!("{what} cols"), shape.1, m.ncols())
}

/// States `x_0..x_N` and controls `u_0..u_{N-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalTrajectory {
    pub x: Vec<Vec64>,
    pub u: Vec<Vec64>,
}

impl NominalTrajectory {
    pub fn horizon(&self) -> usize {
        self.u.len()
    }

    /// Infinity-norm distance over all states and controls.
    pub fn distance(&self, other: &NominalTrajectory) -> f64 {
        crate::linalg::seq_diff_inf(&self.x, &other.x).max(crate::linalg::seq_diff_inf(&self.u, &other.u))
    }
}

/// Per-stage vectors aligned with the stage constraints, plus the terminal ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintValues {
    pub stage: Vec<Vec64>,
    pub terminal: Vec64,
}

impl ConstraintValues {
    pub fn zeros(ocp: &TubeOcp) -> Self {
        ConstraintValues {
            stage: (0..ocp.horizon()).map(|k| Vec64::zeros(ocp.num_constraints(k))).collect(),
            terminal: Vec64::zeros(ocp.num_constraints(ocp.horizon())),
        }
    }

    pub fn get(&self, k: usize) -> &Vec64 {
        if k == self.stage.len() {
            &self.terminal
        } else {
            &self.stage[k]
        }
    }

    pub fn get_mut(&mut self, k: usize) -> &mut Vec64 {
        if k == self.stage.len() {
            &mut self.terminal
        } else {
            &mut self.stage[k]
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec64> {
        self.stage.iter().chain(std::iter::once(&self.terminal))
    }

    pub fn inf_norm(&self) -> f64 {
        self.iter().map(crate::linalg::inf_norm).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &ConstraintValues) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| crate::linalg::inf_norm(&(a - b)))
            .fold(0.0, f64::max)
    }

    pub fn max_value(&self) -> f64 {
        self.iter().flat_map(|v| v.iter().cloned()).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn dims_match(&self, other: &ConstraintValues) -> bool {
        self.stage.len() == other.stage.len()
            && self.iter().zip(other.iter()).all(|(a, b)| a.len() == b.len())
    }

    pub fn map2(&self, other: &ConstraintValues, f: impl Fn(f64, f64) -> f64) -> ConstraintValues {
        let z = |a: &Vec64, b: &Vec64| Vec64::from_iterator(a.len(), a.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)));
        ConstraintValues {
            stage: self.stage.iter().zip(&other.stage).map(|(a, b)| z(a, b)).collect(),
            terminal: z(&self.terminal, &other.terminal),
        }
    }
}

/// Forward simulation with zero disturbance from the problem's initial state.
pub fn rollout(ocp: &TubeOcp, u: &[Vec64]) -> Result<NominalTrajectory> {
    rollout_from(ocp, ocp.initial_state(), u)
}

pub fn rollout_from(ocp: &TubeOcp, x0: &Vec64, u: &[Vec64]) -> Result<NominalTrajectory> {
    let dims = ocp.dims();
    expect_dim("control sequence", ocp.horizon(), u.len())?;
    let zw = Vec64::zeros(dims.nw);
    let mut x = Vec::with_capacity(u.len() + 1);
    x.push(x0.clone());
    for (k, uk) in u.iter().enumerate() {
        expect_dim("control", dims.nu, uk.len())?;
        let next = ocp.model().dynamics(k, &x[k], uk, &zw);
        if next.len() != dims.nx || !vec_is_finite(&next) {
            return Err(Error::NonFiniteDynamics { stage: k });
        }
        x.push(next);
    }
    Ok(NominalTrajectory { x, u: u.to_vec() })
}

/// Linearization data of one stage along the nominal trajectory.
#[derive(Debug, Clone)]
pub struct StageSensitivity {
    pub a: Mat,
    pub b: Mat,
    pub gamma: Mat,
    /// `sigma^2 Gamma W Gamma'`.
    pub w_eff: Mat,
    /// Constraint values `h_k(x_k, u_k)`.
    pub h: Vec64,
    /// Row `i` is the gradient of `h^i` with respect to `x`.
    pub hx: Mat,
    pub hu: Mat,
}

#[derive(Debug, Clone)]
pub struct SensitivityBundle {
    pub stages: Vec<StageSensitivity>,
    pub terminal_h: Vec64,
    pub terminal_hx: Mat,
}

impl SensitivityBundle {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn nx(&self) -> usize {
        self.terminal_hx.ncols()
    }

    pub fn constraint_values(&self) -> ConstraintValues {
        ConstraintValues {
            stage: self.stages.iter().map(|s| s.h.clone()).collect(),
            terminal: self.terminal_h.clone(),
        }
    }
}

pub fn evaluate_sensitivities(ocp: &TubeOcp, traj: &NominalTrajectory) -> Result<SensitivityBundle> {
    ocp.check_trajectory(traj)?;
    let m = ocp.model();
    let zw = Vec64::zeros(ocp.dims().nw);
    let s2 = ocp.sigma() * ocp.sigma();
    let mut stages = Vec::with_capacity(ocp.horizon());
    for k in 0..ocp.horizon() {
        let (x, u) = (&traj.x[k], &traj.u[k]);
        let jac = m.dynamics_jacobians(k, x, u, &zw);
        for (which, mat) in [("A", &jac.a), ("B", &jac.b), ("Gamma", &jac.gamma)] {
            if !is_finite(mat) {
                return Err(Error::NonFiniteSensitivity { stage: k, which });
            }
        }
        let mut w_eff = &jac.gamma * &ocp.disturbance_shapes()[k] * jac.gamma.transpose();
        crate::linalg::symmetrize(&mut w_eff);
        w_eff *= s2;
        let h = m.stage_constraints(k, x, u);
        let (hx, hu) = m.stage_constraint_jacobians(k, x, u);
        if !vec_is_finite(&h) {
            return Err(Error::NonFiniteSensitivity { stage: k, which: "constraint value" });
        }
        if !is_finite(&hx) || !is_finite(&hu) {
            return Err(Error::NonFiniteSensitivity { stage: k, which: "constraint" });
        }
        stages.push(StageSensitivity {
            a: jac.a,
            b: jac.b,
            gamma: jac.gamma,
            w_eff,
            h,
            hx,
            hu,
        });
    }
    let xn = &traj.x[ocp.horizon()];
    let terminal_h = m.terminal_constraints(xn);
    let terminal_hx = m.terminal_constraint_jacobian(xn);
    if !vec_is_finite(&terminal_h) || !is_finite(&terminal_hx) {
        return Err(Error::NonFiniteSensitivity {
            stage: ocp.horizon(),
            which: "terminal constraint",
        });
    }
    Ok(SensitivityBundle {
        stages,
        terminal_h,
        terminal_hx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::LinearModel;

    struct Identity;

    impl Model for Identity {
        fn dims(&self) -> Dims {
            Dims { nx: 2, nu: 1, nw: 1 }
        }
        fn dynamics(&self, _k: usize, x: &Vec64, _u: &Vec64, _w: &Vec64) -> Vec64 {
            x.clone()
        }
        fn stage_cost(&self, _k: usize, _x: &Vec64, u: &Vec64) -> f64 {
            u.norm_squared()
        }
        fn terminal_cost(&self, _x: &Vec64) -> f64 {
            0.0
        }
    }

    struct Blowup;

    impl Model for Blowup {
        fn dims(&self) -> Dims {
            Dims { nx: 1, nu: 1, nw: 1 }
        }
        fn dynamics(&self, k: usize, x: &Vec64, u: &Vec64, w: &Vec64) -> Vec64 {
            if k == 3 && x[0] != 0.0 {
                Vec64::from_element(1, f64::NAN)
            } else {
                x + u + w
            }
        }
        fn stage_cost(&self, _k: usize, _x: &Vec64, u: &Vec64) -> f64 {
            u.norm_squared()
        }
        fn terminal_cost(&self, _x: &Vec64) -> f64 {
            0.0
        }
    }

    struct Sine;

    impl Model for Sine {
        fn dims(&self) -> Dims {
            Dims { nx: 1, nu: 1, nw: 1 }
        }
        fn dynamics(&self, _k: usize, x: &Vec64, u: &Vec64, w: &Vec64) -> Vec64 {
            Vec64::from_element(1, x[0].sin() + u[0] + w[0])
        }
        fn stage_cost(&self, _k: usize, x: &Vec64, u: &Vec64) -> f64 {
            x.norm_squared() + u.norm_squared()
        }
        fn terminal_cost(&self, x: &Vec64) -> f64 {
            x.norm_squared()
        }
    }

    fn ocp_for(model: Arc<dyn Model>, n: usize, x0: Vec64) -> TubeOcp {
        let d = model.dims();
        TubeOcp::new(model, n, x0, Mat::zeros(d.nx, d.nx), vec![Mat::identity(d.nw, d.nw); n]).unwrap()
    }

    #[test]
    fn identity_dynamics_keep_the_state() {
        let ocp = ocp_for(Arc::new(Identity), 4, Vec64::from_vec(vec![1.0, 0.0]));
        let u = vec![Vec64::from_element(1, 3.0); 4];
        let traj = rollout(&ocp, &u).unwrap();
        assert!(traj.x.iter().all(|x| *x == Vec64::from_vec(vec![1.0, 0.0])));
    }

    #[test]
    fn double_integrator_rollout_matches_matrix_powers() {
        let dt = 0.1;
        let a = Mat::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
        let b = Mat::from_row_slice(2, 1, &[dt * dt / 2.0, dt]);
        let model = LinearModel::new(a.clone(), b.clone(), Mat::identity(2, 2));
        let ocp = ocp_for(Arc::new(model), 2, Vec64::zeros(2));
        let traj = rollout(&ocp, &[Vec64::from_element(1, 1.0), Vec64::from_element(1, 1.0)]).unwrap();
        // x2 = A B u + B u
        let oracle = &a * &b + &b;
        assert!((traj.x[2][0] - 0.02).abs() < 1e-14);
        assert!((traj.x[2][1] - 0.2).abs() < 1e-14);
        assert!((traj.x[2][0] - oracle[(0, 0)]).abs() < 1e-14);
    }

    #[test]
    fn non_finite_dynamics_name_the_stage() {
        let ocp = ocp_for(Arc::new(Blowup), 5, Vec64::from_element(1, 1.0));
        let err = rollout(&ocp, &vec![Vec64::zeros(1); 5]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteDynamics { stage: 3 }));
    }

    #[test]
    fn linear_model_sensitivities_are_exact() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.2, -0.1, 0.9]);
        let b = Mat::from_row_slice(2, 1, &[0.0, 0.5]);
        let g = Mat::from_row_slice(2, 1, &[0.1, 1.0]);
        let model = LinearModel::new(a.clone(), b.clone(), g.clone());
        let ocp = TubeOcp::new(Arc::new(model), 3, Vec64::from_vec(vec![0.3, -1.0]), Mat::zeros(2, 2), vec![Mat::identity(1, 1); 3]).unwrap();
        let traj = rollout(&ocp, &vec![Vec64::from_element(1, 0.7); 3]).unwrap();
        let sens = evaluate_sensitivities(&ocp, &traj).unwrap();
        for s in &sens.stages {
            assert_eq!(s.a, a);
            assert_eq!(s.b, b);
            assert_eq!(s.gamma, g);
        }
    }

    #[test]
    fn zero_disturbance_gives_zero_effective_noise() {
        let model = LinearModel::new(Mat::identity(2, 2), Mat::from_row_slice(2, 1, &[0.0, 1.0]), Mat::identity(2, 2));
        let ocp = TubeOcp::new(Arc::new(model), 2, Vec64::zeros(2), Mat::zeros(2, 2), vec![Mat::zeros(2, 2); 2]).unwrap();
        let traj = rollout(&ocp, &vec![Vec64::zeros(1); 2]).unwrap();
        let sens = evaluate_sensitivities(&ocp, &traj).unwrap();
        assert!(sens.stages.iter().all(|s| s.w_eff.amax() == 0.0));
    }

    #[test]
    fn sine_model_fd_jacobian_at_origin() {
        let ocp = ocp_for(Arc::new(Sine), 1, Vec64::zeros(1));
        let traj = rollout(&ocp, &[Vec64::zeros(1)]).unwrap();
        let sens = evaluate_sensitivities(&ocp, &traj).unwrap();
        assert!((sens.stages[0].a[(0, 0)] - 1.0).abs() < 1e-9);
        assert!((sens.stages[0].b[(0, 0)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sigma_scales_effective_noise_exactly() {
        let model: Arc<dyn Model> = Arc::new(Sine);
        let base = ocp_for(model, 3, Vec64::from_element(1, 0.4));
        let traj = rollout(&base, &vec![Vec64::from_element(1, 0.1); 3]).unwrap();
        let s1 = evaluate_sensitivities(&base, &traj).unwrap();
        let s3 = evaluate_sensitivities(&base.clone().with_sigma(3.0).unwrap(), &traj).unwrap();
        for (a, b) in s1.stages.iter().zip(&s3.stages) {
            assert_eq!(&a.w_eff * 9.0, b.w_eff);
        }
    }

    #[test]
    fn construction_rejects_indefinite_disturbance() {
        let model: Arc<dyn Model> = Arc::new(Sine);
        let err = TubeOcp::new(model, 1, Vec64::zeros(1), Mat::zeros(1, 1), vec![Mat::from_element(1, 1, -1.0)]);
        assert!(matches!(err, Err(Error::InvalidModel(_))));
    }

    #[test]
    fn construction_rejects_wrong_dynamics_size() {
        struct Bad;
        impl Model for Bad {
            fn dims(&self) -> Dims {
                Dims { nx: 2, nu: 1, nw: 1 }
            }
            fn dynamics(&self, _k: usize, _x: &Vec64, _u: &Vec64, _w: &Vec64) -> Vec64 {
                Vec64::zeros(3)
            }
            fn stage_cost(&self, _k: usize, _x: &Vec64, _u: &Vec64) -> f64 {
                0.0
            }
            fn terminal_cost(&self, _x: &Vec64) -> f64 {
                0.0
            }
        }
        let err = TubeOcp::new(Arc::new(Bad), 1, Vec64::zeros(2), Mat::zeros(2, 2), vec![Mat::identity(1, 1)]);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }
}
