//! Reference solvers for testing: a dense SQP on the augmented-state
//! formulation, ellipsoid boundary sampling and finite differences.
//!
//! The augmented state stacks the nominal state and the packed tube matrix,
//! `(x, vech P)`. With the gains fixed the tube dynamics become ordinary
//! (nonlinear) dynamics of the augmented state and the backoffs become
//! ordinary path constraints, so the robust problem is a plain OCP. It is
//! solved here by SQP on all stage variables at once with a dense
//! interior-point QP solver, deliberately ignoring all structure.

use std::ops::AddAssign;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{
    inf_norm, pack_symmetric, packed_dim, packed_indices, psd_sqrt, symmetrize, unpack_symmetric, vec_is_finite, Mat,
    Vec64,
};
use crate::model::{central_jacobian, rollout, ConstraintValues, NominalTrajectory, TubeOcp, FD_STEP};
use crate::nominal::initial_guess;
use crate::tube::{Backoffs, Multipliers};

/// Largest state dimension accepted by the dense oracle.
pub const MAX_ORACLE_NX: usize = 12;
pub const MAX_ORACLE_HORIZON: usize = 20;
pub const MAX_JOINT_NX: usize = 2;
pub const MAX_JOINT_HORIZON: usize = 5;
/// Difference step of the Lagrangian Hessian; the Jacobians it differences
/// are themselves central differences.
const FD_HESSIAN_STEP: f64 = 1e-4;

/// `count` points `P^{1/2} d` with `d` uniform on the unit sphere.
pub fn sample_ellipsoid_boundary(p: &Mat, count: usize, seed: u64) -> Vec<Vec64> {
    let root = psd_sqrt(p);
    let n = p.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut d = Vec64::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let norm = d.norm();
            if norm > 0.0 {
                d /= norm;
            }
            &root * d
        })
        .collect()
}

/// Central differences with step `step * (1 + ||point||)`.
pub fn finite_difference_jacobian<F>(map: F, point: &Vec64, step: f64) -> Result<Mat>
where
    F: Fn(&Vec64) -> Result<Vec64>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidStep);
    }
    let h = step * (1.0 + point.norm());
    let eval = |p: &Vec64| -> Result<Vec64> {
        let v = map(p)?;
        if !vec_is_finite(&v) {
            return Err(Error::InvalidParameter("map returned non-finite values".into()));
        }
        Ok(v)
    };
    let f0 = eval(point)?;
    let mut jac = Mat::zeros(f0.len(), point.len());
    let mut p = point.clone();
    for j in 0..point.len() {
        let orig = p[j];
        p[j] = orig + h;
        let fp = eval(&p)?;
        p[j] = orig - h;
        let fm = eval(&p)?;
        p[j] = orig;
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    Ok(jac)
}

/// The robust problem in augmented-state form.
#[derive(Debug, Clone)]
pub struct AugmentedOcp<'a> {
    ocp: &'a TubeOcp,
    /// `None`: gains are decision variables appended to the control.
    gains: Option<Vec<Mat>>,
    /// Tube matrices are stored in units of `sigma^2`.
    unit: f64,
}

impl<'a> AugmentedOcp<'a> {
    pub fn fixed_gain(ocp: &'a TubeOcp, gains: &[Mat]) -> Result<Self> {
        let d = ocp.dims();
        if gains.len() != ocp.horizon() {
            return Err(Error::DimensionMismatch {
                what: "oracle gains".into(),
                expected: ocp.horizon(),
                got: gains.len(),
            });
        }
        if let Some(k) = gains.iter().find(|k| k.shape() != (d.nu, d.nx)) {
            return Err(Error::DimensionMismatch {
                what: "oracle gain shape".into(),
                expected: d.nu * d.nx,
                got: k.len(),
            });
        }
        Ok(AugmentedOcp {
            ocp,
            gains: Some(gains.to_vec()),
            unit: tube_unit(ocp),
        })
    }

    pub fn joint(ocp: &'a TubeOcp) -> Self {
        AugmentedOcp {
            ocp,
            gains: None,
            unit: tube_unit(ocp),
        }
    }

    pub fn ocp(&self) -> &TubeOcp {
        self.ocp
    }

    pub fn state_dim(&self) -> usize {
        let nx = self.ocp.dims().nx;
        nx + packed_dim(nx)
    }

    pub fn control_dim(&self) -> usize {
        let d = self.ocp.dims();
        match self.gains {
            Some(_) => d.nu,
            None => d.nu + d.nu * d.nx,
        }
    }

    pub fn pack_state(&self, x: &Vec64, p: &Mat) -> Vec64 {
        let pv = pack_symmetric(&(p / self.unit));
        let mut out = Vec64::zeros(x.len() + pv.len());
        out.rows_mut(0, x.len()).copy_from(x);
        out.rows_mut(x.len(), pv.len()).copy_from(&pv);
        out
    }

    pub fn unpack_state(&self, xa: &Vec64) -> (Vec64, Mat) {
        let nx = self.ocp.dims().nx;
        let x = xa.rows(0, nx).into_owned();
        let p = unpack_symmetric(&xa.rows(nx, packed_dim(nx)).into_owned(), nx) * self.unit;
        (x, p)
    }

    /// Augmented control from `u` and, in joint mode, `K` (column-major).
    pub fn pack_control(&self, u: &Vec64, k: &Mat) -> Vec64 {
        match self.gains {
            Some(_) => u.clone(),
            None => {
                let mut v = Vec64::zeros(self.control_dim());
                v.rows_mut(0, u.len()).copy_from(u);
                v.rows_mut(u.len(), k.len()).copy_from_slice(k.as_slice());
                v
            }
        }
    }

    fn split_control(&self, k: usize, v: &Vec64) -> (Vec64, Mat) {
        let d = self.ocp.dims();
        let u = v.rows(0, d.nu).into_owned();
        let gain = match &self.gains {
            Some(g) => g[k].clone(),
            None => Mat::from_column_slice(d.nu, d.nx, v.rows(d.nu, d.nu * d.nx).as_slice()),
        };
        (u, gain)
    }

    pub fn initial_state(&self) -> Vec64 {
        let s = self.ocp.sigma();
        self.pack_state(self.ocp.initial_state(), &(self.ocp.initial_ellipsoid() * (s * s)))
    }

    fn closed_loop(&self, k: usize, x: &Vec64, u: &Vec64, gain: &Mat) -> (Vec64, Mat, Mat) {
        let m = self.ocp.model();
        let zw = Vec64::zeros(self.ocp.dims().nw);
        let next = m.dynamics(k, x, u, &zw);
        let jac = m.dynamics_jacobians(k, x, u, &zw);
        let s = self.ocp.sigma();
        let mut w = &jac.gamma * &self.ocp.disturbance_shapes()[k] * jac.gamma.transpose();
        symmetrize(&mut w);
        (next, jac.a + jac.b * gain, w * (s * s))
    }

    pub fn dynamics(&self, k: usize, xa: &Vec64, v: &Vec64) -> Vec64 {
        let (x, p) = self.unpack_state(xa);
        let (u, gain) = self.split_control(k, v);
        let (next, acl, w) = self.closed_loop(k, &x, &u, &gain);
        self.pack_state(&next, &Self::lyapunov_step(&acl, &p, w))
    }

    fn lyapunov_step(acl: &Mat, p: &Mat, w: Mat) -> Mat {
        let mut pn = acl * p * acl.transpose() + w;
        symmetrize(&mut pn);
        pn
    }

    /// Packed next tube matrix.
    fn tube_step(&self, k: usize, xa: &Vec64, v: &Vec64) -> Vec64 {
        let (x, p) = self.unpack_state(xa);
        let (u, gain) = self.split_control(k, v);
        let (_, acl, w) = self.closed_loop(k, &x, &u, &gain);
        pack_symmetric(&(Self::lyapunov_step(&acl, &p, w) / self.unit))
    }

    /// `gamma ||hx + K' hu||_P` per stage constraint.
    fn stage_radicals(&self, k: usize, xa: &Vec64, v: &Vec64) -> Vec64 {
        let (x, p) = self.unpack_state(xa);
        let (u, gain) = self.split_control(k, v);
        let (hx, hu) = self.ocp.model().stage_constraint_jacobians(k, &x, &u);
        Vec64::from_iterator(
            hx.nrows(),
            (0..hx.nrows()).map(|i| {
                let g = hx.row(i).transpose() + gain.transpose() * hu.row(i).transpose();
                self.ocp.gamma() * g.dot(&(&p * &g)).max(0.0).sqrt()
            }),
        )
    }

    fn terminal_radicals(&self, xa: &Vec64) -> Vec64 {
        let (x, p) = self.unpack_state(xa);
        let hx = self.ocp.model().terminal_constraint_jacobian(&x);
        Vec64::from_iterator(
            hx.nrows(),
            (0..hx.nrows()).map(|i| {
                let g = hx.row(i).transpose();
                self.ocp.gamma() * g.dot(&(&p * &g)).max(0.0).sqrt()
            }),
        )
    }

    /// `h + gamma ||hx + K' hu||_P` per stage constraint.
    pub fn stage_constraints(&self, k: usize, xa: &Vec64, v: &Vec64) -> Vec64 {
        let (x, _) = self.unpack_state(xa);
        let (u, _) = self.split_control(k, v);
        self.ocp.model().stage_constraints(k, &x, &u) + self.stage_radicals(k, xa, v)
    }

    pub fn terminal_constraints(&self, xa: &Vec64) -> Vec64 {
        let (x, _) = self.unpack_state(xa);
        self.ocp.model().terminal_constraints(&x) + self.terminal_radicals(xa)
    }

    pub fn rollout(&self, controls: &[Vec64]) -> Result<Vec<Vec64>> {
        let mut xs = Vec::with_capacity(controls.len() + 1);
        xs.push(self.initial_state());
        for (k, v) in controls.iter().enumerate() {
            let next = self.dynamics(k, &xs[k], v);
            if !vec_is_finite(&next) {
                return Err(Error::NonFiniteDynamics { stage: k });
            }
            xs.push(next);
        }
        Ok(xs)
    }

    /// Derivative of the packed `A P A'` with respect to packed `P`.
    fn lyapunov_jacobian(acl: &Mat) -> Mat {
        let n = acl.nrows();
        let idx = packed_indices(n);
        let mut jac = Mat::zeros(idx.len(), idx.len());
        for (col, &(i, j)) in idx.iter().enumerate() {
            let (ai, aj) = (acl.column(i), acl.column(j));
            for (row, &(r, c)) in idx.iter().enumerate() {
                jac[(row, col)] = if i == j {
                    ai[r] * ai[c]
                } else {
                    ai[r] * aj[c] + aj[r] * ai[c]
                };
            }
        }
        jac
    }

    /// Derivative of `gamma sqrt(g' P g)` with respect to the packed state.
    fn radical_gradient(&self, g: &Vec64, p: &Mat) -> Option<Vec64> {
        let rad = g.dot(&(p * g));
        if rad <= 0.0 {
            return None;
        }
        let scale = self.ocp.gamma() * self.unit / (2.0 * rad.sqrt());
        let idx = packed_indices(g.len());
        Some(Vec64::from_iterator(
            idx.len(),
            idx.iter().map(|&(i, j)| if i == j { scale * g[i] * g[i] } else { 2.0 * scale * g[i] * g[j] }),
        ))
    }

    /// Jacobians of the stage map: `(F_x, F_v, c_x, c_v)` in augmented
    /// coordinates. Model derivatives enter directly; only the tube terms
    /// are differenced in `(x, v)`.
    fn stage_jacobians(&self, k: usize, xa: &Vec64, v: &Vec64) -> (Mat, Mat, Mat, Mat) {
        let d = self.ocp.dims();
        let nx = d.nx;
        let nxa = self.state_dim();
        let nv = self.control_dim();
        let np = packed_dim(nx);
        let (x, p) = self.unpack_state(xa);
        let (u, gain) = self.split_control(k, v);

        let mut z = Vec64::zeros(nx + nv);
        z.rows_mut(0, nx).copy_from(&x);
        z.rows_mut(nx, nv).copy_from(v);
        let pv = xa.rows(nx, np).into_owned();
        let assemble = |z: &Vec64| {
            let mut xa2 = Vec64::zeros(nxa);
            xa2.rows_mut(0, nx).copy_from(&z.rows(0, nx));
            xa2.rows_mut(nx, np).copy_from(&pv);
            (xa2, z.rows(nx, nv).into_owned())
        };
        let tz = central_jacobian(
            |z| {
                let (xa2, v2) = assemble(z);
                self.tube_step(k, &xa2, &v2)
            },
            &z,
            FD_STEP,
        );
        let rz = central_jacobian(
            |z| {
                let (xa2, v2) = assemble(z);
                self.stage_radicals(k, &xa2, &v2)
            },
            &z,
            FD_STEP,
        );

        let m = self.ocp.model();
        let jac = m.dynamics_jacobians(k, &x, &u, &Vec64::zeros(d.nw));
        let acl = &jac.a + &jac.b * &gain;
        let mut fx = Mat::zeros(nxa, nxa);
        fx.view_mut((0, 0), (nx, nx)).copy_from(&jac.a);
        fx.view_mut((nx, 0), (np, nx)).copy_from(&tz.columns(0, nx));
        fx.view_mut((nx, nx), (np, np)).copy_from(&Self::lyapunov_jacobian(&acl));
        let mut fv = Mat::zeros(nxa, nv);
        fv.view_mut((0, 0), (nx, d.nu)).copy_from(&jac.b);
        fv.view_mut((nx, 0), (np, nv)).copy_from(&tz.columns(nx, nv));

        let (hx, hu) = m.stage_constraint_jacobians(k, &x, &u);
        let nc = hx.nrows();
        let mut cx = Mat::zeros(nc, nxa);
        cx.view_mut((0, 0), (nc, nx)).copy_from(&(&hx + rz.columns(0, nx)));
        for i in 0..nc {
            let g = hx.row(i).transpose() + gain.transpose() * hu.row(i).transpose();
            if let Some(d) = self.radical_gradient(&g, &p) {
                cx.view_mut((i, nx), (1, np)).copy_from(&d.transpose());
            }
        }
        let mut cv = rz.columns(nx, nv).into_owned();
        cv.view_mut((0, 0), (nc, d.nu)).add_assign(&hu);
        (fx, fv, cx, cv)
    }

    fn terminal_jacobian(&self, xa: &Vec64) -> Mat {
        let nx = self.ocp.dims().nx;
        let np = packed_dim(nx);
        let (x, p) = self.unpack_state(xa);
        let pv = xa.rows(nx, np).into_owned();
        let cz = central_jacobian(
            |z| {
                let mut xa2 = Vec64::zeros(nx + np);
                xa2.rows_mut(0, nx).copy_from(z);
                xa2.rows_mut(nx, np).copy_from(&pv);
                self.terminal_radicals(&xa2)
            },
            &x,
            FD_STEP,
        );
        let hx = self.ocp.model().terminal_constraint_jacobian(&x);
        let mut cx = Mat::zeros(cz.nrows(), nx + np);
        cx.view_mut((0, 0), (cz.nrows(), nx)).copy_from(&(&hx + &cz));
        for i in 0..cz.nrows() {
            let g = hx.row(i).transpose();
            if let Some(d) = self.radical_gradient(&g, &p) {
                cx.view_mut((i, nx), (1, np)).copy_from(&d.transpose());
            }
        }
        cx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleHessian {
    /// Objective Hessian only.
    GaussNewton,
    /// Differences of the Lagrangian gradient, eigenvalues floored.
    FiniteDifference,
}

#[derive(Debug, Clone)]
pub struct OracleOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub penalty: f64,
    pub hessian: OracleHessian,
    /// Starting trajectory; `None` uses the zero-control rollout.
    pub initial: Option<NominalTrajectory>,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            max_iters: 200,
            tol: 1e-10,
            penalty: 1e4,
            hessian: OracleHessian::GaussNewton,
            initial: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub traj: NominalTrajectory,
    pub p: Vec<Mat>,
    pub gains: Vec<Mat>,
    /// Nominal constraint values `h`.
    pub constraint_values: ConstraintValues,
    pub backoffs: Backoffs,
    pub multipliers: Multipliers,
    pub objective: f64,
    pub kkt: f64,
    pub slack_norm: f64,
    pub iterations: usize,
    /// Wall time of each SQP iteration, seconds.
    pub iteration_times: Vec<f64>,
}

impl OracleSolution {
    /// `h + b`.
    pub fn tightened(&self) -> ConstraintValues {
        self.constraint_values.map2(&self.backoffs, |h, b| h + b)
    }
}

struct DenseQp {
    h: Mat,
    g: Vec64,
    a: Mat,
    b: Vec64,
    gm: Mat,
    c: Vec64,
}

struct DenseQpSolution {
    d: Vec64,
    y: Vec64,
    lam: Vec64,
    slack: Vec64,
}

/// Mehrotra IPM for `min 0.5 d'Hd + g'd + rho 1'e  s.t.  A d + b = 0,  G d + c <= e,  e >= 0`,
/// one dense LU of the reduced KKT matrix per iteration.
fn solve_dense_qp(qp: &DenseQp, rho: f64, tol: f64, max_iter: usize) -> Result<DenseQpSolution> {
    let n = qp.h.nrows();
    let p = qp.a.nrows();
    let m = qp.gm.nrows();
    let mut d = Vec64::zeros(n);
    let mut y = Vec64::zeros(p);
    let mut e = qp.c.map(|v| v.max(0.0) + 1.0);
    let mut t = &e - &qp.c;
    let mut lam = Vec64::from_element(m, 1.0);
    let mut nu = Vec64::from_element(m, rho - 1.0);
    let scale = 1.0 + inf_norm(&qp.g).max(inf_norm(&qp.b)).max(inf_norm(&qp.c));
    let tol = tol * scale;

    for _ in 0..max_iter {
        let rd = &qp.h * &d + &qp.g + qp.a.transpose() * &y + qp.gm.transpose() * &lam;
        let req = &qp.a * &d + &qp.b;
        let rp = &qp.gm * &d + &qp.c - &e + &t;
        let re = (&lam + &nu).map(|v| rho - v);
        let mu = if m == 0 { 0.0 } else { (lam.dot(&t) + nu.dot(&e)) / (2 * m) as f64 };
        let rnorm = inf_norm(&rd).max(inf_norm(&req)).max(inf_norm(&rp)).max(inf_norm(&re));
        if !rnorm.is_finite() {
            return Err(Error::OracleNoConvergence("non-finite QP iterate".into()));
        }
        if rnorm <= tol && mu <= tol {
            return Ok(DenseQpSolution { d, y, lam, slack: e });
        }

        let dinv = Vec64::from_iterator(m, (0..m).map(|i| 1.0 / (t[i] / lam[i] + e[i] / nu[i])));
        let mut gs = qp.gm.clone();
        for (i, mut row) in gs.row_iter_mut().enumerate() {
            row *= dinv[i];
        }
        let mut kkt = Mat::zeros(n + p, n + p);
        kkt.view_mut((0, 0), (n, n)).copy_from(&(&qp.h + qp.gm.transpose() * &gs));
        kkt.view_mut((n, 0), (p, n)).copy_from(&qp.a);
        kkt.view_mut((0, n), (n, p)).copy_from(&qp.a.transpose());
        let lu = kkt.lu();

        let direction = |r_lam: &Vec64, r_nu: &Vec64| -> Option<(Vec64, Vec64, Vec64, Vec64, Vec64, Vec64)> {
            let rhat = Vec64::from_iterator(
                m,
                (0..m).map(|i| rp[i] + (r_nu[i] + e[i] * re[i]) / nu[i] - r_lam[i] / lam[i]),
            );
            let mut rhs = Vec64::zeros(n + p);
            rhs.rows_mut(0, n).copy_from(&(-(&rd + qp.gm.transpose() * rhat.component_mul(&dinv))));
            rhs.rows_mut(n, p).copy_from(&(-&req));
            let sol = lu.solve(&rhs)?;
            let dd = sol.rows(0, n).into_owned();
            let dy = sol.rows(n, p).into_owned();
            let dl = (&qp.gm * &dd + &rhat).component_mul(&dinv);
            let dt = Vec64::from_iterator(m, (0..m).map(|i| (-r_lam[i] - t[i] * dl[i]) / lam[i]));
            let de = Vec64::from_iterator(m, (0..m).map(|i| (-r_nu[i] - e[i] * re[i] + e[i] * dl[i]) / nu[i]));
            let dn = &re - &dl;
            Some((dd, dy, dl, dn, dt, de))
        };
        let max_step = |pairs: [(&Vec64, &Vec64); 4]| {
            let mut a: f64 = 1.0;
            for (v, dv) in pairs {
                for i in 0..v.len() {
                    if dv[i] < 0.0 {
                        a = a.min(-v[i] / dv[i]);
                    }
                }
            }
            a
        };

        let r_lam = lam.component_mul(&t);
        let r_nu = nu.component_mul(&e);
        let fail = || Error::OracleNoConvergence("singular KKT matrix".into());
        let aff = direction(&r_lam, &r_nu).ok_or_else(fail)?;
        let dir = if m == 0 {
            aff
        } else {
            let a_aff = max_step([(&lam, &aff.2), (&nu, &aff.3), (&t, &aff.4), (&e, &aff.5)]);
            let mu_aff = ((&lam + &aff.2 * a_aff).dot(&(&t + &aff.4 * a_aff))
                + (&nu + &aff.3 * a_aff).dot(&(&e + &aff.5 * a_aff)))
                / (2 * m) as f64;
            let target = (mu_aff / mu).powi(3).min(1.0) * mu;
            let r_lam_c = (&r_lam + aff.2.component_mul(&aff.4)).add_scalar(-target);
            let r_nu_c = (&r_nu + aff.3.component_mul(&aff.5)).add_scalar(-target);
            direction(&r_lam_c, &r_nu_c).ok_or_else(fail)?
        };
        let alpha = if m == 0 {
            1.0
        } else {
            (0.995 * max_step([(&lam, &dir.2), (&nu, &dir.3), (&t, &dir.4), (&e, &dir.5)])).min(1.0)
        };
        d.axpy(alpha, &dir.0, 1.0);
        y.axpy(alpha, &dir.1, 1.0);
        lam.axpy(alpha, &dir.2, 1.0);
        nu.axpy(alpha, &dir.3, 1.0);
        t.axpy(alpha, &dir.4, 1.0);
        e.axpy(alpha, &dir.5, 1.0);
    }
    Err(Error::OracleNoConvergence(format!("dense QP did not converge in {max_iter} iterations")))
}

/// Linearization of the full-space NLP at a stacked iterate.
struct Linearization {
    f: f64,
    grad: Vec64,
    hess: Mat,
    eq: Vec64,
    a: Mat,
    c: Vec64,
    gm: Mat,
}

/// Variables ordered `v_0, xa_1, v_1, xa_2, ..., v_{N-1}, xa_N`.
struct Layout {
    nv: usize,
    nxa: usize,
    n: usize,
    rows: Vec<usize>,
}

impl Layout {
    fn block(&self) -> usize {
        self.nv + self.nxa
    }
    fn v(&self, k: usize) -> usize {
        k * self.block()
    }
    fn xa(&self, k: usize) -> usize {
        (k - 1) * self.block() + self.nv
    }
}

struct Sqp<'a, 'b> {
    aug: &'b AugmentedOcp<'a>,
    lay: Layout,
    x0: Vec64,
}

impl<'a, 'b> Sqp<'a, 'b> {
    fn new(aug: &'b AugmentedOcp<'a>) -> Self {
        let ocp = aug.ocp();
        let n = ocp.horizon();
        let nv = aug.control_dim();
        let nxa = aug.state_dim();
        let mut rows: Vec<usize> = (0..n).map(|k| ocp.num_constraints(k)).collect();
        rows.push(ocp.num_constraints(n));
        Sqp {
            aug,
            lay: Layout {
                nv,
                nxa,
                n: n * (nv + nxa),
                rows,
            },
            x0: aug.initial_state(),
        }
    }

    fn horizon(&self) -> usize {
        self.aug.ocp().horizon()
    }

    fn xa(&self, y: &Vec64, k: usize) -> Vec64 {
        if k == 0 {
            self.x0.clone()
        } else {
            y.rows(self.lay.xa(k), self.lay.nxa).into_owned()
        }
    }

    fn v(&self, y: &Vec64, k: usize) -> Vec64 {
        y.rows(self.lay.v(k), self.lay.nv).into_owned()
    }

    fn stack(&self, xs: &[Vec64], vs: &[Vec64]) -> Vec64 {
        let mut y = Vec64::zeros(self.lay.n);
        for k in 0..self.horizon() {
            y.rows_mut(self.lay.v(k), self.lay.nv).copy_from(&vs[k]);
            y.rows_mut(self.lay.xa(k + 1), self.lay.nxa).copy_from(&xs[k + 1]);
        }
        y
    }

    fn nominal(&self, y: &Vec64) -> NominalTrajectory {
        let nx = self.aug.ocp().dims().nx;
        let nu = self.aug.ocp().dims().nu;
        let n = self.horizon();
        NominalTrajectory {
            x: (0..=n).map(|k| self.xa(y, k).rows(0, nx).into_owned()).collect(),
            u: (0..n).map(|k| self.v(y, k).rows(0, nu).into_owned()).collect(),
        }
    }

    fn objective(&self, y: &Vec64) -> f64 {
        self.aug.ocp().objective(&self.nominal(y))
    }

    fn residuals(&self, y: &Vec64) -> (Vec64, Vec64) {
        let n = self.horizon();
        let nxa = self.lay.nxa;
        let mut eq = Vec64::zeros(n * nxa);
        let mut c = Vec64::zeros(self.lay.rows.iter().sum());
        let mut row = 0;
        for k in 0..n {
            let (xa, v) = (self.xa(y, k), self.v(y, k));
            eq.rows_mut(k * nxa, nxa).copy_from(&(self.aug.dynamics(k, &xa, &v) - self.xa(y, k + 1)));
            let ck = self.aug.stage_constraints(k, &xa, &v);
            c.rows_mut(row, ck.len()).copy_from(&ck);
            row += ck.len();
        }
        let cn = self.aug.terminal_constraints(&self.xa(y, n));
        c.rows_mut(row, cn.len()).copy_from(&cn);
        (eq, c)
    }

    fn linearize(&self, y: &Vec64) -> Linearization {
        let ocp = self.aug.ocp();
        let m = ocp.model();
        let d = ocp.dims();
        let n = self.horizon();
        let (nv, nxa) = (self.lay.nv, self.lay.nxa);
        let nc: usize = self.lay.rows.iter().sum();
        let mut grad = Vec64::zeros(self.lay.n);
        let mut hess = Mat::zeros(self.lay.n, self.lay.n);
        let mut a = Mat::zeros(n * nxa, self.lay.n);
        let mut gm = Mat::zeros(nc, self.lay.n);
        let traj = self.nominal(y);
        let mut row = 0;
        for k in 0..n {
            let (x, u) = (&traj.x[k], &traj.u[k]);
            let (gx, gu) = m.stage_cost_gradient(k, x, u);
            let hs = m.stage_cost_hessian(k, x, u);
            let vo = self.lay.v(k);
            grad.rows_mut(vo, d.nu).add_assign(&gu);
            hess.view_mut((vo, vo), (d.nu, d.nu)).add_assign(&hs.r);
            if k > 0 {
                let xo = self.lay.xa(k);
                grad.rows_mut(xo, d.nx).add_assign(&gx);
                hess.view_mut((xo, xo), (d.nx, d.nx)).add_assign(&hs.q);
                hess.view_mut((vo, xo), (d.nu, d.nx)).add_assign(&hs.s);
                hess.view_mut((xo, vo), (d.nx, d.nu)).add_assign(&hs.s.transpose());
            }

            let (xa, v) = (self.xa(y, k), self.v(y, k));
            let (fx, fv, cx, cv) = self.aug.stage_jacobians(k, &xa, &v);
            let r0 = k * nxa;
            a.view_mut((r0, vo), (nxa, nv)).copy_from(&fv);
            a.view_mut((r0, self.lay.xa(k + 1)), (nxa, nxa)).fill_with_identity();
            a.view_mut((r0, self.lay.xa(k + 1)), (nxa, nxa)).neg_mut();
            let mk = self.lay.rows[k];
            gm.view_mut((row, vo), (mk, nv)).copy_from(&cv);
            if k > 0 {
                a.view_mut((r0, self.lay.xa(k)), (nxa, nxa)).copy_from(&fx);
                gm.view_mut((row, self.lay.xa(k)), (mk, nxa)).copy_from(&cx);
            }
            row += mk;
        }
        let xo = self.lay.xa(n);
        grad.rows_mut(xo, d.nx).add_assign(&m.terminal_cost_gradient(&traj.x[n]));
        hess.view_mut((xo, xo), (d.nx, d.nx)).add_assign(&m.terminal_cost_hessian(&traj.x[n]));
        let mn = self.lay.rows[n];
        gm.view_mut((row, xo), (mn, nxa)).copy_from(&self.aug.terminal_jacobian(&self.xa(y, n)));
        let (eq, c) = self.residuals(y);
        Linearization {
            f: ocp.objective(&traj),
            grad,
            hess,
            eq,
            a,
            c,
            gm,
        }
    }

    fn lagrangian_gradient(&self, lin: &Linearization, ym: &Vec64, lam: &Vec64) -> Vec64 {
        &lin.grad + lin.a.transpose() * ym + lin.gm.transpose() * lam
    }

    fn fd_hessian(&self, y: &Vec64, ym: &Vec64, lam: &Vec64) -> Mat {
        let h = FD_HESSIAN_STEP * (1.0 + y.norm());
        let mut hess = Mat::zeros(y.len(), y.len());
        let mut yy = y.clone();
        for j in 0..y.len() {
            let orig = yy[j];
            yy[j] = orig + h;
            let gp = self.lagrangian_gradient(&self.linearize(&yy), ym, lam);
            yy[j] = orig - h;
            let gmn = self.lagrangian_gradient(&self.linearize(&yy), ym, lam);
            yy[j] = orig;
            hess.set_column(j, &((gp - gmn) / (2.0 * h)));
        }
        symmetrize(&mut hess);
        let eig = hess.clone().symmetric_eigen();
        let floor = 1e-8 * (1.0 + eig.eigenvalues.amax());
        let lam_c = eig.eigenvalues.map(|v| v.max(floor));
        &eig.eigenvectors * Mat::from_diagonal(&lam_c) * eig.eigenvectors.transpose()
    }

    fn kkt(&self, lin: &Linearization, ym: &Vec64, lam: &Vec64) -> f64 {
        let stat = inf_norm(&self.lagrangian_gradient(lin, ym, lam));
        let mut r = stat.max(inf_norm(&lin.eq));
        for i in 0..lin.c.len() {
            r = r.max(lin.c[i].max(0.0)).max((lam[i] * lin.c[i]).abs()).max((-lam[i]).max(0.0));
        }
        r
    }

    /// Re-solves the QP with the constraints shifted by their curvature along
    /// `d`, measured at the trial point `full = y + d`.
    fn second_order_correction(
        &self,
        qp: &DenseQp,
        lin: &Linearization,
        full: &Vec64,
        d: &Vec64,
        penalty: f64,
    ) -> Option<DenseQpSolution> {
        let (eq, c) = self.residuals(full);
        let shifted = DenseQp {
            h: qp.h.clone(),
            g: qp.g.clone(),
            a: qp.a.clone(),
            b: eq - &lin.a * d,
            gm: qp.gm.clone(),
            c: c - &lin.gm * d,
        };
        solve_dense_qp(&shifted, penalty, 1e-12, 200).ok()
    }

    fn merit(&self, y: &Vec64, weight: f64) -> f64 {
        let (eq, c) = self.residuals(y);
        let viol = eq.abs().sum() + c.map(|v| v.max(0.0)).sum();
        self.objective(y) + weight * viol
    }

    /// Runs SQP from `y`; returns the final iterate, multipliers and whether it converged.
    fn run(&self, mut y: Vec64, opts: &OracleOptions) -> Result<SqpRun> {
        let nc: usize = self.lay.rows.iter().sum();
        let mut ym = Vec64::zeros(self.horizon() * self.lay.nxa);
        let mut lam = Vec64::zeros(nc);
        let mut weight: f64 = 1.0;
        let mut times = Vec::new();
        let mut slack = 0.0;
        for iter in 0..opts.max_iters {
            let start = Instant::now();
            let mut lin = self.linearize(&y);
            let kkt = self.kkt(&lin, &ym, &lam);
            if kkt <= opts.tol * (1.0 + inf_norm(&lin.grad)) {
                return Ok(SqpRun {
                    y,
                    lam,
                    kkt,
                    slack,
                    iterations: iter,
                    times,
                    converged: true,
                });
            }
            if opts.hessian == OracleHessian::FiniteDifference {
                lin.hess = self.fd_hessian(&y, &ym, &lam);
            } else {
                for i in 0..lin.hess.nrows() {
                    lin.hess[(i, i)] += 1e-10;
                }
            }
            let qp = DenseQp {
                h: lin.hess.clone(),
                g: lin.grad.clone(),
                a: lin.a.clone(),
                b: lin.eq.clone(),
                gm: lin.gm.clone(),
                c: lin.c.clone(),
            };
            let sol = solve_dense_qp(&qp, opts.penalty, 1e-12, 200)?;
            slack = inf_norm(&sol.slack);
            let dual_max = inf_norm(&sol.y).max(inf_norm(&sol.lam));
            if weight < 1.1 * dual_max {
                weight = (2.0 * dual_max).max(1.0);
            }
            let viol = lin.eq.abs().sum() + lin.c.map(|v| v.max(0.0)).sum();
            let slope = lin.grad.dot(&sol.d) - weight * viol;
            let phi0 = lin.f + weight * viol;
            let accept = |phi: f64, alpha: f64| phi <= phi0 + 1e-4 * alpha * slope.min(0.0) + 1e-13 * (1.0 + phi0.abs());
            let full = &y + &sol.d;
            let (step, ys, ls, alpha) = if accept(self.merit(&full, weight), 1.0) {
                (sol.d, sol.y, sol.lam, 1.0)
            } else if let Some(soc) = self.second_order_correction(&qp, &lin, &full, &sol.d, opts.penalty)
                .filter(|c| accept(self.merit(&(&y + &c.d), weight), 1.0))
            {
                (soc.d, soc.y, soc.lam, 1.0)
            } else {
                let mut alpha = 0.5;
                while !accept(self.merit(&(&y + &sol.d * alpha), weight), alpha) && alpha >= 1e-10 {
                    alpha *= 0.5;
                }
                (sol.d, sol.y, sol.lam, alpha)
            };
            y.axpy(alpha, &step, 1.0);
            ym += (&ys - &ym) * alpha;
            lam += (&ls - &lam) * alpha;
            times.push(start.elapsed().as_secs_f64());
        }
        let lin = self.linearize(&y);
        let kkt = self.kkt(&lin, &ym, &lam);
        Ok(SqpRun {
            y,
            lam,
            kkt,
            slack,
            iterations: opts.max_iters,
            times,
            converged: false,
        })
    }

    fn solution(&self, run: SqpRun) -> OracleSolution {
        let ocp = self.aug.ocp();
        let n = self.horizon();
        let traj = self.nominal(&run.y);
        let mut p = Vec::with_capacity(n + 1);
        let mut gains = Vec::with_capacity(n);
        for k in 0..=n {
            p.push(self.aug.unpack_state(&self.xa(&run.y, k)).1);
        }
        for k in 0..n {
            gains.push(self.aug.split_control(k, &self.v(&run.y, k)).1);
        }
        let h = ocp.constraint_values(&traj);
        let (_, c) = self.residuals(&run.y);
        let mut tight = ConstraintValues::zeros(ocp);
        let mut mult = ConstraintValues::zeros(ocp);
        let mut row = 0;
        for k in 0..=n {
            let mk = self.lay.rows[k];
            tight.get_mut(k).copy_from(&c.rows(row, mk));
            mult.get_mut(k).copy_from(&run.lam.rows(row, mk));
            row += mk;
        }
        OracleSolution {
            objective: ocp.objective(&traj),
            backoffs: tight.map2(&h, |c, h| c - h),
            constraint_values: h,
            traj,
            p,
            gains,
            multipliers: mult,
            kkt: run.kkt,
            slack_norm: run.slack,
            iterations: run.iterations,
            iteration_times: run.times,
        }
    }
}

struct SqpRun {
    y: Vec64,
    lam: Vec64,
    kkt: f64,
    slack: f64,
    iterations: usize,
    times: Vec<f64>,
    converged: bool,
}

fn tube_unit(ocp: &TubeOcp) -> f64 {
    let s2 = ocp.sigma() * ocp.sigma();
    if s2 > 0.0 {
        s2
    } else {
        1.0
    }
}

fn check_size(ocp: &TubeOcp, max_nx: usize, max_n: usize) -> Result<()> {
    let nx = ocp.dims().nx;
    if nx > max_nx || ocp.horizon() > max_n {
        return Err(Error::InstanceTooLarge(format!(
            "nx = {nx}, N = {} exceeds nx <= {max_nx}, N <= {max_n}",
            ocp.horizon()
        )));
    }
    Ok(())
}

fn start_point(sqp: &Sqp, ocp: &TubeOcp, opts: &OracleOptions, gains: &[Mat]) -> Result<Vec64> {
    let traj = match &opts.initial {
        Some(t) => {
            ocp.check_trajectory(t)?;
            rollout(ocp, &t.u)?
        }
        None => initial_guess(ocp),
    };
    let vs: Vec<Vec64> = traj.u.iter().zip(gains).map(|(u, k)| sqp.aug.pack_control(u, k)).collect();
    let xs = sqp.aug.rollout(&vs)?;
    Ok(sqp.stack(&xs, &vs))
}

/// Solves the robust problem with the gains frozen at `gains`.
pub fn solve_augmented_fixed_gain(ocp: &TubeOcp, gains: &[Mat], opts: &OracleOptions) -> Result<OracleSolution> {
    check_size(ocp, MAX_ORACLE_NX, MAX_ORACLE_HORIZON)?;
    let aug = AugmentedOcp::fixed_gain(ocp, gains)?;
    let sqp = Sqp::new(&aug);
    let y = start_point(&sqp, ocp, opts, gains)?;
    let run = sqp.run(y, opts)?;
    if !run.converged {
        return Err(Error::OracleNoConvergence(format!(
            "KKT residual {:.3e} after {} SQP iterations",
            run.kkt, run.iterations
        )));
    }
    if run.slack > 1e-7 {
        return Err(Error::OracleNoConvergence(format!(
            "robust problem infeasible, slack norm {:.3e}",
            run.slack
        )));
    }
    Ok(sqp.solution(run))
}

/// Wall time of each of the first `iters` oracle SQP iterations, converged or not.
pub fn time_oracle_iterations(ocp: &TubeOcp, gains: &[Mat], iters: usize) -> Result<Vec<f64>> {
    check_size(ocp, MAX_ORACLE_NX, MAX_ORACLE_HORIZON)?;
    let aug = AugmentedOcp::fixed_gain(ocp, gains)?;
    let sqp = Sqp::new(&aug);
    let opts = OracleOptions {
        max_iters: iters,
        tol: 0.0,
        ..Default::default()
    };
    let y = start_point(&sqp, ocp, &opts, gains)?;
    Ok(sqp.run(y, &opts)?.times)
}

/// Optimizes controls and gains together from `starts` initial gain guesses
/// (the first is zero, the rest random in `[-scale, scale]`) and keeps the
/// best feasible result.
pub fn solve_augmented_joint(
    ocp: &TubeOcp,
    starts: usize,
    scale: f64,
    seed: u64,
    opts: &OracleOptions,
) -> Result<OracleSolution> {
    check_size(ocp, MAX_JOINT_NX, MAX_JOINT_HORIZON)?;
    let d = ocp.dims();
    let aug = AugmentedOcp::joint(ocp);
    let sqp = Sqp::new(&aug);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<OracleSolution> = None;
    let mut last_err = None;
    for s in 0..starts.max(1) {
        let gains: Vec<Mat> = (0..ocp.horizon())
            .map(|_| {
                if s == 0 {
                    Mat::zeros(d.nu, d.nx)
                } else {
                    Mat::from_fn(d.nu, d.nx, |_, _| rng.random_range(-scale..=scale))
                }
            })
            .collect();
        let outcome = start_point(&sqp, ocp, opts, &gains).and_then(|y| sqp.run(y, opts));
        match outcome {
            Ok(run) if run.converged && run.slack <= 1e-7 => {
                let sol = sqp.solution(run);
                if best.as_ref().is_none_or(|b| sol.objective < b.objective) {
                    best = Some(sol);
                }
            }
            Ok(run) => last_err = Some(format!("start {s}: KKT {:.3e}, slack {:.3e}", run.kkt, run.slack)),
            Err(e) => last_err = Some(format!("start {s}: {e}")),
        }
    }
    best.ok_or_else(|| Error::OracleNoConvergence(last_err.unwrap_or_default()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{build_problem, ProblemParams};
    use crate::tube::propagate_ellipsoids;

    #[test]
    fn boundary_samples_of_identity_are_unit() {
        for p in sample_ellipsoid_boundary(&Mat::identity(2, 2), 100, 1) {
            assert!((p.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_samples_reach_the_long_axis() {
        let p = Mat::from_diagonal(&Vec64::from_vec(vec![4.0, 1.0]));
        let m = sample_ellipsoid_boundary(&p, 10_000, 7)
            .iter()
            .map(|v| v[0].abs())
            .fold(0.0, f64::max);
        assert!((1.999..=2.0 + 1e-12).contains(&m), "{m}");
    }

    #[test]
    fn boundary_samples_of_zero_are_the_center() {
        assert!(sample_ellipsoid_boundary(&Mat::zeros(3, 3), 10, 2).iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = Mat::identity(3, 3);
        assert_eq!(sample_ellipsoid_boundary(&p, 5, 9), sample_ellipsoid_boundary(&p, 5, 9));
    }

    #[test]
    fn fd_jacobian_of_linear_map() {
        let m = Mat::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, 4.0]);
        let j = finite_difference_jacobian(|x| Ok(&m * x), &Vec64::from_vec(vec![0.3, -1.0, 2.0]), 1e-6).unwrap();
        assert!((j - m).amax() < 1e-9);
    }

    #[test]
    fn fd_jacobian_of_square() {
        let j = finite_difference_jacobian(|x| Ok(x.map(|v| v * v)), &Vec64::from_element(1, 1.0), 1e-6).unwrap();
        assert!((j[(0, 0)] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn fd_jacobian_rejects_zero_step() {
        let r = finite_difference_jacobian(|x| Ok(x.clone()), &Vec64::zeros(1), 0.0);
        assert!(matches!(r, Err(Error::InvalidStep)));
    }

    #[test]
    fn fd_jacobian_propagates_non_finite() {
        let r = finite_difference_jacobian(|x| Ok(x.map(|_| f64::NAN)), &Vec64::zeros(1), 1e-6);
        assert!(r.is_err());
    }

    #[test]
    fn augmented_rollout_matches_tube_propagation() {
        let ocp = build_problem(&ProblemParams::named("pendulum")).unwrap();
        let gains = vec![Mat::from_row_slice(1, 2, &[-1.0, -0.2]); ocp.horizon()];
        let aug = AugmentedOcp::fixed_gain(&ocp, &gains).unwrap();
        let u: Vec<Vec64> = (0..ocp.horizon()).map(|k| Vec64::from_element(1, 0.1 * k as f64)).collect();
        let xs = aug.rollout(&u).unwrap();
        let traj = rollout(&ocp, &u).unwrap();
        let sens = crate::model::evaluate_sensitivities(&ocp, &traj).unwrap();
        let p = propagate_ellipsoids(&sens, &gains, ocp.initial_ellipsoid(), ocp.sigma()).unwrap();
        for k in 0..=ocp.horizon() {
            let (x, pk) = aug.unpack_state(&xs[k]);
            assert!((x - &traj.x[k]).amax() < 1e-12);
            assert!((pk - &p[k]).amax() < 1e-12);
        }
    }

    #[test]
    fn lyapunov_jacobian_matches_differences() {
        let acl = Mat::from_row_slice(3, 3, &[1.0, 0.2, -0.1, 0.0, 0.9, 0.3, 0.4, -0.5, 1.1]);
        let jac = AugmentedOcp::lyapunov_jacobian(&acl);
        let p0 = pack_symmetric(&Mat::identity(3, 3));
        let fd = central_jacobian(|p| pack_symmetric(&(&acl * unpack_symmetric(p, 3) * acl.transpose())), &p0, 1e-6);
        assert!((jac - fd).amax() < 1e-8);
    }

    #[test]
    fn zero_noise_reduces_to_the_nominal_problem() {
        let ocp = build_problem(&ProblemParams::named("double_integrator"))
            .unwrap()
            .with_sigma(0.0)
            .unwrap();
        let gains = vec![Mat::zeros(1, 2); ocp.horizon()];
        let sol = solve_augmented_fixed_gain(&ocp, &gains, &OracleOptions::default()).unwrap();
        let nom = crate::nominal::solve_nominal(
            &ocp,
            &ConstraintValues::zeros(&ocp),
            &initial_guess(&ocp),
            &crate::nominal::NominalSolveOptions {
                kkt_tol: 1e-10,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(sol.traj.distance(&nom.traj) < 1e-6);
        assert_eq!(sol.backoffs.inf_norm(), 0.0);
    }

    #[test]
    fn large_instances_are_refused() {
        let ocp = build_problem(&ProblemParams {
            masses: 7,
            ..ProblemParams::named("mass_chain")
        })
        .unwrap();
        let gains = vec![Mat::zeros(1, 14); ocp.horizon()];
        let r = solve_augmented_fixed_gain(&ocp, &gains, &OracleOptions::default());
        assert!(matches!(r, Err(Error::InstanceTooLarge(_))));
    }
}
