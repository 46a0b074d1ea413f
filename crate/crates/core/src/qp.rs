//! Stage-structured QP solver.
//!
//! Solves
//!
//! ```text
//! min  sum_k 0.5 [x;u]' [[Q, S'], [S, R]] [x;u] + q'x + r'u  + 0.5 x_N' Q_N x_N + q_N' x_N + rho 1'e
//! s.t. x_0 = 0,  x_{k+1} = A_k x_k + B_k u_k + f_k,
//!      C_k x_k + D_k u_k + g_k <= e_k,  e_k >= 0
//! ```
//!
//! with a Mehrotra predictor-corrector interior point method. The elastic
//! variables `e` make every instance feasible; each Newton system is reduced
//! to an equality-constrained LQ problem and solved by a Riccati sweep, so the
//! cost per iteration is linear in the horizon.

use nalgebra::Cholesky;
use nalgebra::Dyn;

use crate::error::{Error, Result};
use crate::linalg::{inf_norm, symmetrize, Mat, Vec64};

#[derive(Debug, Clone)]
pub struct QpStage {
    pub q: Mat,
    /// `nu x nx` cross term.
    pub s: Mat,
    pub r: Mat,
    pub qv: Vec64,
    pub rv: Vec64,
    pub a: Mat,
    pub b: Mat,
    pub f: Vec64,
    pub c: Mat,
    pub d: Mat,
    pub g: Vec64,
}

#[derive(Debug, Clone)]
pub struct OcpQp {
    pub stages: Vec<QpStage>,
    pub qn: Mat,
    pub qvn: Vec64,
    pub cn: Mat,
    pub gn: Vec64,
}

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    /// Exact-penalty weight on constraint violation.
    pub rho: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Shift indefinite stage blocks instead of failing.
    pub regularize: bool,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            rho: 1e4,
            tol: 1e-10,
            max_iter: 100,
            regularize: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    /// `x_0..x_N` (`x_0 = 0`).
    pub x: Vec<Vec64>,
    pub u: Vec<Vec64>,
    /// Dynamics multipliers, `pi_k` belongs to `x_{k+1} = ...`.
    pub pi: Vec<Vec64>,
    /// Inequality multipliers per stage, terminal last.
    pub lam: Vec<Vec64>,
    /// Elastic slacks; nonzero entries mean the linearization is infeasible.
    pub slack: Vec<Vec64>,
    pub iterations: usize,
}

impl QpSolution {
    pub fn slack_norm(&self) -> f64 {
        self.slack.iter().map(inf_norm).fold(0.0, f64::max)
    }
}

#[derive(Clone)]
struct Iterate {
    x: Vec<Vec64>,
    u: Vec<Vec64>,
    pi: Vec<Vec64>,
    lam: Vec<Vec64>,
    nu: Vec<Vec64>,
    t: Vec<Vec64>,
    e: Vec<Vec64>,
}

struct Residuals {
    rx: Vec<Vec64>,
    ru: Vec<Vec64>,
    rdyn: Vec<Vec64>,
    rp: Vec<Vec64>,
    re: Vec<Vec64>,
}

impl Residuals {
    fn norm(&self) -> f64 {
        [&self.rx, &self.ru, &self.rdyn, &self.rp, &self.re]
            .iter()
            .flat_map(|v| v.iter())
            .map(inf_norm)
            .fold(0.0, f64::max)
    }
}

struct Step {
    x: Vec<Vec64>,
    u: Vec<Vec64>,
    pi: Vec<Vec64>,
    lam: Vec<Vec64>,
    nu: Vec<Vec64>,
    t: Vec<Vec64>,
    e: Vec<Vec64>,
}

struct Factor {
    k: Vec<Mat>,
    chol: Vec<Cholesky<f64, Dyn>>,
    /// `P_1..P_N`, index `k` holds `P_{k+1}`.
    p: Vec<Mat>,
    /// Constraint scaling `1 / d` per stage.
    dinv: Vec<Vec64>,
}

impl OcpQp {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    fn g(&self, k: usize) -> &Vec64 {
        if k == self.horizon() {
            &self.gn
        } else {
            &self.stages[k].g
        }
    }

    /// `C_k x_k + D_k u_k` (no `g`).
    fn cz(&self, k: usize, x: &[Vec64], u: &[Vec64]) -> Vec64 {
        if k == self.horizon() {
            &self.cn * &x[k]
        } else {
            let st = &self.stages[k];
            let mut v = &st.c * &x[k];
            v.gemv(1.0, &st.d, &u[k], 1.0);
            v
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.horizon();
        if n == 0 {
            return Err(Error::QpSubproblemFailure("empty horizon".into()));
        }
        let nx = self.qn.nrows();
        for (k, st) in self.stages.iter().enumerate() {
            let nu = st.r.nrows();
            let nh = st.g.len();
            let ok = st.q.shape() == (nx, nx)
                && st.s.shape() == (nu, nx)
                && st.r.shape() == (nu, nu)
                && st.qv.len() == nx
                && st.rv.len() == nu
                && st.a.shape() == (nx, nx)
                && st.b.shape() == (nx, nu)
                && st.f.len() == nx
                && st.c.shape() == (nh, nx)
                && st.d.shape() == (nh, nu);
            if !ok {
                return Err(Error::QpSubproblemFailure(format!("inconsistent data at stage {k}")));
            }
        }
        if self.cn.shape() != (self.gn.len(), nx) || self.qvn.len() != nx {
            return Err(Error::QpSubproblemFailure("inconsistent terminal data".into()));
        }
        Ok(())
    }

    fn num_ineq(&self) -> usize {
        self.stages.iter().map(|s| s.g.len()).sum::<usize>() + self.gn.len()
    }

    fn residuals(&self, it: &Iterate, rho: f64) -> Residuals {
        let n = self.horizon();
        let mut rx = Vec::with_capacity(n + 1);
        let mut ru = Vec::with_capacity(n);
        let mut rdyn = Vec::with_capacity(n);
        for (k, st) in self.stages.iter().enumerate() {
            let (x, u) = (&it.x[k], &it.u[k]);
            let mut gx = st.qv.clone();
            if k > 0 {
                gx.gemv(1.0, &st.q, x, 1.0);
                gx.gemv_tr(1.0, &st.s, u, 1.0);
                gx.gemv_tr(1.0, &st.c, &it.lam[k], 1.0);
                gx.gemv_tr(1.0, &st.a, &it.pi[k], 1.0);
                gx -= &it.pi[k - 1];
            } else {
                gx.fill(0.0);
            }
            rx.push(gx);
            let mut gu = st.rv.clone();
            gu.gemv(1.0, &st.r, u, 1.0);
            gu.gemv(1.0, &st.s, x, 1.0);
            gu.gemv_tr(1.0, &st.d, &it.lam[k], 1.0);
            gu.gemv_tr(1.0, &st.b, &it.pi[k], 1.0);
            ru.push(gu);
            let mut d = st.f.clone();
            d.gemv(1.0, &st.a, x, 1.0);
            d.gemv(1.0, &st.b, u, 1.0);
            d -= &it.x[k + 1];
            rdyn.push(d);
        }
        let mut gn = self.qvn.clone();
        gn.gemv(1.0, &self.qn, &it.x[n], 1.0);
        gn.gemv_tr(1.0, &self.cn, &it.lam[n], 1.0);
        gn -= &it.pi[n - 1];
        rx.push(gn);
        let mut rp = Vec::with_capacity(n + 1);
        let mut re = Vec::with_capacity(n + 1);
        for k in 0..=n {
            rp.push(self.cz(k, &it.x, &it.u) + self.g(k) - &it.e[k] + &it.t[k]);
            re.push((&it.lam[k] + &it.nu[k]).map(|v| rho - v));
        }
        Residuals { rx, ru, rdyn, rp, re }
    }

    fn factor(&self, it: &Iterate, regularize: bool) -> Result<Factor> {
        let n = self.horizon();
        let dinv: Vec<Vec64> = (0..=n)
            .map(|k| {
                Vec64::from_iterator(
                    it.t[k].len(),
                    (0..it.t[k].len()).map(|i| 1.0 / (it.t[k][i] / it.lam[k][i] + it.e[k][i] / it.nu[k][i])),
                )
            })
            .collect();
        let scaled = |c: &Mat, w: &Vec64| {
            let mut m = c.clone();
            for (i, mut row) in m.row_iter_mut().enumerate() {
                row *= w[i];
            }
            m
        };
        let mut pn = self.qn.clone();
        pn.gemm_tr(1.0, &self.cn, &scaled(&self.cn, &dinv[n]), 1.0);
        symmetrize(&mut pn);
        let mut p = vec![Mat::zeros(0, 0); n];
        let mut ks = Vec::with_capacity(n);
        let mut chols = Vec::with_capacity(n);
        p[n - 1] = pn;
        for k in (0..n).rev() {
            let st = &self.stages[k];
            let dc = scaled(&st.c, &dinv[k]);
            let dd = scaled(&st.d, &dinv[k]);
            let pk1 = &p[k];
            let pa = pk1 * &st.a;
            let pb = pk1 * &st.b;
            let mut huu = st.r.clone();
            huu.gemm_tr(1.0, &st.d, &dd, 1.0);
            huu.gemm_tr(1.0, &st.b, &pb, 1.0);
            symmetrize(&mut huu);
            let mut hux = st.s.clone();
            hux.gemm_tr(1.0, &st.d, &dc, 1.0);
            hux.gemm_tr(1.0, &st.b, &pa, 1.0);
            let chol = if regularize { regularized_cholesky(&huu) } else { Cholesky::new(huu) };
            let chol = chol.ok_or_else(|| {
                Error::QpSubproblemFailure(format!("reduced Hessian not positive definite at stage {k}"))
            })?;
            let mut kk = chol.solve(&hux);
            kk.neg_mut();
            if k > 0 {
                let mut pk = st.q.clone();
                pk.gemm_tr(1.0, &st.c, &dc, 1.0);
                pk.gemm_tr(1.0, &st.a, &pa, 1.0);
                pk.gemm_tr(1.0, &hux, &kk, 1.0);
                symmetrize(&mut pk);
                if !pk.iter().all(|v| v.is_finite()) {
                    return Err(Error::QpSubproblemFailure(format!("non-finite Riccati matrix at stage {k}")));
                }
                p[k - 1] = pk;
            }
            ks.push(kk);
            chols.push(chol);
        }
        ks.reverse();
        chols.reverse();
        Ok(Factor {
            k: ks,
            chol: chols,
            p,
            dinv,
        })
    }

    /// Newton direction for complementarity targets `r_lam = lam t - ...`, `r_nu = nu e - ...`.
    fn direction(&self, it: &Iterate, res: &Residuals, fac: &Factor, r_lam: &[Vec64], r_nu: &[Vec64]) -> Step {
        let n = self.horizon();
        // rhat = r_p + (r_nu + e r_e) / nu - r_lam / lam
        let rhat: Vec<Vec64> = (0..=n)
            .map(|k| {
                Vec64::from_iterator(
                    res.rp[k].len(),
                    (0..res.rp[k].len()).map(|i| {
                        res.rp[k][i] + (r_nu[k][i] + it.e[k][i] * res.re[k][i]) / it.nu[k][i] - r_lam[k][i] / it.lam[k][i]
                    }),
                )
            })
            .collect();
        let scaled_r: Vec<Vec64> = (0..=n).map(|k| rhat[k].component_mul(&fac.dinv[k])).collect();

        // backward vector pass
        let mut pvec = res.rx[n].clone();
        pvec.gemv_tr(1.0, &self.cn, &scaled_r[n], 1.0);
        let mut kff = vec![Vec64::zeros(0); n];
        let mut pv = vec![Vec64::zeros(0); n];
        for k in (0..n).rev() {
            let st = &self.stages[k];
            let mut w = pvec.clone();
            w.gemv(1.0, &fac.p[k], &res.rdyn[k], 1.0);
            let mut hu = res.ru[k].clone();
            hu.gemv_tr(1.0, &st.d, &scaled_r[k], 1.0);
            hu.gemv_tr(1.0, &st.b, &w, 1.0);
            let mut kf = fac.chol[k].solve(&hu);
            kf.neg_mut();
            pv[k] = pvec;
            pvec = res.rx[k].clone();
            if k > 0 {
                pvec.gemv_tr(1.0, &st.c, &scaled_r[k], 1.0);
                pvec.gemv_tr(1.0, &st.a, &w, 1.0);
                pvec.gemv_tr(1.0, &fac.k[k], &hu, 1.0);
            }
            kff[k] = kf;
        }

        // forward pass
        let nx = self.qn.nrows();
        let mut dx = vec![Vec64::zeros(nx); n + 1];
        let mut du = Vec::with_capacity(n);
        let mut dpi = Vec::with_capacity(n);
        for k in 0..n {
            let st = &self.stages[k];
            let mut duk = kff[k].clone();
            duk.gemv(1.0, &fac.k[k], &dx[k], 1.0);
            let mut next = res.rdyn[k].clone();
            next.gemv(1.0, &st.a, &dx[k], 1.0);
            next.gemv(1.0, &st.b, &duk, 1.0);
            let mut dp = std::mem::take(&mut pv[k]);
            dp.gemv(1.0, &fac.p[k], &next, 1.0);
            dx[k + 1] = next;
            dpi.push(dp);
            du.push(duk);
        }

        let mut dlam = Vec::with_capacity(n + 1);
        let mut dnu = Vec::with_capacity(n + 1);
        let mut dt = Vec::with_capacity(n + 1);
        let mut de = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let cdz = self.cz(k, &dx, &du);
            let m = cdz.len();
            let dl = Vec64::from_iterator(m, (0..m).map(|i| (cdz[i] + rhat[k][i]) * fac.dinv[k][i]));
            let dtt = Vec64::from_iterator(m, (0..m).map(|i| (-r_lam[k][i] - it.t[k][i] * dl[i]) / it.lam[k][i]));
            let dee = Vec64::from_iterator(
                m,
                (0..m).map(|i| (-r_nu[k][i] - it.e[k][i] * res.re[k][i] + it.e[k][i] * dl[i]) / it.nu[k][i]),
            );
            let dn = Vec64::from_iterator(m, (0..m).map(|i| res.re[k][i] - dl[i]));
            dlam.push(dl);
            dnu.push(dn);
            dt.push(dtt);
            de.push(dee);
        }
        Step {
            x: dx,
            u: du,
            pi: dpi,
            lam: dlam,
            nu: dnu,
            t: dt,
            e: de,
        }
    }
}

fn regularized_cholesky(h: &Mat) -> Option<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(h.clone()) {
        return Some(c);
    }
    let scale = 1.0 + h.amax();
    let mut reg = 1e-12 * scale;
    while reg < 1e-2 * scale {
        let mut hr = h.clone();
        for i in 0..hr.nrows() {
            hr[(i, i)] += reg;
        }
        if let Some(c) = Cholesky::new(hr) {
            return Some(c);
        }
        reg *= 100.0;
    }
    None
}

/// Largest `alpha <= 1` with `v + alpha dv >= 0` for every pair.
fn max_step(pairs: &[(&[Vec64], &[Vec64])]) -> f64 {
    let mut alpha: f64 = 1.0;
    for (v, dv) in pairs {
        for (a, b) in v.iter().zip(dv.iter()) {
            for i in 0..a.len() {
                if b[i] < 0.0 {
                    alpha = alpha.min(-a[i] / b[i]);
                }
            }
        }
    }
    alpha
}

fn dot_pairs(a: &[Vec64], b: &[Vec64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn max_product(a: &[Vec64], b: &[Vec64]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| p * q))
        .fold(0.0, f64::max)
}

fn axpy(v: &mut [Vec64], alpha: f64, d: &[Vec64]) {
    for (x, dx) in v.iter_mut().zip(d) {
        x.axpy(alpha, dx, 1.0);
    }
}

fn shifted_products(a: &[Vec64], da: &[Vec64], b: &[Vec64], db: &[Vec64], alpha: f64) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        for i in 0..a[k].len() {
            s += (a[k][i] + alpha * da[k][i]) * (b[k][i] + alpha * db[k][i]);
        }
    }
    s
}

pub fn solve_qp(qp: &OcpQp, opts: &QpOptions) -> Result<QpSolution> {
    qp.validate()?;
    if !(opts.rho > 1.0) || !opts.rho.is_finite() {
        return Err(Error::InvalidParameter(format!("QP penalty weight must exceed 1, got {}", opts.rho)));
    }
    let n = qp.horizon();
    let nx = qp.qn.nrows();
    let m_total = qp.num_ineq();

    let mut it = Iterate {
        x: vec![Vec64::zeros(nx); n + 1],
        u: qp.stages.iter().map(|s| Vec64::zeros(s.r.nrows())).collect(),
        pi: vec![Vec64::zeros(nx); n],
        lam: Vec::with_capacity(n + 1),
        nu: Vec::with_capacity(n + 1),
        t: Vec::with_capacity(n + 1),
        e: Vec::with_capacity(n + 1),
    };
    for k in 0..=n {
        let g = qp.g(k);
        let e = g.map(|v| v.max(0.0) + 1.0);
        it.t.push(&e - g);
        it.e.push(e);
        it.lam.push(Vec64::from_element(g.len(), 1.0));
        it.nu.push(Vec64::from_element(g.len(), opts.rho - 1.0));
    }

    let data_scale = 1.0
        + qp.stages
            .iter()
            .map(|s| inf_norm(&s.qv).max(inf_norm(&s.rv)).max(inf_norm(&s.f)).max(inf_norm(&s.g)))
            .fold(inf_norm(&qp.qvn).max(inf_norm(&qp.gn)), f64::max);
    let tol = opts.tol * data_scale;

    for iter in 0..opts.max_iter {
        let res = qp.residuals(&it, opts.rho);
        let mu = if m_total == 0 {
            0.0
        } else {
            (dot_pairs(&it.lam, &it.t) + dot_pairs(&it.nu, &it.e)) / (2 * m_total) as f64
        };
        let rnorm = res.norm();
        if !rnorm.is_finite() || !mu.is_finite() {
            return Err(Error::QpSubproblemFailure(format!("non-finite iterate at iteration {iter}")));
        }
        let comp = max_product(&it.lam, &it.t).max(max_product(&it.nu, &it.e));
        if rnorm <= tol && comp <= tol {
            return Ok(QpSolution {
                x: it.x,
                u: it.u,
                pi: it.pi,
                lam: it.lam,
                slack: it.e,
                iterations: iter,
            });
        }

        let fac = match qp.factor(&it, opts.regularize) {
            Ok(f) => f,
            // ill-conditioning near the end: keep an iterate that is already accurate
            Err(_) if rnorm <= 1e4 * tol && comp <= 1e4 * tol => {
                return Ok(QpSolution {
                    x: it.x,
                    u: it.u,
                    pi: it.pi,
                    lam: it.lam,
                    slack: it.e,
                    iterations: iter,
                })
            }
            Err(e) => return Err(e),
        };
        let r_lam: Vec<Vec64> = (0..=n).map(|k| it.lam[k].component_mul(&it.t[k])).collect();
        let r_nu: Vec<Vec64> = (0..=n).map(|k| it.nu[k].component_mul(&it.e[k])).collect();
        let aff = qp.direction(&it, &res, &fac, &r_lam, &r_nu);
        let step_of = |d: &Step| {
            max_step(&[
                (&it.lam, &d.lam),
                (&it.nu, &d.nu),
                (&it.t, &d.t),
                (&it.e, &d.e),
            ])
        };

        let dir = if m_total == 0 {
            aff
        } else {
            let a_aff = step_of(&aff);
            let mu_aff = (shifted_products(&it.lam, &aff.lam, &it.t, &aff.t, a_aff)
                + shifted_products(&it.nu, &aff.nu, &it.e, &aff.e, a_aff))
                / (2 * m_total) as f64;
            let sigma = (mu_aff / mu).powi(3).min(1.0);
            let target = (sigma * mu).max(0.1 * tol);
            let r_lam_c: Vec<Vec64> = (0..=n)
                .map(|k| (&r_lam[k] + aff.lam[k].component_mul(&aff.t[k])).add_scalar(-target))
                .collect();
            let r_nu_c: Vec<Vec64> = (0..=n)
                .map(|k| (&r_nu[k] + aff.nu[k].component_mul(&aff.e[k])).add_scalar(-target))
                .collect();
            qp.direction(&it, &res, &fac, &r_lam_c, &r_nu_c)
        };

        let alpha = if m_total == 0 { 1.0 } else { (0.995 * step_of(&dir)).min(1.0) };
        axpy(&mut it.x, alpha, &dir.x);
        axpy(&mut it.u, alpha, &dir.u);
        axpy(&mut it.pi, alpha, &dir.pi);
        axpy(&mut it.lam, alpha, &dir.lam);
        axpy(&mut it.nu, alpha, &dir.nu);
        axpy(&mut it.t, alpha, &dir.t);
        axpy(&mut it.e, alpha, &dir.e);
    }
    Err(Error::QpSubproblemFailure(format!(
        "interior point method did not converge in {} iterations",
        opts.max_iter
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_stage(a: f64, b: f64, f: f64, c: Option<(f64, f64, f64)>) -> QpStage {
        let (cm, dm, gv) = match c {
            Some((cx, cu, g)) => (
                Mat::from_element(1, 1, cx),
                Mat::from_element(1, 1, cu),
                Vec64::from_element(1, g),
            ),
            None => (Mat::zeros(0, 1), Mat::zeros(0, 1), Vec64::zeros(0)),
        };
        QpStage {
            q: Mat::from_element(1, 1, 1.0),
            s: Mat::zeros(1, 1),
            r: Mat::from_element(1, 1, 1.0),
            qv: Vec64::zeros(1),
            rv: Vec64::from_element(1, -1.0),
            a: Mat::from_element(1, 1, a),
            b: Mat::from_element(1, 1, b),
            f: Vec64::from_element(1, f),
            c: cm,
            d: dm,
            g: gv,
        }
    }

    #[test]
    fn unconstrained_one_stage_closed_form() {
        // min 0.5 u^2 - u + 0.5 x1^2, x1 = u  ->  u = 0.5
        let qp = OcpQp {
            stages: vec![scalar_stage(1.0, 1.0, 0.0, None)],
            qn: Mat::from_element(1, 1, 1.0),
            qvn: Vec64::zeros(1),
            cn: Mat::zeros(0, 1),
            gn: Vec64::zeros(0),
        };
        let sol = solve_qp(&qp, &QpOptions::default()).unwrap();
        assert!((sol.u[0][0] - 0.5).abs() < 1e-12);
        assert!((sol.x[1][0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn active_bound_gives_multiplier() {
        // min 0.5 u^2 - u + 0.5 x1^2 s.t. u <= 0.2: u = 0.2, lam = 1 - 0.2 - 0.2 = 0.6
        let qp = OcpQp {
            stages: vec![scalar_stage(1.0, 1.0, 0.0, Some((0.0, 1.0, -0.2)))],
            qn: Mat::from_element(1, 1, 1.0),
            qvn: Vec64::zeros(1),
            cn: Mat::zeros(0, 1),
            gn: Vec64::zeros(0),
        };
        let sol = solve_qp(&qp, &QpOptions::default()).unwrap();
        assert!((sol.u[0][0] - 0.2).abs() < 1e-8);
        assert!((sol.lam[0][0] - 0.6).abs() < 1e-7);
        assert!(sol.slack_norm() < 1e-8);
    }

    #[test]
    fn infeasible_linearization_uses_the_slack() {
        // x1 = u + 1 and x1 <= 0 with u <= -2 and u >= -1.5 is infeasible
        let mut st = scalar_stage(1.0, 1.0, 1.0, None);
        st.c = Mat::zeros(2, 1);
        st.d = Mat::from_column_slice(2, 1, &[1.0, -1.0]);
        st.g = Vec64::from_vec(vec![2.0, -1.5]);
        let qp = OcpQp {
            stages: vec![st],
            qn: Mat::from_element(1, 1, 1.0),
            qvn: Vec64::zeros(1),
            cn: Mat::zeros(0, 1),
            gn: Vec64::zeros(0),
        };
        let sol = solve_qp(&qp, &QpOptions::default()).unwrap();
        assert!(sol.slack_norm() > 0.4);
    }

    #[test]
    fn matches_dense_kkt_on_a_random_lq() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (nx, nu, n) = (3, 2, 5);
        let mut rnd = |r: usize, c: usize| Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let mut stages = Vec::new();
        for _ in 0..n {
            let lq = rnd(nx + nu, nx + nu);
            let h = &lq * lq.transpose() + Mat::identity(nx + nu, nx + nu) * 0.5;
            stages.push(QpStage {
                q: h.view((0, 0), (nx, nx)).into_owned(),
                s: h.view((nx, 0), (nu, nx)).into_owned(),
                r: h.view((nx, nx), (nu, nu)).into_owned(),
                qv: rnd(nx, 1).column(0).into_owned(),
                rv: rnd(nu, 1).column(0).into_owned(),
                a: rnd(nx, nx),
                b: rnd(nx, nu),
                f: rnd(nx, 1).column(0).into_owned(),
                c: Mat::zeros(0, nx),
                d: Mat::zeros(0, nu),
                g: Vec64::zeros(0),
            });
        }
        let qn = Mat::identity(nx, nx) * 2.0;
        let qvn = rnd(nx, 1).column(0).into_owned();
        let qp = OcpQp {
            stages: stages.clone(),
            qn: qn.clone(),
            qvn: qvn.clone(),
            cn: Mat::zeros(0, nx),
            gn: Vec64::zeros(0),
        };
        let sol = solve_qp(&qp, &QpOptions::default()).unwrap();

        // dense KKT over z = (u_0, x_1, u_1, ..., x_N)
        let nz = n * nu + n * nx;
        let ne = n * nx;
        let xi = |k: usize| nu + (k - 1) * (nx + nu);
        let ui = |k: usize| if k == 0 { 0 } else { xi(k) + nx };
        let mut kkt = Mat::zeros(nz + ne, nz + ne);
        let mut rhs = Vec64::zeros(nz + ne);
        for (k, st) in stages.iter().enumerate() {
            kkt.view_mut((ui(k), ui(k)), (nu, nu)).copy_from(&st.r);
            rhs.rows_mut(ui(k), nu).copy_from(&(-&st.rv));
            if k > 0 {
                kkt.view_mut((xi(k), xi(k)), (nx, nx)).copy_from(&st.q);
                kkt.view_mut((ui(k), xi(k)), (nu, nx)).copy_from(&st.s);
                kkt.view_mut((xi(k), ui(k)), (nx, nu)).copy_from(&st.s.transpose());
                rhs.rows_mut(xi(k), nx).copy_from(&(-&st.qv));
            }
            let row = nz + k * nx;
            kkt.view_mut((row, ui(k)), (nx, nu)).copy_from(&st.b);
            if k > 0 {
                kkt.view_mut((row, xi(k)), (nx, nx)).copy_from(&st.a);
            }
            let xn = xi(k + 1);
            kkt.view_mut((row, xn), (nx, nx)).copy_from(&(-Mat::identity(nx, nx)));
            rhs.rows_mut(row, nx).copy_from(&(-&st.f));
        }
        kkt.view_mut((xi(n), xi(n)), (nx, nx)).copy_from(&qn);
        rhs.rows_mut(xi(n), nx).copy_from(&(-&qvn));
        for r in nz..nz + ne {
            for c in 0..nz {
                kkt[(c, r)] = kkt[(r, c)];
            }
        }
        let z = kkt.lu().solve(&rhs).unwrap();
        for k in 0..n {
            assert!((&sol.u[k] - z.rows(ui(k), nu)).amax() < 1e-9);
            assert!((&sol.x[k + 1] - z.rows(xi(k + 1), nx)).amax() < 1e-9);
        }
    }
}
