//! Ellipsoid-space computations: tube LQR via backward Riccati recursion,
//! forward Lyapunov propagation of the ellipsoid shapes, backoffs, and the
//! uncertainty weightings used by the tube LQR.

use crate::error::{Error, Result};
use crate::linalg::{check_psd, cholesky, is_finite, min_eigenvalue, symmetrize, Mat, Vec64};
use crate::model::{ConstraintValues, SensitivityBundle};

/// Floor on the minimum eigenvalue of every `R_k` block.
pub const R_MIN: f64 = 1e-8;
/// Default clamp of the barrier curvature argument, `h + b <= -delta`.
pub const DEFAULT_BARRIER_CLAMP: f64 = 1e-3;
/// Default floor on backoffs in the multiplier weighting.
pub const DEFAULT_SIRO_BACKOFF_FLOOR: f64 = 1e-6;

/// Worst-case tightening per stage constraint and terminal constraint.
pub type Backoffs = ConstraintValues;
/// Inequality multipliers, same layout as [`Backoffs`].
pub type Multipliers = ConstraintValues;

/// Ellipsoid shapes `P_0..P_N` and feedback gains `K_0..K_{N-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeTrajectory {
    pub p: Vec<Mat>,
    pub k: Vec<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageWeight {
    pub q: Mat,
    /// Cross term, `nu x nx`.
    pub s: Mat,
    pub r: Mat,
}

impl StageWeight {
    /// The joint weight `[[Q, S'], [S, R]]`.
    pub fn joint(&self) -> Mat {
        let nx = self.q.nrows();
        let nu = self.r.nrows();
        let mut c = Mat::zeros(nx + nu, nx + nu);
        c.view_mut((0, 0), (nx, nx)).copy_from(&self.q);
        c.view_mut((nx, 0), (nu, nx)).copy_from(&self.s);
        c.view_mut((0, nx), (nx, nu)).copy_from(&self.s.transpose());
        c.view_mut((nx, nx), (nu, nu)).copy_from(&self.r);
        c
    }

    fn add_rank_one(&mut self, coeff: f64, gx: &Vec64, gu: &Vec64) {
        self.q += coeff * gx * gx.transpose();
        self.s += coeff * gu * gx.transpose();
        self.r += coeff * gu * gu.transpose();
    }

    fn symmetrize(&mut self) {
        symmetrize(&mut self.q);
        symmetrize(&mut self.r);
    }
}

/// Tube LQR weights `C_k` and terminal `Q_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageWeights {
    pub stages: Vec<StageWeight>,
    pub terminal: Mat,
}

impl StageWeights {
    /// Checks `C_k >= 0`, `Q_k >= 0`, `R_k >= R_MIN I` and `Q_N >= 0`.
    pub fn validate(&self) -> Result<()> {
        for (k, w) in self.stages.iter().enumerate() {
            if !(is_finite(&w.q) && is_finite(&w.s) && is_finite(&w.r)) {
                return Err(Error::InvalidWeights(format!("non-finite weight at stage {k}")));
            }
            check_psd(&w.joint(), &format!("C_{k}")).map_err(Error::InvalidWeights)?;
            check_psd(&w.q, &format!("Q_{k}")).map_err(Error::InvalidWeights)?;
            let rmin = min_eigenvalue(&w.r);
            if rmin < R_MIN * (1.0 - 1e-9) {
                return Err(Error::InvalidWeights(format!(
                    "R_{k} must be positive definite (min eigenvalue {rmin:.3e})"
                )));
            }
        }
        check_psd(&self.terminal, "Q_N").map_err(Error::InvalidWeights)
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }
}

/// Cost-to-go matrices `V_0..V_N` of the tube LQR.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiValue {
    pub v: Vec<Mat>,
}

/// Backward Riccati recursion of the weighted-trace tube LQR. Never reads
/// the disturbance term, so the gains are certainty-equivalent.
pub fn riccati_recursion(sens: &SensitivityBundle, w: &StageWeights) -> Result<(Vec<Mat>, RiccatiValue)> {
    let n = sens.horizon();
    if w.horizon() != n {
        return Err(Error::InvalidWeights(format!("weights cover {} stages, expected {n}", w.horizon())));
    }
    let mut v = vec![Mat::zeros(0, 0); n + 1];
    let mut gains = vec![Mat::zeros(0, 0); n];
    v[n] = w.terminal.clone();
    for k in (0..n).rev() {
        let st = &sens.stages[k];
        let wk = &w.stages[k];
        let vb = &v[k + 1] * &st.b;
        let rhat = &wk.r + st.b.transpose() * &vb;
        let shat = &wk.s + vb.transpose() * &st.a;
        let chol = cholesky(&rhat).ok_or(Error::IndefiniteRiccatiBlock { stage: k })?;
        let kk = -chol.solve(&shat);
        let mut vk = &wk.q + st.a.transpose() * &v[k + 1] * &st.a + shat.transpose() * &kk;
        symmetrize(&mut vk);
        if !is_finite(&vk) {
            return Err(Error::IndefiniteRiccatiBlock { stage: k });
        }
        gains[k] = kk;
        v[k] = vk;
    }
    Ok((gains, RiccatiValue { v }))
}

/// Forward Lyapunov recursion `P_{k+1} = (A + BK) P_k (A + BK)' + W~_k`,
/// starting from `sigma^2 P0`.
pub fn propagate_ellipsoids(sens: &SensitivityBundle, gains: &[Mat], p0: &Mat, sigma: f64) -> Result<Vec<Mat>> {
    let n = sens.horizon();
    if gains.len() != n {
        return Err(Error::DimensionMismatch {
            what: "feedback gains".into(),
            expected: n,
            got: gains.len(),
        });
    }
    let mut p = Vec::with_capacity(n + 1);
    p.push(p0 * (sigma * sigma));
    for (k, st) in sens.stages.iter().enumerate() {
        let acl = &st.a + &st.b * &gains[k];
        let mut next = &acl * &p[k] * acl.transpose() + &st.w_eff;
        symmetrize(&mut next);
        if !is_finite(&next) {
            return Err(Error::DivergentTube { stage: k + 1 });
        }
        p.push(next);
    }
    Ok(p)
}

/// `||g||_P` with small negative radicands clamped to zero.
fn weighted_norm(g: &Vec64, p: &Mat, stage: usize) -> Result<f64> {
    let rad = (g.transpose() * p * g)[(0, 0)];
    if rad >= 0.0 {
        return Ok(rad.sqrt());
    }
    let scale = 1.0 + g.norm_squared() * p.amax();
    if rad < -1e-12 * scale {
        return Err(Error::NonPsdTube { stage });
    }
    Ok(0.0)
}

/// Linearized worst-case constraint deviation over the tube, times `gamma`.
pub fn compute_backoffs(sens: &SensitivityBundle, p: &[Mat], gains: &[Mat], gamma: f64) -> Result<Backoffs> {
    let n = sens.horizon();
    if p.len() != n + 1 || gains.len() != n {
        return Err(Error::DimensionMismatch {
            what: "tube length".into(),
            expected: n + 1,
            got: p.len(),
        });
    }
    let mut stage = Vec::with_capacity(n);
    for (k, st) in sens.stages.iter().enumerate() {
        let mut bk = Vec64::zeros(st.h.len());
        for i in 0..st.h.len() {
            let g = st.hx.row(i).transpose() + gains[k].transpose() * st.hu.row(i).transpose();
            bk[i] = gamma * weighted_norm(&g, &p[k], k)?;
        }
        stage.push(bk);
    }
    let mut terminal = Vec64::zeros(sens.terminal_h.len());
    for i in 0..terminal.len() {
        let g = sens.terminal_hx.row(i).transpose();
        terminal[i] = gamma * weighted_norm(&g, &p[n], n)?;
    }
    Ok(Backoffs { stage, terminal })
}

/// The same `C` at every stage.
pub fn constant_weights(q: &Mat, r: &Mat, s: &Mat, qn: &Mat, horizon: usize) -> Result<StageWeights> {
    let w = StageWeights {
        stages: vec![
            StageWeight {
                q: q.clone(),
                s: s.clone(),
                r: r.clone(),
            };
            horizon
        ],
        terminal: qn.clone(),
    };
    w.validate()?;
    Ok(w)
}

/// Log-barrier curvature `phi''(eta) = 1 / eta^2` of `phi(eta) = -log(-eta)`.
pub fn barrier_curvature(eta: f64) -> f64 {
    1.0 / (eta * eta)
}

fn floor_r(w: &mut StageWeights) {
    for st in &mut w.stages {
        st.symmetrize();
        let rmin = min_eigenvalue(&st.r);
        if rmin < R_MIN {
            for i in 0..st.r.nrows() {
                st.r[(i, i)] += R_MIN;
            }
        }
    }
    symmetrize(&mut w.terminal);
}

/// Constraint-adaptive weighting: adds the barrier curvature at the nominal
/// constraint value `min(h, -delta)` along every joint constraint gradient.
/// Terminal constraints enter `Q_N` the same way.
pub fn adaptive_weights(sens: &SensitivityBundle, base: &StageWeights, delta: f64) -> Result<StageWeights> {
    base.validate()?;
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::InvalidWeights(format!("barrier clamp must be positive, got {delta}")));
    }
    let mut w = base.clone();
    for (k, st) in sens.stages.iter().enumerate() {
        for i in 0..st.h.len() {
            let eta = st.h[i].min(-delta);
            let gx = st.hx.row(i).transpose();
            let gu = st.hu.row(i).transpose();
            w.stages[k].add_rank_one(barrier_curvature(eta), &gx, &gu);
        }
    }
    for i in 0..sens.terminal_h.len() {
        let eta = sens.terminal_h[i].min(-delta);
        let g = sens.terminal_hx.row(i).transpose();
        w.terminal += barrier_curvature(eta) * &g * g.transpose();
    }
    floor_r(&mut w);
    Ok(w)
}

/// Multiplier weighting `C̄ + sum mu / (2 max(b, eps_b)) grad h grad h'`.
pub fn siro_weights(
    sens: &SensitivityBundle,
    mu: &Multipliers,
    backoffs: &Backoffs,
    base: &StageWeights,
    eps_b: f64,
) -> Result<StageWeights> {
    base.validate()?;
    if !(eps_b.is_finite() && eps_b > 0.0) {
        return Err(Error::InvalidWeights(format!("backoff floor must be positive, got {eps_b}")));
    }
    let reference = sens.constraint_values();
    if !mu.dims_match(&reference) || !backoffs.dims_match(&reference) {
        return Err(Error::InvalidMultipliers("layout does not match the constraints".into()));
    }
    if let Some(bad) = mu.iter().flat_map(|v| v.iter()).find(|m| !(**m >= 0.0)) {
        return Err(Error::InvalidMultipliers(format!("negative or non-finite multiplier {bad}")));
    }
    let mut w = base.clone();
    for (k, st) in sens.stages.iter().enumerate() {
        for i in 0..st.h.len() {
            let coeff = mu.stage[k][i] / (2.0 * backoffs.stage[k][i].max(eps_b));
            if coeff > 0.0 {
                let gx = st.hx.row(i).transpose();
                let gu = st.hu.row(i).transpose();
                w.stages[k].add_rank_one(coeff, &gx, &gu);
            }
        }
    }
    for i in 0..sens.terminal_h.len() {
        let coeff = mu.terminal[i] / (2.0 * backoffs.terminal[i].max(eps_b));
        let g = sens.terminal_hx.row(i).transpose();
        w.terminal += coeff * &g * g.transpose();
    }
    floor_r(&mut w);
    Ok(w)
}

/// Weighted trace `sum tr(C_k P̌_k) + tr(Q_N P_N)` of the joint
/// state-control ellipsoids.
pub fn tube_lqr_objective(p: &[Mat], gains: &[Mat], w: &StageWeights) -> f64 {
    let mut total = 0.0;
    for (k, wk) in w.stages.iter().enumerate() {
        let pk = &p[k];
        let kp = &gains[k] * pk;
        total += (&wk.q * pk).trace() + 2.0 * (&wk.s * kp.transpose()).trace() + (&wk.r * &kp * gains[k].transpose()).trace();
    }
    total + (&w.terminal * &p[w.stages.len()]).trace()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StageSensitivity;

    fn bundle(a: Mat, b: Mat, w_eff: Mat, hx: Mat, hu: Mat, h: Vec64, n: usize) -> SensitivityBundle {
        let nx = a.nrows();
        SensitivityBundle {
            stages: (0..n)
                .map(|_| StageSensitivity {
                    a: a.clone(),
                    b: b.clone(),
                    gamma: Mat::identity(nx, nx),
                    w_eff: w_eff.clone(),
                    h: h.clone(),
                    hx: hx.clone(),
                    hu: hu.clone(),
                })
                .collect(),
            terminal_h: Vec64::zeros(0),
            terminal_hx: Mat::zeros(0, nx),
        }
    }

    fn scalar(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    #[test]
    fn scalar_riccati_step() {
        let sens = bundle(scalar(1.0), scalar(1.0), scalar(0.0), Mat::zeros(0, 1), Mat::zeros(0, 1), Vec64::zeros(0), 1);
        let w = StageWeights {
            stages: vec![StageWeight { q: scalar(0.0), s: scalar(0.0), r: scalar(1.0) }],
            terminal: scalar(1.0),
        };
        let (k, v) = riccati_recursion(&sens, &w).unwrap();
        assert!((k[0][(0, 0)] + 0.5).abs() < 1e-12);
        assert!((v.v[0][(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn scalar_riccati_beats_grid() {
        let sens = bundle(scalar(1.0), scalar(1.0), scalar(0.3), Mat::zeros(0, 1), Mat::zeros(0, 1), Vec64::zeros(0), 1);
        let w = StageWeights {
            stages: vec![StageWeight { q: scalar(0.0), s: scalar(0.0), r: scalar(1.0) }],
            terminal: scalar(1.0),
        };
        let p0 = scalar(2.0);
        let (k, _) = riccati_recursion(&sens, &w).unwrap();
        let obj = |g: &[Mat]| tube_lqr_objective(&propagate_ellipsoids(&sens, g, &p0, 1.0).unwrap(), g, &w);
        let best = obj(&k);
        for i in 0..10_000 {
            let kk = -5.0 + 10.0 * i as f64 / 9_999.0;
            assert!(best <= obj(&[scalar(kk)]) + 1e-12);
        }
    }

    #[test]
    fn no_actuation_gives_zero_gains() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let sens = bundle(a, Mat::zeros(2, 1), Mat::identity(2, 2), Mat::zeros(0, 2), Mat::zeros(0, 1), Vec64::zeros(0), 4);
        let w = constant_weights(&Mat::identity(2, 2), &scalar(0.1), &Mat::zeros(1, 2), &Mat::identity(2, 2), 4).unwrap();
        let (k, _) = riccati_recursion(&sens, &w).unwrap();
        assert!(k.iter().all(|g| g.amax() == 0.0));
    }

    #[test]
    fn long_horizon_gain_matches_dare_fixed_point() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = Mat::from_row_slice(2, 1, &[0.005, 0.1]);
        let q = Mat::identity(2, 2);
        let r = scalar(0.1);
        // oracle: iterate the Riccati map to convergence
        let mut v = q.clone();
        for _ in 0..100_000 {
            let rh = &r + b.transpose() * &v * &b;
            let sh = b.transpose() * &v * &a;
            let next = &q + a.transpose() * &v * &a - sh.transpose() * rh.try_inverse().unwrap() * &sh;
            if (&next - &v).amax() < 1e-14 {
                v = next;
                break;
            }
            v = next;
        }
        let k_dare = -(&r + b.transpose() * &v * &b).try_inverse().unwrap() * b.transpose() * &v * &a;
        let sens = bundle(a, b, Mat::zeros(2, 2), Mat::zeros(0, 2), Mat::zeros(0, 1), Vec64::zeros(0), 400);
        let w = constant_weights(&q, &r, &Mat::zeros(1, 2), &q, 400).unwrap();
        let (k, _) = riccati_recursion(&sens, &w).unwrap();
        assert!((&k[0] - &k_dare).amax() < 1e-8);
    }

    #[test]
    fn nilpotent_closed_loop_collapses_tube() {
        let a = Mat::from_row_slice(1, 1, &[2.0]);
        let sens = bundle(a, scalar(1.0), scalar(0.0), Mat::zeros(0, 1), Mat::zeros(0, 1), Vec64::zeros(0), 3);
        let p = propagate_ellipsoids(&sens, &vec![scalar(-2.0); 3], &scalar(5.0), 1.0).unwrap();
        assert_eq!(p[0][(0, 0)], 5.0);
        assert!(p[1..].iter().all(|pk| pk.amax() == 0.0));
    }

    #[test]
    fn random_walk_tube_grows_linearly() {
        let sens = bundle(Mat::identity(2, 2), Mat::zeros(2, 1), Mat::identity(2, 2), Mat::zeros(0, 2), Mat::zeros(0, 1), Vec64::zeros(0), 5);
        let p = propagate_ellipsoids(&sens, &vec![Mat::zeros(1, 2); 5], &Mat::zeros(2, 2), 1.0).unwrap();
        for (k, pk) in p.iter().enumerate() {
            assert_eq!(*pk, Mat::identity(2, 2) * k as f64);
        }
    }

    #[test]
    fn sigma_scaling_is_quadratic() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = Mat::from_row_slice(2, 1, &[0.005, 0.1]);
        let sens1 = bundle(a.clone(), b.clone(), Mat::identity(2, 2) * 0.01, Mat::zeros(0, 2), Mat::zeros(0, 1), Vec64::zeros(0), 3);
        let sens2 = bundle(a, b, Mat::identity(2, 2) * 0.04, Mat::zeros(0, 2), Mat::zeros(0, 1), Vec64::zeros(0), 3);
        let gains = vec![Mat::from_row_slice(1, 2, &[-1.0, -0.5]); 3];
        let p0 = Mat::identity(2, 2) * 0.1;
        let p1 = propagate_ellipsoids(&sens1, &gains, &p0, 1.0).unwrap();
        let p2 = propagate_ellipsoids(&sens2, &gains, &p0, 2.0).unwrap();
        for (x, y) in p1.iter().zip(&p2) {
            assert!((x * 4.0 - y).amax() < 1e-15 * (1.0 + y.amax()));
        }
    }

    #[test]
    fn divergent_tube_is_reported() {
        let sens = bundle(scalar(1e100), scalar(0.0), scalar(0.0), Mat::zeros(0, 1), Mat::zeros(0, 1), Vec64::zeros(0), 3);
        let err = propagate_ellipsoids(&sens, &vec![scalar(0.0); 3], &scalar(1.0), 1.0).unwrap_err();
        assert!(matches!(err, Error::DivergentTube { stage: 2 }));
    }

    /// Largest `g'd` over boundary samples of `E(0, P)`.
    fn sampled_support(g: &Vec64, p: &Mat) -> f64 {
        let root = crate::linalg::psd_sqrt(p);
        (0..100_000)
            .map(|i| {
                let t = 2.0 * std::f64::consts::PI * i as f64 / 100_000.0;
                let d = &root * Vec64::from_vec(vec![t.cos(), t.sin()]);
                g.dot(&d)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn backoff_matches_support_function_samples() {
        let p = Mat::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let sens = bundle(Mat::identity(2, 2), Mat::zeros(2, 1), Mat::zeros(2, 2), Mat::from_row_slice(1, 2, &[1.0, 0.0]), Mat::zeros(1, 1), Vec64::from_element(1, -1.0), 1);
        let b = compute_backoffs(&sens, &[p.clone(), p.clone()], &[Mat::zeros(1, 2)], 1.0).unwrap();
        assert!((b.stage[0][0] - 2.0).abs() < 1e-14);
        assert!((sampled_support(&Vec64::from_vec(vec![1.0, 0.0]), &p) - 2.0).abs() < 1e-6);

        // input constraint seen through K = [1 0]; joint ellipsoid support
        let sens = bundle(Mat::identity(2, 2), Mat::zeros(2, 1), Mat::zeros(2, 2), Mat::zeros(1, 2), Mat::from_element(1, 1, 1.0), Vec64::from_element(1, -1.0), 1);
        let gain = Mat::from_row_slice(1, 2, &[1.0, 0.0]);
        let b = compute_backoffs(&sens, &[p.clone(), p.clone()], &[gain.clone()], 1.0).unwrap();
        assert!((b.stage[0][0] - 2.0).abs() < 1e-14);
        let g_eff = gain.transpose() * Vec64::from_element(1, 1.0);
        assert!((sampled_support(&g_eff, &p) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn zero_tube_zero_backoff() {
        let sens = bundle(Mat::identity(2, 2), Mat::zeros(2, 1), Mat::zeros(2, 2), Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 1.0]), Mat::zeros(2, 1), Vec64::from_vec(vec![-1.0, -2.0]), 2);
        let b = compute_backoffs(&sens, &vec![Mat::zeros(2, 2); 3], &vec![Mat::zeros(1, 2); 2], 1.0).unwrap();
        assert_eq!(b.inf_norm(), 0.0);
    }

    #[test]
    fn non_psd_tube_is_rejected() {
        let sens = bundle(Mat::identity(1, 1), Mat::zeros(1, 1), Mat::zeros(1, 1), scalar(1.0), scalar(0.0), Vec64::from_element(1, -1.0), 1);
        let err = compute_backoffs(&sens, &[scalar(-1.0), scalar(0.0)], &[scalar(0.0)], 1.0).unwrap_err();
        assert!(matches!(err, Error::NonPsdTube { stage: 0 }));
    }

    #[test]
    fn constant_weights_validation() {
        let i2 = Mat::identity(2, 2);
        assert!(constant_weights(&i2, &scalar(1e-2), &Mat::zeros(1, 2), &i2, 5).is_ok());
        assert!(matches!(
            constant_weights(&i2, &scalar(0.0), &Mat::zeros(1, 2), &i2, 5),
            Err(Error::InvalidWeights(_))
        ));
        let w = constant_weights(&Mat::zeros(2, 2), &scalar(1.0), &Mat::zeros(1, 2), &Mat::zeros(2, 2), 3).unwrap();
        let sens = bundle(Mat::identity(2, 2), Mat::from_row_slice(2, 1, &[0.0, 1.0]), Mat::zeros(2, 2), Mat::zeros(0, 2), Mat::zeros(0, 1), Vec64::zeros(0), 3);
        let (k, _) = riccati_recursion(&sens, &w).unwrap();
        assert!(k.iter().all(|g| g.amax() == 0.0));
    }

    fn base_r_only() -> StageWeights {
        StageWeights {
            stages: vec![StageWeight { q: Mat::zeros(1, 1), s: Mat::zeros(1, 1), r: scalar(1.0) }],
            terminal: Mat::zeros(1, 1),
        }
    }

    #[test]
    fn adaptive_weights_add_barrier_curvature() {
        // h(z) = z1 - 1 evaluated at -1
        let sens = bundle(scalar(1.0), scalar(1.0), scalar(0.0), scalar(1.0), scalar(0.0), Vec64::from_element(1, -1.0), 1);
        let w = adaptive_weights(&sens, &base_r_only(), DEFAULT_BARRIER_CLAMP).unwrap();
        assert!((w.stages[0].q[(0, 0)] - 1.0).abs() < 1e-15);
        assert_eq!(w.stages[0].r[(0, 0)], 1.0);

        let far = bundle(scalar(1.0), scalar(1.0), scalar(0.0), scalar(1.0), scalar(0.0), Vec64::from_element(1, -10.0), 1);
        let w = adaptive_weights(&far, &base_r_only(), DEFAULT_BARRIER_CLAMP).unwrap();
        assert!((w.stages[0].q[(0, 0)] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn adaptive_weights_without_constraints_are_base() {
        let sens = bundle(scalar(1.0), scalar(1.0), scalar(0.0), Mat::zeros(0, 1), Mat::zeros(0, 1), Vec64::zeros(0), 1);
        let w = adaptive_weights(&sens, &base_r_only(), DEFAULT_BARRIER_CLAMP).unwrap();
        assert_eq!(w, base_r_only());
    }

    #[test]
    fn adaptive_weights_clamp_at_the_boundary() {
        for h in [0.0, 0.5] {
            let sens = bundle(scalar(1.0), scalar(1.0), scalar(0.0), scalar(1.0), scalar(0.0), Vec64::from_element(1, h), 1);
            let w = adaptive_weights(&sens, &base_r_only(), 1e-3).unwrap();
            assert!((w.stages[0].q[(0, 0)] - 1e6).abs() < 1e-6);
        }
    }

    #[test]
    fn siro_weights_scale_with_multiplier_over_backoff() {
        let sens = bundle(scalar(1.0), scalar(1.0), scalar(0.0), scalar(1.0), scalar(0.0), Vec64::from_element(1, -1.0), 1);
        let mu = Multipliers { stage: vec![Vec64::from_element(1, 1.0)], terminal: Vec64::zeros(0) };
        let b = Backoffs { stage: vec![Vec64::from_element(1, 0.5)], terminal: Vec64::zeros(0) };
        let w = siro_weights(&sens, &mu, &b, &base_r_only(), DEFAULT_SIRO_BACKOFF_FLOOR).unwrap();
        assert!((w.stages[0].q[(0, 0)] - 1.0).abs() < 1e-15);

        let zero_b = Backoffs { stage: vec![Vec64::zeros(1)], terminal: Vec64::zeros(0) };
        let w = siro_weights(&sens, &mu, &zero_b, &base_r_only(), 1e-6).unwrap();
        assert!((w.stages[0].q[(0, 0)] - 0.5e6).abs() < 1e-6);

        let zero_mu = Multipliers { stage: vec![Vec64::zeros(1)], terminal: Vec64::zeros(0) };
        assert_eq!(siro_weights(&sens, &zero_mu, &b, &base_r_only(), 1e-6).unwrap(), base_r_only());

        let neg = Multipliers { stage: vec![Vec64::from_element(1, -1.0)], terminal: Vec64::zeros(0) };
        assert!(matches!(siro_weights(&sens, &neg, &b, &base_r_only(), 1e-6), Err(Error::InvalidMultipliers(_))));
    }

    #[test]
    fn objective_of_state_block_is_trace_sum() {
        let p = vec![Mat::identity(2, 2) * 2.0, Mat::identity(2, 2) * 3.0];
        let w = StageWeights {
            stages: vec![StageWeight { q: Mat::identity(2, 2), s: Mat::zeros(1, 2), r: scalar(0.0) }],
            terminal: Mat::identity(2, 2),
        };
        assert_eq!(tube_lqr_objective(&p, &[Mat::zeros(1, 2)], &w), 4.0 + 6.0);
        assert_eq!(tube_lqr_objective(&vec![Mat::zeros(2, 2); 2], &[Mat::from_row_slice(1, 2, &[3.0, 1.0])], &w), 0.0);
    }

    #[test]
    fn barrier_curvature_increases_toward_boundary() {
        let mut last = 0.0;
        for eta in [-10.0, -1.0, -0.1, -0.01, -0.001] {
            let c = barrier_curvature(eta);
            assert!(c > last);
            last = c;
        }
    }
}
