//! Small dense helpers shared by the tube, QP and oracle code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

pub type Mat = DMatrix<f64>;
pub type Vec64 = DVector<f64>;

pub fn symmetrize(m: &mut Mat) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetric_part(m: &Mat) -> Mat {
    let mut s = m.clone();
    symmetrize(&mut s);
    s
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetric_part(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn is_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn vec_is_finite(v: &Vec64) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Symmetric with no eigenvalue below `-1e-10 (1 + ||m||)`.
pub fn check_psd(m: &Mat, what: &str) -> Result<(), String> {
    if m.nrows() != m.ncols() {
        return Err(format!("{what} is not square"));
    }
    let scale = 1.0 + m.norm();
    let asym = (m - m.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(format!("{what} is not symmetric (asymmetry {asym:.3e})"));
    }
    let lmin = min_eigenvalue(m);
    if lmin < -1e-10 * scale {
        return Err(format!("{what} has negative eigenvalue {lmin:.3e}"));
    }
    Ok(())
}

pub fn cholesky(m: &Mat) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
}

/// Symmetric square root with negative eigenvalues clamped to zero.
pub fn psd_sqrt(m: &Mat) -> Mat {
    let n = m.nrows();
    if n == 0 {
        return Mat::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(symmetric_part(m));
    let mut d = Mat::zeros(n, n);
    for i in 0..n {
        d[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

pub fn inf_norm(v: &Vec64) -> f64 {
    v.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

pub fn seq_diff_inf(a: &[Vec64], b: &[Vec64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| inf_norm(&(x - y)))
        .fold(0.0, f64::max)
}

/// Lower-triangular (column-major) packing of a symmetric matrix.
pub fn pack_symmetric(p: &Mat) -> Vec64 {
    let n = p.nrows();
    let mut v = Vec64::zeros(n * (n + 1) / 2);
    let mut idx = 0;
    for j in 0..n {
        for i in j..n {
            v[idx] = p[(i, j)];
            idx += 1;
        }
    }
    v
}

pub fn unpack_symmetric(v: &Vec64, n: usize) -> Mat {
    let mut p = Mat::zeros(n, n);
    let mut idx = 0;
    for j in 0..n {
        for i in j..n {
            p[(i, j)] = v[idx];
            p[(j, i)] = v[idx];
            idx += 1;
        }
    }
    p
}

pub fn packed_dim(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Index pairs `(i, j)`, `i >= j`, in packing order.
pub fn packed_indices(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(packed_dim(n));
    for j in 0..n {
        for i in j..n {
            out.push((i, j));
        }
    }
    out
}

pub fn block_diag(blocks: &[&Mat]) -> Mat {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let m: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(n, m);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_roundtrip_is_exact() {
        let p = Mat::from_row_slice(3, 3, &[4.0, 1.5, -0.25, 1.5, 2.0, 0.1, -0.25, 0.1, 1.0]);
        let v = pack_symmetric(&p);
        assert_eq!(v.len(), 6);
        assert_eq!(unpack_symmetric(&v, 3), p);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let p = Mat::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let s = psd_sqrt(&p);
        assert!((&s * &s - &p).amax() < 1e-12);
    }

    #[test]
    fn check_psd_rejects_indefinite_and_asymmetric() {
        assert!(check_psd(&Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]), "m").is_err());
        assert!(check_psd(&Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]), "m").is_err());
        assert!(check_psd(&Mat::identity(2, 2), "m").is_ok());
    }
}
