//! Dense helpers shared by the geometric modules: adjugates, relative-rank
//! queries, orthonormal spans and principal angles. Everything here works on
//! the small matrices of the chart (`n ≤ 8`, ambient `2n+1`).

use nalgebra::{DMatrix, DVector};

/// Classical adjoint: `adjugate(C)[i][j] = (-1)^{i+j} det(minor_{ji})`, so
/// that `C · adjugate(C) = det(C) · I` for every square `C`.
pub fn adjugate(c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = c.nrows();
    assert_eq!(n, c.ncols());
    if n == 1 {
        return DMatrix::from_element(1, 1, 1.0);
    }
    let mut adj = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let minor = c.clone().remove_row(j).remove_column(i);
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            adj[(i, j)] = sign * minor.determinant();
        }
    }
    adj
}

/// Eigenpairs of a symmetric matrix sorted by |λ| descending.
pub fn sym_eigen_sorted(m: &DMatrix<f64>) -> Vec<(f64, DVector<f64>)> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let mut pairs: Vec<(f64, DVector<f64>)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(k, &l)| (l, eig.eigenvectors.column(k).into_owned()))
        .collect();
    pairs.sort_by(|a, b| b.0.abs().partial_cmp(&a.0.abs()).unwrap());
    pairs
}

/// Numerical rank: singular values above `tol · σ_max`.
pub fn rank_with_tol(m: &DMatrix<f64>, tol: f64) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * smax).count()
}

/// Right and left null vectors (unit norm) of a square matrix. Both are
/// taken from the V-side of an SVD (of `M` and of `Mᵀ`): the U-side vector
/// for a near-zero singular value is formed as `M v/σ` internally and loses
/// accuracy.
pub fn null_pair(m: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let right = smallest_right_vector(m);
    let left = smallest_right_vector(&m.transpose());
    (right, left)
}

fn smallest_right_vector(m: &DMatrix<f64>) -> DVector<f64> {
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().unwrap();
    let mut k = 0;
    let mut s_min = f64::INFINITY;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s < s_min {
            s_min = s;
            k = i;
        }
    }
    v_t.row(k).transpose()
}

/// Smallest singular value of a matrix.
pub fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    sv.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Right singular vector for the smallest singular value, with that value.
pub fn smallest_right_singular(m: &DMatrix<f64>) -> (DVector<f64>, f64) {
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().unwrap();
    // for wide-enough inputs v_t has ncols rows; otherwise the trailing rows
    // (exact kernel directions) are preferable
    if v_t.nrows() > svd.singular_values.len() {
        return (v_t.row(v_t.nrows() - 1).transpose(), 0.0);
    }
    let mut k_min = 0;
    let mut s_min = f64::INFINITY;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s < s_min {
            s_min = s;
            k_min = k;
        }
    }
    (v_t.row(k_min).transpose(), s_min)
}

/// Orthonormal basis (columns) of the span of the given columns, truncated at
/// relative tolerance `tol`.
pub fn orthonormal_span(columns: &[DVector<f64>], tol: f64) -> DMatrix<f64> {
    if columns.is_empty() {
        return DMatrix::zeros(0, 0);
    }
    let rows = columns[0].len();
    let m = DMatrix::from_fn(rows, columns.len(), |r, c| columns[c][r]);
    let svd = m.clone().svd(true, false);
    let u = svd.u.as_ref().unwrap();
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| smax > 0.0 && s > tol * smax)
        .map(|(i, _)| i)
        .collect();
    let mut out = DMatrix::zeros(rows, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        out.set_column(c, &u.column(i));
    }
    out
}

/// Norm of the component of `v` orthogonal to the span of the orthonormal
/// columns `q`, relative to `‖v‖`. Zero means membership.
pub fn residual_against_span(q: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let nv = v.norm();
    if nv == 0.0 {
        return 0.0;
    }
    if q.ncols() == 0 {
        return 1.0;
    }
    let proj = q * (q.transpose() * v);
    (v - proj).norm() / nv
}

/// Largest principal angle (radians) between the spans of two orthonormal
/// column bases, computed through sines for stability near zero.
pub fn max_principal_angle(q1: &DMatrix<f64>, q2: &DMatrix<f64>) -> f64 {
    // sin of the largest angle = σ_max(Q1 − Q2 Q2ᵀ Q1)
    let r = q1 - q2 * (q2.transpose() * q1);
    let s = r.clone().svd(false, false).singular_values.max();
    s.clamp(-1.0, 1.0).asin()
}

/// Least-squares solution of `A x ≈ b` through the SVD.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    svd.solve(b, 1e-13 * svd.singular_values.max().max(1e-300))
        .expect("svd solve")
}

/// Condition number σ_max/σ_min.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_matrix(n: usize, rng: &mut SplitMix64) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |_, _| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn adjugate_identity_holds() {
        let mut rng = SplitMix64::new(1);
        for n in 2..=5 {
            for _ in 0..20 {
                let c = random_matrix(n, &mut rng);
                let a = adjugate(&c);
                let det = c.determinant();
                let lhs = &c * &a;
                let rhs = DMatrix::<f64>::identity(n, n) * det;
                let scale = det.abs().max(1.0);
                assert!((lhs - rhs).norm() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn adjugate_vanishes_below_corank_one() {
        // rank n-2 => adjugate = 0 (brute-force minors all vanish)
        let mut rng = SplitMix64::new(2);
        let n = 4;
        let u = random_matrix(n, &mut rng).columns(0, 2).into_owned();
        let v = random_matrix(n, &mut rng).columns(0, 2).into_owned();
        let c = &u * v.transpose(); // rank <= 2 = n-2
        let a = adjugate(&c);
        assert!(a.norm() <= 1e-12 * c.norm().powi((n - 1) as i32).max(1.0));
    }

    #[test]
    fn principal_angle_detects_rotation() {
        let q1 = DMatrix::from_columns(&[
            DVector::from_vec(vec![1.0, 0.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0, 0.0]),
        ]);
        let t: f64 = 1e-4;
        let q2 = DMatrix::from_columns(&[
            DVector::from_vec(vec![t.cos(), 0.0, t.sin()]),
            DVector::from_vec(vec![0.0, 1.0, 0.0]),
        ]);
        let angle = max_principal_angle(&q1, &q2);
        assert!((angle - t).abs() < 1e-9, "angle {angle}");
        assert!(max_principal_angle(&q1, &q1) < 1e-12);
    }

    #[test]
    fn null_pair_annihilates() {
        let mut rng = SplitMix64::new(3);
        let n = 4;
        // build a rank n-1 matrix
        let mut c = random_matrix(n, &mut rng);
        let (a, _) = null_pair(&c.clone());
        let _ = a;
        let col = c.column(n - 1).into_owned();
        let sum: DVector<f64> = (0..n - 1).fold(DVector::zeros(n), |acc, j| {
            acc + c.column(j).into_owned()
        });
        c.set_column(n - 1, &sum);
        let _ = col;
        let (right, left) = null_pair(&c);
        assert!((&c * &right).norm() < 1e-10);
        assert!((c.transpose() * &left).norm() < 1e-10);
    }
}
