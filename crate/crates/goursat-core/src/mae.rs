//! Goursat-type Monge-Ampère structure.
//!
//! An `n`-dimensional subdistribution `D ⊂ C` in the normal form
//! `D = ⟨X_i = ∂̂_{x^i} + b_ij ∂_{p_j}⟩` defines the equation
//! `det(P − B) = 0`: the Lagrangian planes meeting `D` nontrivially. Its
//! ω-orthogonal `D⊥` (transposed coefficients) defines the same equation.
//! This module provides the residual, the adjugate point report, the `D`/`D⊥`
//! frames, decomposable n-forms `Ω_D = Y_1·θ ∧ … ∧ Y_n·θ` with their
//! horizontalization, the two intermediate-integral tests, and the
//! reconstruction of `D ∪ D⊥` from a black-box second-order equation by
//! sampling characteristic lines on the fiber.

use crate::contact::{
    hamiltonian_field, omega_eval, theta_eval, ChartPoint, TangentAtPoint, VectorFieldExpr,
};
use crate::expr::{diff, eval, Expr, VarTable};
use crate::grassmann::{decompose_metric, Decomposition, JetPoint, MetricEvaluator};
use crate::linalg;
use crate::rng::SplitMix64;
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum MaeError {
    #[error("sample {sample}: conformal metric is not decomposable (rank {rank}); not a Goursat-type equation at this fiber")]
    NotGoursatType { sample: usize, rank: usize },
    #[error("could not gather enough usable fiber samples ({accepted} accepted, spans reached dimensions {dim_d} and {dim_dperp} of {n})")]
    InsufficientSamples {
        accepted: usize,
        dim_d: usize,
        dim_dperp: usize,
        n: usize,
    },
    #[error("reconstructed spans are not ω-orthogonal (max pairing {worst:.3e})")]
    OrthogonalityViolation { worst: f64 },
    #[error("frame is not transversal to the ⟨∂_p⟩ fiber: the ∂̂_x-block is singular (σ_min = {sigma_min:.3e}); an ε-shift chart change x^i = x̄^i + ε_i p̄_i makes it transversal")]
    NonTransversal { sigma_min: f64 },
    #[error("Hamiltonian field vanishes at the test point")]
    ZeroField,
    #[error(transparent)]
    Grassmann(#[from] crate::grassmann::GrassmannError),
    #[error(transparent)]
    Eval(#[from] crate::expr::EvalError),
}

/// Matrix of expressions `b_ij(x, z, p)` defining
/// `D = ⟨∂̂_{x^i} + b_ij ∂_{p_j}⟩` and the residual `det(P − B)`.
#[derive(Clone, Debug)]
pub struct BField {
    b: Vec<Vec<Expr>>,
}

impl BField {
    pub fn new(b: Vec<Vec<Expr>>) -> Self {
        let n = b.len();
        for row in &b {
            assert_eq!(row.len(), n, "B must be square");
        }
        BField { b }
    }

    pub fn zero(n: usize) -> Self {
        BField {
            b: vec![vec![Expr::zero(); n]; n],
        }
    }

    pub fn from_constants(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        BField {
            b: (0..n)
                .map(|i| (0..n).map(|j| Expr::constant(m[(i, j)])).collect())
                .collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.b.len()
    }

    pub fn entry(&self, i: usize, j: usize) -> &Expr {
        &self.b[i][j]
    }

    pub fn eval_at(&self, m: &ChartPoint) -> Result<DMatrix<f64>, MaeError> {
        let n = self.n();
        let table = VarTable::chart(n);
        let env = m.env(&table);
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] = eval(&self.b[i][j], &env)?;
            }
        }
        Ok(out)
    }

    /// Symbolic frames of `D` and `D⊥`: `X_i = ∂̂_{x^i} + b_ij ∂_{p_j}` and
    /// the transposed-coefficient fields.
    pub fn frames_symbolic(&self) -> (Vec<VectorFieldExpr>, Vec<VectorFieldExpr>) {
        let n = self.n();
        let mut d = Vec::with_capacity(n);
        let mut dperp = Vec::with_capacity(n);
        for i in 0..n {
            let mut xi = VectorFieldExpr::zero(n);
            let mut xi_perp = VectorFieldExpr::zero(n);
            xi.comp_x[i] = Expr::one();
            xi.comp_z = Expr::var(format!("p{}", i + 1));
            xi_perp.comp_x[i] = Expr::one();
            xi_perp.comp_z = Expr::var(format!("p{}", i + 1));
            for j in 0..n {
                xi.comp_p[j] = self.b[i][j].clone();
                xi_perp.comp_p[j] = self.b[j][i].clone();
            }
            d.push(xi);
            dperp.push(xi_perp);
        }
        (d, dperp)
    }

    /// The residual `det(P − B)` as an expression in jet variables of
    /// order 2.
    pub fn residual_expr(&self) -> Expr {
        let n = self.n();
        let rows: Vec<Vec<Expr>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let pij =
                            crate::expr::MultiIndex::new(vec![(i + 1) as u8, (j + 1) as u8]);
                        Expr::sub(Expr::var(pij.var_name()), self.b[i][j].clone())
                    })
                    .collect()
            })
            .collect();
        det_expr(&rows)
    }
}

/// Symbolic determinant by cofactor expansion along the first row. Meant for
/// the small matrices of this crate (term count grows factorially).
pub fn det_expr(rows: &[Vec<Expr>]) -> Expr {
    let n = rows.len();
    assert!(n >= 1 && rows.iter().all(|r| r.len() == n));
    if n == 1 {
        return rows[0][0].clone();
    }
    let mut acc = Expr::zero();
    for j in 0..n {
        if rows[0][j].is_zero() {
            continue;
        }
        let minor: Vec<Vec<Expr>> = rows[1..]
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(k, _)| *k != j)
                    .map(|(_, e)| e.clone())
                    .collect()
            })
            .collect();
        let term = Expr::mul(rows[0][j].clone(), det_expr(&minor));
        acc = if j % 2 == 0 {
            Expr::add(acc, term)
        } else {
            Expr::sub(acc, term)
        };
    }
    acc
}

/// `n` spanning Cartan vectors at a chart point.
#[derive(Clone, Debug)]
pub struct DistFrame {
    pub point: ChartPoint,
    pub vectors: Vec<TangentAtPoint>,
}

impl DistFrame {
    pub fn new(point: ChartPoint, vectors: Vec<TangentAtPoint>) -> Self {
        for v in &vectors {
            debug_assert!(theta_eval(&point, v).abs() <= 1e-8 * (1.0 + v.norm()));
        }
        DistFrame { point, vectors }
    }

    pub fn n(&self) -> usize {
        self.point.n()
    }

    /// Orthonormal basis of the span, as `(2n+1) × k` columns.
    pub fn span(&self) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = self.vectors.iter().map(|v| v.to_vector()).collect();
        linalg::orthonormal_span(&cols, 1e-12)
    }
}

/// `det(P − B(m))` at a jet point.
pub fn goursat_residual(b: &BField, m1: &JetPoint) -> Result<f64, MaeError> {
    let bm = b.eval_at(&m1.base)?;
    Ok((m1.p2() - bm).determinant())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointClass {
    OffEquation,
    Regular,
    Singular,
}

/// Pointwise adjugate analysis of `det(P − B) = 0`.
#[derive(Clone, Debug)]
pub struct GoursatPointReport {
    pub residual: f64,
    pub rank: usize,
    pub class: PointClass,
    pub adjugate: DMatrix<f64>,
    /// Symmetrized adjugate `½(A + Aᵀ)`: the conformal metric in `{w_i}`.
    pub metric: DMatrix<f64>,
    /// Right kernel line of `P − B` (regular points only).
    pub kernel_right: Option<DVector<f64>>,
    /// Left kernel line of `P − B` (regular points only).
    pub kernel_left: Option<DVector<f64>>,
}

/// Classify a jet point of `det(P − B) = 0` by the rank of `P − B`: full rank
/// is off the equation, corank one is a regular point (the metric is the
/// symmetrized adjugate and factors through the kernel lines), corank ≥ 2 is
/// a singular point with vanishing metric.
pub fn goursat_point_report(
    b: &BField,
    m1: &JetPoint,
    tol: f64,
) -> Result<GoursatPointReport, MaeError> {
    let n = m1.n();
    let c = m1.p2() - b.eval_at(&m1.base)?;
    let residual = c.determinant();
    let rank = linalg::rank_with_tol(&c, tol);
    let adjugate = linalg::adjugate(&c);
    let metric = (&adjugate + adjugate.transpose()) * 0.5;
    let class = if rank == n {
        PointClass::OffEquation
    } else if rank == n - 1 {
        PointClass::Regular
    } else {
        PointClass::Singular
    };
    let (kernel_right, kernel_left) = if class == PointClass::Regular {
        let (r, l) = linalg::null_pair(&c);
        (Some(r), Some(l))
    } else {
        (None, None)
    };
    Ok(GoursatPointReport {
        residual,
        rank,
        class,
        adjugate,
        metric,
        kernel_right,
        kernel_left,
    })
}

/// Evaluated frames of `D` and `D⊥` at a chart point, Cartan by construction.
pub fn frames(b: &BField, m: &ChartPoint) -> Result<(DistFrame, DistFrame), MaeError> {
    let n = b.n();
    let bm = b.eval_at(m)?;
    let make = |transpose: bool| -> DistFrame {
        let vectors = (0..n)
            .map(|i| {
                let mut v = TangentAtPoint::xhat(i + 1, m);
                for j in 0..n {
                    v.dp[j] = if transpose { bm[(j, i)] } else { bm[(i, j)] };
                }
                v
            })
            .collect();
        DistFrame::new(m.clone(), vectors)
    };
    Ok((make(false), make(true)))
}

/// A 1-form on the chart with expression coefficients over the coframe
/// `(dx^1..dx^n, dz, dp_1..dp_n)`.
#[derive(Clone, Debug)]
pub struct CovectorExpr {
    pub dx: Vec<Expr>,
    pub dz: Expr,
    pub dp: Vec<Expr>,
}

impl CovectorExpr {
    pub fn n(&self) -> usize {
        self.dx.len()
    }

    fn eval_at(&self, env: &crate::expr::Env<'_>) -> Result<Vec<f64>, MaeError> {
        let n = self.n();
        let mut out = vec![0.0; 2 * n + 1];
        for i in 0..n {
            out[i] = eval(&self.dx[i], env)?;
            out[n + 1 + i] = eval(&self.dp[i], env)?;
        }
        out[n] = eval(&self.dz, env)?;
        Ok(out)
    }
}

/// An n-form on the chart: either a decomposable product of `n` covectors or
/// a general coefficient map over ascending coframe-index subsets
/// (antisymmetry is implicit in the subset representation).
#[derive(Clone, Debug)]
pub enum NForm {
    Decomposable(Vec<CovectorExpr>),
    General {
        n: usize,
        coef: BTreeMap<Vec<u8>, Expr>,
    },
}

impl NForm {
    pub fn n(&self) -> usize {
        match self {
            NForm::Decomposable(c) => c.len(),
            NForm::General { n, .. } => *n,
        }
    }

    /// Single coframe monomial `c · e_S` (indices ascending over the coframe
    /// `(dx, dz, dp)`).
    pub fn monomial(n: usize, subset: Vec<u8>, coef: Expr) -> NForm {
        let mut map = BTreeMap::new();
        map.insert(subset, coef);
        NForm::General { n, coef: map }
    }

    /// Expand a decomposable form into its coefficient map.
    pub fn to_general(&self) -> NForm {
        match self {
            NForm::General { n, coef } => NForm::General {
                n: *n,
                coef: coef.clone(),
            },
            NForm::Decomposable(covs) => {
                let n = covs.len();
                let dim = 2 * n + 1;
                let mut acc: BTreeMap<Vec<u8>, Expr> = BTreeMap::new();
                acc.insert(Vec::new(), Expr::one());
                for cov in covs {
                    let mut next: BTreeMap<Vec<u8>, Expr> = BTreeMap::new();
                    for (subset, c) in &acc {
                        for k in 0..dim {
                            let ck = coframe_component(cov, k);
                            if ck.is_zero() || subset.contains(&(k as u8)) {
                                continue;
                            }
                            let inversions = subset.iter().filter(|&&s| s > k as u8).count();
                            let mut s2 = subset.clone();
                            let pos = s2.partition_point(|&d| d < k as u8);
                            s2.insert(pos, k as u8);
                            let mut term = Expr::mul(c.clone(), ck.clone());
                            if inversions % 2 == 1 {
                                term = Expr::neg(term);
                            }
                            let entry = next.remove(&s2).unwrap_or_else(Expr::zero);
                            let combined = Expr::add(entry, term);
                            if !combined.is_zero() {
                                next.insert(s2, combined);
                            }
                        }
                    }
                    acc = next;
                }
                acc.retain(|_, c| !c.is_zero());
                NForm::General { n, coef: acc }
            }
        }
    }

    /// Numeric coefficients at a chart point.
    fn coefficients_at(&self, m: &ChartPoint) -> Result<BTreeMap<Vec<u8>, f64>, MaeError> {
        let table = VarTable::chart(self.n());
        let env = m.env(&table);
        match self.to_general() {
            NForm::General { coef, .. } => {
                let mut out = BTreeMap::new();
                for (s, c) in coef {
                    let v = eval(&c, &env)?;
                    if v != 0.0 {
                        out.insert(s, v);
                    }
                }
                Ok(out)
            }
            NForm::Decomposable(_) => unreachable!(),
        }
    }
}

fn coframe_component<'a>(cov: &'a CovectorExpr, k: usize) -> &'a Expr {
    let n = cov.n();
    if k < n {
        &cov.dx[k]
    } else if k == n {
        &cov.dz
    } else {
        &cov.dp[k - n - 1]
    }
}

/// The decomposable n-form `Ω = Y_1·θ ∧ … ∧ Y_n·θ` of a frame of Cartan
/// vector fields, with `Y·θ = Y⌟dθ` and `dθ = Σ dx^i ∧ dp_i`:
/// `ρ_k = Σ_i (dx^i(Y_k)) dp_i − (dp_i(Y_k)) dx^i`.
pub fn nform_from_frame(fields: &[VectorFieldExpr]) -> NForm {
    let n = fields.len();
    let covectors = fields
        .iter()
        .map(|y| CovectorExpr {
            dx: (0..n).map(|i| Expr::neg(y.comp_p[i].clone())).collect(),
            dz: Expr::zero(),
            dp: (0..n).map(|i| y.comp_x[i].clone()).collect(),
        })
        .collect();
    NForm::Decomposable(covectors)
}

/// Restrict an n-form to the tautological frame of a Lagrangian plane:
/// `F(P) = Ω(w_1, …, w_n)` with `w_i = ∂̂_{x^i} + p_ij ∂_{p_j}`.
pub fn horizontalize(omega: &NForm, m1: &JetPoint) -> Result<f64, MaeError> {
    let n = m1.n();
    let frame = m1.tautological_frame();
    let value = |k: usize, i: usize| -> f64 {
        let w = &frame[i];
        if k < n {
            w.dx[k]
        } else if k == n {
            w.dz
        } else {
            w.dp[k - n - 1]
        }
    };
    match omega {
        NForm::Decomposable(covs) => {
            let table = VarTable::chart(n);
            let env = m1.base.env(&table);
            let mut mat = DMatrix::zeros(n, n);
            for (k, cov) in covs.iter().enumerate() {
                let c = cov.eval_at(&env)?;
                for i in 0..n {
                    mat[(k, i)] = (0..2 * n + 1).map(|r| c[r] * value(r, i)).sum();
                }
            }
            Ok(mat.determinant())
        }
        NForm::General { .. } => {
            let coef = omega.coefficients_at(&m1.base)?;
            let mut total = 0.0;
            for (subset, c) in coef {
                let mut minor = DMatrix::zeros(n, n);
                for (r, &k) in subset.iter().enumerate() {
                    for i in 0..n {
                        minor[(r, i)] = value(k as usize, i);
                    }
                }
                total += c * minor.determinant();
            }
            Ok(total)
        }
    }
}

/// Symbolic horizontalization: the residual `F(x, z, p, p_ij)` of an n-form
/// as an expression, with `w_i = ∂̂_{x^i} + p_ij ∂_{p_j}` substituted.
pub fn horizontalize_expr(omega: &NForm) -> Expr {
    let n = omega.n();
    // coframe value on w_i as an expression
    let value = |k: usize, i: usize| -> Expr {
        if k < n {
            if k == i {
                Expr::one()
            } else {
                Expr::zero()
            }
        } else if k == n {
            Expr::var(format!("p{}", i + 1))
        } else {
            let j = k - n - 1;
            Expr::var(
                crate::expr::MultiIndex::new(vec![(i + 1) as u8, (j + 1) as u8]).var_name(),
            )
        }
    };
    let NForm::General { coef, .. } = omega.to_general() else {
        unreachable!()
    };
    let mut total = Expr::zero();
    for (subset, c) in coef {
        let rows: Vec<Vec<Expr>> = subset
            .iter()
            .map(|&k| (0..n).map(|i| value(k as usize, i)).collect())
            .collect();
        total = Expr::add(total, Expr::mul(c, det_expr(&rows)));
    }
    total
}

// --- numeric exterior algebra at a point -----------------------------------

type NumForm = BTreeMap<Vec<u8>, f64>;

fn num_wedge_covector(form: &NumForm, cov: &[f64]) -> NumForm {
    let mut out = NumForm::new();
    for (subset, &c) in form {
        for (k, &a) in cov.iter().enumerate() {
            if a == 0.0 || subset.contains(&(k as u8)) {
                continue;
            }
            let inversions = subset.iter().filter(|&&s| s > k as u8).count();
            let sign = if inversions % 2 == 0 { 1.0 } else { -1.0 };
            let mut s2 = subset.clone();
            let pos = s2.partition_point(|&d| d < k as u8);
            s2.insert(pos, k as u8);
            *out.entry(s2).or_insert(0.0) += sign * c * a;
        }
    }
    out.retain(|_, v| *v != 0.0);
    out
}

fn num_contract(form: &NumForm, vector: &[f64]) -> NumForm {
    let mut out = NumForm::new();
    for (subset, &c) in form {
        for (r, &k) in subset.iter().enumerate() {
            let comp = vector[k as usize];
            if comp == 0.0 {
                continue;
            }
            let sign = if r % 2 == 0 { 1.0 } else { -1.0 };
            let mut s2 = subset.clone();
            s2.remove(r);
            *out.entry(s2).or_insert(0.0) += sign * c * comp;
        }
    }
    out.retain(|_, v| *v != 0.0);
    out
}

fn num_norm(form: &NumForm) -> f64 {
    form.values().map(|v| v * v).sum::<f64>().sqrt()
}

/// Intermediate-integral test for a general Monge-Ampère form: evaluates the
/// `(n+2)`-form `df ∧ θ ∧ i_{Y_f}Ω` on the coordinate frame at `m` and
/// accepts iff every coefficient vanishes to `tol` relative to the factor
/// scales.
pub fn lychagin_test(f: &Expr, omega: &NForm, m: &ChartPoint, tol: f64) -> Result<bool, MaeError> {
    let n = m.n();
    assert_eq!(omega.n(), n);
    let dim = 2 * n + 1;
    let table = VarTable::chart(n);
    let env = m.env(&table);

    let mut dfv = vec![0.0; dim];
    for i in 0..n {
        dfv[i] = eval(&diff(f, &format!("x{}", i + 1)), &env)?;
        dfv[n + 1 + i] = eval(&diff(f, &format!("p{}", i + 1)), &env)?;
    }
    dfv[n] = eval(&diff(f, "z"), &env)?;
    let df_norm = dfv.iter().map(|v| v * v).sum::<f64>().sqrt();
    if df_norm == 0.0 {
        return Ok(true);
    }

    // θ = dz − p_i dx^i
    let mut thetav = vec![0.0; dim];
    thetav[n] = 1.0;
    for i in 0..n {
        thetav[i] = -m.p[i];
    }
    let theta_norm = thetav.iter().map(|v| v * v).sum::<f64>().sqrt();

    let yf = hamiltonian_field(f, n).eval_at(m)?;
    let yfv = yf.to_vector();

    let omega_num = omega.coefficients_at(m)?;
    let contracted = num_contract(&omega_num, yfv.as_slice());
    let c_norm = num_norm(&contracted);

    let mut alpha = NumForm::new();
    alpha.insert(Vec::new(), 1.0);
    alpha = num_wedge_covector(&alpha, &dfv);
    alpha = num_wedge_covector(&alpha, &thetav);
    let mut result = NumForm::new();
    for (s1, &c1) in &alpha {
        'outer: for (s2, &c2) in &contracted {
            let mut merged = s1.clone();
            let mut sign = 1.0;
            for &k in s2 {
                if merged.contains(&k) {
                    continue 'outer;
                }
                let inversions = merged.iter().filter(|&&s| s > k).count();
                if inversions % 2 == 1 {
                    sign = -sign;
                }
                let pos = merged.partition_point(|&d| d < k);
                merged.insert(pos, k);
            }
            *result.entry(merged).or_insert(0.0) += sign * c1 * c2;
        }
    }
    let scale = (df_norm * theta_norm * c_norm).max(f64::MIN_POSITIVE);
    let worst = result.values().fold(0.0f64, |acc, v| acc.max(v.abs()));
    Ok(worst <= tol * scale)
}

/// Side classification of a first-integral candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Membership {
    /// `Y_f ∈ D`; `both` marks the Lagrangian case `D = D⊥` where the two
    /// residuals coincide.
    InD { both: bool },
    InDperp,
    Neither,
}

impl Membership {
    pub fn accepted(&self) -> bool {
        !matches!(self, Membership::Neither)
    }
}

/// Classify `Y_f(m)` against two explicit frames by least-squares membership
/// residual, relative to `‖Y_f‖`.
pub fn membership_in_frames(
    yf: &TangentAtPoint,
    d: &DistFrame,
    dperp: &DistFrame,
    tol: f64,
) -> Result<Membership, MaeError> {
    let v = yf.to_vector();
    if v.norm() <= f64::MIN_POSITIVE {
        return Err(MaeError::ZeroField);
    }
    let rd = linalg::residual_against_span(&d.span(), &v);
    let rp = linalg::residual_against_span(&dperp.span(), &v);
    Ok(match (rd <= tol, rp <= tol) {
        (true, true) => Membership::InD { both: true },
        (true, false) => Membership::InD { both: false },
        (false, true) => Membership::InDperp,
        (false, false) => Membership::Neither,
    })
}

/// Is `f` a first integral of `D⊥` (`Y_f ∈ D`), of `D` (`Y_f ∈ D⊥`), or
/// neither, for the distributions of a `B`-field at `m`.
pub fn first_integral_test(
    f: &Expr,
    b: &BField,
    m: &ChartPoint,
    tol: f64,
) -> Result<Membership, MaeError> {
    let (d, dperp) = frames(b, m)?;
    let yf = hamiltonian_field(f, b.n()).eval_at(m)?;
    membership_in_frames(&yf, &d, &dperp, tol)
}

/// Configuration of the fiber sampler and span clustering.
#[derive(Clone, Debug)]
pub struct ReconstructCfg {
    pub samples: usize,
    pub newton_tol: f64,
    pub rank_tol: f64,
    pub seed: u64,
}

impl Default for ReconstructCfg {
    fn default() -> Self {
        ReconstructCfg {
            samples: 200,
            newton_tol: 1e-12,
            rank_tol: 1e-9,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReconstructReport {
    pub d: DistFrame,
    pub dperp: DistFrame,
    pub samples_used: usize,
    pub singular_discarded: usize,
    /// n-th singular values of the two collected direction bundles: a fill
    /// certificate for the spans (larger is better).
    pub fill_sv: (f64, f64),
    /// True when every sample was rank one: the distribution is Lagrangian,
    /// `D = D⊥`.
    pub lagrangian: bool,
}

/// Sample a point of the fiber `{F = 0}` over `m`: random symmetric start
/// with entries in `[−1, 1]`, Newton along random symmetric directions (up to
/// 20 per call).
fn sample_fiber_point(
    ev: &MetricEvaluator,
    m: &ChartPoint,
    rng: &mut SplitMix64,
    newton_tol: f64,
) -> Option<JetPoint> {
    let n = m.n();
    for _ in 0..20 {
        let p0 = random_sym(n, rng);
        let q = random_sym(n, rng);
        let base = JetPoint::new(m.clone(), p0.clone());
        let mut slots = ev.slots_for(&base);
        let mut t = 0.0f64;
        let mut converged = false;
        for _ in 0..60 {
            set_p2_slots(ev, &mut slots, &p0, &q, t);
            let fv = ev.f_at_slots(&slots);
            if !fv.is_finite() {
                break;
            }
            if fv.abs() <= newton_tol {
                converged = true;
                break;
            }
            let dv = ev.directional(&slots, &q);
            if dv.abs() < 1e-14 {
                break;
            }
            let mut step = -fv / dv;
            if step.abs() > 2.0 {
                step = step.signum() * 2.0;
            }
            t += step;
            if t.abs() > 20.0 {
                break;
            }
        }
        if converged {
            let p = &p0 + t * &q;
            return Some(JetPoint::new(m.clone(), p));
        }
    }
    None
}

/// Draw up to `count` points of the fiber `{F = 0}` over `m` with the same
/// sampler the reconstruction uses. Returns the points actually found.
pub fn sample_fiber_points(
    f: &Expr,
    m: &ChartPoint,
    count: usize,
    seed: u64,
    newton_tol: f64,
) -> Result<Vec<JetPoint>, MaeError> {
    let ev = MetricEvaluator::new(f, m.n())?;
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        if let Some(jp) = sample_fiber_point(&ev, m, &mut rng, newton_tol) {
            out.push(jp);
        }
    }
    Ok(out)
}

fn random_sym(n: usize, rng: &mut SplitMix64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = rng.uniform(-1.0, 1.0);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

fn set_p2_slots(
    ev: &MetricEvaluator,
    slots: &mut [f64],
    p0: &DMatrix<f64>,
    q: &DMatrix<f64>,
    t: f64,
) {
    let n = p0.nrows();
    for i in 0..n {
        for j in i..n {
            slots[ev.p2_slot(i, j)] = p0[(i, j)] + t * q[(i, j)];
        }
    }
}

/// Reconstruct the pair of `n`-dimensional spans `D_m`, `D⊥_m` from a
/// black-box equation `F` by sampling its fiber over `m`, decomposing the
/// conformal metric at each sample into characteristic lines, and splitting
/// the accumulated ambient lines into two clusters by greedy span growth
/// (each decomposable sample contributes one line to each cluster; the
/// assignment minimizing the total span extension wins; ties keep the
/// discovery order). Singular samples are discarded and resampled. Fails if
/// any sampled metric is not decomposable, the spans don't reach dimension
/// `n`, or the spans are not mutually ω-orthogonal.
pub fn reconstruct_distributions(
    f: &Expr,
    m: &ChartPoint,
    cfg: &ReconstructCfg,
) -> Result<ReconstructReport, MaeError> {
    let n = m.n();
    let ev = MetricEvaluator::new(f, n)?;
    let mut rng = SplitMix64::new(cfg.seed);
    let mut cluster1: Vec<DVector<f64>> = Vec::new();
    let mut cluster2: Vec<DVector<f64>> = Vec::new();
    let mut q1 = DMatrix::<f64>::zeros(2 * n + 1, 0);
    let mut q2 = DMatrix::<f64>::zeros(2 * n + 1, 0);
    let mut accepted = 0usize;
    let mut singular = 0usize;
    let mut all_rank1 = true;
    let mut attempts = 0usize;
    let max_attempts = 60 * cfg.samples.max(1);

    while accepted < cfg.samples && attempts < max_attempts {
        attempts += 1;
        let Some(jp) = sample_fiber_point(&ev, m, &mut rng, cfg.newton_tol) else {
            continue;
        };
        let metric = ev.metric_at(&jp);
        let (v, w, rank1) = match decompose_metric(&metric, cfg.rank_tol) {
            Decomposition::Zero => {
                singular += 1;
                continue;
            }
            Decomposition::Rank1(v) => (v.clone(), v, true),
            Decomposition::Decomposable(v, w) => (v, w, false),
            Decomposition::NotDecomposable { rank } => {
                return Err(MaeError::NotGoursatType {
                    sample: accepted,
                    rank,
                });
            }
        };
        all_rank1 &= rank1;
        let av = normalize(jp.ambient_from_fiber(&v).to_vector());
        let aw = normalize(jp.ambient_from_fiber(&w).to_vector());
        if rank1 {
            // ℓ = ℓ': the same line belongs to both families
            push_line(&mut cluster1, &mut q1, &av);
            push_line(&mut cluster2, &mut q2, &aw);
        } else {
            // ω(D, D⊥) = 0: a line assigned to one cluster must pair to zero
            // against the other cluster's span; span growth breaks ties
            let direct = pair_cost(m, &av, &aw, &q1, &q2);
            let swapped = pair_cost(m, &aw, &av, &q1, &q2);
            let swap = if (direct - swapped).abs() > 1e-10 {
                swapped < direct
            } else {
                growth(&q1, &aw) + growth(&q2, &av) < growth(&q1, &av) + growth(&q2, &aw)
            };
            if swap {
                push_line(&mut cluster1, &mut q1, &aw);
                push_line(&mut cluster2, &mut q2, &av);
            } else {
                push_line(&mut cluster1, &mut q1, &av);
                push_line(&mut cluster2, &mut q2, &aw);
            }
        }
        accepted += 1;
    }

    if accepted < cfg.samples || q1.ncols() != n || q2.ncols() != n {
        return Err(MaeError::InsufficientSamples {
            accepted,
            dim_d: q1.ncols(),
            dim_dperp: q2.ncols(),
            n,
        });
    }

    // fill certificate: n-th singular value of the collected directions
    let fill = |lines: &[DVector<f64>]| -> f64 {
        let mat = DMatrix::from_fn(2 * n + 1, lines.len(), |r, c| lines[c][r]);
        let sv = mat.svd(false, false).singular_values;
        let mut s: Vec<f64> = sv.iter().cloned().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        s.get(n - 1).copied().unwrap_or(0.0)
    };
    let fill_sv = (fill(&cluster1), fill(&cluster2));

    // mutual ω-orthogonality of the spans
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let u = TangentAtPoint::from_vector(&q1.column(i).into_owned());
            let v = TangentAtPoint::from_vector(&q2.column(j).into_owned());
            worst = worst.max(omega_eval(m, &u, &v).abs());
        }
    }
    if worst > cfg.rank_tol.max(1e-8) {
        return Err(MaeError::OrthogonalityViolation { worst });
    }

    let to_frame = |q: &DMatrix<f64>| {
        let vectors = (0..n)
            .map(|k| TangentAtPoint::from_vector(&q.column(k).into_owned()))
            .collect();
        DistFrame::new(m.clone(), vectors)
    };
    Ok(ReconstructReport {
        d: to_frame(&q1),
        dperp: to_frame(&q2),
        samples_used: accepted,
        singular_discarded: singular,
        fill_sv,
        lagrangian: all_rank1,
    })
}

fn normalize(v: DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

/// Residual of `v` against the current orthonormal basis: the span growth a
/// new line would cause.
fn growth(q: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    linalg::residual_against_span(q, v)
}

/// ω-incompatibility of assigning `u1` to cluster 1 and `u2` to cluster 2:
/// each candidate must pair to zero against the opposite cluster's span.
fn pair_cost(
    m: &ChartPoint,
    u1: &DVector<f64>,
    u2: &DVector<f64>,
    q1: &DMatrix<f64>,
    q2: &DMatrix<f64>,
) -> f64 {
    let t1 = TangentAtPoint::from_vector(u1);
    let t2 = TangentAtPoint::from_vector(u2);
    let mut worst: f64 = 0.0;
    for j in 0..q2.ncols() {
        let c = TangentAtPoint::from_vector(&q2.column(j).into_owned());
        worst = worst.max(omega_eval(m, &t1, &c).abs());
    }
    for j in 0..q1.ncols() {
        let c = TangentAtPoint::from_vector(&q1.column(j).into_owned());
        worst = worst.max(omega_eval(m, &t2, &c).abs());
    }
    worst
}

fn push_line(cluster: &mut Vec<DVector<f64>>, q: &mut DMatrix<f64>, v: &DVector<f64>) {
    cluster.push(v.clone());
    let r = if q.ncols() == 0 {
        v.clone()
    } else {
        v - &*q * (q.transpose() * v)
    };
    let nr = r.norm();
    if nr > 1e-7 {
        let unit = r / nr;
        let mut next = DMatrix::zeros(q.nrows(), q.ncols() + 1);
        next.columns_mut(0, q.ncols()).copy_from(q);
        next.set_column(q.ncols(), &unit);
        *q = next;
    }
}

/// Read the `b_ij` values of a frame in normal form: row-reduce so the
/// `∂̂_x`-block is the identity and return the `∂_p`-block. Fails when the
/// frame is not transversal to `⟨∂_p⟩` (the report then recommends the
/// ε-shift chart change, which is not applied automatically).
pub fn recover_b(frame: &DistFrame) -> Result<DMatrix<f64>, MaeError> {
    let n = frame.n();
    let mut xblock = DMatrix::zeros(n, n);
    let mut pblock = DMatrix::zeros(n, n);
    for (k, v) in frame.vectors.iter().enumerate() {
        for i in 0..n {
            xblock[(k, i)] = v.dx[i];
            pblock[(k, i)] = v.dp[i];
        }
    }
    let sigma_min = linalg::smallest_singular_value(&xblock);
    let sigma_max = xblock.norm().max(1e-300);
    if sigma_min <= 1e-9 * sigma_max {
        return Err(MaeError::NonTransversal { sigma_min });
    }
    let inv = xblock
        .try_inverse()
        .ok_or(MaeError::NonTransversal { sigma_min })?;
    Ok(inv * pblock)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::linalg::max_principal_angle;

    fn hyperbolic_b() -> BField {
        BField::from_constants(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]))
    }

    fn jet(m: ChartPoint, entries: &[f64]) -> JetPoint {
        let n = m.n();
        JetPoint::new(m, DMatrix::from_row_slice(n, n, entries))
    }

    #[test]
    fn residual_basics() {
        let b = BField::zero(2);
        let m1 = jet(ChartPoint::origin(2), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(goursat_residual(&b, &m1).unwrap(), 1.0);
        let m1 = jet(ChartPoint::origin(2), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(goursat_residual(&b, &m1).unwrap(), 0.0);
    }

    #[test]
    fn residual_expr_matches_pointwise_determinant() {
        let mut rng = SplitMix64::new(61);
        for n in 2..=4 {
            // random affine B entries in (x, z, p)
            let vt = VarTable::chart(n);
            let names: Vec<String> = vt.names().to_vec();
            let entries: Vec<Vec<Expr>> = (0..n)
                .map(|_| {
                    (0..n)
                        .map(|_| {
                            let mut e = Expr::constant(rng.uniform(-1.0, 1.0));
                            let v = &names[rng.below(names.len())];
                            e = Expr::add(
                                e,
                                Expr::mul(
                                    Expr::constant(rng.uniform(-1.0, 1.0)),
                                    Expr::var(v.clone()),
                                ),
                            );
                            e
                        })
                        .collect()
                })
                .collect();
            let b = BField::new(entries);
            let f = b.residual_expr();
            let jt = VarTable::new(n, 2);
            for _ in 0..20 {
                let m = ChartPoint {
                    x: (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                    z: rng.uniform(-1.0, 1.0),
                    p: (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                };
                let m1 = JetPoint::new(m, random_sym(n, &mut rng));
                let direct = goursat_residual(&b, &m1).unwrap();
                let via_expr = eval(&f, &m1.env(&jt)).unwrap();
                assert!(
                    (direct - via_expr).abs() <= 1e-11 * (1.0 + direct.abs()),
                    "n={n}: {direct} vs {via_expr}"
                );
            }
        }
    }

    #[test]
    fn point_report_regular_case() {
        let b = BField::zero(2);
        let m1 = jet(ChartPoint::origin(2), &[1.0, 0.0, 0.0, 0.0]);
        let r = goursat_point_report(&b, &m1, 1e-9).unwrap();
        assert_eq!(r.class, PointClass::Regular);
        assert_eq!(r.rank, 1);
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        assert!((r.adjugate.clone() - expected).norm() < 1e-14);
        let a = r.kernel_right.unwrap();
        let bk = r.kernel_left.unwrap();
        // kernels along e2
        assert!(a[0].abs() < 1e-12 && a[1].abs() > 0.9);
        assert!(bk[0].abs() < 1e-12 && bk[1].abs() > 0.9);
        assert_eq!(linalg::rank_with_tol(&r.metric, 1e-9), 1);
    }

    #[test]
    fn point_report_singular_case() {
        // strictly upper-triangular nilpotent B, rank(P-B) = 1 (n = 3)
        let b = BField::from_constants(&DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ));
        // choose P so that P - B has rank 1: P = B + u v^T must stay symmetric;
        // take P = 0 except p12 = 1? P - B = P - B: use P = 0: P - B = -B rank 1.
        let m1 = jet(ChartPoint::origin(3), &[0.0; 9]);
        let r = goursat_point_report(&b, &m1, 1e-9).unwrap();
        assert_eq!(r.class, PointClass::Singular);
        assert_eq!(r.rank, 1);
        // adjugate vanishes; cross-check by brute-force 2x2 minors
        assert!(r.adjugate.norm() < 1e-14);
        let c = m1.p2() - b.eval_at(&m1.base).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let minor = c.clone().remove_row(i).remove_column(j);
                assert!(minor.determinant().abs() < 1e-14);
            }
        }
    }

    #[test]
    fn point_report_metric_rank_by_symmetry() {
        let mut rng = SplitMix64::new(62);
        for n in 2..=4 {
            // symmetric B: rank-1 metric at regular points
            let mut sym = random_sym(n, &mut rng);
            sym[(0, 0)] += 0.3;
            let b_sym = BField::from_constants(&sym);
            // generic non-symmetric B: rank-2 metric
            let mut gen = DMatrix::from_fn(n, n, |_, _| rng.uniform(-1.0, 1.0));
            gen[(0, 1)] += 1.0; // push away from symmetric
            let b_gen = BField::from_constants(&gen);
            for (bf, expected_rank) in [(&b_sym, 1usize), (&b_gen, 2usize)] {
                // find a regular point: random symmetric start, Newton to det = 0
                let f = bf.residual_expr();
                let ev = MetricEvaluator::new(&f, n).unwrap();
                let m = ChartPoint::origin(n);
                let jp = sample_fiber_point(&ev, &m, &mut rng, 1e-13).unwrap();
                let r = goursat_point_report(bf, &jp, 1e-9).unwrap();
                assert_eq!(r.class, PointClass::Regular);
                assert_eq!(
                    linalg::rank_with_tol(&r.metric, 1e-9),
                    expected_rank,
                    "n={n}"
                );
                // metric ∝ a ∨ b
                let a = r.kernel_right.clone().unwrap();
                let bk = r.kernel_left.clone().unwrap();
                let ab = (&a * bk.transpose() + &bk * a.transpose()) * 0.5;
                let scale = r.metric.norm() / ab.norm();
                let diff1 = (&r.metric - &ab * scale).norm();
                let diff2 = (&r.metric + &ab * scale).norm();
                assert!(
                    diff1.min(diff2) <= 1e-8 * r.metric.norm(),
                    "n={n} diff {}/{} norm {} rank {} class {:?} residual {:e}",
                    diff1,
                    diff2,
                    r.metric.norm(),
                    r.rank,
                    r.class,
                    r.residual
                );
            }
        }
    }

    #[test]
    fn adjugate_kernel_identities_random() {
        let mut rng = SplitMix64::new(63);
        for n in 2..=4 {
            for _ in 0..100 {
                let p = random_sym(n, &mut rng);
                let bmat = DMatrix::from_fn(n, n, |_, _| rng.uniform(-1.0, 1.0));
                let c = &p - &bmat;
                let a = linalg::adjugate(&c);
                let det = c.determinant();
                let err = (&c * &a - DMatrix::<f64>::identity(n, n) * det).norm();
                assert!(err <= 1e-10 * det.abs().max(1.0));
            }
        }
    }

    #[test]
    fn frames_of_hyperbolic_example() {
        let b = hyperbolic_b();
        let m = ChartPoint::origin(2);
        let (d, dperp) = frames(&b, &m).unwrap();
        // D = <xhat1 + dp2, xhat2 - dp1>
        assert_eq!(d.vectors[0].dp, vec![0.0, 1.0]);
        assert_eq!(d.vectors[1].dp, vec![-1.0, 0.0]);
        assert_eq!(dperp.vectors[0].dp, vec![0.0, -1.0]);
        assert_eq!(dperp.vectors[1].dp, vec![1.0, 0.0]);
        // Cartan and mutually ω-orthogonal
        for v in d.vectors.iter().chain(&dperp.vectors) {
            assert!(theta_eval(&m, v).abs() <= 1e-10);
        }
        for v in &d.vectors {
            for w in &dperp.vectors {
                assert!(omega_eval(&m, v, w).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn frames_of_lagrangian_b_zero() {
        let b = BField::zero(3);
        let m = ChartPoint::origin(3);
        let (d, dperp) = frames(&b, &m).unwrap();
        for i in 0..3 {
            assert!(d.vectors[i].dp.iter().all(|v| *v == 0.0));
            assert!(dperp.vectors[i].dp.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn nform_of_momentum_frame_is_signed_volume() {
        // Y_i = ∂_{p_i}: ρ_i = -dx^i, Ω = (-1)^n dx^1∧…∧dx^n
        for n in 2..=3 {
            let fields: Vec<VectorFieldExpr> = (0..n)
                .map(|i| {
                    let mut y = VectorFieldExpr::zero(n);
                    y.comp_p[i] = Expr::one();
                    y
                })
                .collect();
            let omega = nform_from_frame(&fields);
            let mut rng = SplitMix64::new(64);
            for _ in 0..10 {
                let m1 = JetPoint::new(ChartPoint::origin(n), random_sym(n, &mut rng));
                let h = horizontalize(&omega, &m1).unwrap();
                let expect = if n % 2 == 0 { 1.0 } else { -1.0 };
                assert!((h - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn horizontalize_of_coordinate_volume_is_one() {
        // Ω = dx^1 ∧ … ∧ dx^n supplied directly evaluates to 1 on every
        // Lagrangian plane
        let mut rng = SplitMix64::new(93);
        for n in 2..=4 {
            let omega = NForm::monomial(n, (0..n as u8).collect(), Expr::one());
            for _ in 0..10 {
                let m1 = JetPoint::new(ChartPoint::origin(n), random_sym(n, &mut rng));
                assert!((horizontalize(&omega, &m1).unwrap() - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn nform_coefficients_of_hyperbolic_frames() {
        let b = hyperbolic_b();
        let (d, _) = b.frames_symbolic();
        let omega = nform_from_frame(&d);
        let NForm::General { coef, .. } = omega.to_general() else {
            panic!("expected general expansion");
        };
        // coframe order (dx1, dx2, dz, dp1, dp2):
        // dp1∧dp2 + dp1∧dx1 + dp2∧dx2 + dx1∧dx2
        let get = |s: &[u8]| coef.get(&s.to_vec()).and_then(|e| e.as_const());
        assert_eq!(get(&[3, 4]), Some(1.0));
        assert_eq!(get(&[0, 3]), Some(-1.0));
        assert_eq!(get(&[1, 4]), Some(-1.0));
        assert_eq!(get(&[0, 1]), Some(1.0));
        assert_eq!(coef.len(), 4);
    }

    fn ex_r12_d_frames() -> (Vec<VectorFieldExpr>, Vec<VectorFieldExpr>) {
        // n = 3, f = x1 p3 + z: D = <xhat1 + f dp2, dp1, dp3>,
        // D⊥ = <xhat2 + f dp1, dp2, dp3>
        let vt = VarTable::chart(3);
        let f = parse("x1*p3 + z", &vt).unwrap();
        let mut y1 = VectorFieldExpr::zero(3);
        y1.comp_x[0] = Expr::one();
        y1.comp_z = Expr::var("p1");
        y1.comp_p[1] = f.clone();
        let mut y2 = VectorFieldExpr::zero(3);
        y2.comp_p[0] = Expr::one();
        let mut y3 = VectorFieldExpr::zero(3);
        y3.comp_p[2] = Expr::one();

        let mut z1 = VectorFieldExpr::zero(3);
        z1.comp_x[1] = Expr::one();
        z1.comp_z = Expr::var("p2");
        z1.comp_p[0] = f;
        let mut z2 = VectorFieldExpr::zero(3);
        z2.comp_p[1] = Expr::one();
        let mut z3 = VectorFieldExpr::zero(3);
        z3.comp_p[2] = Expr::one();
        (vec![y1, y2, y3], vec![z1, z2, z3])
    }

    #[test]
    fn nform_coefficients_of_ex_r12() {
        let (d, _) = ex_r12_d_frames();
        let omega = nform_from_frame(&d);
        let NForm::General { coef, .. } = omega.to_general() else {
            panic!("expected general expansion");
        };
        // dp1∧dx1∧dx3 + f dx1∧dx2∧dx3 over coframe (dx1,dx2,dx3,dz,dp1,dp2,dp3)
        assert_eq!(coef.get(&vec![0, 2, 4]).and_then(|e| e.as_const()), Some(1.0));
        let f_coef = coef.get(&vec![0, 1, 2]).expect("volume coefficient");
        // f = x1 p3 + z, checked by evaluation
        let vt = VarTable::chart(3);
        let m = ChartPoint::new(vec![0.5, -1.0, 2.0], 0.7, vec![0.1, 0.2, 0.3]);
        let env = m.env(&vt);
        let expect = 0.5 * 0.3 + 0.7;
        assert!((eval(f_coef, &env).unwrap() - expect).abs() < 1e-14);
        assert_eq!(coef.len(), 2);
    }

    #[test]
    fn horizontalization_proportional_to_residual() {
        // hyperbolic: ratio to p11 p22 - p12^2 + 1 is a fixed constant
        let b = hyperbolic_b();
        let (d, dperp) = b.frames_symbolic();
        let mut rng = SplitMix64::new(65);
        for frame in [d, dperp] {
            let omega = nform_from_frame(&frame);
            let m = ChartPoint::new(vec![0.3, -0.2], 0.5, vec![0.7, -1.1]);
            let mut ratio: Option<f64> = None;
            for _ in 0..100 {
                let p = random_sym(2, &mut rng);
                let m1 = JetPoint::new(m.clone(), p.clone());
                let h = horizontalize(&omega, &m1).unwrap();
                let res = p[(0, 0)] * p[(1, 1)] - p[(0, 1)] * p[(0, 1)] + 1.0;
                if res.abs() < 1e-3 {
                    continue;
                }
                let r = h / res;
                match ratio {
                    None => ratio = Some(r),
                    Some(r0) => {
                        assert!((r - r0).abs() <= 1e-8 * r0.abs().max(1.0), "{r} vs {r0}")
                    }
                }
            }
        }

        // ex.r12: ratio to (p12 - f)
        let (d, _) = ex_r12_d_frames();
        let omega = nform_from_frame(&d);
        let m = ChartPoint::new(vec![0.5, -1.0, 2.0], 0.7, vec![0.1, 0.2, 0.3]);
        let fval = 0.5 * 0.3 + 0.7;
        let mut ratio: Option<f64> = None;
        for _ in 0..100 {
            let p = random_sym(3, &mut rng);
            let m1 = JetPoint::new(m.clone(), p.clone());
            let h = horizontalize(&omega, &m1).unwrap();
            let res = p[(0, 1)] - fval;
            if res.abs() < 1e-3 {
                continue;
            }
            let r = h / res;
            match ratio {
                None => ratio = Some(r),
                Some(r0) => assert!((r - r0).abs() <= 1e-8 * r0.abs().max(1.0)),
            }
        }
        // and that constant is -1
        assert!((ratio.unwrap() + 1.0).abs() < 1e-10);
    }

    #[test]
    fn lychagin_on_det_hessian() {
        // B = 0: Ω from the D⊥ = <xhat_i> frame; equation det P = 0
        let n = 2;
        let b = BField::zero(n);
        let (_, dperp) = b.frames_symbolic();
        let omega = nform_from_frame(&dperp);
        let vt = VarTable::chart(n);
        let mut rng = SplitMix64::new(66);
        for _ in 0..20 {
            let m = ChartPoint {
                x: (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                z: rng.uniform(-1.0, 1.0),
                p: (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            };
            // p-only functions are intermediate integrals of det P = 0
            let f = parse("p1", &vt).unwrap();
            assert!(lychagin_test(&f, &omega, &m, 1e-10).unwrap());
            let f = parse("p1*p2 - 3*p2", &vt).unwrap();
            assert!(lychagin_test(&f, &omega, &m, 1e-10).unwrap());
            // x^1 is not
            let f = parse("x1", &vt).unwrap();
            assert!(!lychagin_test(&f, &omega, &m, 1e-10).unwrap());
            // constants trivially pass (df = 0)
            let f = Expr::constant(4.0);
            assert!(lychagin_test(&f, &omega, &m, 1e-10).unwrap());
        }
    }

    #[test]
    fn first_integral_membership_cases() {
        let n = 2;
        let b = BField::zero(n);
        let vt = VarTable::chart(n);
        let mut rng = SplitMix64::new(67);
        for _ in 0..10 {
            let m = ChartPoint {
                x: (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                z: rng.uniform(-1.0, 1.0),
                p: (0..n).map(|_| rng.uniform(0.2, 1.0)).collect(),
            };
            // p-only f: Y_f ∈ <xhat> = D = D⊥
            let f = parse("p1*p2", &vt).unwrap();
            assert_eq!(
                first_integral_test(&f, &b, &m, 1e-8).unwrap(),
                Membership::InD { both: true }
            );
            // f = z: Y_z = -Σ p_i ∂_{p_i} ∉ <xhat> at generic p
            let f = parse("z", &vt).unwrap();
            assert_eq!(
                first_integral_test(&f, &b, &m, 1e-8).unwrap(),
                Membership::Neither
            );
        }
        // hyperbolic example: f = p1 - x2 has Y_f ∈ D, f = p1 + x2 has Y_f ∈ D⊥
        let b = hyperbolic_b();
        let m = ChartPoint::new(vec![0.4, -0.3], 0.2, vec![1.0, 0.5]);
        let f = parse("p1 - x2", &vt).unwrap();
        assert_eq!(
            first_integral_test(&f, &b, &m, 1e-8).unwrap(),
            Membership::InD { both: false }
        );
        let f = parse("p1 + x2", &vt).unwrap();
        assert_eq!(
            first_integral_test(&f, &b, &m, 1e-8).unwrap(),
            Membership::InDperp
        );
        // zero field is an error
        let f = Expr::constant(1.0);
        assert!(matches!(
            first_integral_test(&f, &b, &m, 1e-8),
            Err(MaeError::ZeroField)
        ));
    }

    #[test]
    fn lychagin_agrees_with_first_integral_test() {
        // intermediate-integral consistency on a documented polynomial family:
        // B constant; accept cases f_j = p_j - Σ_k b_kj x^k (first integrals of
        // D), reject cases are generic quadratics
        let mut rng = SplitMix64::new(68);
        let mut accepts = 0;
        let mut rejects = 0;
        for trial in 0..50 {
            let n = 2 + (trial % 2);
            let bmat = DMatrix::from_fn(n, n, |_, _| rng.uniform(-1.0, 1.0));
            let b = BField::from_constants(&bmat);
            let (_, dperp_sym) = b.frames_symbolic();
            let omega = nform_from_frame(&dperp_sym);
            let vt = VarTable::chart(n);
            let f = if trial % 2 == 0 {
                let j = rng.below(n);
                let mut e = Expr::var(format!("p{}", j + 1));
                for k in 0..n {
                    e = Expr::sub(
                        e,
                        Expr::mul(
                            Expr::constant(bmat[(k, j)]),
                            Expr::var(format!("x{}", k + 1)),
                        ),
                    );
                }
                e
            } else {
                let names: Vec<String> = vt.names().to_vec();
                let a = &names[rng.below(names.len())];
                let c = &names[rng.below(names.len())];
                Expr::add(
                    Expr::mul(Expr::var(a.clone()), Expr::var(c.clone())),
                    Expr::var(names[rng.below(names.len())].clone()),
                )
            };
            let m = ChartPoint {
                x: (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                z: rng.uniform(-1.0, 1.0),
                p: (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            };
            let lych = lychagin_test(&f, &omega, &m, 1e-8).unwrap();
            let memb = match first_integral_test(&f, &b, &m, 1e-8) {
                Ok(m) => m.accepted(),
                Err(MaeError::ZeroField) => continue,
                Err(e) => panic!("{e}"),
            };
            assert_eq!(lych, memb, "trial {trial}: lychagin {lych} vs membership {memb}");
            if lych {
                accepts += 1;
            } else {
                rejects += 1;
            }
        }
        // the family must exercise both outcomes
        assert!(accepts >= 10 && rejects >= 10, "{accepts} accepts, {rejects} rejects");
    }

    fn reference_span(vectors: &[TangentAtPoint]) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = vectors.iter().map(|v| v.to_vector()).collect();
        linalg::orthonormal_span(&cols, 1e-12)
    }

    #[test]
    fn reconstruct_hyperbolic_example() {
        let vt = VarTable::new(2, 2);
        let f = parse("p11*p22 - p12^2 + 1", &vt).unwrap();
        let m = ChartPoint::new(vec![0.2, -0.4], 0.1, vec![0.6, -0.9]);
        let cfg = ReconstructCfg {
            samples: 80,
            seed: 7,
            ..Default::default()
        };
        let rep = reconstruct_distributions(&f, &m, &cfg).unwrap();
        // references: D = <xhat1 + dp2, xhat2 - dp1>, D⊥ with flipped signs
        let mut d1 = TangentAtPoint::xhat(1, &m);
        d1.dp[1] = 1.0;
        let mut d2 = TangentAtPoint::xhat(2, &m);
        d2.dp[0] = -1.0;
        let mut e1 = TangentAtPoint::xhat(1, &m);
        e1.dp[1] = -1.0;
        let mut e2 = TangentAtPoint::xhat(2, &m);
        e2.dp[0] = 1.0;
        let ref_d = reference_span(&[d1, d2]);
        let ref_dp = reference_span(&[e1, e2]);
        let got_d = rep.d.span();
        let got_dp = rep.dperp.span();
        let direct = max_principal_angle(&got_d, &ref_d).max(max_principal_angle(&got_dp, &ref_dp));
        let swapped =
            max_principal_angle(&got_d, &ref_dp).max(max_principal_angle(&got_dp, &ref_d));
        assert!(direct.min(swapped) <= 1e-6, "angles {direct} / {swapped}");
        assert!(!rep.lagrangian);
    }

    #[test]
    fn reconstruct_ex_r12() {
        let vt = VarTable::new(3, 2);
        // F = p12 - (x1 p3 + z)
        let f = parse("p12 - (x1*p3 + z)", &vt).unwrap();
        let m = ChartPoint::new(vec![0.5, -1.0, 2.0], 0.7, vec![0.1, 0.2, 0.3]);
        let cfg = ReconstructCfg {
            samples: 120,
            seed: 11,
            ..Default::default()
        };
        let rep = reconstruct_distributions(&f, &m, &cfg).unwrap();
        let fval = 0.5 * 0.3 + 0.7;
        // D = <xhat1 + f dp2, dp1, dp3>, D⊥ = <xhat2 + f dp1, dp2, dp3>
        let mut d1 = TangentAtPoint::xhat(1, &m);
        d1.dp[1] = fval;
        let d2 = TangentAtPoint::dp_dir(1, 3);
        let d3 = TangentAtPoint::dp_dir(3, 3);
        let mut e1 = TangentAtPoint::xhat(2, &m);
        e1.dp[0] = fval;
        let e2 = TangentAtPoint::dp_dir(2, 3);
        let e3 = TangentAtPoint::dp_dir(3, 3);
        let ref_d = reference_span(&[d1, d2, d3]);
        let ref_dp = reference_span(&[e1, e2, e3]);
        let got_d = rep.d.span();
        let got_dp = rep.dperp.span();
        let direct = max_principal_angle(&got_d, &ref_d).max(max_principal_angle(&got_dp, &ref_dp));
        let swapped =
            max_principal_angle(&got_d, &ref_dp).max(max_principal_angle(&got_dp, &ref_d));
        assert!(direct.min(swapped) <= 1e-6, "angles {direct} / {swapped}");
    }

    #[test]
    fn reconstruct_rejects_elliptic() {
        // elliptic Monge-Ampère det P = 1: metric definite on the whole fiber
        let vt = VarTable::new(2, 2);
        let f = parse("p11*p22 - p12^2 - 1", &vt).unwrap();
        let m = ChartPoint::origin(2);
        let cfg = ReconstructCfg {
            samples: 40,
            seed: 13,
            ..Default::default()
        };
        match reconstruct_distributions(&f, &m, &cfg) {
            Err(MaeError::NotGoursatType { .. }) => {}
            other => panic!("expected NotGoursatType, got {other:?}"),
        }
    }

    #[test]
    fn reconstruct_reports_empty_fiber() {
        // p11^2 + p22^2 + 1 has no real fiber points at all
        let vt = VarTable::new(2, 2);
        let f = parse("p11^2 + p22^2 + 1", &vt).unwrap();
        let m = ChartPoint::origin(2);
        let cfg = ReconstructCfg {
            samples: 5,
            seed: 17,
            ..Default::default()
        };
        match reconstruct_distributions(&f, &m, &cfg) {
            Err(MaeError::InsufficientSamples { accepted: 0, .. }) => {}
            other => panic!("expected InsufficientSamples, got {other:?}"),
        }
    }

    #[test]
    fn reconstruct_lagrangian_case() {
        // B = 0: D = D⊥ = <xhat>; every sample is rank one
        let vt = VarTable::new(2, 2);
        let f = parse("p11*p22 - p12^2", &vt).unwrap();
        let m = ChartPoint::new(vec![0.1, 0.2], -0.5, vec![0.3, 0.8]);
        let cfg = ReconstructCfg {
            samples: 40,
            seed: 19,
            ..Default::default()
        };
        let rep = reconstruct_distributions(&f, &m, &cfg).unwrap();
        assert!(rep.lagrangian);
        let angle = max_principal_angle(&rep.d.span(), &rep.dperp.span());
        assert!(angle <= 1e-8);
        let bhat = recover_b(&rep.d).unwrap();
        assert!(bhat.norm() <= 1e-7, "B should vanish, got {bhat}");
    }

    #[test]
    fn recover_b_from_frames() {
        // hyperbolic frame -> B
        let b = hyperbolic_b();
        let m = ChartPoint::new(vec![0.3, 0.1], 0.0, vec![0.5, -0.2]);
        let (d, _) = frames(&b, &m).unwrap();
        let bhat = recover_b(&d).unwrap();
        let expected = b.eval_at(&m).unwrap();
        assert!((bhat - expected).norm() < 1e-12);

        // <xhat> -> 0
        let (d0, _) = frames(&BField::zero(3), &m3()).unwrap();
        assert!(recover_b(&d0).unwrap().norm() < 1e-14);

        // ex.r12's D contains ∂_{p_1}: not in normal form
        let m = ChartPoint::new(vec![0.5, -1.0, 2.0], 0.7, vec![0.1, 0.2, 0.3]);
        let (dfields, _) = ex_r12_d_frames();
        let vectors: Vec<TangentAtPoint> =
            dfields.iter().map(|y| y.eval_at(&m).unwrap()).collect();
        let frame = DistFrame::new(m, vectors);
        assert!(matches!(
            recover_b(&frame),
            Err(MaeError::NonTransversal { .. })
        ));
    }

    fn m3() -> ChartPoint {
        ChartPoint::new(vec![0.1, 0.2, 0.3], 0.4, vec![0.5, 0.6, 0.7])
    }

    #[test]
    fn roundtrip_reconstruct_then_recover() {
        // random affine B (n = 2): F = det(P − B), reconstruct, read B back
        let mut rng = SplitMix64::new(71);
        for trial in 0..5 {
            let n = 2;
            let vt = VarTable::chart(n);
            let names: Vec<String> = vt.names().to_vec();
            let entries: Vec<Vec<Expr>> = (0..n)
                .map(|_| {
                    (0..n)
                        .map(|_| {
                            Expr::add(
                                Expr::constant(rng.uniform(-1.0, 1.0)),
                                Expr::mul(
                                    Expr::constant(rng.uniform(-0.5, 0.5)),
                                    Expr::var(names[rng.below(names.len())].clone()),
                                ),
                            )
                        })
                        .collect()
                })
                .collect();
            let b = BField::new(entries);
            let f = b.residual_expr();
            let m = ChartPoint {
                x: (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                z: rng.uniform(-1.0, 1.0),
                p: (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            };
            let cfg = ReconstructCfg {
                samples: 60,
                seed: 100 + trial,
                ..Default::default()
            };
            let rep = reconstruct_distributions(&f, &m, &cfg).unwrap();
            let bm = b.eval_at(&m).unwrap();
            let check = |frame: &DistFrame| -> f64 {
                match recover_b(frame) {
                    Ok(bhat) => {
                        let e1 = (&bhat - &bm).norm();
                        let e2 = (&bhat - bm.transpose()).norm();
                        e1.min(e2)
                    }
                    Err(_) => f64::INFINITY,
                }
            };
            let err = check(&rep.d).min(check(&rep.dperp));
            assert!(err <= 1e-6, "trial {trial}: recovered B off by {err}");
        }
    }

    #[test]
    fn kernel_lines_lie_in_the_distributions() {
        // at regular points of det(P−B) = 0 the right-kernel lift lies in D⊥
        // and the left-kernel lift lies in D
        let mut rng = SplitMix64::new(72);
        for n in 2..=3 {
            let bmat = DMatrix::from_fn(n, n, |_, _| rng.uniform(-1.0, 1.0));
            let b = BField::from_constants(&bmat);
            let f = b.residual_expr();
            let ev = MetricEvaluator::new(&f, n).unwrap();
            let m = ChartPoint::origin(n);
            let (d, dperp) = frames(&b, &m).unwrap();
            let dspan = d.span();
            let pspan = dperp.span();
            for _ in 0..20 {
                let jp = sample_fiber_point(&ev, &m, &mut rng, 1e-13).unwrap();
                let r = goursat_point_report(&b, &jp, 1e-9).unwrap();
                if r.class != PointClass::Regular {
                    continue;
                }
                let a = r.kernel_right.unwrap();
                let bk = r.kernel_left.unwrap();
                let lift_a = jp.ambient_from_fiber(&a).to_vector();
                let lift_b = jp.ambient_from_fiber(&bk).to_vector();
                assert!(
                    linalg::residual_against_span(&pspan, &lift_a) <= 1e-8,
                    "right kernel must lift into D⊥"
                );
                assert!(
                    linalg::residual_against_span(&dspan, &lift_b) <= 1e-8,
                    "left kernel must lift into D"
                );
            }
        }
    }
}

#[cfg(test)]
mod consistency_tests {
    use super::*;

    fn random_affine_b(n: usize, rng: &mut SplitMix64) -> BField {
        let vt = VarTable::chart(n);
        let names: Vec<String> = vt.names().to_vec();
        let entries: Vec<Vec<Expr>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        Expr::add(
                            Expr::constant(rng.uniform(-1.0, 1.0)),
                            Expr::mul(
                                Expr::constant(rng.uniform(-0.6, 0.6)),
                                Expr::var(names[rng.below(names.len())].clone()),
                            ),
                        )
                    })
                    .collect()
            })
            .collect();
        BField::new(entries)
    }

    #[test]
    fn nform_of_dperp_frames_recovers_the_determinant_residual() {
        // for arbitrary B the n-form of the D⊥ frames horizontalizes to a
        // fixed multiple of det(P − B) at each base point
        let mut rng = SplitMix64::new(91);
        for n in 2..=3 {
            for _ in 0..10 {
                let b = random_affine_b(n, &mut rng);
                let (d, dperp) = b.frames_symbolic();
                let m = ChartPoint {
                    x: (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                    z: rng.uniform(-1.0, 1.0),
                    p: (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                };
                for frame in [&d, &dperp] {
                    let omega = nform_from_frame(frame);
                    let mut ratio: Option<f64> = None;
                    for _ in 0..40 {
                        let m1 = JetPoint::new(m.clone(), random_sym(n, &mut rng));
                        let h = horizontalize(&omega, &m1).unwrap();
                        let res = goursat_residual(&b, &m1).unwrap();
                        if res.abs() < 1e-2 {
                            continue;
                        }
                        let r = h / res;
                        match ratio {
                            None => ratio = Some(r),
                            Some(r0) => assert!(
                                (r - r0).abs() <= 1e-9 * r0.abs().max(1.0),
                                "n={n}: {r} vs {r0}"
                            ),
                        }
                    }
                    // the symbolic horizontalization agrees too
                    let fh = horizontalize_expr(&omega);
                    let jt = VarTable::new(n, 2);
                    let m1 = JetPoint::new(m.clone(), random_sym(n, &mut rng));
                    let via_expr = eval(&fh, &m1.env(&jt)).unwrap();
                    let direct = horizontalize(&omega, &m1).unwrap();
                    assert!((via_expr - direct).abs() <= 1e-10 * (1.0 + direct.abs()));
                }
            }
        }
    }

    #[test]
    fn lychagin_and_membership_agree_for_varying_b() {
        // agreement also holds with position-dependent B entries; the accept
        // cases use first integrals of the constant part frozen by affine
        // perturbations only in directions the integral kills
        let mut rng = SplitMix64::new(92);
        let n = 2;
        let vt = VarTable::chart(n);
        for trial in 0..30 {
            let b = random_affine_b(n, &mut rng);
            let (_, dperp_sym) = b.frames_symbolic();
            let omega = nform_from_frame(&dperp_sym);
            // generic candidates: quadratics, coordinates, mixed
            let names: Vec<String> = vt.names().to_vec();
            let f = match trial % 3 {
                0 => Expr::var(names[rng.below(names.len())].clone()),
                1 => Expr::mul(
                    Expr::var(names[rng.below(names.len())].clone()),
                    Expr::var(names[rng.below(names.len())].clone()),
                ),
                _ => Expr::add(
                    Expr::var(names[rng.below(names.len())].clone()),
                    Expr::mul(
                        Expr::constant(rng.uniform(-1.0, 1.0)),
                        Expr::var(names[rng.below(names.len())].clone()),
                    ),
                ),
            };
            let m = ChartPoint {
                x: (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                z: rng.uniform(-1.0, 1.0),
                p: (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            };
            let lych = lychagin_test(&f, &omega, &m, 1e-8).unwrap();
            let memb = match first_integral_test(&f, &b, &m, 1e-8) {
                Ok(v) => v.accepted(),
                Err(MaeError::ZeroField) => continue,
                Err(e) => panic!("{e}"),
            };
            assert_eq!(lych, memb, "trial {trial}");
        }
    }
}
