//! Pointwise linear algebra of the Lagrangian-Grassmannian fiber.
//!
//! A point of the prolonged chart carries a symmetric matrix `P = ‖p_ij‖`
//! parametrizing the Lagrangian plane `L_P = ⟨w_i = ∂̂_{x^i} + p_ij ∂_{p_j}⟩`.
//! A tangent vector of the fiber is a symmetric matrix `Ṗ` and corresponds to
//! the bilinear form `g^Ṗ = ṗ_ij e^i ⊗ e^j` on `L`; a hypersurface `F = 0`
//! carries the conformal metric with matrix `G_ii = F_{p_ii}`,
//! `G_ij = ½ F_{p_ij}` (i ≠ j) in the tautological frame, so that `ηᵀGη`
//! literally equals `Σ_{i≤j} F_{p_ij} η_i η_j`. All class queries are
//! scale-invariant: only the conformal class of `G` matters.

use crate::contact::{ChartPoint, TangentAtPoint};
use crate::expr::{diff, Expr, MultiIndex, Tape, VarKind, VarTable};
use crate::linalg;
use nalgebra::{DMatrix, DVector};

/// A point of the once-prolonged chart: a base chart point together with the
/// symmetric matrix `P` of second-order coordinates.
#[derive(Clone, Debug)]
pub struct JetPoint {
    pub base: ChartPoint,
    p2: DMatrix<f64>,
}

impl JetPoint {
    /// The upper triangle of `p_matrix` is mirrored so `P = Pᵀ` holds
    /// exactly.
    pub fn new(base: ChartPoint, p_matrix: DMatrix<f64>) -> Self {
        let n = base.n();
        assert_eq!(p_matrix.nrows(), n);
        assert_eq!(p_matrix.ncols(), n);
        let mut p2 = p_matrix;
        for i in 0..n {
            for j in 0..i {
                p2[(i, j)] = p2[(j, i)];
            }
        }
        JetPoint { base, p2 }
    }

    pub fn n(&self) -> usize {
        self.base.n()
    }

    pub fn p2(&self) -> &DMatrix<f64> {
        &self.p2
    }

    /// Bind chart and second-order slots of an environment over a table with
    /// jet order ≥ 2.
    pub fn bind(&self, env: &mut crate::expr::Env<'_>) {
        self.base.bind(env);
        let n = self.n();
        for i in 0..n {
            for j in i..n {
                let name = MultiIndex::new(vec![(i + 1) as u8, (j + 1) as u8]).var_name();
                env.set(&name, self.p2[(i, j)]);
            }
        }
    }

    pub fn env<'a>(&self, table: &'a VarTable) -> crate::expr::Env<'a> {
        let mut env = crate::expr::Env::new(table);
        self.bind(&mut env);
        env
    }

    /// Tautological frame `w_i = ∂̂_{x^i} + p_ij ∂_{p_j}` as ambient tangents.
    pub fn tautological_frame(&self) -> Vec<TangentAtPoint> {
        let n = self.n();
        (0..n)
            .map(|i| {
                let mut w = TangentAtPoint::zero(n);
                w.dx[i] = 1.0;
                w.dz = self.base.p[i];
                for j in 0..n {
                    w.dp[j] = self.p2[(i, j)];
                }
                w
            })
            .collect()
    }

    /// Ambient tangent `Σ v^i w_i` of a fiber vector given in the
    /// tautological frame.
    pub fn ambient_from_fiber(&self, v: &DVector<f64>) -> TangentAtPoint {
        let n = self.n();
        let mut out = TangentAtPoint::zero(n);
        for i in 0..n {
            out.dx[i] = v[i];
            out.dz += self.base.p[i] * v[i];
        }
        let pv = &self.p2 * v;
        for j in 0..n {
            out.dp[j] = pv[j];
        }
        out
    }
}

/// A tangent vector to the fiber: a symmetric `Ṗ`.
#[derive(Clone, Debug)]
pub struct TangentSym(DMatrix<f64>);

impl TangentSym {
    pub fn new(m: DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mut s = m;
        for i in 0..n {
            for j in 0..i {
                s[(i, j)] = s[(j, i)];
            }
        }
        TangentSym(s)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Symmetric matrix of a conformal metric in the tautological frame `{w_i}`.
/// Only the conformal class is meaningful.
#[derive(Clone, Debug)]
pub struct MetricMatrix {
    g: DMatrix<f64>,
}

impl MetricMatrix {
    pub fn new(g: DMatrix<f64>) -> Self {
        MetricMatrix { g }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn n(&self) -> usize {
        self.g.nrows()
    }

    pub fn norm(&self) -> f64 {
        self.g.norm()
    }

    /// `ηᵀ G η = Σ_{i≤j} F_{p_ij} η_i η_j`.
    pub fn quadratic(&self, eta: &DVector<f64>) -> f64 {
        (eta.transpose() * &self.g * eta)[(0, 0)]
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GrassmannError {
    #[error("equation uses a variable outside chart/second-order scope: `{0}`")]
    BadVariable(String),
    #[error("singular point: the conformal metric vanishes, every covector is vacuously characteristic")]
    SingularPoint,
    #[error(transparent)]
    Eval(#[from] crate::expr::EvalError),
}

/// Precompiled gradient `∂F/∂p_ij` of an equation in jet variables of order
/// ≤ 2, for repeated metric evaluation on fiber samples.
pub struct MetricEvaluator {
    table: VarTable,
    n: usize,
    f_tape: Tape,
    /// `(i, j, tape)` for i ≤ j, 0-based.
    grad: Vec<(usize, usize, Tape)>,
}

impl MetricEvaluator {
    pub fn new(f: &Expr, n: usize) -> Result<Self, GrassmannError> {
        let table = VarTable::new(n, 2);
        for v in f.variables() {
            match table.kind(&v) {
                Some(VarKind::X(_)) | Some(VarKind::Z) => {}
                Some(VarKind::P(mi)) if mi.order() <= 2 => {}
                _ => return Err(GrassmannError::BadVariable(v)),
            }
        }
        let f_tape = Tape::compile(f, &table);
        let mut grad = Vec::new();
        for i in 0..n {
            for j in i..n {
                let name = MultiIndex::new(vec![(i + 1) as u8, (j + 1) as u8]).var_name();
                let d = diff(f, &name);
                grad.push((i, j, Tape::compile(&d, &table)));
            }
        }
        Ok(MetricEvaluator {
            table,
            n,
            f_tape,
            grad,
        })
    }

    pub fn table(&self) -> &VarTable {
        &self.table
    }

    pub fn slots_for(&self, m1: &JetPoint) -> Vec<f64> {
        m1.env(&self.table).slots().to_vec()
    }

    pub fn f_at_slots(&self, slots: &[f64]) -> f64 {
        self.f_tape.eval_once(slots)
    }

    pub fn f_at(&self, m1: &JetPoint) -> f64 {
        self.f_at_slots(&self.slots_for(m1))
    }

    pub fn metric_at_slots(&self, slots: &[f64]) -> MetricMatrix {
        let mut g = DMatrix::zeros(self.n, self.n);
        let mut stack = Vec::new();
        for (i, j, tape) in &self.grad {
            let v = tape.eval(slots, &mut stack);
            if i == j {
                g[(*i, *i)] = v;
            } else {
                g[(*i, *j)] = 0.5 * v;
                g[(*j, *i)] = 0.5 * v;
            }
        }
        MetricMatrix::new(g)
    }

    pub fn metric_at(&self, m1: &JetPoint) -> MetricMatrix {
        self.metric_at_slots(&self.slots_for(m1))
    }

    /// Derivative of `t ↦ F(P + tQ)` at the given slots,
    /// `Σ_{i≤j} F_{p_ij} Q_ij`.
    pub fn directional(&self, slots: &[f64], q: &DMatrix<f64>) -> f64 {
        let mut s = 0.0;
        let mut stack = Vec::new();
        for (i, j, tape) in &self.grad {
            s += tape.eval(slots, &mut stack) * q[(*i, *j)];
        }
        s
    }

    /// Slot index of `p_ij` (i ≤ j, 0-based arguments).
    pub fn p2_slot(&self, i: usize, j: usize) -> usize {
        let name = MultiIndex::new(vec![(i + 1) as u8, (j + 1) as u8]).var_name();
        self.table.slot(&name).unwrap()
    }
}

/// Matrix of the conformal metric `g_(dF)` of the hypersurface `{F = 0}` at a
/// jet point, in the tautological frame. A zero matrix signals a singular
/// point of the hypersurface.
pub fn metric_of_equation(f: &Expr, m1: &JetPoint) -> Result<MetricMatrix, GrassmannError> {
    let ev = MetricEvaluator::new(f, m1.n())?;
    Ok(ev.metric_at(m1))
}

/// Rank of a fiber tangent and an orthonormal basis of its radical.
pub fn vector_rank(pdot: &TangentSym, tol: f64) -> (usize, Vec<DVector<f64>>) {
    let pairs = linalg::sym_eigen_sorted(pdot.matrix());
    let lmax = pairs.first().map(|(l, _)| l.abs()).unwrap_or(0.0);
    let mut rank = 0;
    let mut radical = Vec::new();
    for (l, v) in pairs {
        if lmax > 0.0 && l.abs() > tol * lmax {
            rank += 1;
        } else {
            radical.push(v);
        }
    }
    (rank, radical)
}

/// Is `η` a characteristic covector of `{F = 0}` at `m1`:
/// `Σ_{i≤j} F_{p_ij} η_i η_j = 0` up to `tol·‖G‖·‖η‖²`.
///
/// If the metric vanishes (singular point) every covector is vacuously
/// characteristic; that is reported as an error rather than `true`.
pub fn is_characteristic_covector(
    f: &Expr,
    m1: &JetPoint,
    eta: &DVector<f64>,
    tol: f64,
) -> Result<bool, GrassmannError> {
    assert!(eta.norm() > 0.0, "covector must be nonzero");
    let g = metric_of_equation(f, m1)?;
    is_characteristic_for_metric(&g, eta, tol)
}

/// Same test against an already computed metric.
pub fn is_characteristic_for_metric(
    g: &MetricMatrix,
    eta: &DVector<f64>,
    tol: f64,
) -> Result<bool, GrassmannError> {
    let gnorm = g.norm();
    if gnorm <= f64::MIN_POSITIVE {
        return Err(GrassmannError::SingularPoint);
    }
    let q = g.quadratic(eta);
    Ok(q.abs() <= tol * gnorm * eta.norm_squared())
}

/// Outcome of the real decomposition of a conformal metric.
#[derive(Clone, Debug)]
pub enum Decomposition {
    /// All eigenvalues below tolerance: singular point.
    Zero,
    /// `G ∝ ±v vᵀ`.
    Rank1(DVector<f64>),
    /// `G = v ∨ w` with independent real `v, w`; the pair is unordered and
    /// each factor is determined up to sign.
    Decomposable(DVector<f64>, DVector<f64>),
    /// Rank ≥ 3, or rank 2 with definite sign (no real factorization).
    NotDecomposable { rank: usize },
}

/// Decompose a conformal metric by its eigenstructure: decomposable means
/// exactly two surviving eigenvalues of opposite signs, and then
/// `v ∨ w = G` exactly with `v, w = √λ₊ u₊ ± √(−λ₋) u₋`.
pub fn decompose_metric(g: &MetricMatrix, tol: f64) -> Decomposition {
    let pairs = linalg::sym_eigen_sorted(g.matrix());
    let lmax = pairs.first().map(|(l, _)| l.abs()).unwrap_or(0.0);
    if lmax == 0.0 {
        return Decomposition::Zero;
    }
    let surviving: Vec<&(f64, DVector<f64>)> = pairs
        .iter()
        .filter(|(l, _)| l.abs() > tol * lmax)
        .collect();
    match surviving.len() {
        0 => Decomposition::Zero,
        1 => {
            let (l, u) = surviving[0];
            Decomposition::Rank1(u * l.abs().sqrt())
        }
        2 => {
            let (l1, u1) = surviving[0];
            let (l2, u2) = surviving[1];
            if l1 * l2 < 0.0 {
                let (lp, up, lm, um) = if *l1 > 0.0 {
                    (*l1, u1, *l2, u2)
                } else {
                    (*l2, u2, *l1, u1)
                };
                let a = up * lp.sqrt();
                let b = um * (-lm).sqrt();
                Decomposition::Decomposable(&a + &b, &a - &b)
            } else {
                Decomposition::NotDecomposable { rank: 2 }
            }
        }
        r => Decomposition::NotDecomposable { rank: r },
    }
}

/// Does the whole line of Lagrangian planes `P + t ηηᵀ` stay inside the
/// equation: samples `t ∈ [−1, 1]` with the base point held fixed. The
/// threshold is relative to the gradient scale so the answer is invariant
/// under `F → cF` and `η → cη`.
pub fn strong_char_test(
    f: &Expr,
    m1: &JetPoint,
    eta: &DVector<f64>,
    samples: usize,
    tol: f64,
) -> Result<bool, GrassmannError> {
    assert!(samples >= 2);
    let ev = MetricEvaluator::new(f, m1.n())?;
    let g = ev.metric_at(m1);
    let scale = (g.norm() * eta.norm_squared()).max(f64::MIN_POSITIVE);
    let rank1 = eta * eta.transpose();
    for k in 0..samples {
        let t = -1.0 + 2.0 * k as f64 / (samples - 1) as f64;
        let p_t = m1.p2() + t * &rank1;
        let shifted = JetPoint::new(m1.base.clone(), p_t);
        let value = ev.f_at(&shifted);
        if value.abs() > tol * scale {
            return Ok(false);
        }
    }
    Ok(true)
}
