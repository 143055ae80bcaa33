//! Darboux-chart contact geometry.
//!
//! Everything is chart-local with the contact form fixed as
//! `θ = dz − Σ p_i dx^i`; conformal rescaling is out of scope. The Cartan
//! distribution is spanned by `∂̂_{x^i} = ∂_{x^i} + p_i ∂_z` and `∂_{p_i}`,
//! and `dθ = Σ dx^i ∧ dp_i` restricts to the symplectic form on it.

use crate::expr::{diff, eval, Env, Expr, VarTable};
use crate::linalg;
use nalgebra::{DMatrix, DVector};

/// A point of the Darboux chart `(x, z, p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartPoint {
    pub x: Vec<f64>,
    pub z: f64,
    pub p: Vec<f64>,
}

impl ChartPoint {
    pub fn new(x: Vec<f64>, z: f64, p: Vec<f64>) -> Self {
        assert_eq!(x.len(), p.len());
        ChartPoint { x, z, p }
    }

    pub fn origin(n: usize) -> Self {
        ChartPoint {
            x: vec![0.0; n],
            z: 0.0,
            p: vec![0.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().all(|v| v.is_finite())
            && self.z.is_finite()
            && self.p.iter().all(|v| v.is_finite())
    }

    /// Bind the chart slots of `env` (the table must admit `x1..xn, z,
    /// p1..pn`).
    pub fn bind(&self, env: &mut Env<'_>) {
        for (i, &v) in self.x.iter().enumerate() {
            env.set(&format!("x{}", i + 1), v);
        }
        env.set("z", self.z);
        for (i, &v) in self.p.iter().enumerate() {
            env.set(&format!("p{}", i + 1), v);
        }
    }

    /// Fresh environment over a chart table.
    pub fn env<'a>(&self, table: &'a VarTable) -> Env<'a> {
        let mut env = Env::new(table);
        self.bind(&mut env);
        env
    }
}

/// A tangent vector at a chart point, in the coordinate frame
/// `(∂_{x^i}, ∂_z, ∂_{p_i})`.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentAtPoint {
    pub dx: Vec<f64>,
    pub dz: f64,
    pub dp: Vec<f64>,
}

impl TangentAtPoint {
    pub fn zero(n: usize) -> Self {
        TangentAtPoint {
            dx: vec![0.0; n],
            dz: 0.0,
            dp: vec![0.0; n],
        }
    }

    /// `∂̂_{x^i} = ∂_{x^i} + p_i ∂_z` at `m` (1-based index).
    pub fn xhat(i: usize, m: &ChartPoint) -> Self {
        let mut v = TangentAtPoint::zero(m.n());
        v.dx[i - 1] = 1.0;
        v.dz = m.p[i - 1];
        v
    }

    /// `∂_{p_i}` (1-based index).
    pub fn dp_dir(i: usize, n: usize) -> Self {
        let mut v = TangentAtPoint::zero(n);
        v.dp[i - 1] = 1.0;
        v
    }

    /// `∂_z`.
    pub fn dz_dir(n: usize) -> Self {
        let mut v = TangentAtPoint::zero(n);
        v.dz = 1.0;
        v
    }

    pub fn n(&self) -> usize {
        self.dx.len()
    }

    /// Ambient coordinates as a `(2n+1)`-vector ordered `(dx, dz, dp)`.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.n();
        let mut v = DVector::zeros(2 * n + 1);
        for i in 0..n {
            v[i] = self.dx[i];
            v[n + 1 + i] = self.dp[i];
        }
        v[n] = self.dz;
        v
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        let n = (v.len() - 1) / 2;
        TangentAtPoint {
            dx: v.as_slice()[..n].to_vec(),
            dz: v[n],
            dp: v.as_slice()[n + 1..].to_vec(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// `θ(v) = dz(v) − Σ p_i dx^i(v)` at `m`.
pub fn theta_eval(m: &ChartPoint, v: &TangentAtPoint) -> f64 {
    let mut s = v.dz;
    for i in 0..m.n() {
        s -= m.p[i] * v.dx[i];
    }
    s
}

/// `dθ(v, w) = Σ_i dx^i(v) dp_i(w) − dx^i(w) dp_i(v)`.
///
/// The value is the symplectic pairing when both arguments are Cartan; it is
/// evaluated on arbitrary tangents since `dθ` is defined on all of them.
pub fn omega_eval(_m: &ChartPoint, v: &TangentAtPoint, w: &TangentAtPoint) -> f64 {
    let mut s = 0.0;
    for i in 0..v.n() {
        s += v.dx[i] * w.dp[i] - w.dx[i] * v.dp[i];
    }
    s
}

/// A vector field on the chart with `Expr` coefficients in the frame
/// `(∂_{x^i}, ∂_z, ∂_{p_i})`.
#[derive(Clone, Debug)]
pub struct VectorFieldExpr {
    pub comp_x: Vec<Expr>,
    pub comp_z: Expr,
    pub comp_p: Vec<Expr>,
}

impl VectorFieldExpr {
    pub fn zero(n: usize) -> Self {
        VectorFieldExpr {
            comp_x: vec![Expr::zero(); n],
            comp_z: Expr::zero(),
            comp_p: vec![Expr::zero(); n],
        }
    }

    pub fn n(&self) -> usize {
        self.comp_x.len()
    }

    pub fn eval_at(&self, m: &ChartPoint) -> Result<TangentAtPoint, crate::expr::EvalError> {
        let table = VarTable::chart(m.n());
        let env = m.env(&table);
        let mut out = TangentAtPoint::zero(m.n());
        for i in 0..m.n() {
            out.dx[i] = eval(&self.comp_x[i], &env)?;
            out.dp[i] = eval(&self.comp_p[i], &env)?;
        }
        out.dz = eval(&self.comp_z, &env)?;
        Ok(out)
    }
}

/// Hamiltonian vector field `Y_f = Σ_i f_{p_i} ∂̂_{x^i} − (∂̂_{x^i} f) ∂_{p_i}`
/// of a function `f(x, z, p)`.
pub fn hamiltonian_field(f: &Expr, n: usize) -> VectorFieldExpr {
    let mut field = VectorFieldExpr::zero(n);
    let fz = diff(f, "z");
    let mut comp_z = Expr::zero();
    for i in 1..=n {
        let fpi = diff(f, &format!("p{i}"));
        let fxi_hat = Expr::add(
            diff(f, &format!("x{i}")),
            Expr::mul(Expr::var(format!("p{i}")), fz.clone()),
        );
        comp_z = Expr::add(
            comp_z,
            Expr::mul(Expr::var(format!("p{i}")), fpi.clone()),
        );
        field.comp_x[i - 1] = fpi;
        field.comp_p[i - 1] = Expr::neg(fxi_hat);
    }
    field.comp_z = comp_z;
    field
}

/// Lagrange bracket `{f, g} = Y_f(g) = ω(Y_f, Y_g)` as an expression.
pub fn bracket(f: &Expr, g: &Expr, n: usize) -> Expr {
    let fz = diff(f, "z");
    let gz = diff(g, "z");
    let mut acc = Expr::zero();
    for i in 1..=n {
        let pi = Expr::var(format!("p{i}"));
        let f_pi = diff(f, &format!("p{i}"));
        let g_pi = diff(g, &format!("p{i}"));
        let f_xhat = Expr::add(
            diff(f, &format!("x{i}")),
            Expr::mul(pi.clone(), fz.clone()),
        );
        let g_xhat = Expr::add(diff(g, &format!("x{i}")), Expr::mul(pi, gz.clone()));
        acc = Expr::add(
            acc,
            Expr::sub(Expr::mul(f_pi, g_xhat), Expr::mul(f_xhat, g_pi)),
        );
    }
    acc
}

/// Partial Legendre transformation over the index subset `s` (1-based):
/// `x'^α = p_α`, `p'_α = −x^α` for `α ∈ s`, `z' = z − Σ_{α∈s} p_α x^α`;
/// coordinates outside `s` are untouched. With `s` covering all indices this
/// is the full Legendre transformation.
pub fn legendre(m: &ChartPoint, s: &[usize]) -> ChartPoint {
    let mut out = m.clone();
    for &a in s {
        let i = a - 1;
        out.x[i] = m.p[i];
        out.p[i] = -m.x[i];
        out.z -= m.p[i] * m.x[i];
    }
    out
}

/// Inverse of [`legendre`] with the same subset.
pub fn legendre_inverse(m: &ChartPoint, s: &[usize]) -> ChartPoint {
    let mut out = m.clone();
    for &a in s {
        let i = a - 1;
        out.x[i] = -m.p[i];
        out.p[i] = m.x[i];
        out.z += m.x[i] * (-m.p[i]);
    }
    out
}

/// Coordinate pushforward of a tangent vector under the full Legendre
/// transformation: `∂̂_{x^i} ↦ −∂_{p'_i}`, `∂_{p_i} ↦ ∂̂_{x'^i}`,
/// `∂_z ↦ ∂_{z'}`.
pub fn legendre_pushforward_full(m: &ChartPoint, v: &TangentAtPoint) -> TangentAtPoint {
    let n = m.n();
    let m2 = legendre(m, &(1..=n).collect::<Vec<_>>());
    // decompose v = Σ a_i ∂̂_{x^i} + c ∂_z + Σ b_i ∂_{p_i}
    let c = theta_eval(m, v);
    let mut out = TangentAtPoint::zero(n);
    for i in 0..n {
        let a_i = v.dx[i];
        let b_i = v.dp[i];
        // image: a_i (−∂_{p'_i}) + b_i ∂̂_{x'^i} + c ∂_{z'}
        out.dx[i] = b_i;
        out.dp[i] = -a_i;
        out.dz += b_i * m2.p[i];
    }
    out.dz += c;
    out
}

#[derive(Debug, thiserror::Error)]
pub enum DatumError {
    #[error("x-projection Jacobian is rank-deficient at t = {t:?} (σ_min = {sigma_min:.3e})")]
    RankDeficientDatum { t: Vec<f64>, sigma_min: f64 },
    #[error("Newton did not converge while lifting the datum at t = {t:?} (residual {residual:.3e})")]
    NewtonDivergence { t: Vec<f64>, residual: f64 },
    #[error("datum component evaluation failed: {0}")]
    Eval(#[from] crate::expr::EvalError),
    #[error("datum violates the contact condition: residual {residual:.3e} at t = {t:?}")]
    NotIntegral { t: Vec<f64>, residual: f64 },
}

#[derive(Clone, Debug)]
enum PSource {
    Symbolic(Vec<Expr>),
    Lifted { f: Expr, p_seed: Vec<f64> },
}

/// An `(n−1)`-parameter integral submanifold of the contact distribution,
/// given by component expressions `X^i(t), Z(t)` and momenta `P_i(t)` that
/// are either symbolic or realized numerically from a first-order equation
/// `f = 0` plus the contact conditions.
///
/// Lifting assumes the datum is parametrizable by its x-projection. Vertical
/// data (rank-deficient x-projection) are rejected; apply a full or partial
/// [`legendre`] transformation to the problem first to flip the offending
/// directions into momenta.
#[derive(Clone, Debug)]
pub struct CauchyDatum {
    n: usize,
    x: Vec<Expr>,
    z: Expr,
    p: PSource,
    box_lo: Vec<f64>,
    box_hi: Vec<f64>,
    /// ∂X^i/∂t_h and ∂Z/∂t_h, precomputed.
    dx_dt: Vec<Vec<Expr>>,
    dz_dt: Vec<Expr>,
}

/// Sampling grid over the parameter box: `counts[h]` nodes per direction.
#[derive(Clone, Debug)]
pub struct ParamGrid {
    pub counts: Vec<usize>,
}

impl ParamGrid {
    pub fn uniform(dims: usize, count: usize) -> Self {
        ParamGrid {
            counts: vec![count; dims],
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().product()
    }

    /// Node `flat` of the grid over `[lo, hi]`.
    pub fn node(&self, flat: usize, lo: &[f64], hi: &[f64]) -> Vec<f64> {
        let mut rem = flat;
        let mut t = vec![0.0; self.counts.len()];
        for h in 0..self.counts.len() {
            let c = self.counts[h];
            let idx = rem % c;
            rem /= c;
            t[h] = if c == 1 {
                0.5 * (lo[h] + hi[h])
            } else {
                lo[h] + (hi[h] - lo[h]) * idx as f64 / (c - 1) as f64
            };
        }
        t
    }
}

/// Report of [`CauchyDatum::verify_integral`].
#[derive(Clone, Debug)]
pub struct IntegralReport {
    pub max_residual: f64,
    pub pass: bool,
    pub nodes_checked: usize,
}

impl CauchyDatum {
    /// Fully symbolic datum. The contact condition is the caller's claim and
    /// can be checked with [`CauchyDatum::verify_integral`].
    pub fn symbolic(
        x: Vec<Expr>,
        z: Expr,
        p: Vec<Expr>,
        box_lo: Vec<f64>,
        box_hi: Vec<f64>,
    ) -> Self {
        let n = x.len();
        assert_eq!(p.len(), n);
        assert_eq!(box_lo.len(), n.max(1) - 1);
        CauchyDatum::build(x, z, PSource::Symbolic(p), box_lo, box_hi)
    }

    fn build(x: Vec<Expr>, z: Expr, p: PSource, box_lo: Vec<f64>, box_hi: Vec<f64>) -> Self {
        let n = x.len();
        let params = n - 1;
        let dx_dt = (1..=params)
            .map(|h| {
                x.iter()
                    .map(|xi| diff(xi, &format!("t{h}")))
                    .collect::<Vec<_>>()
            })
            .collect();
        let dz_dt = (1..=params)
            .map(|h| diff(&z, &format!("t{h}")))
            .collect();
        CauchyDatum {
            n,
            x,
            z,
            p,
            box_lo,
            box_hi,
            dx_dt,
            dz_dt,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn params(&self) -> usize {
        self.n - 1
    }

    pub fn box_lo(&self) -> &[f64] {
        &self.box_lo
    }

    pub fn box_hi(&self) -> &[f64] {
        &self.box_hi
    }

    fn param_env<'a>(&self, table: &'a VarTable, t: &[f64]) -> Env<'a> {
        let mut env = Env::new(table);
        for (h, &v) in t.iter().enumerate() {
            env.set(&format!("t{}", h + 1), v);
        }
        env
    }

    /// The chart point over parameter value `t`, solving for the lifted
    /// momenta when needed.
    pub fn point_at(&self, t: &[f64]) -> Result<ChartPoint, DatumError> {
        let table = VarTable::params(self.params());
        let env = self.param_env(&table, t);
        let x: Vec<f64> = self
            .x
            .iter()
            .map(|e| eval(e, &env))
            .collect::<Result<_, _>>()?;
        let z = eval(&self.z, &env)?;
        let p = match &self.p {
            PSource::Symbolic(ps) => ps
                .iter()
                .map(|e| eval(e, &env))
                .collect::<Result<Vec<_>, _>>()?,
            PSource::Lifted { f, p_seed } => self.solve_lift(t, &x, z, f, p_seed)?,
        };
        Ok(ChartPoint { x, z, p })
    }

    /// Jacobian rows `∂X/∂t_h` and the derivative `∂Z/∂t_h` at `t`.
    fn projections_at(&self, t: &[f64]) -> Result<(DMatrix<f64>, Vec<f64>), DatumError> {
        let table = VarTable::params(self.params());
        let env = self.param_env(&table, t);
        let params = self.params();
        let mut jac = DMatrix::zeros(params, self.n);
        let mut dz = vec![0.0; params];
        for h in 0..params {
            for i in 0..self.n {
                jac[(h, i)] = eval(&self.dx_dt[h][i], &env)?;
            }
            dz[h] = eval(&self.dz_dt[h], &env)?;
        }
        Ok((jac, dz))
    }

    fn solve_lift(
        &self,
        t: &[f64],
        x: &[f64],
        z: f64,
        f: &Expr,
        p_seed: &[f64],
    ) -> Result<Vec<f64>, DatumError> {
        let (jac, dz) = self.projections_at(t)?;
        let sigma_min = linalg::smallest_singular_value(&jac);
        let sigma_max = jac.norm();
        if sigma_min <= 1e-10 * sigma_max.max(1.0) {
            return Err(DatumError::RankDeficientDatum {
                t: t.to_vec(),
                sigma_min,
            });
        }
        let chart = VarTable::chart(self.n);
        let fp: Vec<Expr> = (1..=self.n).map(|i| diff(f, &format!("p{i}"))).collect();
        let mut p = DVector::from_column_slice(p_seed);
        let residual = |p: &DVector<f64>| -> Result<DVector<f64>, DatumError> {
            let m = ChartPoint {
                x: x.to_vec(),
                z,
                p: p.as_slice().to_vec(),
            };
            let env = m.env(&chart);
            let mut r = DVector::zeros(self.n);
            for h in 0..self.params() {
                let mut s = -dz[h];
                for i in 0..self.n {
                    s += p[i] * jac[(h, i)];
                }
                r[h] = s;
            }
            r[self.n - 1] = eval(f, &env)?;
            Ok(r)
        };
        let mut r = residual(&p)?;
        // damped Newton: max 50 iterations, step halving on residual increase
        for _ in 0..50 {
            if r.amax() <= 1e-12 {
                return Ok(p.as_slice().to_vec());
            }
            let m = ChartPoint {
                x: x.to_vec(),
                z,
                p: p.as_slice().to_vec(),
            };
            let env = m.env(&chart);
            let mut jmat = DMatrix::zeros(self.n, self.n);
            for h in 0..self.params() {
                for i in 0..self.n {
                    jmat[(h, i)] = jac[(h, i)];
                }
            }
            for i in 0..self.n {
                jmat[(self.n - 1, i)] = eval(&fp[i], &env)?;
            }
            let step = linalg::lstsq(&jmat, &(-&r));
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let cand = &p + lambda * &step;
                let rc = residual(&cand)?;
                if rc.norm() < r.norm() || rc.amax() <= 1e-12 {
                    p = cand;
                    r = rc;
                    accepted = true;
                    break;
                }
                lambda *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if r.amax() <= 1e-12 {
            Ok(p.as_slice().to_vec())
        } else {
            Err(DatumError::NewtonDivergence {
                t: t.to_vec(),
                residual: r.amax(),
            })
        }
    }

    /// Contact residual `max_h |∂Z/∂t_h − Σ P_i ∂X^i/∂t_h|` at `t`.
    pub fn theta_residual_at(&self, t: &[f64]) -> Result<f64, DatumError> {
        let m = self.point_at(t)?;
        let (jac, dz) = self.projections_at(t)?;
        let mut worst: f64 = 0.0;
        for h in 0..self.params() {
            let mut s = dz[h];
            for i in 0..self.n {
                s -= m.p[i] * jac[(h, i)];
            }
            worst = worst.max(s.abs());
        }
        Ok(worst)
    }

    /// Check `θ|_N = 0` over a grid of the parameter box.
    pub fn verify_integral(&self, grid: &ParamGrid, tol: f64) -> Result<IntegralReport, DatumError> {
        let mut max_residual: f64 = 0.0;
        for flat in 0..grid.total() {
            let t = grid.node(flat, &self.box_lo, &self.box_hi);
            max_residual = max_residual.max(self.theta_residual_at(&t)?);
        }
        Ok(IntegralReport {
            max_residual,
            pass: max_residual <= tol,
            nodes_checked: grid.total(),
        })
    }

    /// Tangent vectors `∂Φ/∂t_h` of the datum at `t`. For lifted momenta the
    /// `dp`-part is a central finite difference.
    pub fn tangents_at(&self, t: &[f64]) -> Result<Vec<TangentAtPoint>, DatumError> {
        let (jac, dz) = self.projections_at(t)?;
        let table = VarTable::params(self.params());
        let mut out = Vec::with_capacity(self.params());
        for h in 0..self.params() {
            let dp = match &self.p {
                PSource::Symbolic(ps) => {
                    let env = self.param_env(&table, t);
                    ps.iter()
                        .map(|e| eval(&diff(e, &format!("t{}", h + 1)), &env))
                        .collect::<Result<Vec<_>, _>>()?
                }
                PSource::Lifted { .. } => {
                    let hstep = 1e-6;
                    let mut tp = t.to_vec();
                    let mut tm = t.to_vec();
                    tp[h] += hstep;
                    tm[h] -= hstep;
                    let pp = self.point_at(&tp)?.p;
                    let pm = self.point_at(&tm)?.p;
                    pp.iter()
                        .zip(pm.iter())
                        .map(|(a, b)| (a - b) / (2.0 * hstep))
                        .collect()
                }
            };
            out.push(TangentAtPoint {
                dx: (0..self.n).map(|i| jac[(h, i)]).collect(),
                dz: dz[h],
                dp,
            });
        }
        Ok(out)
    }
}

/// Prolong an `(n−1)`-dimensional x-graph `X(t), Z(t)` to a Cauchy datum of
/// the first-order equation `f = 0`: the momenta are pinned by the `n−1`
/// linear contact conditions together with `f = 0`, solved by damped Newton
/// from `p_seed` at each sampled parameter value.
///
/// The x-projection must have full rank on the parameter box; the lifted
/// datum is verified against `θ|_N = 0` on a coarse grid before returning.
pub fn lift_cauchy_datum(
    x: Vec<Expr>,
    z: Expr,
    f: Expr,
    p_seed: Vec<f64>,
    box_lo: Vec<f64>,
    box_hi: Vec<f64>,
) -> Result<CauchyDatum, DatumError> {
    let n = x.len();
    assert_eq!(p_seed.len(), n);
    let datum = CauchyDatum::build(x, z, PSource::Lifted { f, p_seed }, box_lo, box_hi);
    // verification grid: 3 nodes per direction
    let grid = ParamGrid::uniform(datum.params(), 3);
    for flat in 0..grid.total() {
        let t = grid.node(flat, &datum.box_lo, &datum.box_hi);
        let residual = datum.theta_residual_at(&t)?;
        if residual > 1e-8 {
            return Err(DatumError::NotIntegral { t, residual });
        }
    }
    Ok(datum)
}
