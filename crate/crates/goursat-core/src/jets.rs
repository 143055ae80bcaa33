//! Truncated formal power-series solutions of non-characteristic Cauchy
//! problems.
//!
//! In the normalized chart the datum reads `x^n = z = 0`, `p_h = 0` for
//! `h < n`, `p_n = Φ_n(x̃)`. Coefficients with at most one index `n` come
//! straight from `Φ_n`; every other coefficient `p_{(J, n^h)}` (h ≥ 2) is
//! pinned by one equation `D_{(J, n^{h−2})} F = 0`, which is linear in its
//! top coefficient for total order ≥ 3 (dividing by `F_{p_nn} ≠ 0`) and
//! solved by Newton for the seed coefficient `p_nn`. The obtained table
//! satisfies `F = 0` and all its total derivatives up to order `K − 2`.

use crate::contact::ChartPoint;
use crate::expr::{
    diff, eval, total_derivative, Env, Expr, JetOrderOverflow, MultiIndex, VarKind, VarTable,
};
use crate::grassmann::{JetPoint, MetricEvaluator};
use nalgebra::DMatrix;
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum JetsError {
    #[error("characteristic datum: |∂F/∂p_nn| = {coefficient:.3e} at the seed point")]
    CharacteristicDatum { coefficient: f64 },
    #[error("Newton on the seed coefficient p_nn did not converge (residual {residual:.3e})")]
    NewtonDivergence { residual: f64 },
    #[error("datum function must depend on x1..x{max} only, found `{var}`")]
    BadDatumVariable { var: String, max: usize },
    #[error(transparent)]
    Overflow(#[from] JetOrderOverflow),
    #[error(transparent)]
    Eval(#[from] crate::expr::EvalError),
    #[error(transparent)]
    Grassmann(#[from] crate::grassmann::GrassmannError),
}

/// Taylor coefficients `p_I` (1 ≤ |I| ≤ K) of a formal solution at a base
/// point, keys canonical and complete.
#[derive(Clone, Debug)]
pub struct JetTable {
    n: usize,
    order: usize,
    base: ChartPoint,
    coeffs: BTreeMap<MultiIndex, f64>,
}

impl JetTable {
    pub fn new(base: ChartPoint, order: usize, coeffs: BTreeMap<MultiIndex, f64>) -> Self {
        let n = base.n();
        for k in 1..=order {
            for mi in MultiIndex::all_of_order(n, k) {
                assert!(coeffs.contains_key(&mi), "missing coefficient {mi}");
            }
        }
        JetTable {
            n,
            order,
            base,
            coeffs,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn base(&self) -> &ChartPoint {
        &self.base
    }

    pub fn coefficient(&self, index: &MultiIndex) -> Option<f64> {
        self.coeffs.get(index).copied()
    }

    pub fn coefficients(&self) -> &BTreeMap<MultiIndex, f64> {
        &self.coeffs
    }

    /// The second-order restriction of the table as a jet point.
    pub fn jet_point(&self) -> JetPoint {
        let n = self.n;
        let p2 = DMatrix::from_fn(n, n, |i, j| {
            self.coefficient(&MultiIndex::new(vec![(i + 1) as u8, (j + 1) as u8]))
                .unwrap_or(0.0)
        });
        JetPoint::new(self.base.clone(), p2)
    }

    /// Bind every known slot of an environment over `VarTable::new(n, cap)`
    /// with `cap ≥ order`.
    pub fn bind(&self, env: &mut Env<'_>) {
        self.base.bind(env);
        for (mi, &v) in &self.coeffs {
            env.set(&mi.var_name(), v);
        }
    }

    /// JSON-ready map `index string → value` (plus `z`).
    pub fn index_map(&self) -> BTreeMap<String, f64> {
        self.coeffs
            .iter()
            .map(|(mi, &v)| (mi.to_string(), v))
            .collect()
    }

    /// Max |D_I F| over all 0 ≤ |I| ≤ order − 2: the defining property of a
    /// formal solution, checkable against any equation.
    pub fn prolongation_residual(&self, f: &Expr) -> Result<f64, JetsError> {
        let table = VarTable::new(self.n, self.order.max(2));
        let mut env = Env::new(&table);
        self.bind(&mut env);
        let mut worst: f64 = 0.0;
        let mut frontier = vec![(MultiIndex::empty(), f.clone())];
        let max_order = self.order.saturating_sub(2);
        let mut depth = 0;
        loop {
            for (_, e) in &frontier {
                worst = worst.max(eval(e, &env)?.abs());
            }
            if depth == max_order {
                break;
            }
            depth += 1;
            let mut next = Vec::new();
            for (mi, e) in &frontier {
                let start = mi.indices().last().copied().unwrap_or(1);
                for i in start..=(self.n as u8) {
                    let de = total_derivative(e, i as usize, &table)?;
                    next.push((mi.extended(i), de));
                }
            }
            frontier = next;
        }
        Ok(worst)
    }
}

/// Non-characteristicity of the `x^n = 0` datum direction at a jet point:
/// `|∂F/∂p_nn| > tol`.
pub fn is_noncharacteristic(f: &Expr, m1: &JetPoint, tol: f64) -> Result<bool, JetsError> {
    let n = m1.n();
    let table = VarTable::new(n, 2);
    let name = MultiIndex::new(vec![n as u8, n as u8]).var_name();
    let d = diff(f, &name);
    let env = m1.env(&table);
    Ok(eval(&d, &env)?.abs() > tol)
}

/// Formal integrability probe: the conformal metric must not vanish at any
/// of the supplied fiber samples (relative to the largest metric seen).
pub fn formal_integrability_check(f: &Expr, samples: &[JetPoint]) -> Result<bool, JetsError> {
    if samples.is_empty() {
        return Ok(true);
    }
    let ev = MetricEvaluator::new(f, samples[0].n())?;
    let norms: Vec<f64> = samples
        .iter()
        .map(|m1| ev.metric_at(m1).norm())
        .collect();
    let gmax = norms.iter().cloned().fold(0.0f64, f64::max);
    if gmax == 0.0 {
        return Ok(false);
    }
    Ok(norms.iter().all(|&g| g > 1e-12 * gmax))
}

/// One row of the prolonged-fiber linear system: the equation `D_I F = 0`
/// written as `Σ_J coeff_J · p_J = rhs` over the order-(k+1) unknowns.
#[derive(Clone, Debug)]
pub struct FiberRow {
    pub index: MultiIndex,
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

/// The linear system cutting the next prolonged fiber over a complete
/// order-k table: rows indexed by `|I| = k − 1`, unknowns `p_J` with
/// `|J| = k + 1`.
#[derive(Clone, Debug)]
pub struct FiberSystem {
    pub table_order: usize,
    pub unknowns: Vec<MultiIndex>,
    pub rows: Vec<FiberRow>,
}

impl FiberSystem {
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), self.unknowns.len(), |r, c| {
            self.rows[r].coeffs[c]
        })
    }

    pub fn rank(&self, tol: f64) -> usize {
        crate::linalg::rank_with_tol(&self.matrix(), tol)
    }

    /// Dimension of the affine solution fiber: unknowns minus pivots.
    pub fn free_parameters(&self, tol: f64) -> usize {
        self.unknowns.len() - self.rank(tol)
    }
}

/// Build the prolonged-fiber system of `F` over a complete table of order
/// `k ≥ 2`: each row is the total derivative `D_I F` (|I| = k−1), linear in
/// the order-(k+1) coordinates, with all known coefficients substituted.
pub fn prolonged_fiber_system(f: &Expr, jt: &JetTable) -> Result<FiberSystem, JetsError> {
    let n = jt.n();
    let k = jt.order();
    assert!(k >= 2, "table must be complete to order 2 at least");
    let table = VarTable::new(n, k + 1);
    let mut env = Env::new(&table);
    jt.bind(&mut env);
    // unknown slots read as zero
    let unknowns = MultiIndex::all_of_order(n, k + 1);
    for mi in &unknowns {
        env.set(&mi.var_name(), 0.0);
    }

    let mut memo: BTreeMap<MultiIndex, Expr> = BTreeMap::new();
    memo.insert(MultiIndex::empty(), f.clone());
    let mut rows = Vec::new();
    for index in MultiIndex::all_of_order(n, k - 1) {
        let e = derive_memo(&mut memo, f, &index, &table)?;
        let mut coeffs = Vec::with_capacity(unknowns.len());
        for mi in &unknowns {
            let c = diff(&e, &mi.var_name());
            coeffs.push(eval(&c, &env)?);
        }
        let rhs = -eval(&e, &env)?;
        rows.push(FiberRow { index, coeffs, rhs });
    }
    Ok(FiberSystem {
        table_order: k,
        unknowns,
        rows,
    })
}

fn derive_memo(
    memo: &mut BTreeMap<MultiIndex, Expr>,
    f: &Expr,
    index: &MultiIndex,
    table: &VarTable,
) -> Result<Expr, JetOrderOverflow> {
    if let Some(e) = memo.get(index) {
        return Ok(e.clone());
    }
    let digits = index.indices();
    let last = *digits.last().expect("nonempty index");
    let parent = MultiIndex::new(digits[..digits.len() - 1].to_vec());
    let pe = derive_memo(memo, f, &parent, table)?;
    let e = total_derivative(&pe, last as usize, table)?;
    memo.insert(index.clone(), e.clone());
    Ok(e)
}

/// Cauchy data in the normalized chart: `x^n = z = 0`, `p_h = 0` (h < n),
/// `p_n = Φ_n(x1..x_{n−1})`.
#[derive(Clone, Debug)]
pub struct NormalizedCauchyData {
    pub phi_n: Expr,
}

/// Newton settings for the order-2 seed coefficient `p_nn`.
#[derive(Clone, Debug)]
pub struct NewtonCfg {
    pub seed: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonCfg {
    fn default() -> Self {
        NewtonCfg {
            seed: 0.0,
            tol: 1e-12,
            max_iter: 60,
        }
    }
}

/// Solve the Cauchy problem formally to order `k_max` at the origin of the
/// normalized chart.
pub fn formal_solve(
    f: &Expr,
    data: &NormalizedCauchyData,
    n: usize,
    k_max: usize,
    newton: &NewtonCfg,
) -> Result<JetTable, JetsError> {
    assert!(k_max >= 2, "need at least the second-order jet");
    let table = VarTable::new(n, k_max.max(2));
    // Φ_n may use x1..x_{n-1} only
    let phi_table = VarTable::chart(n);
    for v in data.phi_n.variables() {
        match phi_table.kind(&v) {
            Some(VarKind::X(i)) if *i < n => {}
            _ => {
                return Err(JetsError::BadDatumVariable {
                    var: v,
                    max: n - 1,
                })
            }
        }
    }

    // partial derivatives of Φ_n at the origin, memoized by x̃ multi-index
    let mut phi_partials: BTreeMap<MultiIndex, Expr> = BTreeMap::new();
    phi_partials.insert(MultiIndex::empty(), data.phi_n.clone());
    let mut phi_env = Env::new(&phi_table);
    for i in 1..=n {
        phi_env.set(&format!("x{i}"), 0.0);
    }
    phi_env.set("z", 0.0);
    let mut phi_at = |j: &MultiIndex| -> Result<f64, JetsError> {
        fn get(
            memo: &mut BTreeMap<MultiIndex, Expr>,
            root: &Expr,
            j: &MultiIndex,
        ) -> Expr {
            if let Some(e) = memo.get(j) {
                return e.clone();
            }
            let digits = j.indices();
            let last = *digits.last().expect("nonempty");
            let parent = MultiIndex::new(digits[..digits.len() - 1].to_vec());
            let pe = get(memo, root, &parent);
            let e = diff(&pe, &format!("x{last}"));
            memo.insert(j.clone(), e.clone());
            e
        }
        let e = get(&mut phi_partials, &data.phi_n, j);
        Ok(eval(&e, &phi_env)?)
    };

    // base point and datum-determined coefficients
    let phi0 = phi_at(&MultiIndex::empty())?;
    let mut p = vec![0.0; n];
    p[n - 1] = phi0;
    let base = ChartPoint {
        x: vec![0.0; n],
        z: 0.0,
        p,
    };
    let mut coeffs: BTreeMap<MultiIndex, f64> = BTreeMap::new();
    for k in 1..=k_max {
        for mi in MultiIndex::all_of_order(n, k) {
            let h = mi.count(n as u8);
            let value = match h {
                0 => 0.0,
                1 => {
                    let j = MultiIndex::new(
                        mi.indices()
                            .iter()
                            .copied()
                            .filter(|&d| d != n as u8)
                            .collect(),
                    );
                    phi_at(&j)?
                }
                _ => f64::NAN, // pinned by the equation below
            };
            coeffs.insert(mi, value);
        }
    }

    // environment carrying the growing table
    let mut env = Env::new(&table);
    base.bind(&mut env);
    for (mi, &v) in &coeffs {
        env.set(&mi.var_name(), if v.is_nan() { 0.0 } else { v });
    }

    let mut memo: BTreeMap<MultiIndex, Expr> = BTreeMap::new();
    memo.insert(MultiIndex::empty(), f.clone());
    let fpnn = diff(f, &MultiIndex::new(vec![n as u8, n as u8]).var_name());

    for order in 2..=k_max {
        for h in 2..=order {
            for j in MultiIndex::all_of_order(n - 1, order - h) {
                // target p_{(J, n^h)}, equation D_{(J, n^{h-2})} F = 0
                let mut target_digits = j.indices().to_vec();
                let mut eq_digits = j.indices().to_vec();
                for _ in 0..h {
                    target_digits.push(n as u8);
                }
                for _ in 0..h - 2 {
                    eq_digits.push(n as u8);
                }
                let target = MultiIndex::new(target_digits);
                let eq_index = MultiIndex::new(eq_digits);
                let e = derive_memo(&mut memo, f, &eq_index, &table)?;
                let value = if order == 2 {
                    // F itself may be nonlinear in p_nn: damped Newton
                    let slot = table.slot(&target.var_name()).unwrap();
                    let mut v = newton.seed;
                    let mut converged = false;
                    let mut residual = f64::INFINITY;
                    for _ in 0..newton.max_iter {
                        env.set_slot(slot, v);
                        residual = eval(&e, &env)?;
                        if residual.abs() <= newton.tol {
                            converged = true;
                            break;
                        }
                        let dv = eval(&fpnn, &env)?;
                        if dv.abs() <= 1e-14 {
                            break;
                        }
                        let mut step = -residual / dv;
                        // damp on residual increase
                        let mut lambda = 1.0;
                        loop {
                            env.set_slot(slot, v + lambda * step);
                            let r2 = eval(&e, &env)?;
                            if r2.abs() < residual.abs() || lambda < 1e-6 {
                                step *= lambda;
                                break;
                            }
                            lambda *= 0.5;
                        }
                        v += step;
                    }
                    env.set_slot(slot, v);
                    if !converged {
                        return Err(JetsError::NewtonDivergence {
                            residual: residual.abs(),
                        });
                    }
                    // non-characteristicity at the solved seed point
                    let c = eval(&fpnn, &env)?;
                    if c.abs() <= 1e-10 {
                        return Err(JetsError::CharacteristicDatum { coefficient: c });
                    }
                    v
                } else {
                    // linear in the target: coefficient and affine part
                    let slot = table.slot(&target.var_name()).unwrap();
                    env.set_slot(slot, 0.0);
                    let a = eval(&diff(&e, &target.var_name()), &env)?;
                    if a.abs() <= 1e-10 {
                        return Err(JetsError::CharacteristicDatum { coefficient: a });
                    }
                    let r = eval(&e, &env)?;
                    -r / a
                };
                env.set(&target.var_name(), value);
                coeffs.insert(target, value);
            }
        }
    }

    // seed coefficient lives in base-adjacent coeffs too; rebuild base z/p
    let mut base = base;
    base.p[n - 1] = phi0;
    Ok(JetTable::new(base, k_max, coeffs))
}
