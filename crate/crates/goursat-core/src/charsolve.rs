//! Numerical method of characteristics.
//!
//! A first-order equation `f = 0` is solved by transporting a
//! non-characteristic Cauchy datum along the Hamiltonian field `Y_f` with a
//! fixed-step RK4 integrator. The generalized Monge solver reduces a
//! Goursat-type second-order equation to that: it finds a functional relation
//! `ψ` among the restrictions of user-supplied first integrals to the datum,
//! forms the intermediate integral `f* = ψ(f_1, …, f_n)` vanishing on the
//! datum, and flows the datum along `Y_{f*}`.

use crate::contact::{hamiltonian_field, CauchyDatum, ChartPoint, DatumError, VectorFieldExpr};
use crate::expr::{Expr, MultiIndex, Tape, VarTable};
use crate::grassmann::JetPoint;
use crate::linalg;
use crate::mae::{
    frames, membership_in_frames, reconstruct_distributions, BField, Membership, ReconstructCfg,
};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("datum is not on the equation: |f| = {value:.3e} at t = {t:?}")]
    DatumNotOnEquation { t: Vec<f64>, value: f64 },
    #[error("characteristic datum: the Hamiltonian field is tangent to the datum at t = {t:?} (σ_min = {sigma_min:.3e})")]
    CharacteristicDatum { t: Vec<f64>, sigma_min: f64 },
    #[error("trajectory {node} left the finite chart at step {step}")]
    NonFiniteState { node: usize, step: usize },
    #[error(transparent)]
    Datum(#[from] DatumError),
    #[error(transparent)]
    Eval(#[from] crate::expr::EvalError),
}

#[derive(Debug, thiserror::Error)]
pub enum RelationError {
    #[error("no functional relation found: best residual {best:.3e} above tolerance {tol:.3e}")]
    NoRelationFound { best: f64, tol: f64 },
    #[error("relation search needs at least as many datum samples as basis columns ({rows} samples, {columns} columns)")]
    UnderSampled { rows: usize, columns: usize },
    #[error(transparent)]
    Datum(#[from] DatumError),
    #[error(transparent)]
    Eval(#[from] crate::expr::EvalError),
}

#[derive(Debug, thiserror::Error)]
pub enum MongeError {
    #[error("f_{index} is not a first integral of either distribution at the datum")]
    NotFirstIntegral { index: usize },
    #[error("first integrals straddle D and D⊥: {details}")]
    SideMismatch { details: String },
    #[error(transparent)]
    Relation(#[from] RelationError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Mae(#[from] crate::mae::MaeError),
    #[error(transparent)]
    Datum(#[from] DatumError),
    #[error(transparent)]
    Eval(#[from] crate::expr::EvalError),
}

/// Fixed-step RK4 flow configuration.
#[derive(Clone, Debug)]
pub struct FlowConfig {
    pub dt: f64,
    pub t_span: (f64, f64),
    /// Store every `keep_every`-th time slice (the final slice is always
    /// kept). 1 keeps everything.
    pub keep_every: usize,
}

impl FlowConfig {
    pub fn new(dt: f64, t_span: (f64, f64)) -> Self {
        assert!(dt > 0.0 && dt <= t_span.1 - t_span.0, "need 0 < dt <= span");
        FlowConfig {
            dt,
            t_span,
            keep_every: 1,
        }
    }

    pub fn keep_every(mut self, k: usize) -> Self {
        self.keep_every = k.max(1);
        self
    }

    fn steps(&self) -> usize {
        (((self.t_span.1 - self.t_span.0) / self.dt).round() as usize).max(1)
    }
}

/// A vector field compiled against the chart slot layout
/// `(x1..xn, z, p1..pn)`; the state vector of the integrator uses the same
/// layout.
pub struct CompiledField {
    tapes: Vec<Tape>,
}

impl CompiledField {
    pub fn compile(v: &VectorFieldExpr, table: &VarTable) -> Self {
        let n = v.n();
        let mut tapes = Vec::with_capacity(2 * n + 1);
        for i in 0..n {
            tapes.push(Tape::compile(&v.comp_x[i], table));
        }
        tapes.push(Tape::compile(&v.comp_z, table));
        for i in 0..n {
            tapes.push(Tape::compile(&v.comp_p[i], table));
        }
        CompiledField { tapes }
    }

    #[inline]
    fn derivative(&self, state: &[f64], out: &mut [f64], stack: &mut Vec<f64>) {
        for (k, tape) in self.tapes.iter().enumerate() {
            out[k] = tape.eval(state, stack);
        }
    }
}

fn state_of(m: &ChartPoint) -> Vec<f64> {
    let n = m.n();
    let mut s = vec![0.0; 2 * n + 1];
    s[..n].copy_from_slice(&m.x);
    s[n] = m.z;
    s[n + 1..].copy_from_slice(&m.p);
    s
}

fn point_of(state: &[f64], n: usize) -> ChartPoint {
    ChartPoint {
        x: state[..n].to_vec(),
        z: state[n],
        p: state[n + 1..].to_vec(),
    }
}

struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
    stack: Vec<f64>,
}

impl Rk4Scratch {
    fn new(dim: usize) -> Self {
        Rk4Scratch {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
            stack: Vec::with_capacity(32),
        }
    }
}

#[inline]
fn rk4_step(field: &CompiledField, state: &mut [f64], dt: f64, s: &mut Rk4Scratch) {
    let dim = state.len();
    field.derivative(state, &mut s.k1, &mut s.stack);
    for i in 0..dim {
        s.tmp[i] = state[i] + 0.5 * dt * s.k1[i];
    }
    field.derivative(&s.tmp, &mut s.k2, &mut s.stack);
    for i in 0..dim {
        s.tmp[i] = state[i] + 0.5 * dt * s.k2[i];
    }
    field.derivative(&s.tmp, &mut s.k3, &mut s.stack);
    for i in 0..dim {
        s.tmp[i] = state[i] + dt * s.k3[i];
    }
    field.derivative(&s.tmp, &mut s.k4, &mut s.stack);
    for i in 0..dim {
        state[i] += dt / 6.0 * (s.k1[i] + 2.0 * s.k2[i] + 2.0 * s.k3[i] + s.k4[i]);
    }
}

/// RK4 trajectory of a vector field from `m0`; returns the kept slices
/// `(t, point)` including the initial and final states.
pub fn flow(
    v: &VectorFieldExpr,
    m0: &ChartPoint,
    cfg: &FlowConfig,
) -> Result<Vec<(f64, ChartPoint)>, SolveError> {
    let n = m0.n();
    let table = VarTable::chart(n);
    let field = CompiledField::compile(v, &table);
    let steps = cfg.steps();
    let dt = (cfg.t_span.1 - cfg.t_span.0) / steps as f64;
    let mut scratch = Rk4Scratch::new(2 * n + 1);
    let mut state = state_of(m0);
    let mut out = Vec::new();
    out.push((cfg.t_span.0, m0.clone()));
    for step in 1..=steps {
        rk4_step(&field, &mut state, dt, &mut scratch);
        if !state.iter().all(|v| v.is_finite()) {
            return Err(SolveError::NonFiniteState { node: 0, step });
        }
        if step % cfg.keep_every == 0 || step == steps {
            out.push((cfg.t_span.0 + dt * step as f64, point_of(&state, n)));
        }
    }
    Ok(out)
}

/// Sampling grid over the datum's parameter box.
#[derive(Clone, Debug)]
pub struct GridSpec {
    pub counts: Vec<usize>,
}

impl GridSpec {
    pub fn uniform(dims: usize, count: usize) -> Self {
        GridSpec {
            counts: vec![count; dims],
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().product::<usize>().max(1)
    }

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

    /// Flat-index stride of grid direction `h`.
    fn stride(&self, h: usize) -> usize {
        self.counts[..h].iter().product()
    }
}

/// Provenance of a computed surface.
#[derive(Clone, Debug, Default)]
pub struct SurfaceProvenance {
    pub f_text: String,
    pub datum_note: String,
}

/// Residual summary of a surface.
#[derive(Clone, Debug, Default)]
pub struct SurfaceResiduals {
    /// max |f| over all kept nodes.
    pub f_max: f64,
    /// Contact residual along the flow direction at full step resolution
    /// (central differences at spacing `dt`).
    pub theta_flow: f64,
    /// Exact (symbolic) contact residual of the datum slice.
    pub theta_datum: f64,
    /// Contact residual across datum directions by central differences on
    /// the stored grid; floor is h²·(third derivatives), reported for
    /// completeness.
    pub theta_s_fd: f64,
}

/// Grid of chart points indexed by (kept flow time, datum parameter node).
#[derive(Clone, Debug)]
pub struct SolutionSurface {
    pub n: usize,
    pub t_values: Vec<f64>,
    pub grid: GridSpec,
    pub param_lo: Vec<f64>,
    pub param_hi: Vec<f64>,
    /// `points[time][flat_param]`.
    pub points: Vec<Vec<ChartPoint>>,
    pub residuals: SurfaceResiduals,
    pub provenance: SurfaceProvenance,
}

impl SolutionSurface {
    pub fn point(&self, it: usize, is: usize) -> &ChartPoint {
        &self.points[it][is]
    }

    pub fn params_at(&self, flat: usize) -> Vec<f64> {
        self.grid.node(flat, &self.param_lo, &self.param_hi)
    }

    /// Build a surface from a closed-form parametrization (used for residual
    /// analysis of analytic solutions).
    pub fn tabulate(
        n: usize,
        t_values: Vec<f64>,
        grid: GridSpec,
        param_lo: Vec<f64>,
        param_hi: Vec<f64>,
        mut at: impl FnMut(f64, &[f64]) -> ChartPoint,
    ) -> Self {
        let points = t_values
            .iter()
            .map(|&t| {
                (0..grid.total())
                    .map(|flat| at(t, &grid.node(flat, &param_lo, &param_hi)))
                    .collect()
            })
            .collect();
        SolutionSurface {
            n,
            t_values,
            grid,
            param_lo,
            param_hi,
            points,
            residuals: SurfaceResiduals::default(),
            provenance: SurfaceProvenance::default(),
        }
    }

    /// CSV with fixed column order `t, s1.., x1.., z, p1..`.
    pub fn to_csv(&self) -> String {
        let n = self.n;
        let dims = self.grid.counts.len();
        let mut out = String::new();
        out.push('t');
        for h in 1..=dims {
            out.push_str(&format!(",s{h}"));
        }
        for i in 1..=n {
            out.push_str(&format!(",x{i}"));
        }
        out.push_str(",z");
        for i in 1..=n {
            out.push_str(&format!(",p{i}"));
        }
        out.push('\n');
        for (it, &t) in self.t_values.iter().enumerate() {
            for flat in 0..self.grid.total() {
                let s = self.params_at(flat);
                let m = &self.points[it][flat];
                out.push_str(&format!("{t}"));
                for v in &s {
                    out.push_str(&format!(",{v}"));
                }
                for v in &m.x {
                    out.push_str(&format!(",{v}"));
                }
                out.push_str(&format!(",{}", m.z));
                for v in &m.p {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
        out
    }

    /// Max contact residual across stored datum directions (central
    /// differences on the stored grid).
    pub fn theta_fd_across_params(&self) -> f64 {
        let dims = self.grid.counts.len();
        let mut worst: f64 = 0.0;
        for points in &self.points {
            for h in 0..dims {
                let count = self.grid.counts[h];
                if count < 3 {
                    continue;
                }
                let stride = self.grid.stride(h);
                let span = self.param_hi[h] - self.param_lo[h];
                let dh = span / (count - 1) as f64;
                for flat in 0..self.grid.total() {
                    let idx = (flat / stride) % count;
                    if idx == 0 || idx == count - 1 {
                        continue;
                    }
                    let prev = &points[flat - stride];
                    let next = &points[flat + stride];
                    let cur = &points[flat];
                    let mut r = (next.z - prev.z) / (2.0 * dh);
                    for i in 0..self.n {
                        r -= cur.p[i] * (next.x[i] - prev.x[i]) / (2.0 * dh);
                    }
                    worst = worst.max(r.abs());
                }
            }
        }
        worst
    }
}

/// Solve the first-order Cauchy problem `f = 0`, `Σ ⊃ N` by the method of
/// characteristics: check `f|_N ≈ 0` and transversality of `Y_f` at every
/// grid node, then integrate every node along `Y_f`. Nodes integrate in
/// parallel; the result is assembled in grid order and is independent of the
/// thread count.
pub fn solve_first_order(
    f: &Expr,
    datum: &CauchyDatum,
    cfg: &FlowConfig,
    grid: &GridSpec,
) -> Result<SolutionSurface, SolveError> {
    let n = datum.n();
    let table = VarTable::chart(n);
    let f_tape = Tape::compile(f, &table);
    let field_expr = hamiltonian_field(f, n);
    let field = CompiledField::compile(&field_expr, &table);

    // initial slice + preconditions
    let total = grid.total();
    let mut initial = Vec::with_capacity(total);
    let mut theta_datum: f64 = 0.0;
    for flat in 0..total {
        let t = grid.node(flat, datum.box_lo(), datum.box_hi());
        let m = datum.point_at(&t)?;
        let fval = f_tape.eval_once(&state_of(&m));
        if fval.abs() > 1e-8 {
            return Err(SolveError::DatumNotOnEquation { t, value: fval });
        }
        theta_datum = theta_datum.max(datum.theta_residual_at(&t)?);
        // transversality: Y_f must not be tangent to N
        let tangents = datum.tangents_at(&t)?;
        let yf = {
            let mut out = vec![0.0; 2 * n + 1];
            let mut stack = Vec::new();
            field.derivative(&state_of(&m), &mut out, &mut stack);
            DVector::from_vec(out)
        };
        let mut rows: Vec<DVector<f64>> = tangents
            .iter()
            .map(|v| {
                let u = v.to_vector();
                let nn = u.norm();
                if nn > 0.0 {
                    u / nn
                } else {
                    u
                }
            })
            .collect();
        let ynorm = yf.norm();
        if ynorm <= f64::MIN_POSITIVE {
            return Err(SolveError::CharacteristicDatum { t, sigma_min: 0.0 });
        }
        rows.push(yf / ynorm);
        let mat = DMatrix::from_fn(rows.len(), 2 * n + 1, |r, c| rows[r][c]);
        let sigma_min = linalg::smallest_singular_value(&mat);
        if sigma_min <= 1e-8 {
            return Err(SolveError::CharacteristicDatum { t, sigma_min });
        }
        initial.push(m);
    }

    let steps = cfg.steps();
    let dt = (cfg.t_span.1 - cfg.t_span.0) / steps as f64;
    let keep = cfg.keep_every;
    let kept_count = steps / keep + 1 + usize::from(steps % keep != 0);

    struct NodeResult {
        kept: Vec<Vec<f64>>,
        theta_flow: f64,
        f_max: f64,
        failure: Option<usize>,
    }

    let integrate_node = |m0: &ChartPoint| -> NodeResult {
        let dim = 2 * n + 1;
        let mut scratch = Rk4Scratch::new(dim);
        let mut state = state_of(m0);
        let mut kept = Vec::with_capacity(kept_count);
        kept.push(state.clone());
        let mut prev = state.clone();
        let mut theta_flow: f64 = 0.0;
        let mut f_max: f64 = f_tape.eval_once(&state).abs();
        let mut failure = None;
        for step in 1..=steps {
            let before = state.clone();
            rk4_step(&field, &mut state, dt, &mut scratch);
            if !state.iter().all(|v| v.is_finite()) {
                failure = Some(step);
                break;
            }
            // central-difference contact residual along the flow at the
            // previous state
            if step >= 2 {
                let mut r = (state[n] - prev[n]) / (2.0 * dt);
                for i in 0..n {
                    r -= before[n + 1 + i] * (state[i] - prev[i]) / (2.0 * dt);
                }
                theta_flow = theta_flow.max(r.abs());
            }
            prev = before;
            if step % keep == 0 || step == steps {
                f_max = f_max.max(f_tape.eval_once(&state).abs());
                kept.push(state.clone());
            }
        }
        NodeResult {
            kept,
            theta_flow,
            f_max,
            failure,
        }
    };

    // integrate nodes in parallel chunks
    let workers = std::thread::available_parallelism()
        .map(|v| v.get())
        .unwrap_or(1)
        .min(8)
        .min(total.max(1));
    let mut results: Vec<Option<NodeResult>> = (0..total).map(|_| None).collect();
    if workers <= 1 || total < 4 {
        for (i, m0) in initial.iter().enumerate() {
            results[i] = Some(integrate_node(m0));
        }
    } else {
        let chunk = total.div_ceil(workers);
        let slots: Vec<(usize, NodeResult)> = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for w in 0..workers {
                let lo = w * chunk;
                let hi = ((w + 1) * chunk).min(total);
                if lo >= hi {
                    break;
                }
                let initial = &initial;
                let integrate_node = &integrate_node;
                handles.push(scope.spawn(move || {
                    (lo..hi)
                        .map(|i| (i, integrate_node(&initial[i])))
                        .collect::<Vec<_>>()
                }));
            }
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("integration worker panicked"))
                .collect()
        });
        for (i, r) in slots {
            results[i] = Some(r);
        }
    }

    let mut theta_flow: f64 = 0.0;
    let mut f_max: f64 = 0.0;
    let node_results: Vec<NodeResult> = results.into_iter().map(|r| r.unwrap()).collect();
    for (i, r) in node_results.iter().enumerate() {
        if let Some(step) = r.failure {
            return Err(SolveError::NonFiniteState { node: i, step });
        }
        theta_flow = theta_flow.max(r.theta_flow);
        f_max = f_max.max(r.f_max);
    }

    let slices = node_results[0].kept.len();
    let mut t_values = Vec::with_capacity(slices);
    for k in 0..slices {
        let step = (k * keep).min(steps);
        t_values.push(cfg.t_span.0 + dt * step as f64);
    }
    // the final slice corresponds to `steps` even when steps % keep != 0
    if let Some(last) = t_values.last_mut() {
        *last = cfg.t_span.1;
    }
    let points: Vec<Vec<ChartPoint>> = (0..slices)
        .map(|k| {
            node_results
                .iter()
                .map(|r| point_of(&r.kept[k], n))
                .collect()
        })
        .collect();

    let mut surface = SolutionSurface {
        n,
        t_values,
        grid: grid.clone(),
        param_lo: datum.box_lo().to_vec(),
        param_hi: datum.box_hi().to_vec(),
        points,
        residuals: SurfaceResiduals {
            f_max,
            theta_flow,
            theta_datum,
            theta_s_fd: 0.0,
        },
        provenance: SurfaceProvenance {
            f_text: f.to_string(),
            datum_note: String::new(),
        },
    };
    surface.residuals.theta_s_fd = surface.theta_fd_across_params();
    Ok(surface)
}

/// One basis function of the relation search: a monomial in the restricted
/// integrals `g_1..g_k`, optionally multiplied by `exp(g_j)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BasisTerm {
    pub powers: Vec<u32>,
    pub exp_of: Option<usize>,
}

impl BasisTerm {
    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        for (i, &p) in self.powers.iter().enumerate() {
            match p {
                0 => {}
                1 => parts.push(format!("g{}", i + 1)),
                _ => parts.push(format!("g{}^{}", i + 1, p)),
            }
        }
        if let Some(j) = self.exp_of {
            parts.push(format!("exp(g{})", j + 1));
        }
        if parts.is_empty() {
            "1".to_string()
        } else {
            parts.join("*")
        }
    }

    fn value(&self, g: &[f64]) -> f64 {
        let mut v = 1.0;
        for (i, &p) in self.powers.iter().enumerate() {
            for _ in 0..p {
                v *= g[i];
            }
        }
        if let Some(j) = self.exp_of {
            v *= g[j].exp();
        }
        v
    }

    /// Substitute the actual integrals for the `g_i`.
    fn to_expr(&self, f_list: &[Expr]) -> Expr {
        let mut e = Expr::one();
        for (i, &p) in self.powers.iter().enumerate() {
            if p > 0 {
                e = Expr::mul(e, Expr::pow(f_list[i].clone(), p as f64));
            }
        }
        if let Some(j) = self.exp_of {
            e = Expr::mul(e, Expr::exp(f_list[j].clone()));
        }
        e
    }

}

/// Basis of all monomials in `k` variables of total degree ≤ `d`, plus —
/// when `exp_features` is set — the same monomials of degree ≤ `d − 1`
/// multiplied by each single `exp(g_j)`.
pub fn relation_basis(k: usize, degree: u32, exp_features: bool) -> Vec<BasisTerm> {
    let mut monomials: Vec<Vec<u32>> = vec![vec![0; k]];
    for _ in 0..degree {
        let mut extended = Vec::new();
        for m in &monomials {
            // extend by one factor at or after the last nonzero slot to
            // enumerate each monomial once
            let start = m
                .iter()
                .rposition(|&p| p > 0)
                .unwrap_or(0);
            for j in start..k {
                let mut m2 = m.clone();
                m2[j] += 1;
                extended.push(m2);
            }
        }
        monomials.extend(extended.clone());
        monomials.dedup();
        monomials.sort();
        monomials.dedup();
    }
    monomials.sort();
    monomials.dedup();
    let mut out: Vec<BasisTerm> = monomials
        .iter()
        .map(|m| BasisTerm {
            powers: m.clone(),
            exp_of: None,
        })
        .collect();
    if exp_features {
        for j in 0..k {
            for m in &monomials {
                if m.iter().sum::<u32>() + 1 <= degree {
                    out.push(BasisTerm {
                        powers: m.clone(),
                        exp_of: Some(j),
                    });
                }
            }
        }
    }
    out
}

/// A functional relation `ψ · basis(g) = 0` among restricted first integrals.
#[derive(Clone, Debug)]
pub struct RelationResult {
    pub basis: Vec<BasisTerm>,
    /// Coefficients, normalized to `Σ|ψ| = 1`.
    pub psi: Vec<f64>,
    /// `max_s |ψ · basis(g(s))|` over the datum samples.
    pub residual: f64,
}

impl RelationResult {
    /// The intermediate integral `f* = ψ(f_1, …, f_k)` as an expression.
    pub fn to_expr(&self, f_list: &[Expr]) -> Expr {
        let mut acc = Expr::zero();
        for (c, term) in self.psi.iter().zip(&self.basis) {
            if *c != 0.0 {
                acc = Expr::add(acc, Expr::mul(Expr::constant(*c), term.to_expr(f_list)));
            }
        }
        acc
    }

    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        for (c, term) in self.psi.iter().zip(&self.basis) {
            if *c != 0.0 {
                parts.push(format!("{:+.6e}*{}", c, term.describe()));
            }
        }
        parts.join(" ")
    }
}

/// Search for a nontrivial functional relation among the restrictions
/// `g_i(s) = f_i(N(s))` over the datum grid: smallest right singular vector
/// of the (column-scaled) sample/basis matrix, sparsified when that does not
/// hurt the residual.
pub fn find_relation(
    f_list: &[Expr],
    datum: &CauchyDatum,
    degree: u32,
    grid: &GridSpec,
    exp_features: bool,
    tol: f64,
) -> Result<RelationResult, RelationError> {
    assert!(f_list.len() >= 2, "need at least two first integrals");
    let n = datum.n();
    let table = VarTable::chart(n);
    let tapes: Vec<Tape> = f_list.iter().map(|f| Tape::compile(f, &table)).collect();
    let basis = relation_basis(f_list.len(), degree, exp_features);

    let total = grid.total();
    // cap the number of rows, stepping deterministically through the grid
    let max_rows = 4000usize;
    let stride = total.div_ceil(max_rows).max(1);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for flat in (0..total).step_by(stride) {
        let t = grid.node(flat, datum.box_lo(), datum.box_hi());
        let m = datum.point_at(&t)?;
        let state = state_of(&m);
        let g: Vec<f64> = tapes.iter().map(|tp| tp.eval_once(&state)).collect();
        rows.push(basis.iter().map(|b| b.value(&g)).collect());
    }
    if rows.len() < basis.len() {
        return Err(RelationError::UnderSampled {
            rows: rows.len(),
            columns: basis.len(),
        });
    }
    let a = DMatrix::from_fn(rows.len(), basis.len(), |r, c| rows[r][c]);

    // column scaling for conditioning
    let mut scales = vec![0.0f64; basis.len()];
    for c in 0..basis.len() {
        scales[c] = a.column(c).amax().max(1e-300);
    }
    let a_scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[(r, c)] / scales[c]);
    let (psi_scaled, _) = linalg::smallest_right_singular(&a_scaled);
    let mut psi: Vec<f64> = (0..basis.len())
        .map(|c| psi_scaled[c] / scales[c])
        .collect();

    let normalize = |psi: &mut Vec<f64>| {
        let l1: f64 = psi.iter().map(|v| v.abs()).sum();
        if l1 > 0.0 {
            for v in psi.iter_mut() {
                *v /= l1;
            }
        }
    };
    let residual_of = |psi: &[f64]| -> f64 {
        rows.iter()
            .map(|row| {
                row.iter()
                    .zip(psi)
                    .map(|(b, c)| b * c)
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max)
    };
    normalize(&mut psi);
    let dense_residual = residual_of(&psi);

    // drop numerically irrelevant coefficients when that keeps the fit
    let peak = psi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut sparse = psi.clone();
    for v in sparse.iter_mut() {
        if v.abs() < 1e-9 * peak {
            *v = 0.0;
        }
    }
    normalize(&mut sparse);
    let sparse_residual = residual_of(&sparse);
    let (psi, residual) = if sparse_residual <= dense_residual.max(tol) {
        (sparse, sparse_residual)
    } else {
        (psi, dense_residual)
    };

    if residual > tol {
        return Err(RelationError::NoRelationFound {
            best: residual,
            tol,
        });
    }
    Ok(RelationResult {
        basis,
        psi,
        residual,
    })
}

/// How the second-order equation is supplied to the Monge solver.
#[derive(Clone, Debug)]
pub enum EquationInput {
    B(BField),
    F(Expr),
}

impl EquationInput {
    /// Residual expression in second-order jet variables.
    pub fn residual_expr(&self) -> Expr {
        match self {
            EquationInput::B(b) => b.residual_expr(),
            EquationInput::F(f) => f.clone(),
        }
    }
}

/// Diagnostics attached to a Monge solve.
#[derive(Clone, Debug)]
pub struct MongeDiagnostics {
    pub relation: RelationResult,
    pub f_star_text: String,
    pub f_star_on_datum: f64,
    pub memberships: Vec<Membership>,
}

/// Relation-search options for [`monge_solve`].
#[derive(Clone, Debug)]
pub struct MongeCfg {
    pub degree: u32,
    pub exp_features: bool,
    pub relation_tol: f64,
    /// Fiber-sampling settings for side classification when the equation
    /// comes as a black-box expression.
    pub reconstruct: ReconstructCfg,
    /// Membership tolerance for the side test.
    pub membership_tol: f64,
    /// Datum nodes used for the side test.
    pub side_check_nodes: usize,
}

impl Default for MongeCfg {
    fn default() -> Self {
        MongeCfg {
            degree: 2,
            exp_features: false,
            relation_tol: 1e-8,
            reconstruct: ReconstructCfg {
                samples: 60,
                ..Default::default()
            },
            membership_tol: 1e-6,
            side_check_nodes: 3,
        }
    }
}

/// Generalized Monge method: verify the supplied first integrals sit on one
/// side (`D` or `D⊥`), find a functional relation `ψ` among their
/// restrictions to the datum, and flow the datum along the Hamiltonian field
/// of `f* = ψ(f_1, …, f_n)`.
pub fn monge_solve(
    equation: &EquationInput,
    f_list: &[Expr],
    datum: &CauchyDatum,
    flow_cfg: &FlowConfig,
    grid: &GridSpec,
    cfg: &MongeCfg,
) -> Result<(SolutionSurface, MongeDiagnostics), MongeError> {
    let n = datum.n();

    // side classification at a few datum nodes
    let mut memberships: Vec<Membership> = Vec::new();
    let check_grid = GridSpec::uniform(datum.params(), cfg.side_check_nodes.max(1));
    let mut checks: Vec<(crate::mae::DistFrame, crate::mae::DistFrame)> = Vec::new();
    for flat in 0..check_grid.total() {
        let t = check_grid.node(flat, datum.box_lo(), datum.box_hi());
        let m = datum.point_at(&t)?;
        let pair = match equation {
            EquationInput::B(b) => frames(b, &m)?,
            EquationInput::F(f) => {
                let rep = reconstruct_distributions(f, &m, &cfg.reconstruct)?;
                (rep.d, rep.dperp)
            }
        };
        checks.push(pair);
    }
    for (index, f) in f_list.iter().enumerate() {
        let mut side: Option<bool> = None; // true = InD, false = InDperp
        for (d, dperp) in &checks {
            let yf = hamiltonian_field(f, n).eval_at(&d.point)?;
            let memb = membership_in_frames(&yf, d, dperp, cfg.membership_tol)?;
            match memb {
                Membership::Neither => return Err(MongeError::NotFirstIntegral { index }),
                Membership::InD { both: true } => {}
                Membership::InD { both: false } => match side {
                    None => side = Some(true),
                    Some(true) => {}
                    Some(false) => {
                        return Err(MongeError::SideMismatch {
                            details: format!("f_{index} switches sides across datum nodes"),
                        })
                    }
                },
                Membership::InDperp => match side {
                    None => side = Some(false),
                    Some(false) => {}
                    Some(true) => {
                        return Err(MongeError::SideMismatch {
                            details: format!("f_{index} switches sides across datum nodes"),
                        })
                    }
                },
            }
        }
        memberships.push(match side {
            Some(true) | None => Membership::InD { both: side.is_none() },
            Some(false) => Membership::InDperp,
        });
    }
    // all integrals must agree on a side (the Lagrangian "both" case is
    // compatible with either)
    let mut committed: Option<bool> = None;
    for (index, m) in memberships.iter().enumerate() {
        let this = match m {
            Membership::InD { both: true } => None,
            Membership::InD { both: false } => Some(true),
            Membership::InDperp => Some(false),
            Membership::Neither => return Err(MongeError::NotFirstIntegral { index }),
        };
        match (committed, this) {
            (None, s) => committed = s,
            (Some(_), None) => {}
            (Some(a), Some(b)) if a == b => {}
            (Some(_), Some(_)) => {
                return Err(MongeError::SideMismatch {
                    details: "supplied integrals split between D and D⊥".to_string(),
                })
            }
        }
    }

    let relation = find_relation(
        f_list,
        datum,
        cfg.degree,
        grid,
        cfg.exp_features,
        cfg.relation_tol,
    )?;
    let f_star = relation.to_expr(f_list);

    // |f*| on the datum (should match the relation residual)
    let table = VarTable::chart(n);
    let tape = Tape::compile(&f_star, &table);
    let mut worst: f64 = 0.0;
    for flat in 0..grid.total() {
        let t = grid.node(flat, datum.box_lo(), datum.box_hi());
        let m = datum.point_at(&t)?;
        worst = worst.max(tape.eval_once(&state_of(&m)).abs());
    }

    let surface = solve_first_order(&f_star, datum, flow_cfg, grid)?;
    let diagnostics = MongeDiagnostics {
        f_star_text: f_star.to_string(),
        relation,
        f_star_on_datum: worst,
        memberships,
    };
    Ok((surface, diagnostics))
}

/// Report of [`mae_residual_on_surface`].
#[derive(Clone, Debug)]
pub struct SurfaceResidualReport {
    pub max_residual: f64,
    pub max_condition: f64,
    pub nodes_checked: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum SurfaceError {
    #[error("surface is not graphical over x near node {node} (condition {condition:.3e})")]
    NonGraphicalPatch { node: usize, condition: f64 },
    #[error("surface grid too small for interior stencils")]
    GridTooSmall,
}

/// Estimate the second-order jet of the surface at interior grid nodes by a
/// local quadratic least-squares fit of the map `x ↦ p` over the 3^n stencil
/// (the linear part, symmetrized, is the Hessian estimate) and evaluate the
/// equation residual `F`.
pub fn mae_residual_on_surface(
    surface: &SolutionSurface,
    f: &Expr,
    max_nodes: usize,
) -> Result<SurfaceResidualReport, SurfaceError> {
    let n = surface.n;
    let dims = surface.grid.counts.len() + 1; // t plus datum directions
    assert_eq!(dims, n, "surface must be n-dimensional over x");
    let jt = VarTable::new(n, 2);
    let f_tape = Tape::compile(f, &jt);

    let t_count = surface.t_values.len();
    let s_counts = &surface.grid.counts;
    if t_count < 3 || s_counts.iter().any(|&c| c < 3) {
        return Err(SurfaceError::GridTooSmall);
    }

    // interior multi-indices over (t, s...)
    let mut interior: Vec<(usize, usize)> = Vec::new(); // (it, flat_s)
    for it in 1..t_count - 1 {
        'node: for flat in 0..surface.grid.total() {
            let mut rem = flat;
            for h in 0..s_counts.len() {
                let idx = rem % s_counts[h];
                rem /= s_counts[h];
                if idx == 0 || idx == s_counts[h] - 1 {
                    continue 'node;
                }
            }
            interior.push((it, flat));
        }
    }
    if interior.is_empty() {
        return Err(SurfaceError::GridTooSmall);
    }
    let stride = interior.len().div_ceil(max_nodes.max(1)).max(1);

    // offsets of the 3^n box in (t, s...) directions
    let mut offsets: Vec<Vec<isize>> = vec![vec![]];
    for _ in 0..dims {
        let mut next = Vec::new();
        for o in &offsets {
            for d in [-1isize, 0, 1] {
                let mut o2 = o.clone();
                o2.push(d);
                next.push(o2);
            }
        }
        offsets = next;
    }

    let n_quad = 1 + n + n * (n + 1) / 2;
    let mut worst: f64 = 0.0;
    let mut worst_cond: f64 = 0.0;
    let mut checked = 0usize;
    let mut stack = Vec::new();
    for &(it, flat) in interior.iter().step_by(stride) {
        let center = &surface.points[it][flat];
        // gather stencil
        let mut rows_a: Vec<Vec<f64>> = Vec::with_capacity(offsets.len());
        let mut rows_p: Vec<Vec<f64>> = Vec::with_capacity(offsets.len());
        for o in &offsets {
            let it2 = (it as isize + o[0]) as usize;
            let mut flat2 = flat as isize;
            for h in 0..s_counts.len() {
                flat2 += o[h + 1] * surface.grid.stride(h) as isize;
            }
            let p2 = &surface.points[it2][flat2 as usize];
            let dx: Vec<f64> = (0..n).map(|i| p2.x[i] - center.x[i]).collect();
            // quadratic model row: [1, dx_i, dx_i dx_j (i<=j)]
            let mut row = Vec::with_capacity(n_quad);
            row.push(1.0);
            row.extend_from_slice(&dx);
            for i in 0..n {
                for j in i..n {
                    row.push(dx[i] * dx[j]);
                }
            }
            rows_a.push(row);
            rows_p.push((0..n).map(|i| p2.p[i] - center.p[i]).collect());
        }
        let a = DMatrix::from_fn(rows_a.len(), n_quad, |r, c| rows_a[r][c]);
        let cond = linalg::condition_number(&a);
        if !cond.is_finite() || cond > 1e10 {
            return Err(SurfaceError::NonGraphicalPatch {
                node: it * surface.grid.total() + flat,
                condition: cond,
            });
        }
        worst_cond = worst_cond.max(cond);
        let svd = a.clone().svd(true, true);
        let mut jac = DMatrix::zeros(n, n);
        for pcomp in 0..n {
            let b = DVector::from_fn(rows_p.len(), |r, _| rows_p[r][pcomp]);
            let sol = svd
                .solve(&b, 1e-12 * svd.singular_values.max())
                .expect("stencil least squares");
            for i in 0..n {
                jac[(pcomp, i)] = sol[1 + i];
            }
        }
        let hess = (&jac + jac.transpose()) * 0.5;
        // evaluate F at the estimated jet
        let jp = JetPoint::new(center.clone(), hess);
        let mut slots = vec![0.0; jt.len()];
        for i in 0..n {
            slots[jt.slot(&format!("x{}", i + 1)).unwrap()] = center.x[i];
            slots[jt.slot(&format!("p{}", i + 1)).unwrap()] = center.p[i];
        }
        slots[jt.slot("z").unwrap()] = center.z;
        for i in 0..n {
            for j in i..n {
                let name = MultiIndex::new(vec![(i + 1) as u8, (j + 1) as u8]).var_name();
                slots[jt.slot(&name).unwrap()] = jp.p2()[(i, j)];
            }
        }
        worst = worst.max(f_tape.eval(&slots, &mut stack).abs());
        checked += 1;
    }
    Ok(SurfaceResidualReport {
        max_residual: worst,
        max_condition: worst_cond,
        nodes_checked: checked,
    })
}

/// Residual of an expression on every kept node of a surface (used for
/// first-order equations and closed-form comparisons).
pub fn expr_residual_on_surface(surface: &SolutionSurface, f: &Expr) -> Result<f64, SolveError> {
    let table = VarTable::chart(surface.n);
    let tape = Tape::compile(f, &table);
    let mut worst: f64 = 0.0;
    for slice in &surface.points {
        for m in slice {
            worst = worst.max(tape.eval_once(&state_of(m)).abs());
        }
    }
    Ok(worst)
}
