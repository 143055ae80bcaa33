//! The four commands. Each consumes a validated [`ProblemFile`] and returns
//! a [`Report`] (plus artifacts for `solve` and `jet`).

use crate::problem::ProblemFile;
use crate::report::Report;
use crate::CliError;
use goursat_core::charsolve::{
    mae_residual_on_surface, monge_solve, solve_first_order, EquationInput, FlowConfig, GridSpec,
    MongeCfg, SolutionSurface,
};
use goursat_core::expr::{parse, VarKind, VarTable};
use goursat_core::grassmann::{
    decompose_metric, is_characteristic_for_metric, metric_of_equation, strong_char_test,
    Decomposition,
};
use goursat_core::jets::{
    formal_integrability_check, formal_solve, is_noncharacteristic, prolonged_fiber_system,
    NewtonCfg, NormalizedCauchyData,
};
use goursat_core::linalg;
use goursat_core::mae::{
    recover_b, reconstruct_distributions, sample_fiber_points, DistFrame, ReconstructCfg,
};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::time::Instant;

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn config_echo(problem: &ProblemFile) -> Result<Value, CliError> {
    serde_json::to_value(problem).map_err(|e| CliError::schema(e.to_string()))
}

/// Pointwise analysis: residual, conformal metric, rank, decomposability,
/// characteristic covectors and the n = 2 type label.
pub fn cmd_analyze(problem: &ProblemFile) -> Result<Report, CliError> {
    let start = Instant::now();
    let mut report = Report::new("analyze", problem.seed, config_echo(problem)?);
    let n = problem.n;
    let f = problem.equation_expr()?;
    if problem.points.is_empty() {
        return Err(CliError::schema("analyze needs at least one point"));
    }

    let mut out_points = Vec::new();
    for (k, spec) in problem.points.iter().enumerate() {
        let m1 = problem.jet_point(spec)?;
        let jt = VarTable::new(n, 2);
        let env = m1.env(&jt);
        let residual = goursat_core::expr::eval(&f, &env)?;
        let metric = metric_of_equation(&f, &m1)?;
        let g = metric.matrix().clone();
        let rank = linalg::rank_with_tol(&g, 1e-9);
        let (class, factors) = match decompose_metric(&metric, 1e-9) {
            Decomposition::Zero => ("zero", vec![]),
            Decomposition::Rank1(v) => ("rank1", vec![v.as_slice().to_vec()]),
            Decomposition::Decomposable(v, w) => (
                "decomposable",
                vec![v.as_slice().to_vec(), w.as_slice().to_vec()],
            ),
            Decomposition::NotDecomposable { .. } => ("not_decomposable", vec![]),
        };

        let mut point_result = json!({
            "point": k,
            "residual": residual,
            "metric": matrix_rows(&g),
            "metric_rank": rank,
            "decomposition": class,
            "factors": factors,
        });

        if n == 2 {
            // Δ = F_{p12}² − 4 F_{p11} F_{p22} from the metric entries
            let a = g[(0, 0)];
            let b = 2.0 * g[(0, 1)];
            let c = g[(1, 1)];
            let delta = b * b - 4.0 * a * c;
            let scale = (a * a + b * b + c * c).max(f64::MIN_POSITIVE);
            let label = if delta > 1e-9 * scale {
                "hyperbolic"
            } else if delta < -1e-9 * scale {
                "elliptic"
            } else {
                "parabolic"
            };
            let mut directions: Vec<Vec<f64>> = Vec::new();
            if delta >= -1e-9 * scale {
                let d = delta.max(0.0).sqrt();
                if a.abs() > 1e-12 * scale.sqrt() {
                    directions.push(vec![(-b + d) / (2.0 * a), 1.0]);
                    if delta > 1e-9 * scale {
                        directions.push(vec![(-b - d) / (2.0 * a), 1.0]);
                    }
                } else {
                    directions.push(vec![1.0, 0.0]);
                    if b.abs() > 1e-12 * scale.sqrt() {
                        directions.push(vec![-c / b, 1.0]);
                    }
                }
            }
            point_result["delta"] = json!(delta);
            point_result["label"] = json!(label);
            point_result["characteristic_covectors"] = json!(directions);
        }

        if let Some(eta) = &spec.eta {
            let eta = DVector::from_vec(eta.clone());
            let characteristic = is_characteristic_for_metric(&metric, &eta, 1e-9)
                .map_err(|e| CliError::numerical(e.to_string()))?;
            let strong = if characteristic {
                Some(
                    strong_char_test(&f, &m1, &eta, 21, 1e-9)
                        .map_err(|e| CliError::numerical(e.to_string()))?,
                )
            } else {
                None
            };
            point_result["eta_characteristic"] = json!(characteristic);
            point_result["eta_strongly_characteristic"] = json!(strong);
        }
        out_points.push(point_result);
    }

    report.results = json!({ "points": out_points });
    report.timings.total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(report)
}

fn frame_rows(frame: &DistFrame) -> Vec<Vec<f64>> {
    frame
        .vectors
        .iter()
        .map(|v| v.to_vector().as_slice().to_vec())
        .collect()
}

fn reference_span(n: usize, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    let dim = 2 * n + 1;
    let cols: Result<Vec<DVector<f64>>, CliError> = rows
        .iter()
        .map(|r| {
            if r.len() != dim {
                Err(CliError::schema(format!(
                    "reference frame vectors must have {dim} components"
                )))
            } else {
                Ok(DVector::from_vec(r.clone()))
            }
        })
        .collect();
    Ok(linalg::orthonormal_span(&cols?, 1e-12))
}

/// Reconstruct `D`, `D⊥` from the equation at each requested base point and
/// read back the `B`-matrix where the frames are transversal.
pub fn cmd_reconstruct(problem: &ProblemFile) -> Result<Report, CliError> {
    let start = Instant::now();
    let mut report = Report::new("reconstruct", problem.seed, config_echo(problem)?);
    let n = problem.n;
    let f = problem.equation_expr()?;
    if problem.points.is_empty() {
        return Err(CliError::schema("reconstruct needs at least one base point"));
    }
    let spec = problem
        .reconstruct
        .clone()
        .ok_or_else(|| CliError::schema("reconstruct needs a `reconstruct` block"))?;

    let mut out_points = Vec::new();
    for (k, pspec) in problem.points.iter().enumerate() {
        let m = problem.chart_point(pspec);
        let cfg = ReconstructCfg {
            samples: spec.samples,
            newton_tol: spec.newton_tol,
            rank_tol: spec.rank_tol,
            seed: problem.seed.wrapping_add(k as u64),
        };
        let rep = reconstruct_distributions(&f, &m, &cfg)?;
        let mut entry = json!({
            "point": k,
            "d_frame": frame_rows(&rep.d),
            "dperp_frame": frame_rows(&rep.dperp),
            "samples_used": rep.samples_used,
            "singular_discarded": rep.singular_discarded,
            "fill_singular_values": [rep.fill_sv.0, rep.fill_sv.1],
            "lagrangian": rep.lagrangian,
        });
        match recover_b(&rep.d) {
            Ok(b) => entry["b_matrix"] = json!(matrix_rows(&b)),
            Err(e) => entry["b_matrix_note"] = json!(e.to_string()),
        }
        match recover_b(&rep.dperp) {
            Ok(b) => entry["b_matrix_perp"] = json!(matrix_rows(&b)),
            Err(e) => entry["b_matrix_perp_note"] = json!(e.to_string()),
        }
        if let (Some(rd), Some(rp)) = (&spec.reference_d, &spec.reference_dperp) {
            let ref_d = reference_span(n, rd)?;
            let ref_p = reference_span(n, rp)?;
            let got_d = rep.d.span();
            let got_p = rep.dperp.span();
            let direct = linalg::max_principal_angle(&got_d, &ref_d)
                .max(linalg::max_principal_angle(&got_p, &ref_p));
            let swapped = linalg::max_principal_angle(&got_d, &ref_p)
                .max(linalg::max_principal_angle(&got_p, &ref_d));
            entry["principal_angle_max"] = json!(direct.min(swapped));
            entry["swapped_vs_reference"] = json!(swapped < direct);
        }
        out_points.push(entry);
    }

    report.results = json!({ "points": out_points });
    report.timings.total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(report)
}

/// Artifacts of a solve: the surface itself plus its CSV rendering.
pub struct SolveArtifacts {
    pub surface: SolutionSurface,
    pub csv: String,
}

/// Method-of-characteristics solve: the generalized Monge route when first
/// integrals are supplied, the plain first-order route otherwise.
pub fn cmd_solve(problem: &ProblemFile) -> Result<(Report, SolveArtifacts), CliError> {
    let start = Instant::now();
    let mut report = Report::new("solve", problem.seed, config_echo(problem)?);
    let n = problem.n;
    let datum = problem.build_datum()?;
    let datum_spec = problem.datum.as_ref().expect("validated by build_datum");
    let solver = problem
        .solver
        .clone()
        .ok_or_else(|| CliError::schema("solve needs a `solver` block"))?;
    if !(solver.dt > 0.0 && solver.dt <= solver.t_span[1] - solver.t_span[0]) {
        return Err(CliError::schema(
            "solver needs 0 < dt <= t_span[1] - t_span[0]",
        ));
    }
    let mut flow_cfg = FlowConfig::new(solver.dt, (solver.t_span[0], solver.t_span[1]));
    if let Some(k) = solver.keep_every {
        flow_cfg = flow_cfg.keep_every(k);
    }
    let grid = GridSpec {
        counts: datum_spec.grid.clone(),
    };

    let (surface, extra) = if problem.first_integrals.is_empty() {
        // first-order equation in (x, z, p)
        let chart = VarTable::chart(n);
        let text = problem.equation.expr.as_ref().ok_or_else(|| {
            CliError::schema("first-order solve needs the equation as an `expr` in (x, z, p)")
        })?;
        let f = parse(text, &chart)?;
        for v in f.variables() {
            if matches!(chart.kind(&v), Some(VarKind::P(mi)) if mi.order() > 1) {
                return Err(CliError::schema(
                    "first-order solve cannot use second-order jet variables; supply first_integrals for the Monge route",
                ));
            }
        }
        let surface = solve_first_order(&f, &datum, &flow_cfg, &grid)?;
        let residual = goursat_core::charsolve::expr_residual_on_surface(&surface, &f)?;
        (surface, json!({ "equation_residual_max": residual }))
    } else {
        if problem.first_integrals.len() < 2 {
            return Err(CliError::schema(
                "the Monge route needs at least two first integrals",
            ));
        }
        let chart = VarTable::chart(n);
        let f_list: Result<Vec<_>, _> = problem
            .first_integrals
            .iter()
            .map(|s| parse(s, &chart))
            .collect();
        let f_list = f_list?;
        let equation = match problem.b_field()? {
            Some(b) => EquationInput::B(b),
            None => EquationInput::F(problem.equation_expr()?),
        };
        let relation = problem
            .relation
            .clone()
            .ok_or_else(|| CliError::schema("Monge solve needs a `relation` block"))?;
        let recon = problem.reconstruct.clone();
        let mcfg = MongeCfg {
            degree: relation.degree,
            exp_features: relation.exp_features,
            relation_tol: relation.tol,
            reconstruct: ReconstructCfg {
                samples: recon.as_ref().map(|r| r.samples).unwrap_or(60),
                newton_tol: recon.as_ref().map(|r| r.newton_tol).unwrap_or(1e-12),
                rank_tol: recon.as_ref().map(|r| r.rank_tol).unwrap_or(1e-9),
                seed: problem.seed,
            },
            ..Default::default()
        };
        let (surface, diag) = monge_solve(&equation, &f_list, &datum, &flow_cfg, &grid, &mcfg)?;
        let f2 = equation.residual_expr();
        let mae_res = mae_residual_on_surface(&surface, &f2, 400)
            .map(|r| {
                json!({
                    "max_residual": r.max_residual,
                    "max_condition": r.max_condition,
                    "nodes_checked": r.nodes_checked,
                })
            })
            .unwrap_or_else(|e| json!({ "note": e.to_string() }));
        let memberships: Vec<String> = diag
            .memberships
            .iter()
            .map(|m| format!("{m:?}"))
            .collect();
        (
            surface,
            json!({
                "relation": {
                    "psi": diag.relation.psi,
                    "basis": diag.relation.basis.iter().map(|b| b.describe()).collect::<Vec<_>>(),
                    "residual": diag.relation.residual,
                    "description": diag.relation.describe(),
                },
                "f_star": diag.f_star_text,
                "f_star_on_datum_max": diag.f_star_on_datum,
                "memberships": memberships,
                "mae_residual": mae_res,
            }),
        )
    };

    let csv = surface.to_csv();
    report.results = json!({
        "surface": {
            "time_slices": surface.t_values.len(),
            "datum_nodes": surface.grid.total(),
            "t_values_first_last": [surface.t_values.first(), surface.t_values.last()],
            "residuals": {
                "f_max": surface.residuals.f_max,
                "theta_flow": surface.residuals.theta_flow,
                "theta_datum": surface.residuals.theta_datum,
                "theta_s_fd": surface.residuals.theta_s_fd,
            },
        },
        "diagnostics": extra,
    });
    report.timings.total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((report, SolveArtifacts { surface, csv }))
}

/// Formal jet solution of a normalized Cauchy problem plus the formal
/// integrability probe.
pub fn cmd_jet(problem: &ProblemFile) -> Result<(Report, BTreeMap<String, f64>), CliError> {
    let start = Instant::now();
    let mut report = Report::new("jet", problem.seed, config_echo(problem)?);
    let n = problem.n;
    let spec = problem
        .jet
        .clone()
        .ok_or_else(|| CliError::schema("jet needs a `jet` block"))?;
    if spec.order < 2 {
        return Err(CliError::schema("jet order must be at least 2"));
    }
    let f = problem.equation_expr()?;
    let chart = VarTable::chart(n);
    let phi = parse(&spec.phi_n, &chart)?;
    let data = NormalizedCauchyData { phi_n: phi };
    let newton = NewtonCfg {
        seed: spec.newton_seed,
        ..Default::default()
    };
    let table = formal_solve(&f, &data, n, spec.order, &newton)?;

    let noncharacteristic = is_noncharacteristic(&f, &table.jet_point(), 1e-10)?;
    let residual = table.prolongation_residual(&f)?;
    let samples = sample_fiber_points(
        &f,
        table.base(),
        200,
        problem.seed.wrapping_add(1),
        1e-12,
    )?;
    let integrable = formal_integrability_check(&f, &samples)?;

    let fiber = if spec.order >= 2 {
        let sys = prolonged_fiber_system(&f, &table)?;
        json!({
            "rows": sys.rows.len(),
            "unknowns": sys.unknowns.len(),
            "free_parameters": sys.free_parameters(1e-9),
        })
    } else {
        Value::Null
    };

    let coeffs = table.index_map();
    report.results = json!({
        "order": spec.order,
        "base": {
            "x": table.base().x,
            "z": table.base().z,
            "p": table.base().p,
        },
        "coefficients": coeffs,
        "noncharacteristic_at_seed": noncharacteristic,
        "prolongation_residual": residual,
        "formally_integrable_on_samples": integrable,
        "fiber_samples": samples.len(),
        "prolonged_fiber_system": fiber,
    });
    report.timings.total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((report, table.index_map()))
}
