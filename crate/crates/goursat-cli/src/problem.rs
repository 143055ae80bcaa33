//! JSON problem-file schema. One file carries the full configuration of one
//! command invocation; no defaults live outside the echoed config.

use crate::CliError;
use goursat_core::contact::{lift_cauchy_datum, CauchyDatum, ChartPoint};
use goursat_core::expr::{parse, Expr, VarTable};
use goursat_core::grassmann::JetPoint;
use goursat_core::mae::{horizontalize_expr, BField, CovectorExpr, NForm};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

fn default_seed() -> u64 {
    0x600D5EED
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub n: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub equation: EquationSpec,
    #[serde(default)]
    pub points: Vec<PointSpec>,
    #[serde(default)]
    pub datum: Option<DatumSpec>,
    #[serde(default)]
    pub first_integrals: Vec<String>,
    #[serde(default)]
    pub solver: Option<SolverSpec>,
    #[serde(default)]
    pub relation: Option<RelationSpec>,
    #[serde(default)]
    pub reconstruct: Option<ReconstructSpec>,
    #[serde(default)]
    pub jet: Option<JetSpec>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EquationSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_matrix: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nform: Option<NFormSpec>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NFormSpec {
    pub covectors: Vec<CovectorSpec>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CovectorSpec {
    pub dx: Vec<String>,
    #[serde(default)]
    pub dz: Option<String>,
    pub dp: Vec<String>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PointSpec {
    pub x: Vec<f64>,
    pub z: f64,
    pub p: Vec<f64>,
    /// Second-order coordinates, row-major symmetric matrix.
    #[serde(default, rename = "P", skip_serializing_if = "Option::is_none")]
    pub p2: Option<Vec<Vec<f64>>>,
    /// Optional covector to test for (strong) characteristics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DatumSpec {
    pub x: Vec<String>,
    pub z: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lift_f: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_seed: Option<Vec<f64>>,
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub grid: Vec<usize>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub dt: f64,
    pub t_span: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_every: Option<usize>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RelationSpec {
    pub degree: u32,
    #[serde(default)]
    pub exp_features: bool,
    pub tol: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructSpec {
    pub samples: usize,
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
    /// Optional reference frames, each vector as `2n+1` ambient coordinates
    /// ordered `(dx, dz, dp)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_d: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_dperp: Option<Vec<Vec<f64>>>,
}

fn default_newton_tol() -> f64 {
    1e-12
}

fn default_rank_tol() -> f64 {
    1e-9
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct JetSpec {
    pub order: usize,
    pub phi_n: String,
    #[serde(default)]
    pub newton_seed: f64,
}

impl ProblemFile {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let p: ProblemFile =
            serde_json::from_str(text).map_err(|e| CliError::schema(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(2..=8).contains(&self.n) {
            return Err(CliError::schema("n must lie in 2..=8"));
        }
        let present = [
            self.equation.expr.is_some(),
            self.equation.b_matrix.is_some(),
            self.equation.nform.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count();
        if present != 1 {
            return Err(CliError::schema(
                "exactly one equation representation (expr | b_matrix | nform) must be present",
            ));
        }
        if let Some(b) = &self.equation.b_matrix {
            if b.len() != self.n || b.iter().any(|row| row.len() != self.n) {
                return Err(CliError::schema("b_matrix must be n×n"));
            }
        }
        if let Some(d) = &self.datum {
            if d.x.len() != self.n {
                return Err(CliError::schema("datum.x must have n components"));
            }
            if d.p.is_some() == d.lift_f.is_some() {
                return Err(CliError::schema(
                    "datum needs exactly one of `p` (symbolic momenta) or `lift_f` (lifted)",
                ));
            }
            let params = self.n - 1;
            if d.box_lo.len() != params || d.box_hi.len() != params || d.grid.len() != params {
                return Err(CliError::schema(
                    "datum box and grid must have n-1 components",
                ));
            }
            if d.grid.iter().any(|&c| c == 0) {
                return Err(CliError::schema("datum grid counts must be positive"));
            }
            if d.box_lo.iter().zip(&d.box_hi).any(|(lo, hi)| !(lo < hi)) {
                return Err(CliError::schema("datum box must satisfy lo < hi"));
            }
        }
        for (k, pt) in self.points.iter().enumerate() {
            if pt.x.len() != self.n || pt.p.len() != self.n {
                return Err(CliError::schema(format!("point {k} has wrong dimension")));
            }
            if let Some(p2) = &pt.p2 {
                if p2.len() != self.n || p2.iter().any(|r| r.len() != self.n) {
                    return Err(CliError::schema(format!("point {k}: P must be n×n")));
                }
            }
        }
        Ok(())
    }

    /// The equation residual as an expression in order-2 jet variables.
    pub fn equation_expr(&self) -> Result<Expr, CliError> {
        let table = VarTable::new(self.n, 2);
        if let Some(text) = &self.equation.expr {
            return Ok(parse(text, &table)?);
        }
        if self.equation.b_matrix.is_some() {
            return Ok(self.b_field()?.expect("validated").residual_expr());
        }
        if let Some(nf) = &self.equation.nform {
            let omega = self.nform(nf)?;
            return Ok(horizontalize_expr(&omega));
        }
        let _ = table;
        Err(CliError::schema("no equation present"))
    }

    /// The `B`-field when the equation is given as a matrix.
    pub fn b_field(&self) -> Result<Option<BField>, CliError> {
        let Some(b) = &self.equation.b_matrix else {
            return Ok(None);
        };
        let chart = VarTable::chart(self.n);
        let entries: Result<Vec<Vec<Expr>>, CliError> = b
            .iter()
            .map(|row| {
                row.iter()
                    .map(|s| parse(s, &chart).map_err(CliError::from))
                    .collect()
            })
            .collect();
        Ok(Some(BField::new(entries?)))
    }

    fn nform(&self, spec: &NFormSpec) -> Result<NForm, CliError> {
        if spec.covectors.len() != self.n {
            return Err(CliError::schema("nform needs exactly n covectors"));
        }
        let chart = VarTable::chart(self.n);
        let mut covs = Vec::new();
        for c in &spec.covectors {
            if c.dx.len() != self.n || c.dp.len() != self.n {
                return Err(CliError::schema("covector components must have length n"));
            }
            let dx: Result<Vec<Expr>, _> = c.dx.iter().map(|s| parse(s, &chart)).collect();
            let dp: Result<Vec<Expr>, _> = c.dp.iter().map(|s| parse(s, &chart)).collect();
            let dz = match &c.dz {
                Some(s) => parse(s, &chart)?,
                None => Expr::zero(),
            };
            covs.push(CovectorExpr {
                dx: dx?,
                dz,
                dp: dp?,
            });
        }
        Ok(NForm::Decomposable(covs))
    }

    pub fn chart_point(&self, spec: &PointSpec) -> ChartPoint {
        ChartPoint::new(spec.x.clone(), spec.z, spec.p.clone())
    }

    pub fn jet_point(&self, spec: &PointSpec) -> Result<JetPoint, CliError> {
        let p2 = spec
            .p2
            .as_ref()
            .ok_or_else(|| CliError::schema("point needs a P matrix for jet-level analysis"))?;
        let m = DMatrix::from_fn(self.n, self.n, |i, j| p2[i][j]);
        Ok(JetPoint::new(self.chart_point(spec), m))
    }

    pub fn build_datum(&self) -> Result<CauchyDatum, CliError> {
        let spec = self
            .datum
            .as_ref()
            .ok_or_else(|| CliError::schema("this command needs a `datum` block"))?;
        let params = VarTable::params(self.n - 1);
        let x: Result<Vec<Expr>, _> = spec.x.iter().map(|s| parse(s, &params)).collect();
        let z = parse(&spec.z, &params)?;
        if let Some(p) = &spec.p {
            if p.len() != self.n {
                return Err(CliError::schema("datum.p must have n components"));
            }
            let p: Result<Vec<Expr>, _> = p.iter().map(|s| parse(s, &params)).collect();
            Ok(CauchyDatum::symbolic(
                x?,
                z,
                p?,
                spec.box_lo.clone(),
                spec.box_hi.clone(),
            ))
        } else {
            let chart = VarTable::chart(self.n);
            let f = parse(spec.lift_f.as_ref().expect("validated"), &chart)?;
            let seed = spec.p_seed.clone().unwrap_or_else(|| vec![0.0; self.n]);
            Ok(lift_cauchy_datum(
                x?,
                z,
                f,
                seed,
                spec.box_lo.clone(),
                spec.box_hi.clone(),
            )?)
        }
    }
}
