//! Exact symbolic differentiation and total derivatives on jet variables.

use super::{BinOp, Expr, ExprView, UnaryFn, VarKind, VarTable};

/// Exact partial derivative `∂e/∂v`, constant-folded. Variables other than
/// `v` are held fixed.
pub fn diff(e: &Expr, v: &str) -> Expr {
    match e.view() {
        ExprView::Const(_) => Expr::zero(),
        ExprView::Var(name) => {
            if name == v {
                Expr::one()
            } else {
                Expr::zero()
            }
        }
        ExprView::Unary(f, a) => {
            if !a.depends_on(v) {
                return Expr::zero();
            }
            let da = diff(a, v);
            match f {
                UnaryFn::Neg => Expr::neg(da),
                UnaryFn::Exp => Expr::mul(Expr::exp(a.clone()), da),
                UnaryFn::Log => Expr::div(da, a.clone()),
                UnaryFn::Sin => Expr::mul(Expr::cos(a.clone()), da),
                UnaryFn::Cos => Expr::neg(Expr::mul(Expr::sin(a.clone()), da)),
                UnaryFn::Sqrt => Expr::div(
                    da,
                    Expr::mul(Expr::constant(2.0), Expr::sqrt(a.clone())),
                ),
            }
        }
        ExprView::Bin(op, a, b) => match op {
            BinOp::Add => Expr::add(diff(a, v), diff(b, v)),
            BinOp::Sub => Expr::sub(diff(a, v), diff(b, v)),
            BinOp::Mul => Expr::add(
                Expr::mul(diff(a, v), b.clone()),
                Expr::mul(a.clone(), diff(b, v)),
            ),
            BinOp::Div => {
                if !b.depends_on(v) {
                    Expr::div(diff(a, v), b.clone())
                } else {
                    Expr::div(
                        Expr::sub(
                            Expr::mul(diff(a, v), b.clone()),
                            Expr::mul(a.clone(), diff(b, v)),
                        ),
                        Expr::pow(b.clone(), 2.0),
                    )
                }
            }
        },
        ExprView::Pow(a, ex) => {
            if !a.depends_on(v) {
                return Expr::zero();
            }
            Expr::mul(
                Expr::mul(Expr::constant(ex), Expr::pow(a.clone(), ex - 1.0)),
                diff(a, v),
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("total derivative would need jet order {needed}, above the table cap {cap}")]
pub struct JetOrderOverflow {
    pub needed: usize,
    pub cap: usize,
}

/// Total derivative `D_i e = ∂_{x^i} e + p_i ∂_z e + Σ_I p_{I,i} ∂_{p_I} e`,
/// summed over the jet variables actually occurring in `e`, with the extended
/// multi-index `I,i` put in nondecreasing form.
pub fn total_derivative(e: &Expr, i: usize, table: &VarTable) -> Result<Expr, JetOrderOverflow> {
    assert!(i >= 1 && i <= table.n(), "direction index out of range");
    let mut acc = diff(e, &format!("x{i}"));
    for name in e.variables() {
        match table.kind(&name) {
            Some(VarKind::Z) => {
                acc = Expr::add(
                    acc,
                    Expr::mul(Expr::var(format!("p{i}")), diff(e, "z")),
                );
            }
            Some(VarKind::P(mi)) => {
                if mi.order() + 1 > table.max_order() {
                    return Err(JetOrderOverflow {
                        needed: mi.order() + 1,
                        cap: table.max_order(),
                    });
                }
                let extended = mi.extended(i as u8);
                acc = Expr::add(
                    acc,
                    Expr::mul(Expr::var(extended.var_name()), diff(e, &name)),
                );
            }
            _ => {}
        }
    }
    Ok(acc)
}
