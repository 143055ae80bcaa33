//! Expression DSL over named chart/jet variables.
//!
//! [`Expr`] is an immutable tree (cheap to clone, subtrees shared through
//! `Rc`) supporting exact symbolic differentiation, total derivatives on jet
//! variables, and evaluation either by tree walk ([`eval`]) or through a
//! compiled tape ([`tape::Tape`]) for hot loops. Construction goes through
//! smart constructors that constant-fold; there is deliberately no CAS-style
//! simplification beyond that.

mod calculus;
mod parse;
pub mod tape;
mod vartable;

pub use calculus::{diff, total_derivative, JetOrderOverflow};
pub use parse::{parse, ParseError};
pub use tape::Tape;
pub use vartable::{Env, MultiIndex, VarKind, VarTable};

use std::collections::BTreeSet;
use std::fmt;
use std::rc::Rc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryFn {
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
}

impl UnaryFn {
    pub fn name(self) -> &'static str {
        match self {
            UnaryFn::Neg => "-",
            UnaryFn::Exp => "exp",
            UnaryFn::Log => "log",
            UnaryFn::Sin => "sin",
            UnaryFn::Cos => "cos",
            UnaryFn::Sqrt => "sqrt",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Node {
    Const(f64),
    Var(String),
    Unary(UnaryFn, Expr),
    Bin(BinOp, Expr, Expr),
    /// Power with a fixed real exponent; integer exponents are kept exact.
    Pow(Expr, f64),
}

/// Immutable expression tree. `Clone` is O(1).
#[derive(Clone, Debug)]
pub struct Expr {
    node: Rc<Node>,
}

/// Evaluation failures for the tree-walk evaluator.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("domain error in {op}({arg})")]
    Domain { op: &'static str, arg: f64 },
    #[error("division by zero")]
    DivByZero,
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
}

impl Expr {
    fn new(node: Node) -> Self {
        Expr { node: Rc::new(node) }
    }

    pub fn constant(c: f64) -> Self {
        Expr::new(Node::Const(c))
    }

    pub fn zero() -> Self {
        Expr::constant(0.0)
    }

    pub fn one() -> Self {
        Expr::constant(1.0)
    }

    pub fn var(name: impl Into<String>) -> Self {
        Expr::new(Node::Var(name.into()))
    }

    pub fn as_const(&self) -> Option<f64> {
        match &*self.node {
            Node::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn is_one(&self) -> bool {
        self.as_const() == Some(1.0)
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::constant(x + y),
            (Some(x), None) if x == 0.0 => b,
            (None, Some(y)) if y == 0.0 => a,
            _ => Expr::new(Node::Bin(BinOp::Add, a, b)),
        }
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::constant(x - y),
            (None, Some(y)) if y == 0.0 => a,
            (Some(x), None) if x == 0.0 => Expr::neg(b),
            _ => Expr::new(Node::Bin(BinOp::Sub, a, b)),
        }
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::constant(x * y),
            (Some(x), None) => match x {
                0.0 => Expr::zero(),
                1.0 => b,
                _ if x == -1.0 => Expr::neg(b),
                _ => Expr::new(Node::Bin(BinOp::Mul, a, b)),
            },
            (None, Some(y)) => match y {
                0.0 => Expr::zero(),
                1.0 => a,
                _ if y == -1.0 => Expr::neg(a),
                _ => Expr::new(Node::Bin(BinOp::Mul, a, b)),
            },
            _ => Expr::new(Node::Bin(BinOp::Mul, a, b)),
        }
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) if y != 0.0 => Expr::constant(x / y),
            (Some(x), None) if x == 0.0 => Expr::zero(),
            (None, Some(y)) if y == 1.0 => a,
            _ => Expr::new(Node::Bin(BinOp::Div, a, b)),
        }
    }

    pub fn neg(a: Expr) -> Expr {
        match &*a.node {
            Node::Const(c) => Expr::constant(-c),
            Node::Unary(UnaryFn::Neg, inner) => inner.clone(),
            _ => Expr::new(Node::Unary(UnaryFn::Neg, a)),
        }
    }

    pub fn unary(f: UnaryFn, a: Expr) -> Expr {
        if f == UnaryFn::Neg {
            return Expr::neg(a);
        }
        if let Some(c) = a.as_const() {
            let v = match f {
                UnaryFn::Exp => c.exp(),
                UnaryFn::Log => c.ln(),
                UnaryFn::Sin => c.sin(),
                UnaryFn::Cos => c.cos(),
                UnaryFn::Sqrt => c.sqrt(),
                UnaryFn::Neg => unreachable!(),
            };
            if v.is_finite() {
                return Expr::constant(v);
            }
        }
        Expr::new(Node::Unary(f, a))
    }

    pub fn exp(a: Expr) -> Expr {
        Expr::unary(UnaryFn::Exp, a)
    }

    pub fn log(a: Expr) -> Expr {
        Expr::unary(UnaryFn::Log, a)
    }

    pub fn sin(a: Expr) -> Expr {
        Expr::unary(UnaryFn::Sin, a)
    }

    pub fn cos(a: Expr) -> Expr {
        Expr::unary(UnaryFn::Cos, a)
    }

    pub fn sqrt(a: Expr) -> Expr {
        Expr::unary(UnaryFn::Sqrt, a)
    }

    pub fn pow(base: Expr, exponent: f64) -> Expr {
        if exponent == 0.0 {
            return Expr::one();
        }
        if exponent == 1.0 {
            return base;
        }
        if let Some(c) = base.as_const() {
            let v = pow_fixed(c, exponent);
            if v.is_finite() {
                return Expr::constant(v);
            }
        }
        Expr::new(Node::Pow(base, exponent))
    }

    /// Collect variable names occurring in the tree.
    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match &*self.node {
            Node::Const(_) => {}
            Node::Var(v) => {
                out.insert(v.clone());
            }
            Node::Unary(_, a) => a.collect_vars(out),
            Node::Bin(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Node::Pow(a, _) => a.collect_vars(out),
        }
    }

    pub fn depends_on(&self, name: &str) -> bool {
        match &*self.node {
            Node::Const(_) => false,
            Node::Var(v) => v == name,
            Node::Unary(_, a) => a.depends_on(name),
            Node::Bin(_, a, b) => a.depends_on(name) || b.depends_on(name),
            Node::Pow(a, _) => a.depends_on(name),
        }
    }

    /// Read-only structural view for sibling modules (parser, calculus, tape).
    pub(crate) fn view(&self) -> ExprView<'_> {
        match &*self.node {
            Node::Const(c) => ExprView::Const(*c),
            Node::Var(v) => ExprView::Var(v),
            Node::Unary(f, a) => ExprView::Unary(*f, a),
            Node::Bin(op, a, b) => ExprView::Bin(*op, a, b),
            Node::Pow(a, e) => ExprView::Pow(a, *e),
        }
    }
}

/// Borrowed view of a node used by the crate-internal algorithms.
pub(crate) enum ExprView<'a> {
    Const(f64),
    Var(&'a str),
    Unary(UnaryFn, &'a Expr),
    Bin(BinOp, &'a Expr, &'a Expr),
    Pow(&'a Expr, f64),
}

/// Power with exactness for small integer exponents.
pub(crate) fn pow_fixed(base: f64, exponent: f64) -> f64 {
    if exponent.fract() == 0.0 && exponent.abs() <= 64.0 {
        base.powi(exponent as i32)
    } else {
        base.powf(exponent)
    }
}

/// Tree-walk evaluation against an [`Env`]. Hot paths should compile a
/// [`Tape`] instead.
pub fn eval(e: &Expr, env: &Env) -> Result<f64, EvalError> {
    match e.view() {
        ExprView::Const(c) => Ok(c),
        ExprView::Var(v) => env
            .get(v)
            .ok_or_else(|| EvalError::UnboundVariable(v.to_string())),
        ExprView::Unary(f, a) => {
            let x = eval(a, env)?;
            match f {
                UnaryFn::Neg => Ok(-x),
                UnaryFn::Exp => Ok(x.exp()),
                UnaryFn::Log => {
                    if x > 0.0 {
                        Ok(x.ln())
                    } else {
                        Err(EvalError::Domain { op: "log", arg: x })
                    }
                }
                UnaryFn::Sin => Ok(x.sin()),
                UnaryFn::Cos => Ok(x.cos()),
                UnaryFn::Sqrt => {
                    if x >= 0.0 {
                        Ok(x.sqrt())
                    } else {
                        Err(EvalError::Domain { op: "sqrt", arg: x })
                    }
                }
            }
        }
        ExprView::Bin(op, a, b) => {
            let x = eval(a, env)?;
            let y = eval(b, env)?;
            match op {
                BinOp::Add => Ok(x + y),
                BinOp::Sub => Ok(x - y),
                BinOp::Mul => Ok(x * y),
                BinOp::Div => {
                    if y == 0.0 {
                        Err(EvalError::DivByZero)
                    } else {
                        Ok(x / y)
                    }
                }
            }
        }
        ExprView::Pow(a, ex) => {
            let x = eval(a, env)?;
            let v = pow_fixed(x, ex);
            if v.is_nan() && !x.is_nan() {
                Err(EvalError::Domain { op: "pow", arg: x })
            } else {
                Ok(v)
            }
        }
    }
}

// Operator overloads for building expressions in code.
impl std::ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::add(self, rhs)
    }
}

impl std::ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Expr::sub(self, rhs)
    }
}

impl std::ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::mul(self, rhs)
    }
}

impl std::ops::Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        Expr::div(self, rhs)
    }
}

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::neg(self)
    }
}

// Printing with minimal parentheses; `parse(print(e))` must be
// evaluation-equivalent to `e`.

fn precedence(e: &Expr) -> u8 {
    match e.view() {
        ExprView::Const(c) => {
            if c < 0.0 {
                1
            } else {
                4
            }
        }
        ExprView::Var(_) => 4,
        ExprView::Unary(UnaryFn::Neg, _) => 1,
        ExprView::Unary(_, _) => 4,
        ExprView::Bin(BinOp::Add | BinOp::Sub, _, _) => 0,
        ExprView::Bin(BinOp::Mul | BinOp::Div, _, _) => 2,
        ExprView::Pow(_, _) => 3,
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
    if precedence(e) < min_prec {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.view() {
            ExprView::Const(c) => write!(f, "{c}"),
            ExprView::Var(v) => write!(f, "{v}"),
            ExprView::Unary(UnaryFn::Neg, a) => {
                write!(f, "-")?;
                write_child(f, a, 2)
            }
            ExprView::Unary(func, a) => write!(f, "{}({a})", func.name()),
            ExprView::Bin(op, a, b) => match op {
                BinOp::Add => {
                    write_child(f, a, 0)?;
                    write!(f, " + ")?;
                    write_child(f, b, 1)
                }
                BinOp::Sub => {
                    write_child(f, a, 0)?;
                    write!(f, " - ")?;
                    write_child(f, b, 1)
                }
                BinOp::Mul => {
                    write_child(f, a, 2)?;
                    write!(f, "*")?;
                    write_child(f, b, 2)
                }
                BinOp::Div => {
                    write_child(f, a, 2)?;
                    write!(f, "/")?;
                    write_child(f, b, 3)
                }
            },
            ExprView::Pow(a, ex) => {
                write_child(f, a, 4)?;
                if ex < 0.0 {
                    write!(f, "^({ex})")
                } else {
                    write!(f, "^{ex}")
                }
            }
        }
    }
}
