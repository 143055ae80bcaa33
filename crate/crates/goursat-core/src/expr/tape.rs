//! Flat postfix tape for fast repeated evaluation.
//!
//! The tree-walk evaluator resolves variable names through a hash map on
//! every visit; characteristic flows evaluate the same field components tens
//! of millions of times, so those paths compile expressions once against a
//! variable table and then run a small stack machine over slot-indexed loads.
//! Domain violations surface as non-finite results rather than errors.

use super::{BinOp, Expr, ExprView, UnaryFn, VarTable};

#[derive(Clone, Copy, Debug)]
enum Op {
    Const(f64),
    Load(u32),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Powi(i32),
    Powf(f64),
}

/// Compiled expression. `Send + Sync`; evaluation needs a caller-provided
/// scratch stack so parallel workers don't contend.
#[derive(Clone, Debug)]
pub struct Tape {
    ops: Vec<Op>,
    max_stack: usize,
}

impl Tape {
    /// Compile against the slot layout of `table`.
    ///
    /// Panics if the expression references a variable the table does not
    /// admit (parsing against the same table rules that out).
    pub fn compile(e: &Expr, table: &VarTable) -> Tape {
        let mut ops = Vec::new();
        emit(e, table, &mut ops);
        let mut depth = 0usize;
        let mut max_stack = 0usize;
        for op in &ops {
            match op {
                Op::Const(_) | Op::Load(_) => {
                    depth += 1;
                    max_stack = max_stack.max(depth);
                }
                Op::Add | Op::Sub | Op::Mul | Op::Div => depth -= 1,
                _ => {}
            }
        }
        Tape { ops, max_stack }
    }

    pub fn stack_depth(&self) -> usize {
        self.max_stack
    }

    /// Evaluate over slot values (see [`VarTable`] ordering). `stack` is
    /// reused scratch; it is cleared here.
    pub fn eval(&self, slots: &[f64], stack: &mut Vec<f64>) -> f64 {
        stack.clear();
        for op in &self.ops {
            match *op {
                Op::Const(c) => stack.push(c),
                Op::Load(i) => stack.push(slots[i as usize]),
                Op::Add => bin(stack, |a, b| a + b),
                Op::Sub => bin(stack, |a, b| a - b),
                Op::Mul => bin(stack, |a, b| a * b),
                Op::Div => bin(stack, |a, b| a / b),
                Op::Neg => un(stack, |a| -a),
                Op::Exp => un(stack, f64::exp),
                Op::Log => un(stack, f64::ln),
                Op::Sin => un(stack, f64::sin),
                Op::Cos => un(stack, f64::cos),
                Op::Sqrt => un(stack, f64::sqrt),
                Op::Powi(k) => un(stack, |a| a.powi(k)),
                Op::Powf(x) => un(stack, |a| a.powf(x)),
            }
        }
        debug_assert_eq!(stack.len(), 1);
        stack[0]
    }

    /// One-off evaluation allocating its own scratch.
    pub fn eval_once(&self, slots: &[f64]) -> f64 {
        let mut stack = Vec::with_capacity(self.max_stack);
        self.eval(slots, &mut stack)
    }
}

#[inline(always)]
fn bin(stack: &mut Vec<f64>, f: impl Fn(f64, f64) -> f64) {
    let b = stack.pop().unwrap();
    let a = stack.last_mut().unwrap();
    *a = f(*a, b);
}

#[inline(always)]
fn un(stack: &mut Vec<f64>, f: impl Fn(f64) -> f64) {
    let a = stack.last_mut().unwrap();
    *a = f(*a);
}

fn emit(e: &Expr, table: &VarTable, ops: &mut Vec<Op>) {
    match e.view() {
        ExprView::Const(c) => ops.push(Op::Const(c)),
        ExprView::Var(v) => {
            let slot = table
                .slot(v)
                .unwrap_or_else(|| panic!("variable `{v}` not admitted by the table"));
            ops.push(Op::Load(slot as u32));
        }
        ExprView::Unary(f, a) => {
            emit(a, table, ops);
            ops.push(match f {
                UnaryFn::Neg => Op::Neg,
                UnaryFn::Exp => Op::Exp,
                UnaryFn::Log => Op::Log,
                UnaryFn::Sin => Op::Sin,
                UnaryFn::Cos => Op::Cos,
                UnaryFn::Sqrt => Op::Sqrt,
            });
        }
        ExprView::Bin(op, a, b) => {
            emit(a, table, ops);
            emit(b, table, ops);
            ops.push(match op {
                BinOp::Add => Op::Add,
                BinOp::Sub => Op::Sub,
                BinOp::Mul => Op::Mul,
                BinOp::Div => Op::Div,
            });
        }
        ExprView::Pow(a, ex) => {
            emit(a, table, ops);
            if ex.fract() == 0.0 && ex.abs() <= 64.0 {
                ops.push(Op::Powi(ex as i32));
            } else {
                ops.push(Op::Powf(ex));
            }
        }
    }
}
