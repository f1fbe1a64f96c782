use std::fmt;

use super::{BinaryOp, Expr, Node, UnaryOp};

// Grammar levels: expr < term < factor < atom.
const EXPR: u8 = 1;
const TERM: u8 = 2;
const FACTOR: u8 = 3;
const ATOM: u8 = 4;

fn write_const(f: &mut fmt::Formatter<'_>, c: f64) -> fmt::Result {
    if c.fract() == 0.0 && c.abs() < 1e15 {
        write!(f, "{}", c as i64)
    } else {
        // `{:?}` is the shortest representation that round-trips
        write!(f, "{c:?}")
    }
}

fn write_level(e: &Expr, f: &mut fmt::Formatter<'_>, ctx: u8) -> fmt::Result {
    let (own, body): (u8, &dyn Fn(&mut fmt::Formatter<'_>) -> fmt::Result) = match e.node() {
        Node::Const(c) => (ATOM, &move |f| write_const(f, *c)),
        Node::Param(name) => (ATOM, &move |f| f.write_str(name)),
        Node::Coord(c) => (ATOM, &move |f| write!(f, "{c}")),
        Node::Unary(UnaryOp::Neg, a) => (FACTOR, &move |f| {
            f.write_str("-")?;
            write_level(a, f, FACTOR)
        }),
        Node::Unary(op, a) => (ATOM, &move |f| {
            write!(f, "{}(", op.name())?;
            write_level(a, f, EXPR)?;
            f.write_str(")")
        }),
        Node::Binary(op @ (BinaryOp::Add | BinaryOp::Sub), a, b) => (EXPR, &move |f| {
            write_level(a, f, EXPR)?;
            write!(f, " {} ", op.symbol())?;
            write_level(b, f, TERM)
        }),
        Node::Binary(op @ (BinaryOp::Mul | BinaryOp::Div), a, b) => (TERM, &move |f| {
            write_level(a, f, TERM)?;
            write!(f, "{}", op.symbol())?;
            write_level(b, f, FACTOR)
        }),
        Node::Binary(BinaryOp::Pow, a, b) => (FACTOR, &move |f| {
            write_level(a, f, ATOM)?;
            f.write_str("^")?;
            write_level(b, f, ATOM)
        }),
    };
    if own < ctx {
        f.write_str("(")?;
        body(f)?;
        f.write_str(")")
    } else {
        body(f)
    }
}

impl fmt::Display for Expr {
    /// Prints in the input grammar; the output re-parses to the same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_level(self, f, EXPR)
    }
}
