//! Symbolic expressions over phase-space coordinates.
//!
//! An [`Expr`] is an immutable, reference-counted tree. Parsing keeps the
//! tree exactly as written (after macro expansion); the arithmetic
//! constructors (`+`, `-`, `*`, `/`, [`Expr::pow`], ...) apply local
//! simplifications: constant folding, the 0/1 identities and `x - x -> 0`.

mod diff;
mod eval;
mod parse;
mod print;

use std::collections::BTreeSet;
use std::fmt;
use std::ops;
use std::sync::Arc;

pub use diff::differentiate;
pub use eval::{evaluate, Bindings, EvalError, Tape};
pub use parse::{parse, parse_with, ParseContext, ParseError, ParseErrorKind};

/// Which block of coordinates a symbol belongs to.
///
/// `P` only appears in expressions on the canonical side (primary constraint
/// candidates); it is evaluated from the second slot of a [`Bindings`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Q,
    V,
    P,
}

impl Slot {
    pub fn letter(self) -> char {
        match self {
            Slot::Q => 'q',
            Slot::V => 'v',
            Slot::P => 'p',
        }
    }
}

/// A coordinate symbol. `index` is zero-based; it prints one-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coord {
    pub slot: Slot,
    pub index: usize,
}

impl Coord {
    pub fn q(index: usize) -> Self {
        Coord { slot: Slot::Q, index }
    }

    pub fn v(index: usize) -> Self {
        Coord { slot: Slot::V, index }
    }

    pub fn p(index: usize) -> Self {
        Coord { slot: Slot::P, index }
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.slot.letter(), self.index + 1)
    }
}

/// Differentiation variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Symbol {
    Coord(Coord),
    Param(Arc<str>),
}

impl From<Coord> for Symbol {
    fn from(c: Coord) -> Self {
        Symbol::Coord(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Sqrt,
    Sin,
    Cos,
    Exp,
    Ln,
    Abs,
    /// Derivative of `abs`; `sign(0) = 0`.
    Sign,
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Exp => "exp",
            UnaryOp::Ln => "ln",
            UnaryOp::Abs => "abs",
            UnaryOp::Sign => "sign",
        }
    }

    pub(crate) fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sqrt" => UnaryOp::Sqrt,
            "sin" => UnaryOp::Sin,
            "cos" => UnaryOp::Cos,
            "exp" => UnaryOp::Exp,
            "ln" => UnaryOp::Ln,
            "abs" => UnaryOp::Abs,
            "sign" => UnaryOp::Sign,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinaryOp {
    pub fn symbol(self) -> char {
        match self {
            BinaryOp::Add => '+',
            BinaryOp::Sub => '-',
            BinaryOp::Mul => '*',
            BinaryOp::Div => '/',
            BinaryOp::Pow => '^',
        }
    }
}

/// Node of an expression tree. Constants are always finite and non-negative;
/// negative values are represented as `Neg(Const)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Param(Arc<str>),
    Coord(Coord),
    Unary(UnaryOp, Expr),
    Binary(BinaryOp, Expr, Expr),
}

#[derive(Clone)]
pub struct Expr(Arc<Node>);

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || *self.0 == *other.0
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({self})")
    }
}

impl Expr {
    fn from_node(node: Node) -> Self {
        Expr(Arc::new(node))
    }

    pub fn node(&self) -> &Node {
        &self.0
    }

    pub(crate) fn ptr(&self) -> *const Node {
        Arc::as_ptr(&self.0)
    }

    /// A numeric literal. Negative values become `Neg(Const)`.
    ///
    /// # Panics
    /// On non-finite input.
    pub fn constant(c: f64) -> Self {
        assert!(c.is_finite(), "non-finite constant {c}");
        if c < 0.0 || (c == 0.0 && c.is_sign_negative()) {
            if c == 0.0 {
                return Self::from_node(Node::Const(0.0));
            }
            Self::raw_unary(UnaryOp::Neg, Self::from_node(Node::Const(-c)))
        } else {
            Self::from_node(Node::Const(c))
        }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn one() -> Self {
        Self::constant(1.0)
    }

    pub fn param(name: &str) -> Self {
        Self::from_node(Node::Param(Arc::from(name)))
    }

    pub fn coord(c: Coord) -> Self {
        Self::from_node(Node::Coord(c))
    }

    pub fn q(index: usize) -> Self {
        Self::coord(Coord::q(index))
    }

    pub fn v(index: usize) -> Self {
        Self::coord(Coord::v(index))
    }

    pub fn p(index: usize) -> Self {
        Self::coord(Coord::p(index))
    }

    pub(crate) fn raw_unary(op: UnaryOp, a: Expr) -> Self {
        Self::from_node(Node::Unary(op, a))
    }

    pub(crate) fn raw_binary(op: BinaryOp, a: Expr, b: Expr) -> Self {
        Self::from_node(Node::Binary(op, a, b))
    }

    /// The value of a constant subtree (`Const` or `Neg(Const)`).
    pub fn as_const(&self) -> Option<f64> {
        match self.node() {
            Node::Const(c) => Some(*c),
            Node::Unary(UnaryOp::Neg, a) => match a.node() {
                Node::Const(c) => Some(-*c),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn is_one(&self) -> bool {
        self.as_const() == Some(1.0)
    }

    /// Unary application with local simplification.
    pub fn unary(op: UnaryOp, a: Expr) -> Self {
        if let Some(c) = a.as_const() {
            let folded = match op {
                UnaryOp::Neg => Some(-c),
                UnaryOp::Sqrt if c >= 0.0 => Some(c.sqrt()),
                UnaryOp::Sin => Some(c.sin()),
                UnaryOp::Cos => Some(c.cos()),
                UnaryOp::Exp => Some(c.exp()),
                UnaryOp::Ln if c > 0.0 => Some(c.ln()),
                UnaryOp::Abs => Some(c.abs()),
                UnaryOp::Sign => Some(sign(c)),
                _ => None,
            };
            if let Some(v) = folded.filter(|v| v.is_finite()) {
                return Self::constant(v);
            }
        }
        if op == UnaryOp::Neg {
            if let Node::Unary(UnaryOp::Neg, inner) = a.node() {
                return inner.clone();
            }
        }
        Self::raw_unary(op, a)
    }

    /// Binary application with local simplification.
    pub fn binary(op: BinaryOp, a: Expr, b: Expr) -> Self {
        let (ca, cb) = (a.as_const(), b.as_const());
        if let (Some(x), Some(y)) = (ca, cb) {
            let folded = match op {
                BinaryOp::Add => Some(x + y),
                BinaryOp::Sub => Some(x - y),
                BinaryOp::Mul => Some(x * y),
                BinaryOp::Div if y != 0.0 => Some(x / y),
                BinaryOp::Pow => Some(x.powf(y)),
                _ => None,
            };
            if let Some(v) = folded.filter(|v| v.is_finite()) {
                return Self::constant(v);
            }
        }
        match op {
            BinaryOp::Add => {
                if ca == Some(0.0) {
                    return b;
                }
                if cb == Some(0.0) {
                    return a;
                }
            }
            BinaryOp::Sub => {
                if cb == Some(0.0) {
                    return a;
                }
                if ca == Some(0.0) {
                    return Self::unary(UnaryOp::Neg, b);
                }
                if a == b {
                    return Self::zero();
                }
            }
            BinaryOp::Mul => {
                if ca == Some(0.0) || cb == Some(0.0) {
                    return Self::zero();
                }
                if ca == Some(1.0) {
                    return b;
                }
                if cb == Some(1.0) {
                    return a;
                }
                if ca == Some(-1.0) {
                    return Self::unary(UnaryOp::Neg, b);
                }
                if cb == Some(-1.0) {
                    return Self::unary(UnaryOp::Neg, a);
                }
                // constants lead in products and merge: c1*(c2*x) -> (c1 c2)*x
                if let Some(c) = ca {
                    if let Node::Binary(BinaryOp::Mul, l, r) = b.node() {
                        if let Some(c2) = l.as_const() {
                            return Self::binary(BinaryOp::Mul, Self::constant(c * c2), r.clone());
                        }
                    }
                } else if cb.is_some() {
                    return Self::binary(BinaryOp::Mul, b, a);
                }
            }
            BinaryOp::Div => {
                if cb == Some(1.0) {
                    return a;
                }
                if ca == Some(0.0) && cb != Some(0.0) {
                    return Self::zero();
                }
                if let (Some(d), Node::Binary(BinaryOp::Mul, l, r)) = (cb, a.node()) {
                    if let Some(c) = l.as_const().filter(|_| d != 0.0) {
                        return Self::binary(BinaryOp::Mul, Self::constant(c / d), r.clone());
                    }
                }
            }
            BinaryOp::Pow => {
                if cb == Some(1.0) {
                    return a;
                }
                if cb == Some(0.0) || ca == Some(1.0) {
                    return Self::one();
                }
            }
        }
        Self::raw_binary(op, a, b)
    }

    pub fn pow(self, e: Expr) -> Self {
        Self::binary(BinaryOp::Pow, self, e)
    }

    pub fn powf(self, e: f64) -> Self {
        self.pow(Self::constant(e))
    }

    pub fn sqrt(self) -> Self {
        Self::unary(UnaryOp::Sqrt, self)
    }

    pub fn sin(self) -> Self {
        Self::unary(UnaryOp::Sin, self)
    }

    pub fn cos(self) -> Self {
        Self::unary(UnaryOp::Cos, self)
    }

    pub fn exp(self) -> Self {
        Self::unary(UnaryOp::Exp, self)
    }

    pub fn ln(self) -> Self {
        Self::unary(UnaryOp::Ln, self)
    }

    pub fn abs(self) -> Self {
        Self::unary(UnaryOp::Abs, self)
    }

    /// Rebuild the tree bottom-up through the simplifying constructors.
    pub fn simplify(&self) -> Expr {
        match self.node() {
            Node::Const(_) | Node::Param(_) | Node::Coord(_) => self.clone(),
            Node::Unary(op, a) => Self::unary(*op, a.simplify()),
            Node::Binary(op, a, b) => Self::binary(*op, a.simplify(), b.simplify()),
        }
    }

    /// Replace parameters by values; unknown parameters stay symbolic.
    pub fn substitute_params(&self, values: &dyn Fn(&str) -> Option<f64>) -> Expr {
        match self.node() {
            Node::Param(name) => match values(name) {
                Some(v) => Self::constant(v),
                None => self.clone(),
            },
            Node::Const(_) | Node::Coord(_) => self.clone(),
            Node::Unary(op, a) => Self::unary(*op, a.substitute_params(values)),
            Node::Binary(op, a, b) => Self::binary(*op, a.substitute_params(values), b.substitute_params(values)),
        }
    }

    pub fn coords(&self) -> BTreeSet<Coord> {
        let mut out = BTreeSet::new();
        self.visit(&mut |n| {
            if let Node::Coord(c) = n {
                out.insert(*c);
            }
        });
        out
    }

    pub fn params(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.visit(&mut |n| {
            if let Node::Param(p) = n {
                out.insert(p.to_string());
            }
        });
        out
    }

    fn visit(&self, f: &mut dyn FnMut(&Node)) {
        f(self.node());
        match self.node() {
            Node::Unary(_, a) => a.visit(f),
            Node::Binary(_, a, b) => {
                a.visit(f);
                b.visit(f);
            }
            _ => {}
        }
    }

    /// Number of nodes, counting shared subtrees once per occurrence.
    pub fn size(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }

    pub fn depth(&self) -> usize {
        match self.node() {
            Node::Unary(_, a) => 1 + a.depth(),
            Node::Binary(_, a, b) => 1 + a.depth().max(b.depth()),
            _ => 1,
        }
    }
}

pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Σ_a x_a y_a over two coordinate blocks.
pub fn dot(x: Slot, y: Slot, dim: usize) -> Expr {
    (0..dim)
        .map(|a| Expr::coord(Coord { slot: x, index: a }) * Expr::coord(Coord { slot: y, index: a }))
        .reduce(|acc, t| acc + t)
        .unwrap_or_else(Expr::zero)
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $op:expr) => {
        impl ops::$trait for Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::binary($op, self, rhs)
            }
        }
        impl ops::$trait<&Expr> for &Expr {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                Expr::binary($op, self.clone(), rhs.clone())
            }
        }
        impl ops::$trait<f64> for Expr {
            type Output = Expr;
            fn $method(self, rhs: f64) -> Expr {
                Expr::binary($op, self, Expr::constant(rhs))
            }
        }
        impl ops::$trait<Expr> for f64 {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::binary($op, Expr::constant(self), rhs)
            }
        }
    };
}

impl_binop!(Add, add, BinaryOp::Add);
impl_binop!(Sub, sub, BinaryOp::Sub);
impl_binop!(Mul, mul, BinaryOp::Mul);
impl_binop!(Div, div, BinaryOp::Div);

impl ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::unary(UnaryOp::Neg, self)
    }
}

impl ops::Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::unary(UnaryOp::Neg, self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_constants_are_canonical() {
        let c = Expr::constant(-2.5);
        assert!(matches!(c.node(), Node::Unary(UnaryOp::Neg, _)));
        assert_eq!(c.as_const(), Some(-2.5));
        assert_eq!(Expr::constant(-0.0), Expr::zero());
    }

    #[test]
    fn local_rules() {
        let x = Expr::q(0);
        assert_eq!(&x - &x, Expr::zero());
        assert_eq!(x.clone() * 1.0, x);
        assert_eq!(0.0 * x.clone(), Expr::zero());
        assert_eq!(x.clone() + 0.0, x);
        assert_eq!(-(-x.clone()), x);
        assert_eq!(Expr::constant(2.0) * Expr::constant(3.0), Expr::constant(6.0));
        assert_eq!(x.clone().powf(1.0), x);
        // division by a zero constant is left alone rather than folded to inf
        let d = Expr::one() / Expr::zero();
        assert!(matches!(d.node(), Node::Binary(BinaryOp::Div, _, _)));
    }

    #[test]
    fn symbol_scan() {
        let e = Expr::q(0) * Expr::param("m") + Expr::v(1);
        assert_eq!(e.coords().len(), 2);
        assert!(e.params().contains("m"));
    }
}
