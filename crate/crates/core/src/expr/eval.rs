use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use nalgebra::DVector;

use super::{BinaryOp, Coord, Expr, Node, Slot, UnaryOp};
use crate::scalar::Real;

/// A phase-space point together with parameter values.
///
/// On the canonical side the second block holds momenta: `p` symbols read
/// from `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bindings<T = f64> {
    pub q: DVector<T>,
    pub v: DVector<T>,
    pub params: BTreeMap<String, T>,
}

impl<T: Real> Bindings<T> {
    pub fn new(q: Vec<T>, v: Vec<T>) -> Self {
        assert_eq!(q.len(), v.len(), "q and v must have the same length");
        Bindings { q: DVector::from_vec(q), v: DVector::from_vec(v), params: BTreeMap::new() }
    }

    pub fn from_vectors(q: DVector<T>, v: DVector<T>) -> Self {
        assert_eq!(q.len(), v.len(), "q and v must have the same length");
        Bindings { q, v, params: BTreeMap::new() }
    }

    pub fn with_param(mut self, name: &str, value: T) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// `(q, v)` stacked into one 2D-vector.
    pub fn state(&self) -> DVector<T> {
        let d = self.dim();
        DVector::from_fn(2 * d, |i, _| if i < d { self.q[i] } else { self.v[i - d] })
    }

    /// Same parameters, coordinates replaced by a stacked state.
    pub fn with_state(&self, state: &DVector<T>) -> Self {
        let d = self.dim();
        assert_eq!(state.len(), 2 * d);
        Bindings { q: state.rows(0, d).into_owned(), v: state.rows(d, d).into_owned(), params: self.params.clone() }
    }

    /// `self + h * dir` in the stacked coordinates.
    pub fn shifted(&self, dir: &DVector<T>, h: T) -> Self {
        let d = self.dim();
        let mut out = self.clone();
        for a in 0..d {
            out.q[a] += h * dir[a];
            out.v[a] += h * dir[d + a];
        }
        out
    }

    pub fn norm(&self) -> T {
        (self.q.norm_squared() + self.v.norm_squared()).sqrt()
    }

    pub fn coord(&self, c: Coord) -> Option<T> {
        match c.slot {
            Slot::Q => self.q.get(c.index).copied(),
            Slot::V | Slot::P => self.v.get(c.index).copied(),
        }
    }

    pub fn cast<U: Real>(&self) -> Bindings<U> {
        Bindings {
            q: self.q.map(|x| U::lit(x.as_f64())),
            v: self.v.map(|x| U::lit(x.as_f64())),
            params: self.params.iter().map(|(k, x)| (k.clone(), U::lit(x.as_f64()))).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("domain error in `{subtree}`: {reason}")]
    Domain { subtree: String, reason: String },
    #[error("unbound symbol `{0}`")]
    Unbound(String),
}

impl EvalError {
    fn domain(e: &Expr, reason: impl Into<String>) -> Self {
        EvalError::Domain { subtree: e.to_string(), reason: reason.into() }
    }
}

fn apply_unary<T: Real>(op: UnaryOp, x: T, src: &dyn Fn() -> Expr) -> Result<T, EvalError> {
    let zero = T::zero();
    let y = match op {
        UnaryOp::Neg => -x,
        UnaryOp::Sqrt => {
            if x < zero {
                return Err(EvalError::domain(&src(), format!("sqrt of negative value {x:e}")));
            }
            x.sqrt()
        }
        UnaryOp::Sin => x.sin(),
        UnaryOp::Cos => x.cos(),
        UnaryOp::Exp => x.exp(),
        UnaryOp::Ln => {
            if x <= zero {
                return Err(EvalError::domain(&src(), format!("ln of non-positive value {x:e}")));
            }
            x.ln()
        }
        UnaryOp::Abs => x.abs(),
        UnaryOp::Sign => {
            if x > zero {
                T::one()
            } else if x < zero {
                -T::one()
            } else {
                zero
            }
        }
    };
    if !y.finite() {
        return Err(EvalError::domain(&src(), "non-finite result"));
    }
    Ok(y)
}

fn apply_binary<T: Real>(
    op: BinaryOp,
    a: T,
    b: T,
    int_exponent: Option<i32>,
    src: &dyn Fn() -> Expr,
) -> Result<T, EvalError> {
    let zero = T::zero();
    let y = match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => {
            if b == zero {
                return Err(EvalError::domain(&src(), "division by zero"));
            }
            a / b
        }
        BinaryOp::Pow => match int_exponent {
            Some(n) => {
                if a == zero && n < 0 {
                    return Err(EvalError::domain(&src(), "zero raised to a negative power"));
                }
                a.powi(n)
            }
            None => {
                if a < zero {
                    return Err(EvalError::domain(&src(), format!("negative base {a:e} with non-integer exponent")));
                }
                if a == zero && b <= zero {
                    return Err(EvalError::domain(&src(), "zero raised to a non-positive power"));
                }
                a.powf(b)
            }
        },
    };
    if !y.finite() {
        return Err(EvalError::domain(&src(), "non-finite result"));
    }
    Ok(y)
}

fn integer_exponent(x: f64) -> Option<i32> {
    (x.fract() == 0.0 && x.abs() <= 64.0).then_some(x as i32)
}

/// Evaluate `e` at `b` by direct recursion.
pub fn evaluate<T: Real>(e: &Expr, b: &Bindings<T>) -> Result<T, EvalError> {
    match e.node() {
        Node::Const(c) => Ok(T::lit(*c)),
        Node::Param(name) => b.params.get(name.as_ref()).copied().ok_or_else(|| EvalError::Unbound(name.to_string())),
        Node::Coord(c) => b.coord(*c).ok_or_else(|| EvalError::Unbound(c.to_string())),
        Node::Unary(op, a) => {
            let x = evaluate(a, b)?;
            apply_unary(*op, x, &|| e.clone())
        }
        Node::Binary(op, l, r) => {
            let x = evaluate(l, b)?;
            if *op == BinaryOp::Pow {
                if let Some(n) = r.as_const().and_then(integer_exponent) {
                    return apply_binary(*op, x, T::zero(), Some(n), &|| e.clone());
                }
            }
            let y = evaluate(r, b)?;
            let ie = if *op == BinaryOp::Pow { exponent_if_integral(y) } else { None };
            apply_binary(*op, x, y, ie, &|| e.clone())
        }
    }
}

fn exponent_if_integral<T: Real>(y: T) -> Option<i32> {
    integer_exponent(y.as_f64())
}

#[derive(Debug, Clone)]
enum Instr {
    Const(f64),
    Param(usize),
    Coord(Coord),
    Unary(UnaryOp, usize),
    Binary(BinaryOp, usize, usize),
    PowI(usize, i32),
}

#[derive(Hash, PartialEq, Eq)]
enum Key {
    Const(u64),
    Param(Arc<str>),
    Coord(Coord),
    Unary(UnaryOp, usize),
    Binary(BinaryOp, usize, usize),
    PowI(usize, i32),
}

/// Straight-line program evaluating several expressions with common
/// subexpressions shared.
#[derive(Debug, Clone)]
pub struct Tape {
    instrs: Vec<Instr>,
    sources: Vec<Expr>,
    params: Vec<String>,
    outputs: Vec<usize>,
}

impl Tape {
    pub fn compile<'a>(exprs: impl IntoIterator<Item = &'a Expr>) -> Tape {
        let mut b = TapeBuilder::default();
        let outputs = exprs.into_iter().map(|e| b.emit(e)).collect();
        Tape { instrs: b.instrs, sources: b.sources, params: b.params, outputs }
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }

    pub fn eval<T: Real>(&self, b: &Bindings<T>) -> Result<Vec<T>, EvalError> {
        let mut out = vec![T::zero(); self.outputs.len()];
        self.eval_into(b, &mut out)?;
        Ok(out)
    }

    pub fn eval_into<T: Real>(&self, b: &Bindings<T>, out: &mut [T]) -> Result<(), EvalError> {
        assert_eq!(out.len(), self.outputs.len());
        let params: Vec<T> = self
            .params
            .iter()
            .map(|p| b.params.get(p).copied().ok_or_else(|| EvalError::Unbound(p.clone())))
            .collect::<Result<_, _>>()?;
        let mut regs: Vec<T> = Vec::with_capacity(self.instrs.len());
        for (i, ins) in self.instrs.iter().enumerate() {
            let src = || self.sources[i].clone();
            let y = match *ins {
                Instr::Const(c) => T::lit(c),
                Instr::Param(k) => params[k],
                Instr::Coord(c) => b.coord(c).ok_or_else(|| EvalError::Unbound(c.to_string()))?,
                Instr::Unary(op, a) => apply_unary(op, regs[a], &src)?,
                Instr::Binary(op, l, r) => {
                    let ie = if op == BinaryOp::Pow { exponent_if_integral(regs[r]) } else { None };
                    apply_binary(op, regs[l], regs[r], ie, &src)?
                }
                Instr::PowI(a, n) => apply_binary(BinaryOp::Pow, regs[a], T::zero(), Some(n), &src)?,
            };
            regs.push(y);
        }
        for (o, &slot) in out.iter_mut().zip(&self.outputs) {
            *o = regs[slot];
        }
        Ok(())
    }
}

#[derive(Default)]
struct TapeBuilder {
    instrs: Vec<Instr>,
    sources: Vec<Expr>,
    params: Vec<String>,
    by_ptr: HashMap<*const Node, usize>,
    by_key: HashMap<Key, usize>,
}

impl TapeBuilder {
    fn emit(&mut self, e: &Expr) -> usize {
        if let Some(&slot) = self.by_ptr.get(&e.ptr()) {
            return slot;
        }
        let (key, instr) = match e.node() {
            Node::Const(c) => (Key::Const(c.to_bits()), Instr::Const(*c)),
            Node::Param(name) => {
                let k = match self.params.iter().position(|p| **p == **name) {
                    Some(k) => k,
                    None => {
                        self.params.push(name.to_string());
                        self.params.len() - 1
                    }
                };
                (Key::Param(name.clone()), Instr::Param(k))
            }
            Node::Coord(c) => (Key::Coord(*c), Instr::Coord(*c)),
            Node::Unary(op, a) => {
                let a = self.emit(a);
                (Key::Unary(*op, a), Instr::Unary(*op, a))
            }
            Node::Binary(BinaryOp::Pow, a, r) if r.as_const().and_then(integer_exponent).is_some() => {
                let n = r.as_const().and_then(integer_exponent).unwrap();
                let a = self.emit(a);
                (Key::PowI(a, n), Instr::PowI(a, n))
            }
            Node::Binary(op, a, b) => {
                let a = self.emit(a);
                let b = self.emit(b);
                (Key::Binary(*op, a, b), Instr::Binary(*op, a, b))
            }
        };
        let slot = match self.by_key.get(&key) {
            Some(&slot) => slot,
            None => {
                self.instrs.push(instr);
                self.sources.push(e.clone());
                let slot = self.instrs.len() - 1;
                self.by_key.insert(key, slot);
                slot
            }
        };
        self.by_ptr.insert(e.ptr(), slot);
        slot
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    #[test]
    fn simple_sum() {
        let e = parse("q1+v1", 2, &[]).unwrap();
        let b = Bindings::new(vec![2.0, 0.0], vec![3.0, 0.0]);
        assert_eq!(evaluate::<f64>(&e, &b).unwrap(), 5.0);
    }

    #[test]
    fn sqrt_of_negative_reports_subtree() {
        let e = parse("1 + sqrt(q1)", 1, &[]).unwrap();
        let b = Bindings::new(vec![-1.0], vec![0.0]);
        match evaluate::<f64>(&e, &b).unwrap_err() {
            EvalError::Domain { subtree, .. } => assert_eq!(subtree, "sqrt(q1)"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn division_by_zero() {
        let e = parse("v1/q1", 1, &[]).unwrap();
        let b = Bindings::new(vec![0.0], vec![1.0]);
        assert!(matches!(evaluate::<f64>(&e, &b), Err(EvalError::Domain { .. })));
        assert!(Tape::compile([&e]).eval(&b).is_err());
    }

    #[test]
    fn integer_powers_of_negative_bases() {
        let e = parse("q1^3 + q1^(-2)", 1, &[]).unwrap();
        let b = Bindings::new(vec![-2.0], vec![0.0]);
        assert_eq!(evaluate::<f64>(&e, &b).unwrap(), -8.0 + 0.25);
        let e = parse("q1^0.5", 1, &[]).unwrap();
        assert!(evaluate::<f64>(&e, &b).is_err());
    }

    #[test]
    fn unbound_parameter() {
        let e = parse("m*q1", 1, &["m"]).unwrap();
        let b = Bindings::new(vec![1.0], vec![0.0]);
        assert_eq!(evaluate::<f64>(&e, &b), Err(EvalError::Unbound("m".into())));
    }

    #[test]
    fn tape_shares_subexpressions_and_matches_tree_walk() {
        let a = parse("sin(q1*v2)^2 + dot(q,q)*m", 2, &["m"]).unwrap();
        let b = parse("sin(q1*v2)^2/dot(q,q)", 2, &["m"]).unwrap();
        let tape = Tape::compile([&a, &b]);
        // shared: q1, v2, q1*v2, sin, ^2, q2, the dot product pieces
        assert!(tape.len() < a.size() + b.size());
        let pt = Bindings::new(vec![0.3, -1.2], vec![0.5, 2.0]).with_param("m", 1.5);
        let got = tape.eval(&pt).unwrap();
        assert_eq!(got[0], evaluate(&a, &pt).unwrap());
        assert_eq!(got[1], evaluate(&b, &pt).unwrap());
    }

    #[test]
    fn single_precision() {
        let e = parse("q1*v1 + 0.5", 1, &[]).unwrap();
        let b = Bindings::<f32>::new(vec![2.0], vec![0.25]);
        assert_eq!(evaluate(&e, &b).unwrap(), 1.0f32);
    }
}
