use std::collections::HashMap;

use super::{BinaryOp, Expr, Node, Symbol, UnaryOp};

/// Exact partial derivative of `e` with respect to `wrt`, built with the
/// simplifying constructors. Shared subtrees are differentiated once.
pub fn differentiate(e: &Expr, wrt: &Symbol) -> Expr {
    let mut memo = HashMap::new();
    d(e, wrt, &mut memo)
}

fn d(e: &Expr, wrt: &Symbol, memo: &mut HashMap<*const Node, Expr>) -> Expr {
    if let Some(hit) = memo.get(&e.ptr()) {
        return hit.clone();
    }
    let out = match e.node() {
        Node::Const(_) => Expr::zero(),
        Node::Param(name) => match wrt {
            Symbol::Param(w) if w == name => Expr::one(),
            _ => Expr::zero(),
        },
        Node::Coord(c) => match wrt {
            Symbol::Coord(w) if w == c => Expr::one(),
            _ => Expr::zero(),
        },
        Node::Unary(op, a) => {
            let da = d(a, wrt, memo);
            if da.is_zero() {
                Expr::zero()
            } else {
                match op {
                    UnaryOp::Neg => -da,
                    UnaryOp::Sqrt => da / (Expr::constant(2.0) * e.clone()),
                    UnaryOp::Sin => a.clone().cos() * da,
                    UnaryOp::Cos => -(a.clone().sin()) * da,
                    UnaryOp::Exp => e.clone() * da,
                    UnaryOp::Ln => da / a.clone(),
                    UnaryOp::Abs => Expr::unary(UnaryOp::Sign, a.clone()) * da,
                    UnaryOp::Sign => Expr::zero(),
                }
            }
        }
        Node::Binary(op, a, b) => {
            let da = d(a, wrt, memo);
            let db = d(b, wrt, memo);
            match op {
                BinaryOp::Add => da + db,
                BinaryOp::Sub => da - db,
                BinaryOp::Mul => &da * b + a * &db,
                BinaryOp::Div => {
                    if db.is_zero() {
                        da / b.clone()
                    } else {
                        (&da * b - a * &db) / (b * b)
                    }
                }
                BinaryOp::Pow => pow_rule(e, a, b, da, db),
            }
        }
    };
    memo.insert(e.ptr(), out.clone());
    out
}

fn pow_rule(e: &Expr, a: &Expr, b: &Expr, da: Expr, db: Expr) -> Expr {
    if db.is_zero() {
        if da.is_zero() {
            return Expr::zero();
        }
        // power rule; the exponent may be any expression free of wrt
        let reduced = match b.as_const() {
            Some(c) => a.clone().powf(c - 1.0),
            None => a.clone().pow(b - &Expr::one()),
        };
        return b * &reduced * da;
    }
    // a^b * (b' ln a + b a'/a)
    let log_term = db * a.clone().ln();
    if da.is_zero() {
        e * &log_term
    } else {
        e * &(log_term + b * &da / a.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{evaluate, parse, Bindings, Coord};

    #[test]
    fn derivative_of_half_square() {
        let e = parse("v1^2/2", 1, &[]).unwrap();
        let de = differentiate(&e, &Coord::v(0).into());
        assert_eq!(de.to_string(), "v1");
    }

    #[test]
    fn independent_symbol_is_zero() {
        let e = parse("q1*q2", 3, &[]).unwrap();
        assert_eq!(differentiate(&e, &Coord::q(2).into()), Expr::zero());
    }

    #[test]
    fn chain_rule_sin_product() {
        let e = parse("sin(q1*v1)", 1, &[]).unwrap();
        let de = differentiate(&e, &Coord::q(0).into());
        let b = Bindings::new(vec![0.7], vec![1.3]);
        let got: f64 = evaluate(&de, &b).unwrap();
        let expected = 1.3 * (0.7f64 * 1.3).cos();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn parameter_derivative() {
        let e = parse("m*v1^2/2", 1, &["m"]).unwrap();
        let de = differentiate(&e, &Symbol::Param("m".into()));
        let b = Bindings::new(vec![0.0], vec![3.0]).with_param("m", 2.0);
        assert_eq!(evaluate::<f64>(&de, &b).unwrap(), 4.5);
    }

    #[test]
    fn abs_derivative_is_sign() {
        let e = parse("abs(q1)", 1, &[]).unwrap();
        let de = differentiate(&e, &Coord::q(0).into());
        for (x, s) in [(-2.0, -1.0), (0.0, 0.0), (3.0, 1.0)] {
            let b = Bindings::new(vec![x], vec![0.0]);
            assert_eq!(evaluate::<f64>(&de, &b).unwrap(), s);
        }
    }

    #[test]
    fn variable_exponent() {
        let e = parse("q1^v1", 1, &[]).unwrap();
        let dq = differentiate(&e, &Coord::q(0).into());
        let dv = differentiate(&e, &Coord::v(0).into());
        let b = Bindings::new(vec![1.7], vec![0.6]);
        let (x, y) = (1.7f64, 0.6f64);
        assert!((evaluate::<f64>(&dq, &b).unwrap() - y * x.powf(y - 1.0)).abs() < 1e-14);
        assert!((evaluate::<f64>(&dv, &b).unwrap() - x.powf(y) * x.ln()).abs() < 1e-14);
    }
}
