//! Symbolic tableau of a Lagrangian system and its pointwise evaluation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::{differentiate, Bindings, Coord, EvalError, Expr, Slot, Tape};
use crate::scalar::Real;

/// Parameter names treated as explicit time.
const TIME_NAMES: [&str; 2] = ["t", "time"];

/// A Lagrangian `L(q, v)` with its derived symbols, parameters substituted.
///
/// `m[a][b] = ∂²L/∂v^a∂v^b`, `n[a][b] = ∂²L/∂v^a∂q^b`, `f = n - nᵀ`.
#[derive(Debug, Clone)]
pub struct LagrangianSystem {
    pub name: String,
    pub dim: usize,
    pub params: BTreeMap<String, f64>,
    /// As supplied, parameters symbolic.
    pub lagrangian_source: Expr,
    pub lagrangian: Expr,
    pub energy: Expr,
    pub momenta: Vec<Expr>,
    pub m: Vec<Vec<Expr>>,
    pub f: Vec<Vec<Expr>>,
    pub n: Vec<Vec<Expr>>,
    pub de_dq: Vec<Expr>,
    pub de_dv: Vec<Expr>,
    tableau_tape: Tape,
    energy_tape: Tape,
    momenta_tape: Tape,
}

/// Pointwise image of the symbolic tableau.
#[derive(Debug, Clone)]
pub struct Tableau<T: Real = f64> {
    pub point: Bindings<T>,
    pub lagrangian: T,
    pub energy: T,
    pub momenta: DVector<T>,
    pub de_dq: DVector<T>,
    pub de_dv: DVector<T>,
    pub m: DMatrix<T>,
    pub f: DMatrix<T>,
    pub n: DMatrix<T>,
}

impl<T: Real> Tableau<T> {
    pub fn dim(&self) -> usize {
        self.point.dim()
    }

    /// Stacked differential `(∂E/∂q, ∂E/∂v)`.
    pub fn de(&self) -> DVector<T> {
        let d = self.dim();
        DVector::from_fn(2 * d, |i, _| if i < d { self.de_dq[i] } else { self.de_dv[i - d] })
    }

    /// Magnitude of the tableau entries, used to scale absolute tolerances.
    pub fn scale(&self) -> T {
        T::one() + self.de_dq.norm() + self.de_dv.norm() + self.m.norm() + self.f.norm()
    }
}

impl LagrangianSystem {
    pub fn build(name: &str, lagrangian: Expr, dim: usize, params: BTreeMap<String, f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("dimension must be at least 1".into()));
        }
        for p in lagrangian.params() {
            if TIME_NAMES.contains(&p.as_str()) {
                return Err(Error::NotAutonomous(p));
            }
            if !params.contains_key(&p) {
                return Err(Error::UnboundParameter(p));
            }
        }
        for c in lagrangian.coords() {
            if c.slot == Slot::P {
                return Err(Error::MomentumInLagrangian(c.to_string()));
            }
            if c.index >= dim {
                return Err(Error::Dimension { expected: dim, got: c.index + 1 });
            }
        }
        let l = lagrangian.substitute_params(&|p| params.get(p).copied());
        let dq = |e: &Expr, a: usize| differentiate(e, &Coord::q(a).into());
        let dv = |e: &Expr, a: usize| differentiate(e, &Coord::v(a).into());

        let momenta: Vec<Expr> = (0..dim).map(|a| dv(&l, a)).collect();
        let energy = (0..dim).map(|b| Expr::v(b) * momenta[b].clone()).fold(Expr::zero(), |acc, t| acc + t) - l.clone();
        // upper triangle, mirrored so that M is exactly symmetric
        let upper: Vec<Vec<Expr>> =
            momenta.iter().enumerate().map(|(a, pa)| (a..dim).map(|b| dv(pa, b)).collect()).collect();
        let m: Vec<Vec<Expr>> = (0..dim)
            .map(|a| (0..dim).map(|b| if b >= a { upper[a][b - a].clone() } else { upper[b][a - b].clone() }).collect())
            .collect();
        let n: Vec<Vec<Expr>> = (0..dim).map(|a| (0..dim).map(|b| dq(&momenta[a], b)).collect()).collect();
        let f: Vec<Vec<Expr>> = (0..dim).map(|a| (0..dim).map(|b| &n[a][b] - &n[b][a]).collect()).collect();
        let de_dq: Vec<Expr> = (0..dim).map(|a| dq(&energy, a)).collect();
        let de_dv: Vec<Expr> = (0..dim).map(|a| dv(&energy, a)).collect();

        let mut outputs: Vec<&Expr> = vec![&l, &energy];
        outputs.extend(&momenta);
        outputs.extend(&de_dq);
        outputs.extend(&de_dv);
        for mat in [&m, &f, &n] {
            outputs.extend(mat.iter().flatten());
        }
        let tableau_tape = Tape::compile(outputs);
        let energy_tape = Tape::compile([&energy]);
        let momenta_tape = Tape::compile(&momenta);

        Ok(LagrangianSystem {
            name: name.to_string(),
            dim,
            params,
            lagrangian_source: lagrangian,
            lagrangian: l,
            energy,
            momenta,
            m,
            f,
            n,
            de_dq,
            de_dv,
            tableau_tape,
            energy_tape,
            momenta_tape,
        })
    }

    fn check_dim<T: Real>(&self, point: &Bindings<T>) -> Result<()> {
        if point.dim() != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: point.dim() });
        }
        Ok(())
    }

    pub fn tableau<T: Real>(&self, point: &Bindings<T>) -> Result<Tableau<T>> {
        self.check_dim(point)?;
        let d = self.dim;
        let vals = self.tableau_tape.eval(point)?;
        let vec_at = |off: usize| DVector::from_fn(d, |i, _| vals[off + i]);
        let mat_at = |off: usize| DMatrix::from_fn(d, d, |i, j| vals[off + i * d + j]);
        Ok(Tableau {
            point: point.clone(),
            lagrangian: vals[0],
            energy: vals[1],
            momenta: vec_at(2),
            de_dq: vec_at(2 + d),
            de_dv: vec_at(2 + 2 * d),
            m: mat_at(2 + 3 * d),
            f: mat_at(2 + 3 * d + d * d),
            n: mat_at(2 + 3 * d + 2 * d * d),
        })
    }

    pub fn energy_at<T: Real>(&self, point: &Bindings<T>) -> Result<T> {
        self.check_dim(point)?;
        Ok(self.energy_tape.eval(point)?[0])
    }

    pub fn momenta_at<T: Real>(&self, point: &Bindings<T>) -> Result<DVector<T>> {
        self.check_dim(point)?;
        Ok(DVector::from_vec(self.momenta_tape.eval(point)?))
    }

    pub fn lagrangian_at<T: Real>(&self, point: &Bindings<T>) -> Result<T, EvalError> {
        crate::expr::evaluate(&self.lagrangian, point)
    }

    /// Substitute this system's parameter values into an auxiliary
    /// expression (multipliers, primary constraint candidates).
    pub fn bind_params(&self, e: &Expr) -> Result<Expr> {
        let out = e.substitute_params(&|p| self.params.get(p).copied());
        match out.params().into_iter().next() {
            Some(p) => Err(Error::UnboundParameter(p)),
            None => Ok(out),
        }
    }
}
