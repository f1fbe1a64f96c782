//! Second-order vector fields on velocity phase space and their flows.

use std::fmt::Write as _;

use nalgebra::DVector;
use serde::Serialize;

use crate::constraints::{self, Analyzer, ConstraintLedger, Status};
use crate::error::{Error, Result};
use crate::expr::{Bindings, Expr, Tape};
use crate::presym::{kernel_basis, KernelData, Tolerances};
use crate::system::{LagrangianSystem, Tableau};

fn check_on_surface(kd: &KernelData, tab: &Tableau, tol: &Tolerances) -> Result<()> {
    let residual = constraints::gamma1_projected(kd, tab).norm();
    if residual > tol.eps_constraint {
        return Err(Error::OffSurface { residual });
    }
    Ok(())
}

fn check_almost_regular(kd: &KernelData, tol: &Tolerances) -> Result<()> {
    if kd.fbar_norm > tol.eps_constraint {
        return Err(Error::NotAlmostRegular { fbar_norm: kd.fbar_norm });
    }
    Ok(())
}

/// `X_L = (v, a)` with the minimal-norm acceleration.
pub fn solvf(kd: &KernelData, tab: &Tableau, tol: &Tolerances) -> Result<DVector<f64>> {
    check_on_surface(kd, tab, tol)?;
    Ok(constraints::solvf_unchecked(kd, tab))
}

/// `X̄_L`: `X_L` with its components along the `P_(n)` removed.
pub fn barred_solvf(kd: &KernelData, tab: &Tableau, tol: &Tolerances) -> Result<DVector<f64>> {
    check_on_surface(kd, tab, tol)?;
    check_almost_regular(kd, tol)?;
    Ok(constraints::xbar_unchecked(kd, tab))
}

/// `X̄_L + Σ u^m P_(m)` in the kernel basis of `kd`.
pub fn soelvf(kd: &KernelData, tab: &Tableau, tol: &Tolerances, u: &[f64]) -> Result<DVector<f64>> {
    if u.len() != kd.n0 {
        return Err(Error::Dimension { expected: kd.n0, got: u.len() });
    }
    let mut x = barred_solvf(kd, tab, tol)?;
    for (um, pm) in u.iter().zip(&kd.p) {
        x += pm * *um;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    Solvf,
    Barred,
    Soelvf,
    Kernel,
    HamiltonianPullback,
}

type FieldFn<'a> = dyn Fn(&Bindings) -> Result<DVector<f64>> + Send + Sync + 'a;

/// A vector field on `(q, v)` space evaluated pointwise.
pub struct VectorField<'a> {
    pub label: String,
    pub kind: FieldKind,
    eval: Box<FieldFn<'a>>,
}

impl std::fmt::Debug for VectorField<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VectorField").field("label", &self.label).field("kind", &self.kind).finish()
    }
}

impl<'a> VectorField<'a> {
    pub fn new(
        label: impl Into<String>,
        kind: FieldKind,
        eval: impl Fn(&Bindings) -> Result<DVector<f64>> + Send + Sync + 'a,
    ) -> Self {
        VectorField { label: label.into(), kind, eval: Box::new(eval) }
    }

    pub fn eval(&self, pt: &Bindings) -> Result<DVector<f64>> {
        (self.eval)(pt)
    }

    /// The minimal-norm SOLVF, evaluated without the surface check so that
    /// flows may wander within integration error of the surface.
    pub fn solvf(sys: &'a LagrangianSystem, tol: Tolerances) -> Self {
        VectorField::new("X_L", FieldKind::Solvf, move |pt| {
            let tab = sys.tableau(pt)?;
            let kd = kernel_basis(&tab, &tol);
            Ok(constraints::solvf_unchecked(&kd, &tab))
        })
    }

    pub fn barred(sys: &'a LagrangianSystem, tol: Tolerances) -> Self {
        VectorField::new("Xbar_L", FieldKind::Barred, move |pt| {
            let tab = sys.tableau(pt)?;
            let kd = kernel_basis(&tab, &tol);
            check_almost_regular(&kd, &tol)?;
            Ok(constraints::xbar_unchecked(&kd, &tab))
        })
    }

    /// `K(w)` for a fixed horizontal direction `w`.
    pub fn kernel(sys: &'a LagrangianSystem, tol: Tolerances, w: DVector<f64>) -> Self {
        VectorField::new("K", FieldKind::Kernel, move |pt| {
            let tab = sys.tableau(pt)?;
            let kd = kernel_basis(&tab, &tol);
            Ok(crate::presym::kernel_vector(&kd, &tab, &w))
        })
    }

    /// The SOELVF left by the constraint algorithm: `X̄_L` plus the
    /// determined kernel components, plus `K(Q w)` for the free multipliers
    /// `w` given as D expressions (zero when `None`).
    pub fn euler_lagrange(sys: &'a LagrangianSystem, ledger: &ConstraintLedger, free: Option<&[Expr]>) -> Result<Self> {
        if ledger.status == Status::Inconsistent {
            return Err(Error::Invalid("constraint algorithm ended inconsistent; no SOELVF exists".into()));
        }
        let an = ledger.analyzer(sys);
        let level = ledger.n_f;
        let tape = match free {
            None => None,
            Some(w) => {
                if w.len() != sys.dim {
                    return Err(Error::Dimension { expected: sys.dim, got: w.len() });
                }
                let bound = w.iter().map(|e| sys.bind_params(e)).collect::<Result<Vec<_>>>()?;
                Some(Tape::compile(&bound))
            }
        };
        Ok(VectorField::new("Xbar_EL", FieldKind::Soelvf, move |pt| {
            let s = an.level(pt, level)?;
            let w = match &tape {
                None => DVector::zeros(pt.dim()),
                Some(t) => DVector::from_vec(t.eval(pt)?),
            };
            Ok(s.soelvf(&w))
        }))
    }
}

/// Lie bracket `[X, Y] = DY·X − DX·Y` by central differences with step
/// `1e-5 (1 + ‖pt‖)`.
pub fn commutator(x: &VectorField, y: &VectorField, pt: &Bindings) -> Result<DVector<f64>> {
    let h = 1e-5 * (1.0 + pt.norm());
    let xv = x.eval(pt)?;
    let yv = y.eval(pt)?;
    let dy_x = crate::fd::directional2(&mut |b| y.eval(b), pt, &xv, h)?;
    let dx_y = crate::fd::directional2(&mut |b| x.eval(b), pt, &yv, h)?;
    Ok(dy_x - dx_y)
}

/// One classic Runge-Kutta step of `ẋ = f(x)`.
pub fn rk4_step(
    f: &mut dyn FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    x: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    let k1 = f(x)?;
    let k2 = f(&(x + &k1 * (dt / 2.0)))?;
    let k3 = f(&(x + &k2 * (dt / 2.0)))?;
    let k4 = f(&(x + &k3 * dt))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Past this state norm a flow is reported as divergent.
pub const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegrationOptions {
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
    /// Gauss-Newton re-projection onto the constraint surface after each step.
    pub project: bool,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        IntegrationOptions { t0: 0.0, t1: 1.0, dt: 1e-3, project: false }
    }
}

/// Time series of `(q, v)` states with per-step diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub dim: usize,
    pub times: Vec<f64>,
    /// `(q, v)` stacked.
    pub states: Vec<Vec<f64>>,
    pub energy: Vec<f64>,
    /// `E(t) − E(t0)`.
    pub energy_drift: Vec<f64>,
    /// Stacked constraint residuals `g_1 … g_k` at each state.
    pub residuals: Vec<Vec<f64>>,
    /// Step taken to reach each state (zero for the first).
    pub steps: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn point(&self, i: usize) -> Bindings {
        let s = &self.states[i];
        Bindings::new(s[..self.dim].to_vec(), s[self.dim..].to_vec())
    }

    pub fn max_energy_drift(&self) -> f64 {
        self.energy_drift.iter().fold(0.0f64, |m, e| m.max(e.abs()))
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().flatten().fold(0.0f64, |m, e| m.max(e.abs()))
    }

    /// Columns `t, q1.., v1.., E, g1..`.
    pub fn to_csv(&self) -> String {
        let d = self.dim;
        let mut out = String::from("t");
        for a in 1..=d {
            let _ = write!(out, ",q{a}");
        }
        for a in 1..=d {
            let _ = write!(out, ",v{a}");
        }
        out.push_str(",E");
        let nres = self.residuals.first().map_or(0, Vec::len);
        for k in 1..=nres {
            let _ = write!(out, ",g{k}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{:e}", self.times[i]);
            for x in &self.states[i] {
                let _ = write!(out, ",{x:e}");
            }
            let _ = write!(out, ",{:e}", self.energy[i]);
            for g in &self.residuals[i] {
                let _ = write!(out, ",{g:e}");
            }
            out.push('\n');
        }
        out
    }
}

/// The constraint surface a flow is meant to stay on: an analyzer and the
/// level whose stacked residuals are monitored and projected.
#[derive(Debug, Clone, Copy)]
pub struct Surface<'s, 'a> {
    pub analyzer: &'s Analyzer<'a>,
    pub level: usize,
}

/// Fixed-step RK4 integration of `field` from `start`.
pub fn integrate(
    sys: &LagrangianSystem,
    field: &VectorField,
    start: &Bindings,
    surface: Option<Surface>,
    opts: &IntegrationOptions,
) -> Result<Trajectory> {
    let grid_ok = opts.dt > 0.0 && opts.t1 >= opts.t0;
    if !grid_ok {
        return Err(Error::Invalid(format!("bad time grid t0={} t1={} dt={}", opts.t0, opts.t1, opts.dt)));
    }
    let d = sys.dim;
    let residual_at = |pt: &Bindings| -> Result<Vec<f64>> {
        Ok(match surface {
            Some(s) => s.analyzer.residual(pt, s.level)?.iter().copied().collect(),
            None => {
                let tab = sys.tableau(pt)?;
                let kd = kernel_basis(&tab, &Tolerances::default());
                constraints::gamma1_projected(&kd, &tab).iter().copied().collect()
            }
        })
    };
    let e0 = sys.energy_at(start)?;
    let mut traj = Trajectory {
        dim: d,
        times: vec![opts.t0],
        states: vec![start.state().iter().copied().collect()],
        energy: vec![e0],
        energy_drift: vec![0.0],
        residuals: vec![residual_at(start)?],
        steps: vec![0.0],
    };
    let n = ((opts.t1 - opts.t0) / opts.dt).round() as usize;
    let mut x = start.state();
    let mut f = |s: &DVector<f64>| field.eval(&start.with_state(s));
    for i in 1..=n {
        let t = opts.t0 + i as f64 * opts.dt;
        x = rk4_step(&mut f, &x, opts.dt)?;
        if !x.iter().all(|c| c.is_finite()) || x.norm() > DIVERGENCE_NORM {
            return Err(Error::Divergence { t });
        }
        let mut pt = start.with_state(&x);
        if opts.project {
            if let Some(s) = surface {
                pt = s.analyzer.find_surface_point(&pt, s.level)?;
                x = pt.state();
            }
        }
        let e = sys.energy_at(&pt)?;
        traj.times.push(t);
        traj.states.push(x.iter().copied().collect());
        traj.energy.push(e);
        traj.energy_drift.push(e - e0);
        traj.residuals.push(residual_at(&pt)?);
        traj.steps.push(opts.dt);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::presym::omega_matrix;
    use nalgebra::DMatrix;

    fn system(l: &str, dim: usize, params: &[(&str, f64)]) -> LagrangianSystem {
        let names: Vec<&str> = params.iter().map(|p| p.0).collect();
        let expr = parse(l, dim, &names).unwrap();
        LagrangianSystem::build("t", expr, dim, params.iter().map(|(k, v)| (k.to_string(), *v)).collect()).unwrap()
    }

    const KIN: &str = "m/2*(dot(v,v)/dot(q,q) - dot(q,v)^2/dot(q,q)^2)";

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    fn pi(q: &DVector<f64>) -> DMatrix<f64> {
        let qh = q / q.norm();
        DMatrix::identity(q.len(), q.len()) - &qh * qh.transpose()
    }

    #[test]
    fn free_particle_is_exact() {
        let sys = system("dot(v,v)/2", 2, &[]);
        let start = Bindings::new(vec![0.3, -0.2], vec![1.0, 0.5]);
        let field = VectorField::solvf(&sys, tol());
        let opts = IntegrationOptions { t0: 0.0, t1: 1.0, dt: 1e-3, project: false };
        let traj = integrate(&sys, &field, &start, None, &opts).unwrap();
        let end = traj.point(traj.len() - 1);
        let expect = &start.q + &start.v;
        assert!((end.q - expect).amax() < 1e-9);
        assert!(traj.max_energy_drift() < 1e-14);
    }

    #[test]
    fn regular_acceleration_is_newton() {
        let sys = system("dot(v,v)/2 - q1^2*q2", 2, &[]);
        let pt = Bindings::new(vec![0.7, -0.4], vec![0.1, 0.2]);
        let tab = sys.tableau(&pt).unwrap();
        let kd = kernel_basis(&tab, &tol());
        let x = solvf(&kd, &tab, &tol()).unwrap();
        assert!((x[2] + 2.0 * 0.7 * -0.4).abs() < 1e-12);
        assert!((x[3] + 0.49).abs() < 1e-12);
    }

    #[test]
    fn solvf_refuses_off_surface() {
        let sys =
            system(&format!("{KIN} + lam/2*dot(q,q) - b/4*dot(q,q)^2"), 2, &[("m", 1.0), ("lam", 1.0), ("b", 1.0)]);
        let tab = sys.tableau(&Bindings::new(vec![2.0, 0.0], vec![0.2, 0.7])).unwrap();
        let kd = kernel_basis(&tab, &tol());
        assert!(matches!(solvf(&kd, &tab, &tol()), Err(Error::OffSurface { .. })));
    }

    #[test]
    fn conformal_solvf_solves_the_energy_equation() {
        let sys = system(KIN, 2, &[("m", 1.0)]);
        let pt = Bindings::new(vec![0.8, -0.3], vec![0.4, 0.9]);
        let tab = sys.tableau(&pt).unwrap();
        let kd = kernel_basis(&tab, &tol());
        let x = solvf(&kd, &tab, &tol()).unwrap();
        let a = x.rows(2, 2).into_owned();
        let r = &tab.m * a + &tab.de_dq + &tab.f * &pt.v;
        assert!(r.amax() < 1e-9);
        assert!(constraints::beta_residual(&tab, &x).amax() < 1e-9);
    }

    #[test]
    fn barred_field_matches_closed_form() {
        // V = q1 + 0.3 q1 q2/|q|^2 on its first constraint surface
        let sys = system(&format!("{KIN} - (q1 + 0.3*q1*q2/dot(q,q))"), 2, &[("m", 1.0)]);
        let an = Analyzer::new(&sys, tol(), 1);
        let dv = |q: &DVector<f64>| {
            let r2 = q.norm_squared();
            DVector::from_vec(vec![
                1.0 + 0.3 * q[1] / r2 - 0.6 * q[0] * q[0] * q[1] / (r2 * r2),
                0.3 * q[0] / r2 - 0.6 * q[0] * q[1] * q[1] / (r2 * r2),
            ])
        };
        for i in 0..20 {
            let t = i as f64 * 0.3;
            let seed = Bindings::new(vec![0.5 + t.cos(), 0.4 * t.sin() - 1.0], vec![0.3 * t, 0.7 - 0.1 * t]);
            let pt = an.find_surface_point(&seed, 1).unwrap();
            let tab = sys.tableau(&pt).unwrap();
            let kd = kernel_basis(&tab, &tol());
            let x = barred_solvf(&kd, &tab, &tol()).unwrap();
            let (q, v) = (&pt.q, &pt.v);
            let r = q.norm();
            let p = pi(q);
            let xq = &p * v;
            let xv = &p * v * (q.dot(v) / (r * r)) - &p * dv(q) * (r * r);
            assert!((x.rows(0, 2) - xq).amax() < 1e-8, "{i}");
            assert!((x.rows(2, 2) - xv).amax() < 1e-8, "{i}");
        }
    }

    #[test]
    fn fully_constrained_barred_field_vanishes() {
        let sys = system("s*m*sqrt(s*(dot(v,v)/dot(q,q) - dot(q,v)^2/dot(q,q)^2))", 3, &[("m", 1.0), ("s", 1.0)]);
        for i in 0..10 {
            let t = i as f64;
            let pt = Bindings::new(vec![1.0, 0.2 * t, 0.3], vec![0.3, -0.5, 0.8 + 0.1 * t]);
            let tab = sys.tableau(&pt).unwrap();
            let kd = kernel_basis(&tab, &tol());
            assert!(barred_solvf(&kd, &tab, &tol()).unwrap().norm() < 1e-8);
        }
    }

    #[test]
    fn soelvf_is_second_order_modulo_kernel() {
        let sys = system(KIN, 2, &[("m", 1.0)]);
        let pt = Bindings::new(vec![0.8, -0.3], vec![0.4, 0.9]);
        let tab = sys.tableau(&pt).unwrap();
        let kd = kernel_basis(&tab, &tol());
        assert_eq!(soelvf(&kd, &tab, &tol(), &[0.0]).unwrap(), barred_solvf(&kd, &tab, &tol()).unwrap());
        let x = soelvf(&kd, &tab, &tol(), &[1.7]).unwrap();
        let horiz = x.rows(0, 2) - &pt.v;
        let off = (DMatrix::identity(2, 2) - &kd.pker_m) * horiz;
        assert!(off.amax() < 1e-8);
        assert!(matches!(soelvf(&kd, &tab, &tol(), &[1.0, 2.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn commutator_of_a_field_with_itself_vanishes() {
        let sys = system(&format!("{KIN} - q1"), 2, &[("m", 1.0)]);
        let x = VectorField::solvf(&sys, tol());
        let pt = Bindings::new(vec![0.8, -0.3], vec![0.4, 0.9]);
        assert!(commutator(&x, &x, &pt).unwrap().amax() < 1e-6);
        let c1 = VectorField::new("c1", FieldKind::Kernel, |_| Ok(DVector::from_vec(vec![1.0, 0.0, 2.0, 0.0])));
        let c2 = VectorField::new("c2", FieldKind::Kernel, |_| Ok(DVector::from_vec(vec![0.0, 3.0, 0.0, 1.0])));
        assert!(commutator(&c1, &c2, &pt).unwrap().amax() < 1e-12);
    }

    #[test]
    fn conformal_symmetry_does_not_preserve_the_solvf() {
        // [X_L, U^v] + P lies in ker Ω
        let sys = system(KIN, 2, &[("m", 1.0)]);
        let xl = VectorField::solvf(&sys, tol());
        let uv = VectorField::new("Uv", FieldKind::Kernel, |b: &Bindings| {
            let qh = &b.q / b.q.norm();
            Ok(constraints::stack(&DVector::zeros(2), &qh))
        });
        for i in 0..10 {
            let t = i as f64 * 0.7;
            let pt = Bindings::new(vec![0.9 * t.cos(), 0.9 * t.sin() + 0.2], vec![0.4 - 0.1 * t, 0.9]);
            let tab = sys.tableau(&pt).unwrap();
            let kd = kernel_basis(&tab, &tol());
            let c = commutator(&xl, &uv, &pt).unwrap() + &kd.p[0] * (1.0 / pt.q.norm());
            let contraction = omega_matrix(&tab) * c;
            assert!(contraction.amax() < 1e-6, "{i}: {contraction}");
        }
    }

    #[test]
    fn barred_field_is_projectable() {
        let sys =
            system(&format!("{KIN} + lam/2*dot(q,q) - b/4*dot(q,q)^2"), 2, &[("m", 1.0), ("lam", 1.0), ("b", 1.0)]);
        let an = Analyzer::new(&sys, tol(), 1);
        let xbar = VectorField::barred(&sys, tol());
        for i in 0..10 {
            let t = i as f64 * 0.6;
            let seed = Bindings::new(vec![1.1 * t.cos(), 1.1 * t.sin()], vec![0.3 + 0.05 * t, -0.4]);
            let pt = an.find_surface_point(&seed, 1).unwrap();
            let tab = sys.tableau(&pt).unwrap();
            let kd = kernel_basis(&tab, &tol());
            for g in &kd.g {
                let gv = g.clone();
                let sys = &sys;
                let gf = VectorField::new("G", FieldKind::Kernel, move |b: &Bindings| {
                    // G = (0, P_kerM 𝔷) transported by the projector at b
                    let tb = sys.tableau(b)?;
                    let pk = kernel_basis(&tb, &Tolerances::default()).pker_m;
                    Ok(constraints::stack(&DVector::zeros(2), &(pk * gv.rows(2, 2))))
                });
                let c = commutator(&gf, &xbar, &pt).unwrap();
                let horiz = (DMatrix::identity(2, 2) - &kd.pker_m) * c.rows(0, 2);
                assert!(horiz.amax() < 1e-5, "{i}: {horiz}");
            }
        }
    }

    #[test]
    fn hat_flow_stays_on_the_circle() {
        let sys =
            system(&format!("{KIN} + lam/2*dot(q,q) - b/4*dot(q,q)^2"), 2, &[("m", 1.0), ("lam", 1.0), ("b", 1.0)]);
        let an = Analyzer::new(&sys, tol(), 1).with_ranks(vec![1]);
        let start = an.find_surface_point(&Bindings::new(vec![2.0, 0.0], vec![0.2, 0.7]), 2).unwrap();
        let field = VectorField::barred(&sys, tol());
        let opts = IntegrationOptions { t0: 0.0, t1: 10.0, dt: 1e-2, project: true };
        let traj = integrate(&sys, &field, &start, Some(Surface { analyzer: &an, level: 2 }), &opts).unwrap();
        let drift = (0..traj.len()).map(|i| (traj.point(i).q.norm() - 1.0).abs()).fold(0.0, f64::max);
        assert!(drift <= 1e-6, "{drift}");
        assert!(traj.max_energy_drift() < 1e-6);
    }

    #[test]
    fn csv_has_one_row_per_state() {
        let sys = system("dot(v,v)/2", 1, &[]);
        let field = VectorField::solvf(&sys, tol());
        let opts = IntegrationOptions { t0: 0.0, t1: 0.01, dt: 1e-3, project: false };
        let traj = integrate(&sys, &field, &Bindings::new(vec![0.0], vec![1.0]), None, &opts).unwrap();
        let csv = traj.to_csv();
        assert_eq!(csv.lines().next(), Some("t,q1,v1,E,g1"));
        assert_eq!(csv.lines().count(), 12);
    }

    #[test]
    fn bad_grid_is_rejected() {
        let sys = system("dot(v,v)/2", 1, &[]);
        let field = VectorField::solvf(&sys, tol());
        let opts = IntegrationOptions { t0: 0.0, t1: 1.0, dt: 0.0, project: false };
        assert!(integrate(&sys, &field, &Bindings::new(vec![0.0], vec![1.0]), None, &opts).is_err());
    }
}
