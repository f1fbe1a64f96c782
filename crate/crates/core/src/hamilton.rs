//! The canonical side: Legendre map, preimage fibers, projectability,
//! pushforwards, primary constraints and the Lagrangian/Hamiltonian
//! equivalence checks.
//!
//! Canonical tangent vectors are `(δq, δp)`; the canonical two-form acts as
//! `ω(X, Y) = Xᵀ J Y` with `J = [[0, I], [−I, 0]]`, so `i_X ω = (−δp, δq)`
//! and `ℒ*ω` is the `Ω` of the presym module.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::constraints::{self, ConstraintLedger};
use crate::dynamics::{rk4_step, IntegrationOptions, Trajectory, VectorField, DIVERGENCE_NORM};
use crate::error::{Error, Result};
use crate::expr::{differentiate, Bindings, Coord, Expr, Tape};
use crate::linalg::{lstsq, SortedSvd};
use crate::presym::{kernel_basis, Tolerances};
use crate::sampling::{ranks_at, Rng};
use crate::system::{LagrangianSystem, Tableau};

/// A point `(q, p)` of canonical phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalPoint {
    pub q: DVector<f64>,
    pub p: DVector<f64>,
}

impl CanonicalPoint {
    pub fn from_state(state: &DVector<f64>) -> Self {
        let d = state.len() / 2;
        CanonicalPoint { q: state.rows(0, d).into_owned(), p: state.rows(d, d).into_owned() }
    }

    pub fn state(&self) -> DVector<f64> {
        constraints::stack(&self.q, &self.p)
    }

    /// Bindings for canonical expressions: `p` symbols read the second slot.
    pub fn bindings(&self) -> Bindings {
        Bindings::from_vectors(self.q.clone(), self.p.clone())
    }
}

pub fn legendre(sys: &LagrangianSystem, pt: &Bindings) -> Result<CanonicalPoint> {
    Ok(CanonicalPoint { q: pt.q.clone(), p: sys.momenta_at(pt)? })
}

/// Momentum mismatch accepted by [`inverse_legendre`], relative to `1 + ‖p‖`.
/// Stage points of a canonical RK4 step sit off the image of `ℒ` by the
/// square of the stage length, so this is looser than roundoff.
pub const LEGENDRE_TOL: f64 = 1e-6;

const LEGENDRE_MAX_ITER: usize = 60;

/// A point `(q, v)` with `∂L/∂v = p`, by minimal-norm Gauss-Newton in `v`
/// started from `guess` (which fixes the representative in the fiber).
/// Off the image of `ℒ` this returns the least-squares preimage.
pub fn inverse_legendre(
    sys: &LagrangianSystem,
    tol: &Tolerances,
    s: &CanonicalPoint,
    guess: &Bindings,
) -> Result<Bindings> {
    let mut pt = Bindings { q: s.q.clone(), v: guess.v.clone(), params: guess.params.clone() };
    let scale = 1.0 + s.p.norm();
    let mut r = sys.momenta_at(&pt)? - &s.p;
    for _ in 0..LEGENDRE_MAX_ITER {
        if r.norm() <= 1e-14 * scale {
            break;
        }
        let tab = sys.tableau(&pt)?;
        let svd = SortedSvd::new(&tab.m);
        let dv = -(svd.pinv(svd.rank(tol.eps_rank)) * &r);
        let mut t = 1.0;
        let mut improved = false;
        while t > 1.0 / 64.0 {
            let trial = Bindings { v: &pt.v + &dv * t, ..pt.clone() };
            if let Ok(rt) = sys.momenta_at(&trial).map(|p| p - &s.p) {
                if rt.norm() < r.norm() {
                    pt = trial;
                    r = rt;
                    improved = true;
                    break;
                }
            }
            t /= 2.0;
        }
        if !improved || dv.norm() * t <= 1e-15 * (1.0 + pt.v.norm()) {
            break;
        }
    }
    if r.norm() > LEGENDRE_TOL * scale || !r.norm().is_finite() {
        return Err(Error::LegendreInverse { residual: r.norm() });
    }
    Ok(pt)
}

/// Momentum drift beyond which a fiber sample is rejected.
pub const FIBER_DRIFT_TOL: f64 = 1e-7;
const FIBER_SUBSTEPS: usize = 64;
const FIBER_ATTEMPTS: usize = 8;

/// Flow `ε` along `dv/dε = P_kerM c` from `pt`, `q` fixed.
fn fiber_flow(sys: &LagrangianSystem, tol: &Tolerances, pt: &Bindings, c: &DVector<f64>, eps: f64) -> Result<Bindings> {
    let h = eps / FIBER_SUBSTEPS as f64;
    let mut v = pt.v.clone();
    let mut f = |v: &DVector<f64>| -> Result<DVector<f64>> {
        let b = Bindings { v: v.clone(), ..pt.clone() };
        let tab = sys.tableau(&b)?;
        Ok(kernel_basis(&tab, tol).pker_m * c)
    };
    for _ in 0..FIBER_SUBSTEPS {
        v = rk4_step(&mut f, &v, h)?;
    }
    Ok(Bindings { v, ..pt.clone() })
}

/// `n` points sharing the Legendre image of `pt` (the first is `pt`), by
/// flowing along random vertical kernel directions for `ε ∈ [−0.5, 0.5]`.
/// Directions are scaled by `‖v‖` so fibers of homogeneous Lagrangians are
/// sampled at a comparable relative size.
pub fn preimage_samples(
    sys: &LagrangianSystem,
    tol: &Tolerances,
    pt: &Bindings,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<Bindings>> {
    let p0 = sys.momenta_at(pt)?;
    let reference = ranks_at(sys, tol, pt);
    let d = pt.dim();
    let scale = 0.5 * (1.0 + pt.v.norm());
    let mut out = vec![pt.clone()];
    let mut worst = 0.0f64;
    while out.len() < n.max(1) {
        let mut accepted = None;
        for _ in 0..FIBER_ATTEMPTS {
            let c = DVector::from_fn(d, |_, _| StandardNormal.sample(rng)) * scale / d as f64;
            let eps: f64 = rng.random_range(-0.5..=0.5);
            let Ok(s) = fiber_flow(sys, tol, pt, &c, eps) else { continue };
            if ranks_at(sys, tol, &s) != reference {
                continue;
            }
            let drift = (sys.momenta_at(&s)? - &p0).norm();
            worst = worst.max(drift);
            if drift <= FIBER_DRIFT_TOL * (1.0 + p0.norm()) {
                accepted = Some(s);
                break;
            }
        }
        match accepted {
            Some(s) => out.push(s),
            None => return Err(Error::PreimageDrift { drift: worst }),
        }
    }
    Ok(out)
}

/// Spread of a vector-valued function over preimage fibers and its
/// derivatives along the vertical kernel.
#[derive(Debug, Clone, Serialize)]
pub struct ProjectabilityReport {
    pub label: String,
    /// `max ‖f(s) − f(u)‖∞` over fiber samples `s` of each test point `u`.
    pub spread: f64,
    /// `max ‖∂_G f‖∞` along the columns of `P_kerM` (vertical directions).
    pub vertical_derivative: f64,
    pub tolerance: f64,
    pub projectable: bool,
}

pub const PROJECTABLE_TOL: f64 = 1e-6;

pub fn is_projectable(
    label: &str,
    f: &dyn Fn(&Bindings) -> Result<DVector<f64>>,
    sys: &LagrangianSystem,
    tol: &Tolerances,
    points: &[Bindings],
    fiber_size: usize,
    rng: &mut Rng,
) -> Result<ProjectabilityReport> {
    let mut spread = 0.0f64;
    let mut vertical = 0.0f64;
    let d = sys.dim;
    for pt in points {
        let f0 = f(pt)?;
        for s in preimage_samples(sys, tol, pt, fiber_size, rng)?.iter().skip(1) {
            spread = spread.max((f(s)? - &f0).amax());
        }
        let tab = sys.tableau(pt)?;
        let proj = kernel_basis(&tab, tol).pker_m;
        let h = 1e-4 * (1.0 + pt.norm());
        for j in 0..d {
            let dir = constraints::stack(&DVector::zeros(d), &proj.column(j).into_owned());
            if let Some(df) = crate::fd::directional4(&mut |b| f(b), pt, &dir, h)? {
                vertical = vertical.max(df.amax());
            }
        }
    }
    Ok(ProjectabilityReport {
        label: label.into(),
        spread,
        vertical_derivative: vertical,
        tolerance: PROJECTABLE_TOL,
        projectable: spread <= PROJECTABLE_TOL && vertical <= PROJECTABLE_TOL,
    })
}

/// `ℒ_* X = (X^q, N X^q + M X^v)` with `N_ab = ∂²L/∂v^a∂q^b`.
pub fn pushforward(tab: &Tableau, x: &DVector<f64>) -> DVector<f64> {
    let d = tab.dim();
    let xq = x.rows(0, d).into_owned();
    let xv = x.rows(d, d).into_owned();
    let dp = &tab.n * &xq + &tab.m * xv;
    constraints::stack(&xq, &dp)
}

/// Pushforward of `X` at `pt`, refused when `X` pushes forward differently
/// across the fiber of `pt` (spread above [`PROJECTABLE_TOL`]).
pub fn pushforward_checked(
    sys: &LagrangianSystem,
    tol: &Tolerances,
    field: &VectorField,
    pt: &Bindings,
    fiber_size: usize,
    rng: &mut Rng,
) -> Result<DVector<f64>> {
    let push = |b: &Bindings| -> Result<DVector<f64>> { Ok(pushforward(&sys.tableau(b)?, &field.eval(b)?)) };
    let x0 = push(pt)?;
    let mut spread = 0.0f64;
    for s in preimage_samples(sys, tol, pt, fiber_size, rng)?.iter().skip(1) {
        spread = spread.max((push(s)? - &x0).amax());
    }
    if spread > PROJECTABLE_TOL {
        return Err(Error::NotProjectable { spread });
    }
    Ok(x0)
}

/// `i_X ω = (−δp, δq)` for a canonical vector `X = (δq, δp)`.
pub fn flat(x: &DVector<f64>) -> DVector<f64> {
    let d = x.len() / 2;
    constraints::stack(&-x.rows(d, d).into_owned(), &x.rows(0, d).into_owned())
}

/// Candidate primary constraints compiled with their canonical gradients.
#[derive(Debug, Clone)]
pub struct PrimaryCandidates {
    pub labels: Vec<String>,
    pub exprs: Vec<Expr>,
    dim: usize,
    tape: Tape,
}

impl PrimaryCandidates {
    /// `exprs` are canonical expressions in `q`, `p` and the system
    /// parameters.
    pub fn new(sys: &LagrangianSystem, labels: Vec<String>, exprs: &[Expr]) -> Result<Self> {
        let d = sys.dim;
        let bound = exprs.iter().map(|e| sys.bind_params(e)).collect::<Result<Vec<_>>>()?;
        if let Some(c) = bound.iter().flat_map(|e| e.coords()).find(|c| c.slot == crate::expr::Slot::V) {
            return Err(Error::Invalid(format!("velocity `{c}` in a canonical expression")));
        }
        let mut all = Vec::with_capacity(bound.len() * (2 * d + 1));
        for e in &bound {
            all.push(e.clone());
            all.extend((0..d).map(|a| differentiate(e, &Coord::q(a).into())));
            all.extend((0..d).map(|a| differentiate(e, &Coord::p(a).into())));
        }
        Ok(PrimaryCandidates { labels, exprs: bound, dim: d, tape: Tape::compile(&all) })
    }

    pub fn len(&self) -> usize {
        self.exprs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exprs.is_empty()
    }

    /// Values and canonical gradients (`(∂/∂q, ∂/∂p)`, one column each).
    pub fn eval(&self, s: &CanonicalPoint) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let vals = self.tape.eval(&s.bindings())?;
        let d = self.dim;
        let stride = 2 * d + 1;
        let k = self.len();
        let values = DVector::from_fn(k, |i, _| vals[i * stride]);
        let grads = DMatrix::from_fn(2 * d, k, |r, i| vals[i * stride + 1 + r]);
        Ok((values, grads))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateResult {
    pub label: String,
    /// `max |γ^[0](ℒ(u))|` over the test points.
    pub max_value: f64,
    /// `max |d(γ^[0]∘ℒ)(e_j)|` over coordinate directions and test points.
    pub max_pullback: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PrimaryReport {
    pub candidates: Vec<CandidateResult>,
    /// Rank of the gradients of the passing candidates at the first point.
    pub independent: usize,
    pub n0: usize,
    pub complete: bool,
    pub warning: Option<String>,
}

pub const PRIMARY_VALUE_TOL: f64 = 1e-8;
pub const PRIMARY_PULLBACK_TOL: f64 = 1e-6;

pub fn verify_primary_constraints(
    sys: &LagrangianSystem,
    tol: &Tolerances,
    candidates: &PrimaryCandidates,
    points: &[Bindings],
) -> Result<PrimaryReport> {
    let k = candidates.len();
    let mut max_value = vec![0.0f64; k];
    let mut max_pullback = vec![0.0f64; k];
    let mut first_grads = None;
    let mut n0 = 0;
    for (idx, pt) in points.iter().enumerate() {
        let tab = sys.tableau(pt)?;
        let s = CanonicalPoint { q: pt.q.clone(), p: tab.momenta.clone() };
        let (vals, grads) = candidates.eval(&s)?;
        // rows of the pullback: gradᵀ · ℒ_* e_j for all coordinate e_j
        let d = sys.dim;
        let mut jac = DMatrix::zeros(2 * d, 2 * d);
        jac.view_mut((0, 0), (d, d)).fill_with_identity();
        jac.view_mut((d, 0), (d, d)).copy_from(&tab.n);
        jac.view_mut((d, d), (d, d)).copy_from(&tab.m);
        let pulled = grads.transpose() * jac;
        for i in 0..k {
            max_value[i] = max_value[i].max(vals[i].abs());
            max_pullback[i] = max_pullback[i].max(pulled.row(i).amax());
        }
        if idx == 0 {
            n0 = kernel_basis(&tab, tol).n0;
            first_grads = Some(grads);
        }
    }
    let results: Vec<CandidateResult> = (0..k)
        .map(|i| CandidateResult {
            label: candidates.labels[i].clone(),
            max_value: max_value[i],
            max_pullback: max_pullback[i],
            pass: max_value[i] <= PRIMARY_VALUE_TOL && max_pullback[i] <= PRIMARY_PULLBACK_TOL,
        })
        .collect();
    let independent = match first_grads {
        Some(g) => {
            let cols: Vec<usize> = (0..k).filter(|&i| results[i].pass).collect();
            let sub = DMatrix::from_fn(g.nrows(), cols.len(), |r, c| g[(r, cols[c])]);
            SortedSvd::new(&sub).rank(tol.fd_rank)
        }
        None => 0,
    };
    let complete = independent == n0;
    let warning =
        (!complete).then(|| format!("primary constraint set incomplete: {independent} independent, N0 = {n0}"));
    Ok(PrimaryReport { candidates: results, independent, n0, complete, warning })
}

/// Canonical Hamiltonian at `ℒ(pt)`: the energy, asserted constant over
/// `fiber_size` fiber samples.
pub fn canonical_hamiltonian(
    sys: &LagrangianSystem,
    tol: &Tolerances,
    pt: &Bindings,
    fiber_size: usize,
    rng: &mut Rng,
) -> Result<f64> {
    const SPREAD_TOL: f64 = 1e-7;
    let e0 = sys.energy_at(pt)?;
    let mut spread = 0.0f64;
    for s in preimage_samples(sys, tol, pt, fiber_size, rng)?.iter().skip(1) {
        spread = spread.max((sys.energy_at(s)? - e0).abs());
    }
    if spread > SPREAD_TOL {
        return Err(Error::NotProjectable { spread });
    }
    Ok(e0)
}

/// `𝔛_{H_T}` at `ℒ(pt)`: the pushforward of a SOELVF.
pub fn hamiltonian_flow(sys: &LagrangianSystem, field: &VectorField, pt: &Bindings) -> Result<DVector<f64>> {
    Ok(pushforward(&sys.tableau(pt)?, &field.eval(pt)?))
}

/// Canonical trajectory with the preimage representatives used to evaluate
/// the pushed-forward field.
#[derive(Debug, Clone, Serialize)]
pub struct CanonicalTrajectory {
    pub times: Vec<f64>,
    /// `(q, p)` stacked.
    pub states: Vec<Vec<f64>>,
    /// `H_C` at each state.
    pub hamiltonian: Vec<f64>,
    #[serde(skip)]
    pub preimages: Vec<Bindings>,
}

/// Fixed-step RK4 in `(q, p)` of `ℒ_* field`, each stage evaluated at the
/// preimage found from the previous one.
pub fn integrate_canonical(
    sys: &LagrangianSystem,
    tol: &Tolerances,
    field: &VectorField,
    start: &Bindings,
    opts: &IntegrationOptions,
) -> Result<CanonicalTrajectory> {
    let s0 = legendre(sys, start)?;
    let mut traj = CanonicalTrajectory {
        times: vec![opts.t0],
        states: vec![s0.state().iter().copied().collect()],
        hamiltonian: vec![sys.energy_at(start)?],
        preimages: vec![start.clone()],
    };
    let n = ((opts.t1 - opts.t0) / opts.dt).round() as usize;
    let mut x = s0.state();
    let mut guess = start.clone();
    for i in 1..=n {
        let t = opts.t0 + i as f64 * opts.dt;
        let mut f = |s: &DVector<f64>| -> Result<DVector<f64>> {
            let pre = inverse_legendre(sys, tol, &CanonicalPoint::from_state(s), &guess)?;
            hamiltonian_flow(sys, field, &pre)
        };
        x = rk4_step(&mut f, &x, opts.dt)?;
        if !x.iter().all(|c| c.is_finite()) || x.norm() > DIVERGENCE_NORM {
            return Err(Error::Divergence { t });
        }
        guess = inverse_legendre(sys, tol, &CanonicalPoint::from_state(&x), &guess)?;
        traj.times.push(t);
        traj.states.push(x.iter().copied().collect());
        traj.hamiltonian.push(sys.energy_at(&guess)?);
        traj.preimages.push(guess.clone());
    }
    Ok(traj)
}

/// Least-squares factors `f_nm` with `π_(n) = Σ_m f_nm dγ^[0]_m`.
#[derive(Debug, Clone, Serialize)]
pub struct FactorFit {
    pub point: Vec<f64>,
    /// Row n: coefficients of `π_(n)`.
    pub f: Vec<Vec<f64>>,
    /// `max_n ‖π_(n) − Σ_m f_nm dγ^[0]_m‖`.
    pub fit_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityProbe {
    pub point: Vec<f64>,
    pub on_surface: bool,
    /// `max_n |Σ_m f_nm dγ^[0]_m/dt + γ^[1]_n|`.
    pub residual: f64,
    /// `max_n |γ^[1]_n|`, for scale.
    pub gamma1: f64,
}

/// Stability relation `f dγ^[0]/dt = −γ^[1]` at `pt`, with `dγ^[0]/dt` the
/// Poisson bracket with `H_T`: `{γ^[0], H_C}` by differencing `E` along the
/// lifts of the Hamiltonian fields of the candidates, plus the multiplier
/// terms `Σ u^k ⟨dγ^[0] | 𝔓_(k)⟩`.
pub fn stability_probe(
    sys: &LagrangianSystem,
    tol: &Tolerances,
    candidates: &PrimaryCandidates,
    multipliers: &DVector<f64>,
    pt: &Bindings,
    on_surface: bool,
) -> Result<(StabilityProbe, FactorFit)> {
    let d = sys.dim;
    let tab = sys.tableau(pt)?;
    let kd = kernel_basis(&tab, tol);
    let s = legendre(sys, pt)?;
    let (_, grads) = candidates.eval(&s)?;
    let k = candidates.len();
    let mut f = DMatrix::zeros(kd.n0, k);
    let mut fit_residual = 0.0f64;
    for n in 0..kd.n0 {
        let pi = flat(&pushforward(&tab, &kd.p[n]));
        let coef = lstsq(&grads, &pi, tol.fd_rank);
        fit_residual = fit_residual.max((&grads * &coef - &pi).norm());
        f.row_mut(n).copy_from(&coef.transpose());
    }
    let h = 1e-4 * (1.0 + s.state().norm());
    let mut dgdt = DVector::zeros(k);
    let push_u = pushforward(&tab, &crate::presym::kernel_vector(&kd, &tab, multipliers));
    for m in 0..k {
        let g = grads.column(m);
        let xg = constraints::stack(&g.rows(d, d).into_owned(), &-g.rows(0, d).into_owned());
        let mut energy = |b: &Bindings| -> Result<DVector<f64>> {
            let sc = CanonicalPoint::from_state(&b.state());
            let pre = inverse_legendre(sys, tol, &sc, pt)?;
            Ok(DVector::from_element(1, sys.energy_at(&pre)?))
        };
        let origin = s.bindings();
        let dh = crate::fd::directional4(&mut energy, &origin, &xg, h)?.map_or(0.0, |v| v[0]);
        dgdt[m] = -dh + g.dot(&push_u);
    }
    let g1 = constraints::gamma1(&kd, &tab);
    let lhs = &f * &dgdt + &g1;
    let probe = StabilityProbe {
        point: pt.state().iter().copied().collect(),
        on_surface,
        residual: lhs.amax(),
        gamma1: if g1.is_empty() { 0.0 } else { g1.amax() },
    };
    let fit = FactorFit {
        point: probe.point.clone(),
        f: f.row_iter().map(|r| r.iter().copied().collect()).collect(),
        fit_residual,
    };
    Ok((probe, fit))
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub separation_sup: f64,
    /// `(t, ‖ℒ(u(t)) − s(t)‖∞)` sampled along the run.
    pub separation_curve: Vec<(f64, f64)>,
    pub first_divergence: Option<f64>,
    pub tolerance: f64,
    pub stability_residuals: Vec<StabilityProbe>,
    pub stability_max: f64,
    pub stability_tolerance: f64,
    pub f_fits: Vec<FactorFit>,
    /// `max |H_C(t) − H_C(t0)|` along the canonical flow.
    pub hamiltonian_drift: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquivalenceOptions {
    pub integration: IntegrationOptions,
    pub separation_tol: f64,
    pub stability_tol: f64,
    /// Number of stability probes off the Lagrangian surface.
    pub probes: usize,
    /// Gaussian size of the off-surface perturbation of probe points.
    pub probe_offset: f64,
    /// Samples of the separation curve kept in the report.
    pub curve_samples: usize,
}

impl Default for EquivalenceOptions {
    fn default() -> Self {
        EquivalenceOptions {
            integration: IntegrationOptions { t0: 0.0, t1: 5.0, dt: 1e-3, project: false },
            separation_tol: 1e-5,
            stability_tol: 1e-5,
            probes: 8,
            probe_offset: 1e-2,
            curve_samples: 51,
        }
    }
}

/// Integrate the SOELVF on both sides and compare, then probe the
/// stability relation along and near the flow.
#[allow(clippy::too_many_arguments)]
pub fn equivalence_check(
    sys: &LagrangianSystem,
    ledger: &ConstraintLedger,
    field: &VectorField,
    candidates: &PrimaryCandidates,
    free: &dyn Fn(&Bindings) -> Result<DVector<f64>>,
    start: &Bindings,
    opts: &EquivalenceOptions,
    rng: &mut Rng,
) -> Result<EquivalenceReport> {
    let tol = ledger.tol;
    let lag: Trajectory = crate::dynamics::integrate(sys, field, start, None, &opts.integration)?;
    let can = integrate_canonical(sys, &tol, field, start, &opts.integration)?;
    let mut sup = 0.0f64;
    let mut first_divergence = None;
    let mut seps = Vec::with_capacity(lag.len());
    for i in 0..lag.len().min(can.times.len()) {
        let pushed = legendre(sys, &lag.point(i))?.state();
        let sep = (pushed - DVector::from_column_slice(&can.states[i])).amax();
        if sep > opts.separation_tol && first_divergence.is_none() {
            first_divergence = Some(lag.times[i]);
        }
        sup = sup.max(sep);
        seps.push((lag.times[i], sep));
    }
    let stride = (seps.len() / opts.curve_samples.max(1)).max(1);
    let separation_curve = seps.iter().step_by(stride).copied().collect();

    let an = ledger.analyzer(sys);
    let multipliers_at = |pt: &Bindings| -> Result<DVector<f64>> {
        let s = an.level(pt, ledger.n_f)?;
        Ok(&s.w_det + &s.q_free * free(pt)?)
    };
    let mut probes = Vec::new();
    let mut fits = Vec::new();
    let reference = ranks_at(sys, &tol, start);
    let stride = (can.times.len() / opts.probes.max(1)).max(1);
    for i in (0..can.times.len()).step_by(stride).take(opts.probes) {
        let on = &can.preimages[i];
        let (probe, fit) = stability_probe(sys, &tol, candidates, &multipliers_at(on)?, on, true)?;
        probes.push(probe);
        fits.push(fit);
        let d = sys.dim;
        let off = loop {
            let delta = DVector::from_fn(2 * d, |_, _| rng.sample::<f64, _>(StandardNormal) * opts.probe_offset);
            let cand = on.shifted(&delta, 1.0);
            if ranks_at(sys, &tol, &cand) == reference {
                break cand;
            }
        };
        let (probe, fit) = stability_probe(sys, &tol, candidates, &multipliers_at(&off)?, &off, false)?;
        probes.push(probe);
        fits.push(fit);
    }
    let stability_max = probes.iter().fold(0.0f64, |m, p| m.max(p.residual));
    let h0 = can.hamiltonian[0];
    let hamiltonian_drift = can.hamiltonian.iter().fold(0.0f64, |m, h| m.max((h - h0).abs()));
    Ok(EquivalenceReport {
        separation_sup: sup,
        separation_curve,
        first_divergence,
        tolerance: opts.separation_tol,
        stability_max,
        stability_residuals: probes,
        stability_tolerance: opts.stability_tol,
        f_fits: fits,
        hamiltonian_drift,
        pass: sup <= opts.separation_tol && stability_max <= opts.stability_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::Analyzer;
    use crate::expr::{parse, parse_with, ParseContext};
    use crate::sampling::rng;

    fn system(l: &str, dim: usize, params: &[(&str, f64)]) -> LagrangianSystem {
        let names: Vec<&str> = params.iter().map(|p| p.0).collect();
        let expr = parse(l, dim, &names).unwrap();
        LagrangianSystem::build("t", expr, dim, params.iter().map(|(k, v)| (k.to_string(), *v)).collect()).unwrap()
    }

    const KIN: &str = "m/2*(dot(v,v)/dot(q,q) - dot(q,v)^2/dot(q,q)^2)";
    const CONF: &str = "s*m*sqrt(s*(dot(v,v)/dot(q,q) - dot(q,v)^2/dot(q,q)^2))";

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    fn asym() -> LagrangianSystem {
        system(&format!("{KIN} - (q1 + 0.3*q1*q2/dot(q,q))"), 2, &[("m", 1.0)])
    }

    fn conformal() -> LagrangianSystem {
        system(CONF, 3, &[("m", 1.0), ("s", 1.0)])
    }

    fn point(i: usize, d: usize) -> Bindings {
        let t = i as f64 * 0.37 + 0.1;
        let q = (0..d).map(|a| 0.6 + (t * (a + 1) as f64).sin() * 0.5 + a as f64 * 0.1).collect();
        let v = (0..d).map(|a| (t + a as f64).cos() * 0.8 - 0.1).collect();
        Bindings::new(q, v)
    }

    fn candidates(sys: &LagrangianSystem, exprs: &[&str], params: &[&str]) -> PrimaryCandidates {
        let ctx = ParseContext::new(sys.dim, params).canonical();
        let parsed: Vec<Expr> = exprs.iter().map(|s| parse_with(s, &ctx).unwrap()).collect();
        PrimaryCandidates::new(sys, exprs.iter().map(|s| s.to_string()).collect(), &parsed).unwrap()
    }

    #[test]
    fn free_momenta_are_velocities() {
        let sys = system("dot(v,v)/2", 2, &[]);
        let pt = Bindings::new(vec![0.3, 0.1], vec![-1.0, 2.0]);
        assert_eq!(legendre(&sys, &pt).unwrap().p, pt.v);
    }

    #[test]
    fn conformal_momenta_lie_on_the_mass_shell() {
        let sys = conformal();
        for i in 0..20 {
            let pt = point(i, 3);
            let s = legendre(&sys, &pt).unwrap();
            assert!((s.q.norm_squared() * s.p.norm_squared() - 1.0).abs() < 1e-9);
            assert!(s.q.dot(&s.p).abs() < 1e-9);
        }
    }

    #[test]
    fn inverse_legendre_round_trips() {
        let sys = asym();
        let pt = point(3, 2);
        let s = legendre(&sys, &pt).unwrap();
        let guess = Bindings { v: &pt.v + DVector::from_vec(vec![0.2, -0.1]), ..pt.clone() };
        let back = inverse_legendre(&sys, &tol(), &s, &guess).unwrap();
        assert!((legendre(&sys, &back).unwrap().p - &s.p).amax() < 1e-12);
        // off the image: q·p ≠ 0 has no preimage
        let bad = CanonicalPoint { q: s.q.clone(), p: &s.p + &s.q * 0.5 };
        assert!(matches!(inverse_legendre(&sys, &tol(), &bad, &pt), Err(Error::LegendreInverse { .. })));
    }

    #[test]
    fn fibers_share_one_image() {
        let mut r = rng(7);
        let free = system("dot(v,v)/2", 2, &[]);
        let pt = point(1, 2);
        for s in preimage_samples(&free, &tol(), &pt, 5, &mut r).unwrap() {
            assert_eq!(s, pt);
        }
        let sys = asym();
        let p0 = legendre(&sys, &pt).unwrap().p;
        let qh = &pt.q / pt.q.norm();
        let samples = preimage_samples(&sys, &tol(), &pt, 8, &mut r).unwrap();
        let mut moved = 0.0f64;
        for s in &samples {
            let dv = &s.v - &pt.v;
            assert!((&dv - &qh * qh.dot(&dv)).amax() < 1e-8);
            assert!((legendre(&sys, s).unwrap().p - &p0).amax() < 1e-8);
            moved = moved.max(dv.norm());
        }
        assert!(moved > 1e-2);
        let sys = conformal();
        let pt = point(2, 3);
        let p0 = legendre(&sys, &pt).unwrap().p;
        let samples = preimage_samples(&sys, &tol(), &pt, 8, &mut r).unwrap();
        let dvs = DMatrix::from_fn(3, samples.len(), |a, k| samples[k].v[a] - pt.v[a]);
        assert_eq!(SortedSvd::new(&dvs).rank(1e-6), 2);
        for s in &samples {
            assert!((legendre(&sys, s).unwrap().p - &p0).amax() < 1e-8);
        }
    }

    #[test]
    fn energy_projects_and_velocity_does_not() {
        let sys = asym();
        let mut r = rng(11);
        let pts: Vec<Bindings> = (0..4).map(|i| point(i, 2)).collect();
        let e = |b: &Bindings| Ok(DVector::from_element(1, sys.energy_at(b)?));
        assert!(is_projectable("E", &e, &sys, &tol(), &pts, 8, &mut r).unwrap().projectable);
        let v1 = |b: &Bindings| Ok(DVector::from_element(1, b.v[0]));
        let rep = is_projectable("v1", &v1, &sys, &tol(), &pts, 8, &mut r).unwrap();
        assert!(!rep.projectable && rep.spread > 1e-2);
        let g1 = |b: &Bindings| {
            let tab = sys.tableau(b)?;
            Ok(constraints::gamma1_projected(&kernel_basis(&tab, &tol()), &tab))
        };
        assert!(is_projectable("g1", &g1, &sys, &tol(), &pts, 8, &mut r).unwrap().projectable);
    }

    #[test]
    fn kernel_vector_projects_to_the_dilation() {
        let sys = asym();
        for i in 0..10 {
            let pt = point(i, 2);
            let tab = sys.tableau(&pt).unwrap();
            let kd = kernel_basis(&tab, &tol());
            let qh = &pt.q / pt.q.norm();
            let sign = kd.z.row(0).transpose().dot(&qh).signum();
            let push = pushforward(&tab, &kd.p[0]) * sign;
            let expect = constraints::stack(&qh, &(-&tab.momenta / pt.q.norm()));
            assert!((push - expect).amax() < 1e-8, "{i}");
        }
    }

    #[test]
    fn conformal_kernel_projects_to_the_closed_form_fields() {
        let sys = conformal();
        for i in 0..10 {
            let pt = point(i, 3);
            let tab = sys.tableau(&pt).unwrap();
            let kd = kernel_basis(&tab, &tol());
            let r = pt.q.norm();
            let qh = &pt.q / r;
            let p = &tab.momenta;
            let u = p * r;
            let p2 = p.norm_squared();
            let frak1 = constraints::stack(&qh, &(-p / r));
            let frak2 = constraints::stack(&u, &(-&qh * p2));
            let spanned = DMatrix::from_columns(&[frak1, frak2]);
            for n in 0..2 {
                let push = pushforward(&tab, &kd.p[n]);
                let coef = lstsq(&spanned, &push, 1e-12);
                assert!((&spanned * coef - push).amax() < 1e-8, "{i}");
            }
        }
    }

    #[test]
    fn primary_candidates_are_verified_not_assumed() {
        let sys = asym();
        let pts: Vec<Bindings> = (0..10).map(|i| point(i, 2)).collect();
        let good = candidates(&sys, &["dot(q,p)"], &[]);
        let rep = verify_primary_constraints(&sys, &tol(), &good, &pts).unwrap();
        assert!(rep.candidates[0].pass && rep.complete);
        let bad = candidates(&sys, &["q1*p2 + p1^2 - 0.3*q2^2"], &[]);
        let rep = verify_primary_constraints(&sys, &tol(), &bad, &pts).unwrap();
        assert!(!rep.candidates[0].pass && rep.candidates[0].max_value > 1e-3);
        assert!(rep.warning.is_some());
        let sys = conformal();
        let pts: Vec<Bindings> = (0..10).map(|i| point(i, 3)).collect();
        let both = candidates(&sys, &["dot(q,p)", "dot(q,q)*dot(p,p) - s*m^2"], &["m", "s"]);
        let rep = verify_primary_constraints(&sys, &tol(), &both, &pts).unwrap();
        assert!(rep.candidates.iter().all(|c| c.pass) && rep.independent == 2 && rep.complete);
    }

    #[test]
    fn velocity_in_a_candidate_is_rejected() {
        let sys = asym();
        let e = parse("v1", 2, &[]).unwrap();
        assert!(PrimaryCandidates::new(&sys, vec!["v1".into()], &[e]).is_err());
    }

    #[test]
    fn canonical_hamiltonians() {
        let mut r = rng(3);
        let sys = asym();
        for i in 0..20 {
            let pt = point(i, 2);
            let s = legendre(&sys, &pt).unwrap();
            let q = &s.q;
            let v = q[0] + 0.3 * q[0] * q[1] / q.norm_squared();
            let expect = q.norm_squared() * s.p.norm_squared() / 2.0 + v;
            let h = canonical_hamiltonian(&sys, &tol(), &pt, 4, &mut r).unwrap();
            assert!((h - expect).abs() < 1e-10, "{i}");
        }
        let sys = conformal();
        for i in 0..5 {
            assert!(canonical_hamiltonian(&sys, &tol(), &point(i, 3), 4, &mut r).unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn barred_flow_projects_to_the_canonical_flow() {
        let sys = asym();
        let an = Analyzer::new(&sys, tol(), 1);
        let field = VectorField::barred(&sys, tol());
        let dv = |q: &DVector<f64>| {
            let r2 = q.norm_squared();
            DVector::from_vec(vec![
                1.0 + 0.3 * q[1] / r2 - 0.6 * q[0] * q[0] * q[1] / (r2 * r2),
                0.3 * q[0] / r2 - 0.6 * q[0] * q[1] * q[1] / (r2 * r2),
            ])
        };
        for i in 0..10 {
            let pt = an.find_surface_point(&point(i, 2), 1).unwrap();
            let s = legendre(&sys, &pt).unwrap();
            let (q, p) = (&s.q, &s.p);
            let r = q.norm();
            let qh = q / r;
            let pi = DMatrix::identity(2, 2) - &qh * qh.transpose();
            let expect = constraints::stack(&(p * (r * r)), &(-&qh * (r * p.norm_squared()) - pi * dv(q)));
            let got = hamiltonian_flow(&sys, &field, &pt).unwrap();
            assert!((got - expect).amax() < 1e-8, "{i}");
        }
        let conf = conformal();
        let field = VectorField::barred(&conf, tol());
        assert!(hamiltonian_flow(&conf, &field, &point(0, 3)).unwrap().amax() < 1e-8);
    }

    #[test]
    fn kernel_projections_are_isotropic() {
        // ⟨π_(n) | 𝔓_(m)⟩ = ω(𝔓_(n), 𝔓_(m)) = 0
        let sys = conformal();
        for i in 0..10 {
            let pt = point(i, 3);
            let tab = sys.tableau(&pt).unwrap();
            let kd = kernel_basis(&tab, &tol());
            for n in 0..2 {
                for m in 0..2 {
                    let pn = flat(&pushforward(&tab, &kd.p[n]));
                    assert!(pn.dot(&pushforward(&tab, &kd.p[m])).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn free_particle_flows_agree() {
        let sys = system("dot(v,v)/2", 2, &[]);
        let ledger = constraints::run_constraint_algorithm(&sys, &[point(0, 2)], tol()).unwrap();
        let field = VectorField::euler_lagrange(&sys, &ledger, None).unwrap();
        let cands = candidates(&sys, &[], &[]);
        let opts = EquivalenceOptions {
            integration: IntegrationOptions { t0: 0.0, t1: 1.0, dt: 1e-3, project: false },
            ..Default::default()
        };
        let zero = |_: &Bindings| Ok(DVector::zeros(2));
        let rep = equivalence_check(&sys, &ledger, &field, &cands, &zero, &point(0, 2), &opts, &mut rng(1)).unwrap();
        assert!(rep.separation_sup <= 1e-9 && rep.pass);
    }
}
