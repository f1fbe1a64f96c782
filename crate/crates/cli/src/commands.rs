//! The subcommands. Each builds the system, samples points from the seeded
//! generator and returns a [`Report`]; nothing here prints.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use singlag::constraints::{beta_residual, gamma1, run_constraint_algorithm, Analyzer, ConstraintLedger};
use singlag::dynamics::{integrate as integrate_flow, IntegrationOptions, Surface, VectorField};
use singlag::expr::{Bindings, Tape};
use singlag::hamilton::{
    equivalence_check, hamiltonian_flow, is_projectable, legendre, verify_primary_constraints, EquivalenceOptions,
    PrimaryCandidates, ProjectabilityReport, PRIMARY_PULLBACK_TOL, PRIMARY_VALUE_TOL,
};
use singlag::linalg::SortedSvd;
use singlag::presym::{kernel_basis, omega_matrix, symmetry_generator_check};
use singlag::sampling::{phase_cloud, rng, surface_cloud, Rng, Spread};
use singlag::{Error, LagrangianSystem, Tolerances};

use crate::catalog;
use crate::report::{fmt_vec, Check, Report, Worst};
use crate::sysfile::{parse_system, FileError, SystemFile};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_POINTS: usize = 25;
/// Preimage samples per test point in the projectability checks.
pub const FIBER_SIZE: usize = 16;
/// Test points (taken from the surface cloud) for the fiber checks.
const FIBER_POINTS: usize = 4;
/// Lower bound on the fiber spread of the velocity, which must not project.
pub const CONTROL_SPREAD: f64 = 1e-2;
const FD_TABLEAU_TOL: f64 = 1e-5;
const KERNEL_OMEGA_TOL: f64 = 1e-8;
const KERNEL_M_TOL: f64 = 1e-9;
const SURFACE_RESIDUAL_TOL: f64 = 1e-8;
const FIELD_TOL: f64 = 1e-6;
const DRIFT_TOL: f64 = 1e-6;
/// A finite difference of constraint functions that are themselves built
/// from nested finite differences is accurate to about this level.
const TANGENCY_TOL: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{origin}:{err}")]
    File { origin: String, err: FileError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("no file or catalog system named `{0}`")]
    NotFound(String),
    #[error("{origin}: {source}")]
    Build { origin: String, source: Error },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Analysis(#[from] Error),
}

impl CliError {
    /// 2 for unusable input, 1 for an analysis that could not complete.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Analysis(_) => 1,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::File { .. } => "parse",
            CliError::Io { .. } => "io",
            CliError::NotFound(_) => "not_found",
            CliError::Build { .. } => "build",
            CliError::Usage(_) => "usage",
            CliError::Analysis(_) => "analysis",
        }
    }

    pub fn position(&self) -> Option<(usize, usize)> {
        match self {
            CliError::File { err, .. } => Some((err.line, err.column)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Options {
    pub seed: Option<u64>,
    pub points: Option<usize>,
    /// Replaces `ε_rank`.
    pub tol: Option<f64>,
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub origin: String,
    pub file: SystemFile,
    pub sys: LagrangianSystem,
}

/// Read `arg` as a path, falling back to the catalog by name.
pub fn load(arg: &str) -> Result<Loaded, CliError> {
    let (origin, source) = if Path::new(arg).is_file() {
        let text = std::fs::read_to_string(arg).map_err(|source| CliError::Io { path: arg.into(), source })?;
        (arg.to_string(), text)
    } else if let Some(e) = catalog::find(arg) {
        (format!("catalog:{}", e.name), e.source.to_string())
    } else {
        return Err(CliError::NotFound(arg.into()));
    };
    load_source(&origin, &source)
}

pub fn load_source(origin: &str, source: &str) -> Result<Loaded, CliError> {
    let file = parse_system(source).map_err(|err| CliError::File { origin: origin.into(), err })?;
    let sys = file.build().map_err(|source| CliError::Build { origin: origin.into(), source })?;
    Ok(Loaded { origin: origin.into(), file, sys })
}

/// Generator streams, one per pipeline stage, so that adding a stage to
/// one command does not move the samples of another.
#[derive(Clone, Copy)]
enum Stream {
    Phase = 1,
    Surface = 2,
    Fiber = 3,
    Probe = 4,
}

struct Run<'a> {
    file: &'a SystemFile,
    sys: &'a LagrangianSystem,
    tol: Tolerances,
    seed: u64,
    points: usize,
}

impl<'a> Run<'a> {
    fn new(l: &'a Loaded, opts: &Options) -> Result<Self, CliError> {
        let mut tol = Tolerances::default();
        if let Some(t) = opts.tol {
            if !(t > 0.0 && t < 1.0) {
                return Err(CliError::Usage(format!("--tol must lie in (0, 1), got {t}")));
            }
            tol.eps_rank = t;
        }
        let points = opts.points.or(l.file.sampling.points).unwrap_or(DEFAULT_POINTS).max(1);
        let seed = opts.seed.or(l.file.sampling.seed).unwrap_or(DEFAULT_SEED);
        Ok(Run { file: &l.file, sys: &l.sys, tol, seed, points })
    }

    fn rng(&self, s: Stream) -> Rng {
        rng(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(s as u64))
    }

    fn report(&self, command: &str) -> Report {
        Report::new(command, &self.file.name, self.seed, self.points, self.tol)
    }

    fn phase_cloud(&self) -> Result<Vec<Bindings>, Error> {
        phase_cloud(
            self.sys,
            &self.tol,
            &self.file.seed_point(),
            self.points,
            Spread::default(),
            &mut self.rng(Stream::Phase),
        )
    }

    fn ledger(&self) -> Result<ConstraintLedger, Error> {
        let seed = self.file.seed_point();
        let an = Analyzer::at_point(self.sys, self.tol, &seed)?;
        let pts = surface_cloud(&an, &seed, 1, self.points, Spread::default(), &mut self.rng(Stream::Surface))?;
        run_constraint_algorithm(self.sys, &pts, self.tol)
    }

    fn field(&self, ledger: &ConstraintLedger) -> Result<VectorField<'a>, Error> {
        VectorField::euler_lagrange(self.sys, ledger, self.file.free.as_deref())
    }

    fn candidates(&self) -> Result<Option<PrimaryCandidates>, Error> {
        if self.file.primary.is_empty() {
            return Ok(None);
        }
        let labels = self.file.primary.iter().map(|(k, _)| k.clone()).collect();
        let exprs: Vec<_> = self.file.primary.iter().map(|(_, e)| e.clone()).collect();
        PrimaryCandidates::new(self.sys, labels, &exprs).map(Some)
    }

    /// The free multiplier direction as a function of the point.
    fn free(&self) -> Result<impl Fn(&Bindings) -> singlag::Result<DVector<f64>> + '_, Error> {
        let tape = match &self.file.free {
            None => None,
            Some(w) => Some(Tape::compile(&w.iter().map(|e| self.sys.bind_params(e)).collect::<Result<Vec<_>, _>>()?)),
        };
        let d = self.sys.dim;
        Ok(move |pt: &Bindings| match &tape {
            None => Ok(DVector::zeros(d)),
            Some(t) => Ok(DVector::from_vec(t.eval(pt)?)),
        })
    }
}

fn state(pt: &Bindings) -> Vec<f64> {
    pt.state().iter().copied().collect()
}

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn sci(x: f64) -> String {
    format!("{x:.3e}")
}

fn start_point(ledger: &ConstraintLedger) -> Result<Bindings, Error> {
    ledger.points.first().cloned().ok_or_else(|| Error::Invalid("constraint algorithm left no surface points".into()))
}

#[derive(Serialize)]
struct TableauSummary {
    dim: usize,
    n0: usize,
    rank_m: usize,
    d_bar: usize,
    kernel_omega_dim: usize,
    fbar_norm: f64,
    almost_regular: bool,
    energy_at_seed: f64,
    gamma1_at_seed: Vec<f64>,
    seed: Vec<f64>,
}

#[derive(Serialize)]
struct Classification {
    kind: String,
    first_order_constraints: usize,
    max_abs_energy: f64,
    surface_point: Option<Vec<f64>>,
    surface_radius: Option<f64>,
    surface_residual: Option<f64>,
}

/// `|E| ≤ ENERGY_ZERO` on the whole cloud marks a fully constrained system.
const ENERGY_ZERO: f64 = 1e-12;

pub fn analyze(l: &Loaded, opts: &Options) -> Result<Report, CliError> {
    let run = Run::new(l, opts)?;
    let sys = run.sys;
    let d = sys.dim;
    let seed = run.file.seed_point();
    let tab = sys.tableau(&seed)?;
    let finite = tab.m.iter().chain(tab.f.iter()).chain(tab.de().iter()).all(|x| x.is_finite());
    if !finite {
        return Err(Error::Invalid("tableau is not finite at the seed point".into()).into());
    }
    let kd = kernel_basis(&tab, &run.tol);
    let omega_rank = SortedSvd::new(&omega_matrix(&tab)).rank(run.tol.eps_rank);
    let summary = TableauSummary {
        dim: d,
        n0: kd.n0,
        rank_m: kd.rank_m,
        d_bar: kd.d_bar,
        kernel_omega_dim: 2 * d - omega_rank,
        fbar_norm: kd.fbar_norm,
        almost_regular: kd.almost_regular,
        energy_at_seed: tab.energy,
        gamma1_at_seed: gamma1(&kd, &tab).iter().copied().collect(),
        seed: state(&seed),
    };

    let cloud = run.phase_cloud()?;
    let mut fbar = Worst::default();
    let mut ker = Worst::default();
    let mut energy = 0.0f64;
    for pt in &cloud {
        let t = sys.tableau(pt)?;
        let k = kernel_basis(&t, &run.tol);
        let rank = SortedSvd::new(&omega_matrix(&t)).rank(run.tol.eps_rank);
        fbar.update(k.fbar_norm, || state(pt));
        ker.update((2 * d - rank).abs_diff(2 * k.n0) as f64, || state(pt));
        energy = energy.max(t.energy.abs());
    }

    let an = Analyzer::new(sys, run.tol, kd.n0);
    // rank is taken on the surface: off it the projected γ^[1] has spurious
    // gradient directions
    let on_surface = if kd.n0 == 0 { None } else { Some(an.find_surface_point(&seed, 1)?) };
    let count = match &on_surface {
        Some(p) => an.independent_count(p, 1)?,
        None => 0,
    };
    let kind = if kd.n0 == 0 {
        "regular".to_string()
    } else if energy <= ENERGY_ZERO {
        "fully constrained, E=0".to_string()
    } else {
        format!("singular, {count} first-order constraint{}", if count == 1 { "" } else { "s" })
    };
    let mut class = Classification {
        kind,
        first_order_constraints: count,
        max_abs_energy: energy,
        surface_point: None,
        surface_radius: None,
        surface_residual: None,
    };
    if let (true, Some(p)) = (count > 0, on_surface) {
        class.surface_residual = Some(an.residual(&p, 1)?.norm());
        class.surface_radius = Some(p.q.norm());
        class.surface_point = Some(state(&p));
    }

    let mut r = run.report("analyze");
    let mut lines = vec![
        kv("D", d),
        kv("N0", kd.n0),
        kv("rank M", kd.rank_m),
        kv("D-bar", kd.d_bar),
        kv("dim ker Omega", summary.kernel_omega_dim),
        kv("|Fbar|", sci(kd.fbar_norm)),
        kv("E at seed", sci(tab.energy)),
        kv("gamma[1] at seed", fmt_vec(&summary.gamma1_at_seed)),
    ];
    r.section("tableau", std::mem::take(&mut lines), &summary);
    lines.push(kv("kind", &class.kind));
    if let (Some(p), Some(rad)) = (&class.surface_point, class.surface_radius) {
        lines.push(kv("surface point", fmt_vec(p)));
        lines.push(kv("surface |q|", format!("{rad:.10}")));
    }
    r.section("classification", lines, &class);
    r.check(fbar.at_most("almost regular: max |Fbar|", run.tol.eps_constraint));
    r.check(ker.at_most("dim ker Omega = 2 N0", 0.0));
    if let Some(res) = class.surface_residual {
        r.check(Check::at_most("first-order surface residual", res, SURFACE_RESIDUAL_TOL, class.surface_point.clone()));
    }
    Ok(r)
}

fn ledger_section(r: &mut Report, ledger: &ConstraintLedger) {
    let lines = vec![
        kv("N0", ledger.n0),
        kv("I sequence", format!("{:?}", ledger.i_sequence)),
        kv("Gamma ranks", format!("{:?}", ledger.ranks)),
        kv("n_F", ledger.n_f),
        kv("status", format!("{:?}", ledger.status)),
        kv("determined multipliers", ledger.determined),
        kv("free multipliers", ledger.free),
        kv("surface points", ledger.points.len()),
        kv("excluded points", ledger.excluded.len()),
    ];
    r.section("ledger", lines, ledger);
}

fn ledger_checks(r: &mut Report, ledger: &ConstraintLedger) {
    let consistent = ledger.status != singlag::constraints::Status::Inconsistent;
    r.check(Check::at_most("constraint algorithm consistent", if consistent { 0.0 } else { 1.0 }, 0.0, None));
    for rec in &ledger.levels {
        r.check(Check::at_most(
            format!("level {} surface residual", rec.order),
            rec.residual_max,
            SURFACE_RESIDUAL_TOL,
            None,
        ));
    }
}

pub fn constraints(l: &Loaded, opts: &Options) -> Result<Report, CliError> {
    let run = Run::new(l, opts)?;
    let ledger = run.ledger()?;
    let mut r = run.report("constraints");
    ledger_section(&mut r, &ledger);
    ledger_checks(&mut r, &ledger);
    Ok(r)
}

#[derive(Serialize)]
struct FlowSummary {
    options: IntegrationOptions,
    steps: usize,
    start: Vec<f64>,
    end: Vec<f64>,
    energy_start: f64,
    max_energy_drift: f64,
    max_constraint_residual: f64,
    csv: Option<String>,
}

pub fn integrate(l: &Loaded, opts: &Options) -> Result<Report, CliError> {
    let run = Run::new(l, opts)?;
    let ledger = run.ledger()?;
    let an = ledger.analyzer(run.sys);
    let field = run.field(&ledger)?;
    let start = start_point(&ledger)?;
    let surface = Surface { analyzer: &an, level: ledger.n_f };
    let traj = integrate_flow(run.sys, &field, &start, Some(surface), &run.file.integration)?;
    if let Some(path) = &opts.csv {
        std::fs::write(path, traj.to_csv())
            .map_err(|source| CliError::Io { path: path.display().to_string(), source })?;
    }
    let summary = FlowSummary {
        options: run.file.integration,
        steps: traj.len() - 1,
        start: traj.states[0].clone(),
        end: traj.states.last().cloned().unwrap_or_default(),
        energy_start: traj.energy[0],
        max_energy_drift: traj.max_energy_drift(),
        max_constraint_residual: traj.max_residual(),
        csv: opts.csv.as_ref().map(|p| p.display().to_string()),
    };
    let mut r = run.report("integrate");
    ledger_section(&mut r, &ledger);
    let lines = vec![
        kv(
            "t",
            format!(
                "[{}, {}] dt={} project={}",
                summary.options.t0, summary.options.t1, summary.options.dt, summary.options.project
            ),
        ),
        kv("steps", summary.steps),
        kv("start", fmt_vec(&summary.start)),
        kv("end", fmt_vec(&summary.end)),
        kv("max |E - E0|", sci(summary.max_energy_drift)),
        kv("max constraint residual", sci(summary.max_constraint_residual)),
    ];
    r.section("flow", lines, &summary);
    let scale = 1.0 + summary.energy_start.abs();
    r.check(Check::at_most("energy drift / (1 + |E0|)", summary.max_energy_drift / scale, DRIFT_TOL, None));
    r.check(Check::at_most("constraint residual along the flow", summary.max_constraint_residual, DRIFT_TOL, None));
    Ok(r)
}

fn projectability_check(r: &mut Report, rep: &ProjectabilityReport) {
    r.check(Check::at_most(
        format!("projectable: {}", rep.label),
        rep.spread.max(rep.vertical_derivative),
        rep.tolerance,
        None,
    ));
}

/// Fiber checks of the energy, the constraint functions, the determined
/// multiplier direction and (as a control) the velocity.
fn fiber_checks(run: &Run, r: &mut Report, ledger: &ConstraintLedger) -> Result<Vec<ProjectabilityReport>, Error> {
    let sys = run.sys;
    let an = ledger.analyzer(sys);
    let n_f = ledger.n_f;
    let pts: Vec<Bindings> = ledger.points.iter().take(FIBER_POINTS).cloned().collect();
    let mut rng = run.rng(Stream::Fiber);
    let energy = |b: &Bindings| Ok(DVector::from_element(1, sys.energy_at(b)?));
    let gammas = |b: &Bindings| an.residual(b, n_f);
    let w_det = |b: &Bindings| Ok(an.level(b, n_f)?.w_det);
    let mut out = Vec::new();
    type Target<'f> = (&'f str, &'f dyn Fn(&Bindings) -> singlag::Result<DVector<f64>>);
    let targets: [Target; 3] = [("E", &energy), ("gamma", &gammas), ("determined u", &w_det)];
    for (label, f) in targets {
        let rep = is_projectable(label, f, sys, &run.tol, &pts, FIBER_SIZE, &mut rng)?;
        projectability_check(r, &rep);
        out.push(rep);
    }
    if ledger.n0 > 0 {
        let velocity = |b: &Bindings| Ok(b.v.clone());
        let rep = is_projectable("v (control)", &velocity, sys, &run.tol, &pts, FIBER_SIZE, &mut rng)?;
        r.check(Check::at_least("not projectable: v (control spread)", rep.spread, CONTROL_SPREAD, None));
        out.push(rep);
    }
    Ok(out)
}

fn primary_checks(run: &Run, r: &mut Report) -> Result<(), Error> {
    let Some(cands) = run.candidates()? else {
        return Ok(());
    };
    let cloud = run.phase_cloud()?;
    let rep = verify_primary_constraints(run.sys, &run.tol, &cands, &cloud)?;
    let mut lines: Vec<_> = rep
        .candidates
        .iter()
        .map(|c| kv(&c.label, format!("max |value| {}, max |pullback| {}", sci(c.max_value), sci(c.max_pullback))))
        .collect();
    lines.push(kv("independent / N0", format!("{} / {}", rep.independent, rep.n0)));
    if let Some(w) = &rep.warning {
        lines.push(kv("warning", w));
    }
    for c in &rep.candidates {
        r.check(Check::at_most(format!("primary {}: value", c.label), c.max_value, PRIMARY_VALUE_TOL, None));
        r.check(Check::at_most(format!("primary {}: pullback", c.label), c.max_pullback, PRIMARY_PULLBACK_TOL, None));
    }
    r.section("primary", lines, &rep);
    Ok(())
}

#[derive(Serialize)]
struct CanonicalSummary {
    start: Vec<f64>,
    momenta: Vec<f64>,
    canonical_hamiltonian: f64,
    hamiltonian_flow: Vec<f64>,
}

pub fn project(l: &Loaded, opts: &Options) -> Result<Report, CliError> {
    let run = Run::new(l, opts)?;
    let sys = run.sys;
    let ledger = run.ledger()?;
    let field = run.field(&ledger)?;
    let start = start_point(&ledger)?;
    let summary = CanonicalSummary {
        start: state(&start),
        momenta: legendre(sys, &start)?.p.iter().copied().collect(),
        canonical_hamiltonian: sys.energy_at(&start)?,
        hamiltonian_flow: hamiltonian_flow(sys, &field, &start)?.iter().copied().collect(),
    };
    let mut r = run.report("project");
    ledger_section(&mut r, &ledger);
    let lines = vec![
        kv("surface point", fmt_vec(&summary.start)),
        kv("p", fmt_vec(&summary.momenta)),
        kv("H_C", sci(summary.canonical_hamiltonian)),
        kv("X_H_T", fmt_vec(&summary.hamiltonian_flow)),
    ];
    r.section("canonical", lines, &summary);
    primary_checks(&run, &mut r)?;
    let reports = fiber_checks(&run, &mut r, &ledger)?;
    let pts: Vec<Bindings> = ledger.points.iter().take(FIBER_POINTS).cloned().collect();
    let flow = |b: &Bindings| hamiltonian_flow(sys, &field, b);
    let rep = is_projectable("X_H_T", &flow, sys, &run.tol, &pts, FIBER_SIZE, &mut run.rng(Stream::Probe))?;
    projectability_check(&mut r, &rep);
    let mut all = reports;
    all.push(rep);
    r.section("projectability", Vec::new(), &all);

    if let (Some(cands), true) = (run.candidates()?, ledger.n0 > 0) {
        let free = run.free()?;
        // both sides integrate the same unprojected field
        let eq = EquivalenceOptions {
            integration: IntegrationOptions { project: false, ..run.file.integration },
            ..EquivalenceOptions::default()
        };
        let rep = equivalence_check(sys, &ledger, &field, &cands, &free, &start, &eq, &mut run.rng(Stream::Probe))?;
        let lines = vec![
            kv("t", format!("[{}, {}] dt={}", eq.integration.t0, eq.integration.t1, eq.integration.dt)),
            kv("sup separation", sci(rep.separation_sup)),
            kv("max stability residual", sci(rep.stability_max)),
            kv("max |H_C - H_C(0)|", sci(rep.hamiltonian_drift)),
        ];
        r.check(Check::at_most("flow separation (sup)", rep.separation_sup, rep.tolerance, None));
        r.check(Check::at_most("stability residual", rep.stability_max, rep.stability_tolerance, None));
        r.section("equivalence", lines, &rep);
    }
    Ok(r)
}

/// `∂²L/∂x^a∂y^b` by a Richardson-extrapolated central stencil; `xa`, `xb`
/// select the velocity slot.
fn mixed_fd(sys: &LagrangianSystem, pt: &Bindings, a: (usize, bool), b: (usize, bool), h: f64) -> Result<f64, Error> {
    let d = pt.dim();
    let stencil = |h: f64| -> Result<f64, Error> {
        let mut acc = 0.0;
        for (sa, sb, w) in [(h, h, 1.0), (h, -h, -1.0), (-h, h, -1.0), (-h, -h, 1.0)] {
            let mut dir = DVector::zeros(2 * d);
            dir[a.0 + if a.1 { d } else { 0 }] += sa;
            dir[b.0 + if b.1 { d } else { 0 }] += sb;
            acc += w * sys.lagrangian_at(&pt.shifted(&dir, 1.0))?;
        }
        Ok(acc / (4.0 * h * h))
    };
    Ok((4.0 * stencil(h)? - stencil(2.0 * h)?) / 3.0)
}

fn tableau_checks(run: &Run, r: &mut Report, cloud: &[Bindings]) -> Result<(), Error> {
    let sys = run.sys;
    let d = sys.dim;
    let mut worst = [Worst::default(), Worst::default(), Worst::default()];
    for pt in cloud {
        let tab = sys.tableau(pt)?;
        let h = 1e-3 * (1.0 + pt.norm());
        let mut m = DMatrix::zeros(d, d);
        let mut n = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] = mixed_fd(sys, pt, (i, true), (j, true), h)?;
                n[(i, j)] = mixed_fd(sys, pt, (i, true), (j, false), h)?;
            }
        }
        let f = &n - n.transpose();
        for (w, exact, numeric) in [(0, &tab.m, &m), (1, &tab.n, &n), (2, &tab.f, &f)] {
            let rel = (exact - numeric).amax() / exact.amax().max(1.0);
            worst[w].update(rel, || state(pt));
        }
    }
    for (w, name) in worst.into_iter().zip(["M", "N", "F"]) {
        r.check(w.at_most(format!("symbolic {name} vs finite differences (relative)"), FD_TABLEAU_TOL));
    }
    Ok(())
}

fn kernel_checks(run: &Run, r: &mut Report, cloud: &[Bindings]) -> Result<(), Error> {
    let d = run.sys.dim;
    let (mut omega_p, mut m_z, mut rank, mut fbar) =
        (Worst::default(), Worst::default(), Worst::default(), Worst::default());
    for pt in cloud {
        let tab = run.sys.tableau(pt)?;
        let kd = kernel_basis(&tab, &run.tol);
        let omega = omega_matrix(&tab);
        let onorm = omega.norm().max(f64::MIN_POSITIVE);
        let op = kd.p.iter().map(|p| (&omega * p).norm()).fold(0.0f64, f64::max) / onorm;
        let mz = (0..kd.n0).map(|n| (&tab.m * kd.z.row(n).transpose()).norm()).fold(0.0f64, f64::max)
            / kd.sigma_max.max(f64::MIN_POSITIVE);
        let orank = SortedSvd::new(&omega).rank(run.tol.eps_rank);
        omega_p.update(op, || state(pt));
        m_z.update(mz, || state(pt));
        rank.update(orank.abs_diff(2 * d - 2 * kd.n0) as f64, || state(pt));
        fbar.update(kd.fbar_norm, || state(pt));
    }
    r.check(omega_p.at_most("|Omega P_n| / |Omega|", KERNEL_OMEGA_TOL));
    r.check(m_z.at_most("|M z_n| / sigma_max", KERNEL_M_TOL));
    r.check(rank.at_most("rank Omega = 2D - 2N0", 0.0));
    r.check(fbar.at_most("almost regular: max |Fbar|", run.tol.eps_constraint));
    Ok(())
}

/// The SOELVF at the surface points solves the energy equation, is second
/// order modulo ker M, and is tangent to the final surface.
fn field_checks(run: &Run, r: &mut Report, ledger: &ConstraintLedger, field: &VectorField) -> Result<(), Error> {
    let d = run.sys.dim;
    let an = ledger.analyzer(run.sys);
    let (mut energy_eq, mut second, mut tangent) = (Worst::default(), Worst::default(), Worst::default());
    for pt in &ledger.points {
        let tab = run.sys.tableau(pt)?;
        let x = field.eval(pt)?;
        let scale = 1.0 + tab.scale();
        energy_eq.update(beta_residual(&tab, &x).amax() / scale, || state(pt));
        let slip = x.rows(0, d) - &pt.v;
        second.update((&tab.m * slip).amax() / scale, || state(pt));
        // normal component of X relative to |∇g| |X|, floored at 1 so that
        // identically vanishing constraints do not divide noise by noise
        let grad = an.gradient(pt, ledger.n_f)?;
        let along = &grad * &x;
        let denom = grad.amax().max(1.0) * x.norm().max(1.0);
        tangent.update(along.amax() / denom, || state(pt));
    }
    r.check(energy_eq.at_most("SOELVF energy equation residual", FIELD_TOL));
    r.check(second.at_most("SOELVF second order modulo ker M", FIELD_TOL));
    r.check(tangent.at_most("SOELVF tangent to the final surface", TANGENCY_TOL));
    Ok(())
}

pub fn verify(l: &Loaded, opts: &Options) -> Result<Report, CliError> {
    let run = Run::new(l, opts)?;
    let cloud = run.phase_cloud()?;
    let ledger = run.ledger()?;
    let field = run.field(&ledger)?;
    let mut r = run.report("verify");
    ledger_section(&mut r, &ledger);
    tableau_checks(&run, &mut r, &cloud)?;
    kernel_checks(&run, &mut r, &cloud)?;
    ledger_checks(&mut r, &ledger);
    field_checks(&run, &mut r, &ledger, &field)?;
    let reports = fiber_checks(&run, &mut r, &ledger)?;
    r.section("projectability", Vec::new(), &reports);
    primary_checks(&run, &mut r)?;
    if let Some((rho, rhodot)) = &run.file.symmetry {
        let rep = symmetry_generator_check(run.sys, rho, rhodot, &cloud)?;
        let worst = rep.residuals.iter().map(|s| s.kernel.max(s.transport)).fold(0.0f64, f64::max);
        r.check(Check::at_most("generalized symmetry", worst, rep.tolerance, None));
        r.section("symmetry", Vec::new(), &rep);
    }
    Ok(r)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExampleEntry {
    pub name: &'static str,
    pub description: String,
}

pub fn examples() -> Vec<ExampleEntry> {
    catalog::CATALOG
        .iter()
        .map(|e| ExampleEntry {
            name: e.name,
            description: parse_system(e.source).map(|f| f.description).unwrap_or_default(),
        })
        .collect()
}
