//! Seeded point clouds around a seed point, free or on a constraint surface.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::constraints::Analyzer;
use crate::error::{Error, Result};
use crate::expr::Bindings;
use crate::linalg::SortedSvd;
use crate::presym::{kernel_basis, omega_matrix};
use crate::system::LagrangianSystem;
use crate::Tolerances;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard deviations of the Gaussian perturbations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub q: f64,
    pub v: f64,
}

impl Default for Spread {
    fn default() -> Self {
        Spread { q: 0.3, v: 0.5 }
    }
}

const ATTEMPTS_PER_POINT: usize = 40;

/// Samples whose tableau magnitude exceeds the reference's by more than this
/// factor are rejected: near a coordinate singularity the functions vary on
/// a length scale the fixed finite-difference steps do not resolve.
pub const SCALE_RATIO: f64 = 10.0;

fn perturb(seed: &Bindings, spread: Spread, rng: &mut Rng) -> Bindings {
    let nq = Normal::new(0.0, spread.q).unwrap();
    let nv = Normal::new(0.0, spread.v).unwrap();
    let d = seed.dim();
    let mut out = seed.clone();
    out.q += DVector::from_fn(d, |_, _| nq.sample(rng));
    out.v += DVector::from_fn(d, |_, _| nv.sample(rng));
    out
}

/// Ranks of `M` and `Ω` at a point, or `None` off the domain.
pub fn ranks_at(sys: &LagrangianSystem, tol: &Tolerances, pt: &Bindings) -> Option<(usize, usize)> {
    let tab = sys.tableau(pt).ok()?;
    let kd = kernel_basis(&tab, tol);
    let omega = SortedSvd::new(&omega_matrix(&tab)).rank(tol.eps_rank);
    Some((kd.n0, omega))
}

/// Ranks of `M` and `Ω` and the tableau scale at a point.
fn signature(sys: &LagrangianSystem, tol: &Tolerances, pt: &Bindings) -> Option<((usize, usize), f64)> {
    let ranks = ranks_at(sys, tol, pt)?;
    Some((ranks, sys.tableau(pt).ok()?.scale()))
}

fn admissible(reference: ((usize, usize), f64), cand: Option<((usize, usize), f64)>) -> bool {
    cand.is_some_and(|(ranks, scale)| ranks == reference.0 && scale <= SCALE_RATIO * reference.1)
}

/// `n` points near `seed` where the tableau is finite and the ranks of
/// `M` and `Ω` equal those at the seed and whose tableau scale is within
/// [`SCALE_RATIO`] of the seed's. The seed itself comes first.
pub fn phase_cloud(
    sys: &LagrangianSystem,
    tol: &Tolerances,
    seed: &Bindings,
    n: usize,
    spread: Spread,
    rng: &mut Rng,
) -> Result<Vec<Bindings>> {
    let reference =
        signature(sys, tol, seed).ok_or_else(|| Error::Invalid("tableau not finite at the seed point".into()))?;
    let mut out = vec![seed.clone()];
    let mut attempts = 0;
    while out.len() < n && attempts < ATTEMPTS_PER_POINT * n {
        attempts += 1;
        let cand = perturb(seed, spread, rng);
        if admissible(reference, signature(sys, tol, &cand)) {
            out.push(cand);
        }
    }
    out.truncate(n.max(1));
    Ok(out)
}

/// `n` points on the level-`k` surface of `an`, obtained by projecting the
/// seed and Gaussian perturbations of the projected seed.
pub fn surface_cloud(
    an: &Analyzer,
    seed: &Bindings,
    k: usize,
    n: usize,
    spread: Spread,
    rng: &mut Rng,
) -> Result<Vec<Bindings>> {
    let base = an.find_surface_point(seed, k)?;
    let reference = signature(an.sys, &an.tol, &base)
        .ok_or_else(|| Error::Invalid("tableau not finite at the surface seed".into()))?;
    let mut out = vec![base.clone()];
    let mut attempts = 0;
    while out.len() < n && attempts < ATTEMPTS_PER_POINT * n {
        attempts += 1;
        let cand = perturb(&base, spread, rng);
        if !admissible(reference, signature(an.sys, &an.tol, &cand)) {
            continue;
        }
        if let Ok(p) = an.find_surface_point(&cand, k) {
            if admissible(reference, signature(an.sys, &an.tol, &p)) {
                out.push(p);
            }
        }
    }
    out.truncate(n.max(1));
    Ok(out)
}
