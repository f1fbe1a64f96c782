//! Constraint one-form, first-order constraints and the iterative
//! constraint algorithm.
//!
//! Everything here is gauge free: constraint functions are stored in the
//! projected form `P(∂E/∂q + F v)` (a D-vector whose span is what counts),
//! and multiplier freedom is tracked as an orthogonal projector `Q_k` onto
//! the horizontal kernel directions still undetermined at level k. Basis
//! vectors are only ever used at a single point, never differentiated.

mod ledger;

pub use ledger::{
    run_constraint_algorithm, ConstraintLedger, ExcludedPoint, LevelRecord, MultiplierSample, Status,
    MAX_EXCLUDED_FRACTION,
};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::Bindings;
use crate::fd;
use crate::linalg::{range_basis, SortedSvd};
use crate::presym::{kernel_basis, kernel_vector, omega_matrix, KernelData, Tolerances};
use crate::scalar::Real;
use crate::system::{LagrangianSystem, Tableau};

/// `γ^[1]_n = 𝔷_(n)·(∂E/∂q + F v)` in the basis of `kd`.
pub fn gamma1<T: Real>(kd: &KernelData<T>, tab: &Tableau<T>) -> DVector<T> {
    &kd.z * force_residual(tab)
}

/// Basis-free form of `γ^[1]`: the projection `P(∂E/∂q + F v)`.
pub fn gamma1_projected<T: Real>(kd: &KernelData<T>, tab: &Tableau<T>) -> DVector<T> {
    &kd.pker_m * force_residual(tab)
}

fn force_residual<T: Real>(tab: &Tableau<T>) -> DVector<T> {
    &tab.de_dq + &tab.f * &tab.point.v
}

/// Minimal-norm acceleration solving `M a = −∂E/∂q − F v`.
pub fn acceleration<T: Real>(kd: &KernelData<T>, tab: &Tableau<T>) -> DVector<T> {
    -(&kd.m_pinv * force_residual(tab))
}

/// The SOLVF `X_L = (v, a)`.
pub fn solvf_unchecked<T: Real>(kd: &KernelData<T>, tab: &Tableau<T>) -> DVector<T> {
    stack(&tab.point.v, &acceleration(kd, tab))
}

/// `X̄_L = X_L − Σ_n ⟨Θ^(n)_q|X_L⟩ P_(n) = (v − P v, a + M⁺ F P v)`.
pub fn xbar_unchecked<T: Real>(kd: &KernelData<T>, tab: &Tableau<T>) -> DVector<T> {
    let x = solvf_unchecked(kd, tab);
    let pv = &kd.pker_m * &tab.point.v;
    x - kernel_vector(kd, tab, &pv)
}

/// `β = dE − Ω·X`.
pub fn beta_residual<T: Real>(tab: &Tableau<T>, x: &DVector<T>) -> DVector<T> {
    tab.de() - omega_matrix(tab) * x
}

pub fn stack<T: Real>(a: &DVector<T>, b: &DVector<T>) -> DVector<T> {
    let d = a.len();
    DVector::from_fn(d + b.len(), |i, _| if i < d { a[i] } else { b[i - d] })
}

/// Everything the hierarchy knows at one point up to some level `k`.
#[derive(Debug, Clone)]
pub struct LevelState<T: Real = f64> {
    pub tab: Tableau<T>,
    pub kd: KernelData<T>,
    /// Projected constraint functions `g_1 … g_k`.
    pub gammas: Vec<DVector<T>>,
    /// `X̄^[k]`: `X̄_L` plus the kernel components fixed below level k.
    pub xbar: DVector<T>,
    /// Projector onto the horizontal kernel directions still free.
    pub q_free: DMatrix<T>,
    /// Horizontal direction `w` with `X̄^[k] = X̄_L + K(w)`.
    pub w_det: DVector<T>,
    /// Number of free multipliers (rank of `q_free`).
    pub free: usize,
}

impl<T: Real> LevelState<T> {
    pub fn level(&self) -> usize {
        self.gammas.len()
    }

    pub fn stacked_gammas(&self) -> DVector<T> {
        let d = self.tab.dim();
        let mut out = DVector::zeros(d * self.gammas.len());
        for (k, g) in self.gammas.iter().enumerate() {
            out.rows_mut(k * d, d).copy_from(g);
        }
        out
    }

    /// Orthonormal basis of the free horizontal kernel directions.
    pub fn free_basis(&self) -> DMatrix<T> {
        range_basis(&self.q_free, self.free)
    }

    /// `X̄^[k] + K(Q_k w)` for a horizontal `w`.
    pub fn soelvf(&self, w_free: &DVector<T>) -> DVector<T> {
        &self.xbar + kernel_vector(&self.kd, &self.tab, &(&self.q_free * w_free))
    }
}

/// The derivative data of `g_k` that drives one step of the algorithm.
#[derive(Debug, Clone)]
pub struct GammaBlock<T: Real = f64> {
    /// `Γ_k`: columns are derivatives of `g_k` along `K(B e_j)`.
    pub gamma: DMatrix<T>,
    /// `b_k`: derivative of `g_k` along `X̄^[k]`.
    pub b: DVector<T>,
    /// Basis of the free directions used for the columns.
    pub basis: DMatrix<T>,
}

/// Evaluates the hierarchy with ranks of the `Γ` matrices frozen.
#[derive(Debug, Clone)]
pub struct Analyzer<'a> {
    pub sys: &'a LagrangianSystem,
    pub tol: Tolerances,
    pub n0: usize,
    /// `r_1, r_2, …`: ranks of `Γ_k`, fixed for the whole run.
    pub ranks: Vec<usize>,
}

const SURFACE_TOL: f64 = 1e-10;
const SURFACE_NOISE_TOL: f64 = 1e-8;
const SURFACE_MAX_ITER: usize = 100;

impl<'a> Analyzer<'a> {
    pub fn new(sys: &'a LagrangianSystem, tol: Tolerances, n0: usize) -> Self {
        Analyzer { sys, tol, n0, ranks: Vec::new() }
    }

    /// Probe the nullity of `M` at `pt`.
    pub fn at_point(sys: &'a LagrangianSystem, tol: Tolerances, pt: &Bindings) -> Result<Self> {
        let tab = sys.tableau(pt)?;
        Ok(Self::new(sys, tol, kernel_basis(&tab, &tol).n0))
    }

    pub fn with_ranks(mut self, ranks: Vec<usize>) -> Self {
        self.ranks = ranks;
        self
    }

    /// Highest level reachable with the frozen ranks.
    pub fn top(&self) -> usize {
        self.ranks.len() + 1
    }

    /// Finite-difference step for differentiating level-k functions.
    /// Nested differences amplify roundoff, so the step grows with k.
    pub fn step<T: Real>(&self, pt: &Bindings<T>, k: usize) -> T {
        T::lit(1e-3 * 2.5f64.powi(k as i32 - 1)) * (T::one() + pt.norm())
    }

    pub fn base<T: Real>(&self, pt: &Bindings<T>) -> Result<LevelState<T>> {
        let tab = self.sys.tableau(pt)?;
        let kd = kernel_basis(&tab, &self.tol);
        if kd.n0 != self.n0 {
            return Err(Error::NonConstantRank {
                what: "M nullity".into(),
                min: kd.n0.min(self.n0),
                max: kd.n0.max(self.n0),
            });
        }
        let g1 = gamma1_projected(&kd, &tab);
        let xbar = xbar_unchecked(&kd, &tab);
        let d = tab.dim();
        Ok(LevelState {
            gammas: vec![g1],
            xbar,
            q_free: kd.pker_m.clone(),
            w_det: DVector::zeros(d),
            free: kd.n0,
            tab,
            kd,
        })
    }

    /// State at level `k ≤ top()`.
    pub fn level<T: Real>(&self, pt: &Bindings<T>, k: usize) -> Result<LevelState<T>> {
        assert!(k >= 1 && k <= self.top(), "level {k} beyond frozen ranks");
        let mut s = self.base(pt)?;
        for j in 1..k {
            s = self.extend(s, j)?;
        }
        Ok(s)
    }

    /// `Γ_k` and `b_k` at the point of `s` (which is at level k).
    pub fn gamma_block<T: Real>(&self, s: &LevelState<T>) -> Result<GammaBlock<T>> {
        self.block(s, true)
    }

    /// As [`Analyzer::gamma_block`]; without `with_gamma` the columns of
    /// `Γ` are left zero (a frozen rank of 0 never reads them).
    fn block<T: Real>(&self, s: &LevelState<T>, with_gamma: bool) -> Result<GammaBlock<T>> {
        let k = s.level();
        let pt = &s.tab.point;
        let basis = s.free_basis();
        let d = pt.dim();
        let h = self.step(pt, k);
        let mut g =
            |b: &Bindings<T>| -> Result<DVector<T>> { Ok(self.level(b, k)?.gammas.pop().expect("level has gammas")) };
        let mut gamma = DMatrix::zeros(d, basis.ncols());
        for j in (0..basis.ncols()).filter(|_| with_gamma) {
            let dir = kernel_vector(&s.kd, &s.tab, &basis.column(j).into_owned());
            if let Some(col) = fd::directional4(&mut g, pt, &dir, h)? {
                gamma.set_column(j, &col);
            }
        }
        let b = fd::directional4(&mut g, pt, &s.xbar, h)?.unwrap_or_else(|| DVector::zeros(d));
        Ok(GammaBlock { gamma, b, basis })
    }

    /// Numerical rank of a finite-difference matrix at a point of scale `scale`.
    pub fn fd_rank<T: Real>(&self, a: &DMatrix<T>, scale: T) -> usize {
        let svd = SortedSvd::new(a);
        svd.rank_above(T::lit(self.tol.fd_rank) * svd.sigma_max().max(scale))
    }

    fn extend<T: Real>(&self, mut s: LevelState<T>, j: usize) -> Result<LevelState<T>> {
        let r = self.ranks[j - 1];
        let blk = self.block(&s, r > 0)?;
        if r == 0 || blk.basis.ncols() == 0 {
            s.gammas.push(blk.b);
            return Ok(s);
        }
        let svd = SortedSvd::new(&blk.gamma);
        let y = -(svd.pinv(r) * &blk.b);
        let w = &blk.basis * &y;
        s.xbar += kernel_vector(&s.kd, &s.tab, &w);
        s.w_det += w;
        s.gammas.push(&blk.b + &blk.gamma * &y);
        let v_r = svd.leading_right(r);
        let keep = DMatrix::identity(blk.basis.ncols(), blk.basis.ncols()) - &v_r * v_r.transpose();
        s.q_free = &blk.basis * keep * blk.basis.transpose();
        s.free -= r;
        Ok(s)
    }

    /// Stacked constraint values `g_1 … g_k`.
    pub fn residual<T: Real>(&self, pt: &Bindings<T>, k: usize) -> Result<DVector<T>> {
        Ok(self.level(pt, k)?.stacked_gammas())
    }

    /// Jacobian of the stacked constraints, one row per component.
    pub fn gradient<T: Real>(&self, pt: &Bindings<T>, k: usize) -> Result<DMatrix<T>> {
        let rows = k * pt.dim();
        fd::jacobian4(&mut |b| self.residual(b, k), pt, self.step(pt, k), rows)
    }

    /// Number of independent constraints among `g_1 … g_k` at `pt`.
    pub fn independent_count(&self, pt: &Bindings, k: usize) -> Result<usize> {
        let scale = self.sys.tableau(pt)?.scale();
        Ok(self.fd_rank(&self.gradient(pt, k)?, scale))
    }

    /// Gauss-Newton projection onto `g_1 = … = g_k = 0`.
    pub fn find_surface_point(&self, seed: &Bindings, k: usize) -> Result<Bindings> {
        let norm = |b: &Bindings| -> Option<f64> { self.residual(b, k).ok().map(|r| r.norm()) };
        let mut x = seed.clone();
        let mut nr = self.residual(&x, k)?.norm();
        let mut stagnated = false;
        for it in 0..SURFACE_MAX_ITER {
            if nr <= SURFACE_TOL || (nr <= SURFACE_NOISE_TOL && stagnated) {
                return Ok(x);
            }
            let jac = self.gradient(&x, k)?;
            let r = self.residual(&x, k)?;
            let svd = SortedSvd::new(&jac);
            let rank = svd.rank(self.tol.fd_rank);
            if rank == 0 {
                return Err(Error::SurfaceNotFound { residual: nr, iterations: it });
            }
            let dx = -(svd.pinv(rank) * r);
            let mut t = 1.0;
            let mut accepted = None;
            while t > 1.0 / 256.0 {
                let trial = x.shifted(&dx, t);
                if let Some(n) = norm(&trial) {
                    if n < nr {
                        accepted = Some((trial, n));
                        break;
                    }
                }
                t *= 0.5;
            }
            match accepted {
                Some((trial, n)) => {
                    stagnated = n > 0.5 * nr;
                    x = trial;
                    nr = n;
                }
                None if nr <= SURFACE_NOISE_TOL => return Ok(x),
                None => return Err(Error::SurfaceNotFound { residual: nr, iterations: it }),
            }
        }
        if nr <= SURFACE_NOISE_TOL {
            return Ok(x);
        }
        Err(Error::SurfaceNotFound { residual: nr, iterations: SURFACE_MAX_ITER })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn system(l: &str, dim: usize, params: &[(&str, f64)]) -> LagrangianSystem {
        let names: Vec<&str> = params.iter().map(|p| p.0).collect();
        let expr = parse(l, dim, &names).unwrap();
        LagrangianSystem::build("t", expr, dim, params.iter().map(|(k, v)| (k.to_string(), *v)).collect()).unwrap()
    }

    const HAT: &str = "m/2*(dot(v,v)/dot(q,q) - dot(q,v)^2/dot(q,q)^2) + lam/2*dot(q,q) - b/4*dot(q,q)^2";

    fn hat() -> LagrangianSystem {
        system(HAT, 2, &[("m", 1.0), ("lam", 1.0), ("b", 1.0)])
    }

    #[test]
    fn hat_gamma_closed_form() {
        let sys = hat();
        let pt = Bindings::<f64>::new(vec![1.2, 1.6], vec![0.3, -0.7]);
        let tab = sys.tableau(&pt).unwrap();
        let kd = kernel_basis(&tab, &Tolerances::default());
        let g: f64 = gamma1(&kd, &tab)[0].abs();
        assert!((g - 6.0).abs() < 1e-12, "{g}");
    }

    #[test]
    fn hat_surface() {
        let sys = hat();
        let an = Analyzer::new(&sys, Tolerances::default(), 1);
        let seed = Bindings::<f64>::new(vec![1.2, 1.6], vec![0.3, -0.7]);
        let pt = an.find_surface_point(&seed, 1).unwrap();
        assert!((pt.q.norm() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn constant_gamma_has_no_surface() {
        let sys = system("q1", 1, &[]);
        let an = Analyzer::new(&sys, Tolerances::default(), 1);
        let err = an.find_surface_point(&Bindings::<f64>::new(vec![0.5], vec![0.1]), 1).unwrap_err();
        assert!(matches!(err, Error::SurfaceNotFound { .. }), "{err:?}");
    }

    #[test]
    fn free_particle_surface_is_everything() {
        let sys = system("dot(v,v)/2", 2, &[]);
        let an = Analyzer::new(&sys, Tolerances::default(), 0);
        let seed = Bindings::<f64>::new(vec![0.1, 0.2], vec![0.3, 0.4]);
        assert_eq!(an.find_surface_point(&seed, 1).unwrap(), seed);
    }

    #[test]
    fn beta_vanishes_for_xbar_on_surface_and_is_kernel_shift_invariant() {
        let sys = hat();
        let an = Analyzer::new(&sys, Tolerances::default(), 1);
        let pt = an.find_surface_point(&Bindings::<f64>::new(vec![0.3, 0.9], vec![1.0, 0.2]), 1).unwrap();
        let tab = sys.tableau(&pt).unwrap();
        let kd = kernel_basis(&tab, &Tolerances::default());
        let x = xbar_unchecked(&kd, &tab);
        let beta = beta_residual(&tab, &x);
        assert!(beta.norm() < 1e-8, "{}", beta.norm());
        let shifted = beta_residual(&tab, &(&x + &kd.p[0] * 3.0 + &kd.g[0] * -2.0));
        assert!((shifted - beta).norm() < 1e-10);
    }

    #[test]
    fn hat_multiplier_is_determined() {
        let sys = hat();
        let an = Analyzer::new(&sys, Tolerances::default(), 1);
        let pt = an.find_surface_point(&Bindings::<f64>::new(vec![0.3, 0.9], vec![1.0, 0.2]), 1).unwrap();
        let s = an.level(&pt, 1).unwrap();
        let blk = an.gamma_block(&s).unwrap();
        assert_eq!(an.fd_rank(&blk.gamma, s.tab.scale()), 1);
        let an = an.with_ranks(vec![1]);
        let s2 = an.level(&pt, 2).unwrap();
        assert_eq!(s2.free, 0);
        assert!(s2.gammas[1].norm() < 1e-8);
    }
}
