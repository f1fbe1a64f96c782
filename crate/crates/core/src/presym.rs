//! Pointwise presymplectic linear algebra.
//!
//! Conventions: a tangent vector is the 2D-vector `(δq, δv)`. The two-form
//! acts as `Ω·(δq, δv) = (Fᵀδq − M δv, M δq)` with `F_ab = ∂²L/∂v^a∂q^b −
//! ∂²L/∂v^b∂q^a`, so that the energy equation reads `Ω·X = dE`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::Result;
use crate::expr::{Bindings, Expr, Tape};
use crate::linalg::SortedSvd;
use crate::scalar::Real;
use crate::system::{LagrangianSystem, Tableau};

/// Numerical thresholds shared by the analysis modules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerances {
    /// Relative singular-value cutoff for `M` and `Ω`.
    pub eps_rank: f64,
    /// Absolute bound on `F̄` entries for almost regularity.
    pub eps_constraint: f64,
    /// Relative singular-value cutoff for finite-difference matrices.
    pub fd_rank: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { eps_rank: 1e-9, eps_constraint: 1e-8, fd_rank: 1e-6 }
    }
}

/// Kernel structure of `M` and `Ω` at one point.
#[derive(Debug, Clone)]
pub struct KernelData<T: Real = f64> {
    pub point: Bindings<T>,
    pub n0: usize,
    pub rank_m: usize,
    pub sigma_max: T,
    /// Rows `𝔷_(n)`, orthonormal, ordered by ascending singular value.
    pub z: DMatrix<T>,
    pub fbar: DMatrix<T>,
    /// Rows `Ĉ_(n)`, the minimal-norm solutions of `M Ĉ = −F 𝔷_(n)`.
    pub chat: DMatrix<T>,
    /// `P_(n) = (𝔷_(n), Ĉ_(n))`.
    pub p: Vec<DVector<T>>,
    /// `G_(n) = (0, 𝔷_(n))`.
    pub g: Vec<DVector<T>>,
    /// Coefficients of the dual forms `Θ^(n)_q`; equal to `z` for an
    /// orthonormal basis.
    pub theta_q: DMatrix<T>,
    pub pker_m: DMatrix<T>,
    /// Pseudo-inverse of `M` truncated at its numerical rank.
    pub m_pinv: DMatrix<T>,
    /// Nullity of `F̄`.
    pub d_bar: usize,
    pub fbar_norm: T,
    pub almost_regular: bool,
}

impl<T: Real> KernelData<T> {
    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    /// `dim ker Ω = N0 + D̄`.
    pub fn kernel_omega_dim(&self) -> usize {
        self.n0 + self.d_bar
    }
}

pub fn kernel_basis<T: Real>(tab: &Tableau<T>, tol: &Tolerances) -> KernelData<T> {
    let d = tab.dim();
    let svd = SortedSvd::new(&tab.m);
    let rank_m = svd.rank(T::lit(tol.eps_rank));
    let n0 = d - rank_m;
    let mut z = svd.null_rows(rank_m);
    // ascending singular value: the last rows of a descending SVD come first
    // and each row is signed so its largest-magnitude entry is positive
    let rows: Vec<DVector<T>> = (0..n0)
        .rev()
        .map(|k| {
            let r = z.row(k).transpose();
            let lead = r.iter().copied().fold(T::zero(), |a, x| if x.abs() > a.abs() { x } else { a });
            if lead < T::zero() {
                -r
            } else {
                r
            }
        })
        .collect();
    z = DMatrix::from_fn(n0, d, |k, j| rows[k][j]);
    let m_pinv = svd.pinv(rank_m);
    let fbar = &z * &tab.f * z.transpose();
    let chat = -(&m_pinv * &tab.f * z.transpose()).transpose();
    let pker_m = z.transpose() * &z;
    let stack = |a: DVector<T>, b: DVector<T>| DVector::from_fn(2 * d, |i, _| if i < d { a[i] } else { b[i - d] });
    let p = (0..n0).map(|n| stack(z.row(n).transpose(), chat.row(n).transpose())).collect();
    let g = (0..n0).map(|n| stack(DVector::zeros(d), z.row(n).transpose())).collect();
    let fbar_norm = crate::linalg::max_abs(&fbar);
    let eps_c = T::lit(tol.eps_constraint);
    let d_bar = if n0 == 0 {
        0
    } else {
        let fsvd = SortedSvd::new(&fbar);
        n0 - fsvd.rank_above(eps_c)
    };
    KernelData {
        point: tab.point.clone(),
        n0,
        rank_m,
        sigma_max: svd.sigma_max(),
        theta_q: z.clone(),
        z,
        fbar,
        chat,
        p,
        g,
        pker_m,
        m_pinv,
        d_bar,
        fbar_norm,
        almost_regular: fbar_norm <= eps_c,
    }
}

/// The 2D×2D matrix of `Ω` on `(δq, δv)`.
pub fn omega_matrix<T: Real>(tab: &Tableau<T>) -> DMatrix<T> {
    let d = tab.dim();
    let mut w = DMatrix::zeros(2 * d, 2 * d);
    w.view_mut((0, 0), (d, d)).copy_from(&tab.f.transpose());
    w.view_mut((0, d), (d, d)).copy_from(&(-&tab.m));
    w.view_mut((d, 0), (d, d)).copy_from(&tab.m);
    w
}

pub fn projector_kerm<T: Real>(tab: &Tableau<T>, tol: &Tolerances) -> DMatrix<T> {
    kernel_basis(tab, tol).pker_m
}

/// The kernel vector generated by a horizontal direction `w`:
/// `K(w) = (P w, −M⁺ F P w)` with `P` the projector onto `ker M`.
/// `K(𝔷_(n)) = P_(n)`.
pub fn kernel_vector<T: Real>(kd: &KernelData<T>, tab: &Tableau<T>, w: &DVector<T>) -> DVector<T> {
    let d = tab.dim();
    let pw = &kd.pker_m * w;
    let vert = -(&kd.m_pinv * (&tab.f * &pw));
    DVector::from_fn(2 * d, |i, _| if i < d { pw[i] } else { vert[i - d] })
}

/// Basis of `ker Ω` as columns: `K(𝔷)` over the null space of `F̄`, then
/// the vertical `G_(n)`.
pub fn kernel_omega_basis<T: Real>(kd: &KernelData<T>, tab: &Tableau<T>) -> DMatrix<T> {
    let d = tab.dim();
    let mut cols: Vec<DVector<T>> = Vec::new();
    if kd.n0 > 0 {
        let fsvd = SortedSvd::new(&kd.fbar);
        let r = kd.n0 - kd.d_bar;
        let null = fsvd.null_rows(r);
        for k in 0..null.nrows() {
            let w = kd.z.transpose() * null.row(k).transpose();
            cols.push(kernel_vector(kd, tab, &w));
        }
    }
    cols.extend(kd.g.iter().cloned());
    DMatrix::from_fn(2 * d, cols.len(), |i, j| cols[j][i])
}

/// Residuals of the generalized-symmetry conditions at one point.
#[derive(Debug, Clone, Serialize)]
pub struct SymmetryResidual {
    pub point: Vec<f64>,
    /// `‖M ρ‖`
    pub kernel: f64,
    /// `‖F ρ + M ρ̇‖`
    pub transport: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SymmetryReport {
    pub residuals: Vec<SymmetryResidual>,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn symmetry_generator_check(
    sys: &LagrangianSystem,
    rho: &[Expr],
    rhodot: &[Expr],
    points: &[Bindings],
) -> Result<SymmetryReport> {
    const TOL: f64 = 1e-8;
    let d = sys.dim;
    if rho.len() != d || rhodot.len() != d {
        return Err(crate::Error::Dimension { expected: d, got: rho.len().min(rhodot.len()) });
    }
    let rho = rho.iter().map(|e| sys.bind_params(e)).collect::<Result<Vec<_>>>()?;
    let rhodot = rhodot.iter().map(|e| sys.bind_params(e)).collect::<Result<Vec<_>>>()?;
    let tape = Tape::compile(rho.iter().chain(&rhodot));
    let mut residuals = Vec::with_capacity(points.len());
    for pt in points {
        let tab = sys.tableau(pt)?;
        let vals = tape.eval(pt)?;
        let r = DVector::from_column_slice(&vals[..d]);
        let rd = DVector::from_column_slice(&vals[d..]);
        residuals.push(SymmetryResidual {
            point: pt.state().iter().copied().collect(),
            kernel: (&tab.m * &r).norm(),
            transport: (&tab.f * &r + &tab.m * &rd).norm(),
        });
    }
    let pass = residuals.iter().all(|r| r.kernel <= TOL && r.transport <= TOL);
    Ok(SymmetryReport { residuals, tolerance: TOL, pass })
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

    const CONFORMAL: &str = "m/2*(dot(v,v)/dot(q,q) - dot(q,v)^2/dot(q,q)^2)";

    #[test]
    fn free_particle_is_regular() {
        let sys = system("dot(v,v)/2", 2, &[]);
        let tab = sys.tableau(&Bindings::<f64>::new(vec![1.0, 2.0], vec![0.1, 0.3])).unwrap();
        let kd = kernel_basis(&tab, &Tolerances::default());
        assert_eq!(kd.n0, 0);
        assert!(kd.p.is_empty());
        assert_eq!(kd.pker_m, DMatrix::zeros(2, 2));
        let w = omega_matrix(&tab);
        let expect = DMatrix::from_row_slice(
            4,
            4,
            &[
                0., 0., -1., 0., //
                0., 0., 0., -1., //
                1., 0., 0., 0., //
                0., 1., 0., 0.,
            ],
        );
        assert_eq!(w, expect);
    }

    #[test]
    fn conformal_kernel() {
        let sys = system(CONFORMAL, 2, &[("m", 1.0)]);
        let (q, v) = (vec![0.6, -1.3], vec![0.4, 0.9]);
        let tab = sys.tableau(&Bindings::<f64>::new(q.clone(), v.clone())).unwrap();
        let kd = kernel_basis(&tab, &Tolerances::default());
        assert_eq!(kd.n0, 1);
        let qv = DVector::from_vec(q);
        let qhat = &qv / qv.norm();
        assert!((kd.z.row(0).transpose().dot(&qhat).abs() - 1.0).abs() < 1e-12);
        assert!((&kd.pker_m - &qhat * qhat.transpose()).norm() < 1e-12);
        let w = omega_matrix(&tab);
        assert!((&w + w.transpose()).norm() < 1e-12);
        for p in kd.p.iter().chain(&kd.g) {
            assert!((&w * p).norm() <= 1e-8 * w.norm());
        }
        assert_eq!(SortedSvd::new(&w).rank(1e-9), 2);
    }

    #[test]
    fn kernel_vector_matches_p() {
        let sys = system(CONFORMAL, 2, &[("m", 2.0)]);
        let tab = sys.tableau(&Bindings::<f64>::new(vec![0.2, 0.7], vec![-0.5, 0.3])).unwrap();
        let kd = kernel_basis(&tab, &Tolerances::default());
        let k = kernel_vector(&kd, &tab, &kd.z.row(0).transpose());
        assert!((k - &kd.p[0]).norm() < 1e-12);
        assert_eq!(kernel_omega_basis(&kd, &tab).ncols(), 2);
    }

    #[test]
    fn conformal_generator() {
        let sys = system(CONFORMAL, 2, &[("m", 1.0)]);
        let rho = [Expr::q(0), Expr::q(1)];
        let rhodot = [Expr::v(0), Expr::v(1)];
        let pts = [
            Bindings::<f64>::new(vec![0.3, 1.1], vec![2.0, -0.4]),
            Bindings::<f64>::new(vec![-1.0, 0.2], vec![0.1, 0.1]),
        ];
        assert!(symmetry_generator_check(&sys, &rho, &rhodot, &pts).unwrap().pass);
        let bad = [Expr::v(1), Expr::q(0)];
        let report = symmetry_generator_check(&sys, &bad, &rhodot, &pts).unwrap();
        assert!(!report.pass);
        assert!(report.residuals[0].kernel > 1e-3);
    }
}
