mod common;

use nalgebra::DMatrix;
use singlag::constraints::gamma1;
use singlag::expr::parse;
use singlag::linalg::{spectral_norm, SortedSvd};
use singlag::presym::{kernel_basis, omega_matrix, symmetry_generator_check};
use singlag::Tolerances;

#[test]
fn kernel_invariants_hold_across_the_catalog() {
    let tol = Tolerances::default();
    for e in common::catalog() {
        let d = e.sys.dim;
        for pt in common::cloud(&e, 100, 13) {
            let tab = e.sys.tableau(&pt).unwrap();
            let kd = kernel_basis(&tab, &tol);
            let omega = omega_matrix(&tab);
            let on = spectral_norm(&omega);
            for p in &kd.p {
                assert!((&omega * p).norm() <= 1e-8 * on, "{}", e.name);
            }
            for n in 0..kd.n0 {
                assert!((&tab.m * kd.z.row(n).transpose()).norm() <= 1e-9 * kd.sigma_max, "{}", e.name);
            }
            assert!((&kd.theta_q * kd.z.transpose() - DMatrix::identity(kd.n0, kd.n0)).amax() < 1e-12);
            assert!((&kd.pker_m * &kd.pker_m - &kd.pker_m).amax() <= 1e-10);
            assert!((&kd.pker_m - kd.pker_m.transpose()).amax() <= 1e-12);
            assert!(kd.almost_regular && kd.fbar_norm <= 1e-8, "{}: {:e}", e.name, kd.fbar_norm);
            let rank = SortedSvd::new(&omega).rank(tol.eps_rank);
            assert_eq!(rank, 2 * d - 2 * kd.n0, "{}", e.name);
            assert_eq!(kd.kernel_omega_dim(), 2 * kd.n0);
            assert!((&omega + omega.transpose()).amax() <= 1e-12);
        }
    }
}

#[test]
fn constraint_norm_ignores_the_kernel_basis() {
    let tol = Tolerances::default();
    let e = common::conformal_pair();
    for pt in common::cloud(&e, 20, 17) {
        let tab = e.sys.tableau(&pt).unwrap();
        let kd = kernel_basis(&tab, &tol);
        let (c, s) = (0.6f64, 0.8f64);
        let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let mut mixed = kd.clone();
        mixed.z = &rot * &kd.z;
        let a = gamma1(&kd, &tab).norm();
        let b = gamma1(&mixed, &tab).norm();
        assert!((a - b).abs() <= 1e-9 * (1.0 + a));
    }
}

#[test]
fn nullities_match_the_examples() {
    let tol = Tolerances::default();
    for (e, n0) in [
        (common::free_particle(), 0),
        (common::mexican_hat(), 1),
        (common::conformal_pair(), 2),
        (common::conformal_relativistic(), 2),
    ] {
        for pt in common::cloud(&e, 20, 3) {
            let kd = kernel_basis(&e.sys.tableau(&pt).unwrap(), &tol);
            assert_eq!(kd.n0, n0, "{}", e.name);
            if n0 == 2 && e.name == "ex2_conformal_pair" {
                assert!(kd.fbar_norm <= 1e-9);
            }
        }
    }
}

#[test]
fn dilation_is_a_generalized_symmetry() {
    for e in [common::symmetric(), common::conformal_relativistic()] {
        let d = e.sys.dim;
        let rho: Vec<_> = (1..=d).map(|a| parse(&format!("q{a}"), d, &[]).unwrap()).collect();
        let rhodot: Vec<_> = (1..=d).map(|a| parse(&format!("v{a}"), d, &[]).unwrap()).collect();
        let pts = common::cloud(&e, 20, 4);
        assert!(symmetry_generator_check(&e.sys, &rho, &rhodot, &pts).unwrap().pass, "{}", e.name);
        let bad: Vec<_> = (1..=d).map(|a| parse(if a == 1 { "1" } else { "0" }, d, &[]).unwrap()).collect();
        let rep = symmetry_generator_check(&e.sys, &bad, &rhodot, &pts).unwrap();
        assert!(!rep.pass && rep.residuals.iter().any(|r| r.kernel > 1e-3));
    }
}
