//! Catalog Lagrangians and sampling helpers shared by the integration tests.
#![allow(dead_code)]

use singlag::expr::{parse, Bindings};
use singlag::sampling::{phase_cloud, rng, Spread};
use singlag::{LagrangianSystem, Tolerances};

pub const KIN: &str = "m/2*(dot(v,v)/dot(q,q) - dot(q,v)^2/dot(q,q)^2)";

pub struct Entry {
    pub name: &'static str,
    pub sys: LagrangianSystem,
    pub seed: Bindings,
}

fn build(name: &'static str, l: &str, dim: usize, params: &[(&str, f64)], q: Vec<f64>, v: Vec<f64>) -> Entry {
    let names: Vec<&str> = params.iter().map(|p| p.0).collect();
    let expr = parse(l, dim, &names).unwrap();
    let sys =
        LagrangianSystem::build(name, expr, dim, params.iter().map(|(k, v)| (k.to_string(), *v)).collect()).unwrap();
    Entry { name, sys, seed: Bindings::new(q, v) }
}

pub fn free_particle() -> Entry {
    build("free_particle", "m/2*dot(v,v)", 2, &[("m", 1.0)], vec![0.3, 0.2], vec![1.0, 0.5])
}

pub fn symmetric() -> Entry {
    build(
        "ex1_symmetric",
        &format!("{KIN} - k*q1*q2/dot(q,q)"),
        2,
        &[("m", 1.0), ("k", 1.0)],
        vec![1.0, 0.4],
        vec![0.2, 0.7],
    )
}

pub fn mexican_hat() -> Entry {
    let l = format!("{KIN} + lam/2*dot(q,q) - b/4*dot(q,q)^2");
    build("ex1_mexican_hat", &l, 2, &[("m", 1.0), ("lam", 1.0), ("b", 1.0)], vec![2.0, 0.0], vec![0.2, 0.7])
}

pub fn asymmetric() -> Entry {
    let l = format!("{KIN} - (q1 + 0.3*q1*q2/dot(q,q))");
    build("ex1_asymmetric", &l, 2, &[("m", 1.0)], vec![0.1, -1.0], vec![0.2, 0.7])
}

pub fn asymmetric_confined() -> Entry {
    let l = format!("{KIN} - (q1 + 0.3*q1*q2/dot(q,q) + dot(q,q)^2/4)");
    build("ex1_asymmetric_confined", &l, 2, &[("m", 1.0)], vec![-0.8, 0.3], vec![0.2, 0.7])
}

pub const R1: &str = "sqrt(q1^2+q2^2)";
pub const R2: &str = "sqrt(q3^2+q4^2)";

pub fn conformal_pair_lagrangian() -> String {
    let c = format!("(q1*q3+q2*q4)/({R1}*{R2})");
    let kin1 = "(v1^2+v2^2 - (q1*v1+q2*v2)^2/(q1^2+q2^2))/(q1^2+q2^2)";
    let kin2 = "(v3^2+v4^2 - (q3*v3+q4*v4)^2/(q3^2+q4^2))/(q3^2+q4^2)";
    let h1v2 = format!("(q1*v3+q2*v4)/{R1}");
    let h1v1 = format!("(q1*v1+q2*v2)/{R1}");
    let h2v1 = format!("(q3*v1+q4*v2)/{R2}");
    let h2v2 = format!("(q3*v3+q4*v4)/{R2}");
    format!("m/2*{kin1} + m/2*{kin2} + lam/2*({h1v2}/{R2} - {c}*{h1v1}/{R1} - {h2v1}/{R1} + {c}*{h2v2}/{R2})")
}

pub fn conformal_pair() -> Entry {
    let l = conformal_pair_lagrangian();
    build("ex2_conformal_pair", &l, 4, &[("m", 1.0), ("lam", 0.7)], vec![1.0, 0.2, 0.3, 1.1], vec![0.3, -0.5, 0.8, 0.1])
}

pub fn conformal_relativistic() -> Entry {
    let l = "s*m*sqrt(s*(dot(v,v)/dot(q,q) - dot(q,v)^2/dot(q,q)^2))";
    build("ex3_conformal_relativistic", l, 3, &[("m", 1.0), ("s", 1.0)], vec![1.0, 0.2, 0.3], vec![0.3, -0.5, 0.8])
}

pub fn catalog() -> Vec<Entry> {
    vec![
        free_particle(),
        symmetric(),
        mexican_hat(),
        asymmetric(),
        asymmetric_confined(),
        conformal_pair(),
        conformal_relativistic(),
    ]
}

/// `n` seeded points of constant rank around the entry's seed.
pub fn cloud(e: &Entry, n: usize, seed: u64) -> Vec<Bindings> {
    phase_cloud(&e.sys, &Tolerances::default(), &e.seed, n, Spread::default(), &mut rng(seed)).unwrap()
}
