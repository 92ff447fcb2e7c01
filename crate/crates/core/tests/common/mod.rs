#![allow(dead_code)]

use std::path::PathBuf;

use funnel_recovery::conic::SolverOptions;
use funnel_recovery::linalg::inv_quad_form;
use funnel_recovery::runner::RunConfig;
use funnel_recovery::synthesis::{solve_dmi, DmiCertificate, DmiProblem};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn microgrid_config() -> RunConfig {
    RunConfig::load(&workspace_root().join("configs/microgrid.toml")).expect("microgrid config")
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

pub fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    loop {
        let v = normal_vec(rng, n);
        let norm = v.norm();
        if norm > 1e-8 {
            return v / norm;
        }
    }
}

pub fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| uniform(rng, -s, s))
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let q = random_mat(rng, n, n, 1.0).qr().q();
    let d = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| uniform(rng, lo, hi)));
    let p = &q * d * q.transpose();
    (&p + p.transpose()) * 0.5
}

/// Random Lur'e instance with `n ≤ 4`, one sector channel.
pub fn random_problem(rng: &mut ChaCha8Rng) -> DmiProblem<f64> {
    let n = rng.random_range(1..=4);
    let m = rng.random_range(1..=n.min(2));
    DmiProblem {
        a: random_mat(rng, n, n, 0.6),
        b: random_mat(rng, n, m, 1.0),
        c: random_mat(rng, 1, n, 0.3),
        d: random_mat(rng, 1, m, 0.3),
        e: random_mat(rng, n, 1, 0.3),
        g: random_mat(rng, 1, n, 0.2),
        gamma1: uniform(rng, 0.2, 1.0),
        alpha: uniform(rng, 0.9, 1.0),
        gamma2: uniform(rng, 3.0, 8.0),
    }
}

/// Draws instances until `count` carry a solver certificate with a
/// nonnegative assembled DMI spectrum.
pub fn certified_instances(rng: &mut ChaCha8Rng, count: usize) -> Vec<(DmiProblem<f64>, DmiCertificate<f64>)> {
    let mut out = Vec::new();
    for _ in 0..50 * count {
        if out.len() == count {
            break;
        }
        let pr = random_problem(rng);
        if let Ok(cert) = solve_dmi(&pr, 1e-7, &SolverOptions::default()) {
            if cert.dmi_min_eig >= 0.0 {
                out.push((pr, cert));
            }
        }
    }
    out
}

/// One closed-loop transition `η₊ = (A + BK)η + E p̃ + Δ̂` and the sector
/// argument `q̃ = (C + DK)η + G Δ̂`.
pub fn closed_loop(pr: &DmiProblem<f64>, k: &DMatrix<f64>, eta: &DVector<f64>, p: &DVector<f64>, dh: &DVector<f64>) -> DVector<f64> {
    (&pr.a + &pr.b * k) * eta + &pr.e * p + dh
}

pub fn sector_arg(pr: &DmiProblem<f64>, k: &DMatrix<f64>, eta: &DVector<f64>, dh: &DVector<f64>) -> DVector<f64> {
    (&pr.c + &pr.d * k) * eta + &pr.g * dh
}

pub fn v(p: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    inv_quad_form(p, x).expect("SPD")
}
