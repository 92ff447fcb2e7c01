//! The stability DMI linking `(P_t, P_{t+1}, Y_t, ν_t)`, its pre-Schur form,
//! and a single-step certificate solver.

use nalgebra::DMatrix;

use crate::conic::{ExprMatrix, LinExpr, SdpProgram, SolveStatus, SolverOptions, SymBlockBuilder};
use crate::error::{Error, Result};
use crate::linalg::{mat_all_finite, max_eig, min_eig, spd_inverse};
use crate::plant::GAMMA1_FLOOR;
use crate::scalar::Real;

/// Per-step data of the tracking-error Lur'e system.
#[derive(Clone, Debug, PartialEq)]
pub struct DmiProblem<T: Real> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub c: DMatrix<T>,
    pub d: DMatrix<T>,
    pub e: DMatrix<T>,
    pub g: DMatrix<T>,
    pub gamma1: T,
    pub alpha: T,
    pub gamma2: T,
}

impl<T: Real> DmiProblem<T> {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_p(&self) -> usize {
        self.e.ncols()
    }

    pub fn n_q(&self) -> usize {
        self.c.nrows()
    }

    /// Block sizes `[n, n_p, n, n, n_q, n]`.
    pub fn block_sizes(&self) -> [usize; 6] {
        let n = self.n();
        [n, self.n_p(), n, n, self.n_q(), n]
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, np, nq) = (self.n(), self.m(), self.n_p(), self.n_q());
        let check = |name: &str, x: &DMatrix<T>, r: usize, c: usize| {
            if x.shape() != (r, c) {
                Err(Error::contract(format!("{name} is {:?}, expected ({r}, {c})", x.shape())))
            } else if !mat_all_finite(x) {
                Err(Error::contract(format!("{name} has non-finite entries")))
            } else {
                Ok(())
            }
        };
        check("A", &self.a, n, n)?;
        check("B", &self.b, n, m)?;
        check("C", &self.c, nq, n)?;
        check("D", &self.d, nq, m)?;
        check("E", &self.e, n, np)?;
        check("G", &self.g, nq, n)?;
        if !(self.alpha > T::zero() && self.alpha <= T::one()) {
            return Err(Error::contract("alpha must lie in (0, 1]"));
        }
        if !(self.gamma2 > T::zero()) || !self.gamma2.is_finite_val() {
            return Err(Error::contract("gamma2 must be positive"));
        }
        if !(self.gamma1 >= T::lit(GAMMA1_FLOOR)) || !self.gamma1.is_finite_val() {
            return Err(Error::contract("gamma1 below floor"));
        }
        Ok(())
    }
}

fn check_var_shapes<T: Real>(
    pr: &DmiProblem<T>,
    p: &ExprMatrix<T>,
    p_next: &ExprMatrix<T>,
    y: &ExprMatrix<T>,
) -> Result<()> {
    let (n, m) = (pr.n(), pr.m());
    if (p.nrows(), p.ncols()) != (n, n) || (p_next.nrows(), p_next.ncols()) != (n, n) {
        return Err(Error::contract("P_t and P_{t+1} must be n×n"));
    }
    if (y.nrows(), y.ncols()) != (m, n) {
        return Err(Error::contract("Y_t must be m×n"));
    }
    Ok(())
}

/// Assembles the DMI in the printed layout: diagonal
/// `[αP_t, ν_t I, γ₂I, P_{t+1}, ν_t/γ₁² I, γ₂I]`.
pub fn build_dmi<T: Real>(
    pr: &DmiProblem<T>,
    p: &ExprMatrix<T>,
    p_next: &ExprMatrix<T>,
    y: &ExprMatrix<T>,
    nu: &LinExpr<T>,
) -> Result<ExprMatrix<T>> {
    pr.validate()?;
    check_var_shapes(pr, p, p_next, y)?;
    let inv_g1_sq = T::one() / (pr.gamma1 * pr.gamma1);
    assemble(pr, p, p_next, y, nu, T::one(), inv_g1_sq)
}

/// The same inequality after congruence with `γ₁` on block row 5:
/// `(1,5) = γ₁H²ᵀ`, `(3,5) = γ₁Gᵀ`, `(5,5) = ν_t I`. Keeps entries bounded
/// when `γ₁` sits at its floor.
pub fn build_dmi_scaled<T: Real>(
    pr: &DmiProblem<T>,
    p: &ExprMatrix<T>,
    p_next: &ExprMatrix<T>,
    y: &ExprMatrix<T>,
    nu: &LinExpr<T>,
) -> Result<ExprMatrix<T>> {
    pr.validate()?;
    check_var_shapes(pr, p, p_next, y)?;
    assemble(pr, p, p_next, y, nu, pr.gamma1, T::one())
}

fn assemble<T: Real>(
    pr: &DmiProblem<T>,
    p: &ExprMatrix<T>,
    p_next: &ExprMatrix<T>,
    y: &ExprMatrix<T>,
    nu: &LinExpr<T>,
    row5: T,
    diag5: T,
) -> Result<ExprMatrix<T>> {
    let sizes = pr.block_sizes();
    let [n, np, _, _, nq, _] = sizes;
    let h1 = p.lmul(&pr.a).plus(&y.lmul(&pr.b));
    let h2 = p.lmul(&pr.c).plus(&y.lmul(&pr.d));
    let nu_e_t = ExprMatrix::from_fn(np, n, |i, j| nu.scaled(pr.e[(j, i)]));
    let g2 = LinExpr::constant(pr.gamma2);

    let mut bb = SymBlockBuilder::new(&sizes);
    bb.set(0, 0, &p.scaled(pr.alpha))
        .set(0, 3, &h1.transpose())
        .set(0, 4, &h2.transpose().scaled(row5))
        .set(0, 5, p)
        .set(1, 1, &ExprMatrix::scaled_identity(np, nu))
        .set(1, 3, &nu_e_t)
        .set(2, 2, &ExprMatrix::scaled_identity(n, &g2))
        .set(2, 3, &ExprMatrix::identity(n))
        .set(2, 4, &ExprMatrix::from_const(&(pr.g.transpose() * row5)))
        .set(3, 3, p_next)
        .set(4, 4, &ExprMatrix::scaled_identity(nq, &nu.scaled(diag5)))
        .set(5, 5, &ExprMatrix::scaled_identity(n, &g2));
    Ok(bb.build())
}

/// Numeric DMI at `(P_t, P_{t+1}, Y_t, ν_t)`.
pub fn dmi_matrix<T: Real>(
    pr: &DmiProblem<T>,
    p: &DMatrix<T>,
    p_next: &DMatrix<T>,
    y: &DMatrix<T>,
    nu: T,
) -> Result<DMatrix<T>> {
    let m = build_dmi(
        pr,
        &ExprMatrix::from_const(p),
        &ExprMatrix::from_const(p_next),
        &ExprMatrix::from_const(y),
        &LinExpr::constant(nu),
    )?;
    Ok(m.eval(&[]))
}

/// Pre-Schur quadratic form in `(η, p̃, Δ̂)`; the DMI holds iff this is `⪯ 0`.
pub fn pre_schur_matrix<T: Real>(
    pr: &DmiProblem<T>,
    p: &DMatrix<T>,
    p_next: &DMatrix<T>,
    k: &DMatrix<T>,
    lambda_p: T,
) -> Result<DMatrix<T>> {
    pr.validate()?;
    let (n, m, np, nq) = (pr.n(), pr.m(), pr.n_p(), pr.n_q());
    if p.shape() != (n, n) || p_next.shape() != (n, n) || k.shape() != (m, n) {
        return Err(Error::contract("pre_schur_matrix: dimension mismatch"));
    }
    let p_inv = spd_inverse(p)?;
    let pn_inv = spd_inverse(p_next)?;
    let dim = n + np + n;
    let a_cl = &pr.a + &pr.b * k;
    let c_cl = &pr.c + &pr.d * k;

    // M = [A_cl, E, I] so that η₊ = M (η, p̃, Δ̂).
    let mut big_m = DMatrix::zeros(n, dim);
    big_m.view_mut((0, 0), (n, n)).copy_from(&a_cl);
    big_m.view_mut((0, n), (n, np)).copy_from(&pr.e);
    big_m.view_mut((0, n + np), (n, n)).fill_with_identity();
    let mut phi = big_m.transpose() * pn_inv * &big_m;

    let mut q_row = DMatrix::zeros(nq, dim);
    q_row.view_mut((0, 0), (nq, n)).copy_from(&c_cl);
    q_row.view_mut((0, n + np), (nq, n)).copy_from(&pr.g);
    phi += q_row.transpose() * &q_row * (lambda_p * pr.gamma1 * pr.gamma1);

    let inv_g2 = T::one() / pr.gamma2;
    for i in 0..n {
        for j in 0..n {
            phi[(i, j)] -= pr.alpha * p_inv[(i, j)];
        }
        phi[(i, i)] += inv_g2;
        phi[(n + np + i, n + np + i)] -= pr.gamma2;
    }
    for i in 0..np {
        phi[(n + i, n + i)] -= lambda_p;
    }
    Ok(phi)
}

/// Feasibility of both sides of the Schur chain, each judged with tolerance `tol`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivalenceReport<T> {
    pub pre_schur_max_eig: T,
    pub dmi_min_eig: T,
    pub pre_schur_feasible: bool,
    pub dmi_feasible: bool,
}

impl<T> EquivalenceReport<T> {
    pub fn agrees(&self) -> bool {
        self.pre_schur_feasible == self.dmi_feasible
    }
}

pub const EQUIVALENCE_TOL: f64 = 1e-7;

pub fn dmi_equivalence_report<T: Real>(
    pr: &DmiProblem<T>,
    p: &DMatrix<T>,
    p_next: &DMatrix<T>,
    k: &DMatrix<T>,
    lambda_p: T,
) -> Result<EquivalenceReport<T>> {
    if !(lambda_p > T::zero()) {
        return Err(Error::contract("λ_p must be positive"));
    }
    let phi = pre_schur_matrix(pr, p, p_next, k, lambda_p)?;
    let y = k * p;
    let dmi = dmi_matrix(pr, p, p_next, &y, T::one() / lambda_p)?;
    let tol = T::lit(EQUIVALENCE_TOL);
    let pre = max_eig(&phi);
    let post = min_eig(&dmi);
    Ok(EquivalenceReport {
        pre_schur_max_eig: pre,
        dmi_min_eig: post,
        pre_schur_feasible: pre <= tol,
        dmi_feasible: post >= -tol,
    })
}

/// True iff the pre-Schur condition and the assembled DMI (with `Y = KP`,
/// `ν = 1/λ_p`) agree in feasibility.
pub fn dmi_equivalence_check<T: Real>(
    pr: &DmiProblem<T>,
    p: &DMatrix<T>,
    p_next: &DMatrix<T>,
    k: &DMatrix<T>,
    lambda_p: T,
) -> Result<bool> {
    Ok(dmi_equivalence_report(pr, p, p_next, k, lambda_p)?.agrees())
}

/// One-step DMI certificate.
#[derive(Clone, Debug)]
pub struct DmiCertificate<T: Real> {
    pub p: DMatrix<T>,
    pub p_next: DMatrix<T>,
    pub y: DMatrix<T>,
    pub k: DMatrix<T>,
    pub nu: T,
    pub dmi_min_eig: T,
}

/// Finds any `(P_t, P_{t+1}, Y_t, ν_t)` with `P ⪰ I` satisfying the DMI with
/// margin, minimizing `tr P_t + tr P_{t+1}`.
pub fn solve_dmi<T: Real>(pr: &DmiProblem<T>, margin: T, options: &SolverOptions<T>) -> Result<DmiCertificate<T>> {
    pr.validate()?;
    let (n, m) = (pr.n(), pr.m());
    let mut prog = SdpProgram::new();
    prog.options = options.clone();
    let p = prog.new_sym("P", n);
    let pn = prog.new_sym("Pn", n);
    let y = prog.new_mat("Y", m, n);
    let nu = prog.new_var("nu");
    for i in 0..n {
        prog.add_objective(p.id(i, i), T::one());
        prog.add_objective(pn.id(i, i), T::one());
    }
    prog.add_psd("P>=I", p.expr().minus(&ExprMatrix::identity(n)));
    prog.add_psd("Pn>=I", pn.expr().minus(&ExprMatrix::identity(n)));
    let dmi = build_dmi_scaled(pr, &p.expr(), &pn.expr(), &y.expr(), &LinExpr::var(nu))?;
    let dim = dmi.nrows();
    prog.add_psd("dmi", dmi.minus(&ExprMatrix::scaled_identity(dim, &LinExpr::constant(margin))));
    let sol = prog.solve()?;
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => return Err(Error::Infeasible("dmi".into())),
        SolveStatus::NumericalFailure => return Err(Error::numerical(sol.diagnostics)),
    }
    let pv = p.value(&sol.x);
    let pnv = pn.value(&sol.x);
    let yv = y.value(&sol.x);
    let nuv = sol.x[nu];
    let k = gain_from(&pv, &yv)?;
    let dmi_min_eig = min_eig(&dmi_matrix(pr, &pv, &pnv, &yv, nuv)?);
    Ok(DmiCertificate { p: pv, p_next: pnv, y: yv, k, nu: nuv, dmi_min_eig })
}

/// `K = Y P⁻¹` through a Cholesky solve of `P Kᵀ = Yᵀ`.
pub fn gain_from<T: Real>(p: &DMatrix<T>, y: &DMatrix<T>) -> Result<DMatrix<T>> {
    let chol = p.clone().cholesky().ok_or_else(|| Error::contract("P is not positive definite"))?;
    Ok(chol.solve(&y.transpose()).transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(a: f64, b: f64, gamma2: f64) -> DmiProblem<f64> {
        let z = DMatrix::zeros(1, 1);
        DmiProblem {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            c: z.clone(),
            d: z.clone(),
            e: z.clone(),
            g: z,
            gamma1: 1.0,
            alpha: 1.0,
            gamma2,
        }
    }

    fn one(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, m: usize, gamma2: f64) -> DmiProblem<f64> {
        let mut r = |r: usize, c: usize, s: f64| DMatrix::from_fn(r, c, |_, _| s * (rng.random::<f64>() * 2.0 - 1.0));
        DmiProblem {
            a: r(n, n, 0.4),
            b: r(n, m, 1.0),
            c: r(1, n, 0.3),
            d: r(1, m, 0.3),
            e: r(n, 1, 0.3),
            g: r(1, n, 0.2),
            gamma1: 0.5,
            alpha: 0.95,
            gamma2,
        }
    }

    #[test]
    fn boundary_example_layout() {
        let pr = scalar(0.0, 0.0, 1.0);
        let m = dmi_matrix(&pr, &one(1.0), &one(1.0), &one(0.0), 1.0).unwrap();
        let mut expect = DMatrix::<f64>::identity(6, 6);
        expect[(0, 5)] = 1.0;
        expect[(5, 0)] = 1.0;
        expect[(2, 3)] = 1.0;
        expect[(3, 2)] = 1.0;
        assert_eq!(m, expect);
        assert!(min_eig(&m).abs() < 1e-12);
    }

    #[test]
    fn boundary_example_both_sides_feasible() {
        let pr = scalar(0.0, 0.0, 1.0);
        let rep = dmi_equivalence_report(&pr, &one(1.0), &one(1.0), &one(0.0), 1.0).unwrap();
        assert!(rep.pre_schur_feasible && rep.dmi_feasible);
        assert!(rep.pre_schur_max_eig.abs() < 1e-12);
    }

    #[test]
    fn deadbeat_scalar_feasible() {
        let pr = scalar(0.5, 1.0, 100.0);
        let m = dmi_matrix(&pr, &one(1.0), &one(1.0), &one(-0.5), 1.0).unwrap();
        assert!(min_eig(&m) > 0.0);
    }

    #[test]
    fn affine_in_decision_variables() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pr = random_problem(&mut rng, 3, 2, 4.0);
        let mut prog = SdpProgram::<f64>::new();
        let p = prog.new_sym("P", 3);
        let pn = prog.new_sym("Pn", 3);
        let y = prog.new_mat("Y", 2, 3);
        let nu = prog.new_var("nu");
        let expr = build_dmi(&pr, &p.expr(), &pn.expr(), &y.expr(), &LinExpr::var(nu)).unwrap();
        let nv = prog.num_vars();
        let x1: Vec<f64> = (0..nv).map(|_| rng.random()).collect();
        let x2: Vec<f64> = (0..nv).map(|_| rng.random()).collect();
        let mid: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| 0.3 * a + 0.7 * b).collect();
        let lhs = expr.eval(&mid);
        let rhs = expr.eval(&x1) * 0.3 + expr.eval(&x2) * 0.7;
        assert!((lhs - rhs).abs().max() < 1e-12);
        // Evaluating the expression agrees with the numeric assembly.
        let direct = dmi_matrix(&pr, &p.value(&x1), &pn.value(&x1), &y.value(&x1), x1[nu]).unwrap();
        assert!((expr.eval(&x1) - direct).abs().max() < 1e-12);
    }

    #[test]
    fn scaled_form_is_congruent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pr = random_problem(&mut rng, 2, 1, 3.0);
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let pn = DMatrix::from_row_slice(2, 2, &[1.5, -0.2, -0.2, 1.2]);
        let y = DMatrix::from_row_slice(1, 2, &[-0.4, 0.1]);
        let c = |m: &DMatrix<f64>| ExprMatrix::from_const(m);
        let plain = build_dmi(&pr, &c(&p), &c(&pn), &c(&y), &LinExpr::constant(0.7)).unwrap().eval(&[]);
        let scaled = build_dmi_scaled(&pr, &c(&p), &c(&pn), &c(&y), &LinExpr::constant(0.7)).unwrap().eval(&[]);
        let mut t = DMatrix::<f64>::identity(plain.nrows(), plain.nrows());
        let off: usize = pr.block_sizes()[..4].iter().sum();
        for i in 0..pr.n_q() {
            t[(off + i, off + i)] = pr.gamma1;
        }
        let cong = &t * plain * &t;
        assert!((cong - scaled).abs().max() < 1e-12);
    }

    #[test]
    fn joint_scaling_is_not_scale_invariant() {
        // A certified instance stays PSD only in rows/cols 1, 2, 4 under joint
        // scaling; the constant rows 3 and 6 break invariance.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pr = random_problem(&mut rng, 2, 1, 2.0);
        let cert = solve_dmi(&pr, 1e-7, &SolverOptions::default()).unwrap();
        assert!(cert.dmi_min_eig > 0.0);
        let s = 1e3;
        let scaled = dmi_matrix(&pr, &(&cert.p * s), &(&cert.p_next * s), &(&cert.y * s), cert.nu * s).unwrap();
        assert!(min_eig(&scaled) < 0.0);

        // The varying blocks scale exactly by s; the constant ones do not move.
        let base = dmi_matrix(&pr, &cert.p, &cert.p_next, &cert.y, cert.nu).unwrap();
        let sizes = pr.block_sizes();
        let mut off = [0; 6];
        for i in 1..6 {
            off[i] = off[i - 1] + sizes[i - 1];
        }
        let varying = [0, 1, 3];
        for bi in 0..6 {
            for bj in 0..6 {
                for i in 0..sizes[bi] {
                    for j in 0..sizes[bj] {
                        let (r, c) = (off[bi] + i, off[bj] + j);
                        let expect = if varying.contains(&bi) && varying.contains(&bj)
                            || (varying.contains(&bi) && bj == 5)
                            || (bi == 5 && varying.contains(&bj))
                            || (bi == 0 && bj == 4)
                            || (bi == 4 && bj == 0)
                            || (bi == 4 && bj == 4)
                        {
                            base[(r, c)] * s
                        } else {
                            base[(r, c)]
                        };
                        assert!((scaled[(r, c)] - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
                    }
                }
            }
        }
    }

    #[test]
    fn infeasible_and_feasible_random_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tiny = random_problem(&mut rng, 2, 1, 1e-3);
        let p = DMatrix::<f64>::identity(2, 2);
        let k = DMatrix::from_row_slice(1, 2, &[0.1, -0.2]);
        let rep = dmi_equivalence_report(&tiny, &p, &p, &k, 1.0).unwrap();
        assert!(!rep.pre_schur_feasible && !rep.dmi_feasible);

        let mut stable = random_problem(&mut rng, 2, 1, 1e3);
        stable.a *= 0.1;
        stable.c *= 0.1;
        stable.e *= 0.1;
        stable.g *= 0.1;
        stable.alpha = 1.0;
        let pp = DMatrix::<f64>::identity(2, 2) * 10.0;
        let k0 = DMatrix::zeros(1, 2);
        let rep = dmi_equivalence_report(&stable, &pp, &pp, &k0, 1.0).unwrap();
        assert!(rep.pre_schur_feasible && rep.dmi_feasible, "{rep:?}");
    }

    #[test]
    fn singular_p_is_contract_error() {
        let pr = scalar(0.5, 1.0, 1.0);
        let r = dmi_equivalence_check(&pr, &one(0.0), &one(1.0), &one(0.0), 1.0);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let pr = scalar(0.5, 1.0, 1.0);
        let r = dmi_matrix(&pr, &DMatrix::identity(2, 2), &one(1.0), &one(0.0), 1.0);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn certificate_gain_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pr = random_problem(&mut rng, 3, 2, 5.0);
        let cert = solve_dmi(&pr, 1e-7, &SolverOptions::default()).unwrap();
        assert!((&cert.k * &cert.p - &cert.y).amax() < 1e-8);
        assert!(cert.dmi_min_eig > -1e-6);
    }
}
