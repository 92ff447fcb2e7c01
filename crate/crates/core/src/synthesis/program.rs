//! Offline and sliding-window funnel synthesis programs.

use std::fmt;
use std::time::Instant;

use nalgebra::DMatrix;

use super::dmi::{build_dmi_scaled, gain_from, DmiProblem};
use super::funnel::{
    contraction_k, face_distance, funnel_radius, input_constraint_expr, r_bar, state_constraint_scalar, RadiusMode,
};
use crate::conic::{ExprMatrix, LinExpr, MatVar, SdpProgram, SdpSolution, SolveStatus, SolverOptions, SymBlockBuilder, SymVar};
use crate::error::{Error, Result};
use crate::linalg::{mat_all_finite, min_eig};
use crate::plant::{NominalTrajectory, PlantModel};
use crate::scalar::Real;

/// Identity-direction slack used for every strict matrix inequality.
pub const EPS_SDP: f64 = 1e-7;

/// Constraint families, in the order they are enabled when diagnosing
/// infeasibility.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintClass {
    Base,
    Dmi,
    FunnelSize,
    StateGeometry,
    InputGeometry,
    Boundary,
}

impl ConstraintClass {
    pub const ALL: [ConstraintClass; 6] = [
        ConstraintClass::Base,
        ConstraintClass::Dmi,
        ConstraintClass::FunnelSize,
        ConstraintClass::StateGeometry,
        ConstraintClass::InputGeometry,
        ConstraintClass::Boundary,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ConstraintClass::Base => "base",
            ConstraintClass::Dmi => "dmi",
            ConstraintClass::FunnelSize => "funnel-size",
            ConstraintClass::StateGeometry => "state-geometry",
            ConstraintClass::InputGeometry => "input-geometry",
            ConstraintClass::Boundary => "boundary",
        }
    }
}

impl fmt::Display for ConstraintClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug)]
pub struct OfflineSettings<T: Real> {
    pub w1: T,
    pub w2: T,
    pub w3: T,
    pub gamma2: T,
    pub alpha: T,
    pub p_i: DMatrix<T>,
    pub p_f: DMatrix<T>,
    pub r0: T,
    pub rf: T,
    /// `‖Δ̂(·)‖∞` over the horizon.
    pub delta_inf: T,
    /// Radius fractions tried, halving from `0.9α`.
    pub max_radius_passes: usize,
}

#[derive(Clone, Debug)]
pub struct OnlineSettings<T: Real> {
    pub w1: T,
    pub w2: T,
    pub w3: T,
    pub w4: T,
    pub w5: T,
    pub gamma2: T,
    pub alpha: T,
    pub p_i: DMatrix<T>,
    pub p_f: DMatrix<T>,
    pub r_bar: T,
}

/// Funnel matrices, gains and radii over `[t1, t1 + N]`.
#[derive(Clone, Debug)]
pub struct FunnelSolution<T: Real> {
    pub t1: usize,
    pub p: Vec<DMatrix<T>>,
    pub y: Vec<DMatrix<T>>,
    /// `K_t = Y_t P_t⁻¹`.
    pub gains: Vec<DMatrix<T>>,
    pub nu: Vec<T>,
    pub r: Vec<T>,
    /// `k_t = 1 − λ_min(P_t)/γ₂`.
    pub k: Vec<T>,
    pub gamma2: T,
    pub alpha: T,
    pub objective: T,
    pub max_residual: T,
    pub solve_ms: f64,
    pub iterations: usize,
}

impl<T: Real> FunnelSolution<T> {
    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    /// Largest `|K_t P_t − Y_t|` entry.
    pub fn gain_residual(&self) -> T {
        self.gains
            .iter()
            .zip(&self.p)
            .zip(&self.y)
            .map(|((k, p), y)| (k * p - y).amax())
            .fold(T::zero(), |a, b| a.max(b))
    }

    pub fn inv_r(&self, i: usize) -> T {
        T::one() / self.r[i]
    }
}

pub fn dmi_problem<T: Real>(model: &PlantModel<T>, nom: &NominalTrajectory<T>, t: usize, alpha: T, gamma2: T) -> DmiProblem<T> {
    DmiProblem {
        a: nom.lin[t].a.clone(),
        b: nom.lin[t].b.clone(),
        c: model.c.clone(),
        d: model.d.clone(),
        e: model.e.clone(),
        g: model.g.clone(),
        gamma1: nom.gamma1[t],
        alpha,
        gamma2,
    }
}

fn eps_id<T: Real>(n: usize) -> ExprMatrix<T> {
    ExprMatrix::scaled_identity(n, &LinExpr::constant(T::lit(EPS_SDP)))
}

fn gain_block<T: Real>(mu: usize, y: &MatVar, p: &SymVar) -> ExprMatrix<T> {
    let mut bb = SymBlockBuilder::new(&[y.rows, p.n]);
    bb.set(0, 0, &ExprMatrix::scaled_identity(y.rows, &LinExpr::var(mu)))
        .set(0, 1, &y.expr())
        .set(1, 1, &p.expr());
    bb.build()
}

/// Per-halfspace geometry for the state funnel at `t`; `r` may be a
/// variable or a constant.
fn add_state_geometry<T: Real>(
    prog: &mut SdpProgram<T>,
    model: &PlantModel<T>,
    t: usize,
    x_bar: &nalgebra::DVector<T>,
    p: &SymVar,
    r: &LinExpr<T>,
) -> Result<()> {
    let poly = model.state_polytope(t);
    let pe = p.expr();
    for h in 0..poly.len() {
        let (a, b) = poly.halfspace(h);
        let d = face_distance(&a, b, x_bar).map_err(|e| Error::Geometry(format!("state waypoint t={t}, face {h}: {e}")))?;
        prog.add_linear_ge(format!("state-geometry[{t}][{h}]"), state_constraint_scalar(&a, d, &pe, r));
    }
    Ok(())
}

fn add_input_geometry<T: Real>(
    prog: &mut SdpProgram<T>,
    model: &PlantModel<T>,
    t: usize,
    u_bar: &nalgebra::DVector<T>,
    y: &MatVar,
    p: &SymVar,
    r: &LinExpr<T>,
) -> Result<()> {
    let poly = model.input_polytope(t);
    let (pe, ye) = (p.expr(), y.expr());
    for h in 0..poly.len() {
        let (a, b) = poly.halfspace(h);
        let d = face_distance(&a, b, u_bar).map_err(|e| Error::Geometry(format!("input waypoint t={t}, face {h}: {e}")))?;
        prog.add_psd(format!("input-geometry[{t}][{h}]"), input_constraint_expr(&a, d, &ye, &pe, r));
    }
    Ok(())
}

fn check_common<T: Real>(
    model: &PlantModel<T>,
    nom: &NominalTrajectory<T>,
    alpha: T,
    gamma2: T,
    p_i: &DMatrix<T>,
    p_f: &DMatrix<T>,
) -> Result<()> {
    model.validate()?;
    if nom.lin.len() != nom.horizon() || nom.gamma1.len() != nom.horizon() {
        return Err(Error::contract("nominal trajectory is missing per-step data"));
    }
    if !(alpha > T::zero() && alpha <= T::one()) {
        return Err(Error::contract("alpha must lie in (0, 1]"));
    }
    if !(gamma2 > T::zero()) {
        return Err(Error::contract("gamma2 must be positive"));
    }
    let n = model.n;
    if p_i.shape() != (n, n) || p_f.shape() != (n, n) || !mat_all_finite(p_i) || !mat_all_finite(p_f) {
        return Err(Error::contract("P_i and P_f must be finite n×n"));
    }
    Ok(())
}

fn status_error<T: Real>(sol: &SdpSolution<T>, what: &str) -> Error {
    match sol.status {
        SolveStatus::Infeasible => Error::Infeasible(what.to_string()),
        _ => Error::numerical(format!("{what}: {}", sol.diagnostics)),
    }
}

/// Re-solves with constraint classes enabled one at a time and names the
/// first class at which the program turns infeasible.
fn diagnose<T: Real>(build: impl Fn(usize) -> Result<SdpProgram<T>>) -> Result<String> {
    for (i, class) in ConstraintClass::ALL.iter().enumerate() {
        let prog = build(i + 1)?;
        let sol = prog.solve()?;
        if sol.status == SolveStatus::Infeasible {
            return Ok(format!("first violated constraint class: {class}"));
        }
    }
    Ok("infeasible only in the full program; no single stage isolated".into())
}

struct OfflineVars {
    p: Vec<SymVar>,
    y: Vec<MatVar>,
    nu: Vec<usize>,
}

fn build_offline<T: Real>(
    model: &PlantModel<T>,
    nom: &NominalTrajectory<T>,
    s: &OfflineSettings<T>,
    r: &[T],
    rho: Option<T>,
    stages: usize,
    options: &SolverOptions<T>,
) -> Result<(SdpProgram<T>, OfflineVars)> {
    let (n, m, big_n) = (model.n, model.m, nom.horizon());
    let on = |c: ConstraintClass| ConstraintClass::ALL.iter().position(|&x| x == c).is_some_and(|i| i < stages);
    let mut prog = SdpProgram::new();
    prog.options = options.clone();
    let p: Vec<SymVar> = (0..=big_n).map(|t| prog.new_sym(&format!("P{t}"), n)).collect();
    let mu_p: Vec<usize> = (0..=big_n).map(|t| prog.new_var(format!("muP{t}"))).collect();
    let y: Vec<MatVar> = (0..big_n).map(|t| prog.new_mat(&format!("Y{t}"), m, n)).collect();
    let mu_k: Vec<usize> = (0..big_n).map(|t| prog.new_var(format!("muK{t}"))).collect();
    let nu: Vec<usize> = (0..big_n).map(|t| prog.new_var(format!("nu{t}"))).collect();
    let tau = prog.new_var("tau");

    for t in 0..=big_n {
        prog.add_objective(mu_p[t], s.w1);
    }
    for t in 0..big_n {
        prog.add_objective(mu_k[t], s.w2);
    }
    prog.add_objective(tau, -s.w3);

    for t in 0..=big_n {
        let pe = p[t].expr();
        prog.add_psd(format!("base:P{t}>0"), pe.minus(&eps_id(n)));
        prog.add_psd(format!("base:P{t}<=muP"), ExprMatrix::scaled_identity(n, &LinExpr::var(mu_p[t])).minus(&pe));
    }
    for t in 0..big_n {
        prog.add_psd(format!("base:gain{t}"), gain_block(mu_k[t], &y[t], &p[t]));
    }
    prog.add_psd("base:P0>=tau", p[0].expr().minus(&ExprMatrix::scaled_identity(n, &LinExpr::var(tau))));

    if on(ConstraintClass::Dmi) {
        for t in 0..big_n {
            let pr = dmi_problem(model, nom, t, s.alpha, s.gamma2);
            let dmi = build_dmi_scaled(&pr, &p[t].expr(), &p[t + 1].expr(), &y[t].expr(), &LinExpr::var(nu[t]))?;
            let dim = dmi.nrows();
            prog.add_psd(format!("dmi[{t}]"), dmi.minus(&eps_id(dim)));
        }
    }
    if let Some(rho) = rho.filter(|_| on(ConstraintClass::FunnelSize)) {
        for t in 0..=big_n {
            let floor = ExprMatrix::scaled_identity(n, &LinExpr::constant(s.gamma2 * rho));
            prog.add_psd(format!("funnel-size:P{t}>=g2*rho"), p[t].expr().minus(&floor));
        }
    }
    if on(ConstraintClass::StateGeometry) {
        for t in 0..=big_n {
            add_state_geometry(&mut prog, model, t, &nom.states[t], &p[t], &LinExpr::constant(r[t]))?;
        }
    }
    if on(ConstraintClass::InputGeometry) {
        for t in 0..big_n {
            add_input_geometry(&mut prog, model, t, &nom.inputs[t], &y[t], &p[t], &LinExpr::constant(r[t]))?;
        }
    }
    if on(ConstraintClass::Boundary) {
        prog.add_psd("boundary:P0>=r0Pi", p[0].expr().minus(&ExprMatrix::from_const(&(&s.p_i * s.r0))));
        prog.add_psd("boundary:PN<=rfPf", ExprMatrix::from_const(&(&s.p_f * s.rf)).minus(&p[big_n].expr()));
    }
    Ok((prog, OfflineVars { p, y, nu }))
}

/// Whole-horizon synthesis. The radii are not decision variables here. For a
/// fixed fraction `ρ` the geometry uses `r_t = ρ r̄` and the funnel-size
/// constraint `P_t ⪰ γ₂ρ I` caps `k_t ≤ 1 − ρ`, so the post-hoc radius from
/// `k_max` is never looser than the one the geometry was built with. `ρ`
/// starts at `0.9α` and halves until the program is feasible.
pub fn solve_offline<T: Real>(
    model: &PlantModel<T>,
    nom: &NominalTrajectory<T>,
    s: &OfflineSettings<T>,
    options: &SolverOptions<T>,
) -> Result<FunnelSolution<T>> {
    check_common(model, nom, s.alpha, s.gamma2, &s.p_i, &s.p_f)?;
    if !(s.w1 > T::zero() && s.w2 > T::zero() && s.w3 > T::zero()) {
        return Err(Error::contract("weights must be positive"));
    }
    if !(s.r0 > T::zero() && s.rf > T::zero()) {
        return Err(Error::contract("r0 and rf must be positive"));
    }
    if nom.horizon() == 0 {
        return Err(Error::contract("empty horizon"));
    }
    let start = Instant::now();
    let big_n = nom.horizon();
    let cap = T::lit(super::funnel::R_BAR_CAP);
    let rb = r_bar(s.gamma2, s.delta_inf);
    let mut iterations = 0;

    // Without a disturbance the radius sits at the cap and needs no search.
    let fractions: Vec<Option<T>> = if rb >= cap {
        vec![None]
    } else {
        let dmi_only = build_offline(model, nom, s, &vec![rb; big_n + 1], None, 2, options)?.0.solve()?;
        iterations += dmi_only.iterations;
        if dmi_only.status == SolveStatus::Infeasible {
            return Err(Error::Infeasible(format!("first violated constraint class: {}", ConstraintClass::Dmi)));
        }
        (0..s.max_radius_passes.max(1)).map(|j| Some(s.alpha * T::lit(0.9 * 0.5f64.powi(j as i32)))).collect()
    };
    let mut last_err = None;
    for rho in fractions {
        let r = vec![rho.map_or(rb, |f| f * rb); big_n + 1];
        let (prog, vars) = build_offline(model, nom, s, &r, rho, ConstraintClass::ALL.len(), options)?;
        let sol = prog.solve()?;
        iterations += sol.iterations;
        if sol.status != SolveStatus::Optimal {
            last_err = Some(if sol.status == SolveStatus::Infeasible {
                let why = diagnose(|k| build_offline(model, nom, s, &r, rho, k, options).map(|x| x.0))?;
                Error::Infeasible(match rho {
                    Some(f) => format!("{why} (smallest radius fraction tried {:.3e})", f.as_f64()),
                    None => why,
                })
            } else {
                status_error(&sol, "offline synthesis")
            });
            continue;
        }
        let p: Vec<DMatrix<T>> = vars.p.iter().map(|v| v.value(&sol.x)).collect();
        let k: Vec<T> = p.iter().map(|pt| contraction_k(pt, s.gamma2)).collect();
        let k_max = k.iter().copied().fold(T::lit(f64::NEG_INFINITY), |a, b| a.max(b));
        let mut r_out = Vec::with_capacity(big_n + 1);
        for (&kt, &used) in k.iter().zip(&r) {
            let inv = funnel_radius(kt, s.gamma2, s.delta_inf, RadiusMode::OfflineWorstCase { k_max })?;
            let post = if inv * cap <= T::one() { cap } else { T::one() / inv };
            // Larger r only shrinks the funnel, so geometry built with `used`
            // still holds for any post-hoc radius at least as large.
            if post < used * (T::one() - T::lit(1e-6)) {
                return Err(Error::numerical(format!("post-hoc radius {} below the geometry radius {}", post.as_f64(), used.as_f64())));
            }
            r_out.push(post.max(used));
        }
        let y: Vec<DMatrix<T>> = vars.y.iter().map(|v| v.value(&sol.x)).collect();
        let gains = p.iter().zip(&y).map(|(pt, yt)| gain_from(pt, yt)).collect::<Result<Vec<_>>>()?;
        return Ok(FunnelSolution {
            t1: 0,
            nu: vars.nu.iter().map(|&i| sol.x[i]).collect(),
            y,
            gains,
            r: r_out,
            k,
            p,
            gamma2: s.gamma2,
            alpha: s.alpha,
            objective: sol.objective,
            max_residual: sol.max_residual,
            solve_ms: start.elapsed().as_secs_f64() * 1e3,
            iterations,
        });
    }
    Err(last_err.unwrap_or_else(|| Error::Infeasible("no radius fraction tried".into())))
}

struct OnlineVars {
    p: Vec<SymVar>,
    y: Vec<MatVar>,
    nu: Vec<usize>,
    r: Vec<usize>,
}

fn build_online<T: Real>(
    model: &PlantModel<T>,
    nom: &NominalTrajectory<T>,
    t1: usize,
    t2: usize,
    s: &OnlineSettings<T>,
    stages: usize,
    options: &SolverOptions<T>,
) -> Result<(SdpProgram<T>, OnlineVars)> {
    let (n, m) = (model.n, model.m);
    let len = t2 - t1;
    let on = |c: ConstraintClass| ConstraintClass::ALL.iter().position(|&x| x == c).is_some_and(|i| i < stages);
    let mut prog = SdpProgram::new();
    prog.options = options.clone();
    let p: Vec<SymVar> = (0..=len).map(|i| prog.new_sym(&format!("P{}", t1 + i), n)).collect();
    let mu1 = prog.new_var("mu1");
    let mu2: Vec<usize> = (0..=len).map(|i| prog.new_var(format!("mu2_{}", t1 + i))).collect();
    let y: Vec<MatVar> = (0..len).map(|i| prog.new_mat(&format!("Y{}", t1 + i), m, n)).collect();
    let mu_k: Vec<usize> = (0..len).map(|i| prog.new_var(format!("muK{}", t1 + i))).collect();
    let nu: Vec<usize> = (0..len).map(|i| prog.new_var(format!("nu{}", t1 + i))).collect();
    let r: Vec<usize> = (0..=len).map(|i| prog.new_var(format!("r{}", t1 + i))).collect();
    let sv: Vec<usize> = (0..=len).map(|i| prog.new_var(format!("s{}", t1 + i))).collect();
    let tau = prog.new_var("tau");

    for i in 0..=len {
        prog.add_objective(mu2[i], s.w1);
        prog.add_objective(r[i], -s.w5);
    }
    for i in 0..len {
        prog.add_objective(mu_k[i], s.w2);
    }
    prog.add_objective(tau, -s.w3);
    prog.add_objective(mu1, s.w4);

    prog.add_linear_ge("base:mu1>0", LinExpr { constant: -T::lit(EPS_SDP), terms: vec![(mu1, T::one())] });
    for i in 0..=len {
        let pe = p[i].expr();
        prog.add_psd(format!("base:P{}>=mu1", t1 + i), pe.minus(&ExprMatrix::scaled_identity(n, &LinExpr::var(mu1))));
        prog.add_psd(format!("base:P{}<=mu2", t1 + i), ExprMatrix::scaled_identity(n, &LinExpr::var(mu2[i])).minus(&pe));
    }
    for i in 0..len {
        prog.add_psd(format!("base:gain{}", t1 + i), gain_block(mu_k[i], &y[i], &p[i]));
    }
    prog.add_psd("base:P_t1>=tau", p[0].expr().minus(&ExprMatrix::scaled_identity(n, &LinExpr::var(tau))));
    // Keeps the radii bounded while the funnel-size stage is disabled.
    if !on(ConstraintClass::FunnelSize) {
        for i in 0..=len {
            prog.add_linear_ge(format!("base:r{}<=1", t1 + i), LinExpr { constant: T::one(), terms: vec![(r[i], -T::one())] });
            prog.add_linear_ge(format!("base:s{}<=1", t1 + i), LinExpr { constant: T::one(), terms: vec![(sv[i], -T::one())] });
        }
    }

    if on(ConstraintClass::Dmi) {
        for i in 0..len {
            let pr = dmi_problem(model, nom, t1 + i, s.alpha, s.gamma2);
            let dmi = build_dmi_scaled(&pr, &p[i].expr(), &p[i + 1].expr(), &y[i].expr(), &LinExpr::var(nu[i]))?;
            let dim = dmi.nrows();
            prog.add_psd(format!("dmi[{}]", t1 + i), dmi.minus(&eps_id(dim)));
        }
    }
    if on(ConstraintClass::FunnelSize) {
        for i in 0..=len {
            let t = t1 + i;
            prog.add_linear_ge(format!("funnel-size:r{t}>=0"), LinExpr::var(r[i]));
            prog.add_linear_ge(
                format!("funnel-size:r{t}<=rbar"),
                LinExpr { constant: s.r_bar, terms: vec![(r[i], -T::one())] },
            );
            prog.add_linear_ge(
                format!("funnel-size:r{t}<=rbar*s"),
                LinExpr { constant: T::zero(), terms: vec![(sv[i], s.r_bar), (r[i], -T::one())] },
            );
            prog.add_psd(
                format!("funnel-size:P{t}>=g2*s"),
                p[i].expr().minus(&ExprMatrix::scaled_identity(n, &LinExpr::term(sv[i], s.gamma2))),
            );
        }
    }
    if on(ConstraintClass::StateGeometry) {
        for i in 0..=len {
            add_state_geometry(&mut prog, model, t1 + i, &nom.states[t1 + i], &p[i], &LinExpr::var(r[i]))?;
        }
    }
    if on(ConstraintClass::InputGeometry) {
        for i in 0..len {
            add_input_geometry(&mut prog, model, t1 + i, &nom.inputs[t1 + i], &y[i], &p[i], &LinExpr::var(r[i]))?;
        }
    }
    if on(ConstraintClass::Boundary) {
        let ri = ExprMatrix::from_fn(n, n, |a, b| LinExpr::term(r[0], s.p_i[(a, b)]));
        prog.add_psd("boundary:P_t1>=r*Pi", p[0].expr().minus(&ri));
        let rf = ExprMatrix::from_fn(n, n, |a, b| LinExpr::term(r[len], s.p_f[(a, b)]));
        prog.add_psd("boundary:P_t2<=r*Pf", rf.minus(&p[len].expr()));
    }
    Ok((prog, OnlineVars { p, y, nu, r }))
}

/// Sliding-window synthesis over `[t1, t2]` with radii as decision
/// variables, relaxed through `P_t ⪰ γ₂ s_t I`, `r_t ≤ r̄ s_t`.
pub fn solve_online<T: Real>(
    model: &PlantModel<T>,
    nom: &NominalTrajectory<T>,
    t1: usize,
    t2: usize,
    s: &OnlineSettings<T>,
    options: &SolverOptions<T>,
) -> Result<FunnelSolution<T>> {
    check_common(model, nom, s.alpha, s.gamma2, &s.p_i, &s.p_f)?;
    if !(t1 < t2 && t2 <= nom.horizon()) {
        return Err(Error::contract(format!("window [{t1}, {t2}] outside horizon {}", nom.horizon())));
    }
    if ![s.w1, s.w2, s.w3, s.w4, s.w5].iter().all(|&w| w > T::zero()) {
        return Err(Error::contract("weights must be positive"));
    }
    if !(s.r_bar > T::zero()) || !s.r_bar.is_finite_val() {
        return Err(Error::contract("r_bar must be positive and finite"));
    }
    let start = Instant::now();
    let (prog, vars) = build_online(model, nom, t1, t2, s, ConstraintClass::ALL.len(), options)?;
    let sol = prog.solve()?;
    if sol.status != SolveStatus::Optimal {
        return Err(status_error(&sol, &format!("window [{t1}, {t2}]")));
    }
    let p: Vec<DMatrix<T>> = vars.p.iter().map(|v| v.value(&sol.x)).collect();
    let y: Vec<DMatrix<T>> = vars.y.iter().map(|v| v.value(&sol.x)).collect();
    let gains = p.iter().zip(&y).map(|(pt, yt)| gain_from(pt, yt)).collect::<Result<Vec<_>>>()?;
    let k = p.iter().map(|pt| contraction_k(pt, s.gamma2)).collect();
    let r = vars.r.iter().map(|&i| sol.x[i].max(T::zero())).collect();
    Ok(FunnelSolution {
        t1,
        nu: vars.nu.iter().map(|&i| sol.x[i]).collect(),
        p,
        y,
        gains,
        r,
        k,
        gamma2: s.gamma2,
        alpha: s.alpha,
        objective: sol.objective,
        max_residual: sol.max_residual,
        solve_ms: start.elapsed().as_secs_f64() * 1e3,
        iterations: sol.iterations,
    })
}

/// Names the first constraint class at which the online window becomes
/// infeasible.
pub fn diagnose_online<T: Real>(
    model: &PlantModel<T>,
    nom: &NominalTrajectory<T>,
    t1: usize,
    t2: usize,
    s: &OnlineSettings<T>,
    options: &SolverOptions<T>,
) -> Result<String> {
    diagnose(|k| build_online(model, nom, t1, t2, s, k, options).map(|x| x.0))
}

/// Every constraint of a returned solution re-checked densely; returns the
/// most negative residual.
pub fn verify_solution<T: Real>(model: &PlantModel<T>, nom: &NominalTrajectory<T>, sol: &FunnelSolution<T>) -> Result<T> {
    let mut worst = T::lit(f64::INFINITY);
    for (i, pt) in sol.p.iter().enumerate() {
        worst = worst.min(min_eig(pt));
        let t = sol.t1 + i;
        let poly = model.state_polytope(t);
        for h in 0..poly.len() {
            let (a, b) = poly.halfspace(h);
            let d = face_distance(&a, b, &nom.states[t])?;
            worst = worst.min(d * d * sol.r[i] - a.dot(&(pt * &a)));
        }
    }
    for i in 0..sol.horizon() {
        let t = sol.t1 + i;
        let pr = dmi_problem(model, nom, t, sol.alpha, sol.gamma2);
        let y = &sol.gains[i] * &sol.p[i];
        let dmi = super::dmi::dmi_matrix(&pr, &sol.p[i], &sol.p[i + 1], &y, sol.nu[i])?;
        // Compare on the congruence-scaled form to avoid the 1/γ₁² blow-up.
        let mut tmat = DMatrix::<T>::identity(dmi.nrows(), dmi.nrows());
        let off: usize = pr.block_sizes()[..4].iter().sum();
        for j in 0..pr.n_q() {
            tmat[(off + j, off + j)] = pr.gamma1;
        }
        worst = worst.min(min_eig(&(&tmat * dmi * &tmat)));
        let poly = model.input_polytope(t);
        for h in 0..poly.len() {
            let (a, b) = poly.halfspace(h);
            let blk = super::funnel::input_constraint_lmi(&a, b, &nom.inputs[t], &sol.gains[i], &sol.p[i], sol.r[i])?;
            worst = worst.min(min_eig(&blk));
        }
    }
    Ok(worst)
}
