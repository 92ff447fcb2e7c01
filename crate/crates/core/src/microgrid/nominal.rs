//! Nominal trajectory by condensed quadratic tracking.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::plant::{NominalTrajectory, PlantModel};
use crate::qp::{solve_qp, QpProblem, QpSettings};
use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct NominalOptions<T: Real> {
    pub q: DMatrix<T>,
    pub r: DMatrix<T>,
    pub q_f: DMatrix<T>,
    /// Pins `x_N = x_goal`.
    pub terminal_equality: bool,
    /// Polytope tightening so waypoints stay strictly inside.
    pub margin: T,
    /// Disturbance bound sizing the Lipschitz compact set.
    pub delta_bound: T,
}

impl<T: Real> NominalOptions<T> {
    pub fn identity(n: usize, m: usize) -> Self {
        Self {
            q: DMatrix::identity(n, n),
            r: DMatrix::identity(m, m) * T::lit(0.1),
            q_f: DMatrix::identity(n, n) * T::lit(10.0),
            terminal_equality: true,
            margin: T::lit(1e-3),
            delta_bound: T::zero(),
        }
    }
}

/// Input holding `x_goal` fixed under `(A, B)`; domain error when none exists.
pub fn equilibrium_input<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, x_goal: &DVector<T>) -> Result<DVector<T>> {
    let rhs = x_goal - a * x_goal;
    let svd = b.clone().svd(true, true);
    let u = svd.solve(&rhs, T::lit(1e-12)).map_err(|e| Error::numerical(e.to_string()))?;
    let res = (b * &u - rhs).amax();
    if res > T::lit(1e-9) * (T::one() + x_goal.amax()) {
        return Err(Error::Domain(format!("goal is not an admissible equilibrium (residual {res})")));
    }
    Ok(u)
}

/// Finite-horizon tracking program over inputs with the dynamics condensed
/// out, then populated with per-step Lur'e data.
pub fn nominal_trajectory<T: Real>(
    plant: &PlantModel<T>,
    x_start: &DVector<T>,
    x_goal: &DVector<T>,
    horizon: usize,
    opts: &NominalOptions<T>,
) -> Result<NominalTrajectory<T>> {
    let (n, m) = (plant.n, plant.m);
    if x_start.len() != n || x_goal.len() != n || horizon == 0 {
        return Err(Error::contract("nominal_trajectory: bad dimensions or empty horizon"));
    }
    let lin0 = plant.linearize(0, x_goal, &DVector::zeros(m))?;
    let u_goal = equilibrium_input(&lin0.a, &lin0.b, x_goal)?;
    let lin = plant.linearize(0, x_goal, &u_goal)?;
    let (a, b) = (&lin.a, &lin.b);

    // x_t = Φ_t x₀ + Γ_t U for t = 1..N.
    let nn = n * horizon;
    let nu = m * horizon;
    let mut phi = DMatrix::zeros(nn, n);
    let mut gamma = DMatrix::zeros(nn, nu);
    let mut apow = DMatrix::identity(n, n);
    let mut powers = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        powers.push(apow.clone());
        apow = a * apow;
    }
    for t in 1..=horizon {
        phi.view_mut(((t - 1) * n, 0), (n, n)).copy_from(&(a * &powers[t - 1]));
        for k in 0..t {
            let blk = &powers[t - 1 - k] * b;
            gamma.view_mut(((t - 1) * n, k * m), (n, m)).copy_from(&blk);
        }
    }
    let mut qbar = DMatrix::zeros(nn, nn);
    for t in 1..=horizon {
        let w = if t == horizon { &opts.q_f } else { &opts.q };
        qbar.view_mut(((t - 1) * n, (t - 1) * n), (n, n)).copy_from(w);
    }
    let mut rbar = DMatrix::zeros(nu, nu);
    let mut ug = DVector::zeros(nu);
    let mut xg = DVector::zeros(nn);
    for t in 0..horizon {
        rbar.view_mut((t * m, t * m), (m, m)).copy_from(&opts.r);
        ug.rows_mut(t * m, m).copy_from(&u_goal);
        xg.rows_mut(t * n, n).copy_from(x_goal);
    }
    let free = &phi * x_start - &xg;
    let two = T::lit(2.0);
    let hess = (gamma.transpose() * &qbar * &gamma + &rbar) * two;
    let grad = (gamma.transpose() * &qbar * &free - &rbar * &ug) * two;

    let mut rows_g: Vec<(DVector<T>, T)> = Vec::new();
    for t in 0..horizon {
        let sp = plant.state_polytope(t + 1);
        for h in 0..sp.len() {
            let (ah, bh) = sp.halfspace(h);
            // aᵀ(Φ_t x₀ + Γ_t U) ≤ b − margin.
            let row = gamma.view((t * n, 0), (n, nu)).transpose() * &ah;
            let rhs = bh - opts.margin - ah.dot(&(phi.view((t * n, 0), (n, n)) * x_start));
            rows_g.push((row, rhs));
        }
        let ip = plant.input_polytope(t);
        for h in 0..ip.len() {
            let (ah, bh) = ip.halfspace(h);
            let mut row = DVector::zeros(nu);
            row.rows_mut(t * m, m).copy_from(&ah);
            rows_g.push((row, bh - opts.margin));
        }
    }
    let g = DMatrix::from_fn(rows_g.len(), nu, |i, j| rows_g[i].0[j]);
    let h_ineq = DVector::from_fn(rows_g.len(), |i, _| rows_g[i].1);
    let (a_eq, b_eq) = if opts.terminal_equality {
        let last = (horizon - 1) * n;
        (gamma.view((last, 0), (n, nu)).into_owned(), x_goal - phi.view((last, 0), (n, n)) * x_start)
    } else {
        (DMatrix::zeros(0, nu), DVector::zeros(0))
    };
    let qp = QpProblem { h: hess, f: grad, a_eq, b_eq, g, h_ineq };
    let sol = solve_qp(&qp, &QpSettings::default()).map_err(|e| match e {
        Error::Infeasible(msg) => Error::Infeasible(format!("nominal trajectory: {msg}")),
        other => other,
    })?;

    let inputs: Vec<DVector<T>> = (0..horizon).map(|t| sol.z.rows(t * m, m).into_owned()).collect();
    let mut states = Vec::with_capacity(horizon + 1);
    states.push(x_start.clone());
    for (t, u) in inputs.iter().enumerate() {
        let next = plant.dynamics.eval(t, &states[t], u);
        states.push(next);
    }
    NominalTrajectory::from_waypoints(plant, states, inputs, opts.delta_bound)
}
