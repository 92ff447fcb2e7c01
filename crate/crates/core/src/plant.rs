//! Discrete-time plant in Lur'e form with state and input polytopes.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::conic::{LinExpr, SdpProgram, SolveStatus};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, halton, mat_all_finite};
use crate::scalar::Real;

/// Nominal map `f̄(t, x, u_r)` under the prior controller.
pub trait Dynamics<T: Real>: Send + Sync {
    fn eval(&self, t: usize, x: &DVector<T>, u: &DVector<T>) -> DVector<T>;

    /// Analytic Jacobians `(∂f̄/∂x, ∂f̄/∂u)` when available.
    fn jacobian(&self, _t: usize, _x: &DVector<T>, _u: &DVector<T>) -> Option<(DMatrix<T>, DMatrix<T>)> {
        None
    }
}

/// Sector-bounded nonlinearity `φ(t, q)`.
pub trait Nonlinearity<T: Real>: Send + Sync {
    fn eval(&self, t: usize, q: &DVector<T>) -> DVector<T>;
}

/// `f̄(x, u) = A x + B u`.
#[derive(Clone, Debug)]
pub struct LinearDynamics<T: Real> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
}

impl<T: Real> Dynamics<T> for LinearDynamics<T> {
    fn eval(&self, _t: usize, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        &self.a * x + &self.b * u
    }

    fn jacobian(&self, _t: usize, _x: &DVector<T>, _u: &DVector<T>) -> Option<(DMatrix<T>, DMatrix<T>)> {
        Some((self.a.clone(), self.b.clone()))
    }
}

/// Dynamics given by a closure, differentiated numerically.
pub struct FnDynamics<F>(pub F);

impl<T: Real, F> Dynamics<T> for FnDynamics<F>
where
    F: Fn(usize, &DVector<T>, &DVector<T>) -> DVector<T> + Send + Sync,
{
    fn eval(&self, t: usize, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        (self.0)(t, x, u)
    }
}

/// `φ ≡ 0` with the given output dimension.
#[derive(Clone, Copy, Debug)]
pub struct ZeroNonlinearity {
    pub out_dim: usize,
}

impl<T: Real> Nonlinearity<T> for ZeroNonlinearity {
    fn eval(&self, _t: usize, _q: &DVector<T>) -> DVector<T> {
        DVector::zeros(self.out_dim)
    }
}

pub struct FnNonlinearity<F>(pub F);

impl<T: Real, F> Nonlinearity<T> for FnNonlinearity<F>
where
    F: Fn(usize, &DVector<T>) -> DVector<T> + Send + Sync,
{
    fn eval(&self, t: usize, q: &DVector<T>) -> DVector<T> {
        (self.0)(t, q)
    }
}

/// Axis-aligned box `[lo, hi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxSet<T: Real> {
    pub lo: DVector<T>,
    pub hi: DVector<T>,
}

impl<T: Real> BoxSet<T> {
    pub fn new(lo: DVector<T>, hi: DVector<T>) -> Self {
        Self { lo, hi }
    }

    pub fn symmetric(radius: &DVector<T>) -> Self {
        Self { lo: -radius, hi: radius.clone() }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.len() != self.hi.len() || self.lo.iter().zip(self.hi.iter()).any(|(l, h)| !(l <= h))
    }

    pub fn width(&self) -> DVector<T> {
        &self.hi - &self.lo
    }

    pub fn contains(&self, q: &DVector<T>) -> bool {
        q.iter().zip(self.lo.iter().zip(self.hi.iter())).all(|(v, (l, h))| l <= v && v <= h)
    }

    /// Interval image `{M z : z ∈ self}`.
    pub fn linear_image(&self, m: &DMatrix<T>) -> BoxSet<T> {
        let mut lo = DVector::zeros(m.nrows());
        let mut hi = DVector::zeros(m.nrows());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let (a, b) = (m[(i, j)] * self.lo[j], m[(i, j)] * self.hi[j]);
                lo[i] += a.min(b);
                hi[i] += a.max(b);
            }
        }
        BoxSet { lo, hi }
    }

    /// Minkowski sum.
    pub fn sum(&self, other: &BoxSet<T>) -> BoxSet<T> {
        BoxSet { lo: &self.lo + &other.lo, hi: &self.hi + &other.hi }
    }
}

/// `{z : a_iᵀ z ≤ b_i}` with half-space normals stored as rows of `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct Polytope<T: Real> {
    pub a: DMatrix<T>,
    pub b: DVector<T>,
}

impl<T: Real> Polytope<T> {
    pub fn new(a: DMatrix<T>, b: DVector<T>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::contract("polytope: normals and offsets differ in count"));
        }
        Ok(Self { a, b })
    }

    /// Box `|z_i - c_i| ≤ r_i` as 2·dim half-spaces.
    pub fn from_box(center: &DVector<T>, radius: &DVector<T>) -> Self {
        let n = center.len();
        let mut a = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            a[(2 * i, i)] = T::one();
            b[2 * i] = center[i] + radius[i];
            a[(2 * i + 1, i)] = -T::one();
            b[2 * i + 1] = radius[i] - center[i];
        }
        Self { a, b }
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn len(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.a.nrows() == 0
    }

    pub fn halfspace(&self, i: usize) -> (DVector<T>, T) {
        (self.a.row(i).transpose(), self.b[i])
    }

    /// `min_i (b_i - a_iᵀ z)`; negative outside.
    pub fn margin(&self, z: &DVector<T>) -> T {
        let s = &self.b - &self.a * z;
        s.iter().fold(T::lit(f64::INFINITY), |acc, &v| acc.min(v))
    }

    pub fn contains(&self, z: &DVector<T>) -> bool {
        self.margin(z) >= T::zero()
    }

    /// Tight bounding box from `2·dim` linear programs; fails on empty or
    /// unbounded polytopes.
    pub fn bounding_box(&self) -> Result<BoxSet<T>> {
        let n = self.dim();
        let mut lo = DVector::zeros(n);
        let mut hi = DVector::zeros(n);
        for k in 0..n {
            for (sign, slot) in [(T::one(), 0), (-T::one(), 1)] {
                let mut prog = SdpProgram::<T>::new();
                let vars: Vec<usize> = (0..n).map(|i| prog.new_var(format!("z{i}"))).collect();
                prog.add_objective(vars[k], sign);
                for i in 0..self.len() {
                    let terms = (0..n).filter(|&j| self.a[(i, j)] != T::zero()).map(|j| (vars[j], -self.a[(i, j)]));
                    prog.add_linear_ge(format!("h{i}"), LinExpr { constant: self.b[i], terms: terms.collect() });
                }
                let sol = prog.solve()?;
                match sol.status {
                    SolveStatus::Optimal => {}
                    SolveStatus::Infeasible => return Err(Error::Geometry("polytope is empty".into())),
                    SolveStatus::NumericalFailure => {
                        return Err(Error::Geometry(format!("polytope bound along axis {k} not found (unbounded?)")))
                    }
                }
                if slot == 0 {
                    lo[k] = sol.x[vars[k]];
                } else {
                    hi[k] = sol.x[vars[k]];
                }
            }
        }
        Ok(BoxSet { lo, hi })
    }
}

/// Per-step Jacobian pair `(A_t, B_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linearization<T: Real> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
}

#[derive(Clone)]
pub struct PlantModel<T: Real> {
    pub n: usize,
    pub m: usize,
    pub n_q: usize,
    pub n_p: usize,
    pub dynamics: Arc<dyn Dynamics<T>>,
    pub phi: Arc<dyn Nonlinearity<T>>,
    pub e: DMatrix<T>,
    pub c: DMatrix<T>,
    pub d: DMatrix<T>,
    pub g: DMatrix<T>,
    /// One entry per step, or a single entry shared by all steps.
    pub state_polytopes: Vec<Polytope<T>>,
    pub input_polytopes: Vec<Polytope<T>>,
    pub horizon: usize,
}

impl<T: Real> fmt::Debug for PlantModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlantModel")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("n_q", &self.n_q)
            .field("n_p", &self.n_p)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

/// Tracking-error sample `(η, ξ, p̃, q̃, Δ̂)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorState<T: Real> {
    pub eta: DVector<T>,
    pub xi: DVector<T>,
    pub p_tilde: DVector<T>,
    pub q_tilde: DVector<T>,
    pub delta_hat: DVector<T>,
}

impl<T: Real> ErrorState<T> {
    pub fn new(model: &PlantModel<T>, eta: DVector<T>, xi: DVector<T>, p_tilde: DVector<T>, delta_hat: DVector<T>) -> Self {
        let q_tilde = &model.c * &eta + &model.d * &xi + &model.g * &delta_hat;
        Self { eta, xi, p_tilde, q_tilde, delta_hat }
    }

    pub fn satisfies_sector(&self, gamma1: T) -> bool {
        self.p_tilde.norm() <= gamma1 * self.q_tilde.norm()
    }
}

pub const GAMMA1_FLOOR: f64 = 1e-9;
pub const LIPSCHITZ_SAFETY: f64 = 1.2;
pub const LIPSCHITZ_PAIRS: usize = 4096;

impl<T: Real> PlantModel<T> {
    /// Checks selector shapes and polytope dimensions.
    pub fn validate(&self) -> Result<()> {
        let shape = |name: &str, m: &DMatrix<T>, r: usize, c: usize| {
            if m.nrows() == r && m.ncols() == c {
                Ok(())
            } else {
                Err(Error::contract(format!("{name} is {}x{}, expected {r}x{c}", m.nrows(), m.ncols())))
            }
        };
        shape("E", &self.e, self.n, self.n_p)?;
        shape("C", &self.c, self.n_q, self.n)?;
        shape("D", &self.d, self.n_q, self.m)?;
        shape("G", &self.g, self.n_q, self.n)?;
        if self.state_polytopes.is_empty() || self.input_polytopes.is_empty() {
            return Err(Error::contract("plant needs at least one state and one input polytope"));
        }
        if self.state_polytopes.iter().any(|p| p.dim() != self.n) {
            return Err(Error::contract("state polytope dimension mismatch"));
        }
        if self.input_polytopes.iter().any(|p| p.dim() != self.m) {
            return Err(Error::contract("input polytope dimension mismatch"));
        }
        Ok(())
    }

    pub fn state_polytope(&self, t: usize) -> &Polytope<T> {
        &self.state_polytopes[t.min(self.state_polytopes.len() - 1)]
    }

    pub fn input_polytope(&self, t: usize) -> &Polytope<T> {
        &self.input_polytopes[t.min(self.input_polytopes.len() - 1)]
    }

    /// Jacobians of `f̄` at `(x̄_t, ū_rt)`: analytic when the dynamics provide
    /// them, relative central differences otherwise.
    pub fn linearize(&self, t: usize, x: &DVector<T>, u: &DVector<T>) -> Result<Linearization<T>> {
        if x.len() != self.n || u.len() != self.m {
            return Err(Error::contract("linearize: dimension mismatch"));
        }
        if !self.state_polytope(t).contains(x) || !self.input_polytope(t).contains(u) {
            return Err(Error::Domain(format!("linearization point at t={t} lies outside its polytopes")));
        }
        let (a, b) = match self.dynamics.jacobian(t, x, u) {
            Some(j) => j,
            None => self.fd_jacobian(t, x, u),
        };
        if !mat_all_finite(&a) || !mat_all_finite(&b) {
            return Err(Error::numerical(format!("non-finite Jacobian at t={t}")));
        }
        Ok(Linearization { a, b })
    }

    fn fd_jacobian(&self, t: usize, x: &DVector<T>, u: &DVector<T>) -> (DMatrix<T>, DMatrix<T>) {
        let base = if T::eps() < T::lit(1e-10) { T::lit(1e-6) } else { T::eps().cbrt() };
        let two = T::lit(2.0);
        let mut a = DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            let h = base.max(base * x[j].abs());
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[j] += h;
            xm[j] -= h;
            let col = (self.dynamics.eval(t, &xp, u) - self.dynamics.eval(t, &xm, u)) / (two * h);
            a.set_column(j, &col);
        }
        let mut b = DMatrix::zeros(self.n, self.m);
        for j in 0..self.m {
            let h = base.max(base * u[j].abs());
            let (mut up, mut um) = (u.clone(), u.clone());
            up[j] += h;
            um[j] -= h;
            let col = (self.dynamics.eval(t, x, &up) - self.dynamics.eval(t, x, &um)) / (two * h);
            b.set_column(j, &col);
        }
        (a, b)
    }

    /// Sampled Lipschitz constant of `φ(t, ·)` over `q_box`, inflated by the
    /// safety factor and floored away from zero.
    pub fn estimate_lipschitz(&self, t: usize, q_box: &BoxSet<T>) -> Result<T> {
        if q_box.is_empty() || q_box.dim() != self.n_q {
            return Err(Error::Domain("estimate_lipschitz: empty or mis-sized box".into()));
        }
        let nq = self.n_q;
        let width = q_box.width();
        let point = |u: &[f64]| DVector::from_fn(nq, |i, _| q_box.lo[i] + width[i] * T::lit(u[i]));
        let half = LIPSCHITZ_PAIRS / 2;
        let local = T::lit(1e-4);
        let mut best = T::zero();
        for k in 0..LIPSCHITZ_PAIRS {
            let h = halton(k as u64, 2 * nq);
            let q = point(&h[..nq]);
            let qb = if k < half {
                point(&h[nq..])
            } else {
                let mut qb = q.clone();
                for i in 0..nq {
                    let dir = T::lit(2.0 * h[nq + i] - 1.0);
                    qb[i] = (q[i] + local * width[i] * dir).max(q_box.lo[i]).min(q_box.hi[i]);
                }
                qb
            };
            let dq = (&q - &qb).norm();
            if dq <= T::zero() {
                continue;
            }
            let dp = (self.phi.eval(t, &q) - self.phi.eval(t, &qb)).norm();
            let ratio = dp / dq;
            if !ratio.is_finite_val() {
                return Err(Error::numerical("non-finite difference quotient in φ"));
            }
            best = best.max(ratio);
        }
        Ok((best * T::lit(LIPSCHITZ_SAFETY)).max(T::lit(GAMMA1_FLOOR)))
    }

    /// Compact set for `q`: polytope bounding boxes mapped through `(C, D, G)`,
    /// with the learned disturbance bounded by `delta_bound` per channel.
    pub fn q_box(&self, t: usize, delta_bound: T) -> Result<BoxSet<T>> {
        let xb = self.state_polytope(t).bounding_box()?;
        let ub = self.input_polytope(t).bounding_box()?;
        let db = BoxSet::symmetric(&DVector::from_element(self.n, delta_bound));
        Ok(xb.linear_image(&self.c).sum(&ub.linear_image(&self.d)).sum(&db.linear_image(&self.g)))
    }

    /// `x̂_{t+1} = A_t x̂ + B_t û + E φ(t, C x̂ + D û + G Δ̂) + Δ̂`.
    pub fn virtual_step(
        &self,
        t: usize,
        lin: &Linearization<T>,
        x_hat: &DVector<T>,
        u_hat: &DVector<T>,
        delta_hat: &DVector<T>,
    ) -> Result<DVector<T>> {
        let q = &self.c * x_hat + &self.d * u_hat + &self.g * delta_hat;
        let p = self.phi.eval(t, &q);
        let next = &lin.a * x_hat + &lin.b * u_hat + &self.e * p + delta_hat;
        if !all_finite(&next) {
            return Err(Error::numerical(format!("virtual state non-finite at t={t}")));
        }
        Ok(next)
    }

    /// `x_{t+1} = f̄(t, x, u_r) + Δ`.
    pub fn actual_step(&self, t: usize, x: &DVector<T>, u: &DVector<T>, delta: &DVector<T>) -> Result<DVector<T>> {
        let next = self.dynamics.eval(t, x, u) + delta;
        if !all_finite(&next) {
            return Err(Error::numerical(format!("actual state non-finite at t={t}")));
        }
        Ok(next)
    }
}

/// Disturbance-free waypoints with per-step Lur'e data.
#[derive(Clone, Debug, PartialEq)]
pub struct NominalTrajectory<T: Real> {
    pub states: Vec<DVector<T>>,
    pub inputs: Vec<DVector<T>>,
    pub p: Vec<DVector<T>>,
    pub q: Vec<DVector<T>>,
    pub gamma1: Vec<T>,
    pub lin: Vec<Linearization<T>>,
}

impl<T: Real> NominalTrajectory<T> {
    /// Populates `p̄, q̄, γ₁, (A_t, B_t)` from waypoints; `delta_bound` sizes the
    /// compact set used for the Lipschitz estimate.
    pub fn from_waypoints(
        model: &PlantModel<T>,
        states: Vec<DVector<T>>,
        inputs: Vec<DVector<T>>,
        delta_bound: T,
    ) -> Result<Self> {
        if states.len() != inputs.len() + 1 {
            return Err(Error::contract("nominal trajectory needs N+1 states and N inputs"));
        }
        let horizon = inputs.len();
        let mut p = Vec::with_capacity(horizon);
        let mut q = Vec::with_capacity(horizon);
        let mut gamma1 = Vec::with_capacity(horizon);
        let mut lin = Vec::with_capacity(horizon);
        let mut cached: Option<(usize, BoxSet<T>)> = None;
        for t in 0..horizon {
            let qt = &model.c * &states[t] + &model.d * &inputs[t];
            p.push(model.phi.eval(t, &qt));
            q.push(qt);
            lin.push(model.linearize(t, &states[t], &inputs[t])?);
            // Polytopes shared across steps give identical boxes.
            let key = t.min(model.state_polytopes.len().max(model.input_polytopes.len()) - 1);
            if cached.as_ref().is_none_or(|(k, _)| *k != key) {
                cached = Some((key, model.q_box(t, delta_bound)?));
            }
            let q_box = &cached.as_ref().expect("cached box").1;
            gamma1.push(model.estimate_lipschitz(t, q_box)?);
        }
        Ok(Self { states, inputs, p, q, gamma1, lin })
    }

    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    /// Largest `|x̄_{t+1} − (A_t x̄_t + B_t ū_t + E p̄_t)|∞` over the horizon.
    pub fn consistency_residual(&self, model: &PlantModel<T>) -> T {
        let mut worst = T::zero();
        for t in 0..self.horizon() {
            let pred = &self.lin[t].a * &self.states[t] + &self.lin[t].b * &self.inputs[t] + &model.e * &self.p[t];
            worst = worst.max((&self.states[t + 1] - pred).amax());
        }
        worst
    }

    /// Smallest polytope margin over all waypoints (negative when one lies outside).
    pub fn polytope_margin(&self, model: &PlantModel<T>) -> T {
        let mut worst = T::lit(f64::INFINITY);
        for (t, x) in self.states.iter().enumerate() {
            worst = worst.min(model.state_polytope(t).margin(x));
        }
        for (t, u) in self.inputs.iter().enumerate() {
            worst = worst.min(model.input_polytope(t).margin(u));
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_model(dyn_: Arc<dyn Dynamics<f64>>, phi: Arc<dyn Nonlinearity<f64>>) -> PlantModel<f64> {
        PlantModel {
            n: 1,
            m: 1,
            n_q: 1,
            n_p: 1,
            dynamics: dyn_,
            phi,
            e: DMatrix::zeros(1, 1),
            c: DMatrix::identity(1, 1),
            d: DMatrix::zeros(1, 1),
            g: DMatrix::zeros(1, 1),
            state_polytopes: vec![Polytope::from_box(&DVector::zeros(1), &DVector::from_element(1, 10.0))],
            input_polytopes: vec![Polytope::from_box(&DVector::zeros(1), &DVector::from_element(1, 10.0))],
            horizon: 5,
        }
    }

    fn two_state_model() -> PlantModel<f64> {
        let zero = Arc::new(ZeroNonlinearity { out_dim: 1 });
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.2, 0.8]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        PlantModel {
            n: 2,
            m: 1,
            n_q: 1,
            n_p: 1,
            dynamics: Arc::new(LinearDynamics { a, b }),
            phi: zero,
            e: DMatrix::zeros(2, 1),
            c: DMatrix::zeros(1, 2),
            d: DMatrix::zeros(1, 1),
            g: DMatrix::zeros(1, 2),
            state_polytopes: vec![Polytope::from_box(&DVector::zeros(2), &DVector::from_element(2, 5.0))],
            input_polytopes: vec![Polytope::from_box(&DVector::zeros(1), &DVector::from_element(1, 5.0))],
            horizon: 3,
        }
    }

    #[test]
    fn linear_map_has_constant_jacobian() {
        let m = two_state_model();
        let lin = m.linearize(0, &DVector::from_vec(vec![1.0, -2.0]), &DVector::from_vec(vec![0.5])).unwrap();
        assert_eq!(lin.a, DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.2, 0.8]));
        assert_eq!(lin.b, DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));
    }

    #[test]
    fn finite_difference_of_square() {
        let f = FnDynamics(|_t: usize, x: &DVector<f64>, u: &DVector<f64>| DVector::from_vec(vec![x[0] * x[0] + u[0]]));
        let m = scalar_model(Arc::new(f), Arc::new(ZeroNonlinearity { out_dim: 1 }));
        let lin = m.linearize(0, &DVector::from_element(1, 3.0), &DVector::from_element(1, 0.0)).unwrap();
        assert_relative_eq!(lin.a[(0, 0)], 6.0, max_relative = 1e-5);
        assert_relative_eq!(lin.b[(0, 0)], 1.0, max_relative = 1e-5);
    }

    #[test]
    fn linearize_outside_polytope_is_domain_error() {
        let m = two_state_model();
        let r = m.linearize(0, &DVector::from_vec(vec![6.0, 0.0]), &DVector::zeros(1));
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn lipschitz_zero_map_hits_floor() {
        let m = scalar_model(Arc::new(FnDynamics(|_t: usize, x: &DVector<f64>, _u: &DVector<f64>| x.clone())), Arc::new(ZeroNonlinearity { out_dim: 1 }));
        let q = BoxSet::new(DVector::from_element(1, -1.0), DVector::from_element(1, 1.0));
        assert_eq!(m.estimate_lipschitz(0, &q).unwrap(), GAMMA1_FLOOR);
    }

    #[test]
    fn lipschitz_linear_and_sine() {
        let id = Arc::new(FnDynamics(|_t: usize, x: &DVector<f64>, _u: &DVector<f64>| x.clone()));
        let half = scalar_model(id.clone(), Arc::new(FnNonlinearity(|_t: usize, q: &DVector<f64>| q * 0.5)));
        let q = BoxSet::new(DVector::from_element(1, -2.0), DVector::from_element(1, 2.0));
        let g = half.estimate_lipschitz(0, &q).unwrap();
        assert!((0.5..=0.6 + 1e-12).contains(&g), "{g}");

        let sine = scalar_model(id, Arc::new(FnNonlinearity(|_t: usize, q: &DVector<f64>| q.map(f64::sin))));
        let pi = std::f64::consts::PI;
        let q = BoxSet::new(DVector::from_element(1, -pi), DVector::from_element(1, pi));
        let g = sine.estimate_lipschitz(0, &q).unwrap();
        assert!((1.0..=1.2 + 1e-12).contains(&g), "{g}");
    }

    #[test]
    fn empty_box_rejected() {
        let m = two_state_model();
        let q = BoxSet::new(DVector::from_element(1, 1.0), DVector::from_element(1, -1.0));
        assert!(matches!(m.estimate_lipschitz(0, &q), Err(Error::Domain(_))));
    }

    #[test]
    fn virtual_step_affine_identity() {
        let mut m = two_state_model();
        m.e = DMatrix::zeros(2, 1);
        let lin = Linearization { a: DMatrix::identity(2, 2), b: DMatrix::zeros(2, 1) };
        let v = DVector::from_vec(vec![1.0, 2.0]);
        let d = DVector::from_vec(vec![0.5, -0.25]);
        let next = m.virtual_step(0, &lin, &v, &DVector::zeros(1), &d).unwrap();
        assert_eq!(next, DVector::from_vec(vec![1.5, 1.75]));
    }

    #[test]
    fn virtual_step_matches_direct_formula() {
        let phi = Arc::new(FnNonlinearity(|_t: usize, q: &DVector<f64>| q.map(|v| v.tanh())));
        let mut m = two_state_model();
        m.phi = phi;
        m.e = DMatrix::from_row_slice(2, 1, &[0.3, -0.1]);
        m.c = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        m.d = DMatrix::from_row_slice(1, 1, &[0.2]);
        m.g = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let lin = Linearization {
            a: DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.2, 0.8]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        };
        let (x, u, d) = (DVector::from_vec(vec![0.4, -0.7]), DVector::from_vec(vec![0.3]), DVector::from_vec(vec![0.05, 0.02]));
        let next = m.virtual_step(0, &lin, &x, &u, &d).unwrap();
        let q = 0.4 + 0.5 * -0.7 + 0.2 * 0.3 + 0.02;
        let p = f64::tanh(q);
        let expect0 = 0.9 * 0.4 + 0.1 * -0.7 + 0.3 * p + 0.05;
        let expect1 = -0.2 * 0.4 + 0.8 * -0.7 + 0.3 - 0.1 * p + 0.02;
        assert_relative_eq!(next[0], expect0, epsilon = 1e-14);
        assert_relative_eq!(next[1], expect1, epsilon = 1e-14);
    }

    #[test]
    fn actual_step_adds_disturbance() {
        let m = two_state_model();
        let x = DVector::from_vec(vec![1.0, 1.0]);
        let u = DVector::from_vec(vec![2.0]);
        let d = DVector::from_vec(vec![0.1, 0.2]);
        let next = m.actual_step(0, &x, &u, &d).unwrap();
        assert_relative_eq!(next[0], 0.9 + 0.1 + 0.1, epsilon = 1e-14);
        assert_relative_eq!(next[1], -0.2 + 0.8 + 2.0 + 0.2, epsilon = 1e-14);
    }

    #[test]
    fn non_finite_step_is_numerical_error() {
        let m = two_state_model();
        let x = DVector::from_vec(vec![f64::NAN, 0.0]);
        assert!(matches!(m.actual_step(0, &x, &DVector::zeros(1), &DVector::zeros(2)), Err(Error::Numerical(_))));
    }

    #[test]
    fn bounding_box_of_box_polytope() {
        let p = Polytope::from_box(&DVector::from_vec(vec![1.0, -1.0]), &DVector::from_vec(vec![0.5, 2.0]));
        let b = p.bounding_box().unwrap();
        assert!((b.lo - DVector::from_vec(vec![0.5, -3.0])).amax() < 1e-6);
        assert!((b.hi - DVector::from_vec(vec![1.5, 1.0])).amax() < 1e-6);
    }

    #[test]
    fn empty_polytope_detected() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let p = Polytope::new(a, DVector::from_vec(vec![-1.0, -1.0])).unwrap();
        assert!(matches!(p.bounding_box(), Err(Error::Geometry(_))));
    }

    #[test]
    fn nominal_consistency_for_linear_plant() {
        let m = two_state_model();
        let lin = m.linearize(0, &DVector::zeros(2), &DVector::zeros(1)).unwrap();
        let mut states = vec![DVector::from_vec(vec![1.0, 0.0])];
        let inputs = vec![DVector::from_vec(vec![0.2]); 3];
        for u in &inputs {
            let last = states.last().unwrap().clone();
            states.push(&lin.a * last + &lin.b * u);
        }
        let nom = NominalTrajectory::from_waypoints(&m, states, inputs, 0.1).unwrap();
        assert!(nom.consistency_residual(&m) < 1e-12);
        assert!(nom.gamma1.iter().all(|&g| g > 0.0));
        assert!(nom.polytope_margin(&m) > 0.0);
        for t in 0..3 {
            let next = m.virtual_step(t, &nom.lin[t], &nom.states[t], &nom.inputs[t], &DVector::zeros(2)).unwrap();
            assert!((next - &nom.states[t + 1]).amax() < 1e-8);
        }
    }

    #[test]
    fn error_state_q_tilde() {
        let mut m = two_state_model();
        m.c = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        m.d = DMatrix::from_row_slice(1, 1, &[3.0]);
        m.g = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let s = ErrorState::new(&m, DVector::from_vec(vec![1.0, 1.0]), DVector::from_vec(vec![1.0]), DVector::from_vec(vec![0.5]), DVector::from_vec(vec![0.0, 4.0]));
        assert_eq!(s.q_tilde[0], 1.0 + 2.0 + 3.0 + 4.0);
        assert!(s.satisfies_sector(0.1));
        assert!(!s.satisfies_sector(0.01));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            #[test]
            fn sector_soundness(scale in 0.1f64..3.0, freq in 0.2f64..2.0, seed in 0u64..1000) {
                use rand::{Rng, SeedableRng};
                let phi = Arc::new(FnNonlinearity(move |_t: usize, q: &DVector<f64>| q.map(|v| scale * (freq * v).sin())));
                let m = scalar_model(Arc::new(FnDynamics(|_t: usize, x: &DVector<f64>, _u: &DVector<f64>| x.clone())), phi.clone());
                let q_box = BoxSet::new(DVector::from_element(1, -2.0), DVector::from_element(1, 2.0));
                let g = m.estimate_lipschitz(0, &q_box).unwrap();
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                for _ in 0..10_000 {
                    let a = DVector::from_element(1, rng.random_range(-2.0..2.0));
                    let b = DVector::from_element(1, rng.random_range(-2.0..2.0));
                    let lhs = (phi.eval(0, &a) - phi.eval(0, &b)).norm();
                    prop_assert!(lhs <= g * (&a - &b).norm() + 1e-15);
                }
            }
        }
    }
}
