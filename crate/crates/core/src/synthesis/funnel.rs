//! Funnel radius selection, funnel sampling and the polytope-containment LMIs.

use nalgebra::{DMatrix, DVector};

use crate::conic::{ExprMatrix, LinExpr, SymBlockBuilder};
use crate::error::{Error, Result};
use crate::linalg::{inv_quad_form, min_eig};
use crate::scalar::Real;

/// Upper cap on `r̄` when the disturbance estimate vanishes.
pub const R_BAR_CAP: f64 = 1e9;

/// Which `k` enters the second branch of the radius rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RadiusMode<T> {
    /// Worst case over the horizon: `k_eff = k_max`.
    OfflineWorstCase { k_max: T },
    /// Pointwise refinement: `k_eff = k_t`, `delta_inf = |Δ̂_t|`.
    OnlinePointwise,
}

/// `k_t = 1 − λ_min(P_t)/γ₂`.
pub fn contraction_k<T: Real>(p: &DMatrix<T>, gamma2: T) -> T {
    T::one() - min_eig(p) / gamma2
}

/// Minimal admissible `1/r_t`.
pub fn funnel_radius<T: Real>(k_t: T, gamma2: T, delta_inf: T, mode: RadiusMode<T>) -> Result<T> {
    if !(gamma2 > T::zero()) {
        return Err(Error::contract("gamma2 must be positive"));
    }
    if !(delta_inf >= T::zero()) {
        return Err(Error::contract("disturbance bound must be nonnegative"));
    }
    if !(k_t < T::one()) {
        return Err(Error::Infeasible(format!("k_t = {k_t} ≥ 1: no contraction")));
    }
    let base = gamma2 * delta_inf * delta_inf;
    if k_t <= T::zero() {
        return Ok(base);
    }
    let k_eff = match mode {
        RadiusMode::OfflineWorstCase { k_max } => k_max,
        RadiusMode::OnlinePointwise => k_t,
    };
    if !(k_eff < T::one()) {
        return Err(Error::Infeasible(format!("k_max = {k_eff} ≥ 1: no contraction")));
    }
    Ok(base / (T::one() - k_eff))
}

/// `r̄ = 1/(γ₂ δ²)`, capped.
pub fn r_bar<T: Real>(gamma2: T, delta_inf: T) -> T {
    let cap = T::lit(R_BAR_CAP);
    let denom = gamma2 * delta_inf * delta_inf;
    if denom * cap <= T::one() {
        cap
    } else {
        T::one() / denom
    }
}

/// `ηᵀ P⁻¹ η` via Cholesky.
pub fn funnel_sample<T: Real>(eta: &DVector<T>, p: &DMatrix<T>) -> Result<T> {
    inv_quad_form(p, eta)
}

/// Distance from `center` to the half-space boundary `aᵀz ≤ b`; geometry
/// error when `center` is not strictly inside.
pub fn face_distance<T: Real>(a: &DVector<T>, b: T, center: &DVector<T>) -> Result<T> {
    if a.len() != center.len() {
        return Err(Error::contract("half-space and point dimensions differ"));
    }
    let d = b - a.dot(center);
    if !(d > T::zero()) {
        return Err(Error::Geometry(format!("point lies on or outside the half-space (slack {d})")));
    }
    Ok(d)
}

fn two_block<T: Real>(corner: LinExpr<T>, row: ExprMatrix<T>, p: &ExprMatrix<T>) -> ExprMatrix<T> {
    let n = p.nrows();
    let mut bb = SymBlockBuilder::new(&[1, n]);
    let mut c = ExprMatrix::zeros(1, 1);
    *c.get_mut(0, 0) = corner;
    bb.set(0, 0, &c).set(0, 1, &row).set(1, 1, p);
    bb.build()
}

/// `[[d² r, aᵀP], [P a, P]]` with `d = b − aᵀx̄`, affine in `(P, r)`.
pub fn state_constraint_expr<T: Real>(a: &DVector<T>, d: T, p: &ExprMatrix<T>, r: &LinExpr<T>) -> ExprMatrix<T> {
    let at = DMatrix::from_row_slice(1, a.len(), a.as_slice());
    two_block(r.scaled(d * d), p.lmul(&at), p)
}

/// `[[d² r, aᵀY], [Yᵀa, P]]` with `Y = K P` and `d = b − aᵀū`.
pub fn input_constraint_expr<T: Real>(
    a: &DVector<T>,
    d: T,
    y: &ExprMatrix<T>,
    p: &ExprMatrix<T>,
    r: &LinExpr<T>,
) -> ExprMatrix<T> {
    let at = DMatrix::from_row_slice(1, a.len(), a.as_slice());
    two_block(r.scaled(d * d), y.lmul(&at), p)
}

/// `d² r − aᵀPa`: the scalar form of the state block after a Schur step on `P ≻ 0`.
pub fn state_constraint_scalar<T: Real>(a: &DVector<T>, d: T, p: &ExprMatrix<T>, r: &LinExpr<T>) -> LinExpr<T> {
    let mut out = r.scaled(d * d);
    for i in 0..a.len() {
        for j in 0..a.len() {
            let w = a[i] * a[j];
            if w != T::zero() {
                out.axpy(-w, p.get(i, j));
            }
        }
    }
    out.compact();
    out
}

pub fn state_constraint_lmi<T: Real>(
    a: &DVector<T>,
    b: T,
    x_bar: &DVector<T>,
    p: &DMatrix<T>,
    r: T,
) -> Result<DMatrix<T>> {
    if p.shape() != (a.len(), a.len()) {
        return Err(Error::contract("state_constraint_lmi: dimension mismatch"));
    }
    let d = face_distance(a, b, x_bar)?;
    Ok(state_constraint_expr(a, d, &ExprMatrix::from_const(p), &LinExpr::constant(r)).eval(&[]))
}

pub fn input_constraint_lmi<T: Real>(
    a: &DVector<T>,
    b: T,
    u_bar: &DVector<T>,
    k: &DMatrix<T>,
    p: &DMatrix<T>,
    r: T,
) -> Result<DMatrix<T>> {
    if k.nrows() != a.len() || k.ncols() != p.nrows() || !p.is_square() {
        return Err(Error::contract("input_constraint_lmi: dimension mismatch"));
    }
    let d = face_distance(a, b, u_bar)?;
    let y = k * p;
    Ok(input_constraint_expr(a, d, &ExprMatrix::from_const(&y), &ExprMatrix::from_const(p), &LinExpr::constant(r))
        .eval(&[]))
}

/// Support value `max { aᵀη : ηᵀP⁻¹η ≤ 1/r } = √(aᵀPa / r)`.
pub fn support_value<T: Real>(a: &DVector<T>, p: &DMatrix<T>, r: T) -> T {
    (a.dot(&(p * a)) / r).sqrt()
}

/// Maps a unit vector `z` to the boundary point `(P/r)^{1/2} z` of the funnel.
pub fn boundary_point<T: Real>(sqrt_p: &DMatrix<T>, r: T, z: &DVector<T>) -> DVector<T> {
    sqrt_p * z / r.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{spd_inverse, sym_sqrt};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn radius_examples() {
        let fr = |k: f64, g: f64, d: f64, m: RadiusMode<f64>| funnel_radius(k, g, d, m);
        let on = RadiusMode::OnlinePointwise;
        assert_eq!(fr(0.3, 2.0, 0.0, on).unwrap(), 0.0);
        assert_eq!(fr(-4.0, 2.0, 0.0, on).unwrap(), 0.0);
        assert!((fr(-0.5, 2.0, 0.1, on).unwrap() - 0.02).abs() < 1e-15);
        assert!((fr(0.5, 2.0, 0.1, on).unwrap() - 0.04).abs() < 1e-15);
        let off = RadiusMode::OfflineWorstCase { k_max: 0.75 };
        assert!((fr(0.5, 2.0, 0.1, off).unwrap() - 0.08).abs() < 1e-15);
        assert!((fr(-0.5, 2.0, 0.1, off).unwrap() - 0.02).abs() < 1e-15);
        assert!(matches!(fr(1.0, 2.0, 0.1, on), Err(Error::Infeasible(_))));
    }

    #[test]
    fn r_bar_is_capped() {
        assert_eq!(r_bar(1.0, 0.0), R_BAR_CAP);
        assert!((r_bar(2.0f64, 0.1) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn sample_examples() {
        let p = DMatrix::<f64>::identity(2, 2);
        assert_eq!(funnel_sample(&DVector::zeros(2), &p).unwrap(), 0.0);
        assert!((funnel_sample(&DVector::from_vec(vec![3.0, 4.0]), &p).unwrap() - 25.0).abs() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(funnel_sample(&DVector::zeros(2), &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn sample_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let m = DMatrix::from_fn(4, 4, |_, _| rng.random::<f64>() - 0.5);
            let p = &m * m.transpose() + DMatrix::identity(4, 4) * 0.1;
            let eta = DVector::from_fn(4, |_, _| rng.random::<f64>() - 0.5);
            let oracle = (eta.transpose() * spd_inverse(&p).unwrap() * &eta)[(0, 0)];
            let got = funnel_sample(&eta, &p).unwrap();
            assert!((got - oracle).abs() <= 1e-10 * (1.0 + oracle.abs()));
        }
    }

    #[test]
    fn state_block_examples() {
        let a = DVector::<f64>::from_vec(vec![1.0, 0.0]);
        let x = DVector::zeros(2);
        let m = state_constraint_lmi(&a, 1.0, &x, &DMatrix::identity(2, 2), 1.0).unwrap();
        assert_eq!(m[(0, 1)], 1.0);
        assert!(min_eig(&m).abs() < 1e-12);
        let big = state_constraint_lmi(&a, 1.0, &x, &(DMatrix::identity(2, 2) * 4.0), 1.0).unwrap();
        assert!(min_eig(&big) < 0.0);
        assert!((support_value::<f64>(&a, &(DMatrix::identity(2, 2) * 4.0), 1.0) - 2.0).abs() < 1e-12);
        assert!(matches!(state_constraint_lmi(&a, 0.0, &x, &DMatrix::identity(2, 2), 1.0), Err(Error::Geometry(_))));
    }

    #[test]
    fn input_block_examples() {
        let a = DVector::<f64>::from_vec(vec![1.0]);
        let u = DVector::zeros(1);
        let k0 = DMatrix::zeros(1, 2);
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let m = input_constraint_lmi(&a, 1.5, &u, &k0, &p, 0.3).unwrap();
        assert!((m[(0, 0)] - 2.25 * 0.3).abs() < 1e-15);
        assert_eq!(m.view((0, 1), (1, 2)).amax(), 0.0);
        assert!(min_eig(&m) > 0.0);
        let one = DMatrix::from_element(1, 1, 1.0);
        let s = input_constraint_lmi(&a, 1.0, &u, &one, &one, 1.0).unwrap();
        assert!(min_eig(&s).abs() < 1e-12);
    }

    #[test]
    fn scalar_form_matches_block_feasibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let m = DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>() - 0.5);
            let p = &m * m.transpose() + DMatrix::identity(3, 3) * 0.05;
            let a = DVector::from_fn(3, |_, _| rng.random::<f64>() - 0.5);
            let r = 0.2 + rng.random::<f64>();
            let d = 0.05 + rng.random::<f64>();
            let block = state_constraint_expr(&a, d, &ExprMatrix::from_const(&p), &LinExpr::constant(r)).eval(&[]);
            let scalar = state_constraint_scalar(&a, d, &ExprMatrix::from_const(&p), &LinExpr::constant(r)).eval(&[]);
            if scalar.abs() > 1e-9 {
                assert_eq!(min_eig(&block) >= 0.0, scalar >= 0.0);
            }
        }
    }

    #[test]
    fn psd_block_keeps_boundary_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut checked = 0;
        while checked < 20 {
            let m = DMatrix::from_fn(2, 2, |_, _| rng.random::<f64>() - 0.5);
            let p = &m * m.transpose() + DMatrix::identity(2, 2) * 0.05;
            let a = DVector::from_fn(2, |_, _| rng.random::<f64>() - 0.5);
            let x = DVector::from_fn(2, |_, _| rng.random::<f64>() - 0.5);
            let b = a.dot(&x) + 0.1 + rng.random::<f64>();
            let r = 0.5 + 2.0 * rng.random::<f64>();
            let blk = state_constraint_lmi(&a, b, &x, &p, r).unwrap();
            if min_eig(&blk) < 0.0 {
                continue;
            }
            checked += 1;
            let sp = sym_sqrt(&p);
            for k in 0..2000 {
                let th = k as f64 / 2000.0 * std::f64::consts::TAU;
                let z = DVector::from_vec(vec![th.cos(), th.sin()]);
                let eta = boundary_point(&sp, r, &z);
                assert!(b - a.dot(&(&x + eta)) >= -1e-9);
            }
        }
    }
}
