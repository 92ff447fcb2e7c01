//! Incremental IQC certificate for the REN and its penalty gradient.

use nalgebra::{DMatrix, DVector};

use super::train::Grads;
use super::RenParams;
use crate::error::{Error, Result};
use crate::linalg::{max_eig, min_eig, min_eigpair, symmetrize};
use crate::scalar::Real;

/// Margin used for every strict-positivity test on the certificate.
pub const TOL_PSD: f64 = 1e-9;

/// Offset in `P₁ = L Lᵀ + ε I`.
pub const P1_EPS: f64 = 1e-6;

/// Supply-rate triple `(Q, S, R)`, contraction rate `ᾱ` and the trainable
/// multipliers, stored as `P₁ = L Lᵀ + εI` and `Λ_w = diag(exp(λ))`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenIqcSpec<T: Real> {
    pub q: DMatrix<T>,
    pub s: DMatrix<T>,
    pub r: DMatrix<T>,
    pub alpha_bar: T,
    pub l: DMatrix<T>,
    pub lambda_log: DVector<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IqcReport {
    pub certified: bool,
    pub min_eig: f64,
    pub min_eig_f: f64,
}

impl<T: Real> RenIqcSpec<T> {
    /// Builds a spec from explicit multipliers.
    pub fn with_multipliers(
        q: DMatrix<T>,
        s: DMatrix<T>,
        r: DMatrix<T>,
        alpha_bar: T,
        p1: &DMatrix<T>,
        lambda: &DVector<T>,
    ) -> Result<Self> {
        if lambda.iter().any(|&v| v <= T::zero()) {
            return Err(Error::contract("Λ_w must have strictly positive diagonal"));
        }
        let n_x = p1.nrows();
        let shifted = p1 - DMatrix::identity(n_x, n_x) * T::lit(P1_EPS);
        let l = shifted
            .cholesky()
            .ok_or_else(|| Error::contract("P₁ must exceed εI"))?
            .l();
        let spec = Self { q, s, r, alpha_bar, l, lambda_log: lambda.map(|v| v.ln()) };
        spec.validate()?;
        Ok(spec)
    }

    /// Incremental L₂-gain triple `Q = −I/γ, S = 0, R = γI` with `P₁ = I`, `Λ_w = I`.
    pub fn l2_gain(n_x: usize, n_v: usize, n: usize, gamma: T, alpha_bar: T) -> Result<Self> {
        if gamma <= T::zero() {
            return Err(Error::contract("L₂ gain must be positive"));
        }
        Self::with_multipliers(
            DMatrix::identity(n, n) * (-T::one() / gamma),
            DMatrix::zeros(n, n),
            DMatrix::identity(n, n) * gamma,
            alpha_bar,
            &DMatrix::identity(n_x, n_x),
            &DVector::from_element(n_v, T::one()),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_bar > T::zero() && self.alpha_bar <= T::one()) {
            return Err(Error::contract("ᾱ must lie in (0, 1]"));
        }
        if max_eig(&self.q) > T::lit(1e-12) {
            return Err(Error::contract("Q must be negative semidefinite"));
        }
        if crate::linalg::asymmetry(&self.r) > T::lit(1e-12) {
            return Err(Error::contract("R must be symmetric"));
        }
        if !self.lambda_log.iter().all(|v| v.is_finite_val()) {
            return Err(Error::contract("Λ_w entries must be finite and positive"));
        }
        Ok(())
    }

    pub fn p1(&self) -> DMatrix<T> {
        let n = self.l.nrows();
        &self.l * self.l.transpose() + DMatrix::identity(n, n) * T::lit(P1_EPS)
    }

    pub fn lambda(&self) -> DVector<T> {
        self.lambda_log.map(|v| v.exp())
    }
}

/// `F = 2Λ − ΛD₁₁ − D₁₁ᵀΛ`.
pub fn well_posedness_matrix<T: Real>(params: &RenParams<T>, spec: &RenIqcSpec<T>) -> DMatrix<T> {
    let lam = DMatrix::from_diagonal(&spec.lambda());
    let ld = &lam * &params.d11;
    &lam * T::lit(2.0) - &ld - ld.transpose()
}

/// Left-hand side of the REN incremental IQC condition, block order
/// `(x̃, w, x̂)`.
pub fn iqc_certificate_matrix<T: Real>(params: &RenParams<T>, spec: &RenIqcSpec<T>) -> Result<DMatrix<T>> {
    params.validate()?;
    let (nx, nv, n) = (params.n_x, params.n_v, params.n);
    if spec.l.nrows() != nx || spec.lambda_log.len() != nv || spec.q.nrows() != n || spec.s.shape() != (n, n) || spec.r.nrows() != n
    {
        return Err(Error::contract("IQC spec dimensions do not match the REN"));
    }
    let p1 = spec.p1();
    let lam = DMatrix::from_diagonal(&spec.lambda());
    let f = well_posedness_matrix(params, spec);
    let dim = nx + nv + n;
    let mut m = DMatrix::zeros(dim, dim);
    let a2 = spec.alpha_bar * spec.alpha_bar;
    m.view_mut((0, 0), (nx, nx)).copy_from(&(&p1 * a2));
    let b12 = -(params.c1.transpose() * &lam);
    m.view_mut((0, nx), (nx, nv)).copy_from(&b12);
    m.view_mut((nx, 0), (nv, nx)).copy_from(&b12.transpose());
    let b13 = params.c2.transpose() * spec.s.transpose();
    m.view_mut((0, nx + nv), (nx, n)).copy_from(&b13);
    m.view_mut((nx + nv, 0), (n, nx)).copy_from(&b13.transpose());
    m.view_mut((nx, nx), (nv, nv)).copy_from(&f);
    let b23 = params.d21.transpose() * spec.s.transpose() - &lam * &params.d12;
    m.view_mut((nx, nx + nv), (nv, n)).copy_from(&b23);
    m.view_mut((nx + nv, nx), (n, nv)).copy_from(&b23.transpose());
    let sd = &spec.s * &params.d22;
    let b33 = &spec.r + &sd + sd.transpose();
    m.view_mut((nx + nv, nx + nv), (n, n)).copy_from(&b33);

    // Stacked [Aᵀ; B₁ᵀ; B₂ᵀ] and [C₂ᵀ; D₂₁ᵀ; D₂₂ᵀ].
    let mut w = DMatrix::zeros(dim, nx);
    w.view_mut((0, 0), (nx, nx)).copy_from(&params.a.transpose());
    w.view_mut((nx, 0), (nv, nx)).copy_from(&params.b1.transpose());
    w.view_mut((nx + nv, 0), (n, nx)).copy_from(&params.b2.transpose());
    let mut u = DMatrix::zeros(dim, n);
    u.view_mut((0, 0), (nx, n)).copy_from(&params.c2.transpose());
    u.view_mut((nx, 0), (nv, n)).copy_from(&params.d21.transpose());
    u.view_mut((nx + nv, 0), (n, n)).copy_from(&params.d22.transpose());
    m -= &w * &p1 * w.transpose();
    m += &u * &spec.q * u.transpose();
    Ok(symmetrize(&m))
}

pub fn check_iqc<T: Real>(params: &RenParams<T>, spec: &RenIqcSpec<T>) -> Result<IqcReport> {
    let m = iqc_certificate_matrix(params, spec)?;
    let f = well_posedness_matrix(params, spec);
    let min_m = min_eig(&m);
    let min_f = min_eig(&f);
    let tol = T::lit(TOL_PSD);
    Ok(IqcReport { certified: min_m > tol && min_f > tol, min_eig: min_m.as_f64(), min_eig_f: min_f.as_f64() })
}

/// `λ_pen · max(0, tol − λ_min(M))²` and its gradient with respect to every
/// trainable quantity (first-order perturbation of the smallest eigenvalue).
pub(crate) fn penalty_with_grad<T: Real>(
    params: &RenParams<T>,
    spec: &RenIqcSpec<T>,
    lambda_pen: T,
    grads: &mut Grads<T>,
) -> Result<T> {
    let m = iqc_certificate_matrix(params, spec)?;
    let (lmin, v) = min_eigpair(&m);
    let gap = T::lit(TOL_PSD) - lmin;
    if gap <= T::zero() || lambda_pen == T::zero() {
        return Ok(T::zero());
    }
    let pen = lambda_pen * gap * gap;
    // d pen / d λ_min
    let coef = -T::lit(2.0) * lambda_pen * gap;
    let (nx, nv, n) = (params.n_x, params.n_v, params.n);
    let v1: DVector<T> = v.rows(0, nx).into_owned();
    let v2: DVector<T> = v.rows(nx, nv).into_owned();
    let v3: DVector<T> = v.rows(nx + nv, n).into_owned();
    let p1 = spec.p1();
    let lam = spec.lambda();
    let lam_m = DMatrix::from_diagonal(&lam);
    let two = T::lit(2.0);
    let a2 = spec.alpha_bar * spec.alpha_bar;

    let z = &params.a * &v1 + &params.b1 * &v2 + &params.b2 * &v3;
    let y = &params.c2 * &v1 + &params.d21 * &v2 + &params.d22 * &v3;
    let p1z = &p1 * &z;
    let st_v3 = spec.s.transpose() * &v3;
    let qy = &spec.q * &y;
    let lam_v2 = &lam_m * &v2;

    grads.a += (&p1z * v1.transpose()) * (-two * coef);
    grads.b1 += (&p1z * v2.transpose()) * (-two * coef);
    grads.b2 += (&p1z * v3.transpose()) * (-two * coef);
    grads.c1 += (&lam_v2 * v1.transpose()) * (-two * coef);
    grads.c2 += ((&st_v3 + &qy) * v1.transpose()) * (two * coef);
    grads.d21 += ((&st_v3 + &qy) * v2.transpose()) * (two * coef);
    grads.d22 += ((&st_v3 + &qy) * v3.transpose()) * (two * coef);
    grads.d12 += (&lam_v2 * v3.transpose()) * (-two * coef);
    grads.d11 += super::strict_lower(&(&lam_v2 * v2.transpose())) * (-two * coef);

    // P₁ = LLᵀ + εI: dq/dL = 2 G L with G = ᾱ² v₁v₁ᵀ − z zᵀ.
    let g = &v1 * v1.transpose() * a2 - &z * z.transpose();
    let gl = (&g * &spec.l) * (two * coef);
    grads.l += lower(&gl);

    let d11v2 = &params.d11 * &v2;
    let c1v1 = &params.c1 * &v1;
    let d12v3 = &params.d12 * &v3;
    for i in 0..nv {
        let dq = two * v2[i] * v2[i] - two * v2[i] * d11v2[i] - two * c1v1[i] * v2[i] - two * v2[i] * d12v3[i];
        grads.lambda_log[i] += coef * dq * lam[i];
    }
    Ok(pen)
}

fn lower<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| if j <= i { m[(i, j)] } else { T::zero() })
}
