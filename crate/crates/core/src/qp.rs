//! Dense convex QP by a primal-dual interior-point method:
//! `min ½zᵀHz + fᵀz` s.t. `A z = b`, `G z ≤ h`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct QpProblem<T: Real> {
    pub h: DMatrix<T>,
    pub f: DVector<T>,
    pub a_eq: DMatrix<T>,
    pub b_eq: DVector<T>,
    pub g: DMatrix<T>,
    pub h_ineq: DVector<T>,
}

#[derive(Clone, Debug)]
pub struct QpSolution<T: Real> {
    pub z: DVector<T>,
    pub y: DVector<T>,
    pub lambda: DVector<T>,
    pub slack: DVector<T>,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct QpSettings<T> {
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Real> Default for QpSettings<T> {
    fn default() -> Self {
        Self { tol: T::lit(1e-10), max_iter: 100 }
    }
}

impl<T: Real> QpProblem<T> {
    fn validate(&self) -> Result<()> {
        let n = self.f.len();
        if self.h.shape() != (n, n)
            || self.a_eq.ncols() != n
            || self.a_eq.nrows() != self.b_eq.len()
            || self.g.ncols() != n
            || self.g.nrows() != self.h_ineq.len()
        {
            return Err(Error::contract("qp: dimension mismatch"));
        }
        Ok(())
    }

    /// Indices of inequality rows whose multipliers are largest: the
    /// constraints most responsible for a failure.
    fn binding(&self, lambda: &DVector<T>, count: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..lambda.len()).collect();
        idx.sort_by(|&i, &j| lambda[j].partial_cmp(&lambda[i]).unwrap_or(std::cmp::Ordering::Equal));
        idx.truncate(count);
        idx
    }
}

fn step_to_boundary<T: Real>(v: &DVector<T>, dv: &DVector<T>) -> T {
    let mut a = T::one();
    for i in 0..v.len() {
        if dv[i] < T::zero() {
            a = a.min(-v[i] / dv[i]);
        }
    }
    a
}

pub fn solve_qp<T: Real>(qp: &QpProblem<T>, settings: &QpSettings<T>) -> Result<QpSolution<T>> {
    qp.validate()?;
    let n = qp.f.len();
    let p = qp.b_eq.len();
    let mi = qp.h_ineq.len();
    let mut z = DVector::zeros(n);
    let mut y = DVector::zeros(p);
    let mut s = (&qp.h_ineq - &qp.g * &z).map(|v| v.max(T::one()));
    let mut lam = DVector::from_element(mi, T::one());
    let scale = T::one() + qp.f.amax().max(qp.h_ineq.amax()).max(qp.b_eq.amax());

    for it in 0..settings.max_iter {
        let r_d = &qp.h * &z + &qp.f + qp.a_eq.transpose() * &y + qp.g.transpose() * &lam;
        let r_p = &qp.a_eq * &z - &qp.b_eq;
        let r_i = &qp.g * &z + &s - &qp.h_ineq;
        let mu = if mi > 0 { s.dot(&lam) / T::lit(mi as f64) } else { T::zero() };
        let res = r_d.amax().max(r_p.amax()).max(r_i.amax());
        if res <= settings.tol * scale && mu <= settings.tol * scale {
            return Ok(QpSolution { z, y, lambda: lam, slack: s, iterations: it });
        }
        if !res.is_finite_val() || z.amax() > T::lit(1e12) {
            break;
        }

        let w = lam.component_div(&s);
        let mut kkt = DMatrix::zeros(n + p, n + p);
        let gw = DMatrix::from_fn(mi, n, |i, j| qp.g[(i, j)] * w[i]);
        let top = &qp.h + qp.g.transpose() * gw;
        kkt.view_mut((0, 0), (n, n)).copy_from(&top);
        kkt.view_mut((0, n), (n, p)).copy_from(&qp.a_eq.transpose());
        kkt.view_mut((n, 0), (p, n)).copy_from(&qp.a_eq);
        // Tiny regularization keeps the factorization alive when equality rows
        // are dependent.
        for i in 0..n {
            kkt[(i, i)] += T::lit(1e-12);
        }
        for i in 0..p {
            kkt[(n + i, n + i)] -= T::lit(1e-12);
        }
        let lu = kkt.lu();

        let solve = |r_c: &DVector<T>| -> Option<(DVector<T>, DVector<T>, DVector<T>, DVector<T>)> {
            let corr = (lam.component_mul(&r_i) - r_c).component_div(&s);
            let mut rhs = DVector::zeros(n + p);
            rhs.rows_mut(0, n).copy_from(&(-&r_d - qp.g.transpose() * &corr));
            rhs.rows_mut(n, p).copy_from(&(-&r_p));
            let sol = lu.solve(&rhs)?;
            let dz = sol.rows(0, n).into_owned();
            let dy = sol.rows(n, p).into_owned();
            let ds = -&r_i - &qp.g * &dz;
            let dl = (-r_c - lam.component_mul(&ds)).component_div(&s);
            Some((dz, dy, ds, dl))
        };

        let rc_aff = s.component_mul(&lam);
        let (_, _, ds_a, dl_a) = solve(&rc_aff).ok_or_else(|| Error::numerical("qp: singular KKT system"))?;
        let a_aff = step_to_boundary(&s, &ds_a).min(step_to_boundary(&lam, &dl_a));
        let mu_aff = if mi > 0 {
            (&s + &ds_a * a_aff).dot(&(&lam + &dl_a * a_aff)) / T::lit(mi as f64)
        } else {
            T::zero()
        };
        let sigma = if mu > T::zero() { (mu_aff / mu).powi(3) } else { T::zero() };
        let rc = &rc_aff + ds_a.component_mul(&dl_a) - DVector::from_element(mi, sigma * mu);
        let (dz, dy, ds, dl) = solve(&rc).ok_or_else(|| Error::numerical("qp: singular KKT system"))?;
        let alpha = (T::lit(0.99) * step_to_boundary(&s, &ds).min(step_to_boundary(&lam, &dl))).min(T::one());
        z += &dz * alpha;
        y += &dy * alpha;
        s += &ds * alpha;
        lam += &dl * alpha;
    }
    Err(Error::Infeasible(format!(
        "qp did not converge; largest multipliers on inequality rows {:?}",
        qp.binding(&lam, 5)
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_matches_linear_solve() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let f = DVector::from_vec(vec![-1.0, 0.3]);
        let qp = QpProblem {
            h: h.clone(),
            f: f.clone(),
            a_eq: DMatrix::zeros(0, 2),
            b_eq: DVector::zeros(0),
            g: DMatrix::zeros(0, 2),
            h_ineq: DVector::zeros(0),
        };
        let sol = solve_qp(&qp, &QpSettings::default()).unwrap();
        let expect = h.lu().solve(&(-f)).unwrap();
        assert!((sol.z - expect).amax() < 1e-9);
    }

    #[test]
    fn box_and_equality() {
        // min ½|z|² − z₀ − z₁ s.t. z₀ + z₁ = 1, z₀ ≤ 0.2.
        let qp = QpProblem {
            h: DMatrix::<f64>::identity(2, 2),
            f: DVector::from_vec(vec![-1.0, -1.0]),
            a_eq: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            b_eq: DVector::from_vec(vec![1.0]),
            g: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            h_ineq: DVector::from_vec(vec![0.2]),
        };
        let sol = solve_qp(&qp, &QpSettings::default()).unwrap();
        assert!((sol.z[0] - 0.2).abs() < 1e-8);
        assert!((sol.z[1] - 0.8).abs() < 1e-8);
    }

    #[test]
    fn infeasible_reports_rows() {
        let qp = QpProblem {
            h: DMatrix::<f64>::identity(1, 1),
            f: DVector::zeros(1),
            a_eq: DMatrix::zeros(0, 1),
            b_eq: DVector::zeros(0),
            g: DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            h_ineq: DVector::from_vec(vec![-1.0, -1.0]),
        };
        assert!(matches!(solve_qp(&qp, &QpSettings::default()), Err(Error::Infeasible(_))));
    }
}
