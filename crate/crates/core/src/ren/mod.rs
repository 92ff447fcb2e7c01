//! Recurrent equilibrium network with an acyclic implicit layer.

mod checkpoint;
mod iqc;
mod train;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use iqc::{check_iqc, iqc_certificate_matrix, well_posedness_matrix, IqcReport, RenIqcSpec, TOL_PSD};
pub use train::{flatten, gradient, loss_and_grad, objective, train_step, trainable_mask, unflatten, Grads, TrainOutcome, TrainSequence, GRAD_CLIP};

use crate::error::{Error, Result};
use crate::linalg::all_finite;
use crate::scalar::Real;

/// Slope-restricted scalar activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Logistic,
}

impl Activation {
    pub fn eval<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Logistic => T::one() / (T::one() + (-x).exp()),
        }
    }

    pub fn deriv<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Logistic => {
                let s = self.eval(x);
                s * (T::one() - s)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenParams<T: Real> {
    pub n_x: usize,
    pub n_v: usize,
    pub n: usize,
    pub a: DMatrix<T>,
    pub b1: DMatrix<T>,
    pub b2: DMatrix<T>,
    pub c1: DMatrix<T>,
    pub c2: DMatrix<T>,
    /// Strictly lower triangular.
    pub d11: DMatrix<T>,
    pub d12: DMatrix<T>,
    pub d21: DMatrix<T>,
    pub d22: DMatrix<T>,
    pub bx: DVector<T>,
    pub bv: DVector<T>,
    pub by: DVector<T>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenState<T: Real> {
    pub x: DVector<T>,
    pub last_w: DVector<T>,
}

impl<T: Real> RenState<T> {
    pub fn zeros(params: &RenParams<T>) -> Self {
        Self { x: DVector::zeros(params.n_x), last_w: DVector::zeros(params.n_v) }
    }
}

impl<T: Real> RenParams<T> {
    pub fn zeros(n_x: usize, n_v: usize, n: usize, activation: Activation) -> Self {
        Self {
            n_x,
            n_v,
            n,
            a: DMatrix::zeros(n_x, n_x),
            b1: DMatrix::zeros(n_x, n_v),
            b2: DMatrix::zeros(n_x, n),
            c1: DMatrix::zeros(n_v, n_x),
            c2: DMatrix::zeros(n, n_x),
            d11: DMatrix::zeros(n_v, n_v),
            d12: DMatrix::zeros(n_v, n),
            d21: DMatrix::zeros(n, n_v),
            d22: DMatrix::zeros(n, n),
            bx: DVector::zeros(n_x),
            bv: DVector::zeros(n_v),
            by: DVector::zeros(n),
            activation,
        }
    }

    /// Small random hidden weights with a zero output map, so the initial
    /// network predicts `Δ̂ = 0`.
    pub fn random_init(n_x: usize, n_v: usize, n: usize, activation: Activation, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(n_x, n_v, n, activation);
        let mut fill = |m: &mut DMatrix<T>, s: f64| {
            for v in m.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = T::lit(s * z);
            }
        };
        let sx = scale / (n_x as f64).sqrt();
        let sv = scale / (n_v as f64).sqrt();
        let sn = scale / (n as f64).sqrt();
        fill(&mut p.a, sx);
        fill(&mut p.b1, sv);
        fill(&mut p.b2, sn);
        fill(&mut p.c1, sx);
        fill(&mut p.d11, sv);
        fill(&mut p.d12, sn);
        p.d11 = strict_lower(&p.d11);
        p
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("A", &self.a, self.n_x, self.n_x),
            ("B1", &self.b1, self.n_x, self.n_v),
            ("B2", &self.b2, self.n_x, self.n),
            ("C1", &self.c1, self.n_v, self.n_x),
            ("C2", &self.c2, self.n, self.n_x),
            ("D11", &self.d11, self.n_v, self.n_v),
            ("D12", &self.d12, self.n_v, self.n),
            ("D21", &self.d21, self.n, self.n_v),
            ("D22", &self.d22, self.n, self.n),
        ];
        for (name, m, r, c) in checks {
            if m.nrows() != r || m.ncols() != c {
                return Err(Error::contract(format!("{name} is {}x{}, expected {r}x{c}", m.nrows(), m.ncols())));
            }
        }
        if self.bx.len() != self.n_x || self.bv.len() != self.n_v || self.by.len() != self.n {
            return Err(Error::contract("REN bias dimension mismatch"));
        }
        for i in 0..self.n_v {
            for j in i..self.n_v {
                if self.d11[(i, j)] != T::zero() {
                    return Err(Error::contract("D11 must be strictly lower triangular"));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn strict_lower<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| if j < i { m[(i, j)] } else { T::zero() })
}

/// Solves `w = σ(D₁₁w + C₁x̃ + D₁₂x̂ + b_v)` row by row; returns `(w, v)`.
pub fn equilibrium_solve<T: Real>(params: &RenParams<T>, x: &DVector<T>, u: &DVector<T>) -> (DVector<T>, DVector<T>) {
    let mut v = &params.c1 * x + &params.d12 * u + &params.bv;
    let mut w = DVector::zeros(params.n_v);
    for i in 0..params.n_v {
        let mut vi = v[i];
        for j in 0..i {
            vi += params.d11[(i, j)] * w[j];
        }
        v[i] = vi;
        w[i] = params.activation.eval(vi);
    }
    (w, v)
}

/// One REN transition driven by input `x̂`; returns the next hidden state and `Δ̂`.
pub fn ren_step<T: Real>(params: &RenParams<T>, state: &RenState<T>, u: &DVector<T>) -> Result<(RenState<T>, DVector<T>)> {
    let (w, _) = equilibrium_solve(params, &state.x, u);
    let x_next = &params.a * &state.x + &params.b1 * &w + &params.b2 * u + &params.bx;
    let y = &params.c2 * &state.x + &params.d21 * &w + &params.d22 * u + &params.by;
    if !all_finite(&x_next) || !all_finite(&y) {
        return Err(Error::numerical("REN output non-finite"));
    }
    Ok((RenState { x: x_next, last_w: w }, y))
}

/// Runs `ren_step` over each (state, input) pair independently.
pub fn ren_step_batch<T: Real>(
    params: &RenParams<T>,
    states: &[RenState<T>],
    inputs: &[DVector<T>],
) -> Result<Vec<(RenState<T>, DVector<T>)>> {
    states.iter().zip(inputs).map(|(s, u)| ren_step(params, s, u)).collect()
}
