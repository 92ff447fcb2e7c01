//! Four-DG DC microgrid on a ring, discretized exactly at the sampling period.
//!
//! Each DG `i` has voltage `V_i` across a bus capacitor and current `I_i`
//! through a filter inductor:
//!
//! ```text
//! C dV_i/dt = −G V_i + I_i + g_line Σ_{j∈N_i} (V_j − V_i)
//! L dI_i/dt = −V_i − R I_i + u_i
//! ```
//!
//! States are deviations from the operating point, interleaved `(V_i, I_i)`.

mod nominal;
mod scenario;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use nominal::{equilibrium_input, nominal_trajectory, NominalOptions};
pub use scenario::AttackScenario;

use crate::error::{Error, Result};
use crate::linalg::cast_mat;
use crate::plant::{LinearDynamics, PlantModel, Polytope, ZeroNonlinearity};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgParams {
    pub capacitance: f64,
    pub inductance: f64,
    pub resistance: f64,
    pub load_conductance: f64,
}

impl Default for DgParams {
    fn default() -> Self {
        Self { capacitance: 1.0, inductance: 0.5, resistance: 0.1, load_conductance: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MicrogridSpec {
    pub num_dgs: usize,
    pub dgs: Vec<DgParams>,
    pub line_conductance: f64,
    /// Neighbor lists; empty means a ring over `num_dgs` nodes.
    pub adjacency: Vec<Vec<usize>>,
    pub sampling_period: f64,
    pub epoch_steps: usize,
    pub num_epochs: usize,
    pub voltage_limit: f64,
    pub current_limit: f64,
    pub input_limit: f64,
}

impl Default for MicrogridSpec {
    fn default() -> Self {
        Self {
            num_dgs: 4,
            dgs: vec![
                DgParams::default(),
                DgParams { capacitance: 1.2, inductance: 0.6, ..DgParams::default() },
                DgParams { capacitance: 0.9, inductance: 0.45, resistance: 0.12, ..DgParams::default() },
                DgParams { capacitance: 1.1, inductance: 0.55, load_conductance: 0.12, ..DgParams::default() },
            ],
            line_conductance: 0.5,
            adjacency: Vec::new(),
            sampling_period: 0.2,
            epoch_steps: 20,
            num_epochs: 5,
            voltage_limit: 0.5,
            current_limit: 1.5,
            input_limit: 3.0,
        }
    }
}

impl MicrogridSpec {
    pub fn n(&self) -> usize {
        2 * self.num_dgs
    }

    pub fn m(&self) -> usize {
        self.num_dgs
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        if !self.adjacency.is_empty() {
            return self.adjacency.clone();
        }
        let k = self.num_dgs;
        (0..k)
            .map(|i| {
                let mut v = vec![(i + k - 1) % k, (i + 1) % k];
                v.sort_unstable();
                v.dedup();
                v.retain(|&j| j != i);
                v
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_dgs == 0 || self.dgs.len() != self.num_dgs {
            return Err(Error::Config("microgrid: need one parameter set per DG".into()));
        }
        for (i, p) in self.dgs.iter().enumerate() {
            if !(p.capacitance > 0.0 && p.inductance > 0.0 && p.resistance >= 0.0 && p.load_conductance >= 0.0) {
                return Err(Error::Config(format!("microgrid: DG {i} has non-physical parameters")));
            }
        }
        if !(self.sampling_period > 0.0) || self.epoch_steps == 0 || self.num_epochs == 0 {
            return Err(Error::Config("microgrid: sampling period and epoch structure must be positive".into()));
        }
        if !(self.voltage_limit > 0.0 && self.current_limit > 0.0 && self.input_limit > 0.0) {
            return Err(Error::Config("microgrid: box limits must be positive".into()));
        }
        let nb = self.neighbors();
        if nb.len() != self.num_dgs {
            return Err(Error::Config("microgrid: adjacency must list every DG".into()));
        }
        for (i, list) in nb.iter().enumerate() {
            for &j in list {
                if j >= self.num_dgs || j == i || !nb[j].contains(&i) {
                    return Err(Error::Config(format!("microgrid: adjacency entry {i}->{j} is not symmetric")));
                }
            }
        }
        Ok(())
    }

    /// Per-DG `(A_i, B₁ᵢ, B₂ᵢ, C_i)` in continuous time.
    pub fn subsystem(&self, i: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let p = &self.dgs[i];
        let a = DMatrix::from_row_slice(
            2,
            2,
            &[-p.load_conductance / p.capacitance, 1.0 / p.capacitance, -1.0 / p.inductance, -p.resistance / p.inductance],
        );
        let b1 = DMatrix::from_column_slice(2, 1, &[0.0, 1.0 / p.inductance]);
        let b2 = DMatrix::from_column_slice(2, 1, &[self.line_conductance / p.capacitance, 0.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        (a, b1, b2, c)
    }

    /// Stacked continuous-time `(A_c, B_c)` including line coupling.
    pub fn continuous(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let (n, m) = (self.n(), self.m());
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, m);
        let nb = self.neighbors();
        for i in 0..self.num_dgs {
            let (ai, b1, b2, _) = self.subsystem(i);
            a.view_mut((2 * i, 2 * i), (2, 2)).copy_from(&ai);
            b.view_mut((2 * i, i), (2, 1)).copy_from(&b1);
            // v_i = Σ_j (y_j − y_i) with y = V.
            for &j in &nb[i] {
                for r in 0..2 {
                    a[(2 * i + r, 2 * j)] += b2[(r, 0)];
                    a[(2 * i + r, 2 * i)] -= b2[(r, 0)];
                }
            }
        }
        (a, b)
    }

    /// Per-subsystem derivative with the coupling input computed explicitly.
    pub fn subsystem_derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let nb = self.neighbors();
        let mut out = DVector::zeros(self.n());
        for i in 0..self.num_dgs {
            let (ai, b1, b2, ci) = self.subsystem(i);
            let xi = x.rows(2 * i, 2).into_owned();
            let yi = (&ci * &xi)[0];
            let v: f64 = nb[i].iter().map(|&j| (&ci * x.rows(2 * j, 2))[0] - yi).sum();
            let dx = &ai * &xi + &b1 * u[i] + &b2 * v;
            out.rows_mut(2 * i, 2).copy_from(&dx);
        }
        out
    }

    /// Zero-order-hold discretization via the exponential of the augmented
    /// matrix `[[A, B], [0, 0]]·h`.
    pub fn discrete(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let (a, b) = self.continuous();
        let (n, m) = (self.n(), self.m());
        let mut aug = DMatrix::zeros(n + m, n + m);
        aug.view_mut((0, 0), (n, n)).copy_from(&a);
        aug.view_mut((0, n), (n, m)).copy_from(&b);
        let e = (aug * self.sampling_period).exp();
        (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned())
    }

    pub fn horizon(&self) -> usize {
        self.epoch_steps * self.num_epochs
    }

    pub fn state_box(&self) -> DVector<f64> {
        DVector::from_fn(self.n(), |k, _| if k % 2 == 0 { self.voltage_limit } else { self.current_limit })
    }
}

/// Stacked LTI plant with `φ ≡ 0` (`n_p = n_q = 1`, zero selectors) and box
/// polytopes around the operating point.
pub fn build_plant<T: Real>(spec: &MicrogridSpec) -> Result<PlantModel<T>> {
    spec.validate()?;
    let (a, b) = spec.discrete();
    let (n, m) = (spec.n(), spec.m());
    let state = Polytope::from_box(&DVector::zeros(n), &crate::linalg::cast_vec(&spec.state_box()));
    let input = Polytope::from_box(&DVector::zeros(m), &DVector::from_element(m, T::lit(spec.input_limit)));
    Ok(PlantModel {
        n,
        m,
        n_q: 1,
        n_p: 1,
        dynamics: Arc::new(LinearDynamics { a: cast_mat(&a), b: cast_mat(&b) }),
        phi: Arc::new(ZeroNonlinearity { out_dim: 1 }),
        e: DMatrix::zeros(n, 1),
        c: DMatrix::zeros(1, n),
        d: DMatrix::zeros(1, m),
        g: DMatrix::zeros(1, n),
        state_polytopes: vec![state],
        input_polytopes: vec![input],
        horizon: spec.horizon(),
    })
}
