//! Epoch-structured attack scenario: current-channel resets and a bounded
//! bias-plus-sinusoid injection.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::MicrogridSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackScenario {
    /// Start state `(V_1, I_1, …)`, the first nominal waypoint.
    pub initial_state: Vec<f64>,
    /// Per-epoch current-channel offsets added at each epoch start.
    pub reset_offsets: Vec<Vec<f64>>,
    /// Per-epoch bias `b_e`.
    pub bias: Vec<f64>,
    /// Per-epoch sinusoid amplitude `a_e`.
    pub amplitude: Vec<f64>,
    /// Per-epoch angular frequency `ω_e` in rad/s.
    pub omega: Vec<f64>,
    /// Per-DG multiplier on the injected waveform.
    pub channel_gain: Vec<f64>,
    /// Nominal trajectory computed in the first epoch only.
    pub nominal_freeze: bool,
}

impl Default for AttackScenario {
    fn default() -> Self {
        Self {
            initial_state: vec![0.1, 0.0, -0.08, 0.0, 0.12, 0.0, -0.1, 0.0],
            reset_offsets: vec![
                vec![0.0, 0.0, 0.0, 0.0],
                vec![0.1, -0.1, 0.05, -0.05],
                vec![-0.08, 0.06, -0.1, 0.08],
                vec![0.12, 0.0, -0.06, 0.1],
                vec![-0.05, 0.1, 0.08, -0.12],
            ],
            bias: vec![0.0, 0.02, -0.02, 0.025, -0.015],
            amplitude: vec![0.0, 0.015, 0.02, 0.015, 0.02],
            omega: vec![1.5, 1.5, 2.0, 1.0, 2.5],
            channel_gain: vec![1.0, -0.8, 0.6, -1.0],
            nominal_freeze: true,
        }
    }
}

impl AttackScenario {
    pub fn validate(&self, spec: &MicrogridSpec) -> Result<()> {
        let (n, k, e) = (spec.n(), spec.num_dgs, spec.num_epochs);
        let bad = |what: &str| Err(Error::Config(format!("scenario: {what}")));
        if self.initial_state.len() != n {
            return bad("initial_state must have one entry per state");
        }
        if self.reset_offsets.len() != e || self.reset_offsets.iter().any(|o| o.len() != k) {
            return bad("reset_offsets must be num_epochs × num_dgs");
        }
        if self.bias.len() != e || self.amplitude.len() != e || self.omega.len() != e {
            return bad("bias, amplitude and omega need one entry per epoch");
        }
        if self.channel_gain.len() != k {
            return bad("channel_gain needs one entry per DG");
        }
        let all = self
            .initial_state
            .iter()
            .chain(self.reset_offsets.iter().flatten())
            .chain(&self.bias)
            .chain(&self.amplitude)
            .chain(&self.omega)
            .chain(&self.channel_gain);
        if all.into_iter().any(|v| !v.is_finite()) {
            return bad("non-finite entry");
        }
        Ok(())
    }

    pub fn epoch_of(&self, spec: &MicrogridSpec, t: usize) -> usize {
        (t / spec.epoch_steps).min(spec.num_epochs - 1)
    }

    /// Steps at which the state is reset (every epoch start after the first).
    pub fn reset_steps(&self, spec: &MicrogridSpec) -> Vec<usize> {
        (1..spec.num_epochs).map(|e| e * spec.epoch_steps).collect()
    }

    /// `x_start` plus the epoch's current-channel offsets.
    pub fn reset_state(&self, epoch: usize) -> DVector<f64> {
        let mut x = DVector::from_column_slice(&self.initial_state);
        for (i, off) in self.reset_offsets[epoch].iter().enumerate() {
            x[2 * i + 1] += off;
        }
        x
    }

    pub fn start_state(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.initial_state)
    }

    /// `Δ_t`: on current channel `i`, `g_i (b_e + a_e sin(ω_e t h))`; zero on
    /// voltage channels.
    pub fn inject_disturbance(&self, spec: &MicrogridSpec, t: usize) -> DVector<f64> {
        let e = self.epoch_of(spec, t);
        let time = t as f64 * spec.sampling_period;
        let w = self.bias[e] + self.amplitude[e] * (self.omega[e] * time).sin();
        let mut d = DVector::zeros(spec.n());
        for (i, g) in self.channel_gain.iter().enumerate() {
            d[2 * i + 1] = g * w;
        }
        d
    }

    /// `‖Δ(·)‖∞` over the horizon, as a max of per-step sup norms.
    pub fn delta_inf(&self, spec: &MicrogridSpec) -> f64 {
        (0..spec.horizon()).map(|t| self.inject_disturbance(spec, t).amax()).fold(0.0, f64::max)
    }
}
