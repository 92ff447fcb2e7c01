//! Run configuration: one TOML file, optionally pointing at separate plant
//! and scenario files.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::mat_from_rows;
use crate::microgrid::{AttackScenario, MicrogridSpec};
use crate::ren::Activation;

/// A matrix written either as a scalar multiple of the identity or as
/// row-major rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scaled(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn to_matrix(&self, n: usize, name: &str) -> Result<DMatrix<f64>> {
        let m = match self {
            MatrixSpec::Scaled(s) => DMatrix::identity(n, n) * *s,
            MatrixSpec::Rows(rows) => mat_from_rows(rows).map_err(|e| Error::Config(format!("{name}: {e}")))?,
        };
        if m.shape() != (n, n) {
            return Err(Error::Config(format!("{name} must be {n}×{n}, got {:?}", m.shape())));
        }
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!("{name} has non-finite entries")));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NominalConfig {
    pub q: MatrixSpec,
    pub r: MatrixSpec,
    pub q_f: MatrixSpec,
    pub terminal_equality: bool,
    pub margin: f64,
}

impl Default for NominalConfig {
    fn default() -> Self {
        Self {
            q: MatrixSpec::Scaled(1.0),
            r: MatrixSpec::Scaled(0.1),
            q_f: MatrixSpec::Scaled(10.0),
            terminal_equality: true,
            margin: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenConfig {
    pub n_x: usize,
    pub n_v: usize,
    pub activation: Activation,
    pub lr: f64,
    pub lambda_pen: f64,
    /// Transitions in the sliding training window.
    pub replay_window: usize,
    pub init_scale: f64,
    /// Incremental L₂ gain of the certificate.
    pub gamma: f64,
    pub alpha_bar: f64,
}

impl Default for RenConfig {
    fn default() -> Self {
        Self {
            n_x: 16,
            n_v: 16,
            activation: Activation::Tanh,
            lr: 1e-3,
            lambda_pen: 10.0,
            replay_window: 20,
            init_scale: 0.1,
            gamma: 1.0,
            alpha_bar: 1.0,
        }
    }
}

/// How the disturbance bound feeding `r̄` is estimated online.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaMode {
    /// Inflated running max of `|Δ̂|` over the current epoch.
    RunningMax,
    /// Inflated `|Δ̂_t|` at the current step.
    Pointwise,
}

/// How `p_f` enters the online program.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalMode {
    /// `P_f = p_f` at every step.
    Fixed,
    /// `P_f = (γ₂/r̄) p_f`: the terminal funnel is scaled to the
    /// disturbance-limited size, so `P_t2 ⪯ γ₂ p_f`.
    DisturbanceFloor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub alpha: f64,
    pub gamma2: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub w5: f64,
    pub p_i: MatrixSpec,
    pub p_f: MatrixSpec,
    pub r0: f64,
    pub rf: f64,
    /// Terminal funnel shape passed to each online solve.
    pub p_f_mode: TerminalMode,
    /// Steps per online window `t₂ − t₁`.
    pub window: usize,
    /// Disturbance bound used before any estimate exists in an epoch.
    pub delta_prior: f64,
    /// Lower bound on the estimate; keeps `r̄` moderate.
    pub delta_floor: f64,
    pub delta_inflation: f64,
    pub delta_mode: DeltaMode,
    /// Extracts the gain from a second, DMI-only solve.
    pub resolve_twice: bool,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            gamma2: 1.0,
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
            w4: 1.0,
            w5: 1e4,
            p_i: MatrixSpec::Scaled(1e-4),
            p_f: MatrixSpec::Scaled(1.5),
            p_f_mode: TerminalMode::DisturbanceFloor,
            r0: 1.0,
            rf: 1.0,
            window: 1,
            delta_prior: 0.05,
            delta_floor: 0.01,
            delta_inflation: 1.1,
            delta_mode: DeltaMode::RunningMax,
            resolve_twice: false,
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Wall times in the trace; off keeps traces byte-reproducible.
    pub record_wall_time: bool,
    pub write_solutions: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { record_wall_time: false, write_solutions: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Plant file, relative to the config file.
    pub plant_file: Option<PathBuf>,
    pub scenario_file: Option<PathBuf>,
    pub microgrid: MicrogridSpec,
    pub scenario: AttackScenario,
    pub nominal: NominalConfig,
    pub ren: RenConfig,
    pub synthesis: SynthesisConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            plant_file: None,
            scenario_file: None,
            microgrid: MicrogridSpec::default(),
            scenario: AttackScenario::default(),
            nominal: NominalConfig::default(),
            ren: RenConfig::default(),
            synthesis: SynthesisConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl RunConfig {
    /// Loads a config and any referenced plant/scenario files, then validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = &cfg.plant_file {
            let full = base.join(p);
            let text = std::fs::read_to_string(&full).map_err(|e| Error::Config(format!("{}: {e}", full.display())))?;
            cfg.microgrid = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", full.display())))?;
        }
        if let Some(p) = &cfg.scenario_file {
            let full = base.join(p);
            let text = std::fs::read_to_string(&full).map_err(|e| Error::Config(format!("{}: {e}", full.display())))?;
            cfg.scenario = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", full.display())))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let s = &self.synthesis;
        if !(s.alpha > 0.0 && s.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", s.alpha));
        }
        if !(s.gamma2 > 0.0 && s.gamma2.is_finite()) {
            return bad(format!("gamma2 must be positive, got {}", s.gamma2));
        }
        for (name, w) in [("w1", s.w1), ("w2", s.w2), ("w3", s.w3), ("w4", s.w4), ("w5", s.w5)] {
            if !(w > 0.0 && w.is_finite()) {
                return bad(format!("{name} must be positive, got {w}"));
            }
        }
        if s.w5 < 1e4 {
            return bad(format!("w5 must be at least 1e4, got {}", s.w5));
        }
        if s.window == 0 || s.window > self.microgrid.epoch_steps {
            return bad(format!("window must lie in 1..={}", self.microgrid.epoch_steps));
        }
        if !(s.delta_prior > 0.0 && s.delta_floor > 0.0 && s.delta_inflation >= 1.0) {
            return bad("delta_prior and delta_floor must be positive, delta_inflation at least 1".into());
        }
        if !(s.r0 > 0.0 && s.rf > 0.0) {
            return bad("r0 and rf must be positive".into());
        }
        if !(s.tol > 0.0) || s.max_iter == 0 {
            return bad("solver tolerance and iteration limit must be positive".into());
        }
        let r = &self.ren;
        if r.n_x == 0 || r.n_v == 0 || r.replay_window == 0 {
            return bad("REN dimensions and replay window must be positive".into());
        }
        if !(r.lr > 0.0 && r.lambda_pen >= 0.0 && r.gamma > 0.0 && r.alpha_bar > 0.0 && r.alpha_bar <= 1.0) {
            return bad("REN lr and gamma must be positive, lambda_pen nonnegative, alpha_bar in (0, 1]".into());
        }
        if !(r.init_scale >= 0.0 && r.init_scale.is_finite()) {
            return bad("REN init_scale must be finite and nonnegative".into());
        }
        let n = self.microgrid.n();
        for (name, m) in [("p_i", &s.p_i), ("p_f", &s.p_f)] {
            let mat = m.to_matrix(n, name)?;
            if crate::linalg::min_eig(&mat) <= 0.0 {
                return bad(format!("{name} must be positive definite"));
            }
        }
        if s.p_f_mode == TerminalMode::DisturbanceFloor && crate::linalg::min_eig(&s.p_f.to_matrix(n, "p_f")?) < 1.0 {
            return bad("with p_f_mode = disturbance-floor, p_f must satisfy p_f ⪰ I".into());
        }
        self.nominal.q.to_matrix(n, "nominal.q")?;
        self.nominal.q_f.to_matrix(n, "nominal.q_f")?;
        self.nominal.r.to_matrix(self.microgrid.m(), "nominal.r")?;
        if !(self.nominal.margin >= 0.0) {
            return bad("nominal.margin must be nonnegative".into());
        }
        self.microgrid.validate().map_err(config_err)?;
        self.scenario.validate(&self.microgrid).map_err(config_err)?;
        Ok(())
    }

    /// Applies command-line overrides; `epochs` may only shorten the scenario.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>, epochs: Option<usize>) -> Result<()> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out_dir = o;
        }
        if let Some(e) = epochs {
            if e == 0 || e > self.microgrid.num_epochs {
                return Err(Error::Config(format!("epochs must lie in 1..={}", self.microgrid.num_epochs)));
            }
            self.microgrid.num_epochs = e;
            let sc = &mut self.scenario;
            sc.reset_offsets.truncate(e);
            sc.bias.truncate(e);
            sc.amplitude.truncate(e);
            sc.omega.truncate(e);
        }
        self.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn alpha_above_one_rejected() {
        let mut c = RunConfig::default();
        c.synthesis.alpha = 1.5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn small_w5_rejected() {
        let mut c = RunConfig::default();
        c.synthesis.w5 = 100.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn matrix_spec_forms() {
        let s: MatrixSpec = toml::from_str::<toml::Table>("m = 2.0").unwrap()["m"].clone().try_into().unwrap();
        assert_eq!(s.to_matrix(2, "m").unwrap(), DMatrix::identity(2, 2) * 2.0);
        let r = MatrixSpec::Rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(r.to_matrix(2, "m").unwrap(), DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert!(r.to_matrix(3, "m").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn epochs_override_truncates_schedule() {
        let mut c = RunConfig::default();
        c.apply_overrides(Some(3), None, Some(2)).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.microgrid.num_epochs, 2);
        assert_eq!(c.scenario.bias.len(), 2);
        assert!(c.clone().apply_overrides(None, None, Some(9)).is_err());
    }
}
