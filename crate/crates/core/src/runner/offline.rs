//! Whole-epoch funnel synthesis against the true disturbance bound.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::sim::solver_options;
use super::trace::write_json;
use crate::error::Result;
use crate::linalg::mat_to_rows;
use crate::microgrid::{build_plant, nominal_trajectory, NominalOptions};
use crate::synthesis::{solve_offline, verify_solution, FunnelSolution, OfflineSettings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfflineOutput {
    pub delta_inf: f64,
    pub objective: f64,
    pub solve_ms: f64,
    pub min_residual: f64,
    pub r: Vec<f64>,
    pub k: Vec<f64>,
    pub nu: Vec<f64>,
    pub p: Vec<Vec<Vec<f64>>>,
    pub gains: Vec<Vec<Vec<f64>>>,
}

/// Solves the offline program over the first epoch's nominal trajectory.
pub fn synth_offline(cfg: &RunConfig) -> Result<(OfflineOutput, FunnelSolution<f64>)> {
    cfg.validate()?;
    let plant = build_plant::<f64>(&cfg.microgrid)?;
    let (n, m) = (plant.n, plant.m);
    let sy = &cfg.synthesis;
    let delta_inf = cfg.scenario.delta_inf(&cfg.microgrid);
    let opts = NominalOptions {
        q: cfg.nominal.q.to_matrix(n, "nominal.q")?,
        r: cfg.nominal.r.to_matrix(m, "nominal.r")?,
        q_f: cfg.nominal.q_f.to_matrix(n, "nominal.q_f")?,
        terminal_equality: cfg.nominal.terminal_equality,
        margin: cfg.nominal.margin,
        delta_bound: delta_inf,
    };
    let x0 = cfg.scenario.start_state();
    let nom = nominal_trajectory(&plant, &x0, &nalgebra::DVector::zeros(n), cfg.microgrid.epoch_steps, &opts)?;
    let settings = OfflineSettings {
        w1: sy.w1,
        w2: sy.w2,
        w3: sy.w3,
        gamma2: sy.gamma2,
        alpha: sy.alpha,
        p_i: sy.p_i.to_matrix(n, "p_i")?,
        p_f: sy.p_f.to_matrix(n, "p_f")?,
        r0: sy.r0,
        rf: sy.rf,
        delta_inf,
        max_radius_passes: 4,
    };
    let sol = solve_offline(&plant, &nom, &settings, &solver_options(cfg))?;
    let min_residual = verify_solution(&plant, &nom, &sol)?;
    let out = OfflineOutput {
        delta_inf,
        objective: sol.objective,
        solve_ms: sol.solve_ms,
        min_residual,
        r: sol.r.clone(),
        k: sol.k.clone(),
        nu: sol.nu.clone(),
        p: sol.p.iter().map(mat_to_rows).collect(),
        gains: sol.gains.iter().map(mat_to_rows).collect(),
    };
    Ok((out, sol))
}

/// Writes `offline.json` and a per-step `offline.csv` of `(t, λ_min(P), r, k)`.
pub fn write_offline(dir: &Path, out: &OfflineOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("offline.json"), out)?;
    let mut w = csv::Writer::from_path(dir.join("offline.csv"))?;
    w.write_record(["t", "lambda_min_p", "r", "k"])?;
    for (t, p) in out.p.iter().enumerate() {
        let pm = crate::linalg::mat_from_rows(p)?;
        w.write_record([t.to_string(), format!("{:e}", crate::linalg::min_eig(&pm)), format!("{:e}", out.r[t]), format!("{:e}", out.k[t])])?;
    }
    w.flush()?;
    Ok(())
}
