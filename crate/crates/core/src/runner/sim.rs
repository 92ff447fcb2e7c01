//! The per-step recovery loop: online synthesis, REN update, twin rollout.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::config::{DeltaMode, RunConfig, TerminalMode};
use super::trace::{write_json, write_trace, Flag, Metrics, StepSolution, TraceRow};
use crate::conic::SolverOptions;
use crate::error::{Error, Result};
use crate::linalg::{inv_quad_form, mat_to_rows};
use crate::microgrid::{build_plant, nominal_trajectory, NominalOptions};
use crate::plant::{NominalTrajectory, PlantModel};
use crate::ren::{check_iqc, ren_step, save_checkpoint, train_step, RenIqcSpec, RenParams, RenState, TrainSequence};
use crate::synthesis::{dmi_problem, funnel_sample, r_bar, solve_dmi, solve_online, OnlineSettings, EPS_SDP};

/// Everything a run produces. `failure` is set when the trace was truncated.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub rows: Vec<TraceRow>,
    pub solutions: Vec<StepSolution>,
    pub metrics: Metrics,
    pub params: RenParams<f64>,
    pub spec: RenIqcSpec<f64>,
    pub failure: Option<String>,
}

impl RunOutput {
    pub fn flagged(&self) -> bool {
        self.rows.iter().any(|r| !r.flags.is_empty())
    }

    /// Writes `trace.csv`, `metrics.json`, `ren_checkpoint.toml` and, when
    /// enabled, `solutions.json` into `dir`.
    pub fn write(&self, dir: &Path, write_solutions: bool) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_trace(&dir.join("trace.csv"), &self.rows)?;
        write_json(&dir.join("metrics.json"), &self.metrics)?;
        save_checkpoint(&dir.join("ren_checkpoint.toml"), &self.params, &self.spec)?;
        if write_solutions {
            write_json(&dir.join("solutions.json"), &self.solutions)?;
        }
        Ok(())
    }
}

/// Gain, funnel matrix and radius applied at one step.
#[derive(Clone, Debug)]
struct Applied {
    gain: DMatrix<f64>,
    p: DMatrix<f64>,
    r: f64,
    k: f64,
    nu: f64,
    held: bool,
}

/// One recorded REN transition for the replay window.
#[derive(Clone, Debug)]
struct Transition {
    ren_state: DVector<f64>,
    input: DVector<f64>,
    nominal_next: DVector<f64>,
    target: DVector<f64>,
}

/// Disturbance-free nominal over one epoch from `start`.
pub fn epoch_nominal(cfg: &RunConfig, plant: &PlantModel<f64>, start: &DVector<f64>) -> Result<NominalTrajectory<f64>> {
    let (n, m) = (plant.n, plant.m);
    let opts = NominalOptions {
        q: cfg.nominal.q.to_matrix(n, "nominal.q")?,
        r: cfg.nominal.r.to_matrix(m, "nominal.r")?,
        q_f: cfg.nominal.q_f.to_matrix(n, "nominal.q_f")?,
        terminal_equality: cfg.nominal.terminal_equality,
        margin: cfg.nominal.margin,
        delta_bound: cfg.synthesis.delta_prior,
    };
    nominal_trajectory(plant, start, &DVector::zeros(n), cfg.microgrid.epoch_steps, &opts)
}

pub fn solver_options(cfg: &RunConfig) -> SolverOptions<f64> {
    SolverOptions { tol: cfg.synthesis.tol, max_iter: cfg.synthesis.max_iter, seed: cfg.seed, ..SolverOptions::default() }
}

/// Smallest scaling `c ≥ 1` with `ηᵀ(c P_i)⁻¹η ≤ 1`, so the boundary
/// constraint `P_t1 ⪰ r P_i` keeps the current error inside the funnel.
fn inflate_initial(p_i: &DMatrix<f64>, eta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let c = (inv_quad_form(p_i, eta)? * (1.0 + 1e-6)).max(1.0);
    Ok(p_i * c)
}

/// Online program settings for the current radius bound `rb` and virtual
/// tracking error `eta_hat`.
pub fn online_settings(
    cfg: &RunConfig,
    p_i: &DMatrix<f64>,
    p_f: &DMatrix<f64>,
    rb: f64,
    eta_hat: &DVector<f64>,
) -> Result<OnlineSettings<f64>> {
    let sy = &cfg.synthesis;
    Ok(OnlineSettings {
        w1: sy.w1,
        w2: sy.w2,
        w3: sy.w3,
        w4: sy.w4,
        w5: sy.w5,
        gamma2: sy.gamma2,
        alpha: sy.alpha,
        p_i: inflate_initial(p_i, eta_hat)?,
        p_f: match sy.p_f_mode {
            TerminalMode::Fixed => p_f.clone(),
            TerminalMode::DisturbanceFloor => p_f * (sy.gamma2 / rb),
        },
        r_bar: rb,
    })
}

/// Runs the full scenario described by `cfg`.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mg = &cfg.microgrid;
    let sc = &cfg.scenario;
    let sy = &cfg.synthesis;
    let plant = build_plant::<f64>(mg)?;
    let (n, m) = (plant.n, plant.m);
    let steps = mg.horizon();
    let epoch_steps = mg.epoch_steps;
    let opts = solver_options(cfg);
    let p_i_base = sy.p_i.to_matrix(n, "p_i")?;
    let p_f = sy.p_f.to_matrix(n, "p_f")?;

    let rc = &cfg.ren;
    let mut params = RenParams::random_init(rc.n_x, rc.n_v, n, rc.activation, rc.init_scale, cfg.seed);
    let mut spec = RenIqcSpec::l2_gain(rc.n_x, rc.n_v, n, rc.gamma, rc.alpha_bar)?;

    let mut nominal = epoch_nominal(cfg, &plant, &sc.start_state())?;
    let mut x = sc.start_state();
    let mut x_hat = x.clone();
    let mut ren = RenState::zeros(&params);
    let (mut next_ren, mut delta_hat) = ren_step(&params, &ren, &x_hat)?;

    let mut rows: Vec<TraceRow> = Vec::with_capacity(steps);
    let mut solutions: Vec<StepSolution> = Vec::with_capacity(steps);
    let mut replay: Vec<Transition> = Vec::with_capacity(steps);
    let mut prev: Option<Applied> = None;
    let mut prev_next: Option<(DMatrix<f64>, f64)> = None;
    let mut epoch_max = 0.0f64;
    let mut synth_times = Vec::with_capacity(steps);
    let mut train_times = Vec::with_capacity(steps);
    let mut failure = None;

    for t in 0..steps {
        let epoch = t / epoch_steps;
        let tau = t % epoch_steps;
        if tau == 0 {
            epoch_max = 0.0;
            if epoch > 0 && !sc.nominal_freeze {
                nominal = epoch_nominal(cfg, &plant, &sc.reset_state(epoch))?;
            }
        }
        let x_bar = nominal.states[tau].clone();
        let u_bar = nominal.inputs[tau].clone();
        let mut row = TraceRow { t, ..TraceRow::default() };

        // (1) online synthesis over [τ, τ + window].
        let dh_norm = delta_hat.norm();
        epoch_max = epoch_max.max(dh_norm);
        let delta_est = if t == 0 {
            sy.delta_prior
        } else {
            let raw = match sy.delta_mode {
                DeltaMode::RunningMax => epoch_max,
                DeltaMode::Pointwise => dh_norm,
            };
            (sy.delta_inflation * raw).max(sy.delta_floor)
        };
        let eta_hat = &x_hat - &x_bar;
        let rb = r_bar(sy.gamma2, delta_est);
        let settings = online_settings(cfg, &p_i_base, &p_f, rb, &eta_hat)?;
        let t2 = (tau + sy.window).min(epoch_steps);
        let clock = Instant::now();
        let solved = solve_online(&plant, &nominal, tau, t2, &settings, &opts);
        let applied = match solved {
            Ok(sol) => {
                let mut gain = sol.gains[0].clone();
                if sy.resolve_twice {
                    let pr = dmi_problem(&plant, &nominal, tau, sy.alpha, sy.gamma2);
                    gain = solve_dmi(&pr, EPS_SDP, &opts)?.k;
                }
                prev_next = Some((sol.p[1].clone(), sol.r[1]));
                Applied { gain, p: sol.p[0].clone(), r: sol.r[0], k: sol.k[0], nu: sol.nu[0], held: false }
            }
            Err(Error::Infeasible(_) | Error::Numerical(_)) => {
                row.add(Flag::HoldGain);
                let held = match (&prev, &prev_next) {
                    (Some(a), Some((p, r))) => {
                        let k = crate::synthesis::contraction_k(p, sy.gamma2);
                        Applied { gain: a.gain.clone(), p: p.clone(), r: *r, k, nu: a.nu, held: true }
                    }
                    _ => Applied {
                        gain: DMatrix::zeros(m, n),
                        p: DMatrix::identity(n, n),
                        r: 0.0,
                        k: crate::synthesis::contraction_k(&DMatrix::identity(n, n), sy.gamma2),
                        nu: 0.0,
                        held: true,
                    },
                };
                prev_next = None;
                held
            }
            Err(e) => return Err(e),
        };
        let synth_ms = clock.elapsed().as_secs_f64() * 1e3;

        // (2) one REN step on the replay window.
        let clock = Instant::now();
        let mut ren_loss = 0.0;
        if !replay.is_empty() {
            let from = replay.len().saturating_sub(rc.replay_window);
            let win = &replay[from..];
            let seq = TrainSequence {
                init_state: win[0].ren_state.clone(),
                inputs: win.iter().map(|s| s.input.clone()).collect(),
                nominal_next: win.iter().map(|s| s.nominal_next.clone()).collect(),
                targets: win.iter().map(|s| s.target.clone()).collect(),
            };
            match train_step(&mut params, &mut spec, &[seq], rc.lr, rc.lambda_pen) {
                Ok(out) => {
                    ren_loss = out.loss;
                    if !out.certified {
                        row.add(Flag::Uncertified);
                    }
                }
                Err(Error::Numerical(msg)) => {
                    failure = Some(format!("REN training at t={t}: {msg}"));
                }
                Err(e) => return Err(e),
            }
        }
        let train_ms = clock.elapsed().as_secs_f64() * 1e3;
        synth_times.push(synth_ms);
        train_times.push(train_ms);

        // (3) shared gain on both systems.
        let u = &u_bar + &applied.gain * (&x - &x_bar);
        let u_hat = &u_bar + &applied.gain * &eta_hat;
        let delta = sc.inject_disturbance(mg, t);

        row.x = x.iter().copied().collect();
        row.x_hat = x_hat.iter().copied().collect();
        row.u_r = u.iter().copied().collect();
        row.u_hat_r = u_hat.iter().copied().collect();
        row.delta = delta.iter().copied().collect();
        row.delta_hat = delta_hat.iter().copied().collect();
        row.inv_r = if applied.r > 0.0 { 1.0 / applied.r } else { f64::INFINITY };
        row.k = applied.k;
        row.ren_loss = ren_loss;
        if cfg.output.record_wall_time {
            row.synth_ms = synth_ms;
            row.train_ms = train_ms;
        }
        let samples = funnel_sample(&eta_hat, &applied.p).and_then(|v| Ok((v, funnel_sample(&(&x - &x_bar), &applied.p)?)));
        match samples {
            Ok((sv, sa)) => {
                row.funnel_sample_virtual = sv;
                row.funnel_sample_actual = sa;
            }
            Err(e) => failure = Some(format!("funnel sample at t={t}: {e}")),
        }
        solutions.push(StepSolution {
            t,
            tau,
            x_bar: x_bar.iter().copied().collect(),
            u_bar: u_bar.iter().copied().collect(),
            p: mat_to_rows(&applied.p),
            gain: mat_to_rows(&applied.gain),
            r: applied.r,
            k: applied.k,
            nu: applied.nu,
            held: applied.held,
        });
        if failure.is_some() {
            row.add(Flag::Numerical);
            rows.push(row);
            break;
        }
        rows.push(row);

        // (4) advance both systems and the REN.
        let stepped = plant
            .actual_step(t, &x, &u, &delta)
            .and_then(|xn| Ok((xn, plant.virtual_step(tau, &nominal.lin[tau], &x_hat, &u_hat, &delta_hat)?)));
        let (x_next, x_hat_next) = match stepped {
            Ok(v) => v,
            Err(Error::Numerical(msg)) => {
                failure = Some(msg);
                rows.last_mut().expect("row pushed").add(Flag::Numerical);
                break;
            }
            Err(e) => return Err(e),
        };
        replay.push(Transition {
            ren_state: ren.x.clone(),
            input: x_hat.clone(),
            nominal_next: &x_hat_next - &delta_hat,
            target: x_next.clone(),
        });
        x = x_next;
        x_hat = x_hat_next;
        if t + 1 < steps && (t + 1) % epoch_steps == 0 {
            x = sc.reset_state((t + 1) / epoch_steps);
            x_hat = x.clone();
        }
        ren = next_ren;
        match ren_step(&params, &ren, &x_hat) {
            Ok((s, d)) => {
                next_ren = s;
                delta_hat = d;
            }
            Err(Error::Numerical(msg)) => {
                failure = Some(msg);
                rows.last_mut().expect("row pushed").add(Flag::Numerical);
                break;
            }
            Err(e) => return Err(e),
        }
        prev = Some(applied);
    }

    let certified = check_iqc(&params, &spec)?.certified;
    if !certified {
        if let Some(last) = rows.last_mut() {
            last.add(Flag::Uncertified);
        }
    }
    let metrics = summarize(&rows, &solutions, &synth_times, &train_times, epoch_steps, certified);
    Ok(RunOutput { rows, solutions, metrics, params, spec, failure })
}

fn mean_max(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    (v.iter().sum::<f64>() / v.len() as f64, v.iter().copied().fold(0.0, f64::max))
}

fn summarize(rows: &[TraceRow], sols: &[StepSolution], synth: &[f64], train: &[f64], epoch_steps: usize, certified: bool) -> Metrics {
    let (mean_synth_ms, max_synth_ms) = mean_max(synth);
    let (mean_train_ms, max_train_ms) = mean_max(train);
    let (final_voltage_band, final_funnel_sample) = match (rows.last(), sols.last()) {
        (Some(r), Some(s)) => {
            let band = (0..r.x.len()).step_by(2).map(|i| (r.x[i] - s.x_bar[i]).abs()).fold(0.0, f64::max);
            (band, r.funnel_sample_virtual)
        }
        _ => (0.0, 0.0),
    };
    Metrics {
        epochs: rows.len().div_ceil(epoch_steps),
        steps: rows.len(),
        mean_synth_ms,
        max_synth_ms,
        mean_train_ms,
        max_train_ms,
        final_voltage_band,
        final_funnel_sample,
        certified,
    }
}

/// Per-epoch ratio of the final voltage deviation to the largest one seen in
/// that epoch (voltages are the even state components, goal at the origin).
pub fn voltage_ratios(rows: &[TraceRow], epoch_steps: usize) -> Vec<f64> {
    rows.chunks(epoch_steps)
        .map(|ep| {
            let dev = |r: &TraceRow| r.x.iter().step_by(2).map(|v| v.abs()).fold(0.0, f64::max);
            let peak = ep.iter().map(dev).fold(0.0, f64::max);
            let last = ep.last().map_or(0.0, dev);
            if peak > 0.0 {
                last / peak
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.apply_overrides(None, None, Some(1)).unwrap();
        c
    }

    #[test]
    fn inflation_puts_error_on_or_inside_unit_level() {
        let p = DMatrix::identity(2, 2) * 0.01;
        let eta = DVector::from_vec(vec![0.3, -0.4]);
        let pi = inflate_initial(&p, &eta).unwrap();
        assert!(inv_quad_form(&pi, &eta).unwrap() <= 1.0);
        let small = DVector::from_vec(vec![0.01, 0.0]);
        assert_eq!(inflate_initial(&p, &small).unwrap(), p);
    }

    #[test]
    fn one_epoch_runs_clean() {
        let out = run(&short_config()).unwrap();
        assert!(out.failure.is_none());
        assert_eq!(out.rows.len(), 20);
        for r in &out.rows {
            assert!(r.flags.is_empty(), "t={} flags {:?}", r.t, r.flags);
            assert!(r.funnel_sample_virtual <= r.inv_r + 1e-9);
            assert!(r.k < 1.0);
        }
    }

    #[test]
    fn controls_share_gain_and_feedforward() {
        let out = run(&short_config()).unwrap();
        for (r, s) in out.rows.iter().zip(&out.solutions) {
            let k = crate::linalg::mat_from_rows(&s.gain).unwrap();
            let xb = DVector::from_column_slice(&s.x_bar);
            let ub = DVector::from_column_slice(&s.u_bar);
            let u = &ub + &k * (DVector::from_column_slice(&r.x) - &xb);
            let uh = &ub + &k * (DVector::from_column_slice(&r.x_hat) - &xb);
            assert!((u - DVector::from_column_slice(&r.u_r)).amax() < 1e-12);
            assert!((uh - DVector::from_column_slice(&r.u_hat_r)).amax() < 1e-12);
        }
    }

    #[test]
    fn voltage_ratio_of_decaying_epoch() {
        let rows: Vec<TraceRow> = (0..4)
            .map(|t| TraceRow { t, x: vec![0.1 / (t + 1) as f64, 5.0], ..TraceRow::default() })
            .collect();
        let r = voltage_ratios(&rows, 4);
        assert!((r[0] - 0.25).abs() < 1e-15);
    }
}
