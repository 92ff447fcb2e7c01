//! Invariant checks on a recorded trace.

use std::path::Path;

use nalgebra::DVector;

use super::trace::{read_json, read_trace, Flag, StepSolution, TraceRow};
use crate::error::Result;
use crate::linalg::{inv_quad_form, mat_from_rows};

/// Outcome of each suite; `failures` lists human-readable violations.
#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub rows: usize,
    pub suites: Vec<(String, usize)>,
    pub failures: Vec<String>,
    pub flagged_rows: usize,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.flagged_rows == 0
    }

    fn suite(&mut self, name: &str, fails: Vec<String>) {
        self.suites.push((name.to_string(), fails.len()));
        self.failures.extend(fails.into_iter().map(|f| format!("{name}: {f}")));
    }
}

/// Reads a trace and, if present, the sibling `solutions.json`, then runs
/// every invariant suite.
pub fn verify_trace(path: &Path) -> Result<VerifyReport> {
    let rows = read_trace(path)?;
    let sol_path = path.with_file_name("solutions.json");
    let sols: Option<Vec<StepSolution>> = if sol_path.exists() { Some(read_json(&sol_path)?) } else { None };
    Ok(verify_rows(&rows, sols.as_deref()))
}

pub fn verify_rows(rows: &[TraceRow], sols: Option<&[StepSolution]>) -> VerifyReport {
    let mut rep = VerifyReport { rows: rows.len(), ..VerifyReport::default() };
    rep.flagged_rows = rows.iter().filter(|r| !r.flags.is_empty()).count();

    let mut f = Vec::new();
    if rows.is_empty() {
        f.push("empty trace".to_string());
    }
    for w in rows.windows(2) {
        if w[1].t <= w[0].t {
            f.push(format!("t not increasing at {}", w[1].t));
        }
    }
    rep.suite("monotone-t", f);

    let mut f = Vec::new();
    for r in rows {
        let vecs = [&r.x, &r.x_hat, &r.u_r, &r.u_hat_r, &r.delta, &r.delta_hat];
        let scalars = [r.funnel_sample_virtual, r.funnel_sample_actual, r.k, r.ren_loss, r.synth_ms, r.train_ms];
        let finite = vecs.iter().all(|v| v.iter().all(|x| x.is_finite())) && scalars.iter().all(|x| x.is_finite());
        let inv_ok = r.inv_r.is_finite() || (r.inv_r == f64::INFINITY && r.has(Flag::HoldGain));
        if !finite || !inv_ok {
            f.push(format!("non-finite value at t={}", r.t));
        }
    }
    rep.suite("finite", f);

    let mut f = Vec::new();
    for r in rows {
        if !(r.k < 1.0) {
            f.push(format!("k = {} at t={}", r.k, r.t));
        }
        if !(r.inv_r >= 0.0) {
            f.push(format!("1/r = {} at t={}", r.inv_r, r.t));
        }
        if !r.has(Flag::HoldGain) && !(r.funnel_sample_virtual <= r.inv_r + 1e-9) {
            f.push(format!("virtual sample {} above 1/r {} at t={}", r.funnel_sample_virtual, r.inv_r, r.t));
        }
    }
    rep.suite("funnel-containment", f);

    if let Some(sols) = sols {
        let mut f = Vec::new();
        if sols.len() != rows.len() {
            f.push(format!("{} solutions for {} rows", sols.len(), rows.len()));
        }
        for (r, s) in rows.iter().zip(sols) {
            if let Err(e) = check_against_solution(r, s) {
                f.push(e);
            }
        }
        rep.suite("gain-sharing", f);
    }
    rep
}

fn close(a: &DVector<f64>, b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

fn check_against_solution(r: &TraceRow, s: &StepSolution) -> std::result::Result<(), String> {
    let at = |what: &str| format!("{what} mismatch at t={}", r.t);
    if r.t != s.t {
        return Err(at("step index"));
    }
    let k = mat_from_rows(&s.gain).map_err(|e| e.to_string())?;
    let p = mat_from_rows(&s.p).map_err(|e| e.to_string())?;
    let xb = DVector::from_column_slice(&s.x_bar);
    let ub = DVector::from_column_slice(&s.u_bar);
    let x = DVector::from_column_slice(&r.x);
    let xh = DVector::from_column_slice(&r.x_hat);
    if k.shape() != (ub.len(), xb.len()) || x.len() != xb.len() {
        return Err(at("dimension"));
    }
    if !close(&(&ub + &k * (&x - &xb)), &r.u_r, 1e-9) {
        return Err(at("u_r"));
    }
    if !close(&(&ub + &k * (&xh - &xb)), &r.u_hat_r, 1e-9) {
        return Err(at("uhat_r"));
    }
    let sv = inv_quad_form(&p, &(&xh - &xb)).map_err(|e| e.to_string())?;
    let sa = inv_quad_form(&p, &(&x - &xb)).map_err(|e| e.to_string())?;
    let tol = |v: f64| 1e-8 * (1.0 + v.abs());
    if (sv - r.funnel_sample_virtual).abs() > tol(sv) || (sa - r.funnel_sample_actual).abs() > tol(sa) {
        return Err(at("funnel sample"));
    }
    if s.r > 0.0 && (1.0 / s.r - r.inv_r).abs() > tol(r.inv_r) {
        return Err(at("1/r"));
    }
    Ok(())
}
