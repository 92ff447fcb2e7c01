//! Trace rows, CSV persistence, metrics and per-step solution records.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Flag {
    HoldGain,
    Uncertified,
    Numerical,
}

impl Flag {
    pub const ALL: [Flag; 3] = [Flag::HoldGain, Flag::Uncertified, Flag::Numerical];

    pub fn label(self) -> &'static str {
        match self {
            Flag::HoldGain => "HOLD_GAIN",
            Flag::Uncertified => "UNCERTIFIED",
            Flag::Numerical => "NUMERICAL",
        }
    }
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Flag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Flag::ALL
            .into_iter()
            .find(|f| f.label() == s)
            .ok_or_else(|| Error::Domain(format!("unknown trace flag '{s}'")))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub x: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub u_r: Vec<f64>,
    pub u_hat_r: Vec<f64>,
    pub delta: Vec<f64>,
    pub delta_hat: Vec<f64>,
    pub funnel_sample_virtual: f64,
    pub funnel_sample_actual: f64,
    pub inv_r: f64,
    pub k: f64,
    pub ren_loss: f64,
    pub synth_ms: f64,
    pub train_ms: f64,
    pub flags: Vec<Flag>,
}

impl TraceRow {
    pub fn has(&self, f: Flag) -> bool {
        self.flags.contains(&f)
    }

    pub fn add(&mut self, f: Flag) {
        if !self.has(f) {
            self.flags.push(f);
            self.flags.sort();
        }
    }
}

/// Column names in schema order for `n` states and `m` inputs.
pub fn header(n: usize, m: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for (prefix, len) in [("x", n), ("xhat", n), ("u_r", m), ("uhat_r", m), ("delta", n), ("delta_hat", n)] {
        h.extend((0..len).map(|i| format!("{prefix}_{i}")));
    }
    for name in ["funnel_sample_virtual", "funnel_sample_actual", "inv_r", "k", "ren_loss", "synth_ms", "train_ms", "flags"] {
        h.push(name.to_string());
    }
    h
}

/// Recovers `(n, m)` from a header, rejecting anything off-schema.
pub fn dims_from_header(h: &[String]) -> Result<(usize, usize)> {
    let count = |p: &str| h.iter().filter(|c| c.strip_prefix(p).is_some_and(|r| r.parse::<usize>().is_ok())).count();
    let (n, m) = (count("x_"), count("u_r_"));
    if header(n, m) != h {
        return Err(Error::Domain("trace header does not match the schema".into()));
    }
    Ok((n, m))
}

fn fmt_f(v: f64) -> String {
    format!("{v:e}")
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let (n, m) = rows.first().map_or((0, 0), |r| (r.x.len(), r.u_r.len()));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header(n, m))?;
    for r in rows {
        let mut rec = vec![r.t.to_string()];
        for v in [&r.x, &r.x_hat, &r.u_r, &r.u_hat_r, &r.delta, &r.delta_hat] {
            rec.extend(v.iter().map(|&x| fmt_f(x)));
        }
        for v in [r.funnel_sample_virtual, r.funnel_sample_actual, r.inv_r, r.k, r.ren_loss, r.synth_ms, r.train_ms] {
            rec.push(fmt_f(v));
        }
        rec.push(r.flags.iter().map(|f| f.label()).collect::<Vec<_>>().join("|"));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    let h: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    let (n, m) = dims_from_header(&h)?;
    let mut rows = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        if rec.len() != h.len() {
            return Err(Error::Domain(format!("trace row {line} has {} fields, expected {}", rec.len(), h.len())));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|_| Error::Domain(format!("trace row {line}: bad number '{}'", &rec[i])))
        };
        let t = rec[0].parse::<usize>().map_err(|_| Error::Domain(format!("trace row {line}: bad step '{}'", &rec[0])))?;
        let mut col = 1;
        let mut take = |len: usize| -> Result<Vec<f64>> {
            let v = (col..col + len).map(num).collect::<Result<Vec<_>>>()?;
            col += len;
            Ok(v)
        };
        let (x, x_hat, u_r, u_hat_r, delta, delta_hat) = (take(n)?, take(n)?, take(m)?, take(m)?, take(n)?, take(n)?);
        let s = take(7)?;
        let flags = if rec[h.len() - 1].is_empty() {
            Vec::new()
        } else {
            rec[h.len() - 1].split('|').map(Flag::from_str).collect::<Result<Vec<_>>>()?
        };
        rows.push(TraceRow {
            t,
            x,
            x_hat,
            u_r,
            u_hat_r,
            delta,
            delta_hat,
            funnel_sample_virtual: s[0],
            funnel_sample_actual: s[1],
            inv_r: s[2],
            k: s[3],
            ren_loss: s[4],
            synth_ms: s[5],
            train_ms: s[6],
            flags,
        });
    }
    Ok(rows)
}

/// Run summary written next to the trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epochs: usize,
    pub steps: usize,
    pub mean_synth_ms: f64,
    pub max_synth_ms: f64,
    pub mean_train_ms: f64,
    pub max_train_ms: f64,
    pub final_voltage_band: f64,
    pub final_funnel_sample: f64,
    pub certified: bool,
}

/// Data needed to recompute a trace row's controls and funnel samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSolution {
    pub t: usize,
    /// Index into the nominal trajectory.
    pub tau: usize,
    pub x_bar: Vec<f64>,
    pub u_bar: Vec<f64>,
    pub p: Vec<Vec<f64>>,
    pub gain: Vec<Vec<f64>>,
    pub r: f64,
    pub k: f64,
    pub nu: f64,
    pub held: bool,
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: usize) -> TraceRow {
        TraceRow {
            t,
            x: vec![0.1, -2.5e-7],
            x_hat: vec![0.0, 1.0 / 3.0],
            u_r: vec![1e-300],
            u_hat_r: vec![-0.0],
            delta: vec![0.0, 0.02],
            delta_hat: vec![0.0, 0.019],
            funnel_sample_virtual: 1e-5,
            funnel_sample_actual: 2e-4,
            inv_r: 0.01,
            k: 0.1,
            ren_loss: 0.0,
            synth_ms: 0.0,
            train_ms: 0.0,
            flags: vec![],
        }
    }

    #[test]
    fn header_layout() {
        let h = header(2, 1);
        assert_eq!(h[0], "t");
        assert_eq!(&h[1..3], ["x_0", "x_1"]);
        assert_eq!(h[5], "u_r_0");
        assert_eq!(h.last().unwrap(), "flags");
        assert_eq!(h.len(), 1 + 2 * 4 + 2 + 8);
        assert_eq!(dims_from_header(&h).unwrap(), (2, 1));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let mut r1 = row(1);
        r1.add(Flag::Uncertified);
        r1.add(Flag::HoldGain);
        let rows = vec![row(0), r1];
        write_trace(&path, &rows).unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(back, rows);
        assert_eq!(back[1].flags, vec![Flag::HoldGain, Flag::Uncertified]);
    }

    #[test]
    fn unknown_flag_rejected() {
        assert!("WOBBLE".parse::<Flag>().is_err());
        assert_eq!("NUMERICAL".parse::<Flag>().unwrap(), Flag::Numerical);
    }
}
