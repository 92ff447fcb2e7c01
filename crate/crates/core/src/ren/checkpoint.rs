//! Flat key → matrix checkpoint files (TOML).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Activation, RenIqcSpec, RenParams};
use crate::error::{Error, Result};
use crate::linalg::{mat_from_rows, mat_to_rows};

/// Serialized REN parameters together with the certificate multipliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct Checkpoint {
    pub activation: Activation,
    pub n_x: usize,
    pub n_v: usize,
    pub n: usize,
    pub alpha_bar: f64,
    pub bx: Vec<f64>,
    pub bv: Vec<f64>,
    pub by: Vec<f64>,
    pub lambda_log: Vec<f64>,
    pub A: Vec<Vec<f64>>,
    pub B1: Vec<Vec<f64>>,
    pub B2: Vec<Vec<f64>>,
    pub C1: Vec<Vec<f64>>,
    pub C2: Vec<Vec<f64>>,
    pub D11: Vec<Vec<f64>>,
    pub D12: Vec<Vec<f64>>,
    pub D21: Vec<Vec<f64>>,
    pub D22: Vec<Vec<f64>>,
    pub Q: Vec<Vec<f64>>,
    pub S: Vec<Vec<f64>>,
    pub R: Vec<Vec<f64>>,
    pub L: Vec<Vec<f64>>,
}

fn mat(rows: &[Vec<f64>], r: usize, c: usize, name: &str) -> Result<DMatrix<f64>> {
    // Zero-sized matrices serialize as empty arrays.
    if r == 0 || c == 0 {
        return Ok(DMatrix::zeros(r, c));
    }
    let m = mat_from_rows(rows)?;
    if m.shape() != (r, c) {
        return Err(Error::Config(format!("checkpoint matrix {name} is {:?}, expected ({r}, {c})", m.shape())));
    }
    Ok(m)
}

fn vecd(v: &[f64], n: usize, name: &str) -> Result<DVector<f64>> {
    if v.len() != n {
        return Err(Error::Config(format!("checkpoint vector {name} has length {}, expected {n}", v.len())));
    }
    Ok(DVector::from_column_slice(v))
}

impl Checkpoint {
    pub fn from_model(p: &RenParams<f64>, s: &RenIqcSpec<f64>) -> Self {
        Self {
            activation: p.activation,
            n_x: p.n_x,
            n_v: p.n_v,
            n: p.n,
            alpha_bar: s.alpha_bar,
            bx: p.bx.iter().copied().collect(),
            bv: p.bv.iter().copied().collect(),
            by: p.by.iter().copied().collect(),
            lambda_log: s.lambda_log.iter().copied().collect(),
            A: mat_to_rows(&p.a),
            B1: mat_to_rows(&p.b1),
            B2: mat_to_rows(&p.b2),
            C1: mat_to_rows(&p.c1),
            C2: mat_to_rows(&p.c2),
            D11: mat_to_rows(&p.d11),
            D12: mat_to_rows(&p.d12),
            D21: mat_to_rows(&p.d21),
            D22: mat_to_rows(&p.d22),
            Q: mat_to_rows(&s.q),
            S: mat_to_rows(&s.s),
            R: mat_to_rows(&s.r),
            L: mat_to_rows(&s.l),
        }
    }

    pub fn to_model(&self) -> Result<(RenParams<f64>, RenIqcSpec<f64>)> {
        let (nx, nv, n) = (self.n_x, self.n_v, self.n);
        let p = RenParams {
            n_x: nx,
            n_v: nv,
            n,
            a: mat(&self.A, nx, nx, "A")?,
            b1: mat(&self.B1, nx, nv, "B1")?,
            b2: mat(&self.B2, nx, n, "B2")?,
            c1: mat(&self.C1, nv, nx, "C1")?,
            c2: mat(&self.C2, n, nx, "C2")?,
            d11: mat(&self.D11, nv, nv, "D11")?,
            d12: mat(&self.D12, nv, n, "D12")?,
            d21: mat(&self.D21, n, nv, "D21")?,
            d22: mat(&self.D22, n, n, "D22")?,
            bx: vecd(&self.bx, nx, "bx")?,
            bv: vecd(&self.bv, nv, "bv")?,
            by: vecd(&self.by, n, "by")?,
            activation: self.activation,
        };
        p.validate().map_err(|e| Error::Config(e.to_string()))?;
        let s = RenIqcSpec {
            q: mat(&self.Q, n, n, "Q")?,
            s: mat(&self.S, n, n, "S")?,
            r: mat(&self.R, n, n, "R")?,
            alpha_bar: self.alpha_bar,
            l: mat(&self.L, nx, nx, "L")?,
            lambda_log: vecd(&self.lambda_log, nv, "lambda_log")?,
        };
        s.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok((p, s))
    }
}

pub fn save_checkpoint(path: &Path, p: &RenParams<f64>, s: &RenIqcSpec<f64>) -> Result<()> {
    let text = toml::to_string(&Checkpoint::from_model(p, s))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(RenParams<f64>, RenIqcSpec<f64>)> {
    let text = std::fs::read_to_string(path)?;
    let ck: Checkpoint = toml::from_str(&text)?;
    ck.to_model()
}
