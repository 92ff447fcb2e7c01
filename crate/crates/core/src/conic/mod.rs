//! Semidefinite-program container, solver adapter and independent verification.

mod dump;
pub mod expr;
mod ipm;

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use expr::{ExprMatrix, LinExpr, SymBlockBuilder};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, min_eig};
use crate::scalar::Real;
use ipm::{BlockData, IpmOutcome, IpmSettings, LmiData, VarBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::NumericalFailure => "numerical-failure",
        })
    }
}

#[derive(Clone, Debug)]
pub struct SolverOptions<T> {
    pub tol: T,
    pub max_iter: usize,
    pub seed: u64,
    /// Minimum eigenvalue accepted by re-verification.
    pub psd_tol: T,
    /// Minimum linear slack accepted by re-verification.
    pub lin_tol: T,
}

impl<T: Real> Default for SolverOptions<T> {
    fn default() -> Self {
        Self { tol: T::lit(1e-8), max_iter: 100, seed: 0, psd_tol: T::lit(1e-6), lin_tol: T::lit(1e-8) }
    }
}

/// Symmetric `n×n` matrix of decision variables (upper triangle stored).
#[derive(Clone, Debug)]
pub struct SymVar {
    pub n: usize,
    ids: Vec<usize>,
}

impl SymVar {
    pub fn id(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.ids[i * self.n - i * (i + 1) / 2 + j]
    }

    pub fn expr<T: Real>(&self) -> ExprMatrix<T> {
        ExprMatrix::from_fn(self.n, self.n, |i, j| LinExpr::var(self.id(i, j)))
    }

    pub fn value<T: Real>(&self, x: &[T]) -> DMatrix<T> {
        DMatrix::from_fn(self.n, self.n, |i, j| x[self.id(i, j)])
    }
}

/// General `r×c` matrix of decision variables.
#[derive(Clone, Debug)]
pub struct MatVar {
    pub rows: usize,
    pub cols: usize,
    first: usize,
}

impl MatVar {
    pub fn id(&self, i: usize, j: usize) -> usize {
        self.first + i * self.cols + j
    }

    pub fn expr<T: Real>(&self) -> ExprMatrix<T> {
        ExprMatrix::from_fn(self.rows, self.cols, |i, j| LinExpr::var(self.id(i, j)))
    }

    pub fn value<T: Real>(&self, x: &[T]) -> DMatrix<T> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| x[self.id(i, j)])
    }
}

#[derive(Clone, Debug)]
pub struct PsdConstraint<T> {
    pub label: String,
    pub matrix: ExprMatrix<T>,
}

/// `expr ≥ 0`.
#[derive(Clone, Debug)]
pub struct LinearConstraint<T> {
    pub label: String,
    pub expr: LinExpr<T>,
}

#[derive(Clone, Debug)]
pub struct SdpProgram<T> {
    names: Vec<String>,
    objective: Vec<T>,
    pub psd: Vec<PsdConstraint<T>>,
    pub linear: Vec<LinearConstraint<T>>,
    pub options: SolverOptions<T>,
}

#[derive(Clone, Debug)]
pub struct SdpSolution<T> {
    pub status: SolveStatus,
    pub x: Vec<T>,
    pub objective: T,
    /// Largest constraint violation at `x` (zero when all constraints hold).
    pub max_residual: T,
    pub min_psd_eig: T,
    pub min_linear_slack: T,
    pub iterations: usize,
    pub wall_ms: f64,
    pub diagnostics: String,
}

impl<T: Real> Default for SdpProgram<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> SdpProgram<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            objective: Vec::new(),
            psd: Vec::new(),
            linear: Vec::new(),
            options: SolverOptions::default(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.names.len()
    }

    pub fn var_name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn new_var(&mut self, name: impl Into<String>) -> usize {
        self.names.push(name.into());
        self.objective.push(T::zero());
        self.names.len() - 1
    }

    pub fn new_sym(&mut self, name: &str, n: usize) -> SymVar {
        let mut ids = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                ids.push(self.new_var(format!("{name}[{i},{j}]")));
            }
        }
        SymVar { n, ids }
    }

    pub fn new_mat(&mut self, name: &str, rows: usize, cols: usize) -> MatVar {
        let first = self.num_vars();
        for i in 0..rows {
            for j in 0..cols {
                self.new_var(format!("{name}[{i},{j}]"));
            }
        }
        MatVar { rows, cols, first }
    }

    pub fn add_objective(&mut self, var: usize, coef: T) {
        self.objective[var] += coef;
    }

    pub fn objective(&self) -> &[T] {
        &self.objective
    }

    pub fn add_psd(&mut self, label: impl Into<String>, matrix: ExprMatrix<T>) {
        assert_eq!(matrix.nrows(), matrix.ncols(), "PSD constraint must be square");
        self.psd.push(PsdConstraint { label: label.into(), matrix });
    }

    pub fn add_linear_ge(&mut self, label: impl Into<String>, expr: LinExpr<T>) {
        self.linear.push(LinearConstraint { label: label.into(), expr });
    }

    /// Largest asymmetry of any constraint map over `probes` random points.
    pub fn max_asymmetry(&self, probes: usize) -> T {
        let mut rng = ChaCha8Rng::seed_from_u64(self.options.seed);
        let mut worst = T::zero();
        for _ in 0..probes {
            let x: Vec<T> = (0..self.num_vars()).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
            for c in &self.psd {
                worst = worst.max(asymmetry(&c.matrix.eval(&x)));
            }
        }
        worst
    }

    /// Checks that every constraint is symmetric and every variable index is in range.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        for c in &self.psd {
            for (_, _, e) in c.matrix.entries() {
                if e.terms.iter().any(|&(v, _)| v >= n) {
                    return Err(Error::contract(format!("constraint '{}' references unknown variable", c.label)));
                }
            }
        }
        for c in &self.linear {
            if c.expr.terms.iter().any(|&(v, _)| v >= n) {
                return Err(Error::contract(format!("constraint '{}' references unknown variable", c.label)));
            }
        }
        let asym = self.max_asymmetry(3);
        if asym > T::lit(1e-12) {
            return Err(Error::contract(format!("constraint map not symmetric (asymmetry {asym})")));
        }
        Ok(())
    }

    fn lmi_data(&self) -> LmiData<T> {
        let mut blocks = Vec::with_capacity(self.psd.len() + self.linear.len());
        let half = T::lit(0.5);
        for c in &self.psd {
            let dim = c.matrix.nrows();
            let mut f0 = DMatrix::zeros(dim, dim);
            let mut per_var: BTreeMap<usize, Vec<(usize, usize, T)>> = BTreeMap::new();
            for i in 0..dim {
                for j in i..dim {
                    let mut e = if i == j {
                        c.matrix.get(i, i).clone()
                    } else {
                        c.matrix.get(i, j).plus(c.matrix.get(j, i)).scaled(half)
                    };
                    e.compact();
                    f0[(i, j)] = e.constant;
                    f0[(j, i)] = e.constant;
                    for &(v, coef) in &e.terms {
                        let entry = per_var.entry(v).or_default();
                        entry.push((i, j, coef));
                        if i != j {
                            entry.push((j, i, coef));
                        }
                    }
                }
            }
            let vars = per_var.into_iter().map(|(v, e)| VarBlock::new(v, e)).collect();
            blocks.push(BlockData { dim, f0, vars });
        }
        for c in &self.linear {
            let mut e = c.expr.clone();
            e.compact();
            let vars = e.terms.iter().map(|&(v, coef)| VarBlock::new(v, vec![(0, 0, coef)])).collect();
            blocks.push(BlockData { dim: 1, f0: DMatrix::from_element(1, 1, e.constant), vars });
        }
        LmiData { nvars: self.num_vars(), c: self.objective.clone(), blocks }
    }

    /// Minimum eigenvalue of each PSD constraint and slack of each linear one at `x`.
    pub fn residuals(&self, x: &[T]) -> (Vec<T>, Vec<T>) {
        let psd = self.psd.iter().map(|c| min_eig(&c.matrix.eval(x))).collect();
        let lin = self.linear.iter().map(|c| c.expr.eval(x)).collect();
        (psd, lin)
    }

    pub fn objective_value(&self, x: &[T]) -> T {
        self.objective.iter().zip(x).fold(T::zero(), |acc, (&c, &v)| acc + c * v)
    }

    /// Solves the program and re-verifies the returned point with dense
    /// eigenvalue computations.
    pub fn solve(&self) -> Result<SdpSolution<T>> {
        self.validate()?;
        let start = Instant::now();
        let data = self.lmi_data();
        let settings = IpmSettings {
            tol: self.options.tol,
            near_tol: self.options.tol.sqrt() * T::lit(10.0),
            max_iter: self.options.max_iter,
            step_fraction: T::lit(0.98),
        };
        let res = ipm::solve(&data, &settings);
        let x = res.y.clone();
        let (psd, lin) = self.residuals(&x);
        let min_psd = psd.iter().fold(T::lit(f64::INFINITY), |a, &v| a.min(v));
        let min_lin = lin.iter().fold(T::lit(f64::INFINITY), |a, &v| a.min(v));
        let max_residual = T::zero().max(-min_psd).max(-min_lin);
        let mut diagnostics = format!(
            "ipm {:?} after {} iterations (pinf {:.2e}, dinf {:.2e}, gap {:.2e})",
            res.outcome,
            res.iterations,
            res.pinf.as_f64(),
            res.dinf.as_f64(),
            res.gap.as_f64()
        );

        let converged = matches!(res.outcome, IpmOutcome::Converged | IpmOutcome::NearOptimal);
        let verified = min_psd >= -self.options.psd_tol && min_lin >= -self.options.lin_tol;
        let status = if converged && verified {
            SolveStatus::Optimal
        } else if converged {
            diagnostics.push_str("; backend claimed optimal but re-verification failed");
            SolveStatus::NumericalFailure
        } else {
            let (infeasible, t_star) = self.phase_one(&data, &settings);
            diagnostics.push_str(&format!("; phase-I margin {:.3e}", t_star.as_f64()));
            if infeasible {
                SolveStatus::Infeasible
            } else {
                SolveStatus::NumericalFailure
            }
        };
        Ok(SdpSolution {
            status,
            objective: self.objective_value(&x),
            x,
            max_residual,
            min_psd_eig: min_psd,
            min_linear_slack: min_lin,
            iterations: res.iterations,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            diagnostics,
        })
    }

    /// Minimizes the uniform shift `t` with `F(y) + tI ⪰ 0`; a strictly positive
    /// optimum certifies infeasibility.
    fn phase_one(&self, data: &LmiData<T>, settings: &IpmSettings<T>) -> (bool, T) {
        let t_var = data.nvars;
        let mut blocks = data.blocks.clone();
        for b in &mut blocks {
            b.vars.push(VarBlock::new(t_var, (0..b.dim).map(|i| (i, i, T::one())).collect()));
        }
        blocks.push(BlockData {
            dim: 1,
            f0: DMatrix::from_element(1, 1, T::one()),
            vars: vec![VarBlock::new(t_var, vec![(0, 0, T::one())])],
        });
        let mut c = vec![T::zero(); data.nvars + 1];
        c[t_var] = T::one();
        let aux = LmiData { nvars: data.nvars + 1, c, blocks };
        let res = ipm::solve(&aux, settings);
        let t_star = res.y[t_var];
        let solved = matches!(res.outcome, IpmOutcome::Converged | IpmOutcome::NearOptimal);
        (solved && t_star > self.options.psd_tol, t_star)
    }

    /// Writes the program in a plain text format for offline inspection.
    pub fn dump(&self) -> String {
        dump::write(&self.names, &self.lmi_data(), &self.psd, &self.linear)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_x_with_unit_block() {
        let mut p = SdpProgram::<f64>::new();
        let x = p.new_var("x");
        p.add_objective(x, 1.0);
        let mut m = ExprMatrix::zeros(2, 2);
        *m.get_mut(0, 0) = LinExpr::var(x);
        *m.get_mut(1, 1) = LinExpr::constant(1.0);
        p.add_psd("block", m);
        let sol = p.solve().unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.x[x].abs() < 1e-6);
    }

    #[test]
    fn min_trace_above_identity() {
        let mut p = SdpProgram::<f64>::new();
        let pv = p.new_sym("P", 2);
        p.add_objective(pv.id(0, 0), 1.0);
        p.add_objective(pv.id(1, 1), 1.0);
        p.add_psd("P>=I", pv.expr().minus(&ExprMatrix::identity(2)));
        let sol = p.solve().unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.objective - 2.0).abs() < 1e-6);
        let pm = pv.value(&sol.x);
        assert!((pm - DMatrix::<f64>::identity(2, 2)).abs().max() < 1e-6);
    }

    #[test]
    fn detects_infeasibility() {
        let mut p = SdpProgram::<f64>::new();
        let x = p.new_var("x");
        p.add_linear_ge("x>=1", LinExpr { constant: -1.0, terms: vec![(x, 1.0)] });
        p.add_linear_ge("x<=0", LinExpr { constant: 0.0, terms: vec![(x, -1.0)] });
        let sol = p.solve().unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn rejects_asymmetric_map() {
        let mut p = SdpProgram::<f64>::new();
        let x = p.new_var("x");
        let mut m = ExprMatrix::identity(2);
        *m.get_mut(0, 1) = LinExpr::var(x);
        p.add_psd("bad", m);
        assert!(matches!(p.solve(), Err(Error::Contract(_))));
    }

    #[test]
    fn solve_is_deterministic() {
        let mut p = SdpProgram::<f64>::new();
        let pv = p.new_sym("P", 3);
        for i in 0..3 {
            p.add_objective(pv.id(i, i), 1.0 + i as f64);
        }
        let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.0, 0.4, 0.2, 0.1, 0.0, 0.3]);
        let lyap = pv.expr().minus(&pv.expr().lmul(&a).rmul(&a.transpose())).minus(&ExprMatrix::identity(3));
        p.add_psd("lyap", lyap);
        let s1 = p.solve().unwrap();
        let s2 = p.solve().unwrap();
        assert_eq!(s1.status, SolveStatus::Optimal);
        assert_eq!(s1.objective.to_bits(), s2.objective.to_bits());
    }

    #[test]
    fn f32_solve() {
        let mut p = SdpProgram::<f32>::new();
        p.options.tol = 1e-5;
        p.options.psd_tol = 1e-4;
        p.options.lin_tol = 1e-5;
        let x = p.new_var("x");
        p.add_objective(x, 1.0);
        p.add_linear_ge("x>=3", LinExpr { constant: -3.0, terms: vec![(x, 1.0)] });
        let sol = p.solve().unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.x[x] - 3.0).abs() < 1e-3);
    }
}
