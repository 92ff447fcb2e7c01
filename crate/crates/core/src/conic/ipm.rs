//! Dense primal-dual interior-point method for linear matrix inequalities
//!
//! ```text
//! minimize cᵀy  subject to  F_b(y) = F_b0 + Σ y_i F_bi ⪰ 0  for every block b
//! ```
//!
//! Infeasible-start HKM search direction with Mehrotra predictor-corrector.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::linalg::min_eig;
use crate::scalar::Real;

/// Coefficient matrix of one variable inside one block, stored as a sparse
/// list of full-storage entries sorted by row.
#[derive(Clone, Debug)]
pub(crate) struct VarBlock<T> {
    pub var: usize,
    pub entries: Vec<(usize, usize, T)>,
    /// `(row, start, end)` ranges into `entries`.
    pub rows: Vec<(usize, usize, usize)>,
}

impl<T: Real> VarBlock<T> {
    pub fn new(var: usize, mut entries: Vec<(usize, usize, T)>) -> Self {
        entries.sort_by_key(|&(i, j, _)| (i, j));
        let mut rows = Vec::new();
        let mut start = 0;
        for k in 1..=entries.len() {
            if k == entries.len() || entries[k].0 != entries[start].0 {
                rows.push((entries[start].0, start, k));
                start = k;
            }
        }
        Self { var, entries, rows }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BlockData<T> {
    pub dim: usize,
    pub f0: DMatrix<T>,
    pub vars: Vec<VarBlock<T>>,
}

#[derive(Clone, Debug)]
pub(crate) struct LmiData<T> {
    pub nvars: usize,
    pub c: Vec<T>,
    pub blocks: Vec<BlockData<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum IpmOutcome {
    Converged,
    NearOptimal,
    MaxIter,
    Diverged,
    Stalled,
    Failed,
}

#[derive(Clone, Debug)]
pub(crate) struct IpmResult<T> {
    pub outcome: IpmOutcome,
    pub y: Vec<T>,
    pub iterations: usize,
    pub pinf: T,
    pub dinf: T,
    pub gap: T,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct IpmSettings<T> {
    pub tol: T,
    pub near_tol: T,
    pub max_iter: usize,
    pub step_fraction: T,
}

impl<T: Real> BlockData<T> {
    pub fn eval(&self, y: &[T]) -> DMatrix<T> {
        let mut m = self.f0.clone();
        self.accumulate(y, &mut m);
        m
    }

    fn apply(&self, dy: &[T]) -> DMatrix<T> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        self.accumulate(dy, &mut m);
        m
    }

    fn accumulate(&self, y: &[T], m: &mut DMatrix<T>) {
        for v in &self.vars {
            let yv = y[v.var];
            if yv == T::zero() {
                continue;
            }
            for &(i, j, c) in &v.entries {
                m[(i, j)] += yv * c;
            }
        }
    }

    /// `out[i] += tr(F_i X)` for every variable in the block.
    fn trace_into(&self, x: &DMatrix<T>, out: &mut [T]) {
        for v in &self.vars {
            let mut s = T::zero();
            for &(i, j, c) in &v.entries {
                s += c * x[(j, i)];
            }
            out[v.var] += s;
        }
    }

    fn coef_norm(v: &VarBlock<T>) -> T {
        v.entries.iter().fold(T::zero(), |acc, &(_, _, c)| acc + c * c).sqrt()
    }
}

impl<T: Real> LmiData<T> {
    pub fn total_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim).sum()
    }
}

fn frob<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
}

fn inner<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    a.iter().zip(b.iter()).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn sym<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::lit(0.5)
}

/// Largest `a` with `x + a·dx ⪰ 0`, `None` meaning unbounded.
fn max_step<T: Real>(chol: &Cholesky<T, Dyn>, x: &DMatrix<T>, dx: &DMatrix<T>) -> Option<T> {
    if x.nrows() == 1 {
        let d = dx[(0, 0)];
        return if d < T::zero() { Some(-x[(0, 0)] / d) } else { None };
    }
    let l = chol.l();
    let w1 = l.solve_lower_triangular(dx)?;
    let w = l.solve_lower_triangular(&w1.transpose())?;
    let lam = min_eig(&w);
    if lam < T::zero() {
        Some(-T::one() / lam)
    } else {
        None
    }
}

struct Iterate<T> {
    y: Vec<T>,
    s: Vec<DMatrix<T>>,
    z: Vec<DMatrix<T>>,
}

struct Factored<T: Real> {
    s_chol: Vec<Cholesky<T, Dyn>>,
    z_chol: Vec<Cholesky<T, Dyn>>,
    s_inv: Vec<DMatrix<T>>,
    m_chol: Cholesky<T, Dyn>,
}

struct Direction<T> {
    dy: Vec<T>,
    ds: Vec<DMatrix<T>>,
    dz: Vec<DMatrix<T>>,
}

pub(crate) fn solve<T: Real>(data: &LmiData<T>, settings: &IpmSettings<T>) -> IpmResult<T> {
    let m = data.nvars;
    let cmax = data.c.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()));
    let cscale = if cmax > T::zero() { cmax } else { T::one() };
    let c: Vec<T> = data.c.iter().map(|&v| v / cscale).collect();
    let total_dim = T::lit(data.total_dim().max(1) as f64);
    let f0_norm = data.blocks.iter().fold(T::zero(), |acc, b| acc.max(frob(&b.f0)));
    let c_norm = c.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();

    let mut it = initial_point(data, &c);
    let mut result = IpmResult {
        outcome: IpmOutcome::MaxIter,
        y: it.y.clone(),
        iterations: 0,
        pinf: T::lit(f64::INFINITY),
        dinf: T::lit(f64::INFINITY),
        gap: T::lit(f64::INFINITY),
    };
    let mut tiny_steps = 0usize;
    let mut best_merit = T::lit(f64::INFINITY);
    let mut since_best = 0usize;

    for iter in 0..settings.max_iter {
        result.iterations = iter;
        let rp: Vec<DMatrix<T>> =
            data.blocks.iter().zip(&it.s).map(|(b, s)| b.eval(&it.y) - s).collect();
        let mut rd = c.clone();
        let mut tz = vec![T::zero(); m];
        for (b, z) in data.blocks.iter().zip(&it.z) {
            b.trace_into(z, &mut tz);
        }
        for i in 0..m {
            rd[i] -= tz[i];
        }
        let comp: T = it.s.iter().zip(&it.z).fold(T::zero(), |acc, (s, z)| acc + inner(s, z));
        let mu = comp / total_dim;
        let pobj: T = c.iter().zip(&it.y).fold(T::zero(), |acc, (&ci, &yi)| acc + ci * yi);
        let dobj: T = -data.blocks.iter().zip(&it.z).fold(T::zero(), |acc, (b, z)| acc + inner(&b.f0, z));
        let pinf = rp.iter().fold(T::zero(), |acc, r| acc.max(frob(r))) / (T::one() + f0_norm);
        let dinf = rd.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt() / (T::one() + c_norm);
        let gap = comp.max((pobj - dobj).abs()) / (T::one() + pobj.abs() + dobj.abs());
        result.pinf = pinf;
        result.dinf = dinf;
        result.gap = gap;
        result.y = it.y.clone();
        if pinf < settings.tol && dinf < settings.tol && gap < settings.tol {
            result.outcome = IpmOutcome::Converged;
            return result;
        }
        // Dual residual plateaus once the Schur system loses accuracy; stop
        // there instead of iterating into a breakdown.
        let merit = pinf.max(dinf).max(gap);
        if merit < best_merit * T::lit(0.9) {
            best_merit = merit;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= 4 && merit < settings.near_tol {
                result.outcome = IpmOutcome::NearOptimal;
                return result;
            }
        }
        let ymax = it.y.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()));
        let zmax = it.z.iter().fold(T::zero(), |acc, z| acc.max(z.trace()));
        if ymax > T::lit(1e12) || zmax > T::lit(1e12) || !pobj.is_finite_val() || !dobj.is_finite_val() {
            result.outcome = IpmOutcome::Diverged;
            return result;
        }

        let Some(fac) = factor(data, &it, m) else {
            result.outcome = near_or(settings, &result, IpmOutcome::Failed);
            return result;
        };

        // Predictor.
        let rc_aff: Vec<DMatrix<T>> = it.s.iter().zip(&it.z).map(|(s, z)| -(s * z)).collect();
        let aff = direction(data, &it, &fac, &rp, &rd, &rc_aff);
        let ap = step_len(&fac.s_chol, &it.s, &aff.ds, T::one());
        let ad = step_len(&fac.z_chol, &it.z, &aff.dz, T::one());
        let mut comp_aff = T::zero();
        for b in 0..data.blocks.len() {
            let s1 = &it.s[b] + &aff.ds[b] * ap;
            let z1 = &it.z[b] + &aff.dz[b] * ad;
            comp_aff += inner(&s1, &z1);
        }
        let mu_aff = comp_aff / total_dim;
        let ratio = if mu > T::zero() { (mu_aff / mu).max(T::zero()) } else { T::zero() };
        let sigma = (ratio * ratio * ratio).min(T::one());

        // Corrector.
        let rc: Vec<DMatrix<T>> = (0..data.blocks.len())
            .map(|b| {
                let dim = data.blocks[b].dim;
                DMatrix::identity(dim, dim) * (sigma * mu) - &it.s[b] * &it.z[b] - &aff.ds[b] * &aff.dz[b]
            })
            .collect();
        let dir = direction(data, &it, &fac, &rp, &rd, &rc);
        let ap = step_len(&fac.s_chol, &it.s, &dir.ds, settings.step_fraction);
        let ad = step_len(&fac.z_chol, &it.z, &dir.dz, settings.step_fraction);

        if ap < T::lit(1e-10) && ad < T::lit(1e-10) {
            tiny_steps += 1;
            if tiny_steps >= 3 {
                result.outcome = near_or(settings, &result, IpmOutcome::Stalled);
                return result;
            }
        } else {
            tiny_steps = 0;
        }
        for i in 0..m {
            it.y[i] += ap * dir.dy[i];
        }
        for b in 0..data.blocks.len() {
            it.s[b] = sym(&(&it.s[b] + &dir.ds[b] * ap));
            it.z[b] = sym(&(&it.z[b] + &dir.dz[b] * ad));
        }
    }
    result.iterations = settings.max_iter;
    result.y = it.y.clone();
    result.outcome = near_or(settings, &result, IpmOutcome::MaxIter);
    result
}

fn near_or<T: Real>(settings: &IpmSettings<T>, r: &IpmResult<T>, fallback: IpmOutcome) -> IpmOutcome {
    if r.pinf < settings.near_tol && r.dinf < settings.near_tol && r.gap < settings.near_tol {
        IpmOutcome::NearOptimal
    } else {
        fallback
    }
}

fn initial_point<T: Real>(data: &LmiData<T>, c: &[T]) -> Iterate<T> {
    let ten = T::lit(10.0);
    let mut s = Vec::with_capacity(data.blocks.len());
    let mut z = Vec::with_capacity(data.blocks.len());
    for b in &data.blocks {
        let sqrt_dim = T::lit((b.dim as f64).sqrt());
        let mut xi_s = ten.max(sqrt_dim).max(frob(&b.f0));
        let mut xi_z = ten.max(sqrt_dim);
        for v in &b.vars {
            let nv = BlockData::coef_norm(v);
            xi_s = xi_s.max(nv);
            xi_z = xi_z.max(sqrt_dim * (T::one() + c[v.var].abs()) / (T::one() + nv));
        }
        s.push(DMatrix::identity(b.dim, b.dim) * xi_s);
        z.push(DMatrix::identity(b.dim, b.dim) * xi_z);
    }
    Iterate { y: vec![T::zero(); data.nvars], s, z }
}

fn factor<T: Real>(data: &LmiData<T>, it: &Iterate<T>, m: usize) -> Option<Factored<T>> {
    let mut s_chol = Vec::with_capacity(data.blocks.len());
    let mut z_chol = Vec::with_capacity(data.blocks.len());
    let mut s_inv = Vec::with_capacity(data.blocks.len());
    for b in 0..data.blocks.len() {
        let sc = it.s[b].clone().cholesky()?;
        s_inv.push(sc.inverse());
        s_chol.push(sc);
        z_chol.push(it.z[b].clone().cholesky()?);
    }

    let mut big_m = DMatrix::<T>::zeros(m, m);
    for (b, block) in data.blocks.iter().enumerate() {
        schur_block(block, &s_inv[b], &it.z[b], &mut big_m);
    }
    let big_m = sym(&big_m);
    let diag_max = (0..m).fold(T::zero(), |acc, i| acc.max(big_m[(i, i)]));
    let mut reg = T::lit(1e-14) * diag_max.max(T::one());
    let mut m_chol = None;
    for _ in 0..6 {
        let mut trial = big_m.clone();
        for i in 0..m {
            trial[(i, i)] += reg;
        }
        if let Some(ch) = trial.cholesky() {
            m_chol = Some(ch);
            break;
        }
        reg *= T::lit(100.0);
    }
    Some(Factored { s_chol, z_chol, s_inv, m_chol: m_chol? })
}

/// Adds `tr(F_i S⁻¹ F_j Z)` for the block's variables into `big_m`.
fn schur_block<T: Real>(block: &BlockData<T>, s_inv: &DMatrix<T>, z: &DMatrix<T>, big_m: &mut DMatrix<T>) {
    let dim = block.dim;
    let mut g = DMatrix::<T>::zeros(dim, dim);
    let mut frow = nalgebra::DVector::<T>::zeros(dim);
    for (jl, vj) in block.vars.iter().enumerate() {
        // g = S⁻¹ F_j Z, assembled from the nonzero rows of F_j Z.
        g.fill(T::zero());
        for &(r, start, end) in &vj.rows {
            frow.fill(T::zero());
            for &(_, j, c) in &vj.entries[start..end] {
                frow.axpy(c, &z.column(j), T::one());
            }
            g.ger(T::one(), &s_inv.column(r), &frow, T::one());
        }
        for vi in &block.vars[..=jl] {
            let mut acc = T::zero();
            for &(a, b, u) in &vi.entries {
                acc += u * g[(b, a)];
            }
            big_m[(vi.var, vj.var)] += acc;
            if vi.var != vj.var {
                big_m[(vj.var, vi.var)] += acc;
            }
        }
    }
}

fn direction<T: Real>(
    data: &LmiData<T>,
    it: &Iterate<T>,
    fac: &Factored<T>,
    rp: &[DMatrix<T>],
    rd: &[T],
    rc: &[DMatrix<T>],
) -> Direction<T> {
    let m = data.nvars;
    let mut rhs: Vec<T> = rd.iter().map(|&v| -v).collect();
    for (b, block) in data.blocks.iter().enumerate() {
        let x = &fac.s_inv[b] * (&rc[b] - &rp[b] * &it.z[b]);
        block.trace_into(&x, &mut rhs);
    }
    let dy_vec = fac.m_chol.solve(&nalgebra::DVector::from_vec(rhs));
    let dy: Vec<T> = dy_vec.iter().copied().collect();
    debug_assert_eq!(dy.len(), m);
    let mut ds = Vec::with_capacity(data.blocks.len());
    let mut dz = Vec::with_capacity(data.blocks.len());
    for (b, block) in data.blocks.iter().enumerate() {
        let d_s = block.apply(&dy) + &rp[b];
        let d_z = sym(&(&fac.s_inv[b] * (&rc[b] - &d_s * &it.z[b])));
        ds.push(d_s);
        dz.push(d_z);
    }
    Direction { dy, ds, dz }
}

fn step_len<T: Real>(chols: &[Cholesky<T, Dyn>], x: &[DMatrix<T>], dx: &[DMatrix<T>], fraction: T) -> T {
    let mut a = T::one();
    for b in 0..x.len() {
        if let Some(mx) = max_step(&chols[b], &x[b], &dx[b]) {
            a = a.min(fraction * mx);
        }
    }
    a.max(T::zero())
}
