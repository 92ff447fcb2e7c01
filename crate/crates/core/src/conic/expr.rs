//! Affine expressions in the decision variables and matrices built from them.

use nalgebra::DMatrix;

use crate::scalar::Real;

/// `constant + Σ coef * x[var]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinExpr<T> {
    pub constant: T,
    pub terms: Vec<(usize, T)>,
}

impl<T: Real> LinExpr<T> {
    pub fn zero() -> Self {
        Self { constant: T::zero(), terms: Vec::new() }
    }

    pub fn constant(c: T) -> Self {
        Self { constant: c, terms: Vec::new() }
    }

    pub fn var(id: usize) -> Self {
        Self { constant: T::zero(), terms: vec![(id, T::one())] }
    }

    pub fn term(id: usize, coef: T) -> Self {
        Self { constant: T::zero(), terms: vec![(id, coef)] }
    }

    pub fn is_zero(&self) -> bool {
        self.constant == T::zero() && self.terms.iter().all(|(_, c)| *c == T::zero())
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: T, other: &LinExpr<T>) {
        if a == T::zero() {
            return;
        }
        self.constant += a * other.constant;
        self.terms.extend(other.terms.iter().map(|&(v, c)| (v, a * c)));
    }

    pub fn scaled(&self, a: T) -> Self {
        let mut out = Self::zero();
        out.axpy(a, self);
        out
    }

    pub fn plus(&self, other: &LinExpr<T>) -> Self {
        let mut out = self.clone();
        out.axpy(T::one(), other);
        out
    }

    pub fn minus(&self, other: &LinExpr<T>) -> Self {
        let mut out = self.clone();
        out.axpy(-T::one(), other);
        out
    }

    /// Merges duplicate variables and drops zero coefficients.
    pub fn compact(&mut self) {
        self.terms.sort_by_key(|&(v, _)| v);
        let mut merged: Vec<(usize, T)> = Vec::with_capacity(self.terms.len());
        for &(v, c) in &self.terms {
            match merged.last_mut() {
                Some((lv, lc)) if *lv == v => *lc += c,
                _ => merged.push((v, c)),
            }
        }
        merged.retain(|&(_, c)| c != T::zero());
        self.terms = merged;
    }

    pub fn eval(&self, x: &[T]) -> T {
        self.terms.iter().fold(self.constant, |acc, &(v, c)| acc + c * x[v])
    }
}

/// Dense matrix whose entries are affine expressions.
#[derive(Clone, Debug)]
pub struct ExprMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<LinExpr<T>>,
}

impl<T: Real> ExprMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![LinExpr::zero(); rows * cols] }
    }

    pub fn from_const(m: &DMatrix<T>) -> Self {
        let mut out = Self::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.data[i * m.ncols() + j].constant = m[(i, j)];
            }
        }
        out
    }

    /// `expr * I_n`.
    pub fn scaled_identity(n: usize, expr: &LinExpr<T>) -> Self {
        let mut out = Self::zeros(n, n);
        for i in 0..n {
            *out.get_mut(i, i) = expr.clone();
        }
        out
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, &LinExpr::constant(T::one()))
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> LinExpr<T>) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &LinExpr<T> {
        &self.data[i * self.cols + j]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut LinExpr<T> {
        &mut self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i).clone())
    }

    pub fn scaled(&self, a: T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|e| e.scaled(a)).collect() }
    }

    pub fn plus(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "ExprMatrix::plus shape");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a.plus(b)).collect(),
        }
    }

    pub fn minus(&self, other: &Self) -> Self {
        self.plus(&other.scaled(-T::one()))
    }

    /// `c * self` for a constant matrix `c`.
    pub fn lmul(&self, c: &DMatrix<T>) -> Self {
        assert_eq!(c.ncols(), self.rows, "ExprMatrix::lmul shape");
        let mut out = Self::zeros(c.nrows(), self.cols);
        for i in 0..c.nrows() {
            for k in 0..c.ncols() {
                let a = c[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..self.cols {
                    let src = self.get(k, j).clone();
                    out.get_mut(i, j).axpy(a, &src);
                }
            }
        }
        out.compact();
        out
    }

    /// `self * c` for a constant matrix `c`.
    pub fn rmul(&self, c: &DMatrix<T>) -> Self {
        self.transpose().lmul(&c.transpose()).transpose()
    }

    pub fn compact(&mut self) {
        for e in &mut self.data {
            e.compact();
        }
    }

    pub fn eval(&self, x: &[T]) -> DMatrix<T> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j).eval(x))
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, &LinExpr<T>)> {
        self.data.iter().enumerate().map(move |(k, e)| (k / self.cols, k % self.cols, e))
    }
}

/// Assembles a symmetric block matrix: setting block `(i, j)` also writes its
/// transpose into `(j, i)`.
pub struct SymBlockBuilder<T> {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    out: ExprMatrix<T>,
}

impl<T: Real> SymBlockBuilder<T> {
    pub fn new(sizes: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut acc = 0;
        for &s in sizes {
            offsets.push(acc);
            acc += s;
        }
        Self { sizes: sizes.to_vec(), offsets, out: ExprMatrix::zeros(acc, acc) }
    }

    pub fn set(&mut self, bi: usize, bj: usize, block: &ExprMatrix<T>) -> &mut Self {
        assert_eq!(
            (block.nrows(), block.ncols()),
            (self.sizes[bi], self.sizes[bj]),
            "block ({bi},{bj}) has wrong shape"
        );
        let (ro, co) = (self.offsets[bi], self.offsets[bj]);
        for i in 0..block.nrows() {
            for j in 0..block.ncols() {
                let e = block.get(i, j).clone();
                if bi != bj {
                    *self.out.get_mut(co + j, ro + i) = e.clone();
                }
                *self.out.get_mut(ro + i, co + j) = e;
            }
        }
        self
    }

    pub fn build(mut self) -> ExprMatrix<T> {
        self.out.compact();
        self.out
    }
}
