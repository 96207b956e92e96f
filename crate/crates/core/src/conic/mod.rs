//! Small dense conic solver for the subproblems of the alternating
//! optimisation: linear objectives over real vector variables and Hermitian
//! PSD matrix variables, subject to affine, convex quadratic and LMI
//! constraints.

mod cones;
mod ipm;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::numerics::{hermitian_eig, CMat, HermitianMatrix, HERMITIAN_TOL};
use cones::Cones;
use ipm::{Canonical, IpmSettings, RawStatus};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConicError {
    #[error("coordinate {index} is not declared (program has {count})")]
    UnknownCoordinate { index: usize, count: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("quadratic weight is not PSD (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("LMI coefficient is not Hermitian (asymmetry {0:e})")]
    NotHermitian(f64),
}

/// Real vector variable occupying `len` consecutive coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub offset: usize,
    pub len: usize,
}

impl Var {
    pub fn at(&self, i: usize) -> usize {
        assert!(i < self.len, "index {i} out of range for variable of length {}", self.len);
        self.offset + i
    }

    pub fn expr(&self, i: usize) -> AffineExpr {
        AffineExpr::coord(self.at(i))
    }
}

/// Hermitian `n x n` matrix variable, parameterised by `n^2` real coordinates:
/// the diagonal first, then `(Re, Im)` of each entry above the diagonal in
/// row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatVar {
    pub offset: usize,
    pub n: usize,
}

impl MatVar {
    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn coord(&self, k: usize) -> usize {
        assert!(k < self.len());
        self.offset + k
    }

    /// Entry positions touched by local coordinate `k`: `(i, j, is_imag)`.
    fn locate(&self, k: usize) -> (usize, usize, bool) {
        let n = self.n;
        if k < n {
            return (k, k, false);
        }
        let mut r = k - n;
        for i in 0..n {
            let row = 2 * (n - 1 - i);
            if r < row {
                return (i, i + 1 + r / 2, r % 2 == 1);
            }
            r -= row;
        }
        unreachable!()
    }

    /// Basis matrix multiplying local coordinate `k`.
    pub fn basis(&self, k: usize) -> CMat {
        let mut b = CMat::zeros(self.n, self.n);
        let (i, j, imag) = self.locate(k);
        if i == j {
            b[(i, i)] = Complex64::new(1.0, 0.0);
        } else if imag {
            b[(i, j)] = Complex64::new(0.0, 1.0);
            b[(j, i)] = Complex64::new(0.0, -1.0);
        } else {
            b[(i, j)] = Complex64::new(1.0, 0.0);
            b[(j, i)] = Complex64::new(1.0, 0.0);
        }
        b
    }

    /// `Re Tr(C T)` as an affine expression of the coordinates.
    pub fn trace_with(&self, c: &CMat) -> AffineExpr {
        let mut e = AffineExpr::zero();
        for k in 0..self.len() {
            let (i, j, imag) = self.locate(k);
            let coef = if i == j {
                c[(i, i)].re
            } else if imag {
                // Tr(C B) with B = i(E_ij - E_ji) gives i(C_ji - C_ij).
                (Complex64::new(0.0, 1.0) * (c[(j, i)] - c[(i, j)])).re
            } else {
                (c[(i, j)] + c[(j, i)]).re
            };
            if coef != 0.0 {
                e.terms.push((self.offset + k, coef));
            }
        }
        e
    }

    /// Real coordinates representing the Hermitian matrix `t`.
    pub fn coords_of(&self, t: &CMat) -> Vec<f64> {
        (0..self.len())
            .map(|k| {
                let (i, j, imag) = self.locate(k);
                if imag {
                    t[(i, j)].im
                } else {
                    t[(i, j)].re
                }
            })
            .collect()
    }

    fn assemble(&self, x: &[f64]) -> CMat {
        let mut t = CMat::zeros(self.n, self.n);
        for k in 0..self.len() {
            let v = x[self.offset + k];
            let (i, j, imag) = self.locate(k);
            if i == j {
                t[(i, i)].re = v;
            } else if imag {
                t[(i, j)].im = v;
                t[(j, i)].im = -v;
            } else {
                t[(i, j)].re = v;
                t[(j, i)].re = v;
            }
        }
        t
    }
}

/// `sum_i a_i x_i + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffineExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffineExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self { terms: vec![], constant: c }
    }

    pub fn coord(i: usize) -> Self {
        Self { terms: vec![(i, 1.0)], constant: 0.0 }
    }

    pub fn term(mut self, i: usize, a: f64) -> Self {
        self.terms.push((i, a));
        self
    }

    pub fn plus(mut self, other: &AffineExpr) -> Self {
        self.terms.extend_from_slice(&other.terms);
        self.constant += other.constant;
        self
    }

    pub fn scaled(mut self, a: f64) -> Self {
        self.terms.iter_mut().for_each(|t| t.1 *= a);
        self.constant *= a;
        self
    }

    pub fn shift(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, a)| a * x[i]).sum::<f64>()
    }
}

/// Hermitian-matrix-valued affine map `F0 + sum_i x_i F_i`, required PSD.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianLmi {
    pub dim: usize,
    pub constant: CMat,
    pub terms: BTreeMap<usize, CMat>,
}

impl HermitianLmi {
    pub fn new(dim: usize) -> Self {
        Self { dim, constant: CMat::zeros(dim, dim), terms: BTreeMap::new() }
    }

    fn place(target: &mut CMat, r: usize, c: usize, m: &CMat) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                target[(r + i, c + j)] += m[(i, j)];
                if r != c {
                    target[(c + j, r + i)] += m[(i, j)].conj();
                }
            }
        }
    }

    /// Adds `m` at block position `(r, c)`; off-diagonal blocks also add the
    /// mirrored adjoint so the result stays Hermitian.
    pub fn add_constant(&mut self, r: usize, c: usize, m: &CMat) {
        Self::place(&mut self.constant, r, c, m);
    }

    pub fn add_term(&mut self, coord: usize, r: usize, c: usize, m: &CMat) {
        let dim = self.dim;
        let entry = self.terms.entry(coord).or_insert_with(|| CMat::zeros(dim, dim));
        Self::place(entry, r, c, m);
    }

    /// Adds `expr * m` at block position `(r, c)`.
    pub fn add_affine(&mut self, r: usize, c: usize, expr: &AffineExpr, m: &CMat) {
        if expr.constant != 0.0 {
            self.add_constant(r, c, &(m * Complex64::new(expr.constant, 0.0)));
        }
        for &(i, a) in &expr.terms {
            self.add_term(i, r, c, &(m * Complex64::new(a, 0.0)));
        }
    }

    /// Places the matrix variable `t` (scaled by `a`) at diagonal block `r`.
    pub fn add_matvar(&mut self, r: usize, t: MatVar, a: f64) {
        for k in 0..t.len() {
            self.add_term(t.coord(k), r, r, &(t.basis(k) * Complex64::new(a, 0.0)));
        }
    }

    pub fn eval(&self, x: &[f64]) -> CMat {
        let mut m = self.constant.clone();
        for (&i, f) in &self.terms {
            m += f * Complex64::new(x[i], 0.0);
        }
        m
    }

    fn is_real(&self) -> bool {
        let real = |m: &CMat| m.iter().all(|v| v.im == 0.0);
        real(&self.constant) && self.terms.values().all(real)
    }
}

/// `(x_S - center)' P (x_S - center) <= bound`, with `P` PSD.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLe {
    pub coords: Vec<usize>,
    pub center: Vec<f64>,
    pub weight: DMatrix<f64>,
    pub bound: AffineExpr,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    /// `expr >= 0`.
    NonNeg(AffineExpr),
    Quadratic(QuadraticLe),
    Lmi(HermitianLmi),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { feas_tol: 1e-7, gap_tol: 1e-7, max_iter: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub status: Status,
    pub values: Vec<f64>,
    /// Objective of the (maximisation) program at `values`.
    pub objective: f64,
    /// Upper bound on the optimum implied by the dual iterate.
    pub dual_bound: f64,
    /// Relative duality gap.
    pub gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    /// Complementary slackness `<s, z>` summed over all cones.
    pub complementarity: f64,
}

impl Solution {
    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.at(0)]
    }

    pub fn vector(&self, v: Var) -> Vec<f64> {
        self.values[v.offset..v.offset + v.len].to_vec()
    }

    pub fn matrix(&self, t: MatVar) -> HermitianMatrix {
        HermitianMatrix::symmetrize(t.assemble(&self.values))
    }
}

#[derive(Debug, Clone, Default)]
pub struct ConvexProgram {
    names: Vec<(String, usize, usize)>,
    count: usize,
    objective: AffineExpr,
    constraints: Vec<Constraint>,
}

impl ConvexProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_coords(&self) -> usize {
        self.count
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn variable_names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn add_var(&mut self, name: &str, len: usize) -> Var {
        let v = Var { offset: self.count, len };
        self.names.push((name.to_string(), self.count, len));
        self.count += len;
        v
    }

    /// Declares a Hermitian matrix variable constrained to be PSD.
    pub fn add_psd(&mut self, name: &str, n: usize) -> MatVar {
        let t = MatVar { offset: self.count, n };
        self.names.push((name.to_string(), self.count, n * n));
        self.count += n * n;
        let mut lmi = HermitianLmi::new(n);
        lmi.add_matvar(0, t, 1.0);
        self.constraints.push(Constraint::Lmi(lmi));
        t
    }

    pub fn maximize(&mut self, objective: AffineExpr) -> Result<(), ConicError> {
        self.check_expr(&objective)?;
        self.objective = objective;
        Ok(())
    }

    /// `expr >= 0`.
    pub fn ge(&mut self, expr: AffineExpr) -> Result<(), ConicError> {
        self.check_expr(&expr)?;
        self.constraints.push(Constraint::NonNeg(expr));
        Ok(())
    }

    /// `lhs <= rhs`.
    pub fn le(&mut self, lhs: AffineExpr, rhs: AffineExpr) -> Result<(), ConicError> {
        self.ge(rhs.plus(&lhs.scaled(-1.0)))
    }

    pub fn quad_le(&mut self, q: QuadraticLe) -> Result<(), ConicError> {
        let n = q.coords.len();
        if q.center.len() != n || q.weight.nrows() != n || q.weight.ncols() != n {
            return Err(ConicError::Dimension(format!(
                "quadratic over {n} coordinates with {} center entries and {}x{} weight",
                q.center.len(),
                q.weight.nrows(),
                q.weight.ncols()
            )));
        }
        for &i in &q.coords {
            self.check_coord(i)?;
        }
        self.check_expr(&q.bound)?;
        let asym = (&q.weight - q.weight.transpose()).norm();
        let scale = q.weight.norm().max(1.0);
        if asym > 1e-12 * scale {
            return Err(ConicError::NotHermitian(asym));
        }
        if n > 0 {
            let min = q.weight.clone().symmetric_eigen().eigenvalues.min();
            if min < -1e-10 * scale {
                return Err(ConicError::NotPsd(min));
            }
        }
        self.constraints.push(Constraint::Quadratic(q));
        Ok(())
    }

    pub fn lmi(&mut self, lmi: HermitianLmi) -> Result<(), ConicError> {
        let check = |m: &CMat| -> Result<(), ConicError> {
            if m.nrows() != lmi.dim || m.ncols() != lmi.dim {
                return Err(ConicError::Dimension(format!(
                    "LMI coefficient {}x{} in a {}-dimensional LMI",
                    m.nrows(),
                    m.ncols(),
                    lmi.dim
                )));
            }
            let asym = (m - m.adjoint()).norm();
            if asym > HERMITIAN_TOL * m.norm().max(1.0) * 10.0 {
                return Err(ConicError::NotHermitian(asym));
            }
            Ok(())
        };
        check(&lmi.constant)?;
        for (&i, f) in &lmi.terms {
            self.check_coord(i)?;
            check(f)?;
        }
        self.constraints.push(Constraint::Lmi(lmi));
        Ok(())
    }

    fn check_coord(&self, i: usize) -> Result<(), ConicError> {
        if i >= self.count {
            return Err(ConicError::UnknownCoordinate { index: i, count: self.count });
        }
        Ok(())
    }

    fn check_expr(&self, e: &AffineExpr) -> Result<(), ConicError> {
        e.terms.iter().try_for_each(|&(i, _)| self.check_coord(i))
    }

    /// Evaluates the objective at an arbitrary point.
    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.objective.eval(x)
    }

    /// Largest violation of any constraint at `x`, in the units of the
    /// constraint (LMIs by their most negative eigenvalue).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for c in &self.constraints {
            let v = match c {
                Constraint::NonNeg(e) => -e.eval(x),
                Constraint::Quadratic(q) => {
                    let d = DVector::from_iterator(q.coords.len(), q.coords.iter().zip(&q.center).map(|(&i, c)| x[i] - c));
                    (d.transpose() * &q.weight * &d)[(0, 0)] - q.bound.eval(x)
                }
                Constraint::Lmi(l) => -hermitian_eig(&HermitianMatrix::symmetrize(l.eval(x))).min(),
            };
            worst = worst.max(v);
        }
        worst
    }

    fn canonical(&self) -> Canonical {
        let n = self.count;
        // Rows: nonnegative constraints first, then one PSD block per LMI.
        let nonneg: Vec<&AffineExpr> = self
            .constraints
            .iter()
            .filter_map(|c| if let Constraint::NonNeg(e) = c { Some(e) } else { None })
            .collect();
        let mut blocks: Vec<(usize, DMatrix<f64>, Vec<(usize, DMatrix<f64>)>)> = Vec::new();
        for c in &self.constraints {
            match c {
                Constraint::NonNeg(_) => {}
                Constraint::Lmi(l) => blocks.push(lmi_block(l)),
                Constraint::Quadratic(q) => blocks.push(quadratic_block(q)),
            }
        }
        let psd: Vec<usize> = blocks.iter().map(|b| b.0).collect();
        let cones = Cones::new(nonneg.len(), psd);
        let m = cones.len();
        let mut g = DMatrix::<f64>::zeros(m, n);
        let mut h = DVector::<f64>::zeros(m);
        for (r, e) in nonneg.iter().enumerate() {
            // a'x + b >= 0  <=>  -a'x + s = b.
            for &(i, a) in &e.terms {
                g[(r, i)] -= a;
            }
            h[r] = e.constant;
        }
        for (b, (d, f0, terms)) in blocks.iter().enumerate() {
            let start = cones.block_range(b).start;
            for k in 0..d * d {
                h[start + k] = f0.as_slice()[k];
            }
            for (i, fi) in terms {
                for k in 0..d * d {
                    g[(start + k, *i)] -= fi.as_slice()[k];
                }
            }
        }
        let mut c = DVector::<f64>::zeros(n);
        for &(i, a) in &self.objective.terms {
            c[i] -= a;
        }
        Canonical::new(c, g, h, cones)
    }
}

fn lmi_block(l: &HermitianLmi) -> (usize, DMatrix<f64>, Vec<(usize, DMatrix<f64>)>) {
    if l.is_real() {
        let re = |m: &CMat| cones::symmetrize(m.map(|v| v.re));
        let terms = l.terms.iter().map(|(&i, f)| (i, re(f))).collect();
        (l.dim, re(&l.constant), terms)
    } else {
        let emb = |m: &CMat| cones::symmetrize(embed_matrix(m));
        let terms = l.terms.iter().map(|(&i, f)| (i, emb(f))).collect();
        (2 * l.dim, emb(&l.constant), terms)
    }
}

/// Schur form `[[bound, (F(x-c))'], [F(x-c), I]] >= 0` with `P = F'F`.
fn quadratic_block(q: &QuadraticLe) -> (usize, DMatrix<f64>, Vec<(usize, DMatrix<f64>)>) {
    let n = q.coords.len();
    let (rows, f) = if n == 0 {
        (0, DMatrix::zeros(0, 0))
    } else {
        let eig = q.weight.clone().symmetric_eigen();
        let scale = eig.eigenvalues.amax().max(1e-300);
        let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 1e-14 * scale).collect();
        let mut f = DMatrix::zeros(keep.len(), n);
        for (r, &i) in keep.iter().enumerate() {
            let s = eig.eigenvalues[i].sqrt();
            for j in 0..n {
                f[(r, j)] = s * eig.eigenvectors[(j, i)];
            }
        }
        (keep.len(), f)
    };
    let d = rows + 1;
    let center = DVector::from_column_slice(&q.center);
    let fc = &f * &center;
    let mut f0 = DMatrix::zeros(d, d);
    f0[(0, 0)] = q.bound.constant;
    for r in 0..rows {
        f0[(r + 1, r + 1)] = 1.0;
        f0[(0, r + 1)] = -fc[r];
        f0[(r + 1, 0)] = -fc[r];
    }
    let mut acc: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
    for &(i, a) in &q.bound.terms {
        acc.entry(i).or_insert_with(|| DMatrix::zeros(d, d))[(0, 0)] += a;
    }
    for (col, &i) in q.coords.iter().enumerate() {
        let m = acc.entry(i).or_insert_with(|| DMatrix::zeros(d, d));
        for r in 0..rows {
            m[(0, r + 1)] += f[(r, col)];
            m[(r + 1, 0)] += f[(r, col)];
        }
    }
    (d, f0, acc.into_iter().collect())
}

fn embed_matrix(m: &CMat) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let v = m[(i, j)];
            out[(i, j)] = v.re;
            out[(i + n, j + n)] = v.re;
            out[(i, j + n)] = -v.im;
            out[(i + n, j)] = v.im;
        }
    }
    out
}

/// Real symmetric embedding `[[Re H, -Im H], [Im H, Re H]]`.
pub fn embed_hermitian(h: &HermitianMatrix) -> DMatrix<f64> {
    embed_matrix(h.matrix())
}

pub fn solve(program: &ConvexProgram, opts: &SolveOptions) -> Solution {
    let canon = program.canonical();
    let raw = ipm::solve(
        &canon,
        &IpmSettings { feas_tol: opts.feas_tol, gap_tol: opts.gap_tol, max_iter: opts.max_iter },
    );
    let constant = program.objective.constant;
    let status = match raw.status {
        RawStatus::Optimal => Status::Optimal,
        RawStatus::PrimalInfeasible => Status::Infeasible,
        RawStatus::DualInfeasible => Status::Unbounded,
        RawStatus::MaxIter => Status::MaxIter,
    };
    let complementarity = raw.s.iter().zip(&raw.z).map(|(a, b)| a * b).sum();
    let objective = match status {
        Status::Infeasible => f64::NEG_INFINITY,
        Status::Unbounded => f64::INFINITY,
        _ => -raw.pcost + constant,
    };
    Solution {
        status,
        objective,
        dual_bound: -raw.dcost + constant,
        gap: raw.gap,
        primal_residual: raw.pres,
        dual_residual: raw.dres,
        iterations: raw.iterations,
        complementarity,
        values: raw.x,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_round_trip() {
        let t = MatVar { offset: 0, n: 3 };
        let m = CMat::from_fn(3, 3, |i, j| Complex64::new((i + j) as f64, i as f64 - j as f64));
        let x = t.coords_of(&m);
        assert_eq!(t.assemble(&x), m);
        let mut acc = CMat::zeros(3, 3);
        for k in 0..9 {
            acc += t.basis(k) * Complex64::new(x[k], 0.0);
        }
        assert!((acc - m).norm() < 1e-15);
    }

    #[test]
    fn trace_with_matches_direct_product() {
        let t = MatVar { offset: 0, n: 3 };
        let c = CMat::from_fn(3, 3, |i, j| Complex64::new(1.0 + (i * j) as f64, i as f64 - j as f64));
        let m = CMat::from_fn(3, 3, |i, j| Complex64::new(2.0 - (i + j) as f64, j as f64 - i as f64));
        let direct = (&c * &m).trace().re;
        assert!((t.trace_with(&c).eval(&t.coords_of(&m)) - direct).abs() < 1e-12);
    }
}
