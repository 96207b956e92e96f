//! Dense complex-Hermitian linear algebra and scalar special functions.
//!
//! Everything here is sized for the small matrices that appear in the
//! beamforming and positioning subproblems (dimension below ~20), so the
//! algorithms favour robustness and determinism over asymptotic speed.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

/// Relative tolerance used when validating conjugate symmetry.
pub const HERMITIAN_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not Hermitian: max |A - A^H| = {asym:e} exceeds {limit:e}")]
    NotHermitian { asym: f64, limit: f64 },
    #[error("argument {0} outside the open interval (0, 2)")]
    ErfcInvDomain(f64),
}

/// A square complex matrix with `A = A^H`.
///
/// Construction symmetrises the input after validation, so the stored value is
/// exactly Hermitian even if the caller's data carried rounding noise.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix(CMat);

impl HermitianMatrix {
    pub fn new(m: CMat) -> Result<Self, NumericsError> {
        if m.nrows() != m.ncols() {
            return Err(NumericsError::NotSquare { rows: m.nrows(), cols: m.ncols() });
        }
        let n = m.nrows();
        let scale = m.iter().map(|z| z.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut asym = 0.0f64;
        for i in 0..n {
            for j in 0..=i {
                asym = asym.max((m[(i, j)] - m[(j, i)].conj()).norm());
            }
        }
        let limit = HERMITIAN_TOL * scale;
        if asym > limit {
            return Err(NumericsError::NotHermitian { asym, limit });
        }
        Ok(Self::symmetrize(m))
    }

    /// Builds `(M + M^H)/2` without validation.
    pub fn symmetrize(m: CMat) -> Self {
        let n = m.nrows();
        let mut out = m;
        for i in 0..n {
            out[(i, i)] = Complex64::new(out[(i, i)].re, 0.0);
            for j in 0..i {
                let avg = (out[(i, j)] + out[(j, i)].conj()) * 0.5;
                out[(i, j)] = avg;
                out[(j, i)] = avg.conj();
            }
        }
        Self(out)
    }

    pub fn zeros(n: usize) -> Self {
        Self(CMat::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        Self(CMat::identity(n, n))
    }

    pub fn from_real_diagonal(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = CMat::zeros(n, n);
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = Complex64::new(v, 0.0);
        }
        Self(m)
    }

    /// `v v^H` for a column vector `v`.
    pub fn outer(v: &CVec) -> Self {
        Self::symmetrize(v * v.adjoint())
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &CMat {
        &self.0
    }

    pub fn into_matrix(self) -> CMat {
        self.0
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.0[(i, i)].re).sum()
    }

    /// `Re Tr(self * other)`; the imaginary part vanishes for Hermitian pairs.
    pub fn trace_product(&self, other: &HermitianMatrix) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += (self.0[(i, j)] * other.0[(j, i)]).re;
            }
        }
        acc
    }

    /// `v^H A v` for a column vector `v`.
    pub fn quadratic_form(&self, v: &CVec) -> f64 {
        (v.adjoint() * &self.0 * v)[(0, 0)].re
    }

    pub fn scale(&self, c: f64) -> Self {
        Self(&self.0 * Complex64::new(c, 0.0))
    }

    pub fn add(&self, other: &HermitianMatrix) -> Self {
        Self(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &HermitianMatrix) -> Self {
        Self(&self.0 - &other.0)
    }
}

/// Eigen-decomposition of a Hermitian matrix.
#[derive(Debug, Clone)]
pub struct EigResult {
    /// Real eigenvalues sorted in descending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors, column `i` pairs with `values[i]`.
    pub vectors: CMat,
}

impl EigResult {
    pub fn reconstruct(&self) -> CMat {
        let n = self.values.len();
        let mut lam = CMat::zeros(n, n);
        for (i, &v) in self.values.iter().enumerate() {
            lam[(i, i)] = Complex64::new(v, 0.0);
        }
        &self.vectors * lam * self.vectors.adjoint()
    }

    pub fn max(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    pub fn min(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigen-decomposition by cyclic complex Jacobi rotations.
pub fn hermitian_eig(a: &HermitianMatrix) -> EigResult {
    let n = a.dim();
    let mut m = a.matrix().clone();
    let mut v = CMat::identity(n, n);
    let total = a.frobenius_norm();
    if n == 0 {
        return EigResult { values: vec![], vectors: v };
    }
    let threshold = (f64::EPSILON * total).max(f64::MIN_POSITIVE);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)].norm_sqr())
            .sum::<f64>()
            .sqrt();
        if off <= threshold {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                let mag = apq.norm();
                if mag <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m[(p, p)].re;
                let aqq = m[(q, q)].re;
                let phase = apq / mag;
                // Real rotation on the phase-normalised pair.
                let tau = (aqq - app) / (2.0 * mag);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Unitary acting on columns (p, q).
                let u_pp = Complex64::new(c, 0.0);
                let u_pq = Complex64::new(s, 0.0);
                let u_qp = -phase.conj() * s;
                let u_qq = phase.conj() * c;
                // m <- m * U
                for i in 0..n {
                    let mip = m[(i, p)];
                    let miq = m[(i, q)];
                    m[(i, p)] = mip * u_pp + miq * u_qp;
                    m[(i, q)] = mip * u_pq + miq * u_qq;
                }
                // m <- U^H * m
                for j in 0..n {
                    let mpj = m[(p, j)];
                    let mqj = m[(q, j)];
                    m[(p, j)] = u_pp.conj() * mpj + u_qp.conj() * mqj;
                    m[(q, j)] = u_pq.conj() * mpj + u_qq.conj() * mqj;
                }
                m[(p, q)] = Complex64::new(0.0, 0.0);
                m[(q, p)] = Complex64::new(0.0, 0.0);
                m[(p, p)] = Complex64::new(m[(p, p)].re, 0.0);
                m[(q, q)] = Complex64::new(m[(q, q)].re, 0.0);
                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = vip * u_pp + viq * u_qp;
                    v[(i, q)] = vip * u_pq + viq * u_qq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].re.total_cmp(&m[(i, i)].re));
    let values = order.iter().map(|&i| m[(i, i)].re).collect();
    let vectors = CMat::from_fn(n, n, |r, c| v[(r, order[c])]);
    EigResult { values, vectors }
}

/// Dominant rank-one factor of a PSD matrix.
#[derive(Debug, Clone)]
pub struct Rank1 {
    /// `sqrt(lambda_max) * v_max`, phase-fixed so its largest-magnitude entry is real and nonnegative.
    pub vector: CVec,
    /// `||w w^H - T||_F / ||T||_F` (zero for the zero matrix).
    pub residual: f64,
    /// Ratio of the second to the first eigenvalue.
    pub rank_ratio: f64,
    /// Set when `lambda_max <= 0`; the returned vector is then zero.
    pub degenerate: bool,
}

pub fn rank1_extract(t: &HermitianMatrix) -> Rank1 {
    let n = t.dim();
    let eig = hermitian_eig(t);
    let lmax = eig.max();
    let norm = t.frobenius_norm();
    if n == 0 || lmax <= 0.0 {
        return Rank1 {
            vector: CVec::zeros(n),
            residual: if norm > 0.0 { 1.0 } else { 0.0 },
            rank_ratio: 0.0,
            degenerate: true,
        };
    }
    let mut w: CVec = eig.vectors.column(0).into_owned() * Complex64::new(lmax.sqrt(), 0.0);
    fix_phase(&mut w);
    let residual = (&w * w.adjoint() - t.matrix()).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt() / norm;
    let second = eig.values.get(1).copied().unwrap_or(0.0).max(0.0);
    Rank1 { vector: w, residual, rank_ratio: second / lmax, degenerate: false }
}

/// Rotates `w` so its largest-magnitude entry (first on ties) is real and nonnegative.
pub fn fix_phase(w: &mut CVec) {
    let mut best = 0;
    let mut best_mag = -1.0;
    for (i, z) in w.iter().enumerate() {
        if z.norm() > best_mag * (1.0 + 1e-12) {
            best_mag = z.norm();
            best = i;
        }
    }
    if best_mag > 0.0 {
        let rot = w[best].conj() / best_mag;
        w.iter_mut().for_each(|z| *z *= rot);
        w[best] = Complex64::new(w[best].norm(), 0.0);
    }
}

/// `lambda_min(A) >= -tol * max(1, ||A||_F)`.
pub fn is_psd(a: &HermitianMatrix, tol: f64) -> bool {
    if a.dim() == 0 {
        return true;
    }
    hermitian_eig(a).min() >= -tol * a.frobenius_norm().max(1.0)
}

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// Complementary error function `2/sqrt(pi) * int_x^inf exp(-t^2) dt`.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.5 {
        1.0 - erf_series(x)
    } else {
        erfc_continued_fraction(x)
    }
}

fn erf_series(x: f64) -> f64 {
    // sum_n (-1)^n x^(2n+1) / (n! (2n+1))
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= -x2 / n;
        let contrib = term / (2.0 * n + 1.0);
        sum += contrib;
        if contrib.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    FRAC_2_SQRT_PI * sum
}

fn erfc_continued_fraction(x: f64) -> f64 {
    // erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))),
    // evaluated with the modified Lentz algorithm.
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 * 0.5;
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (std::f64::consts::PI.sqrt() * f)
}

/// Inverse of [`erfc`] on `(0, 2)` by safeguarded Newton iteration.
pub fn erfc_inv(y: f64) -> Result<f64, NumericsError> {
    if !(y > 0.0 && y < 2.0) {
        return Err(NumericsError::ErfcInvDomain(y));
    }
    if y == 1.0 {
        return Ok(0.0);
    }
    // Bracket: erfc is decreasing, so erfc(lo) >= y >= erfc(hi).
    let mut lo = -1.0;
    let mut hi = 1.0;
    while erfc(lo) < y {
        lo *= 2.0;
    }
    while erfc(hi) > y {
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..300 {
        let fx = erfc(x) - y;
        if fx == 0.0 {
            return Ok(x);
        }
        if fx > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let slope = -FRAC_2_SQRT_PI * (-x * x).exp();
        let mut next = if slope != 0.0 { x - fx / slope } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-16 * (1.0 + x.abs()) || hi - lo <= 1e-16 * (1.0 + x.abs()) {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}
