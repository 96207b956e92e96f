//! Alternating optimisation under perfect CSI: SDR beamforming for a fixed
//! layout and an SCA step on the antenna positions for a fixed precoder.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{
    self, direction, row_quadratic, steering_outer, validate_layout, Beamformer, ChannelError, FaLayout, PathSet, Scenario,
};
use crate::conic::{self, AffineExpr, ConicError, ConvexProgram, MatVar, QuadraticLe, SolveOptions, Status};
use crate::numerics::{hermitian_eig, rank1_extract, CMat, CVec, HermitianMatrix};

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Quadratic model `value + gradient'(t - center) +/- lipschitz/2 ||t - center||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateData {
    pub center: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub lipschitz: f64,
}

impl SurrogateData {
    fn linear(&self, t: &[f64]) -> (f64, f64) {
        let mut lin = self.value;
        let mut sq = 0.0;
        for ((x, c), g) in t.iter().zip(&self.center).zip(&self.gradient) {
            lin += g * (x - c);
            sq += (x - c) * (x - c);
        }
        (lin, sq)
    }

    /// Concave minorant.
    pub fn lower(&self, t: &[f64]) -> f64 {
        let (lin, sq) = self.linear(t);
        lin - 0.5 * self.lipschitz * sq
    }

    /// Convex majorant.
    pub fn upper(&self, t: &[f64]) -> f64 {
        let (lin, sq) = self.linear(t);
        lin + 0.5 * self.lipschitz * sq
    }
}

fn wavenumber(wavelength: f64) -> f64 {
    2.0 * PI / wavelength
}

/// `g(t) = a_t(t) Q a_t(t)^H`.
pub fn g_value(layout: &FaLayout, elevation: f64, azimuth: f64, q: &HermitianMatrix, wavelength: f64) -> f64 {
    row_quadratic(&channel::transmit_steering(layout, elevation, azimuth, wavelength), q)
}

/// Phase argument `k rho(t_m - t_n) + arg q_mn` of the cross terms of `g`.
fn g_phase(layout: &FaLayout, psi: [f64; 2], k: f64, q: &CMat, m: usize, n: usize) -> f64 {
    let (a, b) = (layout.point(m), layout.point(n));
    k * (psi[0] * (a[0] - b[0]) + psi[1] * (a[1] - b[1])) + q[(m, n)].arg()
}

pub fn grad_g(layout: &FaLayout, elevation: f64, azimuth: f64, q: &HermitianMatrix, wavelength: f64) -> Vec<f64> {
    let k = wavenumber(wavelength);
    let psi = direction(elevation, azimuth);
    let qm = q.matrix();
    let n_t = layout.len();
    let mut grad = vec![0.0; 2 * n_t];
    for m in 0..n_t {
        let s: f64 = (0..n_t)
            .filter(|&n| n != m)
            .map(|n| qm[(m, n)].norm() * g_phase(layout, psi, k, qm, m, n).sin())
            .sum();
        grad[2 * m] = -2.0 * k * psi[0] * s;
        grad[2 * m + 1] = -2.0 * k * psi[1] * s;
    }
    grad
}

pub fn hess_g(layout: &FaLayout, elevation: f64, azimuth: f64, q: &HermitianMatrix, wavelength: f64) -> DMatrix<f64> {
    let k = wavenumber(wavelength);
    let psi = direction(elevation, azimuth);
    let qm = q.matrix();
    let n_t = layout.len();
    let mut h = DMatrix::zeros(2 * n_t, 2 * n_t);
    for m in 0..n_t {
        for n in 0..n_t {
            if n == m {
                continue;
            }
            let c = 2.0 * k * k * qm[(m, n)].norm() * g_phase(layout, psi, k, qm, m, n).cos();
            for u in 0..2 {
                for v in 0..2 {
                    h[(2 * m + u, 2 * m + v)] -= c * psi[u] * psi[v];
                    h[(2 * m + u, 2 * n + v)] += c * psi[u] * psi[v];
                }
            }
        }
    }
    h
}

fn max_abs_entry(q: &CMat) -> f64 {
    q.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

/// Closed-form curvature bound for `g` as printed in the derivation.
pub fn delta_closed_form(q: &HermitianMatrix, n_t: usize, wavelength: f64) -> f64 {
    let n = n_t as f64;
    16.0 * n * PI * PI * n * (n - 1.0).max(0.0).sqrt() * max_abs_entry(q.matrix()) / (wavelength * wavelength)
}

/// Uniform Frobenius bound on the Hessian of `g` over all layouts and
/// directions (uses `|psi psi'|_F <= 1`).
pub fn delta_frobenius(q: &HermitianMatrix, wavelength: f64) -> f64 {
    let k = wavenumber(wavelength);
    let qm = q.matrix();
    let n = qm.nrows();
    let mut sum = 0.0;
    for m in 0..n {
        let row: f64 = (0..n).filter(|&j| j != m).map(|j| qm[(m, j)].norm()).sum();
        sum += row * row;
        sum += (0..n).filter(|&j| j != m).map(|j| qm[(m, j)].norm_sqr()).sum::<f64>();
    }
    2.0 * k * k * sum.sqrt()
}

/// Curvature constant with `delta I >= hess g` everywhere.
pub fn lipschitz_delta(q: &HermitianMatrix, n_t: usize, wavelength: f64) -> f64 {
    delta_closed_form(q, n_t, wavelength).max(delta_frobenius(q, wavelength))
}

pub fn g_surrogate(layout: &FaLayout, elevation: f64, azimuth: f64, q: &HermitianMatrix, wavelength: f64) -> SurrogateData {
    SurrogateData {
        center: layout.coords.clone(),
        value: g_value(layout, elevation, azimuth, q, wavelength),
        gradient: grad_g(layout, elevation, azimuth, q, wavelength),
        lipschitz: lipschitz_delta(q, layout.len(), wavelength),
    }
}

/// User channel with its first and second position derivatives, all in
/// row-vector form: `h_i`, `dh_i/dx_i`, `dh_i/dy_i`, and the Hessian entries
/// `(xx, xy, yy)`.
pub(crate) struct ChannelJet {
    pub h: CVec,
    pub d: [CVec; 2],
    pub dd: [CVec; 3],
}

pub(crate) fn channel_jet(layout: &FaLayout, paths: &PathSet, wavelength: f64) -> ChannelJet {
    let k = wavenumber(wavelength);
    let n = layout.len();
    let mut h = CVec::zeros(n);
    let mut d = [CVec::zeros(n), CVec::zeros(n)];
    let mut dd = [CVec::zeros(n), CVec::zeros(n), CVec::zeros(n)];
    let j = Complex64::new(0.0, 1.0);
    for (i, t) in layout.points().enumerate() {
        for l in 0..paths.len() {
            let psi = paths.direction(l);
            let e = paths.gains[l] * Complex64::from_polar(1.0, k * (psi[0] * t[0] + psi[1] * t[1]));
            h[i] += e;
            d[0][i] += j * k * psi[0] * e;
            d[1][i] += j * k * psi[1] * e;
            dd[0][i] -= k * k * psi[0] * psi[0] * e;
            dd[1][i] -= k * k * psi[0] * psi[1] * e;
            dd[2][i] -= k * k * psi[1] * psi[1] * e;
        }
    }
    ChannelJet { h, d, dd }
}

/// `R_k = Gamma_k sum_{q != k} T_q - T_k`; the SINR constraint of user `k`
/// reads `h_k R_k h_k^H + Gamma_k sigma^2 <= 0`.
pub fn sinr_matrix(covariances: &[HermitianMatrix], k: usize, gamma: f64) -> HermitianMatrix {
    let n = covariances[0].dim();
    let mut r = CMat::zeros(n, n);
    for (q, t) in covariances.iter().enumerate() {
        if q == k {
            r -= t.matrix();
        } else {
            r += t.matrix() * Complex64::new(gamma, 0.0);
        }
    }
    HermitianMatrix::symmetrize(r)
}

pub fn f_k_value(layout: &FaLayout, scenario: &Scenario, k: usize, r: &HermitianMatrix) -> f64 {
    row_quadratic(&scenario.channel(layout, k), r)
}

/// `f_k` evaluated term by term from path magnitudes and phases:
/// `sum_{i,j,l,p} |s_l||s_p||R_ij| cos(k(rho_l(t_i) - rho_p(t_j)) + arg s_l - arg s_p + arg R_ij)`.
pub fn f_k_expansion(layout: &FaLayout, scenario: &Scenario, k: usize, r: &HermitianMatrix) -> f64 {
    let paths = &scenario.users[k];
    let kw = scenario.geometry.wavenumber();
    let rm = r.matrix();
    let n = layout.len();
    let rho = |l: usize, i: usize| {
        let t = layout.point(i);
        channel::propagation_delta(t, paths.elevation[l], paths.azimuth[l])
    };
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            for l in 0..paths.len() {
                for p in 0..paths.len() {
                    let mu = paths.gains[l].norm() * paths.gains[p].norm() * rm[(i, j)].norm();
                    let kappa = kw * (rho(l, i) - rho(p, j)) + paths.gains[l].arg() - paths.gains[p].arg() + rm[(i, j)].arg();
                    total += mu * kappa.cos();
                }
            }
        }
    }
    total
}

fn quadratic_gradient(jet: &ChannelJet, r: &HermitianMatrix) -> Vec<f64> {
    let rc = r.matrix() * jet.h.map(|v| v.conj());
    let n = jet.h.len();
    let mut g = vec![0.0; 2 * n];
    for i in 0..n {
        g[2 * i] = 2.0 * (jet.d[0][i] * rc[i]).re;
        g[2 * i + 1] = 2.0 * (jet.d[1][i] * rc[i]).re;
    }
    g
}

fn quadratic_hessian(jet: &ChannelJet, r: &HermitianMatrix) -> DMatrix<f64> {
    let rm = r.matrix();
    let rc = rm * jet.h.map(|v| v.conj());
    let n = jet.h.len();
    let mut hs = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            for u in 0..2 {
                for v in 0..2 {
                    let mut val = 2.0 * (jet.d[u][i] * rm[(i, j)] * jet.d[v][j].conj()).re;
                    if i == j {
                        val += 2.0 * (jet.dd[u + v][i] * rc[i]).re;
                    }
                    hs[(2 * i + u, 2 * j + v)] = val;
                }
            }
        }
    }
    hs
}

pub fn grad_f_k(layout: &FaLayout, scenario: &Scenario, k: usize, r: &HermitianMatrix) -> Vec<f64> {
    quadratic_gradient(&channel_jet(layout, &scenario.users[k], scenario.geometry.wavelength), r)
}

pub fn hess_f_k(layout: &FaLayout, scenario: &Scenario, k: usize, r: &HermitianMatrix) -> DMatrix<f64> {
    quadratic_hessian(&channel_jet(layout, &scenario.users[k], scenario.geometry.wavelength), r)
}

/// Closed-form curvature bound for `f_k` as printed in the derivation.
pub fn zeta_closed_form(paths: &PathSet, r: &HermitianMatrix, n_t: usize, wavelength: f64) -> f64 {
    let eta = max_abs_entry(r.matrix());
    let mag: Vec<f64> = paths.gains.iter().map(|g| g.norm()).collect();
    let l = mag.len();
    let mut first = 0.0;
    for a in 0..l.saturating_sub(1) {
        for b in a..l {
            first += mag[a] * mag[b];
        }
    }
    let total: f64 = mag.iter().sum();
    let n = n_t as f64;
    16.0 * n * PI * PI / (wavelength * wavelength) * (first * eta + total * total * (n - 1.0) * eta)
}

/// Sum of the spectral norms of the rank-one Hessians of every cosine term
/// in the path expansion of `f_k`.
pub fn zeta_termwise(paths: &PathSet, r: &HermitianMatrix, wavelength: f64) -> f64 {
    let k2 = wavenumber(wavelength).powi(2);
    let rm = r.matrix();
    let n = rm.nrows();
    let l = paths.len();
    let psi: Vec<[f64; 2]> = (0..l).map(|i| paths.direction(i)).collect();
    let mag: Vec<f64> = paths.gains.iter().map(|g| g.norm()).collect();
    let (mut same, mut cross) = (0.0, 0.0);
    for a in 0..l {
        for b in 0..l {
            let w = mag[a] * mag[b];
            let d = [psi[a][0] - psi[b][0], psi[a][1] - psi[b][1]];
            same += w * (d[0] * d[0] + d[1] * d[1]);
            let na = psi[a][0].powi(2) + psi[a][1].powi(2);
            let nb = psi[b][0].powi(2) + psi[b][1].powi(2);
            cross += w * (na + nb);
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += rm[(i, j)].norm() * if i == j { same } else { cross };
        }
    }
    k2 * total
}

pub fn lipschitz_zeta(scenario: &Scenario, k: usize, r: &HermitianMatrix) -> f64 {
    let paths = &scenario.users[k];
    let wl = scenario.geometry.wavelength;
    zeta_closed_form(paths, r, r.dim(), wl).max(zeta_termwise(paths, r, wl))
}

pub fn f_k_surrogate(layout: &FaLayout, scenario: &Scenario, k: usize, r: &HermitianMatrix) -> SurrogateData {
    let jet = channel_jet(layout, &scenario.users[k], scenario.geometry.wavelength);
    SurrogateData {
        center: layout.coords.clone(),
        value: row_quadratic(&jet.h, r),
        gradient: quadratic_gradient(&jet, r),
        lipschitz: lipschitz_zeta(scenario, k, r),
    }
}

/// Lower bound `|t_m - t_n|^2 >= -|e|^2 + 2 e'(t_m - t_n)` with `e` the
/// difference at the expansion point.
pub fn distance_linearization(t: &FaLayout, center: &FaLayout, m: usize, n: usize) -> f64 {
    let (a, b) = (center.point(m), center.point(n));
    let e = [a[0] - b[0], a[1] - b[1]];
    let (x, y) = (t.point(m), t.point(n));
    -(e[0] * e[0] + e[1] * e[1]) + 2.0 * (e[0] * (x[0] - y[0]) + e[1] * (x[1] - y[1]))
}

// ---------------------------------------------------------------------------
// Beamforming

/// Tolerances shared by the subproblem solves.
pub fn subproblem_options() -> SolveOptions {
    SolveOptions { feas_tol: 1e-9, gap_tol: 1e-9, max_iter: 100 }
}

#[derive(Debug, Clone)]
pub struct BeamformingSolution {
    pub status: Status,
    pub covariances: Vec<HermitianMatrix>,
    pub beamformer: Beamformer,
    /// Relaxation optimum `eta sum_k Tr(A T_k)`.
    pub relaxation_snr: f64,
    /// Sensing SNR of the extracted precoder.
    pub snr: f64,
    /// `lambda_2 / lambda_1` of each returned covariance.
    pub rank_ratios: Vec<f64>,
    /// Same ratio for the solver output before rank reduction.
    pub raw_rank_ratios: Vec<f64>,
    pub randomized: bool,
    pub solver_iterations: usize,
}

impl BeamformingSolution {
    fn failed(status: Status, n: usize, k: usize, iterations: usize) -> Self {
        Self {
            status,
            covariances: vec![HermitianMatrix::zeros(n); k],
            beamformer: Beamformer::zeros(n, k),
            relaxation_snr: 0.0,
            snr: 0.0,
            rank_ratios: vec![0.0; k],
            raw_rank_ratios: vec![0.0; k],
            randomized: false,
            solver_iterations: iterations,
        }
    }

    pub fn feasible(&self) -> bool {
        matches!(self.status, Status::Optimal)
    }
}

pub(crate) fn rank_ratio(t: &HermitianMatrix) -> f64 {
    let e = hermitian_eig(t);
    if e.values[0] <= 0.0 {
        return 0.0;
    }
    e.values.get(1).map_or(0.0, |v| v.max(0.0) / e.values[0])
}

/// Relative eigenvalue level below which covariance components are dropped
/// before rank reduction.
const RANK_TOL: f64 = 1e-7;

/// Reduces the ranks of an optimal SDR solution while keeping every
/// constraint functional `funcs[i](T) = sum_k Tr(C_ik T_k)` fixed. Stops when
/// every covariance has rank one or no reduction direction exists.
const PURIFY_DRIFT: f64 = 1e-9;

pub(crate) fn purify(ts: &[HermitianMatrix], funcs: &[Vec<HermitianMatrix>]) -> Vec<HermitianMatrix> {
    let mut ts: Vec<HermitianMatrix> = ts.to_vec();
    for _ in 0..64 {
        // Factor T_k = V_k V_k^H over the significant eigenvalues.
        let mut factors: Vec<CMat> = Vec::with_capacity(ts.len());
        for t in &ts {
            let e = hermitian_eig(t);
            let top = e.values[0].max(0.0);
            let keep: Vec<usize> = (0..e.values.len()).filter(|&i| e.values[i] > RANK_TOL * top && top > 0.0).collect();
            let mut v = CMat::zeros(t.dim(), keep.len());
            for (c, &i) in keep.iter().enumerate() {
                v.set_column(c, &(e.vectors.column(i) * Complex64::new(e.values[i].sqrt(), 0.0)));
            }
            factors.push(v);
        }
        let ranks: Vec<usize> = factors.iter().map(|v| v.ncols()).collect();
        let unknowns: usize = ranks.iter().map(|r| r * r).sum();
        if ranks.iter().all(|&r| r <= 1) || unknowns <= funcs.len() {
            return factors.iter().map(|v| HermitianMatrix::symmetrize(v * v.adjoint())).collect();
        }
        let mut offsets = Vec::with_capacity(ranks.len());
        let mut off = 0;
        for &r in &ranks {
            offsets.push(MatVar { offset: off, n: r });
            off += r * r;
        }
        let mut e = DMatrix::<f64>::zeros(funcs.len(), unknowns);
        for (row, f) in funcs.iter().enumerate() {
            for (k, c) in f.iter().enumerate() {
                if ranks[k] == 0 {
                    continue;
                }
                let reduced = factors[k].adjoint() * c.matrix() * &factors[k];
                for (col, a) in offsets[k].trace_with(&reduced).terms {
                    e[(row, col)] += a;
                }
            }
        }
        // Rows are equations `= 0`; unit rows keep small channel gains from
        // vanishing next to the steering and power rows.
        for mut row in e.row_iter_mut() {
            let nrm = row.norm();
            if nrm > 0.0 {
                row /= nrm;
            }
        }
        let gram = e.tr_mul(&e);
        let eig = SymmetricEigen::new(gram);
        let imin = eig.eigenvalues.imin();
        let dir = eig.eigenvectors.column(imin).into_owned();
        let deltas: Vec<HermitianMatrix> = offsets
            .iter()
            .map(|mv| {
                let coords: Vec<f64> = dir.iter().copied().collect();
                let mut m = CMat::zeros(mv.n, mv.n);
                for k in 0..mv.len() {
                    m += mv.basis(k) * Complex64::new(coords[mv.offset + k], 0.0);
                }
                HermitianMatrix::symmetrize(m)
            })
            .collect();
        let extreme = |sign: f64| {
            deltas
                .iter()
                .filter(|d| d.dim() > 0)
                .map(|d| hermitian_eig(&d.scale(sign)).max())
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let (pos, neg) = (extreme(1.0), extreme(-1.0));
        let (sign, top) = if pos >= neg { (1.0, pos) } else { (-1.0, neg) };
        if !(top > 0.0) {
            break;
        }
        let step = sign / top;
        let next: Vec<HermitianMatrix> = factors
            .iter()
            .zip(&deltas)
            .map(|(v, d)| {
                let r = v.ncols();
                let inner = CMat::identity(r, r) - d.matrix() * Complex64::new(step, 0.0);
                HermitianMatrix::symmetrize(v * inner * v.adjoint())
            })
            .collect();
        if !functionals_kept(&ts, &next, funcs) {
            break;
        }
        ts = next;
    }
    ts
}

fn functionals_kept(before: &[HermitianMatrix], after: &[HermitianMatrix], funcs: &[Vec<HermitianMatrix>]) -> bool {
    funcs.iter().all(|f| {
        let (mut a, mut b, mut scale) = (0.0, 0.0, 0.0);
        for (k, c) in f.iter().enumerate() {
            a += (c.matrix() * before[k].matrix()).trace().re;
            b += (c.matrix() * after[k].matrix()).trace().re;
            scale += c.matrix().norm() * before[k].matrix().norm();
        }
        (a - b).abs() <= PURIFY_DRIFT * scale.max(f64::MIN_POSITIVE)
    })
}

/// Solves the SDR of the beamforming subproblem at a fixed layout and
/// extracts a rank-one precoder.
pub fn beamforming_sdp(scenario: &Scenario, layout: &FaLayout, opts: &SolveOptions) -> Result<BeamformingSolution, SolveError> {
    let n = scenario.geometry.n_t;
    let kk = scenario.n_users();
    if layout.len() != n {
        return Err(SolveError::Invalid(format!("layout has {} antennas, scenario {}", layout.len(), n)));
    }
    let pmax = scenario.p_max;
    if !(pmax > 0.0) {
        return Ok(BeamformingSolution::failed(Status::Infeasible, n, kk, 0));
    }
    let a = scenario.steering(layout, scenario.target.elevation, scenario.target.azimuth);
    let amat = steering_outer(&a);
    let hs: Vec<HermitianMatrix> = (0..kk).map(|k| steering_outer(&scenario.channel(layout, k))).collect();

    // Covariances are stored in units of the power budget.
    let mut prog = ConvexProgram::new();
    let tvars: Vec<MatVar> = (0..kk).map(|k| prog.add_psd(&format!("T{k}"), n)).collect();
    let mut obj = AffineExpr::zero();
    for t in &tvars {
        obj = obj.plus(&t.trace_with(amat.matrix()));
    }
    prog.maximize(obj)?;
    let noise = scenario.noise_power;
    for k in 0..kk {
        let gamma = scenario.sinr_thresholds[k];
        let scale = pmax / (gamma * noise);
        let mut row = AffineExpr::constant(-1.0);
        for (q, t) in tvars.iter().enumerate() {
            let c = if q == k { scale } else { -gamma * scale };
            row = row.plus(&t.trace_with(hs[k].matrix()).scaled(c));
        }
        prog.ge(row)?;
    }
    let mut power = AffineExpr::constant(1.0);
    for t in &tvars {
        power = power.plus(&t.trace_with(&CMat::identity(n, n)).scaled(-1.0));
    }
    prog.ge(power)?;

    let sol = conic::solve(&prog, opts);
    match sol.status {
        Status::Optimal => {}
        Status::Infeasible | Status::Unbounded => return Ok(BeamformingSolution::failed(sol.status, n, kk, sol.iterations)),
        Status::MaxIter => {
            let max_violation = prog.max_violation(&sol.values);
            if max_violation > 1e-6 || sol.gap > 1e-5 {
                log::warn!("beamforming SDP stopped at the iteration limit (gap {:.2e})", sol.gap);
                return Ok(BeamformingSolution::failed(Status::MaxIter, n, kk, sol.iterations));
            }
        }
    }
    let raw: Vec<HermitianMatrix> = tvars.iter().map(|t| sol.matrix(*t)).collect();
    let raw_rank_ratios: Vec<f64> = raw.iter().map(rank_ratio).collect();

    let mut funcs: Vec<Vec<HermitianMatrix>> = vec![vec![amat.clone(); kk]];
    for k in 0..kk {
        let gamma = scenario.sinr_thresholds[k];
        funcs.push((0..kk).map(|q| if q == k { hs[k].clone() } else { hs[k].scale(-gamma) }).collect());
    }
    funcs.push(vec![HermitianMatrix::identity(n); kk]);
    let purified = purify(&raw, &funcs);
    let covariances: Vec<HermitianMatrix> = purified.iter().map(|t| t.scale(pmax)).collect();
    let rank_ratios: Vec<f64> = covariances.iter().map(rank_ratio).collect();
    let relaxation_snr = scenario.eta() * pmax * sol.objective;

    let mut beamformer = Beamformer::from_columns(&covariances.iter().map(|t| rank1_extract(t).vector).collect::<Vec<_>>());
    let mut randomized = false;
    if rank_ratios.iter().any(|r| *r > 1e-5) || !certify(scenario, layout, &beamformer, 1e-5) {
        log::info!("rank-one extraction failed certification; falling back to Gaussian randomization");
        let uncertain = scenario.without_uncertainty();
        let grid = crate::robust_csi::AngleGrid::single(scenario.target.elevation, scenario.target.azimuth);
        beamformer = crate::robust_csi::gaussian_randomization(&covariances, &uncertain, layout, &grid, 200, 0).beamformer;
        randomized = true;
    }
    enforce_power(&mut beamformer, pmax);
    let snr = channel::sensing_snr(&beamformer, layout, scenario);
    Ok(BeamformingSolution {
        status: Status::Optimal,
        covariances,
        beamformer,
        relaxation_snr,
        snr,
        rank_ratios,
        raw_rank_ratios,
        randomized,
        solver_iterations: sol.iterations,
    })
}

/// Scales the precoder down onto the power budget if it exceeds it.
pub(crate) fn enforce_power(w: &mut Beamformer, pmax: f64) {
    let p = w.power();
    if p > pmax {
        w.w *= Complex64::new((pmax / p).sqrt(), 0.0);
    }
}

/// SINR of every user at least `Gamma_k (1 - rel)` and power within budget.
pub fn certify(scenario: &Scenario, layout: &FaLayout, w: &Beamformer, rel: f64) -> bool {
    let sinr_ok = (0..scenario.n_users()).all(|k| channel::user_sinr(w, layout, k, scenario) >= scenario.sinr_thresholds[k] * (1.0 - rel));
    sinr_ok && w.power() <= scenario.p_max * (1.0 + 1e-7)
}

// ---------------------------------------------------------------------------
// Positioning

#[derive(Debug, Clone)]
pub struct PositionStep {
    pub layout: FaLayout,
    pub accepted: bool,
    pub status: Status,
    /// `g` (sensing gain without `eta`) at the expansion point and at the result.
    pub g_before: f64,
    pub g_after: f64,
    pub solver_iterations: usize,
    pub note: Option<String>,
}

impl PositionStep {
    fn unchanged(layout: &FaLayout, g: f64, status: Status, iterations: usize, note: impl Into<String>) -> Self {
        Self {
            layout: layout.clone(),
            accepted: false,
            status,
            g_before: g,
            g_after: g,
            solver_iterations: iterations,
            note: Some(note.into()),
        }
    }
}

/// Shared constraint set of the position programs, in wavelength units
/// around the expansion point: displacement `d`, its squared norm bound `tau`,
/// the region box and the linearized spacing constraints.
pub(crate) struct PositionFrame {
    pub d: crate::conic::Var,
    pub tau: crate::conic::Var,
    pub wavelength: f64,
}

impl PositionFrame {
    pub fn new(prog: &mut ConvexProgram, scenario: &Scenario, center: &FaLayout) -> Result<Self, SolveError> {
        let geo = &scenario.geometry;
        let wl = geo.wavelength;
        let n = center.len();
        let d = prog.add_var("d", 2 * n);
        let tau = prog.add_var("tau", 1);
        prog.quad_le(QuadraticLe {
            coords: (0..2 * n).map(|i| d.at(i)).collect(),
            center: vec![0.0; 2 * n],
            weight: DMatrix::identity(2 * n, 2 * n),
            bound: tau.expr(0),
        })?;
        let (hw, hl) = (geo.half_width() / wl, geo.half_length() / wl);
        for m in 0..n {
            let p = center.point(m);
            for (axis, half) in [(0, hw), (1, hl)] {
                let c = p[axis] / wl;
                prog.ge(d.expr(2 * m + axis).shift(half - c))?;
                prog.ge(d.expr(2 * m + axis).scaled(-1.0).shift(half + c))?;
            }
        }
        let dmin = (geo.min_spacing / wl).powi(2);
        if dmin > 0.0 {
            for m in 0..n {
                for q in m + 1..n {
                    let (a, b) = (center.point(m), center.point(q));
                    let e = [(a[0] - b[0]) / wl, (a[1] - b[1]) / wl];
                    let mut row = AffineExpr::constant(e[0] * e[0] + e[1] * e[1] - dmin);
                    for axis in 0..2 {
                        row = row.term(d.at(2 * m + axis), 2.0 * e[axis]).term(d.at(2 * q + axis), -2.0 * e[axis]);
                    }
                    prog.ge(row)?;
                }
            }
        }
        Ok(Self { d, tau, wavelength: wl })
    }

    /// `value + grad'(Delta) + curvature/2 ||Delta||^2` expressed in the frame
    /// variables (gradient and curvature given per meter).
    pub fn quadratic_model(&self, value: f64, gradient: &[f64], curvature: f64) -> AffineExpr {
        let mut e = AffineExpr::constant(value);
        for (i, g) in gradient.iter().enumerate() {
            e = e.term(self.d.at(i), g * self.wavelength);
        }
        e.term(self.tau.at(0), 0.5 * curvature * self.wavelength * self.wavelength)
    }

    pub fn layout(&self, sol: &conic::Solution, center: &FaLayout, scenario: &Scenario) -> FaLayout {
        let geo = &scenario.geometry;
        let d = sol.vector(self.d);
        let coords = center
            .coords
            .iter()
            .zip(&d)
            .enumerate()
            .map(|(i, (c, di))| {
                let half = if i % 2 == 0 { geo.half_width() } else { geo.half_length() };
                (c + di * self.wavelength).clamp(-half, half)
            })
            .collect();
        FaLayout { coords }
    }
}

/// Tries the step from `center` to `target`, halving it until `check`
/// accepts. The surrogate programs have convex feasible sets, so shortened
/// steps stay feasible for them; this only absorbs solver inaccuracy.
pub(crate) fn backtrack<F>(center: &FaLayout, target: &FaLayout, check: F) -> Result<(FaLayout, f64), String>
where
    F: Fn(&FaLayout) -> Result<f64, String>,
{
    let mut alpha = 1.0;
    let mut first_err = None;
    for _ in 0..12 {
        let coords = center.coords.iter().zip(&target.coords).map(|(c, t)| c + alpha * (t - c)).collect();
        let t = FaLayout { coords };
        match check(&t) {
            Ok(v) => return Ok((t, v)),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
        alpha *= 0.5;
    }
    Err(first_err.unwrap_or_default())
}

/// Position steps are re-validated exactly, so a stalled solve that is
/// primal feasible is good enough to try.
pub(crate) fn usable(prog: &ConvexProgram, sol: &conic::Solution) -> bool {
    match sol.status {
        Status::Optimal => true,
        Status::MaxIter => prog.max_violation(&sol.values) <= 1e-7,
        _ => false,
    }
}

/// Normalised SINR margin `(f_k + Gamma sigma^2) / (Gamma sigma^2)`; the
/// constraint holds when it is at most zero.
fn sinr_margin(scenario: &Scenario, layout: &FaLayout, k: usize, r: &HermitianMatrix) -> f64 {
    let gn = scenario.sinr_thresholds[k] * scenario.noise_power;
    (f_k_value(layout, scenario, k, r) + gn) / gn
}

/// One SCA step on the antenna positions for a fixed precoder.
pub fn position_subproblem(scenario: &Scenario, w: &Beamformer, layout: &FaLayout, opts: &SolveOptions) -> Result<PositionStep, SolveError> {
    let n = scenario.geometry.n_t;
    if layout.len() != n || w.w.nrows() != n || w.w.ncols() != scenario.n_users() {
        return Err(SolveError::Invalid("precoder and layout dimensions disagree with the scenario".into()));
    }
    let (el, az) = (scenario.target.elevation, scenario.target.azimuth);
    let wl = scenario.geometry.wavelength;
    let m = w.gram();
    let gsur = g_surrogate(layout, el, az, &m, wl);
    let g0 = gsur.value;
    if gsur.gradient.iter().all(|g| *g == 0.0) {
        return Ok(PositionStep::unchanged(layout, g0, Status::Optimal, 0, "zero gradient"));
    }
    let scale = g0.abs().max(1e-300);
    let covs: Vec<HermitianMatrix> = (0..w.w.ncols()).map(|k| w.covariance(k)).collect();

    let mut prog = ConvexProgram::new();
    let frame = PositionFrame::new(&mut prog, scenario, layout)?;
    let inv = 1.0 / scale;
    let grad: Vec<f64> = gsur.gradient.iter().map(|g| g * inv).collect();
    prog.maximize(frame.quadratic_model(0.0, &grad, -gsur.lipschitz * inv))?;

    let mut rs = Vec::with_capacity(covs.len());
    for k in 0..covs.len() {
        let r = sinr_matrix(&covs, k, scenario.sinr_thresholds[k]);
        let fs = f_k_surrogate(layout, scenario, k, &r);
        let gn = scenario.sinr_thresholds[k] * scenario.noise_power;
        let margin = (fs.value + gn) / gn;
        let allowed = margin.max(0.0);
        let grad: Vec<f64> = fs.gradient.iter().map(|g| g / gn).collect();
        let model = frame.quadratic_model(margin, &grad, fs.lipschitz / gn);
        prog.ge(model.scaled(-1.0).shift(allowed))?;
        rs.push((r, allowed));
    }

    let sol = conic::solve(&prog, opts);
    if !usable(&prog, &sol) {
        return Ok(PositionStep::unchanged(layout, g0, sol.status, sol.iterations, format!("position program status {:?}", sol.status)));
    }
    let full = frame.layout(&sol, layout, scenario);
    let checks = |t: &FaLayout| -> Result<f64, String> {
        let bad = validate_layout(t, &scenario.geometry);
        if !bad.is_empty() {
            return Err(format!("layout check failed: {bad:?}"));
        }
        for (k, (r, allowed)) in rs.iter().enumerate() {
            if sinr_margin(scenario, t, k, r) > allowed + 1e-9 {
                return Err(format!("SINR recheck failed for user {k}"));
            }
        }
        let g1 = g_value(t, el, az, &m, wl);
        if g1 < g0 {
            return Err("objective decreased".into());
        }
        Ok(g1)
    };
    let (cand, g1) = match backtrack(layout, &full, checks) {
        Ok(v) => v,
        Err(note) => return Ok(PositionStep::unchanged(layout, g0, sol.status, sol.iterations, note)),
    };
    Ok(PositionStep {
        layout: cand,
        accepted: true,
        status: sol.status,
        g_before: g0,
        g_after: g1,
        solver_iterations: sol.iterations,
        note: None,
    })
}

// ---------------------------------------------------------------------------
// Alternating loop

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AoOptions {
    /// Stop once the relative objective increase falls below this threshold.
    pub xi: f64,
    pub max_outer: usize,
    pub solver: SolveOptions,
}

impl Default for AoOptions {
    fn default() -> Self {
        Self { xi: 1e-3, max_outer: 200, solver: subproblem_options() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxOuter,
    Infeasible,
    Failed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub beamforming_iterations: usize,
    pub position_iterations: usize,
    pub step_accepted: bool,
    pub step_norm: f64,
    pub max_rank_ratio: f64,
    pub randomized: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    /// Objective after every beamforming solve (sensing SNR, or the robust
    /// epigraph value).
    pub trace: Vec<f64>,
    pub layouts: Vec<FaLayout>,
    pub beamformer: Beamformer,
    pub covariances: Vec<HermitianMatrix>,
    pub layout: FaLayout,
    pub status: RunStatus,
    pub diagnostics: Vec<IterationDiagnostics>,
    pub wall_time: Duration,
}

impl SolveReport {
    pub fn final_objective(&self) -> f64 {
        self.trace.last().copied().unwrap_or(0.0)
    }

    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    pub(crate) fn infeasible(layout: &FaLayout, n: usize, k: usize, start: Instant, status: RunStatus) -> Self {
        Self {
            trace: vec![],
            layouts: vec![layout.clone()],
            beamformer: Beamformer::zeros(n, k),
            covariances: vec![HermitianMatrix::zeros(n); k],
            layout: layout.clone(),
            status,
            diagnostics: vec![],
            wall_time: start.elapsed(),
        }
    }
}

fn step_norm(a: &FaLayout, b: &FaLayout) -> f64 {
    a.coords.iter().zip(&b.coords).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub(crate) fn converged(prev: f64, next: f64, xi: f64) -> bool {
    next - prev < xi * prev.abs().max(f64::MIN_POSITIVE)
}

/// Alternates SDR beamforming and SCA positioning from `init`.
pub fn algorithm1(scenario: &Scenario, init: &FaLayout, opts: &AoOptions) -> Result<SolveReport, SolveError> {
    let start = Instant::now();
    let n = scenario.geometry.n_t;
    let kk = scenario.n_users();
    let bad = validate_layout(init, &scenario.geometry);
    if !bad.is_empty() {
        return Err(SolveError::Invalid(format!("initial layout infeasible: {bad:?}")));
    }
    let mut layout = init.clone();
    let mut bf = beamforming_sdp(scenario, &layout, &opts.solver)?;
    if !bf.feasible() {
        let status = if bf.status == Status::Infeasible { RunStatus::Infeasible } else { RunStatus::Failed };
        return Ok(SolveReport::infeasible(init, n, kk, start, status));
    }
    let mut trace = vec![bf.snr];
    let mut layouts = vec![layout.clone()];
    let mut diagnostics = vec![IterationDiagnostics {
        beamforming_iterations: bf.solver_iterations,
        max_rank_ratio: bf.rank_ratios.iter().copied().fold(0.0, f64::max),
        randomized: bf.randomized,
        ..Default::default()
    }];
    let mut status = RunStatus::MaxOuter;
    for _ in 1..opts.max_outer {
        let step = position_subproblem(scenario, &bf.beamformer, &layout, &opts.solver)?;
        let mut diag = IterationDiagnostics {
            position_iterations: step.solver_iterations,
            step_accepted: step.accepted,
            step_norm: step_norm(&layout, &step.layout),
            note: step.note.clone(),
            ..Default::default()
        };
        let prev = *trace.last().unwrap();
        let mut next = prev;
        if step.accepted {
            let cand = beamforming_sdp(scenario, &step.layout, &opts.solver)?;
            diag.beamforming_iterations = cand.solver_iterations;
            diag.max_rank_ratio = cand.rank_ratios.iter().copied().fold(0.0, f64::max);
            diag.randomized = cand.randomized;
            // The previous precoder stays feasible at the new layout, so the
            // re-solve can only gain; keep the old pair if numerics say otherwise.
            let kept = channel::sensing_snr(&bf.beamformer, &step.layout, scenario);
            if cand.feasible() && cand.snr >= kept {
                next = cand.snr;
                bf = cand;
            } else {
                next = kept;
                diag.note = Some("re-solve did not improve; kept previous precoder".into());
            }
            layout = step.layout;
        }
        trace.push(next);
        layouts.push(layout.clone());
        diagnostics.push(diag);
        if converged(prev, next, opts.xi) {
            status = RunStatus::Converged;
            break;
        }
    }
    Ok(SolveReport {
        trace,
        layouts,
        beamformer: bf.beamformer,
        covariances: bf.covariances,
        layout,
        status,
        diagnostics,
        wall_time: start.elapsed(),
    })
}
