//! Robust counterpart of the alternating optimisation: ellipsoidal channel
//! errors handled by S-procedure LMIs, angular uncertainty by a grid.

use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::{self, row_quadratic, steering_outer, validate_layout, Beamformer, FaLayout, Scenario, TargetModel};
use crate::conic::{self, AffineExpr, ConvexProgram, HermitianLmi, MatVar, SolveOptions, Status};
use crate::numerics::{hermitian_eig, rank1_extract, CMat, CVec, HermitianMatrix};
use crate::perfect_csi::{
    self, channel_jet, converged, enforce_power, f_k_surrogate, g_value, grad_g, lipschitz_delta, purify, rank_ratio, usable, backtrack, AoOptions,
    IterationDiagnostics, PositionFrame, PositionStep, RunStatus, SolveError, SolveReport, SurrogateData,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleGrid {
    /// `(elevation, azimuth)` samples, elevation-major.
    pub points: Vec<(f64, f64)>,
    pub n_elevation: usize,
    pub n_azimuth: usize,
}

fn linspace(center: f64, half: f64, n: usize) -> Vec<f64> {
    if n <= 1 || half == 0.0 {
        return vec![center];
    }
    (0..n).map(|i| center - half + 2.0 * half * i as f64 / (n - 1) as f64).collect()
}

impl AngleGrid {
    pub fn single(elevation: f64, azimuth: f64) -> Self {
        Self { points: vec![(elevation, azimuth)], n_elevation: 1, n_azimuth: 1 }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Uniform grid over the target's angular uncertainty box, endpoints
/// included. A zero half-width collapses that axis to its center.
pub fn angle_grid(target: &TargetModel, n_elevation: usize, n_azimuth: usize) -> AngleGrid {
    let el = linspace(target.elevation, target.elevation_halfwidth, n_elevation.max(1));
    let az = linspace(target.azimuth, target.azimuth_halfwidth, n_azimuth.max(1));
    let points = el.iter().flat_map(|&e| az.iter().map(move |&a| (e, a))).collect();
    AngleGrid { points, n_elevation: el.len(), n_azimuth: az.len() }
}

/// Smallest sensing SNR over the grid.
pub fn worst_grid_snr(w: &Beamformer, layout: &FaLayout, scenario: &Scenario, grid: &AngleGrid) -> f64 {
    grid.points
        .iter()
        .map(|&(e, a)| channel::sensing_snr_at(w, layout, e, a, scenario))
        .fold(f64::INFINITY, f64::min)
}

// ---------------------------------------------------------------------------
// Worst case over the error ellipsoid

fn inv_sqrt(q: &HermitianMatrix) -> CMat {
    let e = hermitian_eig(q);
    let n = q.dim();
    let mut out = CMat::zeros(n, n);
    for i in 0..n {
        let v = e.vectors.column(i);
        out += (&v * v.adjoint()) * Complex64::new(1.0 / e.values[i].max(1e-300).sqrt(), 0.0);
    }
    out
}

/// Minimises `(x + d)^H B (x + d)` over `d^H Q d <= eps` (complex trust-region
/// subproblem). Returns the minimum and a minimiser.
pub fn worst_case_quadratic(b: &HermitianMatrix, x: &CVec, q: &HermitianMatrix, eps: f64) -> (f64, CVec) {
    let base = b.quadratic_form(x);
    let n = x.len();
    if eps <= 0.0 {
        return (base, CVec::zeros(n));
    }
    let s = inv_sqrt(q);
    let bt = HermitianMatrix::symmetrize(s.adjoint() * b.matrix() * &s);
    let lin = s.adjoint() * b.matrix() * x;
    let eig = hermitian_eig(&bt);
    let mu: Vec<f64> = eig.values.clone();
    let c: Vec<Complex64> = (0..n).map(|i| eig.vectors.column(i).dotc(&lin)).collect();
    let cn2: Vec<f64> = c.iter().map(|v| v.norm_sqr()).collect();
    let mu_min = mu.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = mu.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let lo = (-mu_min).max(0.0);
    let phi = |nu: f64| (0..n).map(|i| cn2[i] / (mu[i] + nu).powi(2)).sum::<f64>();
    let coords = |nu: f64| -> Vec<Complex64> {
        (0..n).map(|i| if mu[i] + nu > 0.0 { -c[i] / (mu[i] + nu) } else { Complex64::new(0.0, 0.0) }).collect()
    };
    let degenerate = |i: usize| mu[i] + lo <= 1e-12 * scale;
    let c_scale = cn2.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let mut y: Vec<Complex64>;
    let hard = (0..n).filter(|&i| degenerate(i)).all(|i| cn2[i] <= 1e-24 * c_scale);
    let rest = (0..n).filter(|&i| !degenerate(i)).map(|i| cn2[i] / (mu[i] + lo).powi(2)).sum::<f64>();
    if hard && rest <= eps {
        // Interior solution (lo = 0, B~ >= 0) or the hard case.
        y = (0..n).map(|i| if degenerate(i) { Complex64::new(0.0, 0.0) } else { -c[i] / (mu[i] + lo) }).collect();
        if lo > 0.0 || (0..n).any(|i| degenerate(i) && mu[i] < 0.0) {
            if let Some(i) = (0..n).find(|&i| degenerate(i)) {
                y[i] += Complex64::new((eps - rest).max(0.0).sqrt(), 0.0);
            }
        }
    } else {
        let norm_c = c_scale.sqrt();
        let mut a = lo;
        let mut hi = lo + norm_c / eps.sqrt() + scale;
        while phi(hi) > eps {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (a + hi);
            if mid <= a || mid >= hi {
                break;
            }
            if phi(mid) > eps {
                a = mid;
            } else {
                hi = mid;
            }
        }
        y = coords(hi);
    }
    let e = CVec::from_iterator(n, (0..n).map(|i| y[i]));
    let d = &s * (&eig.vectors * e);
    let value = b.quadratic_form(&(x + &d));
    (value, d)
}

fn as_col(v: &CVec) -> CMat {
    CMat::from_column_slice(v.len(), 1, v.as_slice())
}

fn user_model(scenario: &Scenario, k: usize) -> Result<(HermitianMatrix, f64), SolveError> {
    let n = scenario.geometry.n_t;
    match scenario.csi_errors.get(k) {
        Some(m) => Ok((m.shaping_matrix(n)?, m.radius)),
        None => Ok((HermitianMatrix::identity(n), 0.0)),
    }
}

/// `B_k = w_k w_k^H - Gamma_k sum_{q != k} w_q w_q^H`.
fn sinr_form(w: &Beamformer, k: usize, gamma: f64) -> HermitianMatrix {
    let covs: Vec<HermitianMatrix> = (0..w.w.ncols()).map(|q| w.covariance(q)).collect();
    perfect_csi::sinr_matrix(&covs, k, gamma).scale(-1.0)
}

/// Worst-case robust margin `min_d h B_k h^H - Gamma_k sigma^2` of user `k`.
pub fn robust_margin(w: &Beamformer, layout: &FaLayout, scenario: &Scenario, k: usize) -> Result<f64, SolveError> {
    let (q, eps) = user_model(scenario, k)?;
    let gamma = scenario.sinr_thresholds[k];
    let x = scenario.channel(layout, k).map(|v| v.conj());
    let (v, _) = worst_case_quadratic(&sinr_form(w, k, gamma), &x, &q, eps);
    Ok(v - gamma * scenario.noise_power)
}

/// Smallest SINR of user `k` over its error set, by bisection on the level.
pub fn worst_case_sinr(w: &Beamformer, layout: &FaLayout, scenario: &Scenario, k: usize) -> Result<f64, SolveError> {
    let (q, eps) = user_model(scenario, k)?;
    let x = scenario.channel(layout, k).map(|v| v.conj());
    let noise = scenario.noise_power;
    let holds = |g: f64| worst_case_quadratic(&sinr_form(w, k, g), &x, &q, eps).0 >= g * noise;
    let mut hi = channel::user_sinr(w, layout, k, scenario);
    let mut lo = 0.0;
    if holds(hi) {
        return Ok(hi);
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if holds(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Random error `d` (in column form, added to `conj(h)`) inside or on the
/// boundary of `d^H Q d <= eps`.
pub fn sample_error<R: Rng>(q: &HermitianMatrix, eps: f64, boundary: bool, rng: &mut R) -> CVec {
    let n = q.dim();
    let g = CVec::from_iterator(n, (0..n).map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))));
    let norm = g.norm().max(f64::MIN_POSITIVE);
    let r = if boundary { 1.0 } else { rng.random::<f64>().powf(1.0 / (2 * n) as f64) };
    let u = g * Complex64::new(r * eps.max(0.0).sqrt() / norm, 0.0);
    inv_sqrt(q) * u
}

/// Smallest SINR of user `k` over `draws` sampled channel errors, half of them
/// on the boundary of the error set.
pub fn monte_carlo_worst_sinr(w: &Beamformer, layout: &FaLayout, scenario: &Scenario, k: usize, draws: usize, seed: u64) -> Result<f64, SolveError> {
    let (q, eps) = user_model(scenario, k)?;
    let h = scenario.channel(layout, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = channel::sinr_with_channel(w, &h, k, scenario.noise_power);
    for i in 0..draws {
        let d = sample_error(&q, eps, i % 2 == 0, &mut rng);
        let ht = &h + d.map(|v| v.conj());
        worst = worst.min(channel::sinr_with_channel(w, &ht, k, scenario.noise_power));
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Beamforming

#[derive(Debug, Clone)]
pub struct RobustIterate {
    pub status: Status,
    pub covariances: Vec<HermitianMatrix>,
    /// Relaxation value of the epigraph variable (worst-grid sensing SNR).
    pub z: f64,
    /// S-procedure multipliers of the beamforming LMIs.
    pub nu: Vec<f64>,
    pub beamformer: Beamformer,
    /// Worst-grid sensing SNR of `beamformer`.
    pub snr: f64,
    pub rank_ratios: Vec<f64>,
    pub randomized: bool,
    pub solver_iterations: usize,
}

impl RobustIterate {
    pub fn feasible(&self) -> bool {
        self.status == Status::Optimal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustOptions {
    pub ao: AoOptions,
    /// Grid points per angular axis.
    pub grid_n: usize,
    pub draws: usize,
    pub seed: u64,
}

impl Default for RobustOptions {
    fn default() -> Self {
        Self { ao: AoOptions::default(), grid_n: 5, draws: 200, seed: 0 }
    }
}

/// Column scale and normalisation used for a user's LMI: `s = |h|`,
/// `kappa` brings the entries to order one.
fn lmi_scales(x: &CVec, p: f64, gn: f64) -> (f64, f64) {
    let s = x.norm();
    let s = if s > 0.0 { s } else { 1.0 };
    (s, (p * s * s).max(gn))
}

pub fn robust_beamforming_sdp(
    scenario: &Scenario,
    layout: &FaLayout,
    grid: &AngleGrid,
    opts: &RobustOptions,
) -> Result<RobustIterate, SolveError> {
    let n = scenario.geometry.n_t;
    let kk = scenario.n_users();
    if layout.len() != n {
        return Err(SolveError::Invalid(format!("layout has {} antennas, scenario {}", layout.len(), n)));
    }
    let failed = |status: Status, iterations: usize| RobustIterate {
        status,
        covariances: vec![HermitianMatrix::zeros(n); kk],
        z: 0.0,
        nu: vec![0.0; kk],
        beamformer: Beamformer::zeros(n, kk),
        snr: 0.0,
        rank_ratios: vec![0.0; kk],
        randomized: false,
        solver_iterations: iterations,
    };
    let pmax = scenario.p_max;
    if !(pmax > 0.0) {
        return Ok(failed(Status::Infeasible, 0));
    }
    let amats: Vec<HermitianMatrix> = grid.points.iter().map(|&(e, a)| steering_outer(&scenario.steering(layout, e, a))).collect();

    let mut prog = ConvexProgram::new();
    let tvars: Vec<MatVar> = (0..kk).map(|k| prog.add_psd(&format!("T{k}"), n)).collect();
    let z = prog.add_var("z", 1);
    prog.maximize(z.expr(0))?;
    for a in &amats {
        let mut row = z.expr(0).scaled(-1.0);
        for t in &tvars {
            row = row.plus(&t.trace_with(a.matrix()));
        }
        prog.ge(row)?;
    }
    let mut power = AffineExpr::constant(1.0);
    for t in &tvars {
        power = power.plus(&t.trace_with(&CMat::identity(n, n)).scaled(-1.0));
    }
    prog.ge(power)?;

    let noise = scenario.noise_power;
    let mut nus = Vec::with_capacity(kk);
    let mut models = Vec::with_capacity(kk);
    for k in 0..kk {
        let gamma = scenario.sinr_thresholds[k];
        let gn = gamma * noise;
        let (q, eps) = user_model(scenario, k)?;
        let x = scenario.channel(layout, k).map(|v| v.conj());
        let coef = |qi: usize| if qi == k { 1.0 } else { -gamma };
        if eps <= 0.0 {
            let hk = steering_outer(&scenario.channel(layout, k));
            let scale = pmax / gn;
            let mut row = AffineExpr::constant(-1.0);
            for (qi, t) in tvars.iter().enumerate() {
                row = row.plus(&t.trace_with(hk.matrix()).scaled(coef(qi) * scale));
            }
            prog.ge(row)?;
            nus.push(None);
        } else {
            let (s, kappa) = lmi_scales(&x, pmax, gn);
            let nu = prog.add_var(&format!("nu{k}"), 1);
            prog.ge(nu.expr(0))?;
            let mut lmi = HermitianLmi::new(n + 1);
            for (qi, t) in tvars.iter().enumerate() {
                let c = coef(qi) * pmax / kappa;
                for b in 0..t.len() {
                    let e = t.basis(b);
                    let coord = t.coord(b);
                    lmi.add_term(coord, 0, 0, &(&e * Complex64::new(c * s * s, 0.0)));
                    lmi.add_term(coord, 0, n, &as_col(&(&e * &x * Complex64::new(c * s, 0.0))));
                    let corner = (x.adjoint() * &e * &x)[(0, 0)].re * c;
                    lmi.add_term(coord, n, n, &CMat::from_element(1, 1, Complex64::new(corner, 0.0)));
                }
            }
            lmi.add_term(nu.at(0), 0, 0, q.matrix());
            lmi.add_term(nu.at(0), n, n, &CMat::from_element(1, 1, Complex64::new(-eps / (s * s), 0.0)));
            lmi.add_constant(n, n, &CMat::from_element(1, 1, Complex64::new(-gn / kappa, 0.0)));
            prog.lmi(lmi)?;
            nus.push(Some((nu, kappa / (s * s))));
        }
        models.push((q, eps));
    }

    let sol = conic::solve(&prog, &opts.ao.solver);
    match sol.status {
        Status::Optimal => {}
        Status::MaxIter if prog.max_violation(&sol.values) <= 1e-6 && sol.gap <= 1e-5 => {}
        other => return Ok(failed(other, sol.iterations)),
    }
    let mut covs: Vec<HermitianMatrix> = tvars.iter().map(|t| sol.matrix(*t)).collect();
    if models.iter().all(|(_, eps)| *eps <= 0.0) {
        // Every constraint is linear in the covariances; reduce ranks.
        let mut funcs: Vec<Vec<HermitianMatrix>> = amats.iter().map(|a| vec![a.clone(); kk]).collect();
        for k in 0..kk {
            let hk = steering_outer(&scenario.channel(layout, k));
            let gamma = scenario.sinr_thresholds[k];
            funcs.push((0..kk).map(|q| if q == k { hk.clone() } else { hk.scale(-gamma) }).collect());
        }
        funcs.push(vec![HermitianMatrix::identity(n); kk]);
        covs = purify(&covs, &funcs);
    }
    let covariances: Vec<HermitianMatrix> = covs.iter().map(|t| t.scale(pmax)).collect();
    let rank_ratios: Vec<f64> = covariances.iter().map(rank_ratio).collect();
    let nu = nus
        .iter()
        .map(|v| v.map_or(0.0, |(var, unscale)| sol.scalar(var) * unscale))
        .collect();
    let rand = gaussian_randomization(&covariances, scenario, layout, grid, opts.draws, opts.seed);
    let mut beamformer = rand.beamformer;
    enforce_power(&mut beamformer, pmax);
    let snr = worst_grid_snr(&beamformer, layout, scenario, grid);
    Ok(RobustIterate {
        status: Status::Optimal,
        covariances,
        z: scenario.eta() * pmax * sol.scalar(z),
        nu,
        beamformer,
        snr,
        rank_ratios,
        randomized: rand.from_draw,
        solver_iterations: sol.iterations,
    })
}

#[derive(Debug, Clone)]
pub struct Randomization {
    pub beamformer: Beamformer,
    /// At least one candidate passed the robust SINR check.
    pub feasible: bool,
    /// The returned precoder came from a random draw rather than the
    /// principal eigenvectors.
    pub from_draw: bool,
    pub passing_draws: usize,
}

/// Robust SINR check of every user; relative slack `rel` on the threshold.
fn robust_ok(w: &Beamformer, layout: &FaLayout, scenario: &Scenario, rel: f64) -> bool {
    (0..scenario.n_users()).all(|k| {
        robust_margin(w, layout, scenario, k).is_ok_and(|m| m >= -rel * scenario.sinr_thresholds[k] * scenario.noise_power)
    })
}

/// Rounds SDR covariances to a precoder. Draws `w_k ~ CN(0, T_k)` scaled to
/// `Tr(T_k)`, keeps draws that meet every robust SINR constraint (scaled up
/// to the power budget), and returns the best worst-grid sensing SNR. The
/// principal-eigenvector precoder is the first candidate and the fallback.
pub fn gaussian_randomization(
    covs: &[HermitianMatrix],
    scenario: &Scenario,
    layout: &FaLayout,
    grid: &AngleGrid,
    n_draws: usize,
    seed: u64,
) -> Randomization {
    let pmax = scenario.p_max;
    let fallback = Beamformer::from_columns(&covs.iter().map(|t| rank1_extract(t).vector).collect::<Vec<_>>());
    let finish = |mut w: Beamformer| {
        let p = w.power();
        if p > 0.0 && p < pmax {
            w.w *= Complex64::new((pmax / p).sqrt(), 0.0);
        }
        w
    };
    let score = |w: &Beamformer| worst_grid_snr(w, layout, scenario, grid);
    let mut best: Option<(f64, Beamformer, bool)> = None;
    let mut passing = 0;
    // The eigenvector candidate is allowed the solver's relative slack.
    if robust_ok(&fallback, layout, scenario, 1e-5) {
        let w = finish(fallback.clone());
        let w = if robust_ok(&w, layout, scenario, 1e-5) { w } else { fallback.clone() };
        best = Some((score(&w), w, false));
        passing += 1;
    }
    if n_draws > 0 {
        let roots: Vec<CMat> = covs
            .iter()
            .map(|t| {
                let e = hermitian_eig(t);
                let n = t.dim();
                let mut r = CMat::zeros(n, n);
                for i in 0..n {
                    let v = e.vectors.column(i);
                    r.set_column(i, &(v * Complex64::new(e.values[i].max(0.0).sqrt(), 0.0)));
                }
                r
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..n_draws {
            let cols: Vec<CVec> = roots
                .iter()
                .zip(covs)
                .map(|(r, t)| {
                    let n = t.dim();
                    let g = CVec::from_iterator(
                        n,
                        (0..n).map(|_| Complex64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)) * std::f64::consts::FRAC_1_SQRT_2),
                    );
                    let xi = r * g;
                    let nrm = xi.norm();
                    if nrm > 0.0 {
                        xi * Complex64::new(t.trace().max(0.0).sqrt() / nrm, 0.0)
                    } else {
                        xi
                    }
                })
                .collect();
            let cand = Beamformer::from_columns(&cols);
            if !robust_ok(&cand, layout, scenario, 0.0) {
                continue;
            }
            passing += 1;
            let cand = finish(cand);
            let v = score(&cand);
            if best.as_ref().is_none_or(|(b, _, _)| v > *b * (1.0 + 1e-12)) {
                best = Some((v, cand, true));
            }
        }
    }
    match best {
        Some((_, w, from_draw)) => Randomization { beamformer: w, feasible: true, from_draw, passing_draws: passing },
        None => Randomization { beamformer: fallback, feasible: false, from_draw: false, passing_draws: 0 },
    }
}

// ---------------------------------------------------------------------------
// Positioning

/// Sensing gain `a M a^H` at one direction with its gradient and the
/// curvature constant of [`lipschitz_delta`].
pub fn u_grad_and_bound(layout: &FaLayout, elevation: f64, azimuth: f64, m: &HermitianMatrix, wavelength: f64) -> SurrogateData {
    SurrogateData {
        center: layout.coords.clone(),
        value: g_value(layout, elevation, azimuth, m, wavelength),
        gradient: grad_g(layout, elevation, azimuth, m, wavelength),
        lipschitz: lipschitz_delta(m, layout.len(), wavelength),
    }
}

/// Linearisation data of the error cross term
/// `w_k(t) = 2 Re{d^H B h(t)^H}` with `B = -R_k`.
#[derive(Debug, Clone)]
pub struct WkLinearization {
    /// `B conj(h)` at the expansion point.
    pub center: CVec,
    /// Per antenna, the columns multiplying its x and y displacement.
    pub columns: Vec<[CVec; 2]>,
    /// Curvature constant for any error in the set.
    pub chi: f64,
}

impl WkLinearization {
    /// Affine map `B conj(h)(t_c) + sum_n (s_n dx_n + p_n dy_n)`.
    pub fn map(&self, displacement: &[f64]) -> CVec {
        let mut v = self.center.clone();
        for (n, [s, p]) in self.columns.iter().enumerate() {
            v += s * Complex64::new(displacement[2 * n], 0.0) + p * Complex64::new(displacement[2 * n + 1], 0.0);
        }
        v
    }

    /// Gradient of `w_k` for a given error `d` (column form).
    pub fn gradient(&self, d: &CVec) -> Vec<f64> {
        self.columns
            .iter()
            .flat_map(|[s, p]| [2.0 * d.dotc(s).re, 2.0 * d.dotc(p).re])
            .collect()
    }
}

/// `w_k` for error `d` at `layout`.
pub fn w_k_value(layout: &FaLayout, scenario: &Scenario, k: usize, r: &HermitianMatrix, d: &CVec) -> f64 {
    let x = scenario.channel(layout, k).map(|v| v.conj());
    let bx = r.matrix() * x * Complex64::new(-1.0, 0.0);
    2.0 * d.dotc(&bx).re
}

pub fn chi_closed_form(r: &HermitianMatrix, n_t: usize, eps: f64, gain_sum: f64, wavelength: f64) -> f64 {
    let k = 2.0 * std::f64::consts::PI / wavelength;
    let varpi = r.matrix().iter().map(|v| v.norm()).fold(0.0, f64::max);
    4.0 * n_t as f64 * k * k * eps.max(0.0).sqrt() * varpi * gain_sum
}

pub fn chi_bound(r: &HermitianMatrix, q: &HermitianMatrix, eps: f64, gain_sum: f64, wavelength: f64) -> f64 {
    let k = 2.0 * std::f64::consts::PI / wavelength;
    let lmin = hermitian_eig(q).min().max(f64::MIN_POSITIVE);
    let col = (0..r.dim()).map(|n| r.matrix().column(n).norm()).fold(0.0, f64::max);
    2.0 * k * k * (eps.max(0.0) / lmin).sqrt() * col * gain_sum
}

pub fn w_k_linearization(layout: &FaLayout, scenario: &Scenario, k: usize, r: &HermitianMatrix) -> Result<WkLinearization, SolveError> {
    let (q, eps) = user_model(scenario, k)?;
    let paths = &scenario.users[k];
    let wl = scenario.geometry.wavelength;
    let jet = channel_jet(layout, paths, wl);
    let b = r.matrix() * Complex64::new(-1.0, 0.0);
    let center = &b * jet.h.map(|v| v.conj());
    let columns = (0..layout.len())
        .map(|n| {
            let col = b.column(n).into_owned();
            [&col * jet.d[0][n].conj(), &col * jet.d[1][n].conj()]
        })
        .collect();
    let chi = if eps > 0.0 {
        chi_closed_form(r, layout.len(), eps, paths.gain_sum(), wl).max(chi_bound(r, &q, eps, paths.gain_sum(), wl))
    } else {
        0.0
    };
    Ok(WkLinearization { center, columns, chi })
}

#[derive(Debug, Clone)]
pub struct RobustPositionStep {
    pub step: PositionStep,
    /// Worst-grid sensing gain `min_i a_i M a_i^H` before and after.
    pub z_before: f64,
    pub z_after: f64,
}

const POSITION_CUSHION: f64 = 1e-8;
const RECHECK_TOL: f64 = 1e-7;

/// One robust SCA step on the antenna positions for a fixed precoder.
pub fn position_subproblem_robust(
    scenario: &Scenario,
    w: &Beamformer,
    layout: &FaLayout,
    grid: &AngleGrid,
    opts: &SolveOptions,
) -> Result<RobustPositionStep, SolveError> {
    let n = scenario.geometry.n_t;
    let kk = scenario.n_users();
    if layout.len() != n || w.w.nrows() != n || w.w.ncols() != kk {
        return Err(SolveError::Invalid("precoder and layout dimensions disagree with the scenario".into()));
    }
    let wl = scenario.geometry.wavelength;
    let m = w.gram();
    let sur: Vec<SurrogateData> = grid.points.iter().map(|&(e, a)| u_grad_and_bound(layout, e, a, &m, wl)).collect();
    let worst = |t: &FaLayout| grid.points.iter().map(|&(e, a)| g_value(t, e, a, &m, wl)).fold(f64::INFINITY, f64::min);
    let z0 = worst(layout);
    let unchanged = |status: Status, it: usize, note: String| RobustPositionStep {
        step: PositionStep {
            layout: layout.clone(),
            accepted: false,
            status,
            g_before: z0,
            g_after: z0,
            solver_iterations: it,
            note: Some(note),
        },
        z_before: z0,
        z_after: z0,
    };
    if !(z0 > 0.0) {
        return Ok(unchanged(Status::Optimal, 0, "zero sensing gain".into()));
    }

    let mut prog = ConvexProgram::new();
    let frame = PositionFrame::new(&mut prog, scenario, layout)?;
    let zv = prog.add_var("z", 1);
    prog.maximize(zv.expr(0))?;
    for s in &sur {
        let grad: Vec<f64> = s.gradient.iter().map(|g| g / z0).collect();
        prog.ge(frame.quadratic_model(s.value / z0, &grad, -s.lipschitz / z0).plus(&zv.expr(0).scaled(-1.0)))?;
    }

    let covs: Vec<HermitianMatrix> = (0..kk).map(|k| w.covariance(k)).collect();
    let mut allowances = Vec::with_capacity(kk);
    for k in 0..kk {
        let gamma = scenario.sinr_thresholds[k];
        let gn = gamma * scenario.noise_power;
        let r = perfect_csi::sinr_matrix(&covs, k, gamma);
        let (q, eps) = user_model(scenario, k)?;
        let fs = f_k_surrogate(layout, scenario, k, &r);
        let lin = w_k_linearization(layout, scenario, k, &r)?;
        // Current shortfall, kept as an allowance so the expansion point
        // stays feasible.
        let margin = robust_margin(w, layout, scenario, k)?;
        let omega = (-margin).max(0.0);
        let x = scenario.channel(layout, k).map(|v| v.conj());
        let (s, kappa) = lmi_scales(&x, r.frobenius_norm(), gn);
        // Loss tolerated at solver accuracy; the precoder re-solve restores
        // robust feasibility before a step is kept.
        allowances.push((omega, RECHECK_TOL * kappa));
        let curv = (fs.lipschitz + lin.chi) / kappa;
        let dgrad: Vec<f64> = fs.gradient.iter().map(|g| -g / kappa).collect();
        let beta = prog.add_var(&format!("beta{k}"), 1);
        // beta <= c_k(t).
        prog.ge(frame.quadratic_model(-fs.value / kappa, &dgrad, -curv).plus(&beta.expr(0).scaled(-1.0)))?;
        // The cushion absorbs solver error so accepted steps never lose margin.
        let corner = (omega - gn) / kappa - POSITION_CUSHION;
        if eps <= 0.0 {
            prog.ge(beta.expr(0).shift(corner))?;
            continue;
        }
        let lam = prog.add_var(&format!("lambda{k}"), 1);
        prog.ge(lam.expr(0))?;
        let b = r.matrix() * Complex64::new(-1.0, 0.0);
        let mut lmi = HermitianLmi::new(n + 1);
        lmi.add_constant(0, 0, &(&b * Complex64::new(s * s / kappa, 0.0)));
        lmi.add_constant(0, n, &as_col(&(&lin.center * Complex64::new(s / kappa, 0.0))));
        for (i, [sx, py]) in lin.columns.iter().enumerate() {
            lmi.add_term(frame.d.at(2 * i), 0, n, &as_col(&(sx * Complex64::new(s * wl / kappa, 0.0))));
            lmi.add_term(frame.d.at(2 * i + 1), 0, n, &as_col(&(py * Complex64::new(s * wl / kappa, 0.0))));
        }
        lmi.add_term(lam.at(0), 0, 0, q.matrix());
        lmi.add_term(lam.at(0), n, n, &CMat::from_element(1, 1, Complex64::new(-eps / (s * s), 0.0)));
        lmi.add_term(beta.at(0), n, n, &CMat::from_element(1, 1, Complex64::new(1.0, 0.0)));
        lmi.add_constant(n, n, &CMat::from_element(1, 1, Complex64::new(corner, 0.0)));
        prog.lmi(lmi)?;
    }

    let sol = conic::solve(&prog, opts);
    if !usable(&prog, &sol) {
        return Ok(unchanged(sol.status, sol.iterations, format!("position program status {:?}", sol.status)));
    }
    let full = frame.layout(&sol, layout, scenario);
    let checks = |t: &FaLayout| -> Result<f64, String> {
        let bad = validate_layout(t, &scenario.geometry);
        if !bad.is_empty() {
            return Err(format!("layout check failed: {bad:?}"));
        }
        for (k, &(omega, tol)) in allowances.iter().enumerate() {
            if robust_margin(w, t, scenario, k).map_err(|e| e.to_string())? < -omega - tol {
                return Err(format!("robust SINR recheck failed for user {k}"));
            }
        }
        let z1 = worst(t);
        if z1 < z0 {
            return Err("objective decreased".into());
        }
        Ok(z1)
    };
    let (cand, z1) = match backtrack(layout, &full, checks) {
        Ok(v) => v,
        Err(note) => return Ok(unchanged(sol.status, sol.iterations, note)),
    };
    Ok(RobustPositionStep {
        step: PositionStep {
            layout: cand,
            accepted: true,
            status: sol.status,
            g_before: z0,
            g_after: z1,
            solver_iterations: sol.iterations,
            note: None,
        },
        z_before: z0,
        z_after: z1,
    })
}

/// Robust alternating optimisation from `init`. The trace holds the
/// worst-grid sensing SNR of the current precoder and layout.
pub fn algorithm2(scenario: &Scenario, init: &FaLayout, opts: &RobustOptions) -> Result<SolveReport, SolveError> {
    let start = Instant::now();
    let n = scenario.geometry.n_t;
    let kk = scenario.n_users();
    let bad = validate_layout(init, &scenario.geometry);
    if !bad.is_empty() {
        return Err(SolveError::Invalid(format!("initial layout infeasible: {bad:?}")));
    }
    let grid = angle_grid(&scenario.target, opts.grid_n, opts.grid_n);
    let mut layout = init.clone();
    let mut it = robust_beamforming_sdp(scenario, &layout, &grid, opts)?;
    if !it.feasible() {
        let status = if it.status == Status::Infeasible { RunStatus::Infeasible } else { RunStatus::Failed };
        return Ok(SolveReport::infeasible(init, n, kk, start, status));
    }
    let mut trace = vec![it.snr];
    let mut layouts = vec![layout.clone()];
    let mut diagnostics = vec![IterationDiagnostics {
        beamforming_iterations: it.solver_iterations,
        max_rank_ratio: it.rank_ratios.iter().copied().fold(0.0, f64::max),
        randomized: it.randomized,
        ..Default::default()
    }];
    let mut status = RunStatus::MaxOuter;
    for _ in 1..opts.ao.max_outer {
        let step = position_subproblem_robust(scenario, &it.beamformer, &layout, &grid, &opts.ao.solver)?.step;
        let mut diag = IterationDiagnostics {
            position_iterations: step.solver_iterations,
            step_accepted: step.accepted,
            step_norm: layout.coords.iter().zip(&step.layout.coords).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
            note: step.note.clone(),
            ..Default::default()
        };
        let prev = *trace.last().unwrap();
        let mut next = prev;
        if step.accepted {
            let cand = robust_beamforming_sdp(scenario, &step.layout, &grid, opts)?;
            diag.beamforming_iterations = cand.solver_iterations;
            diag.max_rank_ratio = cand.rank_ratios.iter().copied().fold(0.0, f64::max);
            diag.randomized = cand.randomized;
            let kept = worst_grid_snr(&it.beamformer, &step.layout, scenario, &grid);
            if cand.feasible() && cand.snr >= prev.max(kept) {
                next = cand.snr;
                it = cand;
                layout = step.layout;
            } else if kept >= prev && no_margin_loss(&it.beamformer, &layout, &step.layout, scenario)? {
                next = kept;
                layout = step.layout;
                diag.note = Some("re-solve did not improve; kept previous precoder".into());
            } else {
                diag.step_accepted = false;
                diag.note = Some("re-solve did not improve; step rejected".into());
            }
        }
        trace.push(next);
        layouts.push(layout.clone());
        diagnostics.push(diag);
        if converged(prev, next, opts.ao.xi) {
            status = RunStatus::Converged;
            break;
        }
    }
    Ok(SolveReport {
        trace,
        layouts,
        beamformer: it.beamformer,
        covariances: it.covariances,
        layout,
        status,
        diagnostics,
        wall_time: start.elapsed(),
    })
}

/// True when `w` keeps every user's robust margin at `to` no worse than at
/// `from` (or nonnegative).
fn no_margin_loss(w: &Beamformer, from: &FaLayout, to: &FaLayout, scenario: &Scenario) -> Result<bool, SolveError> {
    for k in 0..scenario.n_users() {
        let gn = scenario.sinr_thresholds[k] * scenario.noise_power;
        let before = robust_margin(w, from, scenario, k)?.min(0.0);
        if robust_margin(w, to, scenario, k)? < before - 1e-9 * gn {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Worst sensing SNR over an `n x n` validation grid of the uncertainty box.
pub fn validation_snr(w: &Beamformer, layout: &FaLayout, scenario: &Scenario, n: usize) -> f64 {
    worst_grid_snr(w, layout, scenario, &angle_grid(&scenario.target, n, n))
}

/// `h B h^H` convenience used by validators: nominal robust SINR form.
pub fn nominal_form(w: &Beamformer, layout: &FaLayout, scenario: &Scenario, k: usize) -> f64 {
    row_quadratic(&scenario.channel(layout, k), &sinr_form(w, k, scenario.sinr_thresholds[k]))
}
