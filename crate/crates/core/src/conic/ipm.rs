//! Homogeneous self-dual interior-point method with Nesterov-Todd scaling.
//!
//! Canonical form (minimisation, no equality constraints):
//!
//! ```text
//!   primal:  min c'x   s.t.  G x + s = h,  s in K
//!   dual:    max -h'z  s.t.  G'z + c = 0,  z in K
//! ```
//!
//! The embedding variables `tau`, `kappa` let the same iteration converge to
//! either an optimal pair or an infeasibility certificate. Search directions
//! use Mehrotra's predictor-corrector with the NT scaling recomputed from the
//! current iterate at every step.

use nalgebra::{DMatrix, DVector};

use super::cones::{Cones, Scaling};

const STEP_FRACTION: f64 = 0.99;

pub(crate) struct Canonical {
    pub c: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub cones: Cones,
    /// Columns of `G` with a nonzero entry inside each PSD block.
    pub block_cols: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RawStatus {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub(crate) struct RawSolution {
    pub status: RawStatus,
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
    pub pcost: f64,
    pub dcost: f64,
    pub gap: f64,
    pub pres: f64,
    pub dres: f64,
    pub iterations: usize,
}

pub(crate) struct IpmSettings {
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub max_iter: usize,
}

impl Canonical {
    pub fn new(c: DVector<f64>, g: DMatrix<f64>, h: DVector<f64>, cones: Cones) -> Self {
        let block_cols = (0..cones.psd.len())
            .map(|b| {
                let range = cones.block_range(b);
                (0..g.ncols())
                    .filter(|&j| range.clone().any(|i| g[(i, j)] != 0.0))
                    .collect()
            })
            .collect();
        Self { c, g, h, cones, block_cols }
    }

    fn gt_mul(&self, v: &[f64]) -> DVector<f64> {
        self.g.tr_mul(&DVector::from_column_slice(v))
    }

    fn g_mul(&self, x: &DVector<f64>) -> Vec<f64> {
        (&self.g * x).as_slice().to_vec()
    }
}

/// Factorisation of the reduced system `G' (W'W)^{-1} G`.
struct Reduced<'a> {
    prob: &'a Canonical,
    sc: &'a Scaling,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl<'a> Reduced<'a> {
    fn new(prob: &'a Canonical, sc: &'a Scaling) -> Option<Self> {
        let n = prob.g.ncols();
        let cones = &prob.cones;
        let mut hm = DMatrix::<f64>::zeros(n, n);
        if cones.nonneg > 0 {
            let wts = cones.orthant_inv_weights(sc);
            let rows = prob.g.rows(0, cones.nonneg);
            let mut scaled = rows.clone_owned();
            for (i, w) in wts.iter().enumerate() {
                scaled.row_mut(i).scale_mut(*w);
            }
            hm += rows.transpose() * scaled;
        }
        for (b, cols) in prob.block_cols.iter().enumerate() {
            if cols.is_empty() {
                continue;
            }
            let d = cones.psd[b];
            let range = cones.block_range(b);
            let rinv = cones.block_rinv(sc, b);
            let mut stacked = DMatrix::<f64>::zeros(d * d, cols.len());
            for (k, &j) in cols.iter().enumerate() {
                let gj = DMatrix::from_iterator(d, d, range.clone().map(|i| prob.g[(i, j)]));
                let scaled = rinv * gj * rinv.transpose();
                stacked.column_mut(k).copy_from_slice(scaled.as_slice());
            }
            let block = stacked.tr_mul(&stacked);
            for (a, &ja) in cols.iter().enumerate() {
                for (bb, &jb) in cols.iter().enumerate() {
                    hm[(ja, jb)] += block[(a, bb)];
                }
            }
        }
        let scale = (0..n).map(|i| hm[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
        let mut reg = 0.0;
        for _ in 0..8 {
            let mut trial = hm.clone();
            for i in 0..n {
                trial[(i, i)] += reg;
            }
            if let Some(chol) = trial.cholesky() {
                return Some(Self { prob, sc, chol });
            }
            reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
        }
        None
    }

    /// Solves `G'v = p`, `G u - W'W v = q`.
    fn solve(&self, p: &DVector<f64>, q: &[f64]) -> (DVector<f64>, Vec<f64>) {
        let cones = &self.prob.cones;
        let y = cones.apply_winv(self.sc, &cones.apply_winv_t(self.sc, q));
        let rhs = p + self.prob.gt_mul(&y);
        let u = self.chol.solve(&rhs);
        let gu = self.prob.g_mul(&u);
        let diff: Vec<f64> = gu.iter().zip(q).map(|(a, b)| a - b).collect();
        let v = cones.apply_winv(self.sc, &cones.apply_winv_t(self.sc, &diff));
        (u, v)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Certificates of infeasibility are accepted at this relative accuracy even
/// when the optimality tolerance is tighter; they stall around 1e-8.
const INFEAS_TOL: f64 = 1e-7;

pub(crate) fn solve(prob: &Canonical, set: &IpmSettings) -> RawSolution {
    let n = prob.g.ncols();
    let m = prob.cones.len();
    let cones = &prob.cones;

    if m == 0 {
        let unbounded = prob.c.iter().any(|&v| v != 0.0);
        return RawSolution {
            status: if unbounded { RawStatus::DualInfeasible } else { RawStatus::Optimal },
            x: vec![0.0; n],
            s: vec![],
            z: vec![],
            pcost: 0.0,
            dcost: 0.0,
            gap: 0.0,
            pres: 0.0,
            dres: 0.0,
            iterations: 0,
        };
    }

    let resx0 = prob.c.norm().max(1.0);
    let resz0 = prob.h.norm().max(1.0);
    let degree = cones.degree() as f64;
    let e = cones.identity();

    // Starting point from the identity-scaled least-squares problems.
    let gtg = prob.g.tr_mul(&prob.g);
    let gtg_chol = {
        let scale = (0..n).map(|i| gtg[(i, i)]).fold(0.0, f64::max).max(1.0);
        let mut reg = 0.0;
        let mut out = None;
        for _ in 0..8 {
            let mut t = gtg.clone();
            for i in 0..n {
                t[(i, i)] += reg;
            }
            if let Some(c) = t.cholesky() {
                out = Some(c);
                break;
            }
            reg = if reg == 0.0 { 1e-12 * scale } else { reg * 100.0 };
        }
        out
    };
    let Some(gtg_chol) = gtg_chol else {
        return failed(n, m, 0);
    };
    let mut x = gtg_chol.solve(&prob.g.tr_mul(&prob.h));
    let mut s: Vec<f64> = prob.h.iter().zip(prob.g_mul(&x)).map(|(h, gx)| h - gx).collect();
    let mut z: Vec<f64> = {
        let y = gtg_chol.solve(&prob.c);
        prob.g_mul(&y).into_iter().map(|v| -v).collect()
    };
    cones.symmetrize_in_place(&mut s);
    cones.symmetrize_in_place(&mut z);
    for v in [&mut s, &mut z] {
        let shift = -cones.min_eig(v);
        let amount = if shift >= 0.0 { 1.0 + shift } else { 0.0 };
        if amount > 0.0 {
            v.iter_mut().zip(&e).for_each(|(a, b)| *a += amount * b);
        }
    }
    let mut tau = 1.0;
    let mut kappa = 1.0;

    let mut best: Option<(f64, RawSolution)> = None;

    for iter in 0..=set.max_iter {
        let gtz = prob.gt_mul(&z);
        let gx = prob.g_mul(&x);
        let cx = prob.c.dot(&x);
        let hz = dot(prob.h.as_slice(), &z);
        let rx: DVector<f64> = &gtz + &prob.c * tau;
        let rz: Vec<f64> = (0..m).map(|i| s[i] + gx[i] - prob.h[i] * tau).collect();
        let rt = kappa + cx + hz;
        let sz = dot(&s, &z);
        let mu = (sz + tau * kappa) / (degree + 1.0);

        let pcost = cx / tau;
        let dcost = -hz / tau;
        let gap_abs = sz / (tau * tau);
        let gap = gap_abs / pcost.abs().max(1.0);
        let pres = norm(&rz) / tau / resz0;
        let dres = rx.norm() / tau / resx0;

        let snapshot = |status: RawStatus| RawSolution {
            status,
            x: x.iter().map(|v| v / tau).collect(),
            s: s.iter().map(|v| v / tau).collect(),
            z: z.iter().map(|v| v / tau).collect(),
            pcost,
            dcost,
            gap,
            pres,
            dres,
            iterations: iter,
        };

        if pres <= set.feas_tol && dres <= set.feas_tol && gap <= set.gap_tol {
            return snapshot(RawStatus::Optimal);
        }
        if hz < 0.0 {
            let pinf = gtz.norm() / (-hz) / resx0;
            if pinf <= set.feas_tol.max(INFEAS_TOL) {
                let scale = -hz;
                return RawSolution {
                    status: RawStatus::PrimalInfeasible,
                    x: vec![0.0; n],
                    s: vec![0.0; m],
                    z: z.iter().map(|v| v / scale).collect(),
                    pcost: f64::NAN,
                    dcost: f64::INFINITY,
                    gap: f64::NAN,
                    pres,
                    dres,
                    iterations: iter,
                };
            }
        }
        if cx < 0.0 {
            let gxs: Vec<f64> = (0..m).map(|i| gx[i] + s[i]).collect();
            let dinf = norm(&gxs) / (-cx) / resz0;
            if dinf <= set.feas_tol.max(INFEAS_TOL) {
                let scale = -cx;
                return RawSolution {
                    status: RawStatus::DualInfeasible,
                    x: x.iter().map(|v| v / scale).collect(),
                    s: s.iter().map(|v| v / scale).collect(),
                    z: vec![0.0; m],
                    pcost: f64::NEG_INFINITY,
                    dcost: f64::NAN,
                    gap: f64::NAN,
                    pres,
                    dres,
                    iterations: iter,
                };
            }
        }
        log::trace!("conic {iter}: pres {pres:.2e} dres {dres:.2e} gap {gap:.2e} tau {tau:.2e} kappa {kappa:.2e}");
        let merit = pres.max(dres).max(gap);
        if best.as_ref().map_or(true, |(b, _)| merit < *b) {
            best = Some((merit, snapshot(RawStatus::MaxIter)));
        }
        if iter == set.max_iter || tau < 1e-12 * kappa {
            break;
        }

        let Ok(sc) = cones.scaling(&s, &z) else {
            log::debug!("conic: scaling failed at iteration {iter}");
            break;
        };
        let Some(kkt) = Reduced::new(prob, &sc) else {
            log::warn!("conic: reduced system singular at iteration {iter}");
            break;
        };
        let lambda = sc.lambda.clone();
        let lambda_sq = cones.circ(&lambda, &lambda);
        let (x2, z2) = kkt.solve(&(-&prob.c), prob.h.as_slice());
        let denom_base = prob.c.dot(&x2) + dot(prob.h.as_slice(), &z2);

        // Solves the Newton system for complementarity targets (ds, dk) and
        // residual reduction factor eta.
        let newton = |ds: &[f64], dk: f64, eta: f64| {
            let r_c = cones.circ_solve(&lambda, ds);
            let b1: DVector<f64> = &rx * (-eta);
            let wt_rc = cones.apply_wt(&sc, &r_c);
            let b2: Vec<f64> = (0..m).map(|i| -eta * rz[i] - wt_rc[i]).collect();
            let b3 = -eta * rt - dk / tau;
            let (x1, z1) = kkt.solve(&b1, &b2);
            let dtau = (b3 - prob.c.dot(&x1) - dot(prob.h.as_slice(), &z1)) / (denom_base - kappa / tau);
            let dx: DVector<f64> = &x1 + &x2 * dtau;
            let dz: Vec<f64> = (0..m).map(|i| z1[i] + dtau * z2[i]).collect();
            let wdz = cones.apply_w(&sc, &dz);
            let diff: Vec<f64> = (0..m).map(|i| r_c[i] - wdz[i]).collect();
            let mut ds_out = cones.apply_wt(&sc, &diff);
            cones.symmetrize_in_place(&mut ds_out);
            let dkappa = (dk - kappa * dtau) / tau;
            (dx, ds_out, dz, dtau, dkappa)
        };

        let step_len = |ds: &[f64], dz: &[f64], dtau: f64, dkappa: f64| {
            let ds_scaled = cones.apply_winv_t(&sc, ds);
            let dz_scaled = cones.apply_w(&sc, dz);
            let mut a = cones.max_step_scaled(&lambda, &ds_scaled).min(cones.max_step_scaled(&lambda, &dz_scaled));
            if dtau < 0.0 {
                a = a.min(-tau / dtau);
            }
            if dkappa < 0.0 {
                a = a.min(-kappa / dkappa);
            }
            (a, ds_scaled, dz_scaled)
        };

        // Predictor.
        let ds_aff: Vec<f64> = lambda_sq.iter().map(|v| -v).collect();
        let (_, ds_a, dz_a, dtau_a, dkappa_a) = newton(&ds_aff, -tau * kappa, 1.0);
        let (alpha_a, ds_a_sc, dz_a_sc) = step_len(&ds_a, &dz_a, dtau_a, dkappa_a);
        let sigma = (1.0 - alpha_a.min(1.0)).max(0.0).powi(3);

        // Corrector.
        let corr = cones.circ(&ds_a_sc, &dz_a_sc);
        let ds_cc: Vec<f64> = (0..m).map(|i| -lambda_sq[i] + sigma * mu * e[i] - corr[i]).collect();
        let dk_cc = -tau * kappa + sigma * mu - dtau_a * dkappa_a;
        let (dx, ds, dz, dtau, dkappa) = newton(&ds_cc, dk_cc, 1.0 - sigma);
        let (alpha_max, _, _) = step_len(&ds, &dz, dtau, dkappa);
        let alpha = (STEP_FRACTION * alpha_max).min(1.0);

        x += &dx * alpha;
        for i in 0..m {
            s[i] += alpha * ds[i];
            z[i] += alpha * dz[i];
        }
        cones.symmetrize_in_place(&mut s);
        cones.symmetrize_in_place(&mut z);
        tau += alpha * dtau;
        kappa += alpha * dkappa;

        // Keep the embedding well scaled.
        let scale = tau.max(kappa);
        if scale > 1e8 || scale < 1e-8 {
            let f = 1.0 / scale;
            x *= f;
            s.iter_mut().for_each(|v| *v *= f);
            z.iter_mut().for_each(|v| *v *= f);
            tau *= f;
            kappa *= f;
        }
    }

    match best {
        Some((_, sol)) => sol,
        None => failed(n, m, 0),
    }
}

fn failed(n: usize, m: usize, iterations: usize) -> RawSolution {
    RawSolution {
        status: RawStatus::MaxIter,
        x: vec![0.0; n],
        s: vec![0.0; m],
        z: vec![0.0; m],
        pcost: f64::NAN,
        dcost: f64::NAN,
        gap: f64::INFINITY,
        pres: f64::INFINITY,
        dres: f64::INFINITY,
        iterations,
    }
}
