//! Cone algebra for the product of a nonnegative orthant and real symmetric
//! PSD blocks. PSD blocks are stored in full column-major form, so the plain
//! dot product of two stacked vectors is the trace inner product.

use nalgebra::{DMatrix, SymmetricEigen};

#[derive(Debug, Clone)]
pub(crate) struct Cones {
    pub nonneg: usize,
    pub psd: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
}

#[derive(Debug)]
pub(crate) struct ScalingFailure;

/// Nesterov-Todd scaling point `W` with `W z = W^{-T} s = lambda`.
#[derive(Debug, Clone)]
pub(crate) struct Scaling {
    /// Orthant part: `w = sqrt(s / z)`.
    w: Vec<f64>,
    /// PSD part: `W(Z) = R^T Z R`, `W^{-T}(S) = R^{-1} S R^{-T}`.
    r: Vec<DMatrix<f64>>,
    rinv: Vec<DMatrix<f64>>,
    /// Scaled point, diagonal in every PSD block.
    pub lambda: Vec<f64>,
}

impl Cones {
    pub fn new(nonneg: usize, psd: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(psd.len());
        let mut at = nonneg;
        for &d in &psd {
            offsets.push(at);
            at += d * d;
        }
        Self { nonneg, psd, offsets, total: at }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        let d = self.psd[b];
        self.offsets[b]..self.offsets[b] + d * d
    }

    /// Barrier degree: number of orthant entries plus the sum of block orders.
    pub fn degree(&self) -> usize {
        self.nonneg + self.psd.iter().sum::<usize>()
    }

    pub fn identity(&self) -> Vec<f64> {
        let mut e = vec![0.0; self.total];
        e[..self.nonneg].iter_mut().for_each(|v| *v = 1.0);
        for (b, &d) in self.psd.iter().enumerate() {
            let off = self.offsets[b];
            for i in 0..d {
                e[off + i * d + i] = 1.0;
            }
        }
        e
    }

    fn block<'a>(&self, v: &'a [f64], b: usize) -> DMatrix<f64> {
        let d = self.psd[b];
        DMatrix::from_column_slice(d, d, &v[self.block_range(b)])
    }

    fn put_block(&self, out: &mut [f64], b: usize, m: &DMatrix<f64>) {
        out[self.block_range(b)].copy_from_slice(m.as_slice());
    }

    /// Smallest "eigenvalue" of `v` with respect to the cone.
    pub fn min_eig(&self, v: &[f64]) -> f64 {
        let mut m = v[..self.nonneg].iter().copied().fold(f64::INFINITY, f64::min);
        for b in 0..self.psd.len() {
            let blk = symmetrize(self.block(v, b));
            let e = SymmetricEigen::new(blk);
            m = m.min(e.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min));
        }
        m
    }

    /// Computes the NT scaling for strictly interior `s`, `z`.
    pub fn scaling(&self, s: &[f64], z: &[f64]) -> Result<Scaling, ScalingFailure> {
        let mut w = Vec::with_capacity(self.nonneg);
        let mut lambda = vec![0.0; self.total];
        for i in 0..self.nonneg {
            if !(s[i] > 0.0 && z[i] > 0.0) {
                return Err(ScalingFailure);
            }
            w.push((s[i] / z[i]).sqrt());
            lambda[i] = (s[i] * z[i]).sqrt();
        }
        let mut r = Vec::with_capacity(self.psd.len());
        let mut rinv = Vec::with_capacity(self.psd.len());
        for (b, &d) in self.psd.iter().enumerate() {
            let sb = symmetrize(self.block(s, b));
            let zb = symmetrize(self.block(z, b));
            let ls = sb.cholesky().ok_or(ScalingFailure)?.unpack();
            let lz = zb.cholesky().ok_or(ScalingFailure)?.unpack();
            let svd = (lz.transpose() * &ls).svd(true, true);
            let u = svd.u.ok_or(ScalingFailure)?;
            let vt = svd.v_t.ok_or(ScalingFailure)?;
            let sv = svd.singular_values;
            if sv.iter().any(|&x| !(x > 0.0)) {
                return Err(ScalingFailure);
            }
            // R = L_s V diag(sv)^{-1/2},  R^{-1} = diag(sv)^{-1/2} U^T L_z^T.
            let mut rb = ls * vt.transpose();
            let mut ri = u.transpose() * lz.transpose();
            for k in 0..d {
                let f = 1.0 / sv[k].sqrt();
                rb.column_mut(k).scale_mut(f);
                ri.row_mut(k).scale_mut(f);
            }
            let off = self.offsets[b];
            for k in 0..d {
                lambda[off + k * d + k] = sv[k];
            }
            r.push(rb);
            rinv.push(ri);
        }
        Ok(Scaling { w, r, rinv, lambda })
    }

    /// `W v`.
    pub fn apply_w(&self, sc: &Scaling, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.total];
        for i in 0..self.nonneg {
            out[i] = sc.w[i] * v[i];
        }
        for b in 0..self.psd.len() {
            let m = sc.r[b].transpose() * self.block(v, b) * &sc.r[b];
            self.put_block(&mut out, b, &m);
        }
        out
    }

    /// `W^T v`.
    pub fn apply_wt(&self, sc: &Scaling, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.total];
        for i in 0..self.nonneg {
            out[i] = sc.w[i] * v[i];
        }
        for b in 0..self.psd.len() {
            let m = &sc.r[b] * self.block(v, b) * sc.r[b].transpose();
            self.put_block(&mut out, b, &m);
        }
        out
    }

    /// `W^{-T} v`.
    pub fn apply_winv_t(&self, sc: &Scaling, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.total];
        for i in 0..self.nonneg {
            out[i] = v[i] / sc.w[i];
        }
        for b in 0..self.psd.len() {
            let m = &sc.rinv[b] * self.block(v, b) * sc.rinv[b].transpose();
            self.put_block(&mut out, b, &m);
        }
        out
    }

    /// `W^{-1} v`.
    pub fn apply_winv(&self, sc: &Scaling, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.total];
        for i in 0..self.nonneg {
            out[i] = v[i] / sc.w[i];
        }
        for b in 0..self.psd.len() {
            let m = sc.rinv[b].transpose() * self.block(v, b) * &sc.rinv[b];
            self.put_block(&mut out, b, &m);
        }
        out
    }

    /// Orthant weights `1/w_i^2` of `(W^T W)^{-1}`.
    pub fn orthant_inv_weights(&self, sc: &Scaling) -> Vec<f64> {
        sc.w.iter().map(|w| 1.0 / (w * w)).collect()
    }

    /// `R^{-1}` of block `b`, so that `W^{-T}(G) = R^{-1} G R^{-T}`.
    pub fn block_rinv<'a>(&self, sc: &'a Scaling, b: usize) -> &'a DMatrix<f64> {
        &sc.rinv[b]
    }

    /// Jordan product `u o v`.
    pub fn circ(&self, u: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.total];
        for i in 0..self.nonneg {
            out[i] = u[i] * v[i];
        }
        for b in 0..self.psd.len() {
            let ub = self.block(u, b);
            let vb = self.block(v, b);
            let m = (&ub * &vb + &vb * &ub) * 0.5;
            self.put_block(&mut out, b, &m);
        }
        out
    }

    /// Solves `lambda o x = v` for `x`, with `lambda` diagonal in each PSD block.
    pub fn circ_solve(&self, lambda: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.total];
        for i in 0..self.nonneg {
            out[i] = v[i] / lambda[i];
        }
        for (b, &d) in self.psd.iter().enumerate() {
            let off = self.offsets[b];
            for j in 0..d {
                for i in 0..d {
                    let li = lambda[off + i * d + i];
                    let lj = lambda[off + j * d + j];
                    out[off + j * d + i] = 2.0 * v[off + j * d + i] / (li + lj);
                }
            }
        }
        out
    }

    /// Largest `alpha` with `lambda + alpha * dv` in the cone (infinity if unbounded).
    pub fn max_step_scaled(&self, lambda: &[f64], dv: &[f64]) -> f64 {
        let mut worst = 0.0f64; // max of -dv/lambda over "eigen" directions
        for i in 0..self.nonneg {
            worst = worst.max(-dv[i] / lambda[i]);
        }
        for (b, &d) in self.psd.iter().enumerate() {
            let off = self.offsets[b];
            let mut m = self.block(dv, b);
            for j in 0..d {
                let lj = lambda[off + j * d + j].sqrt();
                for i in 0..d {
                    let li = lambda[off + i * d + i].sqrt();
                    m[(i, j)] = -m[(i, j)] / (li * lj);
                }
            }
            let e = SymmetricEigen::new(symmetrize(m));
            worst = worst.max(e.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        if worst <= 0.0 {
            f64::INFINITY
        } else {
            1.0 / worst
        }
    }

    /// Symmetrises every PSD block in place.
    pub fn symmetrize_in_place(&self, v: &mut [f64]) {
        for (b, &d) in self.psd.iter().enumerate() {
            let off = self.offsets[b];
            for j in 0..d {
                for i in 0..j {
                    let a = 0.5 * (v[off + j * d + i] + v[off + i * d + j]);
                    v[off + j * d + i] = a;
                    v[off + i * d + j] = a;
                }
            }
        }
    }
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_maps_s_and_z_to_the_same_point() {
        let cones = Cones::new(2, vec![3]);
        let s = vec![2.0, 0.5, 4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0];
        let z = vec![1.0, 2.0, 1.0, 0.2, 0.1, 0.2, 2.0, 0.3, 0.1, 0.3, 1.5];
        let sc = cones.scaling(&s, &z).unwrap();
        let wz = cones.apply_w(&sc, &z);
        let ws = cones.apply_winv_t(&sc, &s);
        for i in 0..cones.len() {
            assert!((wz[i] - sc.lambda[i]).abs() < 1e-12, "{i}: {} vs {}", wz[i], sc.lambda[i]);
            assert!((ws[i] - sc.lambda[i]).abs() < 1e-12);
        }
        // W^{-1} W = I and W^T is the adjoint of W.
        let back = cones.apply_winv(&sc, &wz);
        for i in 0..cones.len() {
            assert!((back[i] - z[i]).abs() < 1e-12);
        }
        let lhs: f64 = cones.apply_w(&sc, &s).iter().zip(&z).map(|(a, b)| a * b).sum();
        let rhs: f64 = s.iter().zip(cones.apply_wt(&sc, &z)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn circ_solve_inverts_circ() {
        let cones = Cones::new(1, vec![2]);
        let lambda = vec![2.0, 3.0, 0.0, 0.0, 5.0];
        let v = vec![4.0, 1.0, 2.0, 2.0, -1.0];
        let x = cones.circ_solve(&lambda, &v);
        let back = cones.circ(&lambda, &x);
        for i in 0..5 {
            assert!((back[i] - v[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn step_to_boundary() {
        let cones = Cones::new(1, vec![2]);
        let lambda = vec![1.0, 1.0, 0.0, 0.0, 4.0];
        let dv = vec![-0.5, -2.0, 0.0, 0.0, 0.0];
        assert!((cones.max_step_scaled(&lambda, &dv) - 0.5).abs() < 1e-14);
        let up = vec![1.0, 0.0, 0.0, 0.0, 1.0];
        assert!(cones.max_step_scaled(&lambda, &up).is_infinite());
    }
}
