use fluidbeam_core::channel::*;
use fluidbeam_core::numerics::{is_psd, rank1_extract, CMat, CVec, HermitianMatrix};
use fluidbeam_core::perfect_csi::{self, beamforming_sdp, sinr_matrix, subproblem_options, AoOptions, RunStatus};
use fluidbeam_core::robust_csi::*;
use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WL: f64 = 0.06;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn default(seed: u64) -> Scenario {
    sample_scenario(&ScenarioConfig::default(), seed).unwrap()
}

fn random_layout(n: usize, half: f64, rng: &mut ChaCha8Rng) -> FaLayout {
    FaLayout { coords: (0..2 * n).map(|_| rng.random_range(-half..half)).collect() }
}

fn random_psd(n: usize, rank: usize, rng: &mut ChaCha8Rng) -> HermitianMatrix {
    let b = CMat::from_fn(n, rank, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    HermitianMatrix::symmetrize(&b * b.adjoint())
}

fn spectral_norm(h: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(h.clone()).eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn deg(x: f64) -> f64 {
    x.to_radians()
}

// ---------------------------------------------------------------------------
// Angle grid

#[test]
fn angle_grid_examples() {
    let mut t = default(0).target;
    t.elevation_halfwidth = 0.0;
    t.azimuth_halfwidth = 0.0;
    let g = angle_grid(&t, 5, 5);
    assert_eq!(g.points, vec![(t.elevation, t.azimuth)]);

    let t = default(0).target;
    let g = angle_grid(&t, 2, 2);
    assert_eq!(g.len(), 4);
    for (e, a) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
        let p = (t.elevation + e * t.elevation_halfwidth, t.azimuth + a * t.azimuth_halfwidth);
        assert!(g.points.iter().any(|q| (q.0 - p.0).abs() < 1e-15 && (q.1 - p.1).abs() < 1e-15));
    }
}

#[test]
fn angle_grid_default_box() {
    let t = TargetModel {
        elevation: deg(45.0),
        azimuth: deg(-30.0),
        reflection: c(1.0, 0.0),
        elevation_halfwidth: deg(5.0),
        azimuth_halfwidth: deg(5.0),
    };
    let g = angle_grid(&t, 5, 5);
    assert_eq!(g.len(), 25);
    let mut el: Vec<f64> = g.points.iter().map(|p| p.0.to_degrees()).collect();
    let mut az: Vec<f64> = g.points.iter().map(|p| p.1.to_degrees()).collect();
    el.sort_by(f64::total_cmp);
    el.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    az.sort_by(f64::total_cmp);
    az.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    let expect_el = [40.0, 42.5, 45.0, 47.5, 50.0];
    let expect_az = [-35.0, -32.5, -30.0, -27.5, -25.0];
    assert!(el.iter().zip(expect_el).all(|(a, b)| (a - b).abs() < 1e-9));
    assert!(az.iter().zip(expect_az).all(|(a, b)| (a - b).abs() < 1e-9));
    assert!(g.points.contains(&(t.elevation, t.azimuth)));
}

// ---------------------------------------------------------------------------
// Worst case over the channel error set

#[test]
fn trust_region_minimum_matches_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..30 {
        let n = 4;
        let a = CMat::from_fn(n, n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let b = HermitianMatrix::symmetrize(&a + a.adjoint());
        let x = CVec::from_fn(n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let q = random_psd(n, n, &mut rng).add(&HermitianMatrix::identity(n).scale(0.1));
        let eps = rng.random_range(0.01..1.0);
        let (v, d) = worst_case_quadratic(&b, &x, &q, eps);
        assert!(q.quadratic_form(&d) <= eps * (1.0 + 1e-9));
        assert!((b.quadratic_form(&(&x + &d)) - v).abs() <= 1e-9 * v.abs().max(1.0));
        let mut sampled = f64::INFINITY;
        for i in 0..2000 {
            let e = sample_error(&q, eps, i % 2 == 0, &mut rng);
            sampled = sampled.min(b.quadratic_form(&(&x + e)));
        }
        assert!(v <= sampled + 1e-9 * sampled.abs().max(1.0));
    }
}

#[test]
fn zero_radius_reduces_to_nominal() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = random_psd(3, 2, &mut rng);
    let x = CVec::from_fn(3, |_, _| c(rng.random_range(-1.0..1.0), 0.0));
    let (v, d) = worst_case_quadratic(&b, &x, &HermitianMatrix::identity(3), 0.0);
    assert_eq!(v, b.quadratic_form(&x));
    assert!(d.iter().all(|z| z.norm() == 0.0));
}

// ---------------------------------------------------------------------------
// Robust beamforming

#[test]
fn collapsed_problem_matches_perfect_csi() {
    for seed in [5, 9, 10] {
        let s = default(seed).without_uncertainty();
        let layout = centered_grid_layout(&s.geometry).unwrap();
        let grid = angle_grid(&s.target, 5, 5);
        assert_eq!(grid.len(), 1);
        let r = robust_beamforming_sdp(&s, &layout, &grid, &RobustOptions::default()).unwrap();
        let p = beamforming_sdp(&s, &layout, &subproblem_options()).unwrap();
        assert!(r.feasible() && p.feasible());
        assert!((r.z / p.relaxation_snr - 1.0).abs() < 1e-6, "seed {seed}: {} vs {}", r.z, p.relaxation_snr);
    }
}

#[test]
fn collapsed_feasibility_verdicts_coincide() {
    for seed in 0..12 {
        let s = default(seed).without_uncertainty();
        let layout = centered_grid_layout(&s.geometry).unwrap();
        let grid = angle_grid(&s.target, 1, 1);
        let r = robust_beamforming_sdp(&s, &layout, &grid, &RobustOptions::default()).unwrap();
        let p = beamforming_sdp(&s, &layout, &subproblem_options()).unwrap();
        assert_eq!(r.feasible(), p.feasible(), "seed {seed}");
    }
}

#[test]
fn robust_solution_survives_sampled_errors() {
    let s = default(9);
    let layout = centered_grid_layout(&s.geometry).unwrap();
    let grid = angle_grid(&s.target, 5, 5);
    let r = robust_beamforming_sdp(&s, &layout, &grid, &RobustOptions::default()).unwrap();
    assert!(r.feasible());
    assert!(r.nu.iter().all(|v| *v >= 0.0));
    for k in 0..4 {
        let worst = monte_carlo_worst_sinr(&r.beamformer, &layout, &s, k, 10_000, 7).unwrap();
        assert!(worst >= s.sinr_thresholds[k] - 1e-4, "user {k}: {worst}");
        assert!(worst_case_sinr(&r.beamformer, &layout, &s, k).unwrap() >= s.sinr_thresholds[k] * (1.0 - 1e-6));
    }
    assert!(r.beamformer.power() <= s.p_max * (1.0 + 1e-7));
    // z is the worst grid value, and a finer grid loses little.
    assert!((worst_grid_snr(&r.beamformer, &layout, &s, &grid) / r.snr - 1.0).abs() < 1e-12);
    assert!(validation_snr(&r.beamformer, &layout, &s, 20) >= 0.98 * r.snr);
}

#[test]
fn robust_value_is_below_nominal() {
    let s = default(9);
    let layout = centered_grid_layout(&s.geometry).unwrap();
    let r = robust_beamforming_sdp(&s, &layout, &angle_grid(&s.target, 5, 5), &RobustOptions::default()).unwrap();
    let p = beamforming_sdp(&s, &layout, &subproblem_options()).unwrap();
    assert!(r.snr <= p.snr * (1.0 + 1e-9));
}

// ---------------------------------------------------------------------------
// Randomization

#[test]
fn rank_one_covariances_round_to_their_factors() {
    let s = default(9).without_uncertainty();
    let layout = centered_grid_layout(&s.geometry).unwrap();
    let p = beamforming_sdp(&s, &layout, &subproblem_options()).unwrap();
    let grid = AngleGrid::single(s.target.elevation, s.target.azimuth);
    let covs: Vec<_> = (0..4).map(|k| HermitianMatrix::outer(&p.beamformer.column(k))).collect();
    for draws in [0, 50] {
        let r = gaussian_randomization(&covs, &s, &layout, &grid, draws, 1);
        assert!(r.feasible);
        let expect = Beamformer::from_columns(&covs.iter().map(|t| rank1_extract(t).vector).collect::<Vec<_>>());
        let gain = |w: &Beamformer| sensing_snr(w, &layout, &s);
        assert!(gain(&r.beamformer) >= gain(&expect) * (1.0 - 1e-9));
    }
}

#[test]
fn zero_draws_fall_back_to_eigenvectors() {
    let s = default(9).without_uncertainty();
    let layout = centered_grid_layout(&s.geometry).unwrap();
    let grid = AngleGrid::single(s.target.elevation, s.target.azimuth);
    // Unreachable thresholds: nothing passes, the eigenvector precoder comes back.
    let mut hard = s.clone();
    hard.sinr_thresholds = vec![1e12; 4];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let covs: Vec<_> = (0..4).map(|_| random_psd(4, 2, &mut rng).scale(0.1)).collect();
    let r = gaussian_randomization(&covs, &hard, &layout, &grid, 0, 0);
    assert!(!r.feasible && !r.from_draw);
    for (k, t) in covs.iter().enumerate() {
        assert!((r.beamformer.column(k) - rank1_extract(t).vector).norm() < 1e-14);
    }
}

#[test]
fn rank_two_rounding_quality_is_logged() {
    let mut s = default(9).without_uncertainty();
    s.users.truncate(1);
    s.sinr_thresholds = vec![1e-6];
    s.csi_errors.truncate(1);
    let layout = centered_grid_layout(&s.geometry).unwrap();
    let grid = AngleGrid::single(s.target.elevation, s.target.azimuth);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = random_psd(4, 2, &mut rng);
    let t = t.scale(s.p_max / t.trace());
    let a = s.steering(&layout, s.target.elevation, s.target.azimuth);
    let relax = s.eta() * steering_outer(&a).trace_product(&t);
    let r = gaussian_randomization(std::slice::from_ref(&t), &s, &layout, &grid, 100, 5);
    let ratio = sensing_snr(&r.beamformer, &layout, &s) / relax;
    println!("rank-2 rounding: best of 100 draws reaches {:.3} of the input covariance value", ratio);
    assert!(r.feasible && ratio > 0.0);
}

// ---------------------------------------------------------------------------
// Positioning pieces

#[test]
fn u_gradient_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = random_layout(4, WL, &mut rng);
    let z = u_grad_and_bound(&t, 0.7, -0.5, &HermitianMatrix::zeros(4), WL);
    assert_eq!(z.value, 0.0);
    assert!(z.gradient.iter().all(|v| *v == 0.0));
    let one = u_grad_and_bound(&random_layout(1, WL, &mut rng), 0.7, -0.5, &random_psd(1, 1, &mut rng), WL);
    assert!(one.gradient.iter().all(|v| *v == 0.0));
    for _ in 0..20 {
        let m = random_psd(4, 2, &mut rng);
        let t = random_layout(4, WL, &mut rng);
        let (e, a) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
        let s = u_grad_and_bound(&t, e, a, &m, WL);
        let h = 1e-6 * WL;
        for i in 0..8 {
            let mut p = t.clone();
            let mut q = t.clone();
            p.coords[i] += h;
            q.coords[i] -= h;
            let fd = (perfect_csi::g_value(&p, e, a, &m, WL) - perfect_csi::g_value(&q, e, a, &m, WL)) / (2.0 * h);
            let scale = 2.0 * std::f64::consts::PI / WL * m.frobenius_norm() * 4.0;
            assert!((fd - s.gradient[i]).abs() <= 1e-5 * scale);
        }
    }
}

fn setup_w(seed: u64, rng: &mut ChaCha8Rng) -> (Scenario, HermitianMatrix, FaLayout) {
    let s = default(seed);
    let covs: Vec<_> = (0..4).map(|_| random_psd(4, 1, rng).scale(1e-2)).collect();
    let r = sinr_matrix(&covs, 0, s.sinr_thresholds[0]);
    let t = random_layout(4, WL, rng);
    (s, r, t)
}

#[test]
fn w_k_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (s, r, t) = setup_w(9, &mut rng);
    let zero = w_k_linearization(&t, &s, 0, &HermitianMatrix::zeros(4)).unwrap();
    assert_eq!(zero.chi, 0.0);
    assert!(zero.center.iter().all(|z| z.norm() == 0.0));
    assert!(zero.columns.iter().all(|[a, b]| a.norm() == 0.0 && b.norm() == 0.0));
    let d0 = CVec::zeros(4);
    assert_eq!(w_k_value(&t, &s, 0, &r, &d0), 0.0);
    let lin = w_k_linearization(&t, &s, 0, &r).unwrap();
    assert!(lin.gradient(&d0).iter().all(|v| *v == 0.0));
    let collapsed = w_k_linearization(&t, &s.without_uncertainty(), 0, &r).unwrap();
    assert_eq!(collapsed.chi, 0.0);
}

#[test]
fn w_k_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let (s, r, t) = setup_w(rng.random_range(0..100), &mut rng);
        let (q, eps) = (s.csi_errors[0].shaping_matrix(4).unwrap(), s.csi_errors[0].radius);
        let d = sample_error(&q, eps, true, &mut rng);
        let g = w_k_linearization(&t, &s, 0, &r).unwrap().gradient(&d);
        let h = 1e-6 * WL;
        let scale = 2.0 * std::f64::consts::PI / WL * r.frobenius_norm() * eps.sqrt() * s.users[0].gain_sum() * 4.0;
        for i in 0..8 {
            let mut p = t.clone();
            let mut m = t.clone();
            p.coords[i] += h;
            m.coords[i] -= h;
            let fd = (w_k_value(&p, &s, 0, &r, &d) - w_k_value(&m, &s, 0, &r, &d)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * scale, "{fd} vs {}", g[i]);
        }
        // The affine map is exact at the expansion point.
        let lin = w_k_linearization(&t, &s, 0, &r).unwrap();
        let x = s.channel(&t, 0).map(|v| v.conj());
        let bx = r.matrix() * x * c(-1.0, 0.0);
        let tol = 1e-14 * bx.norm().max(1e-300);
        assert!((lin.map(&[0.0; 8]) - bx).norm() <= tol);
    }
}

#[test]
fn chi_dominates_sampled_hessians() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let (s, r, _) = setup_w(rng.random_range(0..100), &mut rng);
        let (q, eps) = (s.csi_errors[0].shaping_matrix(4).unwrap(), s.csi_errors[0].radius);
        let chi = w_k_linearization(&random_layout(4, WL, &mut rng), &s, 0, &r).unwrap().chi;
        assert!(chi >= chi_closed_form(&r, 4, eps, s.users[0].gain_sum(), WL));
        for _ in 0..40 {
            let t = random_layout(4, 2.0 * WL, &mut rng);
            let d = sample_error(&q, eps, true, &mut rng);
            let h = 1e-6 * WL;
            let mut hess = DMatrix::zeros(8, 8);
            for i in 0..8 {
                let mut p = t.clone();
                let mut m = t.clone();
                p.coords[i] += h;
                m.coords[i] -= h;
                let gp = w_k_linearization(&p, &s, 0, &r).unwrap().gradient(&d);
                let gm = w_k_linearization(&m, &s, 0, &r).unwrap().gradient(&d);
                for j in 0..8 {
                    hess[(j, i)] = (gp[j] - gm[j]) / (2.0 * h);
                }
            }
            assert!(spectral_norm(&hess) <= chi);
        }
    }
}

#[test]
fn zero_precoder_keeps_layout() {
    let s = default(9);
    let layout = centered_grid_layout(&s.geometry).unwrap();
    let grid = angle_grid(&s.target, 5, 5);
    let step = position_subproblem_robust(&s, &Beamformer::zeros(4, 4), &layout, &grid, &subproblem_options()).unwrap();
    assert!(step.step.layout.coords.iter().zip(&layout.coords).all(|(a, b)| (a - b).abs() <= 1e-9 * WL));
}

#[test]
fn collapsed_position_step_matches_perfect_step() {
    let s = default(9).without_uncertainty();
    let layout = centered_grid_layout(&s.geometry).unwrap();
    let bf = beamforming_sdp(&s, &layout, &subproblem_options()).unwrap();
    let grid = angle_grid(&s.target, 5, 5);
    let r = position_subproblem_robust(&s, &bf.beamformer, &layout, &grid, &subproblem_options()).unwrap();
    let p = perfect_csi::position_subproblem(&s, &bf.beamformer, &layout, &subproblem_options()).unwrap();
    assert!((r.z_after / p.g_after - 1.0).abs() < 1e-6, "{} vs {}", r.z_after, p.g_after);
}

// ---------------------------------------------------------------------------
// Alternating loop

#[test]
fn collapsed_run_tracks_perfect_run() {
    let s = default(9).without_uncertainty();
    let init = centered_grid_layout(&s.geometry).unwrap();
    let ao = AoOptions { max_outer: 5, ..AoOptions::default() };
    let r = algorithm2(&s, &init, &RobustOptions { ao, ..RobustOptions::default() }).unwrap();
    let p = perfect_csi::algorithm1(&s, &init, &ao).unwrap();
    assert!((r.final_objective() / p.final_objective() - 1.0).abs() < 1e-4);
}

#[test]
fn default_robust_run_is_monotone_and_sound() {
    let s = default(9);
    let init = centered_grid_layout(&s.geometry).unwrap();
    let opts = RobustOptions { ao: AoOptions { xi: 0.0, max_outer: 6, ..AoOptions::default() }, ..RobustOptions::default() };
    let r = algorithm2(&s, &init, &opts).unwrap();
    assert_eq!(r.status, RunStatus::MaxOuter);
    for w in r.trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-6 * w[0].max(1.0));
    }
    assert!(validate_layout(&r.layout, &s.geometry).is_empty());
    for k in 0..4 {
        assert!(worst_case_sinr(&r.beamformer, &r.layout, &s, k).unwrap() >= s.sinr_thresholds[k] * (1.0 - 1e-5));
    }
    let perfect = perfect_csi::algorithm1(&s, &init, &AoOptions { max_outer: 6, ..AoOptions::default() }).unwrap();
    assert!(r.final_objective() <= perfect.final_objective());
}

#[test]
fn infeasible_robust_start_is_reported() {
    let mut s = default(9);
    s.csi_errors.iter_mut().for_each(|e| e.radius *= 1e6);
    let init = centered_grid_layout(&s.geometry).unwrap();
    let r = algorithm2(&s, &init, &RobustOptions::default()).unwrap();
    assert_eq!(r.status, RunStatus::Infeasible);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Lowering the corner entry of a PSD bordered matrix keeps the LMI
    /// satisfied once the corner is raised back.
    #[test]
    fn bordered_lmi_monotone_in_corner(seed in any::<u64>(), drop in 0.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4;
        let m = random_psd(n + 1, n + 1, &mut rng);
        let beta = m.matrix()[(n, n)].re;
        prop_assert!(is_psd(&m, 1e-12));
        let mut raised = m.matrix().clone();
        raised[(n, n)] = c(beta + drop, 0.0);
        prop_assert!(is_psd(&HermitianMatrix::new(raised).unwrap(), 1e-12));
    }

    #[test]
    fn sampled_errors_lie_in_the_set(seed in any::<u64>(), eps in 1e-6f64..10.0, boundary in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_psd(3, 3, &mut rng).add(&HermitianMatrix::identity(3).scale(0.05));
        let d = sample_error(&q, eps, boundary, &mut rng);
        let v = q.quadratic_form(&d);
        prop_assert!(v <= eps * (1.0 + 1e-9));
        if boundary {
            prop_assert!((v / eps - 1.0).abs() < 1e-9);
        }
    }
}
