use fluidbeam_core::baselines::*;
use fluidbeam_core::channel::*;
use fluidbeam_core::perfect_csi::{algorithm1, AoOptions};
use fluidbeam_core::robust_csi::RobustOptions;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn default(seed: u64) -> Scenario {
    sample_scenario(&ScenarioConfig::default(), seed).unwrap()
}

#[test]
fn fixed_layout_is_the_centered_square() {
    let s = default(5);
    let r = fafp(&s, &BeamformingMode::default()).unwrap();
    let h = 0.015;
    let mut pts: Vec<[f64; 2]> = r.layout.points().collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let expect = [[-h, -h], [-h, h], [h, -h], [h, h]];
    for (p, e) in pts.iter().zip(expect) {
        assert!((p[0] - e[0]).abs() < 1e-15 && (p[1] - e[1]).abs() < 1e-15, "{p:?}");
    }
    assert_eq!(r.scheme, Scheme::Fafp);
    assert!(r.feasible && r.snr > 0.0);
    assert_eq!(r.evaluations, 1);
}

#[test]
fn proposed_never_loses_to_its_starting_point() {
    for seed in [5, 9, 10] {
        let s = default(seed);
        let f = fafp(&s, &BeamformingMode::default()).unwrap();
        let p = algorithm1(&s, &f.layout, &AoOptions::default()).unwrap();
        assert!(p.final_objective() >= f.snr * (1.0 - 1e-6), "seed {seed}");
    }
}

#[test]
fn baselines_are_deterministic() {
    let s = default(9);
    let mode = BeamformingMode::default();
    let a = farp(&s, 3, 2, &mode).unwrap();
    let b = farp(&s, 3, 2, &mode).unwrap();
    assert_eq!(a.layout, b.layout);
    assert_eq!(a.snr.to_bits(), b.snr.to_bits());
    let mut s1 = s.clone();
    s1.geometry.width = s.geometry.wavelength;
    s1.geometry.length = s.geometry.wavelength;
    let x = aps(&s1, &ApsOptions::default(), &mode).unwrap();
    let y = aps(&s1, &ApsOptions::default(), &mode).unwrap();
    assert_eq!(x.layout, y.layout);
    assert_eq!(x.snr.to_bits(), y.snr.to_bits());
}

#[test]
fn random_layouts_respect_geometry() {
    let s = default(0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let t = random_layout(&s, &mut rng).unwrap();
        assert!(validate_layout(&t, &s.geometry).is_empty());
    }
}

#[test]
fn zero_spacing_accepts_first_draw() {
    let mut s = default(0);
    s.geometry.min_spacing = 0.0;
    let a = random_layout(&s, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    // With no spacing rule the first draw is kept, so the stream position
    // after one layout is fixed.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let hw = s.geometry.half_width();
    let hl = s.geometry.half_length();
    use rand::Rng;
    let first: Vec<f64> = (0..4).flat_map(|_| [rng.random_range(-hw..=hw), rng.random_range(-hl..=hl)]).collect();
    assert_eq!(a.coords, first);
}

#[test]
fn impossible_spacing_is_reported() {
    let mut s = default(0);
    s.geometry.min_spacing = 10.0;
    assert!(random_layout(&s, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn single_grid_point_keeps_the_only_layout() {
    let cfg = ScenarioConfig { n_t: 1, users: 1, region_over_lambda: 0.25, ..ScenarioConfig::default() };
    let s = sample_scenario(&cfg, 2).unwrap();
    assert_eq!(region_grid(&s.geometry, s.geometry.wavelength / 2.0).len(), 1);
    let mode = BeamformingMode::default();
    let a = aps(&s, &ApsOptions::default(), &mode).unwrap();
    let f = fafp(&s, &mode).unwrap();
    assert_eq!(a.layout, f.layout);
    assert_eq!(a.snr, f.snr);
    assert_eq!(a.passes, 1);
}

#[test]
fn greedy_search_improves_on_fixed_layout() {
    let s = default(5);
    let mode = BeamformingMode::default();
    let f = fafp(&s, &mode).unwrap();
    let a = aps(&s, &ApsOptions { max_passes: 1 }, &mode).unwrap();
    assert!(a.snr >= f.snr);
    assert!(validate_layout(&a.layout, &s.geometry).is_empty());
    assert_eq!(a.first_pass_snr, Some(a.snr));
    assert!(a.evaluations > 1);
}

#[test]
fn robust_mode_runs_on_fixed_layout() {
    let s = default(9);
    let r = fafp(&s, &BeamformingMode::Robust(RobustOptions::default())).unwrap();
    let p = fafp(&s, &BeamformingMode::default()).unwrap();
    assert!(r.feasible);
    assert!(r.snr <= p.snr * (1.0 + 1e-9));
}

#[test]
fn infeasible_evaluation_reports_zero() {
    let mut s = default(9);
    s.p_max = 0.0;
    let r = fafp(&s, &BeamformingMode::default()).unwrap();
    assert!(!r.feasible);
    assert_eq!(r.snr, 0.0);
}
