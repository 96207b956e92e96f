//! Comparison schemes: fixed half-wavelength array (FAFP), random feasible
//! positions (FARP) and greedy grid selection (APS).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{centered_grid_layout, region_grid, validate_layout, Beamformer, FaLayout, Scenario};
use crate::conic::SolveOptions;
use crate::perfect_csi::{beamforming_sdp, SolveError};
use crate::robust_csi::{angle_grid, robust_beamforming_sdp, RobustOptions};

pub const FARP_MAX_ATTEMPTS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Fafp,
    Farp,
    Aps,
}

/// Which beamforming problem the baselines solve for a fixed layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamformingMode {
    Perfect(SolveOptions),
    Robust(RobustOptions),
}

impl Default for BeamformingMode {
    fn default() -> Self {
        BeamformingMode::Perfect(crate::perfect_csi::subproblem_options())
    }
}

#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub scheme: Scheme,
    pub layout: FaLayout,
    pub beamformer: Beamformer,
    /// Sensing SNR (worst grid value in robust mode); zero when infeasible.
    pub snr: f64,
    pub feasible: bool,
    /// Beamforming problems solved.
    pub evaluations: usize,
    /// APS only: value after the first sweep and number of sweeps run.
    pub first_pass_snr: Option<f64>,
    pub passes: usize,
}

struct Evaluation {
    beamformer: Beamformer,
    snr: f64,
    feasible: bool,
}

fn evaluate(scenario: &Scenario, layout: &FaLayout, mode: &BeamformingMode) -> Result<Evaluation, SolveError> {
    match mode {
        BeamformingMode::Perfect(opts) => {
            let s = beamforming_sdp(scenario, layout, opts)?;
            let feasible = s.feasible();
            Ok(Evaluation { beamformer: s.beamformer, snr: if feasible { s.snr } else { 0.0 }, feasible })
        }
        BeamformingMode::Robust(opts) => {
            let grid = angle_grid(&scenario.target, opts.grid_n, opts.grid_n);
            let s = robust_beamforming_sdp(scenario, layout, &grid, opts)?;
            let feasible = s.feasible();
            Ok(Evaluation { beamformer: s.beamformer, snr: if feasible { s.snr } else { 0.0 }, feasible })
        }
    }
}

fn result(scheme: Scheme, layout: FaLayout, e: Evaluation, evaluations: usize) -> BaselineResult {
    BaselineResult { scheme, layout, beamformer: e.beamformer, snr: e.snr, feasible: e.feasible, evaluations, first_pass_snr: None, passes: 0 }
}

pub fn fafp(scenario: &Scenario, mode: &BeamformingMode) -> Result<BaselineResult, SolveError> {
    let layout = centered_grid_layout(&scenario.geometry)?;
    let e = evaluate(scenario, &layout, mode)?;
    Ok(result(Scheme::Fafp, layout, e, 1))
}

/// Uniform layout in the region satisfying the spacing constraint, by
/// rejection.
pub fn random_layout<R: Rng>(scenario: &Scenario, rng: &mut R) -> Result<FaLayout, SolveError> {
    let g = &scenario.geometry;
    let (hw, hl) = (g.half_width(), g.half_length());
    for _ in 0..FARP_MAX_ATTEMPTS {
        let pts: Vec<[f64; 2]> = (0..g.n_t).map(|_| [rng.random_range(-hw..=hw), rng.random_range(-hl..=hl)]).collect();
        let layout = FaLayout::from_points(&pts);
        if validate_layout(&layout, g).is_empty() {
            return Ok(layout);
        }
    }
    Err(SolveError::Invalid(format!("no spacing-feasible random layout in {FARP_MAX_ATTEMPTS} attempts")))
}

/// Best of `n_layouts` random feasible layouts.
pub fn farp(scenario: &Scenario, seed: u64, n_layouts: usize, mode: &BeamformingMode) -> Result<BaselineResult, SolveError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<BaselineResult> = None;
    for _ in 0..n_layouts.max(1) {
        let layout = random_layout(scenario, &mut rng)?;
        let e = evaluate(scenario, &layout, mode)?;
        let better = match &best {
            None => true,
            Some(b) => (e.feasible && !b.feasible) || (e.feasible == b.feasible && e.snr > b.snr),
        };
        if better {
            best = Some(result(Scheme::Farp, layout, e, 0));
        }
    }
    let mut best = best.expect("at least one layout");
    best.evaluations = n_layouts.max(1);
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApsOptions {
    pub max_passes: usize,
}

impl Default for ApsOptions {
    fn default() -> Self {
        Self { max_passes: 3 }
    }
}

fn rank_key(e: &Evaluation) -> (bool, f64) {
    (e.feasible, e.snr)
}

fn beats(a: &Evaluation, b: &Evaluation) -> bool {
    let (fa, sa) = rank_key(a);
    let (fb, sb) = rank_key(b);
    (fa && !fb) || (fa == fb && sa > sb)
}

/// Greedy antenna-by-antenna selection over the half-wavelength grid,
/// starting from the FAFP layout. Each antenna may stay where it is; among
/// grid points the lowest index wins ties.
pub fn aps(scenario: &Scenario, opts: &ApsOptions, mode: &BeamformingMode) -> Result<BaselineResult, SolveError> {
    let g = &scenario.geometry;
    let grid = region_grid(g, g.wavelength / 2.0);
    if grid.is_empty() {
        return Err(SolveError::Invalid("empty position grid".into()));
    }
    let mut layout = centered_grid_layout(g)?;
    let mut current = evaluate(scenario, &layout, mode)?;
    let mut evaluations = 1;
    let mut first_pass = None;
    let mut passes = 0;
    for _ in 0..opts.max_passes.max(1) {
        passes += 1;
        let mut changed = false;
        for m in 0..g.n_t {
            let candidates: Vec<FaLayout> = grid
                .iter()
                .map(|&p| {
                    let mut t = layout.clone();
                    t.coords[2 * m] = p[0];
                    t.coords[2 * m + 1] = p[1];
                    t
                })
                .filter(|t| *t != layout && validate_layout(t, g).is_empty())
                .collect();
            evaluations += candidates.len();
            let evals = candidates.par_iter().map(|t| evaluate(scenario, t, mode)).collect::<Result<Vec<_>, _>>()?;
            let mut pick = None;
            for (i, e) in evals.iter().enumerate() {
                let incumbent = pick.map_or(&current, |j: usize| &evals[j]);
                if beats(e, incumbent) {
                    pick = Some(i);
                }
            }
            if let Some(i) = pick {
                layout = candidates[i].clone();
                current = evals.into_iter().nth(i).unwrap();
                changed = true;
            }
        }
        if first_pass.is_none() {
            first_pass = Some(current.snr);
        }
        if !changed {
            break;
        }
    }
    let mut r = result(Scheme::Aps, layout, current, evaluations);
    r.first_pass_snr = first_pass;
    r.passes = passes;
    Ok(r)
}
