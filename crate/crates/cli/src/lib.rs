//! Run orchestration shared by the `fluidbeam` binary and its tests.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use fluidbeam_core::baselines::{self, ApsOptions, BaselineResult, BeamformingMode};
use fluidbeam_core::channel::{centered_grid_layout, csi_radius, sample_scenario, CsiRadiusMode, FaLayout, Scenario, ScenarioConfig};
use fluidbeam_core::perfect_csi::{algorithm1, subproblem_options, AoOptions, RunStatus, SolveReport};
use fluidbeam_core::robust_csi::{algorithm2, RobustOptions};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CSV_HEADER: [&str; 7] = ["axis_value", "scheme", "seed", "snr_db", "iterations", "feasible", "wall_ms"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SchemeName {
    ProposedPerfect,
    ProposedRobust,
    Fafp,
    Farp,
    Aps,
}

impl SchemeName {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemeName::ProposedPerfect => "proposed_perfect",
            SchemeName::ProposedRobust => "proposed_robust",
            SchemeName::Fafp => "fafp",
            SchemeName::Farp => "farp",
            SchemeName::Aps => "aps",
        }
    }
}

impl fmt::Display for SchemeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <Self as clap::ValueEnum>::from_str(s, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    RegionSizeOverLambda,
    SinrThresholdDb,
    NAntennas,
    NUsers,
    CsiError,
}

impl Axis {
    /// Scenario configuration at one value of this axis.
    pub fn apply(self, base: &ScenarioConfig, value: f64) -> Result<ScenarioConfig, String> {
        let mut c = base.clone();
        let count = |v: f64| -> Result<usize, String> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(format!("{v} is not a positive integer"))
            }
        };
        match self {
            Axis::RegionSizeOverLambda => c.region_over_lambda = value,
            Axis::SinrThresholdDb => c.sinr_db = value,
            Axis::NAntennas => c.n_t = count(value)?,
            Axis::NUsers => c.users = count(value)?,
            Axis::CsiError => c.csi_error_ratio = value,
        }
        Ok(c)
    }
}

/// Solver settings shared by every run of a sweep or single solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub xi: f64,
    pub max_outer: usize,
    pub grid_n: usize,
    /// Gaussian randomization draws in the robust beamformer.
    pub draws: usize,
    pub aps_passes: usize,
    pub farp_layouts: usize,
    /// Solve the baselines with the robust beamformer.
    pub robust_baselines: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { xi: 1e-3, max_outer: 200, grid_n: 5, draws: 200, aps_passes: 3, farp_layouts: 1, robust_baselines: false }
    }
}

impl RunOptions {
    pub fn ao(&self) -> AoOptions {
        AoOptions { xi: self.xi, max_outer: self.max_outer, solver: subproblem_options() }
    }

    pub fn robust(&self, seed: u64) -> RobustOptions {
        RobustOptions { ao: self.ao(), grid_n: self.grid_n, draws: self.draws, seed }
    }

    fn baseline_mode(&self, seed: u64) -> BeamformingMode {
        if self.robust_baselines {
            BeamformingMode::Robust(self.robust(seed))
        } else {
            BeamformingMode::Perfect(subproblem_options())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scheme: SchemeName,
    pub seed: u64,
    pub scenario_digest: String,
    pub axis_value: Option<f64>,
    /// Linear sensing SNR (worst grid value for robust runs); 0 when infeasible.
    pub snr: f64,
    pub snr_db: f64,
    pub iterations: usize,
    pub trace: Vec<f64>,
    pub feasible: bool,
    pub status: String,
    pub layout: Vec<f64>,
    pub wall_ms: f64,
    pub error: Option<String>,
}

impl RunRecord {
    /// The record with timing removed, for reproducibility comparisons.
    pub fn untimed(&self) -> Self {
        Self { wall_ms: 0.0, ..self.clone() }
    }
}

/// SHA-256 of the canonical scenario JSON.
pub fn scenario_digest(scenario: &Scenario) -> String {
    hex::encode(Sha256::digest(scenario.to_json().as_bytes()))
}

pub fn to_db(snr: f64) -> f64 {
    10.0 * snr.log10()
}

/// Replaces every user's error radius using the relative level `ratio`.
pub fn with_csi_error(scenario: &Scenario, ratio: f64, mode: CsiRadiusMode) -> Scenario {
    let config = ScenarioConfig { csi_error_ratio: ratio, csi_radius_mode: mode, ..ScenarioConfig::default() };
    let mut s = scenario.clone();
    let n = s.geometry.n_t;
    for (e, u) in s.csi_errors.iter_mut().zip(&s.users) {
        e.radius = csi_radius(&config, u, n);
    }
    s
}

fn status_name(s: RunStatus) -> String {
    serde_json::to_value(s).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

type Outcome = (f64, usize, Vec<f64>, bool, String, FaLayout);

fn from_report(r: &SolveReport) -> Outcome {
    let feasible = !r.trace.is_empty() && matches!(r.status, RunStatus::Converged | RunStatus::MaxOuter);
    let snr = if feasible { r.final_objective() } else { 0.0 };
    (snr, r.iterations(), r.trace.clone(), feasible, status_name(r.status), r.layout.clone())
}

fn from_baseline(b: &BaselineResult) -> Outcome {
    let status = if b.feasible { "converged" } else { "infeasible" };
    let trace = if b.feasible { vec![b.snr] } else { vec![] };
    (b.snr, 1, trace, b.feasible, status.into(), b.layout.clone())
}

/// Runs one scheme on one scenario. Solver failures become infeasible
/// records carrying the error text.
pub fn run_scheme(scenario: &Scenario, scheme: SchemeName, seed: u64, opts: &RunOptions) -> RunRecord {
    let start = Instant::now();
    let digest = scenario_digest(scenario);
    let outcome: Result<_, String> = (|| {
        let init = || centered_grid_layout(&scenario.geometry).map_err(|e| e.to_string());
        let mode = opts.baseline_mode(seed);
        Ok(match scheme {
            SchemeName::ProposedPerfect => from_report(&algorithm1(scenario, &init()?, &opts.ao()).map_err(|e| e.to_string())?),
            SchemeName::ProposedRobust => from_report(&algorithm2(scenario, &init()?, &opts.robust(seed)).map_err(|e| e.to_string())?),
            SchemeName::Fafp => from_baseline(&baselines::fafp(scenario, &mode).map_err(|e| e.to_string())?),
            SchemeName::Farp => from_baseline(&baselines::farp(scenario, seed, opts.farp_layouts, &mode).map_err(|e| e.to_string())?),
            SchemeName::Aps => {
                let aps = ApsOptions { max_passes: opts.aps_passes };
                from_baseline(&baselines::aps(scenario, &aps, &mode).map_err(|e| e.to_string())?)
            }
        })
    })();
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let (snr, iterations, trace, feasible, status, layout, error) = match outcome {
        Ok((snr, it, trace, feasible, status, layout)) => (snr, it, trace, feasible, status, layout.coords, None),
        Err(e) => (0.0, 0, vec![], false, "failed".to_string(), vec![], Some(e)),
    };
    RunRecord {
        scheme,
        seed,
        scenario_digest: digest,
        axis_value: None,
        snr,
        snr_db: if snr > 0.0 { to_db(snr) } else { f64::NEG_INFINITY },
        iterations,
        trace,
        feasible,
        status,
        layout,
        wall_ms,
        error,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<f64>,
    /// Seeds per axis value, counted from `first_seed`.
    pub seeds: usize,
    #[serde(default)]
    pub first_seed: u64,
    pub schemes: Vec<SchemeName>,
    #[serde(default)]
    pub base: ScenarioConfig,
    #[serde(default)]
    pub run: RunOptions,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.values.is_empty() {
            return Err("sweep needs at least one axis value".into());
        }
        if self.seeds == 0 {
            return Err("sweep needs at least one seed".into());
        }
        if self.schemes.is_empty() {
            return Err("sweep needs at least one scheme".into());
        }
        for &v in &self.values {
            self.axis.apply(&self.base, v)?;
        }
        Ok(())
    }
}

/// Every (value, seed, scheme) run of the sweep, in that nesting order.
/// Scenario generation failures are recorded per row.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<RunRecord>, String> {
    spec.validate()?;
    let jobs: Vec<(f64, u64, SchemeName)> = spec
        .values
        .iter()
        .flat_map(|&v| (0..spec.seeds as u64).flat_map(move |i| spec.schemes.iter().map(move |&s| (v, spec.first_seed + i, s))))
        .collect();
    Ok(jobs
        .par_iter()
        .map(|&(v, seed, scheme)| {
            let config = spec.axis.apply(&spec.base, v).expect("validated");
            let mut rec = match sample_scenario(&config, seed) {
                Ok(s) => run_scheme(&s, scheme, seed, &spec.run),
                Err(e) => RunRecord {
                    scheme,
                    seed,
                    scenario_digest: String::new(),
                    axis_value: None,
                    snr: 0.0,
                    snr_db: f64::NEG_INFINITY,
                    iterations: 0,
                    trace: vec![],
                    feasible: false,
                    status: "failed".into(),
                    layout: vec![],
                    wall_ms: 0.0,
                    error: Some(e.to_string()),
                },
            };
            rec.axis_value = Some(v);
            rec
        })
        .collect())
}

pub fn write_results_csv(path: &Path, records: &[RunRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.axis_value.map_or(String::new(), |v| v.to_string()),
            r.scheme.to_string(),
            r.seed.to_string(),
            r.snr_db.to_string(),
            r.iterations.to_string(),
            r.feasible.to_string(),
            format!("{:.3}", r.wall_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub axis_value: f64,
    pub scheme: SchemeName,
    pub runs: usize,
    pub feasible: usize,
    pub median_db: f64,
    pub q1_db: f64,
    pub q3_db: f64,
    pub iqr_db: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

/// Median and quartiles of the feasible runs per (axis value, scheme), in
/// first-appearance order.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(f64, SchemeName)> = Vec::new();
    for r in records {
        let key = (r.axis_value.unwrap_or(f64::NAN), r.scheme);
        if !keys.iter().any(|k| k.1 == key.1 && (k.0 == key.0 || (k.0.is_nan() && key.0.is_nan()))) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(v, scheme)| {
            let group: Vec<&RunRecord> =
                records.iter().filter(|r| r.scheme == scheme && r.axis_value.map_or(v.is_nan(), |a| a == v)).collect();
            let mut db: Vec<f64> = group.iter().filter(|r| r.feasible).map(|r| r.snr_db).collect();
            db.sort_by(f64::total_cmp);
            let (q1, m, q3) = (quantile(&db, 0.25), quantile(&db, 0.5), quantile(&db, 0.75));
            SummaryRow { axis_value: v, scheme, runs: group.len(), feasible: db.len(), median_db: m, q1_db: q1, q3_db: q3, iqr_db: q3 - q1 }
        })
        .collect()
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// File name for a run's JSON trace.
pub fn record_file_name(r: &RunRecord) -> String {
    match r.axis_value {
        Some(v) => format!("{}_{}_{}.json", r.scheme, v, r.seed),
        None => format!("{}_{}.json", r.scheme, r.seed),
    }
}
