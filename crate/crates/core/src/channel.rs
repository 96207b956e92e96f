//! Physical-layer model: geometry, multipath user channels, sensing steering
//! vectors, SINR and sensing SNR, detection probability and random scenarios.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::{erfc, erfc_inv, CMat, CVec, HermitianMatrix, NumericsError};

pub const SCHEMA_VERSION: u32 = 1;

/// Slack (meters) allowed by [`validate_layout`] for points produced by a
/// floating-point solver.
pub const LAYOUT_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum ChannelError {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("unsupported scenario schema {0}")]
    Schema(u32),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    /// Region width along x (meters); the region is centered at the origin.
    pub width: f64,
    /// Region length along y (meters).
    pub length: f64,
    pub n_t: usize,
    pub rx_p: usize,
    pub rx_q: usize,
    pub min_spacing: f64,
    pub wavelength: f64,
}

impl ArrayGeometry {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let pos = [self.width, self.length, self.wavelength];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !(self.min_spacing >= 0.0) {
            return Err(ChannelError::Geometry(format!("nonpositive dimension in {self:?}")));
        }
        if self.n_t == 0 || self.rx_p == 0 || self.rx_q == 0 {
            return Err(ChannelError::Geometry("antenna counts must be positive".into()));
        }
        if self.min_spacing > 0.0 {
            let cap = (self.width / self.min_spacing + 1.0).ceil() * (self.length / self.min_spacing + 1.0).ceil();
            if self.n_t as f64 > cap {
                return Err(ChannelError::Geometry(format!(
                    "{} antennas cannot be packed at spacing {} (at most {cap})",
                    self.n_t, self.min_spacing
                )));
            }
        }
        Ok(())
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    pub fn half_width(&self) -> f64 {
        self.width / 2.0
    }

    pub fn half_length(&self) -> f64 {
        self.length / 2.0
    }
}

/// Stacked coordinates `[x_1, y_1, ..., x_N, y_N]` in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaLayout {
    pub coords: Vec<f64>,
}

impl FaLayout {
    pub fn from_points(points: &[[f64; 2]]) -> Self {
        Self { coords: points.iter().flat_map(|p| [p[0], p[1]]).collect() }
    }

    pub fn len(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, m: usize) -> [f64; 2] {
        [self.coords[2 * m], self.coords[2 * m + 1]]
    }

    pub fn points(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.len()).map(|m| self.point(m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    /// Elevation angles of departure (radians).
    pub elevation: Vec<f64>,
    /// Azimuth angles of departure (radians).
    pub azimuth: Vec<f64>,
    pub gains: Vec<Complex64>,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    pub fn gain_sum(&self) -> f64 {
        self.gains.iter().map(|g| g.norm()).sum()
    }

    pub fn power(&self) -> f64 {
        self.gains.iter().map(|g| g.norm_sqr()).sum()
    }

    /// Direction cosines `(cos(theta) sin(phi), sin(theta))` of path `l`.
    pub fn direction(&self, l: usize) -> [f64; 2] {
        direction(self.elevation[l], self.azimuth[l])
    }
}

pub fn direction(elevation: f64, azimuth: f64) -> [f64; 2] {
    [elevation.cos() * azimuth.sin(), elevation.sin()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetModel {
    pub elevation: f64,
    pub azimuth: f64,
    pub reflection: Complex64,
    pub elevation_halfwidth: f64,
    pub azimuth_halfwidth: f64,
}

/// Channel error set `{d : d Q d^H <= radius}` for one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiErrorModel {
    /// Row-major `N_t x N_t` shaping matrix.
    pub shaping: Vec<Complex64>,
    pub radius: f64,
}

impl CsiErrorModel {
    pub fn identity(n: usize, radius: f64) -> Self {
        let shaping = (0..n * n)
            .map(|i| if i % (n + 1) == 0 { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) })
            .collect();
        Self { shaping, radius }
    }

    pub fn shaping_matrix(&self, n: usize) -> Result<HermitianMatrix, ChannelError> {
        if self.shaping.len() != n * n {
            return Err(ChannelError::Scenario(format!("shaping matrix has {} entries, expected {}", self.shaping.len(), n * n)));
        }
        Ok(HermitianMatrix::new(CMat::from_row_slice(n, n, &self.shaping))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema: u32,
    pub geometry: ArrayGeometry,
    pub users: Vec<PathSet>,
    pub target: TargetModel,
    pub noise_power: f64,
    pub radar_noise_power: f64,
    pub p_max: f64,
    pub sinr_thresholds: Vec<f64>,
    pub csi_errors: Vec<CsiErrorModel>,
}

impl Scenario {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.schema != SCHEMA_VERSION {
            return Err(ChannelError::Schema(self.schema));
        }
        self.geometry.validate()?;
        let k = self.users.len();
        if k == 0 {
            return Err(ChannelError::Scenario("no users".into()));
        }
        if self.sinr_thresholds.len() != k || self.csi_errors.len() != k {
            return Err(ChannelError::Scenario("per-user lists have inconsistent lengths".into()));
        }
        for (i, u) in self.users.iter().enumerate() {
            if u.is_empty() || u.elevation.len() != u.len() || u.azimuth.len() != u.len() {
                return Err(ChannelError::Scenario(format!("user {i} has an invalid path set")));
            }
            let in_range = |a: &f64| (-FRAC_PI_2 - 1e-12..=FRAC_PI_2 + 1e-12).contains(a);
            if !u.elevation.iter().chain(&u.azimuth).all(in_range) {
                return Err(ChannelError::Scenario(format!("user {i} has an angle outside [-pi/2, pi/2]")));
            }
        }
        if !(self.noise_power > 0.0 && self.radar_noise_power > 0.0 && self.p_max >= 0.0) {
            return Err(ChannelError::Scenario("noise powers must be positive and the budget nonnegative".into()));
        }
        if self.sinr_thresholds.iter().any(|g| !(*g > 0.0)) {
            return Err(ChannelError::Scenario("SINR thresholds must be positive".into()));
        }
        if self.target.elevation_halfwidth < 0.0 || self.target.azimuth_halfwidth < 0.0 {
            return Err(ChannelError::Scenario("negative angular half-width".into()));
        }
        for e in &self.csi_errors {
            if !(e.radius >= 0.0) {
                return Err(ChannelError::Scenario("negative CSI error radius".into()));
            }
            let q = e.shaping_matrix(self.geometry.n_t)?;
            if !crate::numerics::is_psd(&q, 1e-10) {
                return Err(ChannelError::Scenario("CSI shaping matrix is not PSD".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialisation cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, ChannelError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn eta(&self) -> f64 {
        integrated_coefficient(&self.target, self.geometry.rx_p, self.geometry.rx_q, self.radar_noise_power)
    }

    pub fn channel(&self, layout: &FaLayout, k: usize) -> CVec {
        user_channel(layout, &self.users[k], self.geometry.wavelength)
    }

    pub fn steering(&self, layout: &FaLayout, elevation: f64, azimuth: f64) -> CVec {
        transmit_steering(layout, elevation, azimuth, self.geometry.wavelength)
    }

    /// Same scenario with the CSI error radii and angular half-widths zeroed.
    pub fn without_uncertainty(&self) -> Self {
        let mut s = self.clone();
        s.target.elevation_halfwidth = 0.0;
        s.target.azimuth_halfwidth = 0.0;
        s.csi_errors.iter_mut().for_each(|e| e.radius = 0.0);
        s
    }
}

/// Precoder `W` (`N_t x K`), one column per user.
#[derive(Debug, Clone, PartialEq)]
pub struct Beamformer {
    pub w: CMat,
}

impl Beamformer {
    pub fn zeros(n_t: usize, k: usize) -> Self {
        Self { w: CMat::zeros(n_t, k) }
    }

    pub fn from_columns(cols: &[CVec]) -> Self {
        Self { w: CMat::from_columns(cols) }
    }

    pub fn column(&self, k: usize) -> CVec {
        self.w.column(k).into_owned()
    }

    pub fn power(&self) -> f64 {
        self.w.norm_squared()
    }

    pub fn covariance(&self, k: usize) -> HermitianMatrix {
        HermitianMatrix::outer(&self.column(k))
    }

    /// `W W^H`.
    pub fn gram(&self) -> HermitianMatrix {
        HermitianMatrix::symmetrize(&self.w * self.w.adjoint())
    }
}

/// `x cos(theta) sin(phi) + y sin(theta)`.
pub fn propagation_delta(t: [f64; 2], elevation: f64, azimuth: f64) -> f64 {
    t[0] * elevation.cos() * azimuth.sin() + t[1] * elevation.sin()
}

fn phase(x: f64) -> Complex64 {
    Complex64::from_polar(1.0, x)
}

pub fn field_response(t: [f64; 2], paths: &PathSet, wavelength: f64) -> CVec {
    let k = 2.0 * PI / wavelength;
    CVec::from_iterator(
        paths.len(),
        (0..paths.len()).map(|l| phase(k * propagation_delta(t, paths.elevation[l], paths.azimuth[l]))),
    )
}

/// Row channel `h_k(t)`; entry `m` sums the path gains weighted by the field
/// response at antenna `m`.
pub fn user_channel(layout: &FaLayout, paths: &PathSet, wavelength: f64) -> CVec {
    CVec::from_iterator(
        layout.len(),
        layout.points().map(|t| {
            let g = field_response(t, paths, wavelength);
            paths.gains.iter().zip(g.iter()).map(|(s, e)| s * e).sum::<Complex64>()
        }),
    )
}

pub fn transmit_steering(layout: &FaLayout, elevation: f64, azimuth: f64, wavelength: f64) -> CVec {
    let k = 2.0 * PI / wavelength;
    CVec::from_iterator(layout.len(), layout.points().map(|t| phase(k * propagation_delta(t, elevation, azimuth))))
}

/// Half-wavelength `P x Q` receive array response `a_P (x) a_Q`.
pub fn receive_steering(elevation: f64, azimuth: f64, p: usize, q: usize) -> CVec {
    let [u, v] = direction(elevation, azimuth);
    CVec::from_iterator(
        p * q,
        (0..p).flat_map(|i| (0..q).map(move |j| phase(PI * (i as f64 * u + j as f64 * v)))),
    )
}

/// `|alpha|^2 P Q / sigma_r^2`.
pub fn integrated_coefficient(target: &TargetModel, p: usize, q: usize, radar_noise: f64) -> f64 {
    target.reflection.norm_sqr() * (p * q) as f64 / radar_noise
}

/// `a h` for row vectors stored as plain vectors (no conjugation).
pub fn row_dot(h: &CVec, w: &CVec) -> Complex64 {
    h.iter().zip(w.iter()).map(|(a, b)| a * b).sum()
}

/// `h R h^H` for a row vector `h`.
pub fn row_quadratic(h: &CVec, r: &HermitianMatrix) -> f64 {
    r.quadratic_form(&h.map(|v| v.conj()))
}

/// `A = a^H a` for a row steering vector `a`, so that `Tr(A T) = a T a^H`.
pub fn steering_outer(a: &CVec) -> HermitianMatrix {
    HermitianMatrix::outer(&a.map(|v| v.conj()))
}

pub fn sensing_snr_at(w: &Beamformer, layout: &FaLayout, elevation: f64, azimuth: f64, scenario: &Scenario) -> f64 {
    let a = scenario.steering(layout, elevation, azimuth);
    let gain: f64 = (0..w.w.ncols()).map(|k| row_dot(&a, &w.column(k)).norm_sqr()).sum();
    scenario.eta() * gain
}

/// Sensing SNR at the nominal target direction.
pub fn sensing_snr(w: &Beamformer, layout: &FaLayout, scenario: &Scenario) -> f64 {
    sensing_snr_at(w, layout, scenario.target.elevation, scenario.target.azimuth, scenario)
}

pub fn sinr_with_channel(w: &Beamformer, h: &CVec, k: usize, noise: f64) -> f64 {
    let mut interference = 0.0;
    let mut signal = 0.0;
    for q in 0..w.w.ncols() {
        let p = row_dot(h, &w.column(q)).norm_sqr();
        if q == k {
            signal = p;
        } else {
            interference += p;
        }
    }
    signal / (interference + noise)
}

pub fn user_sinr(w: &Beamformer, layout: &FaLayout, k: usize, scenario: &Scenario) -> f64 {
    sinr_with_channel(w, &scenario.channel(layout, k), k, scenario.noise_power)
}

/// `1/2 erfc(erfc^{-1}(2 P_FA) - sqrt(gamma))`.
pub fn detection_probability(snr: f64, p_fa: f64) -> Result<f64, ChannelError> {
    if !(p_fa > 0.0 && p_fa < 1.0) {
        return Err(NumericsError::ErfcInvDomain(2.0 * p_fa).into());
    }
    Ok(0.5 * erfc(erfc_inv(2.0 * p_fa)? - snr.max(0.0).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayoutViolation {
    OutsideRegion { antenna: usize, point: [f64; 2] },
    TooClose { first: usize, second: usize, distance: f64 },
    WrongSize { expected: usize, found: usize },
}

/// Empty iff every antenna lies in the closed region and all pairwise
/// distances are at least the minimum spacing (both up to [`LAYOUT_TOL`]).
pub fn validate_layout(layout: &FaLayout, geometry: &ArrayGeometry) -> Vec<LayoutViolation> {
    let mut out = Vec::new();
    if layout.coords.len() != 2 * geometry.n_t {
        out.push(LayoutViolation::WrongSize { expected: geometry.n_t, found: layout.len() });
    }
    let (hw, hl) = (geometry.half_width(), geometry.half_length());
    for (m, p) in layout.points().enumerate() {
        if p[0].abs() > hw + LAYOUT_TOL || p[1].abs() > hl + LAYOUT_TOL || !p[0].is_finite() || !p[1].is_finite() {
            out.push(LayoutViolation::OutsideRegion { antenna: m, point: p });
        }
    }
    for m in 0..layout.len() {
        for n in m + 1..layout.len() {
            let (a, b) = (layout.point(m), layout.point(n));
            let d = (a[0] - b[0]).hypot(a[1] - b[1]);
            if d < geometry.min_spacing - LAYOUT_TOL {
                out.push(LayoutViolation::TooClose { first: m, second: n, distance: d });
            }
        }
    }
    out
}

/// Centered `min_spacing`-pitch grid positions covering the region, in
/// row-major order (y outer, x inner).
pub fn region_grid(geometry: &ArrayGeometry, pitch: f64) -> Vec<[f64; 2]> {
    let axis = |half: f64| {
        let n = ((2.0 * half + 1e-12) / pitch).floor() as usize + 1;
        let start = -((n - 1) as f64) * pitch / 2.0;
        (0..n).map(move |i| start + i as f64 * pitch).collect::<Vec<_>>()
    };
    let xs = axis(geometry.half_width());
    let ys = axis(geometry.half_length());
    ys.iter().flat_map(|&y| xs.iter().map(move |&x| [x, y])).collect()
}

/// Uniform planar layout at half-wavelength pitch centered at the origin,
/// filling rows of `ceil(sqrt(N))` antennas.
pub fn centered_grid_layout(geometry: &ArrayGeometry) -> Result<FaLayout, ChannelError> {
    let n = geometry.n_t;
    let pitch = geometry.wavelength / 2.0;
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let mut pts = Vec::with_capacity(n);
    for m in 0..n {
        let (r, c) = (m / cols, m % cols);
        let in_row = if r + 1 == rows { n - r * cols } else { cols };
        let x = (c as f64 - (in_row as f64 - 1.0) / 2.0) * pitch;
        let y = (r as f64 - (rows as f64 - 1.0) / 2.0) * pitch;
        pts.push([x, y]);
    }
    let layout = FaLayout::from_points(&pts);
    let bad = validate_layout(&layout, geometry);
    if !bad.is_empty() {
        return Err(ChannelError::Geometry(format!("half-wavelength grid does not fit: {bad:?}")));
    }
    Ok(layout)
}

/// How the relative error level maps to the radius of the error set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CsiRadiusMode {
    /// `radius = (ratio * ||h||)^2`, so the error ball has radius `ratio * ||h||`.
    #[default]
    Squared,
    /// `radius = ratio * ||h||` used directly as the bound on `d Q d^H`.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_t: usize,
    pub rx_p: usize,
    pub rx_q: usize,
    pub users: usize,
    pub wavelength: f64,
    /// Side of the square region in wavelengths.
    pub region_over_lambda: f64,
    pub min_spacing_over_lambda: f64,
    pub target_elevation_deg: f64,
    pub target_azimuth_deg: f64,
    pub elevation_halfwidth_deg: f64,
    pub azimuth_halfwidth_deg: f64,
    pub reflection: Complex64,
    pub sinr_db: f64,
    pub noise_dbm: f64,
    pub radar_noise_dbm: Option<f64>,
    pub p_max: f64,
    pub paths_per_user: usize,
    pub ref_path_loss_db: f64,
    pub path_loss_exponent: f64,
    pub distance_min: f64,
    pub distance_max: f64,
    pub csi_error_ratio: f64,
    pub csi_radius_mode: CsiRadiusMode,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_t: 4,
            rx_p: 2,
            rx_q: 2,
            users: 4,
            wavelength: 0.06,
            region_over_lambda: 2.0,
            min_spacing_over_lambda: 0.5,
            target_elevation_deg: 45.0,
            target_azimuth_deg: -30.0,
            elevation_halfwidth_deg: 5.0,
            azimuth_halfwidth_deg: 5.0,
            reflection: Complex64::new(1.0, 0.0),
            sinr_db: 10.0,
            noise_dbm: -80.0,
            radar_noise_dbm: None,
            p_max: 1.0,
            paths_per_user: 12,
            ref_path_loss_db: -40.0,
            path_loss_exponent: 2.8,
            distance_min: 20.0,
            distance_max: 100.0,
            csi_error_ratio: 0.05,
            csi_radius_mode: CsiRadiusMode::Squared,
        }
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

fn complex_gaussian<R: Rng>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// Error-set radius for a user with path set `paths` under `config`. The
/// channel norm is the layout-independent RMS value `sqrt(N_t sum |g_l|^2)`.
pub fn csi_radius(config: &ScenarioConfig, paths: &PathSet, n_t: usize) -> f64 {
    let norm = (n_t as f64 * paths.power()).sqrt();
    match config.csi_radius_mode {
        CsiRadiusMode::Squared => (config.csi_error_ratio * norm).powi(2),
        CsiRadiusMode::Linear => config.csi_error_ratio * norm,
    }
}

pub fn sample_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario, ChannelError> {
    if config.paths_per_user == 0 || config.users == 0 {
        return Err(ChannelError::Scenario("need at least one user and one path".into()));
    }
    if !(config.distance_min > 0.0 && config.distance_max >= config.distance_min) {
        return Err(ChannelError::Scenario("invalid distance range".into()));
    }
    if !(config.csi_error_ratio >= 0.0) {
        return Err(ChannelError::Scenario("negative CSI error ratio".into()));
    }
    let side = config.region_over_lambda * config.wavelength;
    let geometry = ArrayGeometry {
        width: side,
        length: side,
        n_t: config.n_t,
        rx_p: config.rx_p,
        rx_q: config.rx_q,
        min_spacing: config.min_spacing_over_lambda * config.wavelength,
        wavelength: config.wavelength,
    };
    geometry.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rho = db_to_linear(config.ref_path_loss_db);
    let l = config.paths_per_user;
    let mut users = Vec::with_capacity(config.users);
    for _ in 0..config.users {
        let d = rng.random_range(config.distance_min..=config.distance_max);
        let variance = rho * d.powf(-config.path_loss_exponent) / l as f64;
        let elevation = (0..l).map(|_| rng.random_range(-FRAC_PI_2..=FRAC_PI_2)).collect();
        let azimuth = (0..l).map(|_| rng.random_range(-FRAC_PI_2..=FRAC_PI_2)).collect();
        let gains = (0..l).map(|_| complex_gaussian(&mut rng, variance)).collect();
        users.push(PathSet { elevation, azimuth, gains });
    }
    let noise = dbm_to_watts(config.noise_dbm);
    let csi_errors = users.iter().map(|u| CsiErrorModel::identity(config.n_t, csi_radius(config, u, config.n_t))).collect();
    let scenario = Scenario {
        schema: SCHEMA_VERSION,
        geometry,
        users,
        target: TargetModel {
            elevation: config.target_elevation_deg.to_radians(),
            azimuth: config.target_azimuth_deg.to_radians(),
            reflection: config.reflection,
            elevation_halfwidth: config.elevation_halfwidth_deg.to_radians(),
            azimuth_halfwidth: config.azimuth_halfwidth_deg.to_radians(),
        },
        noise_power: noise,
        radar_noise_power: config.radar_noise_dbm.map_or(noise, dbm_to_watts),
        p_max: config.p_max,
        sinr_thresholds: vec![db_to_linear(config.sinr_db); config.users],
        csi_errors,
    };
    scenario.validate()?;
    Ok(scenario)
}
