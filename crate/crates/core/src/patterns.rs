//! Complex far-field radiation patterns sampled on a (θ, φ) grid.
//!
//! A [`RadiationPattern`] stores both polarization components of the far
//! field of one array element on a sphere of radius `ref_distance_m`, fed
//! with `accepted_power_w` at its port. Realized gain follows from the
//! stored field as
//!
//! ```text
//! G(θ, φ) = ‖E(θ, φ)‖² · 2π d₀² / (P₀ η₀),   ‖E‖² = |E_θ|² + |E_φ|²
//! ```
//!
//! Angles are radians in memory. θ is the polar angle from +z (array
//! boresight) and φ the azimuth from +x.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Wave impedance of free space in ohms.
pub const ETA0: f64 = 376.730313668;

/// Radius of the sphere the stored far fields refer to.
pub const DEFAULT_REF_DISTANCE_M: f64 = 1.0;

/// Header line of the pattern CSV format.
pub const CSV_HEADER: &str = "theta_deg,phi_deg,re_etheta,im_etheta,re_ephi,im_ephi";

/// Slack on the passivity check at load time. Covers quadrature error on
/// coarse grids, nothing more.
const EFFICIENCY_SLACK: f64 = 1e-2;

const TWO_PI: f64 = 2.0 * PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkRole {
    Uplink,
    Downlink,
}

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty grid")]
    EmptyGrid,
    #[error("non-rectangular grid: missing node (theta={theta_deg} deg, phi={phi_deg} deg)")]
    NonRectangular { theta_deg: f64, phi_deg: f64 },
    #[error("line {line}: duplicate node (theta={theta_deg} deg, phi={phi_deg} deg)")]
    DuplicateNode {
        line: usize,
        theta_deg: f64,
        phi_deg: f64,
    },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("radiated power exceeds accepted power (efficiency {efficiency:.6})")]
    NonPassive { efficiency: f64 },
}

/// Far-field components at one grid node, V/m.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FieldSample {
    pub e_theta: Complex64,
    pub e_phi: Complex64,
}

impl FieldSample {
    pub fn new(e_theta: Complex64, e_phi: Complex64) -> Self {
        Self { e_theta, e_phi }
    }

    /// |E_θ|² + |E_φ|².
    pub fn norm_sqr(&self) -> f64 {
        self.e_theta.norm_sqr() + self.e_phi.norm_sqr()
    }

    /// The stronger of the two components; ties go to E_θ.
    pub fn dominant(&self) -> Complex64 {
        if self.e_theta.norm_sqr() >= self.e_phi.norm_sqr() {
            self.e_theta
        } else {
            self.e_phi
        }
    }

    /// Phase of the dominant component, radians.
    pub fn phase(&self) -> f64 {
        self.dominant().arg()
    }

    fn lerp(a: FieldSample, b: FieldSample, t: f64) -> FieldSample {
        FieldSample {
            e_theta: a.e_theta * (1.0 - t) + b.e_theta * t,
            e_phi: a.e_phi * (1.0 - t) + b.e_phi * t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadiationPattern {
    theta: Vec<f64>,
    phi: Vec<f64>,
    /// θ-major: node (i, j) lives at `i * phi.len() + j`.
    samples: Vec<FieldSample>,
    ref_distance_m: f64,
    wavelength_m: f64,
    accepted_power_w: f64,
    link_role: LinkRole,
}

impl RadiationPattern {
    /// Builds a pattern from a complete θ-major sample grid.
    pub fn new(
        theta: Vec<f64>,
        phi: Vec<f64>,
        samples: Vec<FieldSample>,
        wavelength_m: f64,
        accepted_power_w: f64,
        link_role: LinkRole,
    ) -> Result<Self, PatternError> {
        if theta.is_empty() || phi.is_empty() {
            return Err(PatternError::EmptyGrid);
        }
        check_ascending(&theta, "theta")?;
        check_ascending(&phi, "phi")?;
        if theta[0] < 0.0 || theta[theta.len() - 1] > PI {
            return Err(PatternError::InvalidGrid("theta outside [0, pi]".into()));
        }
        if phi[0] < 0.0 || phi[phi.len() - 1] >= TWO_PI {
            return Err(PatternError::InvalidGrid("phi outside [0, 2pi)".into()));
        }
        if samples.len() != theta.len() * phi.len() {
            return Err(PatternError::InvalidGrid(format!(
                "{} samples for a {}x{} grid",
                samples.len(),
                theta.len(),
                phi.len()
            )));
        }
        if samples.iter().any(|s| !s.norm_sqr().is_finite()) {
            return Err(PatternError::InvalidGrid("non-finite sample".into()));
        }
        if !(wavelength_m > 0.0 && wavelength_m.is_finite()) {
            return Err(PatternError::InvalidParameter(format!(
                "wavelength_m must be > 0, got {wavelength_m}"
            )));
        }
        if !(accepted_power_w > 0.0 && accepted_power_w.is_finite()) {
            return Err(PatternError::InvalidParameter(format!(
                "accepted_power_w must be > 0, got {accepted_power_w}"
            )));
        }
        Ok(Self {
            theta,
            phi,
            samples,
            ref_distance_m: DEFAULT_REF_DISTANCE_M,
            wavelength_m,
            accepted_power_w,
            link_role,
        })
    }

    /// Overrides the reference-sphere radius (default 1 m).
    pub fn with_ref_distance(mut self, ref_distance_m: f64) -> Result<Self, PatternError> {
        if !(ref_distance_m > 0.0 && ref_distance_m.is_finite()) {
            return Err(PatternError::InvalidParameter(format!(
                "ref_distance_m must be > 0, got {ref_distance_m}"
            )));
        }
        self.ref_distance_m = ref_distance_m;
        Ok(self)
    }

    /// Same field data tagged for the other link direction.
    pub fn with_role(mut self, link_role: LinkRole) -> Self {
        self.link_role = link_role;
        self
    }

    pub fn theta_grid(&self) -> &[f64] {
        &self.theta
    }

    pub fn phi_grid(&self) -> &[f64] {
        &self.phi
    }

    pub fn samples(&self) -> &[FieldSample] {
        &self.samples
    }

    pub fn ref_distance_m(&self) -> f64 {
        self.ref_distance_m
    }

    pub fn wavelength_m(&self) -> f64 {
        self.wavelength_m
    }

    pub fn accepted_power_w(&self) -> f64 {
        self.accepted_power_w
    }

    pub fn link_role(&self) -> LinkRole {
        self.link_role
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.theta.len(), self.phi.len())
    }

    pub fn node(&self, i: usize, j: usize) -> FieldSample {
        self.samples[i * self.phi.len() + j]
    }

    /// True when both patterns sample the same (θ, φ) nodes.
    pub fn same_grid(&self, other: &RadiationPattern) -> bool {
        self.theta == other.theta && self.phi == other.phi
    }

    /// Converts ‖E‖² into realized gain for this pattern's normalization.
    pub fn gain_from_field(&self, field_norm_sqr: f64) -> f64 {
        field_norm_sqr * TWO_PI * self.ref_distance_m * self.ref_distance_m
            / (self.accepted_power_w * ETA0)
    }

    pub fn gain_at_node(&self, i: usize, j: usize) -> f64 {
        self.gain_from_field(self.node(i, j).norm_sqr())
    }

    /// Field at an arbitrary direction.
    ///
    /// Real and imaginary parts of each component are interpolated
    /// bilinearly and independently. φ wraps periodically; θ outside the
    /// sampled range clamps to the nearest row.
    pub fn sample(&self, theta: f64, phi: f64) -> FieldSample {
        let (i0, i1, t) = theta_bracket(&self.theta, theta);
        let (j0, j1, u) = phi_bracket(&self.phi, phi);
        let row0 = FieldSample::lerp(self.node(i0, j0), self.node(i0, j1), u);
        let row1 = FieldSample::lerp(self.node(i1, j0), self.node(i1, j1), u);
        FieldSample::lerp(row0, row1, t)
    }

    pub fn gain(&self, theta: f64, phi: f64) -> f64 {
        self.gain_from_field(self.sample(theta, phi).norm_sqr())
    }

    /// Phase Φ₀ of the dominant polarization component at a direction.
    pub fn phase(&self, theta: f64, phi: f64) -> f64 {
        self.sample(theta, phi).phase()
    }

    /// Quadrature weights for the node grid; see [`QuadratureWeights`].
    pub fn quadrature(&self) -> QuadratureWeights {
        QuadratureWeights::new(&self.theta, &self.phi)
    }

    /// ∮ ‖E‖²/(2η₀) · d₀² sinθ dθ dφ, watts.
    pub fn total_radiated_power(&self) -> f64 {
        let q = self.quadrature();
        let mut acc = 0.0;
        for (i, wt) in q.theta.iter().enumerate() {
            for (j, wp) in q.phi.iter().enumerate() {
                acc += wt * wp * self.node(i, j).norm_sqr();
            }
        }
        acc * self.ref_distance_m * self.ref_distance_m / (2.0 * ETA0)
    }

    pub fn radiation_efficiency(&self) -> f64 {
        self.total_radiated_power() / self.accepted_power_w
    }

    /// Fails when the pattern radiates more than it accepts.
    pub fn check_passive(&self) -> Result<f64, PatternError> {
        let efficiency = self.radiation_efficiency();
        if efficiency > 1.0 + EFFICIENCY_SLACK {
            return Err(PatternError::NonPassive { efficiency });
        }
        Ok(efficiency)
    }
}

fn check_ascending(grid: &[f64], name: &str) -> Result<(), PatternError> {
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(PatternError::InvalidGrid(format!("non-finite {name} node")));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PatternError::InvalidGrid(format!(
            "{name} grid not strictly ascending"
        )));
    }
    Ok(())
}

fn theta_bracket(grid: &[f64], theta: f64) -> (usize, usize, f64) {
    let last = grid.len() - 1;
    if theta <= grid[0] {
        return (0, 0, 0.0);
    }
    if theta >= grid[last] {
        return (last, last, 0.0);
    }
    // grid[i] <= theta < grid[i + 1]
    let i = grid.partition_point(|&g| g <= theta) - 1;
    let t = (theta - grid[i]) / (grid[i + 1] - grid[i]);
    (i, i + 1, t)
}

fn phi_bracket(grid: &[f64], phi: f64) -> (usize, usize, f64) {
    let n = grid.len();
    if n == 1 {
        return (0, 0, 0.0);
    }
    let phi = phi.rem_euclid(TWO_PI);
    let last = n - 1;
    if phi < grid[0] {
        let span = grid[0] + TWO_PI - grid[last];
        return (last, 0, (phi + TWO_PI - grid[last]) / span);
    }
    if phi >= grid[last] {
        let span = grid[0] + TWO_PI - grid[last];
        return (last, 0, (phi - grid[last]) / span);
    }
    let j = grid.partition_point(|&g| g <= phi) - 1;
    let u = (phi - grid[j]) / (grid[j + 1] - grid[j]);
    (j, j + 1, u)
}

/// Node weights for integrating a sampled function over the sphere,
/// `∮ f sinθ dθ dφ ≈ Σᵢⱼ theta[i] · phi[j] · f(θᵢ, φⱼ)`.
///
/// In θ the field is taken piecewise linear between nodes and the sinθ
/// factor is integrated exactly against each hat function, so a constant
/// integrand is reproduced to rounding. In φ the rule is the periodic
/// trapezoid.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureWeights {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

impl QuadratureWeights {
    pub fn new(theta: &[f64], phi: &[f64]) -> Self {
        Self {
            theta: theta_weights(theta),
            phi: phi_weights(phi),
        }
    }

    pub fn node(&self, i: usize, j: usize) -> f64 {
        self.theta[i] * self.phi[j]
    }
}

fn theta_weights(theta: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; theta.len()];
    for (k, pair) in theta.windows(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        let h = b - a;
        let chord = (b.sin() - a.sin()) / h;
        // ∫ₐᵇ (b-θ)/h sinθ dθ and ∫ₐᵇ (θ-a)/h sinθ dθ
        w[k] += a.cos() - chord;
        w[k + 1] += chord - b.cos();
    }
    w
}

fn phi_weights(phi: &[f64]) -> Vec<f64> {
    let n = phi.len();
    if n == 1 {
        return vec![TWO_PI];
    }
    (0..n)
        .map(|j| {
            let prev = if j == 0 {
                phi[n - 1] - TWO_PI
            } else {
                phi[j - 1]
            };
            let next = if j == n - 1 {
                phi[0] + TWO_PI
            } else {
                phi[j + 1]
            };
            0.5 * (next - prev)
        })
        .collect()
}

/// Evenly spaced grid: θ from 0 to π inclusive, φ = 2πj/n_phi.
pub fn uniform_grid(n_theta: usize, n_phi: usize) -> (Vec<f64>, Vec<f64>) {
    let theta = (0..n_theta)
        .map(|i| {
            if i + 1 == n_theta {
                PI
            } else {
                PI * i as f64 / (n_theta - 1) as f64
            }
        })
        .collect();
    let phi = (0..n_phi)
        .map(|j| TWO_PI * j as f64 / n_phi as f64)
        .collect();
    (theta, phi)
}

fn check_fixture_grid(n_theta: usize, n_phi: usize) -> Result<(), PatternError> {
    if n_theta < 2 || n_phi < 1 {
        return Err(PatternError::InvalidParameter(format!(
            "fixture grid needs n_theta >= 2 and n_phi >= 1, got {n_theta}x{n_phi}"
        )));
    }
    Ok(())
}

/// Unit-gain fixture: every node carries the same real E_θ, so G ≡ 1.
pub fn synthesize_isotropic(
    wavelength_m: f64,
    accepted_power_w: f64,
    n_theta: usize,
    n_phi: usize,
) -> Result<RadiationPattern, PatternError> {
    check_fixture_grid(n_theta, n_phi)?;
    let amplitude = (ETA0 * accepted_power_w
        / (TWO_PI * DEFAULT_REF_DISTANCE_M * DEFAULT_REF_DISTANCE_M))
        .sqrt();
    let (theta, phi) = uniform_grid(n_theta, n_phi);
    let sample = FieldSample::new(Complex64::new(amplitude, 0.0), Complex64::new(0.0, 0.0));
    let samples = vec![sample; n_theta * n_phi];
    RadiationPattern::new(
        theta,
        phi,
        samples,
        wavelength_m,
        accepted_power_w,
        LinkRole::Uplink,
    )
}

/// Lossless Hertzian dipole along z: E_θ ∝ sinθ, G = 1.5 sin²θ.
pub fn synthesize_dipole(
    wavelength_m: f64,
    accepted_power_w: f64,
    n_theta: usize,
    n_phi: usize,
) -> Result<RadiationPattern, PatternError> {
    check_fixture_grid(n_theta, n_phi)?;
    let amplitude = (1.5 * ETA0 * accepted_power_w
        / (TWO_PI * DEFAULT_REF_DISTANCE_M * DEFAULT_REF_DISTANCE_M))
        .sqrt();
    let (theta, phi) = uniform_grid(n_theta, n_phi);
    let mut samples = Vec::with_capacity(n_theta * n_phi);
    for &t in &theta {
        let e = FieldSample::new(
            Complex64::new(amplitude * t.sin(), 0.0),
            Complex64::default(),
        );
        samples.extend(std::iter::repeat_n(e, n_phi));
    }
    RadiationPattern::new(
        theta,
        phi,
        samples,
        wavelength_m,
        accepted_power_w,
        LinkRole::Uplink,
    )
}

/// Reads a pattern CSV file. See [`parse_pattern_csv`].
pub fn load_pattern(
    path: impl AsRef<Path>,
    link_role: LinkRole,
    wavelength_m: f64,
    accepted_power_w: f64,
) -> Result<RadiationPattern, PatternError> {
    let text = fs::read_to_string(path)?;
    parse_pattern_csv(&text, link_role, wavelength_m, accepted_power_w)
}

/// Parses the pattern CSV format.
///
/// `#` comment lines and blank lines may precede the header
/// [`CSV_HEADER`]. Each following row is one node: angles in degrees,
/// field parts in V/m. Rows may come in any order; the result is sorted
/// ascending in θ then φ and must cover a complete rectangular grid.
pub fn parse_pattern_csv(
    text: &str,
    link_role: LinkRole,
    wavelength_m: f64,
    accepted_power_w: f64,
) -> Result<RadiationPattern, PatternError> {
    let mut lines = text.lines().enumerate().map(|(n, l)| (n + 1, l));
    let mut header_seen = false;
    for (line_no, line) in lines.by_ref() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if trimmed != CSV_HEADER {
            return Err(PatternError::Parse {
                line: line_no,
                msg: format!("expected header `{CSV_HEADER}`"),
            });
        }
        header_seen = true;
        break;
    }
    if !header_seen {
        return Err(PatternError::EmptyGrid);
    }

    let mut rows: Vec<(usize, f64, f64, FieldSample)> = Vec::new();
    for (line_no, line) in lines {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(PatternError::Parse {
                line: line_no,
                msg: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let mut v = [0.0f64; 6];
        for (slot, field) in v.iter_mut().zip(&fields) {
            *slot = field.parse().map_err(|_| PatternError::Parse {
                line: line_no,
                msg: format!("not a number: `{field}`"),
            })?;
            if !slot.is_finite() {
                return Err(PatternError::Parse {
                    line: line_no,
                    msg: format!("non-finite value `{field}`"),
                });
            }
        }
        if !(0.0..=180.0).contains(&v[0]) {
            return Err(PatternError::Parse {
                line: line_no,
                msg: format!("theta_deg {} outside [0, 180]", v[0]),
            });
        }
        if !(0.0..360.0).contains(&v[1]) {
            return Err(PatternError::Parse {
                line: line_no,
                msg: format!("phi_deg {} outside [0, 360)", v[1]),
            });
        }
        let sample = FieldSample::new(Complex64::new(v[2], v[3]), Complex64::new(v[4], v[5]));
        rows.push((line_no, v[0], v[1], sample));
    }
    if rows.is_empty() {
        return Err(PatternError::EmptyGrid);
    }

    rows.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)));
    for pair in rows.windows(2) {
        if pair[0].1 == pair[1].1 && pair[0].2 == pair[1].2 {
            return Err(PatternError::DuplicateNode {
                line: pair[0].0.max(pair[1].0),
                theta_deg: pair[1].1,
                phi_deg: pair[1].2,
            });
        }
    }

    let mut theta_deg: Vec<f64> = rows.iter().map(|r| r.1).collect();
    theta_deg.dedup();
    let mut phi_deg: Vec<f64> = rows.iter().map(|r| r.2).collect();
    phi_deg.sort_by(f64::total_cmp);
    phi_deg.dedup();

    let n_phi = phi_deg.len();
    for (i, &t) in theta_deg.iter().enumerate() {
        for (j, &p) in phi_deg.iter().enumerate() {
            let present = rows
                .get(i * n_phi + j)
                .is_some_and(|r| r.1 == t && r.2 == p);
            if !present {
                return Err(PatternError::NonRectangular {
                    theta_deg: t,
                    phi_deg: p,
                });
            }
        }
    }
    if rows.len() != theta_deg.len() * n_phi {
        // Unreachable given the scan above, kept as a hard guard.
        return Err(PatternError::InvalidGrid("row count mismatch".into()));
    }

    let pattern = RadiationPattern::new(
        theta_deg.iter().map(|d| d.to_radians()).collect(),
        phi_deg.iter().map(|d| d.to_radians()).collect(),
        rows.into_iter().map(|r| r.3).collect(),
        wavelength_m,
        accepted_power_w,
        link_role,
    )?;
    pattern.check_passive()?;
    Ok(pattern)
}

/// Serializes a pattern in the CSV format accepted by [`parse_pattern_csv`].
pub fn pattern_to_csv(pattern: &RadiationPattern) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (i, &t) in pattern.theta.iter().enumerate() {
        for (j, &p) in pattern.phi.iter().enumerate() {
            let s = pattern.node(i, j);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                t.to_degrees(),
                p.to_degrees(),
                s.e_theta.re,
                s.e_theta.im,
                s.e_phi.re,
                s.e_phi.im
            );
        }
    }
    out
}

pub fn save_pattern(pattern: &RadiationPattern, path: impl AsRef<Path>) -> io::Result<()> {
    fs::write(path, pattern_to_csv(pattern))
}
