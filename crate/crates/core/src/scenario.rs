//! Scenario configuration and the end-to-end pipeline behind the CLI.
//!
//! A scenario is a TOML file. Relative file paths inside it resolve
//! against the directory holding the file. Every physical quantity carries
//! its unit in the key name; array spacings are in wavelengths unless
//! `array.spacing_unit = "meter"`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelBuilder, ChannelError, FieldSharing, LinkPhaseConfig};
use crate::coupling::{
    build_h_self, load_touchstone, synthesize_coupling, validate_partition, CouplingError,
    ScatteringMatrix,
};
use crate::geometry::{build_planar_array, AngleMode, ArrayGeometry, UserPosition};
use crate::linalg::frobenius_sq;
use crate::linkbudget::{
    capacity, evaluate_with_svd, sinr_reference, DuplexMode, EvalOptions, LinkError, LinkInputs,
    LinkReport, NoiseConfig, TransmitPowers,
};
use crate::patterns::{
    load_pattern, synthesize_dipole, synthesize_isotropic, LinkRole, PatternError, RadiationPattern,
};
use crate::precoder::{search_with_svd, svd_decompose, PartitionConstraint, PartitionScore};
use crate::SPEED_OF_LIGHT;

/// Offset between the uplink and downlink Rayleigh seeds, so that user `k`
/// of each direction draws an independent field.
const DOWNLINK_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// Tolerance when comparing the best spacing against half a wavelength.
const HALF_WAVELENGTH_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid config at `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl ScenarioError {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Io { .. } => 1,
            ScenarioError::Config { .. } => 2,
            ScenarioError::Numerical(_) => 3,
        }
    }

    fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        ScenarioError::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<LinkError> for ScenarioError {
    fn from(e: LinkError) -> Self {
        match e {
            LinkError::Noise(msg) => ScenarioError::config("noise", msg),
            LinkError::Power(msg) => ScenarioError::config("powers", msg),
            other => ScenarioError::Numerical(other.to_string()),
        }
    }
}

fn channel_error(field: &str, e: ChannelError) -> ScenarioError {
    match e {
        ChannelError::NonFinite | ChannelError::InconsistentNormalization { .. } => {
            ScenarioError::Numerical(e.to_string())
        }
        other => ScenarioError::config(field, other.to_string()),
    }
}

fn pattern_error(field: &str, path: &Path, e: PatternError) -> ScenarioError {
    match e {
        PatternError::Io(source) => ScenarioError::io(path, source),
        other => ScenarioError::config(field, format!("{}: {other}", path.display())),
    }
}

fn coupling_error(field: &str, path: Option<&Path>, e: CouplingError) -> ScenarioError {
    match (e, path) {
        (CouplingError::Io(source), Some(p)) => ScenarioError::io(p, source),
        (other, Some(p)) => ScenarioError::config(field, format!("{}: {other}", p.display())),
        (other, None) => ScenarioError::config(field, other.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarrierConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wavelength_m: Option<f64>,
}

impl CarrierConfig {
    pub fn wavelength_m(&self) -> Result<f64, ScenarioError> {
        let lambda = match (self.frequency_hz, self.wavelength_m) {
            (Some(f), None) => SPEED_OF_LIGHT / f,
            (None, Some(l)) => l,
            _ => {
                return Err(ScenarioError::config(
                    "carrier",
                    "set exactly one of frequency_hz and wavelength_m",
                ))
            }
        };
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(ScenarioError::config(
                "carrier",
                "carrier must be positive and finite",
            ));
        }
        Ok(lambda)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpacingUnit {
    #[default]
    Wavelength,
    Meter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayConfig {
    pub m_x: usize,
    pub m_y: usize,
    pub spacing_x: f64,
    pub spacing_y: f64,
    #[serde(default)]
    pub spacing_unit: SpacingUnit,
}

impl ArrayConfig {
    pub fn element_count(&self) -> usize {
        self.m_x * self.m_y
    }

    fn spacing_m(&self, lambda: f64) -> (f64, f64) {
        match self.spacing_unit {
            SpacingUnit::Wavelength => (self.spacing_x * lambda, self.spacing_y * lambda),
            SpacingUnit::Meter => (self.spacing_x, self.spacing_y),
        }
    }
}

fn default_n_theta() -> usize {
    91
}

fn default_n_phi() -> usize {
    180
}

fn default_accepted_power() -> f64 {
    1.0
}

/// Where element radiation patterns come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PatternSource {
    Isotropic {
        #[serde(default = "default_n_theta")]
        n_theta: usize,
        #[serde(default = "default_n_phi")]
        n_phi: usize,
        #[serde(default = "default_accepted_power")]
        accepted_power_w: f64,
    },
    Dipole {
        #[serde(default = "default_n_theta")]
        n_theta: usize,
        #[serde(default = "default_n_phi")]
        n_phi: usize,
        #[serde(default = "default_accepted_power")]
        accepted_power_w: f64,
    },
    /// One CSV per listed element, or a single CSV shared by the whole set.
    Files {
        uplink: Vec<PathBuf>,
        downlink: Vec<PathBuf>,
        #[serde(default = "default_accepted_power")]
        accepted_power_w: f64,
    },
}

/// Where the coupling S-matrix comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CouplingSource {
    Synthetic {
        c0: f64,
        alpha: f64,
    },
    /// Port count must equal the array size. The nearest frequency point to
    /// `frequency_hz` (default: the carrier) is used.
    Touchstone {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frequency_hz: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElementSets {
    pub uplink: Vec<usize>,
    pub downlink: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSpec {
    pub theta_deg: f64,
    pub phi_deg: f64,
    pub distance_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSets {
    pub uplink: Vec<UserSpec>,
    pub downlink: Vec<UserSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    #[serde(default)]
    pub phi_delta_up_rad: f64,
    #[serde(default)]
    pub phi_delta_down_rad: f64,
    /// `[re, im]`.
    #[serde(default = "unit_scale")]
    pub c_up: [f64; 2],
    #[serde(default = "unit_scale")]
    pub c_down: [f64; 2],
}

fn unit_scale() -> [f64; 2] {
    [1.0, 0.0]
}

impl Default for PhaseSection {
    fn default() -> Self {
        Self {
            phi_delta_up_rad: 0.0,
            phi_delta_down_rad: 0.0,
            c_up: unit_scale(),
            c_down: unit_scale(),
        }
    }
}

impl PhaseSection {
    pub fn to_link_config(&self) -> LinkPhaseConfig {
        LinkPhaseConfig {
            phi_delta_up: self.phi_delta_up_rad,
            phi_delta_down: self.phi_delta_down_rad,
            c_up: Complex64::new(self.c_up[0], self.c_up[1]),
            c_down: Complex64::new(self.c_down[0], self.c_down[1]),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    #[default]
    Los,
    Rayleigh,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    #[serde(default)]
    pub mode: ChannelMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub angle_mode: AngleMode,
    #[serde(default)]
    pub field_sharing: FieldSharing,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    #[default]
    Search,
    Explicit,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    #[serde(default)]
    pub mode: PartitionMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_up: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_down: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_total: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_up: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_down: Option<usize>,
}

impl PartitionSection {
    pub fn constraint(&self) -> PartitionConstraint {
        PartitionConstraint {
            max_total: self.max_total,
            max_up: self.max_up,
            max_down: self.max_down,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub carrier: CarrierConfig,
    pub array: ArrayConfig,
    pub patterns: PatternSource,
    pub coupling: CouplingSource,
    pub elements: ElementSets,
    pub users: UserSets,
    pub powers: TransmitPowers,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub phase: PhaseSection,
    #[serde(default)]
    pub channel: ChannelSection,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub options: EvalOptions,
}

/// Command-line overrides applied on top of a parsed file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strict_paper: bool,
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| ScenarioError::config("<root>", e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." {
                "<root>".to_string()
            } else {
                path
            };
            ScenarioError::config(field, e.into_inner().to_string().trim().to_string())
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config types always serialize")
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.channel.seed = seed;
        }
        if overrides.strict_paper {
            self.options.strict_paper = true;
        }
    }

    /// Checks everything that can be checked without building channels.
    pub fn validate(&self, base_dir: &Path) -> Result<(), ScenarioError> {
        self.carrier.wavelength_m()?;
        let a = &self.array;
        if a.m_x == 0 {
            return Err(ScenarioError::config("array.m_x", "must be >= 1"));
        }
        if a.m_y == 0 {
            return Err(ScenarioError::config("array.m_y", "must be >= 1"));
        }
        for (field, v) in [
            ("array.spacing_x", a.spacing_x),
            ("array.spacing_y", a.spacing_y),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ScenarioError::config(
                    field,
                    format!("must be > 0, got {v}"),
                ));
            }
        }
        let m = a.element_count();
        let (up, down) = (&self.elements.uplink, &self.elements.downlink);
        validate_partition(m, up, down).map_err(|e| {
            let field = match &e {
                CouplingError::EmptyIndexSet("uplink") => "elements.uplink",
                CouplingError::OverlappingIndices(_) => "elements.downlink",
                CouplingError::IndexOutOfRange { index, .. }
                | CouplingError::DuplicateIndex(index)
                    if up.contains(index) && !down.contains(index) =>
                {
                    "elements.uplink"
                }
                _ => "elements.downlink",
            };
            ScenarioError::config(field, e.to_string())
        })?;

        for (name, users) in [
            ("uplink", &self.users.uplink),
            ("downlink", &self.users.downlink),
        ] {
            if users.is_empty() {
                return Err(ScenarioError::config(format!("users.{name}"), "no users"));
            }
            for (i, u) in users.iter().enumerate() {
                UserPosition::from_degrees(u.theta_deg, u.phi_deg, u.distance_m).map_err(|e| {
                    ScenarioError::config(format!("users.{name}[{i}]"), e.to_string())
                })?;
            }
        }
        self.powers.validate()?;
        self.noise.validate()?;

        match &self.patterns {
            PatternSource::Isotropic {
                n_theta,
                n_phi,
                accepted_power_w,
            }
            | PatternSource::Dipole {
                n_theta,
                n_phi,
                accepted_power_w,
            } => {
                if *n_theta < 2 {
                    return Err(ScenarioError::config("patterns.n_theta", "must be >= 2"));
                }
                if *n_phi < 1 {
                    return Err(ScenarioError::config("patterns.n_phi", "must be >= 1"));
                }
                check_positive("patterns.accepted_power_w", *accepted_power_w)?;
            }
            PatternSource::Files {
                uplink,
                downlink,
                accepted_power_w,
            } => {
                check_positive("patterns.accepted_power_w", *accepted_power_w)?;
                for (name, files, set) in [("uplink", uplink, up), ("downlink", downlink, down)] {
                    if files.len() != 1 && files.len() != set.len() {
                        return Err(ScenarioError::config(
                            format!("patterns.{name}"),
                            format!("expected 1 or {} files, got {}", set.len(), files.len()),
                        ));
                    }
                    for (i, f) in files.iter().enumerate() {
                        if !base_dir.join(f).is_file() {
                            return Err(ScenarioError::config(
                                format!("patterns.{name}[{i}]"),
                                format!("file not found: {}", f.display()),
                            ));
                        }
                    }
                }
            }
        }

        match &self.coupling {
            CouplingSource::Synthetic { c0, alpha } => {
                if !(*c0 > 0.0 && *c0 < 1.0) {
                    return Err(ScenarioError::config(
                        "coupling.c0",
                        format!("must lie in (0, 1), got {c0}"),
                    ));
                }
                check_positive("coupling.alpha", *alpha)?;
            }
            CouplingSource::Touchstone { path, frequency_hz } => {
                if !base_dir.join(path).is_file() {
                    return Err(ScenarioError::config(
                        "coupling.path",
                        format!("file not found: {}", path.display()),
                    ));
                }
                if let Some(f) = frequency_hz {
                    check_positive("coupling.frequency_hz", *f)?;
                }
            }
        }

        for (field, v) in [
            ("phase.phi_delta_up_rad", self.phase.phi_delta_up_rad),
            ("phase.phi_delta_down_rad", self.phase.phi_delta_down_rad),
            ("phase.c_up", self.phase.c_up[0] + self.phase.c_up[1]),
            ("phase.c_down", self.phase.c_down[0] + self.phase.c_down[1]),
        ] {
            if !v.is_finite() {
                return Err(ScenarioError::config(field, "must be finite"));
            }
        }

        let p = &self.partition;
        if p.mode == PartitionMode::Explicit {
            let n_up = p.n_up.ok_or_else(|| {
                ScenarioError::config("partition.n_up", "required in explicit mode")
            })?;
            let n_down = p.n_down.ok_or_else(|| {
                ScenarioError::config("partition.n_down", "required in explicit mode")
            })?;
            if n_up == 0 || n_up > up.len() {
                return Err(ScenarioError::config(
                    "partition.n_up",
                    format!("must lie in 1..={}", up.len()),
                ));
            }
            if n_down == 0 || n_down > down.len() {
                return Err(ScenarioError::config(
                    "partition.n_down",
                    format!("must lie in 1..={}", down.len()),
                ));
            }
        } else if !(1..=up.len()).any(|u| (1..=down.len()).any(|d| p.constraint().allows(u, d))) {
            return Err(ScenarioError::config(
                "partition",
                "constraint excludes every partition",
            ));
        }
        Ok(())
    }
}

fn check_positive(field: &str, v: f64) -> Result<(), ScenarioError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ScenarioError::config(
            field,
            format!("must be > 0, got {v}"),
        ))
    }
}

/// Reads and validates a scenario file. Returns the config and the
/// directory relative paths resolve against.
pub fn load_config(path: &Path) -> Result<(ScenarioConfig, PathBuf), ScenarioError> {
    let text = fs::read_to_string(path).map_err(|e| ScenarioError::io(path, e))?;
    let cfg = ScenarioConfig::parse(&text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    cfg.validate(&base)?;
    Ok((cfg, base))
}

/// Every matrix a scenario evaluates, plus what produced them.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub wavelength_m: f64,
    pub geometry: ArrayGeometry,
    pub scattering: ScatteringMatrix,
    /// Selected minus requested coupling frequency, for measured data.
    pub coupling_offset_hz: Option<f64>,
    pub inputs: LinkInputs,
}

fn element_patterns(
    cfg: &ScenarioConfig,
    base_dir: &Path,
    lambda: f64,
) -> Result<Vec<RadiationPattern>, ScenarioError> {
    let m = cfg.array.element_count();
    let build_err = |e: PatternError| ScenarioError::config("patterns", e.to_string());
    match &cfg.patterns {
        PatternSource::Isotropic {
            n_theta,
            n_phi,
            accepted_power_w,
        } => {
            let p = synthesize_isotropic(lambda, *accepted_power_w, *n_theta, *n_phi)
                .map_err(build_err)?;
            Ok(vec![p; m])
        }
        PatternSource::Dipole {
            n_theta,
            n_phi,
            accepted_power_w,
        } => {
            let p = synthesize_dipole(lambda, *accepted_power_w, *n_theta, *n_phi)
                .map_err(build_err)?;
            Ok(vec![p; m])
        }
        PatternSource::Files {
            uplink,
            downlink,
            accepted_power_w,
        } => {
            let mut cache: HashMap<PathBuf, RadiationPattern> = HashMap::new();
            let mut load =
                |name: &str, i: usize, rel: &PathBuf| -> Result<RadiationPattern, ScenarioError> {
                    let path = base_dir.join(rel);
                    if let Some(p) = cache.get(&path) {
                        return Ok(p.clone());
                    }
                    let field = format!("patterns.{name}[{i}]");
                    let p = load_pattern(&path, LinkRole::Uplink, lambda, *accepted_power_w)
                        .map_err(|e| pattern_error(&field, &path, e))?;
                    cache.insert(path, p.clone());
                    Ok(p)
                };
            // unlisted elements reuse the first uplink pattern
            let first = load("uplink", 0, &uplink[0])?;
            let mut out = vec![first; m];
            for (name, files, set) in [
                ("uplink", uplink, &cfg.elements.uplink),
                ("downlink", downlink, &cfg.elements.downlink),
            ] {
                for (pos, &k) in set.iter().enumerate() {
                    let i = if files.len() == 1 { 0 } else { pos };
                    out[k - 1] = load(name, i, &files[i])?;
                }
            }
            Ok(out)
        }
    }
}

fn users(specs: &[UserSpec]) -> Vec<UserPosition> {
    specs
        .iter()
        .map(|u| {
            UserPosition::from_degrees(u.theta_deg, u.phi_deg, u.distance_m).expect("validated")
        })
        .collect()
}

fn with_role(
    patterns: &[RadiationPattern],
    elements: &[usize],
    role: LinkRole,
) -> Vec<RadiationPattern> {
    elements
        .iter()
        .map(|&k| patterns[k - 1].clone().with_role(role))
        .collect()
}

/// Builds all matrices for a validated config.
pub fn build_scenario(cfg: &ScenarioConfig, base_dir: &Path) -> Result<Scenario, ScenarioError> {
    let lambda = cfg.carrier.wavelength_m()?;
    let (a, b) = cfg.array.spacing_m(lambda);
    let geometry = build_planar_array(cfg.array.m_x, cfg.array.m_y, a, b)
        .map_err(|e| ScenarioError::config("array", e.to_string()))?;
    let m = geometry.len();
    let patterns = element_patterns(cfg, base_dir, lambda)?;
    let up = &cfg.elements.uplink;
    let down = &cfg.elements.downlink;
    let all: Vec<usize> = (1..=m).collect();
    let up_users = users(&cfg.users.uplink);
    let down_users = users(&cfg.users.downlink);

    let builder = ChannelBuilder::new(&geometry, cfg.phase.to_link_config())
        .angle_mode(cfg.channel.angle_mode)
        .field_sharing(cfg.channel.field_sharing);
    let seed_up = cfg.channel.seed;
    let seed_down = cfg.channel.seed.wrapping_add(DOWNLINK_SEED_OFFSET);
    let uplink = |elements: &[usize]| {
        let p = with_role(&patterns, elements, LinkRole::Uplink);
        match cfg.channel.mode {
            ChannelMode::Los => builder.uplink(elements, &p, &up_users),
            ChannelMode::Rayleigh => {
                builder.rayleigh(LinkRole::Uplink, elements, &p, &up_users, seed_up)
            }
        }
        .map(|h| h.into_entries())
        .map_err(|e| channel_error("users.uplink", e))
    };
    let downlink = |elements: &[usize]| {
        let p = with_role(&patterns, elements, LinkRole::Downlink);
        match cfg.channel.mode {
            ChannelMode::Los => builder.downlink(elements, &p, &down_users),
            ChannelMode::Rayleigh => {
                builder.rayleigh(LinkRole::Downlink, elements, &p, &down_users, seed_down)
            }
        }
        .map(|h| h.into_entries())
        .map_err(|e| channel_error("users.downlink", e))
    };
    let h_up = uplink(up)?;
    let h_up_half = uplink(&all)?;
    let h_down = downlink(down)?;
    let h_down_half = downlink(&all)?;

    let (scattering, coupling_offset_hz) = match &cfg.coupling {
        CouplingSource::Synthetic { c0, alpha } => (
            synthesize_coupling(&geometry, lambda, *c0, *alpha)
                .map_err(|e| coupling_error("coupling", None, e))?,
            None,
        ),
        CouplingSource::Touchstone { path, frequency_hz } => {
            let full = base_dir.join(path);
            let f = frequency_hz.unwrap_or(SPEED_OF_LIGHT / lambda);
            let (s, delta) = load_touchstone(&full, f)
                .map_err(|e| coupling_error("coupling.path", Some(&full), e))?;
            if s.port_count() != m {
                return Err(ScenarioError::config(
                    "coupling.path",
                    format!("{} ports but the array has {m} elements", s.port_count()),
                ));
            }
            (s, Some(delta))
        }
    };
    let h_self = build_h_self(&scattering, up, down)
        .map_err(|e| coupling_error("elements", None, e))?
        .entries()
        .clone();

    let inputs = LinkInputs {
        h_up,
        h_down,
        h_self,
        h_up_half,
        h_down_half,
        powers: cfg.powers,
        noise: cfg.noise,
    };
    inputs.validate()?;
    Ok(Scenario {
        config: cfg.clone(),
        wavelength_m: lambda,
        geometry,
        scattering,
        coupling_offset_hz,
        inputs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ScenarioConfig,
    pub wavelength_m: f64,
    pub element_count: usize,
    pub h_self_frobenius: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coupling_offset_hz: Option<f64>,
    pub link: LinkReport,
}

pub const RUN_CSV_HEADER: &str = "n_up,n_down,sinr_up_precoded,sinr_down_precoded,\
capacity_up_precoded,capacity_down_precoded,capacity_up_reference,capacity_down_reference,\
capacity_up_full_ideal,capacity_down_full_ideal,capacity_up_half,capacity_down_half";

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report types always serialize")
    }

    pub fn csv_row(&self) -> String {
        let l = &self.link;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            l.n_up,
            l.n_down,
            l.precoded.up.sinr,
            l.precoded.down.sinr,
            l.precoded.up.capacity_bps_hz,
            l.precoded.down.capacity_bps_hz,
            l.reference.up.capacity_bps_hz,
            l.reference.down.capacity_bps_hz,
            l.full_ideal.up.capacity_bps_hz,
            l.full_ideal.down.capacity_bps_hz,
            l.half_duplex.up.capacity_bps_hz,
            l.half_duplex.down.capacity_bps_hz,
        )
    }
}

fn numerical(e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Numerical(e.to_string())
}

/// Evaluates one scenario at its configured or best partition.
pub fn evaluate_scenario(scenario: &Scenario) -> Result<RunReport, ScenarioError> {
    let cfg = &scenario.config;
    let inputs = &scenario.inputs;
    let svd = svd_decompose(&inputs.h_self).map_err(numerical)?;
    let (n_up, n_down) = match cfg.partition.mode {
        PartitionMode::Explicit => (
            cfg.partition.n_up.expect("validated"),
            cfg.partition.n_down.expect("validated"),
        ),
        PartitionMode::Search => {
            let ranked = search_with_svd(
                &svd,
                &inputs.h_up,
                &inputs.h_down,
                &inputs.powers,
                &inputs.noise,
                &cfg.partition.constraint(),
                &cfg.options,
            )?;
            (ranked[0].n_up, ranked[0].n_down)
        }
    };
    let link = evaluate_with_svd(inputs, &svd, n_up, n_down, &cfg.options)?;
    Ok(RunReport {
        config: cfg.clone(),
        wavelength_m: scenario.wavelength_m,
        element_count: scenario.geometry.len(),
        h_self_frobenius: frobenius_sq(&inputs.h_self).sqrt(),
        coupling_offset_hz: scenario.coupling_offset_hz,
        link,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), ScenarioError> {
    fs::write(path, contents).map_err(|e| ScenarioError::io(path, e))
}

fn load_with(
    config_path: &Path,
    overrides: &Overrides,
) -> Result<(ScenarioConfig, PathBuf), ScenarioError> {
    let (mut cfg, base) = load_config(config_path)?;
    cfg.apply(overrides);
    Ok((cfg, base))
}

/// Full pipeline. Writes `<output>.json` and a one-row `<output>.csv`.
pub fn run(
    config_path: &Path,
    output_path: &Path,
    overrides: &Overrides,
) -> Result<RunReport, ScenarioError> {
    let (cfg, base) = load_with(config_path, overrides)?;
    let report = evaluate_scenario(&build_scenario(&cfg, &base)?)?;
    write_file(
        &output_path.with_extension("json"),
        &(report.to_json() + "\n"),
    )?;
    write_file(
        &output_path.with_extension("csv"),
        &format!("{RUN_CSV_HEADER}\n{}\n", report.csv_row()),
    )?;
    Ok(report)
}

/// Ranked partition table plus the figures it is judged against.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionTable {
    pub m_up: usize,
    pub m_down: usize,
    pub rows: Vec<PartitionScore>,
    pub reference_sum_capacity: f64,
}

impl PartitionTable {
    pub fn best(&self) -> &PartitionScore {
        &self.rows[0]
    }

    /// Whether the best partition keeps fewer than half the downlink count
    /// of effective uplink antennas. `None` unless the two sides are equal.
    pub fn half_rule_holds(&self) -> Option<bool> {
        (self.m_up == self.m_down).then(|| 2 * self.best().n_up < self.m_down)
    }

    pub fn verdict_line(&self) -> String {
        let b = self.best();
        let status = match self.half_rule_holds() {
            Some(true) => "holds",
            Some(false) => "fails",
            None => "not applicable (uplink and downlink counts differ)",
        };
        format!(
            "# verdict: n_up < m_down/2 at the best partition {status} (best n_up={}, n_down={}, m_up={}, m_down={})",
            b.n_up, b.n_down, self.m_up, self.m_down
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "rank,n_up,n_down,sinr_up,sinr_down,capacity_up,capacity_down,sum_capacity\n",
        );
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                i + 1,
                r.n_up,
                r.n_down,
                r.sinr_up,
                r.sinr_down,
                r.capacity_up,
                r.capacity_down,
                r.sum_capacity
            );
        }
        let _ = writeln!(
            out,
            "# reference_sum_capacity: {}",
            self.reference_sum_capacity
        );
        let _ = writeln!(out, "{}", self.verdict_line());
        out
    }
}

fn reference_sum(inputs: &LinkInputs, options: &EvalOptions) -> f64 {
    let (up, down) = sinr_reference(
        &inputs.h_up,
        &inputs.h_down,
        &inputs.h_self,
        &inputs.powers,
        &inputs.noise,
        options,
    );
    capacity(up, DuplexMode::Full) + capacity(down, DuplexMode::Full)
}

pub fn partition_table(scenario: &Scenario) -> Result<PartitionTable, ScenarioError> {
    let cfg = &scenario.config;
    let inputs = &scenario.inputs;
    let svd = svd_decompose(&inputs.h_self).map_err(numerical)?;
    let rows = search_with_svd(
        &svd,
        &inputs.h_up,
        &inputs.h_down,
        &inputs.powers,
        &inputs.noise,
        &cfg.partition.constraint(),
        &cfg.options,
    )?;
    Ok(PartitionTable {
        m_up: svd.m_up(),
        m_down: svd.m_down(),
        rows,
        reference_sum_capacity: reference_sum(inputs, &cfg.options),
    })
}

/// Writes the exhaustive partition table as CSV.
pub fn sweep_partition(
    config_path: &Path,
    output_path: &Path,
    overrides: &Overrides,
) -> Result<PartitionTable, ScenarioError> {
    let (cfg, base) = load_with(config_path, overrides)?;
    let table = partition_table(&build_scenario(&cfg, &base)?)?;
    write_file(output_path, &table.to_csv())?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpacingRow {
    pub spacing_wavelengths: f64,
    pub h_self_frobenius: f64,
    pub best: PartitionScore,
    pub reference_sum_capacity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpacingSweep {
    pub rows: Vec<SpacingRow>,
}

impl SpacingSweep {
    /// Row with the highest best-partition sum capacity (first on ties).
    pub fn peak(&self) -> &SpacingRow {
        let mut best = &self.rows[0];
        for r in &self.rows[1..] {
            if r.best.sum_capacity > best.best.sum_capacity {
                best = r;
            }
        }
        best
    }

    pub fn half_wavelength_is_best(&self) -> bool {
        (self.peak().spacing_wavelengths - 0.5).abs() <= HALF_WAVELENGTH_TOL
    }

    pub fn verdict_line(&self) -> String {
        let status = if self.half_wavelength_is_best() {
            "holds"
        } else {
            "fails"
        };
        format!(
            "# verdict: 0.5 wavelength spacing is best {status} (peak at {} wavelengths, sum capacity {})",
            self.peak().spacing_wavelengths,
            self.peak().best.sum_capacity
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "spacing_wavelengths,h_self_frobenius,best_n_up,best_n_down,best_sum_capacity,reference_sum_capacity\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.spacing_wavelengths,
                r.h_self_frobenius,
                r.best.n_up,
                r.best.n_down,
                r.best.sum_capacity,
                r.reference_sum_capacity
            );
        }
        let _ = writeln!(out, "{}", self.verdict_line());
        out
    }
}

/// Rebuilds geometry and synthetic coupling at each spacing (in
/// wavelengths, both axes) and keeps the best partition per spacing.
pub fn spacing_sweep(
    cfg: &ScenarioConfig,
    base_dir: &Path,
    spacings: &[f64],
) -> Result<SpacingSweep, ScenarioError> {
    if spacings.is_empty() {
        return Err(ScenarioError::config("spacings", "empty spacing list"));
    }
    if let Some(s) = spacings.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(ScenarioError::config(
            "spacings",
            format!("must be > 0, got {s}"),
        ));
    }
    if !matches!(cfg.coupling, CouplingSource::Synthetic { .. }) {
        return Err(ScenarioError::config(
            "coupling.kind",
            "spacing sweeps need synthetic coupling",
        ));
    }
    let rows = spacings
        .par_iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.array.spacing_x = s;
            c.array.spacing_y = s;
            c.array.spacing_unit = SpacingUnit::Wavelength;
            let scenario = build_scenario(&c, base_dir)?;
            let table = partition_table(&scenario)?;
            Ok(SpacingRow {
                spacing_wavelengths: s,
                h_self_frobenius: frobenius_sq(&scenario.inputs.h_self).sqrt(),
                best: *table.best(),
                reference_sum_capacity: table.reference_sum_capacity,
            })
        })
        .collect::<Result<Vec<_>, ScenarioError>>()?;
    Ok(SpacingSweep { rows })
}

pub fn sweep_spacing(
    config_path: &Path,
    spacings: &[f64],
    output_path: &Path,
    overrides: &Overrides,
) -> Result<SpacingSweep, ScenarioError> {
    let (cfg, base) = load_with(config_path, overrides)?;
    let sweep = spacing_sweep(&cfg, &base, spacings)?;
    write_file(output_path, &sweep.to_csv())?;
    Ok(sweep)
}
