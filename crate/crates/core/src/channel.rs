//! Channel synthesis from element patterns.
//!
//! Line-of-sight coefficients propagate the stored far field from the
//! reference sphere to the user:
//!
//! ```text
//! h = √G(θ,φ) · λ/(4πd) · exp(j(Φ₀(θ,φ) + Φ_δ) − j2π(d − d₀)/λ)
//! ```
//!
//! Rayleigh coefficients integrate the complex gain pattern
//! `E^G = √G · exp(j(Φ₀ − 2πd₀/λ))` against an i.i.d. unit-variance
//! circular Gaussian angular field `p(θ,φ)`:
//!
//! ```text
//! ĥ = C · exp(−jκd)/d · Σ_nodes E^G · p · w
//! ```
//!
//! with `w` the sphere quadrature weights of [`crate::patterns`].

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{element_to_user, AngleMode, ArrayGeometry, GeometryError, UserPosition};
use crate::linalg::{all_finite, CMatrix};
use crate::patterns::{LinkRole, RadiationPattern, ETA0};

/// Relative agreement required between the Friis power and the
/// field-propagation power.
pub const FRIIS_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("pattern {index} is tagged {found:?}, expected {expected:?}")]
    RoleMismatch {
        index: usize,
        expected: LinkRole,
        found: LinkRole,
    },
    #[error("patterns sampled on different grids cannot share an angular field")]
    GridMismatch,
    #[error("pattern wavelengths differ ({0} m vs {1} m)")]
    WavelengthMismatch(f64, f64),
    #[error("non-finite channel entry")]
    NonFinite,
    #[error(
        "inconsistent pattern normalization: Friis {friis} W vs field route {field} W (rel {rel:e})"
    )]
    InconsistentNormalization { friis: f64, field: f64, rel: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Guided-wave phase offsets and scale constants of the ideal user antennas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkPhaseConfig {
    pub phi_delta_up: f64,
    pub phi_delta_down: f64,
    pub c_up: Complex64,
    pub c_down: Complex64,
}

impl Default for LinkPhaseConfig {
    fn default() -> Self {
        Self {
            phi_delta_up: 0.0,
            phi_delta_down: 0.0,
            c_up: Complex64::new(1.0, 0.0),
            c_down: Complex64::new(1.0, 0.0),
        }
    }
}

impl LinkPhaseConfig {
    pub fn phi_delta(&self, role: LinkRole) -> f64 {
        match role {
            LinkRole::Uplink => self.phi_delta_up,
            LinkRole::Downlink => self.phi_delta_down,
        }
    }

    pub fn scale(&self, role: LinkRole) -> Complex64 {
        match role {
            LinkRole::Uplink => self.c_up,
            LinkRole::Downlink => self.c_down,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Los,
    Rayleigh,
}

/// Whether Rayleigh elements share one angular field per user.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSharing {
    #[default]
    PerUser,
    PerElement,
}

/// Uplink matrices are elements × users, downlink matrices users × elements.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    entries: CMatrix,
    role: LinkRole,
    provenance: Provenance,
    wavelength_m: f64,
}

impl ChannelMatrix {
    /// Wraps raw entries. `entries` must already be laid out for `role`.
    pub fn new(
        entries: CMatrix,
        role: LinkRole,
        provenance: Provenance,
        wavelength_m: f64,
    ) -> Result<Self, ChannelError> {
        if !all_finite(&entries) {
            return Err(ChannelError::NonFinite);
        }
        Ok(Self {
            entries,
            role,
            provenance,
            wavelength_m,
        })
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    pub fn into_entries(self) -> CMatrix {
        self.entries
    }

    pub fn role(&self) -> LinkRole {
        self.role
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn wavelength_m(&self) -> f64 {
        self.wavelength_m
    }

    pub fn element_count(&self) -> usize {
        match self.role {
            LinkRole::Uplink => self.entries.nrows(),
            LinkRole::Downlink => self.entries.ncols(),
        }
    }

    pub fn user_count(&self) -> usize {
        match self.role {
            LinkRole::Uplink => self.entries.ncols(),
            LinkRole::Downlink => self.entries.nrows(),
        }
    }
}

/// LOS coefficient between one element and a user at (θ, φ, d).
pub fn los_coefficient(
    pattern: &RadiationPattern,
    theta: f64,
    phi: f64,
    distance_m: f64,
    phase_cfg: &LinkPhaseConfig,
) -> Complex64 {
    let lambda = pattern.wavelength_m();
    let field = pattern.sample(theta, phi);
    let magnitude =
        pattern.gain_from_field(field.norm_sqr()).sqrt() * lambda / (4.0 * PI * distance_m);
    let phase = field.phase() + phase_cfg.phi_delta(pattern.link_role())
        - 2.0 * PI * (distance_m - pattern.ref_distance_m()) / lambda;
    Complex64::from_polar(magnitude, phase)
}

/// Received power by the Friis formula, cross-checked against direct
/// propagation of the stored field followed by the ideal-antenna power
/// `P_r = ‖E_r‖² λ²/(8πη₀)`.
pub fn friis_power_check(
    pattern: &RadiationPattern,
    theta: f64,
    phi: f64,
    distance_m: f64,
    p0_w: f64,
) -> Result<f64, ChannelError> {
    let lambda = pattern.wavelength_m();
    let d0 = pattern.ref_distance_m();
    let friis = p0_w * lambda * lambda * pattern.gain(theta, phi) / (4.0 * PI * distance_m).powi(2);

    // stored fields are normalized to the pattern's own accepted power
    let drive = (p0_w / pattern.accepted_power_w()).sqrt();
    let e0 = pattern.sample(theta, phi);
    let spread = Complex64::from_polar(
        drive * d0 / distance_m,
        -2.0 * PI * (distance_m - d0) / lambda,
    );
    let e_r_sq = (e0.e_theta * spread).norm_sqr() + (e0.e_phi * spread).norm_sqr();
    let field = e_r_sq * lambda * lambda / (8.0 * PI * ETA0);

    let scale = friis.abs().max(field.abs());
    let rel = if scale == 0.0 {
        0.0
    } else {
        (friis - field).abs() / scale
    };
    if rel > FRIIS_TOLERANCE || !rel.is_finite() {
        return Err(ChannelError::InconsistentNormalization { friis, field, rel });
    }
    Ok(friis)
}

/// Pattern-weighted Rayleigh integrator for one element.
///
/// Holds `E^G · w` for every grid node so repeated draws only cost the
/// Gaussian samples and one dot product.
#[derive(Debug, Clone)]
pub struct RayleighKernel {
    weighted_gain_field: Vec<Complex64>,
    wavenumber: f64,
    role: LinkRole,
}

impl RayleighKernel {
    pub fn new(pattern: &RadiationPattern) -> Self {
        let wavenumber = 2.0 * PI / pattern.wavelength_m();
        let reference_phase = -wavenumber * pattern.ref_distance_m();
        let q = pattern.quadrature();
        let (nt, np) = pattern.shape();
        let mut weighted_gain_field = Vec::with_capacity(nt * np);
        for i in 0..nt {
            for j in 0..np {
                let node = pattern.node(i, j);
                let gain = pattern.gain_from_field(node.norm_sqr());
                let eg = Complex64::from_polar(gain.sqrt(), node.phase() + reference_phase);
                weighted_gain_field.push(eg * q.node(i, j));
            }
        }
        Self {
            weighted_gain_field,
            wavenumber,
            role: pattern.link_role(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.weighted_gain_field.len()
    }

    /// Analytic E[|ĥ|²] = |C/d|² Σ |E^G w|² for a unit-variance field.
    pub fn expected_power(&self, distance_m: f64, phase_cfg: &LinkPhaseConfig) -> f64 {
        let c = phase_cfg.scale(self.role);
        c.norm_sqr() / (distance_m * distance_m)
            * self
                .weighted_gain_field
                .iter()
                .map(|z| z.norm_sqr())
                .sum::<f64>()
    }

    /// ĥ for a given angular field realization.
    pub fn coefficient_with_field(
        &self,
        field: &[Complex64],
        distance_m: f64,
        phase_cfg: &LinkPhaseConfig,
    ) -> Complex64 {
        assert_eq!(field.len(), self.weighted_gain_field.len());
        let integral: Complex64 = self
            .weighted_gain_field
            .iter()
            .zip(field)
            .map(|(g, p)| g * p)
            .sum();
        let propagation = Complex64::from_polar(1.0 / distance_m, -self.wavenumber * distance_m);
        phase_cfg.scale(self.role) * propagation * integral
    }

    pub fn coefficient<R: Rng + ?Sized>(
        &self,
        distance_m: f64,
        phase_cfg: &LinkPhaseConfig,
        rng: &mut R,
    ) -> Complex64 {
        let field = draw_angular_field(self.node_count(), rng);
        self.coefficient_with_field(&field, distance_m, phase_cfg)
    }
}

/// `n` i.i.d. samples of (x + jy)/√2 with x, y standard normal.
pub fn draw_angular_field<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Complex64> {
    (0..n)
        .map(|_| {
            let x: f64 = rng.sample(StandardNormal);
            let y: f64 = rng.sample(StandardNormal);
            Complex64::new(x, y) * FRAC_1_SQRT_2
        })
        .collect()
}

/// One Rayleigh coefficient with a fresh angular field from `rng`.
pub fn rayleigh_coefficient<R: Rng + ?Sized>(
    pattern: &RadiationPattern,
    distance_m: f64,
    phase_cfg: &LinkPhaseConfig,
    rng: &mut R,
) -> Complex64 {
    RayleighKernel::new(pattern).coefficient(distance_m, phase_cfg, rng)
}

/// Random stream for user `user` (0-based) under a master seed.
pub fn user_stream(seed: u64, user: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user as u64);
    rng
}

/// Random stream for one (user, element) pair, disjoint from every
/// [`user_stream`].
pub fn element_stream(seed: u64, user: usize, element: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1u64 << 63) | ((user as u64) << 32) | element as u64);
    rng
}

/// Assembles channel matrices for a subset of array elements.
///
/// `elements` are 1-based indices into the geometry and pair up with
/// `patterns` position by position. Repeated indices are allowed.
#[derive(Debug, Clone, Copy)]
pub struct ChannelBuilder<'a> {
    geometry: &'a ArrayGeometry,
    phase: LinkPhaseConfig,
    angle_mode: AngleMode,
    field_sharing: FieldSharing,
}

impl<'a> ChannelBuilder<'a> {
    pub fn new(geometry: &'a ArrayGeometry, phase: LinkPhaseConfig) -> Self {
        Self {
            geometry,
            phase,
            angle_mode: AngleMode::default(),
            field_sharing: FieldSharing::default(),
        }
    }

    pub fn angle_mode(mut self, mode: AngleMode) -> Self {
        self.angle_mode = mode;
        self
    }

    pub fn field_sharing(mut self, sharing: FieldSharing) -> Self {
        self.field_sharing = sharing;
        self
    }

    fn check_inputs(
        &self,
        role: LinkRole,
        elements: &[usize],
        patterns: &[RadiationPattern],
        users: &[UserPosition],
    ) -> Result<f64, ChannelError> {
        if elements.is_empty() || users.is_empty() {
            return Err(ChannelError::DimensionMismatch(format!(
                "{} elements, {} users",
                elements.len(),
                users.len()
            )));
        }
        if elements.len() != patterns.len() {
            return Err(ChannelError::DimensionMismatch(format!(
                "{} elements but {} patterns",
                elements.len(),
                patterns.len()
            )));
        }
        for &k in elements {
            self.geometry.check_index(k)?;
        }
        let lambda = patterns[0].wavelength_m();
        for (index, p) in patterns.iter().enumerate() {
            if p.link_role() != role {
                return Err(ChannelError::RoleMismatch {
                    index,
                    expected: role,
                    found: p.link_role(),
                });
            }
            if p.wavelength_m() != lambda {
                return Err(ChannelError::WavelengthMismatch(lambda, p.wavelength_m()));
            }
        }
        Ok(lambda)
    }

    /// Elements × users LOS coefficients.
    fn los_entries(
        &self,
        role: LinkRole,
        elements: &[usize],
        patterns: &[RadiationPattern],
        users: &[UserPosition],
    ) -> Result<(CMatrix, f64), ChannelError> {
        let lambda = self.check_inputs(role, elements, patterns, users)?;
        let mut h = CMatrix::zeros(elements.len(), users.len());
        for (r, (&k, pattern)) in elements.iter().zip(patterns).enumerate() {
            for (c, user) in users.iter().enumerate() {
                let v = element_to_user(self.geometry, k, user, lambda, self.angle_mode)?;
                h[(r, c)] = los_coefficient(pattern, v.theta, v.phi, v.distance_m, &self.phase);
            }
        }
        Ok((h, lambda))
    }

    /// M_up × K_up line-of-sight uplink matrix.
    pub fn uplink(
        &self,
        elements: &[usize],
        patterns: &[RadiationPattern],
        users: &[UserPosition],
    ) -> Result<ChannelMatrix, ChannelError> {
        let (h, lambda) = self.los_entries(LinkRole::Uplink, elements, patterns, users)?;
        ChannelMatrix::new(h, LinkRole::Uplink, Provenance::Los, lambda)
    }

    /// K_down × M_down line-of-sight downlink matrix.
    pub fn downlink(
        &self,
        elements: &[usize],
        patterns: &[RadiationPattern],
        users: &[UserPosition],
    ) -> Result<ChannelMatrix, ChannelError> {
        let (h, lambda) = self.los_entries(LinkRole::Downlink, elements, patterns, users)?;
        ChannelMatrix::new(h.transpose(), LinkRole::Downlink, Provenance::Los, lambda)
    }

    /// Rayleigh matrix laid out for `role`.
    ///
    /// With [`FieldSharing::PerUser`] every element sees the same angular
    /// field realization for a given user, drawn from
    /// [`user_stream`]`(seed, user)`.
    pub fn rayleigh(
        &self,
        role: LinkRole,
        elements: &[usize],
        patterns: &[RadiationPattern],
        users: &[UserPosition],
        seed: u64,
    ) -> Result<ChannelMatrix, ChannelError> {
        let lambda = self.check_inputs(role, elements, patterns, users)?;
        if self.field_sharing == FieldSharing::PerUser
            && patterns.iter().any(|p| !p.same_grid(&patterns[0]))
        {
            return Err(ChannelError::GridMismatch);
        }
        let kernels: Vec<RayleighKernel> = patterns.iter().map(RayleighKernel::new).collect();

        let columns: Vec<Vec<Complex64>> = users
            .par_iter()
            .enumerate()
            .map(|(c, user)| {
                let shared = match self.field_sharing {
                    FieldSharing::PerUser => Some(draw_angular_field(
                        kernels[0].node_count(),
                        &mut user_stream(seed, c),
                    )),
                    FieldSharing::PerElement => None,
                };
                elements
                    .iter()
                    .zip(&kernels)
                    .enumerate()
                    .map(|(r, (&k, kernel))| {
                        let v = element_to_user(self.geometry, k, user, lambda, self.angle_mode)?;
                        Ok(match &shared {
                            Some(field) => {
                                kernel.coefficient_with_field(field, v.distance_m, &self.phase)
                            }
                            None => kernel.coefficient(
                                v.distance_m,
                                &self.phase,
                                &mut element_stream(seed, c, r),
                            ),
                        })
                    })
                    .collect::<Result<Vec<_>, ChannelError>>()
            })
            .collect::<Result<_, _>>()?;

        let mut h = CMatrix::zeros(elements.len(), users.len());
        for (c, column) in columns.iter().enumerate() {
            for (r, v) in column.iter().enumerate() {
                h[(r, c)] = *v;
            }
        }
        let h = match role {
            LinkRole::Uplink => h,
            LinkRole::Downlink => h.transpose(),
        };
        ChannelMatrix::new(h, role, Provenance::Rayleigh, lambda)
    }
}

/// LOS uplink with default angle handling. Entry (i, j) couples
/// `elements[i]` with `users[j]`.
pub fn assemble_uplink(
    geometry: &ArrayGeometry,
    elements: &[usize],
    patterns: &[RadiationPattern],
    users: &[UserPosition],
    phase_cfg: &LinkPhaseConfig,
) -> Result<ChannelMatrix, ChannelError> {
    ChannelBuilder::new(geometry, *phase_cfg).uplink(elements, patterns, users)
}

/// LOS downlink with default angle handling. Entry (j, i) couples
/// `users[j]` with `elements[i]`.
pub fn assemble_downlink(
    geometry: &ArrayGeometry,
    elements: &[usize],
    patterns: &[RadiationPattern],
    users: &[UserPosition],
    phase_cfg: &LinkPhaseConfig,
) -> Result<ChannelMatrix, ChannelError> {
    ChannelBuilder::new(geometry, *phase_cfg).downlink(elements, patterns, users)
}

/// Rayleigh matrix with one shared angular field per user.
pub fn assemble_rayleigh(
    geometry: &ArrayGeometry,
    role: LinkRole,
    elements: &[usize],
    patterns: &[RadiationPattern],
    users: &[UserPosition],
    phase_cfg: &LinkPhaseConfig,
    seed: u64,
) -> Result<ChannelMatrix, ChannelError> {
    ChannelBuilder::new(geometry, *phase_cfg).rayleigh(role, elements, patterns, users, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_planar_array;
    use crate::patterns::{synthesize_dipole, synthesize_isotropic, uniform_grid, FieldSample};
    use proptest::prelude::*;

    const LAMBDA: f64 = 0.1;

    fn iso() -> RadiationPattern {
        synthesize_isotropic(LAMBDA, 1.0, 19, 36).unwrap()
    }

    fn wrapped(a: f64) -> f64 {
        (a + PI).rem_euclid(2.0 * PI) - PI
    }

    #[test]
    fn isotropic_at_reference_distance() {
        let h = los_coefficient(&iso(), 0.4, 1.0, 1.0, &LinkPhaseConfig::default());
        assert!((h.re - LAMBDA / (4.0 * PI)).abs() < 1e-15);
        assert!(h.im.abs() < 1e-15);
    }

    #[test]
    fn one_wavelength_further() {
        let p = iso();
        let cfg = LinkPhaseConfig::default();
        let h0 = los_coefficient(&p, 0.4, 1.0, 1.0, &cfg);
        let h1 = los_coefficient(&p, 0.4, 1.0, 1.0 + LAMBDA, &cfg);
        assert!((h1.norm() - h0.norm() / (1.0 + LAMBDA)).abs() < 1e-15);
        assert!(wrapped(h1.arg()).abs() < 1e-9);
    }

    #[test]
    fn dipole_broadside_magnitude() {
        let p = synthesize_dipole(LAMBDA, 1.0, 181, 72).unwrap();
        let h = los_coefficient(
            &p,
            PI / 2.0,
            0.3,
            100.0 * LAMBDA,
            &LinkPhaseConfig::default(),
        );
        let expected = 1.5f64.sqrt() / (400.0 * PI);
        assert!((h.norm() - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn phase_offsets_apply_per_role() {
        let cfg = LinkPhaseConfig {
            phi_delta_up: 0.3,
            phi_delta_down: -0.7,
            ..Default::default()
        };
        let up = iso();
        let down = iso().with_role(LinkRole::Downlink);
        let hu = los_coefficient(&up, 0.2, 0.0, 1.0, &cfg);
        let hd = los_coefficient(&down, 0.2, 0.0, 1.0, &cfg);
        assert!((hu.arg() - 0.3).abs() < 1e-12);
        assert!((hd.arg() + 0.7).abs() < 1e-12);
    }

    #[test]
    fn friis_plug_in_values() {
        let p = synthesize_isotropic(LAMBDA, 1.0, 19, 36).unwrap();
        let pr = friis_power_check(&p, 0.5, 0.5, LAMBDA, 1.0).unwrap();
        assert!((pr - 1.0 / (4.0 * PI).powi(2)).abs() < 1e-15);
        let near = friis_power_check(&p, 0.5, 0.5, 3.0, 1.0).unwrap();
        let far = friis_power_check(&p, 0.5, 0.5, 6.0, 1.0).unwrap();
        assert!((near / far - 4.0).abs() < 1e-12);

        let dip = synthesize_dipole(LAMBDA, 1.0, 181, 36).unwrap();
        let pr = friis_power_check(&dip, PI / 2.0, 0.0, 10.0, 1.0).unwrap();
        let expected = 1.5 * 0.1f64.powi(2) / (4.0 * PI * 10.0).powi(2);
        assert!((pr - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn friis_scales_with_drive_power() {
        let p = iso();
        let a = friis_power_check(&p, 0.5, 0.5, 5.0, 1.0).unwrap();
        let b = friis_power_check(&p, 0.5, 0.5, 5.0, 3.0).unwrap();
        assert!((b / a - 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_element_uplink() {
        let g = build_planar_array(1, 1, 1.0, 1.0).unwrap();
        let u = UserPosition::new(0.0, 0.0, 1.0).unwrap();
        let h = assemble_uplink(&g, &[1], &[iso()], &[u], &LinkPhaseConfig::default()).unwrap();
        assert_eq!(h.entries().shape(), (1, 1));
        assert!((h.entries()[(0, 0)] - Complex64::new(LAMBDA / (4.0 * PI), 0.0)).norm() < 1e-15);
        assert_eq!(h.provenance(), Provenance::Los);
    }

    #[test]
    fn broadside_entries_nearly_equal() {
        let g = build_planar_array(2, 1, 0.5 * LAMBDA, 0.5 * LAMBDA).unwrap();
        let u = UserPosition::new(0.0, 0.0, 1000.0 * LAMBDA).unwrap();
        let h = assemble_uplink(
            &g,
            &[1, 2],
            &[iso(), iso()],
            &[u],
            &LinkPhaseConfig::default(),
        )
        .unwrap();
        let (a, b) = (h.entries()[(0, 0)], h.entries()[(1, 0)]);
        // equal up to the a²/2d path offset of the non-origin element
        assert!((a.norm() - b.norm()).abs() < 1e-6 * a.norm());
        assert!(wrapped(a.arg() - b.arg()).abs() < 1e-3);
    }

    #[test]
    fn endfire_phase_difference_is_pi() {
        let g = build_planar_array(2, 1, 0.5 * LAMBDA, 0.5 * LAMBDA).unwrap();
        let u = UserPosition::new(PI / 2.0, 0.0, 1000.0 * LAMBDA).unwrap();
        let h = assemble_uplink(
            &g,
            &[1, 2],
            &[iso(), iso()],
            &[u],
            &LinkPhaseConfig::default(),
        )
        .unwrap();
        let diff = wrapped(h.entries()[(1, 0)].arg() - h.entries()[(0, 0)].arg());
        assert!((diff.abs() - PI).abs() < 1e-3, "{diff}");
    }

    #[test]
    fn downlink_is_transpose_of_uplink() {
        let g = build_planar_array(2, 1, 0.05, 0.05).unwrap();
        let users = [
            UserPosition::new(0.3, 0.1, 40.0).unwrap(),
            UserPosition::new(1.0, 2.0, 55.0).unwrap(),
            UserPosition::new(0.7, 4.0, 70.0).unwrap(),
        ];
        let dip = synthesize_dipole(LAMBDA, 1.0, 37, 72).unwrap();
        let up_p = vec![dip.clone(), iso()];
        let down_p: Vec<_> = up_p
            .iter()
            .cloned()
            .map(|p| p.with_role(LinkRole::Downlink))
            .collect();
        let cfg = LinkPhaseConfig::default();
        let up = assemble_uplink(&g, &[1, 2], &up_p, &users, &cfg).unwrap();
        let down = assemble_downlink(&g, &[1, 2], &down_p, &users, &cfg).unwrap();
        assert_eq!(down.entries().shape(), (3, 2));
        assert_eq!(down.entries(), &up.entries().transpose());
        assert_eq!((down.element_count(), down.user_count()), (2, 3));
    }

    #[test]
    fn assembly_errors() {
        let g = build_planar_array(2, 1, 0.05, 0.05).unwrap();
        let u = [UserPosition::new(0.3, 0.1, 40.0).unwrap()];
        let cfg = LinkPhaseConfig::default();
        assert!(matches!(
            assemble_uplink(&g, &[1, 2], &[iso()], &u, &cfg),
            Err(ChannelError::DimensionMismatch(_))
        ));
        assert!(matches!(
            assemble_uplink(&g, &[1], &[iso()], &[], &cfg),
            Err(ChannelError::DimensionMismatch(_))
        ));
        assert!(matches!(
            assemble_uplink(&g, &[3], &[iso()], &u, &cfg),
            Err(ChannelError::Geometry(_))
        ));
        assert!(matches!(
            assemble_downlink(&g, &[1], &[iso()], &u, &cfg),
            Err(ChannelError::RoleMismatch { .. })
        ));
    }

    #[test]
    fn rayleigh_zero_pattern() {
        let (theta, phi) = uniform_grid(5, 8);
        let p = RadiationPattern::new(
            theta,
            phi,
            vec![FieldSample::default(); 40],
            LAMBDA,
            1.0,
            LinkRole::Uplink,
        )
        .unwrap();
        let mut rng = user_stream(1, 0);
        let h = rayleigh_coefficient(&p, 10.0, &LinkPhaseConfig::default(), &mut rng);
        assert_eq!(h, Complex64::new(0.0, 0.0));
    }

    #[test]
    fn rayleigh_determinism_and_reduction() {
        let g = build_planar_array(1, 1, 1.0, 1.0).unwrap();
        let u = [UserPosition::new(0.5, 0.5, 20.0).unwrap()];
        let cfg = LinkPhaseConfig::default();
        let p = iso();
        let a = assemble_rayleigh(
            &g,
            LinkRole::Uplink,
            &[1],
            std::slice::from_ref(&p),
            &u,
            &cfg,
            99,
        )
        .unwrap();
        let b = assemble_rayleigh(
            &g,
            LinkRole::Uplink,
            &[1],
            std::slice::from_ref(&p),
            &u,
            &cfg,
            99,
        )
        .unwrap();
        assert_eq!(a, b);
        let direct = rayleigh_coefficient(&p, 20.0, &cfg, &mut user_stream(99, 0));
        assert_eq!(a.entries()[(0, 0)], direct);
        let c = assemble_rayleigh(&g, LinkRole::Uplink, &[1], &[p], &u, &cfg, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn colocated_elements_share_rows() {
        let g = build_planar_array(2, 2, 0.05, 0.05).unwrap();
        let users = [
            UserPosition::new(0.5, 0.5, 20.0).unwrap(),
            UserPosition::new(1.2, 3.0, 25.0).unwrap(),
        ];
        let cfg = LinkPhaseConfig::default();
        let h = assemble_rayleigh(
            &g,
            LinkRole::Uplink,
            &[3, 3],
            &[iso(), iso()],
            &users,
            &cfg,
            5,
        )
        .unwrap();
        assert_eq!(h.entries().row(0), h.entries().row(1));
        let hd = ChannelBuilder::new(&g, cfg)
            .field_sharing(FieldSharing::PerElement)
            .rayleigh(LinkRole::Uplink, &[3, 3], &[iso(), iso()], &users, 5)
            .unwrap();
        assert_ne!(hd.entries().row(0), hd.entries().row(1));
    }

    #[test]
    fn rayleigh_downlink_layout() {
        let g = build_planar_array(2, 1, 0.05, 0.05).unwrap();
        let users: Vec<_> = (0..3)
            .map(|k| UserPosition::new(0.2 + 0.3 * k as f64, 0.0, 30.0).unwrap())
            .collect();
        let p = iso().with_role(LinkRole::Downlink);
        let h = assemble_rayleigh(
            &g,
            LinkRole::Downlink,
            &[1, 2],
            &[p.clone(), p],
            &users,
            &LinkPhaseConfig::default(),
            3,
        )
        .unwrap();
        assert_eq!(h.entries().shape(), (3, 2));
    }

    proptest! {
        #[test]
        fn los_magnitude_law(theta in 0.0f64..PI, phi in 0.0f64..std::f64::consts::TAU, d in 0.5f64..500.0) {
            let dip = synthesize_dipole(LAMBDA, 1.0, 37, 72).unwrap();
            for p in [&dip, &iso()] {
                let h = los_coefficient(p, theta, phi, d, &LinkPhaseConfig::default());
                let g = p.gain(theta, phi);
                let lhs = h.norm() * 4.0 * PI * d / LAMBDA;
                prop_assert!((lhs - g.sqrt()).abs() <= 1e-12 * g.sqrt().max(1e-300));
                prop_assert!(friis_power_check(p, theta, phi, d, 1.0).is_ok());
            }
        }
    }
}
