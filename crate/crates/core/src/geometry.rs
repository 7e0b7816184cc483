//! Planar uniform array layout and element-to-user geometry.
//!
//! Elements are numbered from 1, x fastest: element k sits at x index
//! `i_k = k - (j_k - 1)·m_x` and y index `j_k = 1 + ⌊(k - 1)/m_x⌋`, at
//! position `((i_k - 1)·a, (j_k - 1)·b, 0)`. The array lies in z = 0 with
//! boresight along +z.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Far-field threshold on κ·d below which [`element_to_user`] warns.
pub const FAR_FIELD_KD: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("array needs at least one element along each axis, got {m_x}x{m_y}")]
    EmptyArray { m_x: usize, m_y: usize },
    #[error("element spacing must be positive and finite, got ({a}, {b}) m")]
    BadSpacing { a: f64, b: f64 },
    #[error("element index {k} outside 1..={m}")]
    IndexOutOfRange { k: usize, m: usize },
    #[error("invalid user position: {0}")]
    BadUser(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    m_x: usize,
    m_y: usize,
    spacing_x_m: f64,
    spacing_y_m: f64,
    positions: Vec<Vector3<f64>>,
}

impl ArrayGeometry {
    pub fn m_x(&self) -> usize {
        self.m_x
    }

    pub fn m_y(&self) -> usize {
        self.m_y
    }

    pub fn spacing_x_m(&self) -> f64 {
        self.spacing_x_m
    }

    pub fn spacing_y_m(&self) -> f64 {
        self.spacing_y_m
    }

    /// Total element count M.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    /// (i_k, j_k) for 1-based element index k.
    pub fn index_of(&self, k: usize) -> Result<(usize, usize), GeometryError> {
        self.check_index(k)?;
        let j = 1 + (k - 1) / self.m_x;
        let i = k - (j - 1) * self.m_x;
        Ok((i, j))
    }

    /// Element index k for 1-based (i, j).
    pub fn element_at(&self, i: usize, j: usize) -> Option<usize> {
        if (1..=self.m_x).contains(&i) && (1..=self.m_y).contains(&j) {
            Some((j - 1) * self.m_x + i)
        } else {
            None
        }
    }

    pub fn position(&self, k: usize) -> Result<Vector3<f64>, GeometryError> {
        self.check_index(k)?;
        Ok(self.positions[k - 1])
    }

    pub fn check_index(&self, k: usize) -> Result<(), GeometryError> {
        if k == 0 || k > self.len() {
            return Err(GeometryError::IndexOutOfRange { k, m: self.len() });
        }
        Ok(())
    }

    /// Euclidean distance between two elements.
    pub fn element_distance(&self, k: usize, l: usize) -> Result<f64, GeometryError> {
        Ok((self.position(k)? - self.position(l)?).norm())
    }
}

pub fn build_planar_array(
    m_x: usize,
    m_y: usize,
    spacing_x_m: f64,
    spacing_y_m: f64,
) -> Result<ArrayGeometry, GeometryError> {
    if m_x == 0 || m_y == 0 {
        return Err(GeometryError::EmptyArray { m_x, m_y });
    }
    let ok = |s: f64| s > 0.0 && s.is_finite();
    if !ok(spacing_x_m) || !ok(spacing_y_m) {
        return Err(GeometryError::BadSpacing {
            a: spacing_x_m,
            b: spacing_y_m,
        });
    }
    let positions = (1..=m_x * m_y)
        .map(|k| {
            let j = 1 + (k - 1) / m_x;
            let i = k - (j - 1) * m_x;
            Vector3::new(
                (i - 1) as f64 * spacing_x_m,
                (j - 1) as f64 * spacing_y_m,
                0.0,
            )
        })
        .collect();
    Ok(ArrayGeometry {
        m_x,
        m_y,
        spacing_x_m,
        spacing_y_m,
        positions,
    })
}

/// A user in spherical coordinates about the array origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserPosition {
    pub theta: f64,
    pub phi: f64,
    pub distance_m: f64,
}

impl UserPosition {
    pub fn new(theta: f64, phi: f64, distance_m: f64) -> Result<Self, GeometryError> {
        if !(distance_m > 0.0 && distance_m.is_finite()) {
            return Err(GeometryError::BadUser(format!(
                "distance_m must be > 0, got {distance_m}"
            )));
        }
        if !(0.0..=PI).contains(&theta) {
            return Err(GeometryError::BadUser(format!(
                "theta {theta} rad outside [0, pi]"
            )));
        }
        if !phi.is_finite() {
            return Err(GeometryError::BadUser("non-finite phi".into()));
        }
        Ok(Self {
            theta,
            phi,
            distance_m,
        })
    }

    pub fn from_degrees(
        theta_deg: f64,
        phi_deg: f64,
        distance_m: f64,
    ) -> Result<Self, GeometryError> {
        Self::new(theta_deg.to_radians(), phi_deg.to_radians(), distance_m)
    }

    pub fn unit_direction(&self) -> Vector3<f64> {
        direction(self.theta, self.phi)
    }

    pub fn cartesian(&self) -> Vector3<f64> {
        self.unit_direction() * self.distance_m
    }
}

pub fn direction(theta: f64, phi: f64) -> Vector3<f64> {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vector3::new(st * cp, st * sp, ct)
}

/// How per-element angles toward a user are formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleMode {
    /// Every element sees the user along the array-origin direction;
    /// distances stay exact per element.
    #[default]
    Shared,
    /// Angles recomputed from each element's own position.
    Exact,
}

/// Where a user sits as seen from one element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementView {
    pub theta: f64,
    pub phi: f64,
    pub distance_m: f64,
    /// κ·d ≥ [`FAR_FIELD_KD`].
    pub far_field: bool,
}

pub fn element_to_user(
    geometry: &ArrayGeometry,
    k: usize,
    user: &UserPosition,
    wavelength_m: f64,
    mode: AngleMode,
) -> Result<ElementView, GeometryError> {
    let p = geometry.position(k)?;
    let offset = user.cartesian() - p;
    let distance_m = offset.norm();
    let (theta, phi) = match mode {
        AngleMode::Shared => (user.theta, user.phi),
        AngleMode::Exact => {
            let theta = (offset.z / distance_m).clamp(-1.0, 1.0).acos();
            let phi = offset.y.atan2(offset.x).rem_euclid(2.0 * PI);
            (theta, phi)
        }
    };
    let kd = 2.0 * PI / wavelength_m * distance_m;
    let far_field = kd >= FAR_FIELD_KD;
    if !far_field {
        log::warn!(
            "element {k}: user at {distance_m:.4} m is not in the far field (kd = {kd:.1} < {FAR_FIELD_KD})"
        );
    }
    Ok(ElementView {
        theta,
        phi,
        distance_m,
        far_field,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LAMBDA: f64 = 0.1;

    #[test]
    fn two_by_two_positions() {
        let a = 0.5 * LAMBDA;
        let g = build_planar_array(2, 2, a, a).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.position(1).unwrap(), Vector3::new(0.0, 0.0, 0.0));
        assert_eq!(g.index_of(3).unwrap(), (1, 2));
        assert_eq!(g.position(3).unwrap(), Vector3::new(0.0, a, 0.0));
        assert_eq!(g.index_of(4).unwrap(), (2, 2));
        assert_eq!(g.position(4).unwrap(), Vector3::new(a, a, 0.0));
        assert!(g.position(0).is_err());
        assert!(g.position(5).is_err());
    }

    #[test]
    fn index_maps_are_a_bijection() {
        for (mx, my) in [(1, 1), (2, 2), (3, 5), (7, 2), (1, 6)] {
            let g = build_planar_array(mx, my, 0.3, 0.7).unwrap();
            let mut seen = std::collections::HashSet::new();
            for k in 1..=g.len() {
                let (i, j) = g.index_of(k).unwrap();
                assert!((1..=mx).contains(&i) && (1..=my).contains(&j));
                assert!(seen.insert((i, j)));
                assert_eq!(g.element_at(i, j), Some(k));
                let p = g.position(k).unwrap();
                assert_eq!(
                    p,
                    Vector3::new((i - 1) as f64 * 0.3, (j - 1) as f64 * 0.7, 0.0)
                );
            }
            assert_eq!(seen.len(), mx * my);
        }
    }

    #[test]
    fn rejects_degenerate_layouts() {
        assert!(matches!(
            build_planar_array(0, 2, 1.0, 1.0),
            Err(GeometryError::EmptyArray { .. })
        ));
        assert!(matches!(
            build_planar_array(2, 2, 0.0, 1.0),
            Err(GeometryError::BadSpacing { .. })
        ));
        assert!(matches!(
            build_planar_array(2, 2, 1.0, f64::NAN),
            Err(GeometryError::BadSpacing { .. })
        ));
    }

    #[test]
    fn single_element_boresight_distance() {
        let g = build_planar_array(1, 1, 1.0, 1.0).unwrap();
        let u = UserPosition::new(0.0, 0.0, 10.0 * LAMBDA).unwrap();
        let v = element_to_user(&g, 1, &u, LAMBDA, AngleMode::Shared).unwrap();
        assert_eq!(v.distance_m, 10.0 * LAMBDA);
        assert_eq!((v.theta, v.phi), (0.0, 0.0));
        // κd = 20π < 100
        assert!(!v.far_field);
    }

    #[test]
    fn broadside_user_sees_equal_distances() {
        let a = 0.5 * LAMBDA;
        let g = build_planar_array(2, 1, a, a).unwrap();
        let gap = |d: f64| {
            let u = UserPosition::new(0.0, 0.0, d).unwrap();
            let d1 = element_to_user(&g, 1, &u, LAMBDA, AngleMode::Shared)
                .unwrap()
                .distance_m;
            let d2 = element_to_user(&g, 2, &u, LAMBDA, AngleMode::Shared)
                .unwrap()
                .distance_m;
            assert_eq!(d1, d);
            assert!((d2 - (d * d + a * a).sqrt()).abs() < 1e-12 * d);
            d2 - d1
        };
        // element 1 sits at the origin, so equality holds up to the
        // second-order offset a²/2d
        for d in [10.0, 100.0, 1000.0] {
            let g = gap(d);
            assert!(g > 0.0 && g <= a * a / (2.0 * d) * (1.0 + 1e-6));
        }
    }

    #[test]
    fn endfire_path_difference_tends_to_spacing() {
        let a = 0.5 * LAMBDA;
        let g = build_planar_array(2, 1, a, a).unwrap();
        let u = UserPosition::new(PI / 2.0, 0.0, 1000.0 * LAMBDA).unwrap();
        let d1 = element_to_user(&g, 1, &u, LAMBDA, AngleMode::Shared)
            .unwrap()
            .distance_m;
        let d2 = element_to_user(&g, 2, &u, LAMBDA, AngleMode::Shared)
            .unwrap()
            .distance_m;
        // user on +x: the element at x = a is closer by exactly a, up to
        // the tiny cos(π/2) z-component of the user position
        assert!(((d1 - d2) - a).abs() < 1e-4 * LAMBDA);
    }

    #[test]
    fn plane_wave_limit() {
        let g = build_planar_array(3, 2, 0.37 * LAMBDA, 0.61 * LAMBDA).unwrap();
        let u = UserPosition::new(0.7, 2.1, 1e6 * LAMBDA).unwrap();
        let uhat = u.unit_direction();
        let d0 = element_to_user(&g, 1, &u, LAMBDA, AngleMode::Shared)
            .unwrap()
            .distance_m;
        for k in 1..=g.len() {
            let dk = element_to_user(&g, k, &u, LAMBDA, AngleMode::Shared)
                .unwrap()
                .distance_m;
            let p = g.position(k).unwrap();
            let projection = p.dot(&uhat);
            // remaining gap is the transverse term |p⊥|²/2d plus rounding of d
            let transverse = (p.norm_squared() - projection * projection) / (2.0 * u.distance_m);
            let err = ((d0 - dk) - projection).abs();
            assert!(
                err <= transverse + 1e-9 * LAMBDA,
                "k={k}: {err} vs {transverse}"
            );
            assert!(err < 1e-6 * LAMBDA);
        }
    }

    #[test]
    fn exact_angles_match_shared_at_origin() {
        let g = build_planar_array(2, 2, 0.05, 0.05).unwrap();
        let u = UserPosition::new(0.9, 1.3, 30.0).unwrap();
        let v = element_to_user(&g, 1, &u, LAMBDA, AngleMode::Exact).unwrap();
        assert!((v.theta - 0.9).abs() < 1e-12 && (v.phi - 1.3).abs() < 1e-12);
        let w = element_to_user(&g, 4, &u, LAMBDA, AngleMode::Exact).unwrap();
        assert!((w.theta - 0.9).abs() > 1e-6);
        assert!(w.far_field);
    }

    #[test]
    fn user_validation() {
        assert!(UserPosition::new(0.1, 0.0, 0.0).is_err());
        assert!(UserPosition::new(-0.1, 0.0, 1.0).is_err());
        assert!(UserPosition::new(4.0, 0.0, 1.0).is_err());
        let u = UserPosition::from_degrees(90.0, 0.0, 2.0).unwrap();
        assert!((u.cartesian() - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-15);
    }

    proptest! {
        #[test]
        fn pairwise_distance_translation_invariant(
            mx in 1usize..5, my in 1usize..5,
            theta in 0.0f64..PI, phi in 0.0f64..std::f64::consts::TAU, d in 1.0f64..100.0,
        ) {
            let g = build_planar_array(mx, my, 0.05, 0.07).unwrap();
            let u = UserPosition::new(theta, phi, d).unwrap();
            // distance from element k equals distance from the origin when the
            // array is shifted so that element k sits at the origin
            for k in 1..=g.len() {
                let dk = element_to_user(&g, k, &u, LAMBDA, AngleMode::Shared).unwrap().distance_m;
                let shifted_user = u.cartesian() - g.position(k).unwrap();
                prop_assert!((dk - shifted_user.norm()).abs() <= 1e-12 * d);
            }
        }
    }
}
