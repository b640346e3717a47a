//! Uniform planar array geometry and near-field steering vectors.
//!
//! The array sits in the y-z plane with the reference antenna at the
//! origin. Antennas are indexed flat in row-major order: index 0 is the
//! reference, indices 1..n_y walk the horizontal row, and index n_y starts
//! the second vertical row.

use std::f64::consts::TAU;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform planar array layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    /// Horizontal element count.
    pub n_y: usize,
    /// Vertical element count.
    pub n_z: usize,
    /// Horizontal spacing in meters.
    pub d_y: f64,
    /// Vertical spacing in meters.
    pub d_z: f64,
    /// Carrier wavelength in meters.
    pub wavelength: f64,
}

impl ArrayGeometry {
    pub fn new(n_y: usize, n_z: usize, d_y: f64, d_z: f64, wavelength: f64) -> Result<Self> {
        if n_y < 1 || n_z < 1 {
            return Err(Error::InvalidArgument(format!(
                "element counts must be >= 1, got {n_y}x{n_z}"
            )));
        }
        if d_y <= 0.0 || d_z <= 0.0 || wavelength <= 0.0 {
            return Err(Error::InvalidArgument(
                "spacings and wavelength must be positive".into(),
            ));
        }
        Ok(Self {
            n_y,
            n_z,
            d_y,
            d_z,
            wavelength,
        })
    }

    /// Square half-wavelength-spaced array helper.
    pub fn half_wavelength(n_y: usize, n_z: usize, wavelength: f64) -> Result<Self> {
        Self::new(n_y, n_z, wavelength / 2.0, wavelength / 2.0, wavelength)
    }

    /// Total number of antennas N.
    pub fn num_antennas(&self) -> usize {
        self.n_y * self.n_z
    }

    /// Aperture D: the array diagonal.
    pub fn aperture(&self) -> f64 {
        let dy = (self.n_y - 1) as f64 * self.d_y;
        let dz = (self.n_z - 1) as f64 * self.d_z;
        (dy * dy + dz * dz).sqrt()
    }

    /// Fraunhofer array distance 2D^2 / lambda.
    pub fn fraunhofer_distance(&self) -> f64 {
        let d = self.aperture();
        2.0 * d * d / self.wavelength
    }

    /// Position of the antenna with flat index `index` (meters).
    pub fn antenna_position(&self, index: usize) -> Result<[f64; 3]> {
        let n = self.num_antennas();
        if index >= n {
            return Err(Error::InvalidArgument(format!(
                "antenna index {index} out of range for N = {n}"
            )));
        }
        let m_y = index % self.n_y;
        let m_z = index / self.n_y;
        Ok([0.0, m_y as f64 * self.d_y, m_z as f64 * self.d_z])
    }
}

/// One source location in both spherical and Cartesian form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourcePosition {
    /// Azimuth angle of arrival in radians.
    pub azimuth: f64,
    /// Elevation angle of arrival in radians.
    pub elevation: f64,
    /// Distance to the reference antenna in meters.
    pub range: f64,
    /// Cartesian coordinates (x, y, z) in meters.
    pub cartesian: [f64; 3],
}

impl SourcePosition {
    pub fn from_spherical(azimuth: f64, elevation: f64, range: f64) -> Result<Self> {
        if range <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "range must be positive, got {range}"
            )));
        }
        Ok(Self {
            azimuth,
            elevation,
            range,
            cartesian: source_to_cartesian(azimuth, elevation, range),
        })
    }

    pub fn from_cartesian(x: f64, y: f64, z: f64) -> Result<Self> {
        let range = (x * x + y * y + z * z).sqrt();
        if range <= 0.0 {
            return Err(Error::InvalidArgument(
                "source cannot sit at the origin".into(),
            ));
        }
        Ok(Self {
            azimuth: y.atan2(x),
            elevation: (z / range).asin(),
            range,
            cartesian: [x, y, z],
        })
    }
}

/// Spherical-to-Cartesian mapping for a source seen from the array origin.
pub fn source_to_cartesian(azimuth: f64, elevation: f64, range: f64) -> [f64; 3] {
    [
        range * azimuth.cos() * elevation.cos(),
        range * azimuth.sin() * elevation.cos(),
        range * elevation.sin(),
    ]
}

/// Distance from `source` to antenna `index` of the array.
pub fn element_distance(source: &SourcePosition, geom: &ArrayGeometry, index: usize) -> Result<f64> {
    let p = geom.antenna_position(index)?;
    let [x, y, z] = source.cartesian;
    let dy = y - p[1];
    let dz = z - p[2];
    Ok((x * x + dy * dy + dz * dz).sqrt())
}

/// Near-field array response vector: element n is exp(j 2pi/lambda (r_bar - r_n)).
///
/// The reference antenna (index 0) always contributes exactly 1 + 0j, and
/// every element has unit modulus.
pub fn steering_vector(geom: &ArrayGeometry, source: &SourcePosition) -> Vec<Complex64> {
    let n = geom.num_antennas();
    let k = TAU / geom.wavelength;
    let mut a = Vec::with_capacity(n);
    for idx in 0..n {
        // index < N by construction
        let r_n = element_distance(source, geom, idx).expect("index in range");
        let phase = k * (source.range - r_n);
        a.push(Complex64::from_polar(1.0, phase));
    }
    a[0] = Complex64::new(1.0, 0.0);
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, FRAC_PI_6, PI};

    fn geom_16x8() -> ArrayGeometry {
        ArrayGeometry::half_wavelength(16, 8, 0.1).unwrap()
    }

    #[test]
    fn reference_antenna_at_origin() {
        assert_eq!(geom_16x8().antenna_position(0).unwrap(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn first_horizontal_step() {
        assert_eq!(geom_16x8().antenna_position(1).unwrap(), [0.0, 0.05, 0.0]);
    }

    #[test]
    fn row_major_flattening_matches_enumeration() {
        // Oracle: enumerate (m_y, m_z) pairs in row-major order.
        let geom = geom_16x8();
        let mut flat = 0;
        for m_z in 0..geom.n_z {
            for m_y in 0..geom.n_y {
                let p = geom.antenna_position(flat).unwrap();
                assert_eq!(p, [0.0, m_y as f64 * geom.d_y, m_z as f64 * geom.d_z]);
                flat += 1;
            }
        }
        assert_eq!(geom.antenna_position(16).unwrap(), [0.0, 0.0, 0.05]);
    }

    #[test]
    fn antenna_index_out_of_range() {
        assert!(geom_16x8().antenna_position(128).is_err());
    }

    #[test]
    fn cartesian_boresight_and_pure_azimuth() {
        let c = source_to_cartesian(0.0, 0.0, 5.0);
        assert_relative_eq!(c[0], 5.0, max_relative = 1e-15);
        assert!(c[1].abs() < 1e-12 && c[2].abs() < 1e-12);

        let c = source_to_cartesian(FRAC_PI_2, 0.0, 2.0);
        assert!(c[0].abs() < 1e-12);
        assert_relative_eq!(c[1], 2.0, max_relative = 1e-15);
    }

    #[test]
    fn cartesian_oblique_value() {
        let c = source_to_cartesian(FRAC_PI_4, FRAC_PI_6, 3.0);
        assert_relative_eq!(c[0], 3.0 * FRAC_PI_4.cos() * FRAC_PI_6.cos(), epsilon = 1e-12);
        assert_relative_eq!(c[1], 3.0 * FRAC_PI_4.sin() * FRAC_PI_6.cos(), epsilon = 1e-12);
        assert_relative_eq!(c[2], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn spherical_round_trip() {
        let mut rng = crate::rng::rng_from_seed(11);
        for _ in 0..200 {
            let az = rng.gen_range(-FRAC_PI_2 * 0.999..FRAC_PI_2 * 0.999);
            let el = rng.gen_range(-FRAC_PI_2 * 0.999..FRAC_PI_2 * 0.999);
            let r = rng.gen_range(0.1..100.0);
            let s = SourcePosition::from_spherical(az, el, r).unwrap();
            let back =
                SourcePosition::from_cartesian(s.cartesian[0], s.cartesian[1], s.cartesian[2])
                    .unwrap();
            assert_relative_eq!(back.azimuth, az, max_relative = 1e-12, epsilon = 1e-12);
            assert_relative_eq!(back.elevation, el, max_relative = 1e-12, epsilon = 1e-12);
            assert_relative_eq!(back.range, r, max_relative = 1e-12);
        }
    }

    #[test]
    fn element_distance_reference_and_offset() {
        let geom = geom_16x8();
        let s = SourcePosition::from_cartesian(5.0, 0.0, 0.0).unwrap();
        assert_relative_eq!(element_distance(&s, &geom, 0).unwrap(), 5.0);
        assert_relative_eq!(
            element_distance(&s, &geom, 1).unwrap(),
            (25.0f64 + 0.0025).sqrt(),
            max_relative = 1e-15
        );
    }

    #[test]
    fn element_distance_triangle_inequality() {
        let geom = geom_16x8();
        let max_offset = geom.aperture();
        let mut rng = crate::rng::rng_from_seed(5);
        for _ in 0..100 {
            let s = SourcePosition::from_spherical(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(1.0..20.0),
            )
            .unwrap();
            for idx in 0..geom.num_antennas() {
                let d = element_distance(&s, &geom, idx).unwrap();
                assert!((d - s.range).abs() <= max_offset + 1e-12);
            }
        }
    }

    #[test]
    fn steering_vector_unit_modulus_and_reference() {
        let geom = geom_16x8();
        let s = SourcePosition::from_spherical(0.3, -0.2, 2.0).unwrap();
        let a = steering_vector(&geom, &s);
        assert_eq!(a[0], Complex64::new(1.0, 0.0));
        for v in &a {
            assert_relative_eq!(v.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn far_field_limit_matches_planar_approximation() {
        // Independent oracle: first-order expansion r_bar - r_n ~ u . p_n
        // where u is the unit vector toward the source.
        let geom = geom_16x8();
        let az = 0.4;
        let el = 0.25;
        let r = 1e6 * geom.aperture();
        let s = SourcePosition::from_spherical(az, el, r).unwrap();
        let a = steering_vector(&geom, &s);
        let u = source_to_cartesian(az, el, 1.0);
        let k = 2.0 * PI / geom.wavelength;
        for idx in 0..geom.num_antennas() {
            let p = geom.antenna_position(idx).unwrap();
            let planar_phase = k * (u[0] * p[0] + u[1] * p[1] + u[2] * p[2]);
            let planar = Complex64::from_polar(1.0, planar_phase);
            assert!((a[idx] - planar).norm() < 1e-3);
        }
    }
}
