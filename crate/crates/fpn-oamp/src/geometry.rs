//! Planar array-of-subarrays (AoSA) geometry.
//!
//! The array lies in the x-y plane. `S` subarrays (SAs) form a √S × √S grid with
//! pitch `d_sub`; each SA carries `S_bar` antenna elements (AEs) on a √S̄ × √S̄
//! grid with pitch `d_a`. Indices are 1-based in the mathematical layout,
//! `s = (m-1)√S + n` with `m, n ∈ {1..√S}` (and the same scheme with bars for
//! AEs); storage elsewhere in the crate is 0-based.
//!
//! The aperture `D` is the array diagonal, and the Rayleigh distance
//! `2D²/λ_c` is the boundary used to pick between the spherical (near-field)
//! and planar (far-field) wavefront models.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Propagation speed used throughout, in m/s.
///
/// The round 3e8 convention keeps carrier wavelengths exact (1 mm at 300 GHz),
/// which the reference configurations rely on.
pub const SPEED_OF_LIGHT: f64 = 3.0e8;

/// Errors from geometry construction or element lookup.
#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("subarray count {0} is not a positive perfect square")]
    SubarrayCountNotSquare(usize),
    #[error("antennas per subarray {0} is not a positive perfect square")]
    AntennaCountNotSquare(usize),
    #[error("AE spacing must be positive, got {0}")]
    NonPositiveAeSpacing(f64),
    #[error("SA spacing {d_sub} must be at least the AE spacing {d_a}")]
    SaSpacingTooSmall { d_sub: f64, d_a: f64 },
    #[error("carrier frequency must be positive, got {0}")]
    NonPositiveFrequency(f64),
    #[error("index (s={s}, s_bar={s_bar}) out of range for S={cap_s}, S_bar={cap_s_bar}")]
    IndexOutOfRange {
        s: usize,
        s_bar: usize,
        cap_s: usize,
        cap_s_bar: usize,
    },
}

/// Returns the exact integer square root of `n` if `n` is a perfect square.
fn exact_sqrt(n: usize) -> Option<usize> {
    let root = (n as f64).sqrt().round() as usize;
    (root * root == n && n > 0).then_some(root)
}

/// Immutable, validated AoSA geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGeometry", into = "RawGeometry")]
pub struct ArrayGeometry {
    num_subarrays: usize,
    antennas_per_subarray: usize,
    ae_spacing: f64,
    sa_spacing: f64,
    carrier_frequency: f64,
}

/// Serialization mirror of [`ArrayGeometry`]; deserialization re-validates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct RawGeometry {
    num_subarrays: usize,
    antennas_per_subarray: usize,
    ae_spacing: f64,
    sa_spacing: f64,
    carrier_frequency: f64,
}

impl TryFrom<RawGeometry> for ArrayGeometry {
    type Error = GeometryError;
    fn try_from(raw: RawGeometry) -> Result<Self, Self::Error> {
        ArrayGeometry::new(
            raw.num_subarrays,
            raw.antennas_per_subarray,
            raw.ae_spacing,
            raw.sa_spacing,
            raw.carrier_frequency,
        )
    }
}

impl From<ArrayGeometry> for RawGeometry {
    fn from(g: ArrayGeometry) -> Self {
        RawGeometry {
            num_subarrays: g.num_subarrays,
            antennas_per_subarray: g.antennas_per_subarray,
            ae_spacing: g.ae_spacing,
            sa_spacing: g.sa_spacing,
            carrier_frequency: g.carrier_frequency,
        }
    }
}

impl ArrayGeometry {
    /// Validates and builds a geometry.
    ///
    /// `num_subarrays` (S) and `antennas_per_subarray` (S̄) must be positive
    /// perfect squares; spacings are in meters with `sa_spacing >= ae_spacing`;
    /// `carrier_frequency` is in Hz.
    pub fn new(
        num_subarrays: usize,
        antennas_per_subarray: usize,
        ae_spacing: f64,
        sa_spacing: f64,
        carrier_frequency: f64,
    ) -> Result<Self, GeometryError> {
        exact_sqrt(num_subarrays).ok_or(GeometryError::SubarrayCountNotSquare(num_subarrays))?;
        exact_sqrt(antennas_per_subarray)
            .ok_or(GeometryError::AntennaCountNotSquare(antennas_per_subarray))?;
        if !(ae_spacing > 0.0) {
            return Err(GeometryError::NonPositiveAeSpacing(ae_spacing));
        }
        if sa_spacing < ae_spacing {
            return Err(GeometryError::SaSpacingTooSmall {
                d_sub: sa_spacing,
                d_a: ae_spacing,
            });
        }
        if !(carrier_frequency > 0.0) {
            return Err(GeometryError::NonPositiveFrequency(carrier_frequency));
        }
        Ok(Self {
            num_subarrays,
            antennas_per_subarray,
            ae_spacing,
            sa_spacing,
            carrier_frequency,
        })
    }

    /// Subarray count S.
    pub fn s(&self) -> usize {
        self.num_subarrays
    }

    /// Antennas per subarray S̄.
    pub fn s_bar(&self) -> usize {
        self.antennas_per_subarray
    }

    /// √S, the subarray grid side.
    pub fn sa_grid(&self) -> usize {
        exact_sqrt(self.num_subarrays).expect("validated at construction")
    }

    /// √S̄, the per-subarray antenna grid side.
    pub fn ae_grid(&self) -> usize {
        exact_sqrt(self.antennas_per_subarray).expect("validated at construction")
    }

    /// AE pitch d_a in meters.
    pub fn d_a(&self) -> f64 {
        self.ae_spacing
    }

    /// SA pitch d_sub in meters.
    pub fn d_sub(&self) -> f64 {
        self.sa_spacing
    }

    /// Carrier frequency f_c in Hz.
    pub fn f_c(&self) -> f64 {
        self.carrier_frequency
    }

    /// Carrier wavelength λ_c = c/f_c in meters.
    pub fn lambda_c(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency
    }

    /// Spacing ratio w = d_sub/d_a.
    pub fn spacing_ratio(&self) -> f64 {
        self.sa_spacing / self.ae_spacing
    }

    /// Total antenna count S·S̄.
    pub fn num_antennas(&self) -> usize {
        self.num_subarrays * self.antennas_per_subarray
    }

    /// Length of the real-valued channel vector, 2·S·S̄.
    pub fn real_dim(&self) -> usize {
        2 * self.num_antennas()
    }

    /// Position of AE `s_bar` of SA `s` (both 1-based) in meters.
    ///
    /// With s = (m−1)√S + n and s̄ = (m̄−1)√S̄ + n̄:
    /// x = (m−1)[(√S̄−1)d_a + d_sub] + (m̄−1)d_a,
    /// y = (n−1)[(√S̄−1)d_a + d_sub] + (n̄−1)d_a, z = 0.
    pub fn ae_position(&self, s: usize, s_bar: usize) -> Result<[f64; 3], GeometryError> {
        if s < 1 || s > self.num_subarrays || s_bar < 1 || s_bar > self.antennas_per_subarray {
            return Err(GeometryError::IndexOutOfRange {
                s,
                s_bar,
                cap_s: self.num_subarrays,
                cap_s_bar: self.antennas_per_subarray,
            });
        }
        let sqrt_s = self.sa_grid();
        let sqrt_s_bar = self.ae_grid();
        let (m, n) = ((s - 1) / sqrt_s, (s - 1) % sqrt_s);
        let (m_bar, n_bar) = ((s_bar - 1) / sqrt_s_bar, (s_bar - 1) % sqrt_s_bar);
        // SA pitch measured between the first AEs of adjacent SAs.
        let sa_period = (sqrt_s_bar as f64 - 1.0) * self.ae_spacing + self.sa_spacing;
        Ok([
            m as f64 * sa_period + m_bar as f64 * self.ae_spacing,
            n as f64 * sa_period + n_bar as f64 * self.ae_spacing,
            0.0,
        ])
    }

    /// Array aperture D in meters (the diagonal of the full array):
    /// D = √2·[√S(√S̄−1)d_a + (√S−1)d_sub].
    pub fn aperture(&self) -> f64 {
        let sqrt_s = self.sa_grid() as f64;
        let sqrt_s_bar = self.ae_grid() as f64;
        std::f64::consts::SQRT_2
            * (sqrt_s * (sqrt_s_bar - 1.0) * self.ae_spacing + (sqrt_s - 1.0) * self.sa_spacing)
    }

    /// Rayleigh (Fraunhofer) distance 2D²/λ_c in meters: the near/far-field
    /// boundary for this aperture.
    pub fn rayleigh_distance(&self) -> f64 {
        let d = self.aperture();
        2.0 * d * d / self.lambda_c()
    }

    /// Convenience pair (aperture, Rayleigh distance).
    pub fn aperture_and_rayleigh(&self) -> (f64, f64) {
        (self.aperture(), self.rayleigh_distance())
    }
}
