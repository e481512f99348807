//! Hybrid near/far-field multipath channel synthesis.
//!
//! A channel realization is a superposition of one line-of-sight (LoS) path and
//! L−1 single-bounce reflected (NLoS) paths. Each path carries a complex gain
//! (free-space spread × molecular absorption × reflection coefficient), an
//! azimuth/elevation arrival direction, a source distance, and a delay. The
//! per-antenna response uses the exact spherical wavefront when the source is
//! closer than the Rayleigh distance and the planar-wavefront approximation
//! beyond it.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ArrayGeometry, SPEED_OF_LIGHT};

/// Errors from channel configuration or synthesis.
#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("path count must be at least 1")]
    NoPaths,
    #[error("distance must be positive, got {0}")]
    NonPositiveDistance(f64),
    #[error("invalid range [{0}, {1}]")]
    InvalidRange(f64, f64),
    #[error("incidence angle {0} outside [0, pi/2)")]
    IncidenceOutOfRange(f64),
    #[error("channel vector length {got} does not match geometry ({expected})")]
    LengthMismatch { got: usize, expected: usize },
    #[error("real stacking requires even length, got {0}")]
    OddLength(usize),
}

/// One propagation path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathComponent {
    /// Complex path gain (spread loss × absorption × reflection).
    pub alpha: Complex64,
    /// Azimuth angle of arrival in radians.
    pub phi: f64,
    /// Elevation angle of arrival in radians.
    pub theta: f64,
    /// Source/scatterer distance from the array origin in meters.
    pub r: f64,
    /// Propagation delay in seconds.
    pub tau: f64,
    /// Incidence angle at the reflector in radians (0 for the LoS path).
    pub phi_in: f64,
    /// Whether this is the line-of-sight path.
    pub is_los: bool,
}

/// Distributions and material constants for drawing channel realizations.
///
/// Angle and range fields are uniform-draw bounds; `include_los = false`
/// models LoS blockage (all paths reflected).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    /// Total path count L (including the LoS path when present).
    pub num_paths: usize,
    /// LoS path length r_1 in meters, also used by the spread-loss factor of
    /// every path.
    pub los_distance: f64,
    /// NLoS scatterer distance range in meters.
    pub nlos_distance_range: (f64, f64),
    /// LoS delay τ_1 in seconds.
    pub los_delay: f64,
    /// NLoS delay range in seconds.
    pub nlos_delay_range: (f64, f64),
    /// Molecular absorption coefficient k_abs in 1/m.
    pub k_abs: f64,
    /// Complex refractive index of the reflecting material.
    pub refractive_index: Complex64,
    /// Surface roughness standard deviation in meters.
    pub roughness: f64,
    /// Azimuth draw range in radians.
    pub phi_range: (f64, f64),
    /// Elevation draw range in radians.
    pub theta_range: (f64, f64),
    /// Incidence-angle draw range in radians, within [0, π/2).
    pub phi_in_range: (f64, f64),
    /// Draw the LoS path (true) or model blockage (false).
    pub include_los: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self::default_desk()
    }
}

impl ChannelConfig {
    /// Validates ranges and counts.
    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.num_paths < 1 {
            return Err(ChannelError::NoPaths);
        }
        if !(self.los_distance > 0.0) {
            return Err(ChannelError::NonPositiveDistance(self.los_distance));
        }
        let ranges = [
            self.nlos_distance_range,
            self.nlos_delay_range,
            self.phi_range,
            self.theta_range,
            self.phi_in_range,
        ];
        for (lo, hi) in ranges {
            if !(lo <= hi) {
                return Err(ChannelError::InvalidRange(lo, hi));
            }
        }
        if self.nlos_distance_range.0 <= 0.0 {
            return Err(ChannelError::NonPositiveDistance(self.nlos_distance_range.0));
        }
        if self.phi_in_range.0 < 0.0 || self.phi_in_range.1 >= std::f64::consts::FRAC_PI_2 {
            return Err(ChannelError::IncidenceOutOfRange(self.phi_in_range.1));
        }
        Ok(())
    }

    /// Five-path propagation model at desk scale: decimeter path lengths
    /// around a small aperture, so draws straddle the near/far boundary.
    pub fn default_desk() -> Self {
        use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, PI};
        Self {
            num_paths: 5,
            los_distance: 0.7,
            nlos_distance_range: (0.1, 1.0),
            los_delay: 2.4e-9,
            nlos_delay_range: (2.4e-9, 5.0e-9),
            k_abs: 0.0033,
            refractive_index: Complex64::new(2.24, -0.025),
            roughness: 8.8e-5,
            phi_range: (-PI, PI),
            theta_range: (-FRAC_PI_2, FRAC_PI_2),
            phi_in_range: (0.0, FRAC_PI_3),
            include_los: true,
        }
    }

    /// Five-path propagation model at room scale: tens of meters, matching
    /// the distances used by the full-size array.
    pub fn default_room() -> Self {
        use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, PI};
        Self {
            num_paths: 5,
            los_distance: 30.0,
            nlos_distance_range: (10.0, 25.0),
            los_delay: 100e-9,
            nlos_delay_range: (100e-9, 110e-9),
            k_abs: 0.0033,
            refractive_index: Complex64::new(2.24, -0.025),
            roughness: 8.8e-5,
            phi_range: (-PI, PI),
            theta_range: (-FRAC_PI_2, FRAC_PI_2),
            phi_in_range: (0.0, FRAC_PI_3),
            include_los: true,
        }
    }
}

/// Wavefront model selection for the array response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldMode {
    /// Spherical wavefront below the Rayleigh distance, planar beyond it.
    Auto,
    /// Planar wavefront regardless of distance.
    ForceFar,
    /// Spherical wavefront regardless of distance.
    ForceNear,
}

/// One channel realization: the paths plus the assembled antenna-domain vector
/// in complex and stacked-real forms.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    /// Paths the channel was assembled from.
    pub paths: Vec<PathComponent>,
    /// Antenna-domain channel, length S·S̄.
    pub h_complex: Vec<Complex64>,
    /// Real stacking [Re(h); Im(h)], length 2·S·S̄.
    pub h_real: Vec<f64>,
}

/// Stacks a complex vector as [Re; Im].
pub fn stack_complex(v: &[Complex64]) -> Vec<f64> {
    v.iter()
        .map(|z| z.re)
        .chain(v.iter().map(|z| z.im))
        .collect()
}

/// Inverse of [`stack_complex`].
pub fn unstack_complex(v: &[f64]) -> Result<Vec<Complex64>, ChannelError> {
    if v.len() % 2 != 0 {
        return Err(ChannelError::OddLength(v.len()));
    }
    let half = v.len() / 2;
    Ok((0..half)
        .map(|i| Complex64::new(v[i], v[half + i]))
        .collect())
}

/// Smooth-surface Fresnel reflection coefficient with a Gaussian roughness
/// attenuation factor.
///
/// The refraction angle satisfies sin(φ_ref) = sin(φ_in)/n_t (complex-valued
/// for lossy materials); the returned coefficient is
/// (cos φ_in − n_t cos φ_ref)/(cos φ_in + n_t cos φ_ref) ·
/// exp(−8π²f_c²σ_rough²cos²φ_in / c²).
pub fn reflection_coefficient(
    phi_in: f64,
    n_t: Complex64,
    sigma_rough: f64,
    f_c: f64,
) -> Complex64 {
    let phi_ref = (Complex64::new(phi_in.sin(), 0.0) / n_t).asin();
    let cos_in = Complex64::new(phi_in.cos(), 0.0);
    let cos_ref = phi_ref.cos();
    let smooth = (cos_in - n_t * cos_ref) / (cos_in + n_t * cos_ref);
    let k = 2.0 * std::f64::consts::PI * f_c / SPEED_OF_LIGHT;
    let rough_exponent = -0.5 * (2.0 * k * sigma_rough * phi_in.cos()).powi(2);
    smooth * rough_exponent.exp()
}

/// Complex path gain: reflection coefficient × free-space spread loss at the
/// LoS length × molecular absorption.
///
/// α = Γ · (c / (4π f r)) · exp(−k_abs·r/2). The LoS path uses Γ = 1.
pub fn path_loss(f: f64, r: f64, k_abs: f64, gamma: Complex64) -> Result<Complex64, ChannelError> {
    if !(r > 0.0) {
        return Err(ChannelError::NonPositiveDistance(r));
    }
    let spread = SPEED_OF_LIGHT / (4.0 * std::f64::consts::PI * f * r);
    let absorption = (-k_abs * r / 2.0).exp();
    Ok(gamma * spread * absorption)
}

/// Unit arrival direction for azimuth `phi` and elevation `theta`.
#[inline]
fn unit_direction(phi: f64, theta: f64) -> [f64; 3] {
    [
        theta.sin() * phi.cos(),
        theta.sin() * phi.sin(),
        theta.cos(),
    ]
}

/// Array response vector for a source at distance `r` in direction
/// (`phi`, `theta`), evaluated at frequency `f`.
///
/// Near field uses the exact per-element distance, entry = e^{+j2π(f/c)‖p − rt‖};
/// far field uses the first-order expansion ‖p − rt‖ ≈ r − pᵀt, entry =
/// e^{−j2π(f/c)(pᵀt − r)}. Entries are unit modulus; ordering is SA-major
/// (AE index fastest).
pub fn array_response(
    geometry: &ArrayGeometry,
    phi: f64,
    theta: f64,
    r: f64,
    f: f64,
    mode: FieldMode,
) -> Result<Vec<Complex64>, ChannelError> {
    if !(r > 0.0) {
        return Err(ChannelError::NonPositiveDistance(r));
    }
    let near = match mode {
        FieldMode::Auto => r < geometry.rayleigh_distance(),
        FieldMode::ForceFar => false,
        FieldMode::ForceNear => true,
    };
    let k = 2.0 * std::f64::consts::PI * f / SPEED_OF_LIGHT;
    let t = unit_direction(phi, theta);
    let mut a = Vec::with_capacity(geometry.num_antennas());
    for s in 1..=geometry.s() {
        for s_bar in 1..=geometry.s_bar() {
            let p = geometry.ae_position(s, s_bar).expect("index in range");
            let phase = if near {
                let dx = p[0] - r * t[0];
                let dy = p[1] - r * t[1];
                let dz = p[2] - r * t[2];
                k * (dx * dx + dy * dy + dz * dz).sqrt()
            } else {
                let p_dot_t = p[0] * t[0] + p[1] * t[1] + p[2] * t[2];
                -k * (p_dot_t - r)
            };
            a.push(Complex64::from_polar(1.0, phase));
        }
    }
    Ok(a)
}

/// Draws one channel realization's path list.
///
/// The LoS path (when `include_los`) uses the fixed r_1/τ_1 with Γ = 1; NLoS
/// paths draw azimuth, elevation, incidence angle, distance, and delay from
/// the configured uniform ranges. Gains are evaluated at the geometry's
/// carrier frequency.
pub fn sample_paths(
    rng: &mut impl Rng,
    config: &ChannelConfig,
    geometry: &ArrayGeometry,
) -> Result<Vec<PathComponent>, ChannelError> {
    config.validate()?;
    let f_c = geometry.f_c();
    let mut paths = Vec::with_capacity(config.num_paths);
    let num_nlos = if config.include_los {
        let phi = draw(rng, config.phi_range);
        let theta = draw(rng, config.theta_range);
        paths.push(PathComponent {
            alpha: path_loss(f_c, config.los_distance, config.k_abs, Complex64::new(1.0, 0.0))?,
            phi,
            theta,
            r: config.los_distance,
            tau: config.los_delay,
            phi_in: 0.0,
            is_los: true,
        });
        config.num_paths - 1
    } else {
        config.num_paths
    };
    for _ in 0..num_nlos {
        let phi = draw(rng, config.phi_range);
        let theta = draw(rng, config.theta_range);
        let phi_in = draw(rng, config.phi_in_range);
        let r = draw(rng, config.nlos_distance_range);
        let tau = draw(rng, config.nlos_delay_range);
        let gamma =
            reflection_coefficient(phi_in, config.refractive_index, config.roughness, f_c);
        paths.push(PathComponent {
            // Spread loss uses the LoS length for every path; the drawn NLoS
            // distance only shapes the wavefront curvature.
            alpha: path_loss(f_c, config.los_distance, config.k_abs, gamma)?,
            phi,
            theta,
            r,
            tau,
            phi_in,
            is_los: false,
        });
    }
    Ok(paths)
}

#[inline]
fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Re-evaluates path gains at frequency `f`, keeping the drawn angles,
/// distances, and delays.
///
/// Wideband evaluation substitutes each subcarrier frequency into the spread
/// loss, the roughness factor of the reflection coefficient, and the array
/// response; the absorption coefficient stays constant over the band.
pub fn gains_at_frequency(
    paths: &[PathComponent],
    config: &ChannelConfig,
    f: f64,
) -> Result<Vec<PathComponent>, ChannelError> {
    paths
        .iter()
        .map(|p| {
            let gamma = if p.is_los {
                Complex64::new(1.0, 0.0)
            } else {
                reflection_coefficient(p.phi_in, config.refractive_index, config.roughness, f)
            };
            Ok(PathComponent {
                alpha: path_loss(f, config.los_distance, config.k_abs, gamma)?,
                ..*p
            })
        })
        .collect()
}

/// Assembles the antenna-domain channel at frequency `f`:
/// h = Σ_l α_l · a(φ_l, θ_l, r_l, f) · e^{−j2πfτ_l}.
pub fn assemble_channel(
    paths: &[PathComponent],
    geometry: &ArrayGeometry,
    f: f64,
) -> Result<ChannelSample, ChannelError> {
    if paths.is_empty() {
        return Err(ChannelError::NoPaths);
    }
    let mut h = vec![Complex64::new(0.0, 0.0); geometry.num_antennas()];
    for path in paths {
        let a = array_response(geometry, path.phi, path.theta, path.r, f, FieldMode::Auto)?;
        let delay_phase = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * f * path.tau);
        let weight = path.alpha * delay_phase;
        for (h_i, a_i) in h.iter_mut().zip(a.iter()) {
            *h_i += weight * a_i;
        }
    }
    let h_real = stack_complex(&h);
    Ok(ChannelSample {
        paths: paths.to_vec(),
        h_complex: h,
        h_real,
    })
}
