//! Pilot measurement model: analog combiners, the block DFT dictionary, and
//! the real-valued measurement operator with its cached de-correlated linear
//! estimator.
//!
//! Per pilot slot q the receiver applies one analog combining vector per
//! subarray (one RF chain each), giving S complex measurements per slot and
//! S·Q in total. With the block dictionary F = blkdiag(U, …, U),
//! U = DFT_√S̄ ⊗ DFT_√S̄, the unknown is the angular-domain channel
//! h̄ = Fᴴh̃, and the stacked complex model ȳ = M̄h̄ + n̄ is expanded into an
//! equivalent real system y = Mh + n with
//! M = [[Re M̄, −Im M̄], [Im M̄, Re M̄]] and h = [Re h̄; Im h̄].
//!
//! The linear estimator u = h + W(y − Mh) uses W = η·M† with
//! η = 2S·S̄ / trace(M†M), which zeroes trace(I − WM) ("de-correlated").

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channel::{stack_complex, unstack_complex, ChannelError};
use crate::geometry::ArrayGeometry;

/// Errors from operator construction or application.
#[derive(Debug, Error, PartialEq)]
pub enum MeasurementError {
    #[error("pilot slot count must be at least 1")]
    NoSlots,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("combiner set ({slots} slots of {subarrays}×{entries}) does not match geometry/pilot")]
    CombinerShapeMismatch {
        slots: usize,
        subarrays: usize,
        entries: usize,
    },
    #[error("dictionary is {got}×{got2}, expected {expected} square")]
    DictionaryShapeMismatch {
        got: usize,
        got2: usize,
        expected: usize,
    },
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Analog combiner phase resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinerResolution {
    /// Entries ±1/√S̄ (one-bit phase).
    OneBit,
    /// Unit-modulus entries with arbitrary phase, scaled by 1/√S̄.
    Infinite,
}

/// Pilot schedule: slot count and combiner resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PilotConfig {
    /// Number of pilot slots Q.
    pub num_slots: usize,
    /// Analog combiner resolution.
    pub resolution: CombinerResolution,
}

impl Default for PilotConfig {
    fn default() -> Self {
        Self {
            num_slots: 8,
            resolution: CombinerResolution::OneBit,
        }
    }
}

impl PilotConfig {
    /// Under-sampling ratio ρ = SQ/(S·S̄) = Q/S̄.
    pub fn undersampling_ratio(&self, geometry: &ArrayGeometry) -> f64 {
        (geometry.s() * self.num_slots) as f64 / geometry.num_antennas() as f64
    }
}

/// Per-slot analog combiners: `slots[q][s]` is the S̄-entry combining vector of
/// subarray `s` in slot `q`. Each vector has unit ℓ2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Combiners {
    pub slots: Vec<Vec<Vec<Complex64>>>,
}

/// Block-diagonal dictionary F = blkdiag(U, …, U) with S blocks of
/// U = DFT_√S̄ ⊗ DFT_√S̄ (each factor unitary), as a dense S·S̄ × S·S̄ matrix.
pub fn dft_dictionary(geometry: &ArrayGeometry) -> DMatrix<Complex64> {
    let side = geometry.ae_grid();
    let s_bar = geometry.s_bar();
    let n = geometry.num_antennas();

    // Normalized DFT of size √S̄.
    let scale = 1.0 / (side as f64).sqrt();
    let dft = |a: usize, b: usize| {
        Complex64::from_polar(
            scale,
            -2.0 * std::f64::consts::PI * (a * b) as f64 / side as f64,
        )
    };

    let mut f = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for s in 0..geometry.s() {
        let base = s * s_bar;
        for row in 0..s_bar {
            let (r1, r2) = (row / side, row % side);
            for col in 0..s_bar {
                let (c1, c2) = (col / side, col % side);
                f[(base + row, base + col)] = dft(r1, c1) * dft(r2, c2);
            }
        }
    }
    f
}

/// Draws the per-slot analog combiners.
///
/// One-bit resolution draws entries uniformly from {+1/√S̄, −1/√S̄};
/// infinite resolution draws uniform phases. Every combining vector has unit
/// norm by construction.
pub fn sample_combiners(
    rng: &mut impl Rng,
    geometry: &ArrayGeometry,
    pilot: &PilotConfig,
) -> Combiners {
    let s_bar = geometry.s_bar();
    let magnitude = 1.0 / (s_bar as f64).sqrt();
    let slots = (0..pilot.num_slots)
        .map(|_| {
            (0..geometry.s())
                .map(|_| {
                    (0..s_bar)
                        .map(|_| match pilot.resolution {
                            CombinerResolution::OneBit => {
                                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                                Complex64::new(sign * magnitude, 0.0)
                            }
                            CombinerResolution::Infinite => Complex64::from_polar(
                                magnitude,
                                rng.gen_range(0.0..2.0 * std::f64::consts::PI),
                            ),
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Combiners { slots }
}

/// The immutable measurement operator: dictionary, complex and real
/// measurement matrices, and the cached de-correlated LE matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOperator {
    geometry: ArrayGeometry,
    pilot: PilotConfig,
    f_dict: DMatrix<Complex64>,
    m_complex: DMatrix<Complex64>,
    m_real: DMatrix<f64>,
    w: DMatrix<f64>,
    eta: f64,
}

impl MeasurementOperator {
    /// Geometry the operator was built for.
    pub fn geometry(&self) -> &ArrayGeometry {
        &self.geometry
    }

    /// Pilot schedule the operator was built for.
    pub fn pilot(&self) -> &PilotConfig {
        &self.pilot
    }

    /// Dictionary F.
    pub fn dictionary(&self) -> &DMatrix<Complex64> {
        &self.f_dict
    }

    /// Complex measurement matrix M̄ (SQ × S·S̄).
    pub fn m_complex(&self) -> &DMatrix<Complex64> {
        &self.m_complex
    }

    /// Real measurement matrix M (2SQ × 2S·S̄).
    pub fn m_real(&self) -> &DMatrix<f64> {
        &self.m_real
    }

    /// Cached LE matrix W = η·M† (2S·S̄ × 2SQ).
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// LE step scalar η = 2S·S̄/trace(M†M).
    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Measurement dimension 2SQ.
    pub fn rows(&self) -> usize {
        self.m_real.nrows()
    }

    /// Channel dimension 2S·S̄.
    pub fn cols(&self) -> usize {
        self.m_real.ncols()
    }

    /// y = M·h + n.
    pub fn observe(
        &self,
        h_real: &DVector<f64>,
        noise: &DVector<f64>,
    ) -> Result<DVector<f64>, MeasurementError> {
        if h_real.len() != self.cols() {
            return Err(MeasurementError::DimensionMismatch {
                expected: self.cols(),
                got: h_real.len(),
            });
        }
        if noise.len() != self.rows() {
            return Err(MeasurementError::DimensionMismatch {
                expected: self.rows(),
                got: noise.len(),
            });
        }
        Ok(&self.m_real * h_real + noise)
    }

    /// Maps a spatial (antenna-domain) complex channel to the real estimation
    /// domain: [Re(Fᴴh̃); Im(Fᴴh̃)].
    pub fn to_estimation_domain(
        &self,
        h_spatial: &[Complex64],
    ) -> Result<DVector<f64>, MeasurementError> {
        if h_spatial.len() != self.geometry.num_antennas() {
            return Err(MeasurementError::DimensionMismatch {
                expected: self.geometry.num_antennas(),
                got: h_spatial.len(),
            });
        }
        let h = DVector::from_column_slice(h_spatial);
        let h_bar = self.f_dict.adjoint() * h;
        Ok(DVector::from_vec(stack_complex(h_bar.as_slice())))
    }

    /// Inverse of [`Self::to_estimation_domain`]: spatial channel F·h̄.
    pub fn to_spatial_domain(
        &self,
        h_est: &DVector<f64>,
    ) -> Result<Vec<Complex64>, MeasurementError> {
        if h_est.len() != self.cols() {
            return Err(MeasurementError::DimensionMismatch {
                expected: self.cols(),
                got: h_est.len(),
            });
        }
        let h_bar = unstack_complex(h_est.as_slice())?;
        let spatial = &self.f_dict * DVector::from_vec(h_bar);
        Ok(spatial.as_slice().to_vec())
    }

    /// SHA-256 digest of the real measurement matrix (little-endian f64 bytes,
    /// column-major). Identifies the operator in dataset files.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.m_real.as_slice() {
            hasher.update(v.to_le_bytes());
        }
        format!("{:x}", hasher.finalize())
    }
}

/// Moore-Penrose pseudo-inverse via SVD with a relative singular-value cutoff.
pub fn pseudo_inverse(m: &DMatrix<f64>, relative_cutoff: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd requested u");
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");
    let max_sv = svd.singular_values.max();
    let cutoff = relative_cutoff * max_sv;
    let inv_sv = DVector::from_iterator(
        svd.singular_values.len(),
        svd.singular_values
            .iter()
            .map(|&s| if s > cutoff { 1.0 / s } else { 0.0 }),
    );
    // M† = V Σ† Uᵀ, assembled without forming Σ†.
    let mut vt_scaled = v_t.clone();
    for (i, &inv) in inv_sv.iter().enumerate() {
        vt_scaled.row_mut(i).scale_mut(inv);
    }
    vt_scaled.transpose() * u.transpose()
}

/// Builds the measurement operator from drawn combiners and the dictionary.
///
/// M̄ stacks the per-slot blocks W_qᴴF (slot-major); the real expansion and
/// the LE matrix W = η·M† (SVD pseudo-inverse, relative cutoff 1e−12) are
/// cached. η = 2S·S̄/trace(M†M).
pub fn build_operator(
    combiners: &Combiners,
    f_dict: &DMatrix<Complex64>,
    geometry: &ArrayGeometry,
    pilot: &PilotConfig,
) -> Result<MeasurementOperator, MeasurementError> {
    if pilot.num_slots == 0 {
        return Err(MeasurementError::NoSlots);
    }
    let s = geometry.s();
    let s_bar = geometry.s_bar();
    let n = geometry.num_antennas();
    if combiners.slots.len() != pilot.num_slots
        || combiners.slots.iter().any(|slot| {
            slot.len() != s || slot.iter().any(|w| w.len() != s_bar)
        })
    {
        let slots = combiners.slots.len();
        let subarrays = combiners.slots.first().map_or(0, |v| v.len());
        let entries = combiners
            .slots
            .first()
            .and_then(|v| v.first())
            .map_or(0, |w| w.len());
        return Err(MeasurementError::CombinerShapeMismatch {
            slots,
            subarrays,
            entries,
        });
    }
    if f_dict.nrows() != n || f_dict.ncols() != n {
        return Err(MeasurementError::DictionaryShapeMismatch {
            got: f_dict.nrows(),
            got2: f_dict.ncols(),
            expected: n,
        });
    }

    // Row (q·S + s) of M̄ is w_{s,q}ᴴ applied to SA s's dictionary block; the
    // block-diagonal structure keeps all other columns zero.
    let mut m_complex = DMatrix::from_element(s * pilot.num_slots, n, Complex64::new(0.0, 0.0));
    for (q, slot) in combiners.slots.iter().enumerate() {
        for (sa, w_vec) in slot.iter().enumerate() {
            let row = q * s + sa;
            let base = sa * s_bar;
            for col in 0..s_bar {
                let mut acc = Complex64::new(0.0, 0.0);
                for (k, w_k) in w_vec.iter().enumerate() {
                    acc += w_k.conj() * f_dict[(base + k, base + col)];
                }
                m_complex[(row, base + col)] = acc;
            }
        }
    }

    // Real expansion [[Re, −Im], [Im, Re]].
    let rows_c = m_complex.nrows();
    let mut m_real = DMatrix::zeros(2 * rows_c, 2 * n);
    for r in 0..rows_c {
        for c in 0..n {
            let z = m_complex[(r, c)];
            m_real[(r, c)] = z.re;
            m_real[(r, n + c)] = -z.im;
            m_real[(rows_c + r, c)] = z.im;
            m_real[(rows_c + r, n + c)] = z.re;
        }
    }

    let pinv = pseudo_inverse(&m_real, 1e-12);
    let trace_pinv_m = (&pinv * &m_real).trace();
    let eta = 2.0 * n as f64 / trace_pinv_m;
    let w = pinv * eta;

    Ok(MeasurementOperator {
        geometry: *geometry,
        pilot: *pilot,
        f_dict: f_dict.clone(),
        m_complex,
        m_real,
        w,
        eta,
    })
}

/// Convenience: draw combiners from `rng` and build the operator in one step.
pub fn draw_operator(
    rng: &mut impl Rng,
    geometry: &ArrayGeometry,
    pilot: &PilotConfig,
) -> Result<MeasurementOperator, MeasurementError> {
    let f_dict = dft_dictionary(geometry);
    let combiners = sample_combiners(rng, geometry, pilot);
    build_operator(&combiners, &f_dict, geometry, pilot)
}
