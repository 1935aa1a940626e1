//! Ground-truth drift model.
//!
//! Each pixel's TDC is a ring oscillator whose effective code width deviates
//! from nominal: the period at code `k` is `bin_ps * (1 + alpha + beta*k)`.
//! `alpha` captures a static period error (supply-drop effects peak at the
//! array center), `beta` a per-code slope, and `skew_ps` a static routing
//! offset of the pixel's start signal (grows toward later pixels). The
//! cumulative reported-time error at code `c` is then closed-form quadratic:
//!
//! ```text
//! D(p, c) = bin_ps * (alpha_p * c + beta_p * c*(c-1)/2) + skew_ps[p]
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{DetectorGeometry, PixelId};

/// RNG substream index for profile scatter (see [`super::substream`]).
const SCATTER_STREAM: u64 = 4;

/// Spatial pattern used to expand scalar drift magnitudes into per-pixel tables.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftProfile {
    /// Same value everywhere.
    #[default]
    Uniform,
    /// Largest at the array center, falling off with distance (supply drop).
    CenterPeaked,
    /// Grows with the row-major pixel index (signal-distribution gradient).
    RowGradient,
    /// Steps up block-wise along rows (balanced distribution-tree levels).
    Tree,
}

/// Scalar drift description as written in config files; expanded to per-pixel
/// tables by [`DriftConfig::from_spec`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftSpec {
    pub profile: DriftProfile,
    /// Fractional period error at code 0.
    pub alpha: f64,
    /// Per-code slope of the fractional period error.
    pub beta: f64,
    /// Static routing-offset magnitude, picoseconds.
    pub skew_ps: f64,
    /// Per-pixel multiplicative spread: each pixel's profile value is scaled
    /// by (1 + scatter * u) with u drawn once per pixel from [-1, 1).
    pub scatter: f64,
    /// When positive, a pixel's alpha grows with the fraction of TDCs active
    /// in the same observation window: alpha * (1 + scale * (n-1)/n_pixels).
    /// Zero (the default) keeps [`drift_ground_truth`] exact.
    pub activity_alpha_scale: f64,
}

impl Default for DriftSpec {
    fn default() -> Self {
        Self {
            profile: DriftProfile::Uniform,
            alpha: 0.0,
            beta: 0.0,
            skew_ps: 0.0,
            scatter: 0.0,
            activity_alpha_scale: 0.0,
        }
    }
}

/// Fully expanded per-pixel drift tables, row-major linear pixel order.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftConfig {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub skew_ps: Vec<f64>,
    pub activity_alpha_scale: f64,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum DriftError {
    #[error("drift tables have {got} entries, geometry needs {needed}")]
    TableSize { needed: usize, got: usize },
    #[error("pixel {0} outside the array")]
    PixelRange(PixelId),
    #[error("tdc code {code} out of range (n_codes {n_codes})")]
    CodeRange { code: u16, n_codes: u16 },
    #[error("pixel {pixel}: oscillator period is not positive at code {code}")]
    NonPositivePeriod { pixel: PixelId, code: u16 },
}

impl DriftConfig {
    /// Driftless detector.
    pub fn zero(geometry: DetectorGeometry) -> Self {
        let n = geometry.n_pixels() as usize;
        Self {
            alpha: vec![0.0; n],
            beta: vec![0.0; n],
            skew_ps: vec![0.0; n],
            activity_alpha_scale: 0.0,
        }
    }

    /// Expand scalar magnitudes through the spec's spatial profile. The
    /// scatter draw uses a dedicated substream of `seed`, so the same seed
    /// always produces the same tables.
    pub fn from_spec(geometry: DetectorGeometry, spec: &DriftSpec, seed: u64) -> Self {
        let n = geometry.n_pixels() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SCATTER_STREAM);
        let mut alpha = Vec::with_capacity(n);
        let mut beta = Vec::with_capacity(n);
        let mut skew = Vec::with_capacity(n);
        for index in 0..n {
            let pixel = PixelId::from_linear(index as u32, geometry.cols);
            let w = profile_weight(geometry, spec.profile, pixel);
            let s = if spec.scatter != 0.0 {
                1.0 + spec.scatter * rng.random_range(-1.0..1.0)
            } else {
                1.0
            };
            alpha.push(spec.alpha * w * s);
            beta.push(spec.beta * w * s);
            skew.push(spec.skew_ps * w * s);
        }
        Self {
            alpha,
            beta,
            skew_ps: skew,
            activity_alpha_scale: spec.activity_alpha_scale,
        }
    }

    /// Check table sizes and that every per-code oscillator period stays
    /// positive, which the detector response requires.
    pub fn validate(&self, geometry: DetectorGeometry) -> Result<(), DriftError> {
        let needed = geometry.n_pixels() as usize;
        for table in [&self.alpha, &self.beta, &self.skew_ps] {
            if table.len() != needed {
                return Err(DriftError::TableSize {
                    needed,
                    got: table.len(),
                });
            }
        }
        for index in 0..needed {
            // Period is linear in the code, so the extremes are at the ends.
            for code in [0, geometry.n_codes - 1] {
                let period = 1.0 + self.alpha[index] + self.beta[index] * f64::from(code);
                if !period.is_finite() || period <= 0.0 {
                    return Err(DriftError::NonPositivePeriod {
                        pixel: PixelId::from_linear(index as u32, geometry.cols),
                        code,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Profile weight in [0, 1] for one pixel; the scalar magnitudes are
/// multiplied by this to form the tables.
pub fn profile_weight(geometry: DetectorGeometry, profile: DriftProfile, pixel: PixelId) -> f64 {
    match profile {
        DriftProfile::Uniform => 1.0,
        DriftProfile::CenterPeaked => {
            // Quadratic falloff from the array center; corners keep 1/4.
            let cr = f64::from(geometry.rows - 1) / 2.0;
            let cc = f64::from(geometry.cols - 1) / 2.0;
            let d2 = (f64::from(pixel.row) - cr).powi(2) + (f64::from(pixel.col) - cc).powi(2);
            let d2_max = cr * cr + cc * cc;
            if d2_max == 0.0 {
                1.0
            } else {
                1.0 - 0.75 * d2 / d2_max
            }
        }
        DriftProfile::RowGradient => {
            let n = geometry.n_pixels();
            if n <= 1 {
                1.0
            } else {
                f64::from(pixel.linear(geometry.cols)) / f64::from(n - 1)
            }
        }
        DriftProfile::Tree => {
            // Four distribution-tree levels along the rows; constant within a
            // level, stepping up toward later rows.
            let levels = 4u16.min(geometry.rows);
            let level = u32::from(pixel.row) * u32::from(levels) / u32::from(geometry.rows);
            if levels <= 1 {
                1.0
            } else {
                f64::from(level) / f64::from(levels - 1)
            }
        }
    }
}

/// Cumulative reported-time error of `pixel` at TDC code `code`, picoseconds:
/// the drifted code edge minus the nominal one, plus the pixel's static skew.
pub fn drift_ground_truth(
    geometry: DetectorGeometry,
    drift: &DriftConfig,
    pixel: PixelId,
    code: u16,
) -> Result<f64, DriftError> {
    if !geometry.contains(pixel) {
        return Err(DriftError::PixelRange(pixel));
    }
    if code >= geometry.n_codes {
        return Err(DriftError::CodeRange {
            code,
            n_codes: geometry.n_codes,
        });
    }
    let index = pixel.linear(geometry.cols) as usize;
    let c = f64::from(code);
    let bin = f64::from(geometry.bin_ps);
    Ok(bin * (drift.alpha[index] * c + drift.beta[index] * c * (c - 1.0) / 2.0)
        + drift.skew_ps[index])
}

/// Dump the full ground-truth table as CSV: one row per (pixel, code).
pub fn write_ground_truth_csv(
    sink: &mut impl std::io::Write,
    geometry: DetectorGeometry,
    drift: &DriftConfig,
) -> std::io::Result<()> {
    writeln!(sink, "pixel,row,col,code,drift_ps")?;
    for index in 0..geometry.n_pixels() {
        let pixel = PixelId::from_linear(index, geometry.cols);
        for code in 0..geometry.n_codes {
            let d = drift_ground_truth(geometry, drift, pixel, code)
                .expect("pixel and code are in range by construction");
            writeln!(sink, "{index},{},{},{code},{d:.6}", pixel.row, pixel.col)?;
        }
    }
    Ok(())
}
