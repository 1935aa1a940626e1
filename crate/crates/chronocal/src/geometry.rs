//! Detector geometry: array dimensions, TDC characteristics, pixel addressing.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Address of one pixel in the array, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelId {
    pub row: u16,
    pub col: u16,
}

impl PixelId {
    pub fn new(row: u16, col: u16) -> Self {
        Self { row, col }
    }

    /// Row-major linear index.
    pub fn linear(self, cols: u16) -> u32 {
        u32::from(self.row) * u32::from(cols) + u32::from(self.col)
    }

    /// Inverse of [`PixelId::linear`].
    pub fn from_linear(index: u32, cols: u16) -> Self {
        let cols32 = u32::from(cols.max(1));
        Self {
            row: (index / cols32) as u16,
            col: (index % cols32) as u16,
        }
    }
}

impl fmt::Display for PixelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

/// Static description of the imaging detector: array size plus the TDC's
/// code count and nominal code width.
///
/// One observation window is `n_codes * bin_ps` picoseconds long; every
/// detection inside it is reported as a code in `0..n_codes`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorGeometry {
    pub rows: u16,
    pub cols: u16,
    /// Number of TDC codes per observation window.
    pub n_codes: u16,
    /// Nominal width of one TDC code, picoseconds.
    pub bin_ps: u16,
}

impl Default for DetectorGeometry {
    fn default() -> Self {
        Self {
            rows: 32,
            cols: 32,
            n_codes: 256,
            bin_ps: 210,
        }
    }
}

impl DetectorGeometry {
    pub fn n_pixels(&self) -> u32 {
        u32::from(self.rows) * u32::from(self.cols)
    }

    /// Nominal observation-window length, picoseconds.
    pub fn window_ps(&self) -> u64 {
        u64::from(self.n_codes) * u64::from(self.bin_ps)
    }

    pub fn contains(&self, pixel: PixelId) -> bool {
        pixel.row < self.rows && pixel.col < self.cols
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.rows == 0 || self.cols == 0 || self.n_codes == 0 || self.bin_ps == 0 {
            return Err(GeometryError::ZeroField(*self));
        }
        Ok(())
    }
}

impl fmt::Display for DetectorGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{} pixels, {} codes x {} ps",
            self.rows, self.cols, self.n_codes, self.bin_ps
        )
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("all geometry fields must be nonzero, got {0}")]
    ZeroField(DetectorGeometry),
    #[error("geometry mismatch: events are {events}, correction table is {table}")]
    Mismatch {
        events: DetectorGeometry,
        table: DetectorGeometry,
    },
}
