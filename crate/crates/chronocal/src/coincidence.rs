//! Coincidence search between the imager stream and the reference stream.
//!
//! Emits every (imager, reference) pairing whose time difference lies within
//! a symmetric window — all pairs, not nearest-neighbour, so accidental
//! coincidences enter the histograms as a flat pedestal that the peak fit
//! can model as baseline. Both inputs must be time-sorted; this is checked
//! up front and reported as an error rather than silently producing garbage.

use thiserror::Error;

use crate::event::{ImagerEvent, ReferenceEvent};
use crate::geometry::PixelId;

/// One matched (imager, reference) pairing.
///
/// `dt_ps` is imager time minus reference time, so a detector that reports
/// late gives positive `dt_ps`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CoincidencePair {
    pub pixel: PixelId,
    pub tdc_code: u16,
    pub dt_ps: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamKind {
    Imager,
    Reference,
}

impl std::fmt::Display for StreamKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StreamKind::Imager => "imager",
            StreamKind::Reference => "reference",
        })
    }
}

#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
pub enum CoincidenceError {
    #[error("{stream} stream is not time-sorted at index {index}")]
    Unsorted { stream: StreamKind, index: usize },
    #[error("window half-width {0} ps does not fit a signed time difference")]
    WindowTooWide(u64),
}

/// Find all (imager, reference) pairs with |imager − reference| ≤
/// `window_half_width_ps` (inclusive on both edges).
///
/// Linear in the two stream lengths plus the number of emitted pairs. Output
/// order is deterministic: by imager event, then by reference time — so
/// running over consecutive slices of the imager stream and concatenating
/// yields exactly the whole-stream result.
pub fn find_coincidences(
    imager: &[ImagerEvent],
    reference: &[ReferenceEvent],
    window_half_width_ps: u64,
) -> Result<Vec<CoincidencePair>, CoincidenceError> {
    if window_half_width_ps > i64::MAX as u64 {
        return Err(CoincidenceError::WindowTooWide(window_half_width_ps));
    }
    if let Some(index) = first_disorder(imager.iter().map(|e| e.time_ps)) {
        return Err(CoincidenceError::Unsorted {
            stream: StreamKind::Imager,
            index,
        });
    }
    if let Some(index) = first_disorder(reference.iter().map(|e| e.time_ps)) {
        return Err(CoincidenceError::Unsorted {
            stream: StreamKind::Reference,
            index,
        });
    }

    let whw = window_half_width_ps;
    let mut pairs = Vec::new();
    let mut start = 0usize; // first reference that can still match
    for e in imager {
        let lo = e.time_ps.saturating_sub(whw);
        let hi = e.time_ps.saturating_add(whw);
        while start < reference.len() && reference[start].time_ps < lo {
            start += 1;
        }
        for r in &reference[start..] {
            if r.time_ps > hi {
                break;
            }
            pairs.push(CoincidencePair {
                pixel: e.pixel,
                tdc_code: e.tdc_code,
                dt_ps: e.time_ps as i64 - r.time_ps as i64,
            });
        }
    }
    Ok(pairs)
}

fn first_disorder(times: impl Iterator<Item = u64>) -> Option<usize> {
    let mut prev = None;
    for (i, t) in times.enumerate() {
        if prev.is_some_and(|p| t < p) {
            return Some(i);
        }
        prev = Some(t);
    }
    None
}
