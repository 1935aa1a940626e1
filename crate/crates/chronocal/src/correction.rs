//! Applying a correction table to an event stream, and measuring how sharp
//! the resulting coincidence peak is.

use thiserror::Error;

use crate::driftfit::CorrectionLut;
use crate::event::{sort_imager_events, ImagerEvent};
use crate::geometry::PixelId;
use crate::histogram::CoincidenceHistogram;

/// Fraction of the baseline-subtracted peak height at which the "full width"
/// is measured (the near-total extent of the peak, vs the conventional 50%).
pub const FULL_WIDTH_THRESHOLD: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CorrectionStats {
    pub events: u64,
    /// Events whose code lay beyond the pixel's calibrated range, corrected
    /// by polynomial extrapolation.
    pub extrapolated: u64,
    /// Events whose corrected time would have left u64 range and was clamped.
    pub clamped: u64,
}

#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
pub enum CorrectionError {
    #[error("event {index}: pixel {pixel} outside the table's detector array")]
    PixelRange { index: usize, pixel: PixelId },
    #[error("event {index}: TDC code {code} out of range (n_codes = {n_codes})")]
    CodeRange {
        index: usize,
        code: u16,
        n_codes: u16,
    },
}

/// Apply per-pixel, per-code offsets to reported timestamps. Pixels and
/// codes are untouched; output is re-sorted into the canonical
/// (time, pixel, code) order since offsets differ across pixels.
pub fn apply_lut(
    events: &[ImagerEvent],
    lut: &CorrectionLut,
) -> Result<(Vec<ImagerEvent>, CorrectionStats), CorrectionError> {
    let mut stats = CorrectionStats {
        events: events.len() as u64,
        ..Default::default()
    };
    let mut corrected = Vec::with_capacity(events.len());
    for (index, e) in events.iter().enumerate() {
        let offset = match lut.offset_ps(e.pixel, e.tdc_code) {
            Some(o) => o,
            None => {
                return Err(if lut.geometry.contains(e.pixel) {
                    CorrectionError::CodeRange {
                        index,
                        code: e.tdc_code,
                        n_codes: lut.geometry.n_codes,
                    }
                } else {
                    CorrectionError::PixelRange {
                        index,
                        pixel: e.pixel,
                    }
                });
            }
        };
        if lut.is_extrapolated(e.pixel, e.tdc_code) {
            stats.extrapolated += 1;
        }
        let shifted = i128::from(e.time_ps) + i128::from(offset);
        let clamped = shifted.clamp(0, i128::from(u64::MAX));
        if clamped != shifted {
            stats.clamped += 1;
        }
        corrected.push(ImagerEvent {
            time_ps: clamped as u64,
            ..*e
        });
    }
    sort_imager_events(&mut corrected);
    Ok((corrected, stats))
}

/// Shape measurements of a coincidence-delay peak.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PeakMetrics {
    /// Baseline-subtracted centroid of the half-height region, ps.
    pub peak_ps: f64,
    pub peak_count: u64,
    /// Accidental pedestal estimated from the outer eighths of the span.
    pub baseline: f64,
    pub fwhm_ps: f64,
    /// Width at [`FULL_WIDTH_THRESHOLD`] of the peak height, ps.
    pub full_width_ps: f64,
    pub total_counts: u64,
}

#[derive(Clone, Copy, Debug, Error, PartialEq)]
pub enum PeakError {
    #[error("histogram is empty")]
    Empty,
    #[error("no significant peak: max count {max} over baseline {baseline:.1}")]
    NoPeak { baseline: f64, max: u64 },
    #[error("width threshold must be inside (0, 1), got {0}")]
    BadThreshold(f64),
}

/// Measure peak position and widths. A width is the extent of the contiguous
/// run of sections at or above the level (rectangle view of the histogram),
/// so it is a multiple of the section width and never narrower than one
/// section — a single hot section reports exactly `section_ps` for both
/// widths, and a smooth peak is measured to within one section of its
/// analytic width.
pub fn peak_metrics(
    hist: &CoincidenceHistogram,
    full_width_threshold: f64,
) -> Result<PeakMetrics, PeakError> {
    if !(full_width_threshold > 0.0 && full_width_threshold < 1.0) {
        return Err(PeakError::BadThreshold(full_width_threshold));
    }
    let n = hist.counts.len();
    if n == 0 || hist.total == 0 {
        return Err(PeakError::Empty);
    }
    let counts: Vec<f64> = hist.counts.iter().map(|&c| c as f64).collect();

    // Baseline from the outer eighths of the delay span, where a drifting
    // detector's peak cannot plausibly sit.
    let edge = (n / 8).max(1).min(n / 2).max(1);
    let mut outer: Vec<f64> = counts[..edge]
        .iter()
        .chain(&counts[n - edge..])
        .copied()
        .collect();
    outer.sort_by(f64::total_cmp);
    let baseline = if outer.len() % 2 == 1 {
        outer[outer.len() / 2]
    } else {
        (outer[outer.len() / 2 - 1] + outer[outer.len() / 2]) / 2.0
    };

    let peak_idx = (0..n)
        .max_by(|&a, &b| counts[a].total_cmp(&counts[b]))
        .expect("nonempty");
    let peak_count = hist.counts[peak_idx];
    let height = counts[peak_idx] - baseline;
    if height <= 5.0 * baseline.max(1.0).sqrt() {
        return Err(PeakError::NoPeak {
            baseline,
            max: peak_count,
        });
    }

    let section = f64::from(hist.section_ps);
    // Contiguous run of sections at or above the level, walking outward from
    // the peak. Returns (width, first index, last index).
    let run_at = |fraction: f64| -> (f64, usize, usize) {
        let level = baseline + height * fraction;
        let mut i = peak_idx;
        while i > 0 && counts[i - 1] >= level {
            i -= 1;
        }
        let mut j = peak_idx;
        while j < n - 1 && counts[j + 1] >= level {
            j += 1;
        }
        ((j - i + 1) as f64 * section, i, j)
    };

    let (fwhm_ps, il, ir) = run_at(0.5);
    let (full_width_ps, _, _) = run_at(full_width_threshold);

    // Peak position: baseline-subtracted centroid over the half-height body.
    let mut wsum = 0.0;
    let mut xsum = 0.0;
    for (i, &count) in counts.iter().enumerate().take(ir + 1).skip(il) {
        let w = (count - baseline).max(0.0);
        wsum += w;
        xsum += w * hist.section_center_ps(i);
    }
    Ok(PeakMetrics {
        peak_ps: xsum / wsum,
        peak_count,
        baseline,
        fwhm_ps,
        full_width_ps,
        total_counts: hist.total,
    })
}
