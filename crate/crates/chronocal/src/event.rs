//! Timestamped detection events.
//!
//! All timestamps are absolute picoseconds since acquisition start, stored as
//! `u64` (covers ~213 days). Downstream stages require streams sorted by
//! time; the sort helpers here report whether input was already sorted so
//! ingestion can record it.

use serde::{Deserialize, Serialize};

use crate::geometry::PixelId;

/// One detection on the reference (bucket) detector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReferenceEvent {
    pub time_ps: u64,
}

/// One detection on the imaging detector: reconstructed global timestamp plus
/// the raw TDC code it was derived from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagerEvent {
    pub time_ps: u64,
    pub pixel: PixelId,
    pub tdc_code: u16,
}

/// Sort reference events by time; returns whether the input was already sorted.
pub fn sort_reference_events(events: &mut [ReferenceEvent]) -> bool {
    let was_sorted = events.windows(2).all(|w| w[0].time_ps <= w[1].time_ps);
    if !was_sorted {
        events.sort_unstable_by_key(|e| e.time_ps);
    }
    was_sorted
}

/// Sort imager events by (time, pixel, code) — a total order, so the result
/// is identical no matter how the input was shuffled. Returns whether the
/// input was already time-sorted.
pub fn sort_imager_events(events: &mut [ImagerEvent]) -> bool {
    let was_sorted = events.windows(2).all(|w| w[0].time_ps <= w[1].time_ps);
    // Sort unconditionally: a time-sorted stream can still have equal-time
    // ties in arbitrary pixel order, and the contract is a total order.
    events.sort_unstable_by_key(|e| (e.time_ps, e.pixel, e.tdc_code));
    was_sorted
}
