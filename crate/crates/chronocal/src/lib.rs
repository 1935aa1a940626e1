//! Calibration toolkit for single-photon imaging arrays whose per-pixel TDCs
//! drift: a correlated-pair physics simulator, coincidence histogramming
//! against a low-jitter reference detector, per-pixel drift-curve fitting,
//! and correction-table construction and application.

pub mod codec;
pub mod config;
pub mod coincidence;
pub mod correction;
pub mod driftfit;
pub mod event;
pub mod geometry;
pub mod histogram;
pub mod sim;

pub use event::{ImagerEvent, ReferenceEvent};
pub use geometry::{DetectorGeometry, PixelId};
