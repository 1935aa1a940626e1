//! Run configuration: one TOML file covering detector geometry, source and
//! drift parameters for simulation, and the analysis settings. Every field
//! has a default, so an empty file is a valid (if small) run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::driftfit::{FitSettings, ReferencePolicy};
use crate::geometry::DetectorGeometry;
use crate::histogram::HistogramParams;
use crate::sim::drift::DriftSpec;
use crate::sim::SourceConfig;

/// Coincidence, histogramming, fitting and report settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Coincidence window half-width, ps.
    pub window_half_width_ps: u64,
    /// Delay-histogram section width, ps.
    pub section_ps: u32,
    /// TDC codes pooled per histogram.
    pub group_size: u16,
    /// Minimum counts before a group's peak is fitted.
    pub min_counts: u64,
    /// Degree of the delay-vs-code polynomial.
    pub poly_degree: usize,
    pub reference_policy: ReferencePolicy,
    /// Fraction of peak height at which the full width is measured.
    pub full_width_threshold: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            window_half_width_ps: 25_000,
            section_ps: 100,
            group_size: 16,
            min_counts: 100,
            poly_degree: 2,
            reference_policy: ReferencePolicy::default(),
            full_width_threshold: crate::correction::FULL_WIDTH_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: DetectorGeometry,
    pub source: SourceConfig,
    pub drift: DriftSpec,
    pub analysis: AnalysisConfig,
}

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn histogram_params(&self) -> HistogramParams {
        HistogramParams {
            geometry: self.geometry,
            group_size: self.analysis.group_size,
            section_ps: self.analysis.section_ps,
            window_half_width_ps: self.analysis.window_half_width_ps,
        }
    }

    pub fn fit_settings(&self) -> FitSettings {
        FitSettings {
            min_counts: self.analysis.min_counts,
            degree: self.analysis.poly_degree,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigFileError> {
        let invalid = |m: String| ConfigFileError::Invalid(m);
        self.geometry.validate().map_err(|e| invalid(e.to_string()))?;
        self.source
            .validate(self.geometry)
            .map_err(|e| invalid(e.to_string()))?;
        self.histogram_params()
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        let a = &self.analysis;
        if !(a.full_width_threshold > 0.0 && a.full_width_threshold < 1.0) {
            return Err(invalid(format!(
                "full_width_threshold must be inside (0, 1), got {}",
                a.full_width_threshold
            )));
        }
        if a.poly_degree == 0 || a.poly_degree > 6 {
            return Err(invalid(format!(
                "poly_degree must be between 1 and 6, got {}",
                a.poly_degree
            )));
        }
        let d = &self.drift;
        for (name, v) in [
            ("drift.alpha", d.alpha),
            ("drift.beta", d.beta),
            ("drift.skew_ps", d.skew_ps),
        ] {
            if !v.is_finite() {
                return Err(invalid(format!("{name} must be finite, got {v}")));
            }
        }
        if !(d.scatter.is_finite() && (0.0..1.0).contains(&d.scatter)) {
            return Err(invalid(format!(
                "drift.scatter must be in [0, 1), got {}",
                d.scatter
            )));
        }
        if !(d.activity_alpha_scale.is_finite() && d.activity_alpha_scale >= 0.0) {
            return Err(invalid(format!(
                "drift.activity_alpha_scale must be finite and >= 0, got {}",
                d.activity_alpha_scale
            )));
        }
        Ok(())
    }
}

pub fn parse_config(text: &str, path: &Path) -> Result<RunConfig, ConfigFileError> {
    let config: RunConfig = toml::from_str(text).map_err(|source| ConfigFileError::Parse {
        path: path.to_owned(),
        source: Box::new(source),
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigFileError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigFileError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_config(&text, path)
}
