//! Per-pixel drift-curve estimation and correction-table construction.
//!
//! For every pixel, each code group's delay histogram is reduced to a peak
//! position by [`gaussian`], and the accepted peaks are fit with a low-order
//! polynomial in TDC code by [`polyfit`], weighted by their counts. The
//! fitted curves are anchored to a common reference delay and tabulated into
//! a per-pixel, per-code integer correction table.
//!
//! Pixels are fitted independently (and in parallel); results are collected
//! in pixel order, so the output is identical for any worker-thread count.

pub mod gaussian;
mod linalg;
pub mod polyfit;

use std::io::{self, Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gaussian::{fit_gaussian, GaussianFit};
pub use polyfit::{eval_poly, weighted_polyfit, PolyfitError};

use crate::geometry::{DetectorGeometry, PixelId};
use crate::histogram::HistogramSet;

/// Acceptance thresholds for turning histograms into a drift model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    /// Minimum counts a code group needs before its peak is fitted.
    pub min_counts: u64,
    /// Degree of the delay-vs-code polynomial.
    pub degree: usize,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            min_counts: 100,
            degree: 2,
        }
    }
}

/// One accepted code-group peak used as a point of the drift curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupPeak {
    pub group: usize,
    /// Representative (central) code of the group — the fit abscissa.
    pub code: u16,
    pub mean_ps: f64,
    pub sigma_ps: f64,
    pub counts: u64,
}

/// Fitted drift curve of one pixel: delay vs TDC code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftModel {
    pub pixel: PixelId,
    /// Monomial coefficients, constant term first.
    pub coeffs: Vec<f64>,
    /// Largest code still covered by an accepted group; corrections beyond
    /// it extrapolate the polynomial.
    pub valid_code_max: u16,
    pub groups: Vec<GroupPeak>,
}

impl DriftModel {
    pub fn predicted_delay_ps(&self, code: u16) -> f64 {
        eval_poly(&self.coeffs, f64::from(code))
    }

    pub fn total_counts(&self) -> u64 {
        self.groups.iter().map(|g| g.counts).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupOutcome {
    Accepted,
    LowCounts,
    NoConvergence,
}

/// Per code-group fit record, kept for every group whether or not it was
/// accepted — the audit trail for sparse or misbehaving regions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDiagnostic {
    pub pixel: PixelId,
    pub group: usize,
    pub code: u16,
    pub counts: u64,
    pub outcome: GroupOutcome,
    pub mean_ps: Option<f64>,
    pub sigma_ps: Option<f64>,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum FitRejection {
    #[error("pixel {pixel}: {got} usable code groups, need {needed}")]
    InsufficientGroups {
        pixel: PixelId,
        got: usize,
        needed: usize,
    },
    #[error("pixel {pixel}: drift curve fit failed: {source}")]
    Polyfit {
        pixel: PixelId,
        source: PolyfitError,
    },
}

/// Fit one pixel's drift curve from its per-group peak fits (`fits[g]` is
/// group g's Gaussian fit). Groups that did not converge or hold fewer than
/// `min_counts` counts are discarded; each surviving group contributes its
/// peak position at the group's central code, weighted by its counts.
pub fn estimate_drift(
    fits: &[GaussianFit],
    pixel: PixelId,
    group_size: u16,
    n_codes: u16,
    settings: FitSettings,
) -> Result<DriftModel, FitRejection> {
    let peaks: Vec<GroupPeak> = fits
        .iter()
        .enumerate()
        .filter(|(_, f)| f.converged && f.total_counts >= settings.min_counts)
        .map(|(group, f)| GroupPeak {
            group,
            code: representative_code(group, group_size, n_codes),
            mean_ps: f.mean_ps,
            sigma_ps: f.sigma_ps,
            counts: f.total_counts,
        })
        .collect();
    let needed = settings.degree + 1;
    if peaks.len() < needed {
        return Err(FitRejection::InsufficientGroups {
            pixel,
            got: peaks.len(),
            needed,
        });
    }
    let x: Vec<f64> = peaks.iter().map(|p| f64::from(p.code)).collect();
    let y: Vec<f64> = peaks.iter().map(|p| p.mean_ps).collect();
    let w: Vec<f64> = peaks.iter().map(|p| p.counts as f64).collect();
    let coeffs = weighted_polyfit(&x, &y, &w, settings.degree)
        .map_err(|source| FitRejection::Polyfit { pixel, source })?;
    let group_max = peaks.last().expect("nonempty").group;
    let top_code = (group_max as u64 + 1) * u64::from(group_size) - 1;
    let valid_code_max = top_code.min(u64::from(n_codes - 1)) as u16;
    Ok(DriftModel {
        pixel,
        coeffs,
        valid_code_max,
        groups: peaks,
    })
}

fn representative_code(group: usize, group_size: u16, n_codes: u16) -> u16 {
    let rep = group as u64 * u64::from(group_size) + u64::from(group_size - 1) / 2;
    rep.min(u64::from(n_codes - 1)) as u16
}

/// Fit one pixel end to end from its histograms: Gaussian peak per group,
/// then the drift curve. Diagnostics are returned for every group
/// regardless of the overall outcome.
pub fn fit_pixel(
    set: &HistogramSet,
    pixel: PixelId,
    settings: FitSettings,
) -> (Result<DriftModel, FitRejection>, Vec<GroupDiagnostic>) {
    let params = set.params();
    let n_groups = params.n_groups();
    let mut diagnostics = Vec::with_capacity(n_groups);
    let mut fits = Vec::with_capacity(n_groups);
    for group in 0..n_groups {
        let code = params.representative_code(group);
        let counts = set.total(pixel, group);
        let hist = set.histogram(pixel, group).expect("group index in range");
        let fit = fit_gaussian(&hist, settings.min_counts);
        let outcome = if counts < settings.min_counts {
            GroupOutcome::LowCounts
        } else if fit.converged {
            GroupOutcome::Accepted
        } else {
            GroupOutcome::NoConvergence
        };
        diagnostics.push(GroupDiagnostic {
            pixel,
            group,
            code,
            counts,
            outcome,
            mean_ps: fit.converged.then_some(fit.mean_ps),
            sigma_ps: fit.converged.then_some(fit.sigma_ps),
        });
        fits.push(fit);
    }
    let result = estimate_drift(
        &fits,
        pixel,
        params.group_size,
        params.geometry.n_codes,
        settings,
    );
    (result, diagnostics)
}

/// The drift models of a whole array, indexed by linear pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSet {
    pub geometry: DetectorGeometry,
    pub group_size: u16,
    pub settings: FitSettings,
    pub models: Vec<Option<DriftModel>>,
}

impl ModelSet {
    pub fn calibrated_count(&self) -> usize {
        self.models.iter().filter(|m| m.is_some()).count()
    }
}

/// Fit every pixel (in parallel) and collect models plus the full group
/// diagnostic log, both in pixel order.
pub fn fit_all(set: &HistogramSet, settings: FitSettings) -> (ModelSet, Vec<GroupDiagnostic>) {
    let geometry = set.params().geometry;
    let per_pixel: Vec<(Option<DriftModel>, Vec<GroupDiagnostic>)> = (0..geometry.n_pixels())
        .into_par_iter()
        .map(|linear| {
            let pixel = PixelId::from_linear(linear, geometry.cols);
            let (result, diagnostics) = fit_pixel(set, pixel, settings);
            (result.ok(), diagnostics)
        })
        .collect();
    let mut models = Vec::with_capacity(per_pixel.len());
    let mut diagnostics = Vec::new();
    for (model, diags) in per_pixel {
        models.push(model);
        diagnostics.extend(diags);
    }
    (
        ModelSet {
            geometry,
            group_size: set.params().group_size,
            settings,
            models,
        },
        diagnostics,
    )
}

/// How the common reference delay (the value every pixel is aligned to) is
/// chosen from the fitted curves' code-zero delays.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum ReferencePolicy {
    /// Count-weighted mean across calibrated pixels.
    #[default]
    WeightedMean,
    /// Median across calibrated pixels.
    Median,
    /// Explicit delay in ps.
    Fixed(f64),
}

impl FromStr for ReferencePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "weighted-mean" => Ok(ReferencePolicy::WeightedMean),
            "median" => Ok(ReferencePolicy::Median),
            other => {
                if let Some(v) = other.strip_prefix("fixed:") {
                    let v: f64 = v
                        .parse()
                        .map_err(|e| format!("fixed reference delay: {e}"))?;
                    if !v.is_finite() {
                        return Err("fixed reference delay must be finite".into());
                    }
                    Ok(ReferencePolicy::Fixed(v))
                } else {
                    Err(format!(
                        "unknown reference policy `{other}` (expected weighted-mean, median, or fixed:<ps>)"
                    ))
                }
            }
        }
    }
}

impl std::fmt::Display for ReferencePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReferencePolicy::WeightedMean => f.write_str("weighted-mean"),
            ReferencePolicy::Median => f.write_str("median"),
            ReferencePolicy::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

impl Serialize for ReferencePolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ReferencePolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum LutError {
    #[error("no pixel produced a usable drift model")]
    NoCalibratedPixels,
}

/// Where a pixel's correction curve came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelProvenance {
    /// Fitted from this pixel's own coincidence data.
    Calibrated,
    /// Array-median curve substituted for a pixel that could not be fitted.
    Fallback,
}

/// Per-pixel, per-code correction table.
///
/// `offsets` holds, pixel-major, the integer correction in ps added to a
/// reported timestamp: `round(reference_ps − curve_p(code))`. It is
/// recomputed from the stored curves on load, so the JSON form alone is a
/// complete description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionLut {
    pub geometry: DetectorGeometry,
    pub reference_ps: f64,
    pub reference_policy: ReferencePolicy,
    /// Per-pixel curve coefficients (constant term first).
    pub coeffs: Vec<Vec<f64>>,
    /// Per-pixel last code covered by data; beyond it the curve extrapolates.
    pub valid_code_max: Vec<u16>,
    pub provenance: Vec<PixelProvenance>,
    #[serde(skip)]
    pub offsets: Vec<i32>,
}

impl CorrectionLut {
    pub fn offset_ps(&self, pixel: PixelId, code: u16) -> Option<i32> {
        if !self.geometry.contains(pixel) || code >= self.geometry.n_codes {
            return None;
        }
        let idx = pixel.linear(self.geometry.cols) as usize * usize::from(self.geometry.n_codes)
            + usize::from(code);
        Some(self.offsets[idx])
    }

    pub fn is_extrapolated(&self, pixel: PixelId, code: u16) -> bool {
        code > self.valid_code_max[pixel.linear(self.geometry.cols) as usize]
    }

    pub fn calibrated_count(&self) -> usize {
        self.provenance
            .iter()
            .filter(|p| **p == PixelProvenance::Calibrated)
            .count()
    }

    /// Recompute the integer offset table from the stored curves.
    pub fn rebuild_offsets(&mut self) {
        let n_codes = usize::from(self.geometry.n_codes);
        let mut offsets = Vec::with_capacity(self.coeffs.len() * n_codes);
        for coeffs in &self.coeffs {
            for code in 0..n_codes {
                let o = self.reference_ps - eval_poly(coeffs, code as f64);
                offsets.push(o.round().clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i32);
            }
        }
        self.offsets = offsets;
    }
}

fn median_f64(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// The common delay every pixel is aligned to, per `policy`.
pub fn choose_reference(models: &ModelSet, policy: ReferencePolicy) -> Result<f64, LutError> {
    if let ReferencePolicy::Fixed(v) = policy {
        return Ok(v);
    }
    let calibrated: Vec<&DriftModel> = models.models.iter().flatten().collect();
    if calibrated.is_empty() {
        return Err(LutError::NoCalibratedPixels);
    }
    match policy {
        ReferencePolicy::WeightedMean => {
            let mut wsum = 0.0;
            let mut vsum = 0.0;
            for m in &calibrated {
                let w = m.total_counts() as f64;
                wsum += w;
                vsum += w * m.coeffs[0];
            }
            Ok(vsum / wsum)
        }
        ReferencePolicy::Median => {
            let mut anchors: Vec<f64> = calibrated.iter().map(|m| m.coeffs[0]).collect();
            Ok(median_f64(&mut anchors))
        }
        ReferencePolicy::Fixed(_) => unreachable!("handled above"),
    }
}

/// Build the correction table. Pixels without a model receive the
/// component-wise median of the calibrated curves.
pub fn build_lut(models: &ModelSet, policy: ReferencePolicy) -> Result<CorrectionLut, LutError> {
    let calibrated: Vec<&DriftModel> = models.models.iter().flatten().collect();
    if calibrated.is_empty() {
        return Err(LutError::NoCalibratedPixels);
    }
    let reference_ps = choose_reference(models, policy)?;
    let n_coeffs = models.settings.degree + 1;
    let fallback_coeffs: Vec<f64> = (0..n_coeffs)
        .map(|j| {
            let mut vals: Vec<f64> = calibrated.iter().map(|m| m.coeffs[j]).collect();
            median_f64(&mut vals)
        })
        .collect();
    let fallback_valid = {
        let mut vals: Vec<u16> = calibrated.iter().map(|m| m.valid_code_max).collect();
        vals.sort_unstable();
        vals[vals.len() / 2]
    };

    let n_pixels = models.geometry.n_pixels() as usize;
    let mut coeffs = Vec::with_capacity(n_pixels);
    let mut valid_code_max = Vec::with_capacity(n_pixels);
    let mut provenance = Vec::with_capacity(n_pixels);
    for model in &models.models {
        match model {
            Some(m) => {
                coeffs.push(m.coeffs.clone());
                valid_code_max.push(m.valid_code_max);
                provenance.push(PixelProvenance::Calibrated);
            }
            None => {
                coeffs.push(fallback_coeffs.clone());
                valid_code_max.push(fallback_valid);
                provenance.push(PixelProvenance::Fallback);
            }
        }
    }
    let mut lut = CorrectionLut {
        geometry: models.geometry,
        reference_ps,
        reference_policy: policy,
        coeffs,
        valid_code_max,
        provenance,
        offsets: Vec::new(),
    };
    lut.rebuild_offsets();
    Ok(lut)
}

#[derive(Debug, Error)]
pub enum LutIoError {
    #[error("correction table I/O: {0}")]
    Io(#[from] io::Error),
    #[error("correction table JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("correction table is inconsistent: {0}")]
    Invalid(String),
    #[error("binary offset table holds {got} entries, geometry needs {expected}")]
    BinLength { expected: usize, got: usize },
}

pub fn write_lut_json(mut w: impl Write, lut: &CorrectionLut) -> Result<(), LutIoError> {
    serde_json::to_writer_pretty(&mut w, lut)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_lut_json(r: impl Read) -> Result<CorrectionLut, LutIoError> {
    let mut lut: CorrectionLut = serde_json::from_reader(r)?;
    let invalid = |m: String| LutIoError::Invalid(m);
    lut.geometry
        .validate()
        .map_err(|e| invalid(e.to_string()))?;
    let n_pixels = lut.geometry.n_pixels() as usize;
    if lut.coeffs.len() != n_pixels
        || lut.valid_code_max.len() != n_pixels
        || lut.provenance.len() != n_pixels
    {
        return Err(invalid(format!(
            "per-pixel tables sized {}/{}/{}, geometry has {} pixels",
            lut.coeffs.len(),
            lut.valid_code_max.len(),
            lut.provenance.len(),
            n_pixels
        )));
    }
    if !lut.reference_ps.is_finite() {
        return Err(invalid("reference delay is not finite".into()));
    }
    for (i, c) in lut.coeffs.iter().enumerate() {
        if c.is_empty() || c.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("pixel {i}: bad curve coefficients")));
        }
    }
    if let Some((i, &v)) = lut
        .valid_code_max
        .iter()
        .enumerate()
        .find(|&(_, &v)| v >= lut.geometry.n_codes)
    {
        return Err(invalid(format!(
            "pixel {i}: valid_code_max {v} out of code range"
        )));
    }
    lut.rebuild_offsets();
    Ok(lut)
}

/// Binary offset sidecar: the `offsets` array as little-endian i32,
/// pixel-major (all codes of pixel 0, then pixel 1, ...).
pub fn write_lut_bin(mut w: impl Write, lut: &CorrectionLut) -> Result<(), LutIoError> {
    for &o in &lut.offsets {
        w.write_all(&o.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_lut_bin(geometry: DetectorGeometry, bytes: &[u8]) -> Result<Vec<i32>, LutIoError> {
    let expected = geometry.n_pixels() as usize * usize::from(geometry.n_codes);
    if bytes.len() != expected * 4 {
        return Err(LutIoError::BinLength {
            expected,
            got: bytes.len() / 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect())
}

/// Group-fit audit log as CSV (pixels as linear index plus row/col).
pub fn write_fit_diagnostics_csv(
    w: &mut impl Write,
    cols: u16,
    diagnostics: &[GroupDiagnostic],
) -> io::Result<()> {
    writeln!(w, "pixel,row,col,group,code,counts,outcome,mean_ps,sigma_ps")?;
    for d in diagnostics {
        let outcome = match d.outcome {
            GroupOutcome::Accepted => "accepted",
            GroupOutcome::LowCounts => "low_counts",
            GroupOutcome::NoConvergence => "no_convergence",
        };
        let mean = d.mean_ps.map_or(String::new(), |v| format!("{v:.3}"));
        let sigma = d.sigma_ps.map_or(String::new(), |v| format!("{v:.3}"));
        writeln!(
            w,
            "{},{},{},{},{},{},{outcome},{mean},{sigma}",
            d.pixel.linear(cols),
            d.pixel.row,
            d.pixel.col,
            d.group,
            d.code,
            d.counts
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coincidence::CoincidencePair;
    use crate::histogram::HistogramParams;
    use approx::assert_relative_eq;

    fn params(n_codes: u16) -> HistogramParams {
        HistogramParams {
            geometry: DetectorGeometry {
                rows: 1,
                cols: 2,
                n_codes,
                bin_ps: 210,
            },
            group_size: 16,
            section_ps: 100,
            window_half_width_ps: 4_000,
        }
    }

    /// Fill one pixel's histograms with clean Gaussian peaks centred at
    /// `curve(code)`, with `amplitude` counts at the peak section.
    fn fill_pixel(
        set: &mut HistogramSet,
        pixel: PixelId,
        curve: impl Fn(f64) -> f64,
        amplitude: f64,
        groups: std::ops::Range<usize>,
    ) {
        let p = *set.params();
        for group in groups {
            let code = p.representative_code(group);
            let mu = curve(f64::from(code));
            for section in 0..p.n_sections() {
                let x = p.origin_ps() as f64 + (section as f64 + 0.5) * f64::from(p.section_ps);
                let t = (x - mu) / 300.0;
                let count = (amplitude * (-0.5 * t * t).exp()).round() as u64;
                for _ in 0..count {
                    set.accumulate(CoincidencePair {
                        pixel,
                        tdc_code: code,
                        dt_ps: x as i64,
                    })
                    .unwrap();
                }
            }
        }
    }

    /// A clean converged fit at a given peak position and weight.
    fn peak_fit(mean_ps: f64, counts: u64) -> GaussianFit {
        GaussianFit {
            amplitude: 100.0,
            mean_ps,
            sigma_ps: 300.0,
            baseline: 0.0,
            rss: 0.0,
            iterations: 5,
            converged: true,
            total_counts: counts,
        }
    }

    #[test]
    fn grouping_choice_does_not_change_an_exact_quadratic() {
        let q = |c: f64| -40.0 - 4.2 * c - 0.021 * c * c;
        let pixel = PixelId::new(0, 0);
        let settings = FitSettings::default();
        let coarse: Vec<GaussianFit> = (0..16)
            .map(|g| peak_fit(q(f64::from(g) * 16.0 + 7.0), 4_000))
            .collect();
        let fine: Vec<GaussianFit> = (0..256).map(|c| peak_fit(q(f64::from(c)), 250)).collect();
        let m16 = estimate_drift(&coarse, pixel, 16, 256, settings).unwrap();
        let m1 = estimate_drift(&fine, pixel, 1, 256, settings).unwrap();
        assert_eq!(m16.valid_code_max, 255);
        assert_eq!(m1.valid_code_max, 255);
        for k in 0..3 {
            assert_relative_eq!(m16.coeffs[k], m1.coeffs[k], max_relative = 1e-6);
        }
        // Both recover the generating polynomial itself.
        assert_relative_eq!(m16.coeffs[0], -40.0, max_relative = 1e-6);
        assert_relative_eq!(m16.coeffs[1], -4.2, max_relative = 1e-6);
        assert_relative_eq!(m16.coeffs[2], -0.021, max_relative = 1e-6);
    }

    #[test]
    fn uniform_weight_scaling_leaves_coefficients_unchanged() {
        let pixel = PixelId::new(0, 0);
        let settings = FitSettings::default();
        // Deliberately non-quadratic peak positions and uneven weights, so
        // the fit is a genuine compromise rather than an interpolation.
        let base: Vec<GaussianFit> = (0..16)
            .map(|g| {
                let c = f64::from(g) * 16.0 + 7.0;
                peak_fit(3.0 * c + 0.05 * c * c + ((g * 37) % 11) as f64, 500 + 301 * g as u64)
            })
            .collect();
        let scaled: Vec<GaussianFit> = base
            .iter()
            .map(|f| GaussianFit {
                total_counts: f.total_counts * 9,
                ..*f
            })
            .collect();
        let m1 = estimate_drift(&base, pixel, 16, 256, settings).unwrap();
        let m9 = estimate_drift(&scaled, pixel, 16, 256, settings).unwrap();
        for k in 0..3 {
            assert_relative_eq!(m1.coeffs[k], m9.coeffs[k], max_relative = 1e-12);
        }
    }

    #[test]
    fn unconverged_and_starved_groups_are_discarded() {
        let pixel = PixelId::new(0, 0);
        let settings = FitSettings {
            min_counts: 100,
            degree: 1,
        };
        let mut fits: Vec<GaussianFit> = (0..6)
            .map(|g| peak_fit(10.0 * f64::from(g), 1_000))
            .collect();
        fits[2].converged = false;
        fits[5].total_counts = 99; // top group starved: caps valid_code_max
        let model = estimate_drift(&fits, pixel, 16, 256, settings).unwrap();
        assert_eq!(model.groups.len(), 4);
        assert!(model.groups.iter().all(|g| g.group != 2 && g.group != 5));
        // Last accepted group is 4 → codes 0..=79 are covered.
        assert_eq!(model.valid_code_max, 79);
    }

    #[test]
    fn recovers_quadratic_drift_curve() {
        let p = params(256);
        let mut set = HistogramSet::new(p).unwrap();
        let pixel = PixelId::new(0, 0);
        let curve = |c: f64| 5.0 + 0.2 * c + 0.001 * c * c;
        fill_pixel(&mut set, pixel, curve, 400.0, 0..16);
        let (result, diags) = fit_pixel(&set, pixel, FitSettings::default());
        let model = result.unwrap();
        assert_eq!(model.groups.len(), 16);
        assert_eq!(model.valid_code_max, 255);
        assert_relative_eq!(model.coeffs[0], 5.0, epsilon = 1.0);
        assert_relative_eq!(model.coeffs[1], 0.2, epsilon = 0.02);
        assert_relative_eq!(model.coeffs[2], 0.001, epsilon = 0.0001);
        assert!(diags.iter().all(|d| d.outcome == GroupOutcome::Accepted));
        // The fitted curve tracks the truth everywhere, not just at the knots.
        for code in [0u16, 50, 128, 255] {
            assert!((model.predicted_delay_ps(code) - curve(f64::from(code))).abs() < 2.0);
        }
    }

    #[test]
    fn sparse_high_groups_cap_the_valid_code_range() {
        let p = params(256);
        let mut set = HistogramSet::new(p).unwrap();
        let pixel = PixelId::new(0, 0);
        let curve = |c: f64| 100.0 + 0.5 * c;
        fill_pixel(&mut set, pixel, curve, 300.0, 0..11); // groups 0..=10 well fed
        fill_pixel(&mut set, pixel, curve, 2.0, 11..16); // starved tail
        let (result, diags) = fit_pixel(&set, pixel, FitSettings::default());
        let model = result.unwrap();
        // Groups 0..=10 of size 16 cover codes 0..=175.
        assert_eq!(model.valid_code_max, 175);
        assert_eq!(model.groups.len(), 11);
        assert_eq!(
            diags
                .iter()
                .filter(|d| d.outcome == GroupOutcome::LowCounts)
                .count(),
            5
        );
    }

    #[test]
    fn too_few_groups_is_an_explicit_rejection() {
        let p = params(256);
        let mut set = HistogramSet::new(p).unwrap();
        let pixel = PixelId::new(0, 1);
        fill_pixel(&mut set, pixel, |_| 50.0, 300.0, 0..2);
        let (result, _) = fit_pixel(&set, pixel, FitSettings::default());
        assert_eq!(
            result.unwrap_err(),
            FitRejection::InsufficientGroups {
                pixel,
                got: 2,
                needed: 3
            }
        );
    }

    fn toy_models(anchors_and_weights: &[(f64, u64)]) -> ModelSet {
        let geometry = DetectorGeometry {
            rows: 1,
            cols: anchors_and_weights.len() as u16,
            n_codes: 256,
            bin_ps: 210,
        };
        let models = anchors_and_weights
            .iter()
            .enumerate()
            .map(|(i, &(a0, w))| {
                Some(DriftModel {
                    pixel: PixelId::new(0, i as u16),
                    coeffs: vec![a0, 0.0, 0.0],
                    valid_code_max: 255,
                    groups: vec![GroupPeak {
                        group: 0,
                        code: 7,
                        mean_ps: a0,
                        sigma_ps: 300.0,
                        counts: w,
                    }],
                })
            })
            .collect();
        ModelSet {
            geometry,
            group_size: 16,
            settings: FitSettings::default(),
            models,
        }
    }

    #[test]
    fn reference_policies_are_frozen() {
        let equal = toy_models(&[(6_000.0, 10), (8_000.0, 10)]);
        assert_relative_eq!(
            choose_reference(&equal, ReferencePolicy::WeightedMean).unwrap(),
            7_000.0
        );
        assert_relative_eq!(
            choose_reference(&equal, ReferencePolicy::Median).unwrap(),
            7_000.0
        );
        let skewed = toy_models(&[(6_000.0, 10), (8_000.0, 30)]);
        assert_relative_eq!(
            choose_reference(&skewed, ReferencePolicy::WeightedMean).unwrap(),
            7_500.0
        );
        assert_relative_eq!(
            choose_reference(&skewed, ReferencePolicy::Fixed(123.0)).unwrap(),
            123.0
        );
        let odd = toy_models(&[(1.0, 1), (100.0, 1), (3.0, 1)]);
        assert_relative_eq!(
            choose_reference(&odd, ReferencePolicy::Median).unwrap(),
            3.0
        );
    }

    #[test]
    fn policy_strings_round_trip() {
        for s in ["weighted-mean", "median", "fixed:12000"] {
            let p: ReferencePolicy = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        assert!("nearest".parse::<ReferencePolicy>().is_err());
        assert!("fixed:abc".parse::<ReferencePolicy>().is_err());
        let json = serde_json::to_string(&ReferencePolicy::Fixed(5.5)).unwrap();
        assert_eq!(json, "\"fixed:5.5\"");
        let back: ReferencePolicy = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ReferencePolicy::Fixed(5.5));
    }

    #[test]
    fn lut_offsets_negate_the_fitted_curve() {
        let mut models = toy_models(&[(100.0, 10), (100.0, 10)]);
        models.models[0].as_mut().unwrap().coeffs = vec![100.0, 2.0, 0.0];
        models.models[1] = None; // falls back to the only calibrated curve
        let lut = build_lut(&models, ReferencePolicy::Fixed(100.0)).unwrap();
        assert_eq!(lut.offset_ps(PixelId::new(0, 0), 0), Some(0));
        assert_eq!(lut.offset_ps(PixelId::new(0, 0), 1), Some(-2));
        assert_eq!(lut.offset_ps(PixelId::new(0, 0), 255), Some(-510));
        assert_eq!(lut.offset_ps(PixelId::new(0, 1), 255), Some(-510));
        assert_eq!(lut.provenance[0], PixelProvenance::Calibrated);
        assert_eq!(lut.provenance[1], PixelProvenance::Fallback);
        assert_eq!(lut.calibrated_count(), 1);
        assert!(lut.offset_ps(PixelId::new(0, 0), 256).is_none());
        assert!(lut.offset_ps(PixelId::new(1, 0), 0).is_none());
        assert!(!lut.is_extrapolated(PixelId::new(0, 0), 255));
    }

    #[test]
    fn no_calibrated_pixels_is_an_error() {
        let mut models = toy_models(&[(1.0, 1)]);
        models.models[0] = None;
        assert_eq!(
            build_lut(&models, ReferencePolicy::Median).unwrap_err(),
            LutError::NoCalibratedPixels
        );
    }

    #[test]
    fn lut_json_and_binary_round_trip() {
        let mut models = toy_models(&[(6_000.0, 10), (8_000.0, 30)]);
        models.models[0].as_mut().unwrap().coeffs = vec![6_000.0, 1.5, -0.004];
        models.models[0].as_mut().unwrap().valid_code_max = 175;
        let lut = build_lut(&models, ReferencePolicy::WeightedMean).unwrap();
        assert!(lut.is_extrapolated(PixelId::new(0, 0), 200));

        let mut json = Vec::new();
        write_lut_json(&mut json, &lut).unwrap();
        let back = read_lut_json(json.as_slice()).unwrap();
        assert_eq!(back, lut);
        assert_eq!(back.offsets, lut.offsets);

        let mut bin = Vec::new();
        write_lut_bin(&mut bin, &lut).unwrap();
        assert_eq!(bin.len(), 2 * 256 * 4);
        assert_eq!(read_lut_bin(lut.geometry, &bin).unwrap(), lut.offsets);
        assert!(matches!(
            read_lut_bin(lut.geometry, &bin[..bin.len() - 4]),
            Err(LutIoError::BinLength { expected: 512, got: 511 })
        ));
    }

    #[test]
    fn lut_json_validation_rejects_inconsistency() {
        let models = toy_models(&[(100.0, 10)]);
        let lut = build_lut(&models, ReferencePolicy::Median).unwrap();
        let mut json = Vec::new();
        write_lut_json(&mut json, &lut).unwrap();
        let text = String::from_utf8(json).unwrap();
        let bad = text.replace("\"valid_code_max\": [\n    255\n  ]", "\"valid_code_max\": [\n    999\n  ]");
        assert_ne!(bad, text, "substitution must hit");
        assert!(matches!(
            read_lut_json(bad.as_bytes()),
            Err(LutIoError::Invalid(_))
        ));
    }

    #[test]
    fn fit_all_covers_every_pixel_and_is_deterministic() {
        let p = params(64);
        let mut set = HistogramSet::new(p).unwrap();
        fill_pixel(&mut set, PixelId::new(0, 0), |c| 50.0 + 0.3 * c, 300.0, 0..4);
        // Pixel (0,1) left empty: no model, all groups low-count.
        let (models, diags) = fit_all(&set, FitSettings::default());
        assert_eq!(models.models.len(), 2);
        assert!(models.models[0].is_some());
        assert!(models.models[1].is_none());
        assert_eq!(models.calibrated_count(), 1);
        assert_eq!(diags.len(), 2 * 4);
        // Diagnostics arrive in (pixel, group) order.
        let keys: Vec<(u32, usize)> = diags.iter().map(|d| (d.pixel.linear(2), d.group)).collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted);
        let (again, diags_again) = fit_all(&set, FitSettings::default());
        assert_eq!(models, again);
        assert_eq!(diags, diags_again);

        let json = serde_json::to_string(&models).unwrap();
        let back: ModelSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, models);
    }

    #[test]
    fn diagnostics_csv_has_stable_shape() {
        let diags = vec![
            GroupDiagnostic {
                pixel: PixelId::new(0, 1),
                group: 2,
                code: 39,
                counts: 1_234,
                outcome: GroupOutcome::Accepted,
                mean_ps: Some(1_500.25),
                sigma_ps: Some(310.5),
            },
            GroupDiagnostic {
                pixel: PixelId::new(1, 0),
                group: 3,
                code: 55,
                counts: 7,
                outcome: GroupOutcome::LowCounts,
                mean_ps: None,
                sigma_ps: None,
            },
        ];
        let mut buf = Vec::new();
        write_fit_diagnostics_csv(&mut buf, 2, &diags).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "pixel,row,col,group,code,counts,outcome,mean_ps,sigma_ps\n\
             1,0,1,2,39,1234,accepted,1500.250,310.500\n\
             2,1,0,3,55,7,low_counts,,\n"
        );
    }
}
