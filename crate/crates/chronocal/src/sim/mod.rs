//! Desk-scale physics simulator: correlated photon-pair source plus the two
//! detector responses (reference detector, drifting imager).
//!
//! Everything is deterministic in `SourceConfig::seed`. Each stage draws from
//! its own ChaCha substream (`set_stream`), so pair generation, reference
//! detection, imager detection and profile scatter never share RNG state and
//! may be regenerated independently.
//!
//! Arrival times are carried as f64 picoseconds internally and quantized to
//! integer picoseconds at detection. That is sub-ps exact for desk-scale
//! durations (up to ~an hour of simulated acquisition), which is this
//! simulator's design point; the storage format itself covers months.

pub mod drift;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{ImagerEvent, ReferenceEvent};
use crate::geometry::{DetectorGeometry, PixelId};
use drift::{DriftConfig, DriftError};

const STREAM_PAIRS: u64 = 1;
const STREAM_REFERENCE: u64 = 2;
const STREAM_IMAGER: u64 = 3;
// Stream 4 is the profile scatter in drift.rs.

/// One correlated photon pair: signal goes to the imager, idler to the
/// reference detector. Times are true arrival times in picoseconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairEvent {
    pub signal_ps: f64,
    pub idler_ps: f64,
}

/// How pair arrivals are distributed inside an observation window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalMode {
    /// Homogeneous Poisson arrivals: every TDC code is sampled evenly.
    #[default]
    Uniform,
    /// Poisson statistics per window, but the position inside the window is
    /// exponential with scale `knee_code * bin_ps / 5`, so codes above the
    /// knee receive a vanishing (< 1%) fraction of events.
    CodeTail,
}

/// Source and detector-response parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    /// Mean pair rate, 1/s.
    pub pair_rate_hz: f64,
    /// Std of the idler-signal arrival difference, ps.
    pub corr_jitter_ps: f64,
    /// Reference-detector timing jitter (std), ps.
    pub ref_jitter_ps: f64,
    /// Probability that an idler photon is detected.
    pub ref_efficiency: f64,
    /// Probability that a signal photon triggers a pixel.
    pub img_efficiency: f64,
    /// Reference-detector dead time, ps (0 disables).
    pub ref_dead_time_ps: u64,
    /// Reference dark-count rate, 1/s.
    pub dark_rate_ref_hz: f64,
    /// Imager dark-count rate for the whole array, 1/s.
    pub dark_rate_img_hz: f64,
    /// Acquisition length, seconds.
    pub duration_s: f64,
    pub seed: u64,
    pub arrival_mode: ArrivalMode,
    /// Knee code for [`ArrivalMode::CodeTail`].
    pub knee_code: u16,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            pair_rate_hz: 1e5,
            corr_jitter_ps: 10.0,
            ref_jitter_ps: 150.0,
            ref_efficiency: 1.0,
            img_efficiency: 1.0,
            ref_dead_time_ps: 0,
            dark_rate_ref_hz: 0.0,
            dark_rate_img_hz: 0.0,
            duration_s: 1.0,
            seed: 0,
            arrival_mode: ArrivalMode::Uniform,
            knee_code: 200,
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("invalid source config: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Drift(#[from] DriftError),
}

impl SourceConfig {
    pub fn validate(&self, geometry: DetectorGeometry) -> Result<(), ConfigError> {
        let check_rate = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(ConfigError(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        check_rate("pair_rate_hz", self.pair_rate_hz)?;
        check_rate("corr_jitter_ps", self.corr_jitter_ps)?;
        check_rate("ref_jitter_ps", self.ref_jitter_ps)?;
        check_rate("dark_rate_ref_hz", self.dark_rate_ref_hz)?;
        check_rate("dark_rate_img_hz", self.dark_rate_img_hz)?;
        for (name, v) in [
            ("ref_efficiency", self.ref_efficiency),
            ("img_efficiency", self.img_efficiency),
        ] {
            if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                return Err(ConfigError(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(ConfigError(format!(
                "duration_s must be finite and > 0, got {}",
                self.duration_s
            )));
        }
        if self.arrival_mode == ArrivalMode::CodeTail
            && (self.knee_code == 0 || self.knee_code >= geometry.n_codes)
        {
            return Err(ConfigError(format!(
                "knee_code must be in 1..{}, got {}",
                geometry.n_codes, self.knee_code
            )));
        }
        Ok(())
    }

    fn duration_ps(&self) -> f64 {
        self.duration_s * 1e12
    }
}

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Homogeneous Poisson arrival times over [0, duration_ps).
fn poisson_arrivals(rng: &mut ChaCha8Rng, rate_hz: f64, duration_ps: f64) -> Vec<f64> {
    if rate_hz <= 0.0 {
        return Vec::new();
    }
    let gap = Exp::new(rate_hz * 1e-12).expect("rate validated positive");
    let mut out = Vec::with_capacity((rate_hz * duration_ps * 1e-12 * 1.05) as usize + 16);
    let mut t = gap.sample(rng);
    while t < duration_ps {
        out.push(t);
        t += gap.sample(rng);
    }
    out
}

/// Generate the correlated pair stream, sorted by signal arrival.
pub fn generate_pairs(
    geometry: DetectorGeometry,
    config: &SourceConfig,
) -> Result<Vec<PairEvent>, ConfigError> {
    config.validate(geometry)?;
    let mut rng = substream(config.seed, STREAM_PAIRS);
    let mut signals = poisson_arrivals(&mut rng, config.pair_rate_hz, config.duration_ps());
    if config.arrival_mode == ArrivalMode::CodeTail {
        // Keep the Poisson window occupancy, but redraw each arrival's
        // position inside its window from the exponential tail shape.
        let window = geometry.window_ps() as f64;
        let tau = f64::from(config.knee_code) * f64::from(geometry.bin_ps) / 5.0;
        let pos = Exp::new(1.0 / tau).expect("tau positive for validated knee");
        for s in &mut signals {
            let base = (*s / window).floor() * window;
            let x = loop {
                let x = pos.sample(&mut rng);
                if x < window {
                    break x;
                }
            };
            *s = base + x;
        }
        signals.sort_unstable_by(f64::total_cmp);
    }
    let jitter = (config.corr_jitter_ps > 0.0)
        .then(|| Normal::new(0.0, config.corr_jitter_ps).expect("validated finite"));
    Ok(signals
        .into_iter()
        .map(|signal_ps| PairEvent {
            signal_ps,
            idler_ps: signal_ps + jitter.map_or(0.0, |j| j.sample(&mut rng)),
        })
        .collect())
}

/// Reference-detector response: efficiency thinning, dark counts, dead time,
/// Gaussian timing jitter, quantization to integer picoseconds. Output is
/// time-sorted.
pub fn detect_reference(
    pairs: &[PairEvent],
    geometry: DetectorGeometry,
    config: &SourceConfig,
) -> Result<Vec<ReferenceEvent>, ConfigError> {
    config.validate(geometry)?;
    let mut rng = substream(config.seed, STREAM_REFERENCE);
    let mut arrivals: Vec<f64> = if config.ref_efficiency >= 1.0 {
        pairs.iter().map(|p| p.idler_ps).collect()
    } else if config.ref_efficiency <= 0.0 {
        Vec::new()
    } else {
        pairs
            .iter()
            .filter(|_| rng.random::<f64>() < config.ref_efficiency)
            .map(|p| p.idler_ps)
            .collect()
    };
    arrivals.extend(poisson_arrivals(
        &mut rng,
        config.dark_rate_ref_hz,
        config.duration_ps(),
    ));
    arrivals.sort_unstable_by(f64::total_cmp);
    if config.ref_dead_time_ps > 0 {
        let dead = config.ref_dead_time_ps as f64;
        let mut live_from = f64::NEG_INFINITY;
        arrivals.retain(|&t| {
            let fires = t >= live_from;
            if fires {
                live_from = t + dead;
            }
            fires
        });
    }
    let jitter = (config.ref_jitter_ps > 0.0)
        .then(|| Normal::new(0.0, config.ref_jitter_ps).expect("validated finite"));
    let mut detected: Vec<u64> = arrivals
        .into_iter()
        .map(|t| {
            let t = t + jitter.map_or(0.0, |j| j.sample(&mut rng));
            t.round().max(0.0) as u64
        })
        .collect();
    detected.sort_unstable();
    Ok(detected
        .into_iter()
        .map(|time_ps| ReferenceEvent { time_ps })
        .collect())
}

/// Imager response. See [`detect_imager_traced`]; this drops the truth channel.
pub fn detect_imager(
    pairs: &[PairEvent],
    geometry: DetectorGeometry,
    drift: &DriftConfig,
    config: &SourceConfig,
) -> Result<Vec<ImagerEvent>, SimError> {
    let mut events = Vec::new();
    detect_imager_core(pairs, geometry, drift, config, |event, _truth| {
        events.push(event)
    })?;
    sort_traced(&mut events, |e| *e);
    Ok(events)
}

/// Imager response with a diagnostic truth channel: each emitted event is
/// paired with the photon's true (pre-quantization) detection time, so tests
/// and analysis scripts can measure `reported - true` directly.
///
/// Model: time tiles into observation windows of `n_codes * bin_ps` ps. A
/// photon hitting `pixel` at time `t` lands at position
/// `x = t - window_start - skew[pixel]` and is assigned the TDC code whose
/// drifted edge interval contains `x`; the detector reconstructs
/// `reported = window_start + code * bin_ps` with the *nominal* bin width, so
/// `reported - true ~ -D(pixel, code)` up to one-bin quantization. Each pixel
/// fires at most once per window (first photon wins). Signal photons are
/// spread uniformly over the array (flood illumination); dark counts add a
/// uniform Poisson background.
pub fn detect_imager_traced(
    pairs: &[PairEvent],
    geometry: DetectorGeometry,
    drift: &DriftConfig,
    config: &SourceConfig,
) -> Result<Vec<(ImagerEvent, f64)>, SimError> {
    let mut events = Vec::new();
    detect_imager_core(pairs, geometry, drift, config, |event, truth| {
        events.push((event, truth))
    })?;
    sort_traced(&mut events, |(e, _)| *e);
    Ok(events)
}

fn sort_traced<T>(items: &mut [T], key: impl Fn(&T) -> ImagerEvent) {
    // Reconstruction can reorder events inside one window; restore the total
    // (time, pixel, code) order downstream stages rely on.
    items.sort_unstable_by_key(|it| {
        let e = key(it);
        (e.time_ps, e.pixel, e.tdc_code)
    });
}

fn detect_imager_core(
    pairs: &[PairEvent],
    geometry: DetectorGeometry,
    drift: &DriftConfig,
    config: &SourceConfig,
    mut emit: impl FnMut(ImagerEvent, f64),
) -> Result<(), SimError> {
    config.validate(geometry)?;
    geometry.validate().map_err(|e| ConfigError(e.to_string()))?;
    drift.validate(geometry)?;
    let n_pixels = geometry.n_pixels();
    let activity = drift.activity_alpha_scale;
    if activity > 0.0 {
        validate_activity_headroom(geometry, drift)?;
    }

    let mut rng = substream(config.seed, STREAM_IMAGER);
    // Candidate detections: (true arrival, pixel), photons then dark counts.
    let mut photons: Vec<(f64, u32)> = Vec::with_capacity(pairs.len());
    for p in pairs {
        if config.img_efficiency >= 1.0 || rng.random::<f64>() < config.img_efficiency {
            photons.push((p.signal_ps, rng.random_range(0..n_pixels)));
        }
    }
    let darks: Vec<(f64, u32)> = poisson_arrivals(&mut rng, config.dark_rate_img_hz, config.duration_ps())
        .into_iter()
        .map(|t| (t, rng.random_range(0..n_pixels)))
        .collect();
    let candidates = merge_by_time(photons, darks);

    let window = geometry.window_ps();
    let window_f = window as f64;
    let n_codes = usize::from(geometry.n_codes);
    let bin = f64::from(geometry.bin_ps);
    // Per-pixel drifted code edges: edge[p][c] = true elapsed time at which
    // code c begins, relative to the pixel's (skew-shifted) window start.
    let edges: Vec<f64> = (0..n_pixels as usize)
        .flat_map(|p| {
            let (alpha, beta) = (drift.alpha[p], drift.beta[p]);
            (0..=n_codes).map(move |c| code_edge(bin, alpha, beta, c))
        })
        .collect();

    let mut last_window: Vec<u64> = vec![u64::MAX; n_pixels as usize];
    let mut emit_one = |t: f64, pixel: u32, alpha_factor: f64, last_window: &mut [u64]| {
        let w = (t / window_f) as u64;
        let p = pixel as usize;
        if last_window[p] == w {
            return; // pixel already fired in this window
        }
        let x = t - (w * window) as f64 - drift.skew_ps[p];
        if x < 0.0 {
            return; // before this pixel's shifted window start
        }
        let code = if alpha_factor == 1.0 {
            let e = &edges[p * (n_codes + 1)..(p + 1) * (n_codes + 1)];
            match e.partition_point(|&edge| edge <= x) {
                0 => unreachable!("edge[0] = 0 <= x"),
                i if i > n_codes => n_codes - 1, // beyond the last drifted edge: TDC saturates
                i => i - 1,
            }
        } else {
            code_for_position(bin, drift.alpha[p] * alpha_factor, drift.beta[p], n_codes, x)
        };
        last_window[p] = w;
        emit(
            ImagerEvent {
                time_ps: w * window + code as u64 * u64::from(geometry.bin_ps),
                pixel: PixelId::from_linear(pixel, geometry.cols),
                tdc_code: code as u16,
            },
            t,
        );
    };

    if activity > 0.0 {
        // Window-batched pass: a window's alpha scaling depends on how many
        // TDCs are active in it, so group candidates per window first.
        let mut i = 0;
        while i < candidates.len() {
            let w = (candidates[i].0 / window_f) as u64;
            let mut j = i;
            while j < candidates.len() && (candidates[j].0 / window_f) as u64 == w {
                j += 1;
            }
            let n_active = (j - i).min(n_pixels as usize) as f64;
            let factor = 1.0 + activity * (n_active - 1.0) / f64::from(n_pixels);
            for &(t, pixel) in &candidates[i..j] {
                emit_one(t, pixel, factor, &mut last_window);
            }
            i = j;
        }
    } else {
        for (t, pixel) in candidates {
            emit_one(t, pixel, 1.0, &mut last_window);
        }
    }
    Ok(())
}

/// True elapsed time from the window start to the beginning of code `c`,
/// under per-code periods `bin * (1 + alpha + beta*k)`.
fn code_edge(bin: f64, alpha: f64, beta: f64, c: usize) -> f64 {
    let c = c as f64;
    bin * (c + alpha * c + beta * c * (c - 1.0) / 2.0)
}

/// Binary search the drifted code interval containing position `x`.
fn code_for_position(bin: f64, alpha: f64, beta: f64, n_codes: usize, x: f64) -> usize {
    let (mut lo, mut hi) = (0usize, n_codes); // edges indexed 0..=n_codes
    if code_edge(bin, alpha, beta, n_codes) <= x {
        return n_codes - 1;
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if code_edge(bin, alpha, beta, mid) <= x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn validate_activity_headroom(
    geometry: DetectorGeometry,
    drift: &DriftConfig,
) -> Result<(), DriftError> {
    let worst = 1.0 + drift.activity_alpha_scale;
    for (index, &alpha) in drift.alpha.iter().enumerate() {
        for code in [0, geometry.n_codes - 1] {
            let period = 1.0 + alpha * worst + drift.beta[index] * f64::from(code);
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

fn merge_by_time(a: Vec<(f64, u32)>, b: Vec<(f64, u32)>) -> Vec<(f64, u32)> {
    if b.is_empty() {
        return a;
    }
    if a.is_empty() {
        return b;
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut ia, mut ib) = (0, 0);
    while ia < a.len() && ib < b.len() {
        if a[ia].0 <= b[ib].0 {
            out.push(a[ia]);
            ia += 1;
        } else {
            out.push(b[ib]);
            ib += 1;
        }
    }
    out.extend_from_slice(&a[ia..]);
    out.extend_from_slice(&b[ib..]);
    out
}
