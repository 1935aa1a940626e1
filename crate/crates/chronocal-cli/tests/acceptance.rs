//! Acceptance gate: the eight criteria the toolkit must meet before a
//! release, one test per criterion, each ending in a single PASS line with
//! the measured numbers. Tolerances are pinned in the constants next to
//! each test.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use chronocal::coincidence::{find_coincidences, CoincidencePair};
use chronocal::driftfit::{
    build_lut, fit_all, fit_gaussian, weighted_polyfit, FitSettings, GroupOutcome,
    ReferencePolicy,
};
use chronocal::histogram::{
    write_histograms_csv, CoincidenceHistogram, HistogramParams, HistogramSet,
};
use chronocal::sim::drift::{drift_ground_truth, DriftConfig, DriftProfile, DriftSpec};
use chronocal::sim::{
    detect_imager, detect_reference, generate_pairs, ArrivalMode, SourceConfig,
};
use chronocal::{DetectorGeometry, ImagerEvent, PixelId, ReferenceEvent};
use num_rational::BigRational;
use num_traits::{FromPrimitive, ToPrimitive, Zero};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn chronocal_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chronocal"))
}

// ---------------------------------------------------------------------------
// 1. Full-pipeline peak narrowing at the published operating point
// ---------------------------------------------------------------------------

const C1_UNCORRECTED_FULL_WIDTH_PS: std::ops::RangeInclusive<f64> = 2_000.0..=3_000.0;
const C1_CORRECTED_FULL_WIDTH_MAX_PS: f64 = 800.0;
const C1_CORRECTED_FWHM_MAX_PS: f64 = 350.0;
const C1_IMPROVEMENT_MIN: f64 = 2.5;
const C1_RUNTIME_MAX_S: f64 = 300.0;

/// 32x32 pixels, 256 codes of ~210 ps, a 150 ps-FWHM reference detector
/// (63.7 ps std), and drift strong enough that the uncorrected aggregate
/// peak is 2-3 ns wide. After calibration the peak must come back to
/// <= 800 ps full width and <= 350 ps FWHM, at least 2.5x better than
/// uncorrected, within five minutes for 10^7 generated pairs.
#[test]
fn acceptance_1_pipeline_narrows_the_aggregate_peak_to_published_widths() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("run.toml");
    fs::write(
        &config,
        "\
[geometry]
rows = 32
cols = 32
n_codes = 256
bin_ps = 210

[source]
pair_rate_hz = 1e6
corr_jitter_ps = 10.0
ref_jitter_ps = 63.7
ref_efficiency = 0.9
img_efficiency = 0.9
dark_rate_ref_hz = 1e3
dark_rate_img_hz = 1e4
duration_s = 10.0
seed = 2026

[drift]
profile = \"center_peaked\"
alpha = 0.03
beta = 8e-5
skew_ps = 150.0
scatter = 0.15

[analysis]
group_size = 16
section_ps = 100
poly_degree = 2
",
    )
    .unwrap();
    let out = tmp.path().join("out");

    let started = Instant::now();
    let result = chronocal_bin()
        .args([
            "pipeline",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    let elapsed_s = started.elapsed().as_secs_f64();
    assert!(
        result.status.success(),
        "pipeline failed:\n{}",
        String::from_utf8_lossy(&result.stderr)
    );

    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let unc_full = metrics["uncorrected"]["full_width_ps"].as_f64().unwrap();
    let cor_full = metrics["corrected"]["full_width_ps"].as_f64().unwrap();
    let cor_fwhm = metrics["corrected"]["fwhm_ps"].as_f64().unwrap();
    let imp_fwhm = metrics["improvement_fwhm"].as_f64().unwrap();
    let imp_full = metrics["improvement_full_width"].as_f64().unwrap();

    assert!(
        C1_UNCORRECTED_FULL_WIDTH_PS.contains(&unc_full),
        "uncorrected full width {unc_full} ps outside the coarse-drift regime"
    );
    assert!(
        cor_full <= C1_CORRECTED_FULL_WIDTH_MAX_PS,
        "corrected full width {cor_full} ps"
    );
    assert!(
        cor_fwhm <= C1_CORRECTED_FWHM_MAX_PS,
        "corrected FWHM {cor_fwhm} ps"
    );
    assert!(
        imp_fwhm >= C1_IMPROVEMENT_MIN && imp_full >= C1_IMPROVEMENT_MIN,
        "improvement {imp_fwhm}x FWHM / {imp_full}x full width"
    );
    assert!(
        elapsed_s <= C1_RUNTIME_MAX_S,
        "pipeline took {elapsed_s:.0} s for 10^7 pairs"
    );
    println!(
        "PASS 1: uncorrected {unc_full:.0} ps -> corrected {cor_full:.0} ps full width, \
         FWHM {cor_fwhm:.0} ps, improvement {imp_fwhm:.1}x/{imp_full:.1}x, {elapsed_s:.0} s"
    );
}

// ---------------------------------------------------------------------------
// 2. Correction table vs simulated ground truth
// ---------------------------------------------------------------------------

const C2_MIN_COINCIDENCES_PER_PIXEL: u64 = 5_000;
const C2_RMS_MAX_PS: f64 = 30.0; // about bin_ps / 7

/// With at least 5e3 coincidences per pixel, the fitted correction must
/// track the simulated drift law code-for-code: the table's entry differs
/// from the injected drift only by a per-pixel constant (the shared
/// alignment target plus the pixel's half-bin offset), so after removing
/// that constant the residual RMS over every calibrated (pixel, code)
/// entry must be at most 30 ps.
#[test]
fn acceptance_2_correction_table_tracks_the_simulated_drift_law() {
    let geometry = DetectorGeometry {
        rows: 8,
        cols: 8,
        n_codes: 256,
        bin_ps: 210,
    };
    let spec = DriftSpec {
        profile: DriftProfile::CenterPeaked,
        alpha: 0.02,
        beta: 3e-5,
        skew_ps: 100.0,
        scatter: 0.1,
        activity_alpha_scale: 0.0,
    };
    let source = SourceConfig {
        pair_rate_hz: 4e5,
        corr_jitter_ps: 10.0,
        ref_jitter_ps: 60.0,
        ref_efficiency: 0.9,
        img_efficiency: 0.9,
        dark_rate_ref_hz: 500.0,
        dark_rate_img_hz: 2_000.0,
        duration_s: 2.0,
        seed: 7,
        ..SourceConfig::default()
    };
    let drift = DriftConfig::from_spec(geometry, &spec, source.seed);
    let pairs = generate_pairs(geometry, &source).unwrap();
    let reference = detect_reference(&pairs, geometry, &source).unwrap();
    let imager = detect_imager(&pairs, geometry, &drift, &source).unwrap();

    let params = HistogramParams {
        geometry,
        group_size: 16,
        section_ps: 100,
        window_half_width_ps: 25_000,
    };
    let mut set = HistogramSet::new(params).unwrap();
    set.accumulate_all(&find_coincidences(&imager, &reference, params.window_half_width_ps).unwrap())
        .unwrap();

    let min_per_pixel = (0..geometry.n_pixels())
        .map(|p| {
            let pixel = PixelId::from_linear(p, geometry.cols);
            (0..params.n_groups()).map(|g| set.total(pixel, g)).sum::<u64>()
        })
        .min()
        .unwrap();
    assert!(
        min_per_pixel >= C2_MIN_COINCIDENCES_PER_PIXEL,
        "weakest pixel has only {min_per_pixel} coincidences"
    );

    let (models, _) = fit_all(
        &set,
        FitSettings {
            min_counts: 100,
            degree: 2,
        },
    );
    let lut = build_lut(&models, ReferencePolicy::WeightedMean).unwrap();
    assert_eq!(
        lut.calibrated_count(),
        geometry.n_pixels() as usize,
        "every pixel must calibrate"
    );

    let mut sq_sum = 0.0;
    let mut n_entries = 0u64;
    for p in 0..geometry.n_pixels() {
        let pixel = PixelId::from_linear(p, geometry.cols);
        let top = lut.valid_code_max[p as usize];
        let residuals: Vec<f64> = (0..=top)
            .map(|code| {
                let offset = f64::from(lut.offset_ps(pixel, code).unwrap());
                let truth = drift_ground_truth(geometry, &drift, pixel, code).unwrap();
                offset - truth
            })
            .collect();
        let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
        sq_sum += residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>();
        n_entries += residuals.len() as u64;
    }
    let rms = (sq_sum / n_entries as f64).sqrt();
    assert!(
        rms <= C2_RMS_MAX_PS,
        "per-code residual RMS {rms:.2} ps over {n_entries} entries"
    );
    println!(
        "PASS 2: residual RMS {rms:.2} ps over {n_entries} (pixel, code) entries, \
         weakest pixel {min_per_pixel} coincidences"
    );
}

// ---------------------------------------------------------------------------
// 3. Sorted-merge pairing vs exhaustive search
// ---------------------------------------------------------------------------

/// 100 randomized stream pairs (up to 2e3 events each, windows from 0 to
/// 2 ns, including dense tie-heavy streams): the sort-merge pairing must
/// equal the O(N*M) exhaustive multiset exactly, every time.
#[test]
fn acceptance_3_sorted_merge_equals_exhaustive_pairing() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut total_pairs = 0usize;
    for instance in 0..100 {
        let n_img = rng.random_range(0..=2_000);
        let n_ref = rng.random_range(0..=2_000);
        // Every fifth instance crams the events into a tiny span so that
        // duplicate timestamps and many-to-many matches dominate.
        let span: u64 = if instance % 5 == 0 { 500 } else { 1_000_000 };
        let whw: u64 = if instance % 7 == 0 {
            0
        } else {
            rng.random_range(1..=2_000)
        };

        let rows: u16 = 4;
        let mut imager: Vec<ImagerEvent> = (0..n_img)
            .map(|_| ImagerEvent {
                time_ps: rng.random_range(0..=span),
                pixel: PixelId::new(rng.random_range(0..rows), rng.random_range(0..rows)),
                tdc_code: rng.random_range(0..64),
            })
            .collect();
        let mut reference: Vec<ReferenceEvent> = (0..n_ref)
            .map(|_| ReferenceEvent {
                time_ps: rng.random_range(0..=span),
            })
            .collect();
        imager.sort_by_key(|e| e.time_ps);
        reference.sort_by_key(|e| e.time_ps);

        let mut got: Vec<(u16, u16, u16, i64)> = find_coincidences(&imager, &reference, whw)
            .unwrap()
            .iter()
            .map(|p| (p.pixel.row, p.pixel.col, p.tdc_code, p.dt_ps))
            .collect();

        let mut want: Vec<(u16, u16, u16, i64)> = Vec::new();
        for e in &imager {
            for r in &reference {
                let dt = e.time_ps as i64 - r.time_ps as i64;
                if dt.unsigned_abs() <= whw {
                    want.push((e.pixel.row, e.pixel.col, e.tdc_code, dt));
                }
            }
        }

        got.sort_unstable();
        want.sort_unstable();
        assert_eq!(
            got, want,
            "instance {instance}: {n_img} imager / {n_ref} reference events, window ±{whw} ps"
        );
        total_pairs += want.len();
    }
    println!("PASS 3: 100 randomized instances, {total_pairs} pairs, all exact");
}

// ---------------------------------------------------------------------------
// 4. Peak-fit calibration
// ---------------------------------------------------------------------------

const C4_EXACT_MEAN_TOL_PS: f64 = 1.0;
const C4_EXACT_SIGMA_TOL_PS: f64 = 2.0;
const C4_TRIALS: usize = 1_000;
const C4_MIN_SUCCESSES: usize = 990;
const C4_EXPECTED_TOTAL: f64 = 1e4;

fn model_histogram(
    mu: f64,
    sigma: f64,
    amplitude: f64,
    baseline: f64,
    section_ps: u32,
    whw_ps: u64,
) -> CoincidenceHistogram {
    let origin_ps = -(whw_ps as i64);
    let n = (2 * whw_ps / u64::from(section_ps)) as usize;
    let counts: Vec<u64> = (0..n)
        .map(|i| {
            let x = origin_ps as f64 + (i as f64 + 0.5) * f64::from(section_ps);
            let z = (x - mu) / sigma;
            (amplitude * (-0.5 * z * z).exp() + baseline).round() as u64
        })
        .collect();
    let total = counts.iter().sum();
    CoincidenceHistogram {
        section_ps,
        origin_ps,
        counts,
        total,
    }
}

/// On noise-free model histograms the peak fit must recover the mean within
/// ±1 ps and the width within ±2 ps; under Poisson counting noise with an
/// expected total of 1e4, the mean must land within 3·sigma_hat/sqrt(total)
/// in at least 990 of 1000 seeded trials.
#[test]
fn acceptance_4_peak_fit_recovers_mean_and_width() {
    let cases = [
        (-746.3, 160.0, 0.0),
        (1_234.5, 150.0, 40.0),
        (0.0, 300.0, 0.0),
        (-3_712.3, 700.0, 25.0),
        (5_000.1, 80.0, 10.0),
    ];
    for &(mu, sigma, baseline) in &cases {
        let hist = model_histogram(mu, sigma, 1e6, baseline, 100, 25_000);
        let fit = fit_gaussian(&hist, 0);
        assert!(fit.converged, "exact model (mu {mu}, sigma {sigma}) did not converge");
        assert!(
            (fit.mean_ps - mu).abs() <= C4_EXACT_MEAN_TOL_PS,
            "mean {} vs {mu}",
            fit.mean_ps
        );
        assert!(
            (fit.sigma_ps - sigma).abs() <= C4_EXACT_SIGMA_TOL_PS,
            "sigma {} vs {sigma}",
            fit.sigma_ps
        );
    }

    let mu = -746.3;
    let sigma = 150.0;
    let section_ps = 100u32;
    let whw_ps = 10_000u64;
    let origin = -(whw_ps as i64);
    let n = (2 * whw_ps / u64::from(section_ps)) as usize;
    let shape: Vec<f64> = (0..n)
        .map(|i| {
            let x = origin as f64 + (i as f64 + 0.5) * f64::from(section_ps);
            let z = (x - mu) / sigma;
            (-0.5 * z * z).exp()
        })
        .collect();
    let norm: f64 = shape.iter().sum();
    let lambdas: Vec<f64> = shape.iter().map(|s| C4_EXPECTED_TOTAL * s / norm).collect();

    let mut successes = 0usize;
    for trial in 0..C4_TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(404_000 + trial as u64);
        let counts: Vec<u64> = lambdas
            .iter()
            .map(|&l| {
                if l < 1e-12 {
                    0
                } else {
                    Poisson::new(l).unwrap().sample(&mut rng) as u64
                }
            })
            .collect();
        let total: u64 = counts.iter().sum();
        let hist = CoincidenceHistogram {
            section_ps,
            origin_ps: origin,
            counts,
            total,
        };
        let fit = fit_gaussian(&hist, 0);
        if fit.converged && (fit.mean_ps - mu).abs() <= 3.0 * fit.sigma_ps / (total as f64).sqrt()
        {
            successes += 1;
        }
    }
    assert!(
        successes >= C4_MIN_SUCCESSES,
        "only {successes}/{C4_TRIALS} noisy trials inside the 3-sigma bound"
    );
    println!(
        "PASS 4: {} exact models within ±{C4_EXACT_MEAN_TOL_PS}/±{C4_EXACT_SIGMA_TOL_PS} ps; \
         {successes}/{C4_TRIALS} noisy trials within 3σ/√N",
        cases.len()
    );
}

// ---------------------------------------------------------------------------
// 5. Weighted quadratic fit vs exact normal equations
// ---------------------------------------------------------------------------

const C5_REL_TOL: f64 = 1e-9;

/// Exact rational solution of the weighted normal equations
/// (XᵀWX)a = XᵀWy for integer-valued inputs.
fn exact_normal_solution(x: &[i64], y: &[i64], w: &[i64], degree: usize) -> Vec<f64> {
    let n = degree + 1;
    let big = |v: i64| BigRational::from_i64(v).expect("i64 fits");
    let mut a = vec![vec![BigRational::zero(); n]; n];
    let mut b = vec![BigRational::zero(); n];
    for i in 0..x.len() {
        let wi = big(w[i]);
        let mut powers = vec![BigRational::from_i64(1).unwrap()];
        for p in 1..=2 * degree {
            let next = &powers[p - 1] * big(x[i]);
            powers.push(next);
        }
        for (j, row) in a.iter_mut().enumerate() {
            for (k, cell) in row.iter_mut().enumerate() {
                *cell += &wi * &powers[j + k];
            }
            b[j] += &wi * &powers[j] * big(y[i]);
        }
    }
    // Gauss-Jordan elimination in exact arithmetic.
    for col in 0..n {
        let pivot = (col..n)
            .find(|&r| !a[r][col].is_zero())
            .expect("normal matrix is nonsingular for distinct abscissas");
        a.swap(col, pivot);
        b.swap(col, pivot);
        let pivot_row = a[col].clone();
        let pivot_rhs = b[col].clone();
        for r in 0..n {
            if r == col || a[r][col].is_zero() {
                continue;
            }
            let factor = &a[r][col] / &pivot_row[col];
            for c in col..n {
                let t = &factor * &pivot_row[c];
                a[r][c] -= t;
            }
            let t = &factor * &pivot_rhs;
            b[r] -= t;
        }
    }
    (0..n)
        .map(|j| (&b[j] / &a[j][j]).to_f64().expect("finite solution"))
        .collect()
}

#[test]
fn acceptance_5_weighted_quadratic_matches_exact_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);

    for instance in 0..100 {
        let n = rng.random_range(5..=40);
        let x: Vec<i64> = rand::seq::index::sample(&mut rng, 121, n)
            .iter()
            .map(|i| i as i64 - 60)
            .collect();
        let y: Vec<i64> = (0..n).map(|_| rng.random_range(-1_000..=1_000)).collect();
        let w: Vec<i64> = (0..n).map(|_| rng.random_range(1..=100)).collect();

        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let wf: Vec<f64> = w.iter().map(|&v| v as f64).collect();
        let fit = weighted_polyfit(&xf, &yf, &wf, 2).unwrap();
        let exact = exact_normal_solution(&x, &y, &w, 2);
        for j in 0..3 {
            let scale = exact[j].abs().max(1.0);
            assert!(
                (fit[j] - exact[j]).abs() <= C5_REL_TOL * scale,
                "instance {instance} coefficient {j}: fitted {} vs exact {}",
                fit[j],
                exact[j]
            );
        }
    }

    // A fit fed an exact quadratic must hand the coefficients straight back.
    for instance in 0..100 {
        // Sixteenths are exactly representable, and every y below stays well
        // inside the integers f64 holds exactly.
        let a0 = rng.random_range(-32_000..=32_000) as f64 / 16.0;
        let a1 = rng.random_range(-8_000..=8_000) as f64 / 16.0;
        let a2 = rng.random_range(-1_600..=1_600) as f64 / 16.0;
        let n = rng.random_range(3..=40);
        let x: Vec<f64> = rand::seq::index::sample(&mut rng, 61, n)
            .iter()
            .map(|i| i as f64 - 30.0)
            .collect();
        let y: Vec<f64> = x.iter().map(|&v| a0 + a1 * v + a2 * v * v).collect();
        let w: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(1..=50))).collect();
        let fit = weighted_polyfit(&x, &y, &w, 2).unwrap();
        for (j, (got, want)) in fit.iter().zip([a0, a1, a2]).enumerate() {
            assert!(
                (got - want).abs() <= C5_REL_TOL * want.abs().max(1.0),
                "instance {instance} coefficient {j}: {got} vs {want}"
            );
        }
    }
    println!("PASS 5: 100 weighted fits match the exact normal equations and 100 exact quadratics round-trip, all to 1e-9 relative");
}

// ---------------------------------------------------------------------------
// 6. Histograms add up across measurement shards
// ---------------------------------------------------------------------------

/// Splitting a pair list into up to 8 shards, histogramming each and
/// merging must equal histogramming the whole list — measurements simply
/// add up, with no cross-shard state.
#[test]
fn acceptance_6_sharded_histograms_merge_to_the_whole() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let geometry = DetectorGeometry {
        rows: 8,
        cols: 8,
        n_codes: 64,
        bin_ps: 210,
    };
    let params = HistogramParams {
        geometry,
        group_size: 8,
        section_ps: 100,
        window_half_width_ps: 5_000,
    };
    for instance in 0..100 {
        let n_pairs = rng.random_range(0..=5_000);
        let pairs: Vec<CoincidencePair> = (0..n_pairs)
            .map(|_| CoincidencePair {
                pixel: PixelId::new(rng.random_range(0..8), rng.random_range(0..8)),
                tdc_code: rng.random_range(0..64),
                dt_ps: rng.random_range(-5_000..=5_000),
            })
            .collect();
        let n_shards = rng.random_range(1..=8);
        let mut shards: Vec<Vec<CoincidencePair>> = vec![Vec::new(); n_shards];
        for &pair in &pairs {
            shards[rng.random_range(0..n_shards)].push(pair);
        }

        let mut whole = HistogramSet::new(params).unwrap();
        whole.accumulate_all(&pairs).unwrap();

        let mut merged = HistogramSet::new(params).unwrap();
        for shard in &shards {
            let mut part = HistogramSet::new(params).unwrap();
            part.accumulate_all(shard).unwrap();
            merged.merge_from(&part).unwrap();
        }

        let mut whole_csv = Vec::new();
        write_histograms_csv(&mut whole_csv, &whole).unwrap();
        let mut merged_csv = Vec::new();
        write_histograms_csv(&mut merged_csv, &merged).unwrap();
        assert_eq!(
            whole_csv, merged_csv,
            "instance {instance}: {n_pairs} pairs over {n_shards} shards"
        );
    }
    println!("PASS 6: 100 random shard partitions merge to the whole exactly");
}

// ---------------------------------------------------------------------------
// 7. Sparse top-of-range groups are excluded, and the table says so
// ---------------------------------------------------------------------------

const C7_VALID_CODE_MAX_RANGE: std::ops::RangeInclusive<u16> = 127..=207;

/// With arrivals concentrated at the start of the observation window
/// (exponential tail, knee at code 200), the top code groups fall under
/// min_counts: they must be rejected for lack of data, and each pixel's
/// valid_code_max must reflect where the data really ends.
#[test]
fn acceptance_7_starved_top_groups_are_excluded_from_the_fit() {
    let geometry = DetectorGeometry {
        rows: 4,
        cols: 4,
        n_codes: 256,
        bin_ps: 210,
    };
    let spec = DriftSpec {
        profile: DriftProfile::Uniform,
        alpha: 0.01,
        beta: 2e-5,
        skew_ps: 50.0,
        scatter: 0.0,
        activity_alpha_scale: 0.0,
    };
    let source = SourceConfig {
        pair_rate_hz: 2.96e5, // ~1.5e4 coincidences per pixel
        corr_jitter_ps: 10.0,
        ref_jitter_ps: 60.0,
        ref_efficiency: 0.9,
        img_efficiency: 0.9,
        duration_s: 1.0,
        seed: 17,
        arrival_mode: ArrivalMode::CodeTail,
        knee_code: 200,
        ..SourceConfig::default()
    };
    let drift = DriftConfig::from_spec(geometry, &spec, source.seed);
    let pairs = generate_pairs(geometry, &source).unwrap();
    let reference = detect_reference(&pairs, geometry, &source).unwrap();
    let imager = detect_imager(&pairs, geometry, &drift, &source).unwrap();

    let params = HistogramParams {
        geometry,
        group_size: 16,
        section_ps: 100,
        window_half_width_ps: 25_000,
    };
    let mut set = HistogramSet::new(params).unwrap();
    set.accumulate_all(&find_coincidences(&imager, &reference, params.window_half_width_ps).unwrap())
        .unwrap();

    let settings = FitSettings {
        min_counts: 100,
        degree: 2,
    };
    let (models, diagnostics) = fit_all(&set, settings);
    assert_eq!(
        models.calibrated_count(),
        geometry.n_pixels() as usize,
        "the well-fed low groups must still calibrate every pixel"
    );

    // Groups 13..16 cover codes 208..256: far beyond the knee, always starved.
    for d in &diagnostics {
        if d.group >= 13 {
            assert_eq!(
                d.outcome,
                GroupOutcome::LowCounts,
                "pixel {} group {} has {} counts yet was not excluded",
                d.pixel,
                d.group,
                d.counts
            );
            assert!(d.counts < settings.min_counts);
        }
    }

    let mut tops = Vec::new();
    for model in models.models.iter().flatten() {
        assert!(
            C7_VALID_CODE_MAX_RANGE.contains(&model.valid_code_max),
            "pixel {}: valid_code_max {} outside the expected starvation point",
            model.pixel,
            model.valid_code_max
        );
        tops.push(model.valid_code_max);
    }
    println!(
        "PASS 7: every pixel calibrated, top groups rejected for low counts, \
         valid_code_max spans {}..={}",
        tops.iter().min().unwrap(),
        tops.iter().max().unwrap()
    );
}

// ---------------------------------------------------------------------------
// 8. Bytewise reproducibility
// ---------------------------------------------------------------------------

/// The pipeline with a fixed seed must write byte-identical files across
/// reruns and across worker-pool sizes; only the manifest (which carries
/// wall-clock timings) may differ, and even there the output digest maps
/// must agree and describe the real files.
#[test]
fn acceptance_8_pipeline_outputs_are_byte_identical_across_runs_and_threads() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("run.toml");
    fs::write(
        &config,
        "\
[geometry]
rows = 8
cols = 8
n_codes = 256
bin_ps = 210

[source]
pair_rate_hz = 2e5
ref_jitter_ps = 60.0
ref_efficiency = 0.9
img_efficiency = 0.9
dark_rate_ref_hz = 500.0
dark_rate_img_hz = 2000.0
duration_s = 1.0
seed = 7

[drift]
profile = \"center_peaked\"
alpha = 0.02
beta = 2e-4
skew_ps = 100.0
scatter = 0.1
",
    )
    .unwrap();

    let run = |name: &str, threads: Option<&str>| -> PathBuf {
        let out = tmp.path().join(name);
        let mut cmd = chronocal_bin();
        cmd.args([
            "pipeline",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "11",
            "--out",
            out.to_str().unwrap(),
        ]);
        match threads {
            Some(t) => {
                cmd.env("CHRONOCAL_THREADS", t);
            }
            None => {
                cmd.env_remove("CHRONOCAL_THREADS");
            }
        }
        let result = cmd.output().unwrap();
        assert!(
            result.status.success(),
            "pipeline run {name} failed:\n{}",
            String::from_utf8_lossy(&result.stderr)
        );
        out
    };
    let a = run("a", None);
    let b = run("b", None);
    let t1 = run("t1", Some("1"));
    let t4 = run("t4", Some("4"));

    let digests = |dir: &Path| -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            let name = path.file_name().unwrap().to_str().unwrap().to_string();
            if name != "manifest.json" {
                map.insert(name, hex::encode(Sha256::digest(fs::read(&path).unwrap())));
            }
        }
        map
    };
    let reference_digests = digests(&a);
    assert!(reference_digests.len() >= 10, "expected the full output set");
    for (name, dir) in [("rerun", &b), ("one worker", &t1), ("four workers", &t4)] {
        assert_eq!(
            reference_digests,
            digests(dir),
            "{name}: outputs differ from the first run"
        );
    }

    let manifest_outputs = |dir: &Path| -> serde_json::Value {
        serde_json::from_str::<serde_json::Value>(
            &fs::read_to_string(dir.join("manifest.json")).unwrap(),
        )
        .unwrap()["outputs"]
            .clone()
    };
    let first = manifest_outputs(&a);
    for dir in [&b, &t1, &t4] {
        assert_eq!(first, manifest_outputs(dir), "manifest digest maps differ");
    }
    for (name, digest) in first.as_object().unwrap() {
        assert_eq!(
            digest.as_str().unwrap(),
            reference_digests[name],
            "manifest misreports {name}"
        );
    }
    println!(
        "PASS 8: {} output files byte-identical across two reruns and 1/4-worker pools",
        reference_digests.len()
    );
}
