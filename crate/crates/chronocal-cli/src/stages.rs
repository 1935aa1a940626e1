//! Stage implementations behind the subcommands.
//!
//! Stage boundaries are files: every stage reads the inputs it was handed,
//! writes its products into the --out directory, and finishes by writing a
//! `manifest.json` recording the effective configuration and the SHA-256 of
//! every input and output. No stage ever modifies an input file. Event-file
//! headers are authoritative for the detector geometry; the config supplies
//! source, drift and analysis parameters.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use chronocal::codec::{self, EventStream};
use chronocal::coincidence::find_coincidences;
use chronocal::config::{parse_config, AnalysisConfig, ConfigFileError, RunConfig};
use chronocal::correction::{apply_lut, peak_metrics, PeakMetrics};
use chronocal::driftfit::{
    build_lut, fit_all, read_lut_json, write_fit_diagnostics_csv, write_lut_bin, write_lut_json,
    FitSettings, ModelSet, ReferencePolicy,
};
use chronocal::event::{ImagerEvent, ReferenceEvent};
use chronocal::histogram::{
    read_histograms_csv, write_histograms_csv, CoincidenceHistogram, HistogramParams, HistogramSet,
};
use chronocal::sim::drift::{write_ground_truth_csv, DriftConfig};
use chronocal::sim::{detect_imager, detect_reference, generate_pairs};
use chronocal::DetectorGeometry;

use crate::manifest::{sha256_hex, RunManifest};

/// Stage failure, carrying the exit code contract: validation problems exit
/// with 1, I/O problems with 2 (and name the offending path).
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io { .. } => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(message) => f.write_str(message),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

fn validation(e: impl fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

impl From<ConfigFileError> for CliError {
    fn from(e: ConfigFileError) -> Self {
        match e {
            ConfigFileError::Io { path, source } => CliError::Io { path, source },
            other => CliError::Validation(other.to_string()),
        }
    }
}

/// Analysis-parameter flags shared by several subcommands; `None` fields fall
/// back to the config file (which itself falls back to defaults).
#[derive(Clone, Copy, Debug, Default)]
pub struct AnalysisOverrides {
    pub group_size: Option<u16>,
    pub section_ps: Option<u32>,
    pub window_ps: Option<u64>,
    pub min_counts: Option<u64>,
    pub poly_degree: Option<usize>,
    pub reference_policy: Option<ReferencePolicy>,
}

impl AnalysisOverrides {
    fn apply(&self, a: &mut AnalysisConfig) {
        if let Some(v) = self.group_size {
            a.group_size = v;
        }
        if let Some(v) = self.section_ps {
            a.section_ps = v;
        }
        if let Some(v) = self.window_ps {
            a.window_half_width_ps = v;
        }
        if let Some(v) = self.min_counts {
            a.min_counts = v;
        }
        if let Some(v) = self.poly_degree {
            a.poly_degree = v;
        }
        if let Some(v) = self.reference_policy {
            a.reference_policy = v;
        }
    }
}

/// Load the config file (if any), apply the seed and flag overrides, and
/// validate the result. The config file is digested as an input.
fn effective_config(
    config_path: Option<&Path>,
    seed: Option<u64>,
    overrides: &AnalysisOverrides,
    manifest: &mut RunManifest,
) -> Result<RunConfig, CliError> {
    let mut cfg = match config_path {
        Some(path) => {
            let bytes = read_input(path, manifest)?;
            let text = String::from_utf8(bytes)
                .map_err(|e| validation(format!("{}: not UTF-8: {e}", path.display())))?;
            parse_config(&text, path)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.source.seed = s;
    }
    overrides.apply(&mut cfg.analysis);
    cfg.validate()?;
    Ok(cfg)
}

/// Read a whole input file, recording its digest in the manifest.
fn read_input(path: &Path, manifest: &mut RunManifest) -> Result<Vec<u8>, CliError> {
    let bytes = fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    manifest
        .inputs
        .insert(path.display().to_string(), sha256_hex(&bytes));
    Ok(bytes)
}

fn load_imager(
    path: &Path,
    manifest: &mut RunManifest,
) -> Result<(DetectorGeometry, Vec<ImagerEvent>), CliError> {
    let bytes = read_input(path, manifest)?;
    let file = codec::decode_bytes(&bytes)
        .map_err(|e| validation(format!("{}: {e}", path.display())))?;
    match file.events {
        EventStream::Imager(events) => Ok((file.geometry, events)),
        EventStream::Reference(_) => Err(validation(format!(
            "{}: expected an imager stream, found a reference stream",
            path.display()
        ))),
    }
}

fn load_reference(
    path: &Path,
    manifest: &mut RunManifest,
) -> Result<(DetectorGeometry, Vec<ReferenceEvent>), CliError> {
    let bytes = read_input(path, manifest)?;
    let file = codec::decode_bytes(&bytes)
        .map_err(|e| validation(format!("{}: {e}", path.display())))?;
    match file.events {
        EventStream::Reference(events) => Ok((file.geometry, events)),
        EventStream::Imager(_) => Err(validation(format!(
            "{}: expected a reference stream, found an imager stream",
            path.display()
        ))),
    }
}

/// Output directory: creates it, streams every file through a SHA-256
/// hasher, and finally writes the manifest (which lists those digests).
pub struct OutDir {
    dir: PathBuf,
    outputs: BTreeMap<String, String>,
}

type OutWriter = HashingWriter<BufWriter<File>>;

pub struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            outputs: BTreeMap::new(),
        })
    }

    fn write_file(
        &mut self,
        name: &str,
        fill: impl FnOnce(&mut OutWriter) -> Result<(), CliError>,
    ) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        let mut writer = HashingWriter {
            inner: BufWriter::new(file),
            hasher: Sha256::new(),
        };
        fill(&mut writer)?;
        writer.flush().map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        self.outputs
            .insert(name.to_string(), hex::encode(writer.hasher.finalize()));
        Ok(())
    }

    /// Write the manifest (with this directory's output digests) and finish.
    fn finish(self, mut manifest: RunManifest) -> Result<(), CliError> {
        manifest.outputs = self.outputs;
        let path = self.dir.join("manifest.json");
        let io_err = |source| CliError::Io {
            path: path.clone(),
            source,
        };
        let mut file = BufWriter::new(File::create(&path).map_err(io_err)?);
        serde_json::to_writer_pretty(&mut file, &manifest)
            .map_err(|e| validation(format!("manifest serialization: {e}")))?;
        file.write_all(b"\n").map_err(io_err)?;
        file.flush().map_err(io_err)?;
        Ok(())
    }
}

/// Map an encode failure on an output file: broken sink is I/O, anything
/// else (malformed records) is validation.
fn codec_out(path: &Path, e: codec::CodecError) -> CliError {
    match e {
        codec::CodecError::Write { source, .. } => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => validation(other.to_string()),
    }
}

fn io_out(path: &Path) -> impl Fn(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

struct StageTimer {
    last: Instant,
}

impl StageTimer {
    fn start() -> Self {
        Self {
            last: Instant::now(),
        }
    }

    fn lap(&mut self, name: &str, manifest: &mut RunManifest) {
        let now = Instant::now();
        manifest
            .timing_s
            .insert(name.to_string(), (now - self.last).as_secs_f64());
        self.last = now;
    }
}

// ---------------------------------------------------------------------------
// Stage cores (shared by the standalone subcommands and `pipeline`)
// ---------------------------------------------------------------------------

struct SimProducts {
    reference: Vec<ReferenceEvent>,
    imager: Vec<ImagerEvent>,
    drift: DriftConfig,
}

fn run_simulation(cfg: &RunConfig) -> Result<SimProducts, CliError> {
    let geometry = cfg.geometry;
    let drift = DriftConfig::from_spec(geometry, &cfg.drift, cfg.source.seed);
    drift.validate(geometry).map_err(validation)?;
    let pairs = generate_pairs(geometry, &cfg.source).map_err(validation)?;
    let reference = detect_reference(&pairs, geometry, &cfg.source).map_err(validation)?;
    let imager = detect_imager(&pairs, geometry, &drift, &cfg.source).map_err(validation)?;
    Ok(SimProducts {
        reference,
        imager,
        drift,
    })
}

fn write_sim_products(
    out: &mut OutDir,
    geometry: DetectorGeometry,
    sim: &SimProducts,
) -> Result<(), CliError> {
    out.write_file("reference.ptev", |w| {
        codec::encode_reference(w, geometry, &sim.reference)
            .map(drop)
            .map_err(|e| codec_out(Path::new("reference.ptev"), e))
    })?;
    out.write_file("imager.ptev", |w| {
        codec::encode_imager(w, geometry, &sim.imager)
            .map(drop)
            .map_err(|e| codec_out(Path::new("imager.ptev"), e))
    })?;
    out.write_file("drift_truth.csv", |w| {
        write_ground_truth_csv(w, geometry, &sim.drift)
            .map_err(io_out(Path::new("drift_truth.csv")))
    })
}

/// Coincide every imager stream against the shared reference and accumulate
/// all delays into one histogram set (measurement chunks simply add up).
fn coincide_streams(
    streams: &[(String, Vec<ImagerEvent>)],
    reference: &[ReferenceEvent],
    params: HistogramParams,
) -> Result<HistogramSet, CliError> {
    let mut set = HistogramSet::new(params).map_err(validation)?;
    for (name, events) in streams {
        let pairs = find_coincidences(events, reference, params.window_half_width_ps)
            .map_err(|e| validation(format!("{name}: {e}")))?;
        set.accumulate_all(&pairs).map_err(validation)?;
    }
    Ok(set)
}

fn histogram_params(geometry: DetectorGeometry, analysis: &AnalysisConfig) -> HistogramParams {
    HistogramParams {
        geometry,
        group_size: analysis.group_size,
        section_ps: analysis.section_ps,
        window_half_width_ps: analysis.window_half_width_ps,
    }
}

/// Aggregate delay histogram of a whole stream (all pixels, all codes): the
/// input to the peak-shape report.
fn aggregate_delays(
    events: &[ImagerEvent],
    reference: &[ReferenceEvent],
    geometry: DetectorGeometry,
    analysis: &AnalysisConfig,
    label: &str,
) -> Result<CoincidenceHistogram, CliError> {
    let params = HistogramParams {
        geometry,
        group_size: geometry.n_codes, // one group: only the delay axis matters
        section_ps: analysis.section_ps,
        window_half_width_ps: analysis.window_half_width_ps,
    };
    let mut set = HistogramSet::new(params).map_err(validation)?;
    let pairs = find_coincidences(events, reference, params.window_half_width_ps)
        .map_err(|e| validation(format!("{label}: {e}")))?;
    set.accumulate_all(&pairs).map_err(validation)?;
    Ok(set.aggregate())
}

fn write_peak_dat(w: &mut OutWriter, name: &str, hist: &CoincidenceHistogram) -> Result<(), CliError> {
    let path = Path::new(name);
    for i in 0..hist.counts.len() {
        writeln!(w, "{:.1} {}", hist.section_center_ps(i), hist.counts[i])
            .map_err(io_out(path))?;
    }
    Ok(())
}

/// Peak-shape summary across correction variants, as written to metrics.json.
#[derive(serde::Serialize)]
struct ReportMetrics {
    full_width_threshold: f64,
    uncorrected: PeakMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    linear: Option<PeakMetrics>,
    corrected: PeakMetrics,
    /// uncorrected FWHM / corrected FWHM.
    improvement_fwhm: f64,
    /// uncorrected full width / corrected full width.
    improvement_full_width: f64,
}

/// Measure the three aggregate peaks and write the plot data and metrics.
fn write_report(
    out: &mut OutDir,
    geometry: DetectorGeometry,
    analysis: &AnalysisConfig,
    reference: &[ReferenceEvent],
    uncorrected: &[ImagerEvent],
    linear: Option<&[ImagerEvent]>,
    corrected: &[ImagerEvent],
) -> Result<ReportMetrics, CliError> {
    let threshold = analysis.full_width_threshold;
    let mut measure = |name: &str, events: &[ImagerEvent]| -> Result<PeakMetrics, CliError> {
        let hist = aggregate_delays(events, reference, geometry, analysis, name)?;
        out.write_file(name, |w| write_peak_dat(w, name, &hist))?;
        peak_metrics(&hist, threshold).map_err(|e| validation(format!("{name}: {e}")))
    };
    let unc = measure("peak_uncorrected.dat", uncorrected)?;
    let lin = match linear {
        Some(events) => Some(measure("peak_linear.dat", events)?),
        None => None,
    };
    let cor = measure("peak_corrected.dat", corrected)?;
    let metrics = ReportMetrics {
        full_width_threshold: threshold,
        uncorrected: unc,
        linear: lin,
        corrected: cor,
        improvement_fwhm: unc.fwhm_ps / cor.fwhm_ps,
        improvement_full_width: unc.full_width_ps / cor.full_width_ps,
    };
    out.write_file("metrics.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &metrics)
            .map_err(|e| validation(format!("metrics serialization: {e}")))?;
        w.write_all(b"\n").map_err(io_out(Path::new("metrics.json")))
    })?;
    Ok(metrics)
}

fn write_models(out: &mut OutDir, models: &ModelSet) -> Result<(), CliError> {
    out.write_file("models.json", |w| {
        serde_json::to_writer_pretty(&mut *w, models)
            .map_err(|e| validation(format!("model serialization: {e}")))?;
        w.write_all(b"\n").map_err(io_out(Path::new("models.json")))
    })
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

pub fn cmd_simulate(config: &Path, seed: Option<u64>, out_dir: &Path) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("simulate");
    let cfg = effective_config(Some(config), seed, &AnalysisOverrides::default(), &mut manifest)?;
    manifest.seed = Some(cfg.source.seed);
    let mut out = OutDir::create(out_dir)?;
    let mut timer = StageTimer::start();
    let sim = run_simulation(&cfg)?;
    timer.lap("simulate", &mut manifest);
    write_sim_products(&mut out, cfg.geometry, &sim)?;
    timer.lap("write", &mut manifest);
    println!(
        "simulated {} reference and {} imager events ({}x{} pixels, {} codes)",
        sim.reference.len(),
        sim.imager.len(),
        cfg.geometry.rows,
        cfg.geometry.cols,
        cfg.geometry.n_codes
    );
    manifest.config = Some(cfg);
    out.finish(manifest)
}

pub fn cmd_coincide(
    imager_paths: &[PathBuf],
    reference_path: &Path,
    config: Option<&Path>,
    overrides: &AnalysisOverrides,
    out_dir: &Path,
) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("coincide");
    let mut cfg = effective_config(config, None, overrides, &mut manifest)?;
    let (geometry, reference) = load_reference(reference_path, &mut manifest)?;
    let mut streams = Vec::with_capacity(imager_paths.len());
    for path in imager_paths {
        let (g, events) = load_imager(path, &mut manifest)?;
        if g != geometry {
            return Err(validation(format!(
                "{}: geometry {g:?} does not match the reference file's {geometry:?}",
                path.display()
            )));
        }
        streams.push((path.display().to_string(), events));
    }
    cfg.geometry = geometry; // headers are authoritative
    cfg.validate()?;
    let mut timer = StageTimer::start();
    let set = coincide_streams(&streams, &reference, histogram_params(geometry, &cfg.analysis))?;
    timer.lap("coincide", &mut manifest);
    let mut out = OutDir::create(out_dir)?;
    out.write_file("histograms.csv", |w| {
        write_histograms_csv(w, &set).map_err(io_out(Path::new("histograms.csv")))
    })?;
    timer.lap("write", &mut manifest);
    println!(
        "histogrammed {} coincidences from {} imager file(s)",
        set.grand_total(),
        streams.len()
    );
    manifest.config = Some(cfg);
    out.finish(manifest)
}

pub fn cmd_fit(
    histograms: &Path,
    config: Option<&Path>,
    overrides: &AnalysisOverrides,
    out_dir: &Path,
) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("fit");
    let mut cfg = effective_config(config, None, overrides, &mut manifest)?;
    let bytes = read_input(histograms, &mut manifest)?;
    let set = read_histograms_csv(&bytes[..])
        .map_err(|e| validation(format!("{}: {e}", histograms.display())))?;
    let params = *set.params();
    if let Some(gs) = overrides.group_size {
        if gs != params.group_size {
            return Err(validation(format!(
                "--group-size {gs} conflicts with the histogram file (built with group_size {})",
                params.group_size
            )));
        }
    }
    // The histogram file is authoritative for everything baked into it.
    cfg.geometry = params.geometry;
    cfg.analysis.group_size = params.group_size;
    cfg.analysis.section_ps = params.section_ps;
    cfg.analysis.window_half_width_ps = params.window_half_width_ps;
    cfg.validate()?;
    let mut timer = StageTimer::start();
    let (models, diagnostics) = fit_all(&set, cfg.fit_settings());
    timer.lap("fit", &mut manifest);
    let mut out = OutDir::create(out_dir)?;
    write_models(&mut out, &models)?;
    out.write_file("fit_diagnostics.csv", |w| {
        write_fit_diagnostics_csv(w, params.geometry.cols, &diagnostics)
            .map_err(io_out(Path::new("fit_diagnostics.csv")))
    })?;
    timer.lap("write", &mut manifest);
    println!(
        "fitted {}/{} pixels ({} code groups per pixel)",
        models.calibrated_count(),
        params.geometry.n_pixels(),
        params.n_groups()
    );
    manifest.config = Some(cfg);
    out.finish(manifest)
}

pub fn cmd_lut(
    models_path: &Path,
    config: Option<&Path>,
    overrides: &AnalysisOverrides,
    out_dir: &Path,
) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("lut");
    let cfg = effective_config(config, None, overrides, &mut manifest)?;
    let bytes = read_input(models_path, &mut manifest)?;
    let models: ModelSet = serde_json::from_slice(&bytes)
        .map_err(|e| validation(format!("{}: {e}", models_path.display())))?;
    let mut timer = StageTimer::start();
    let lut = build_lut(&models, cfg.analysis.reference_policy).map_err(validation)?;
    timer.lap("lut", &mut manifest);
    let mut out = OutDir::create(out_dir)?;
    out.write_file("lut.json", |w| {
        write_lut_json(&mut *w, &lut)
            .map_err(|e| validation(format!("lut.json: {e}")))
    })?;
    out.write_file("lut.bin", |w| {
        write_lut_bin(&mut *w, &lut)
            .map_err(|e| validation(format!("lut.bin: {e}")))
    })?;
    timer.lap("write", &mut manifest);
    println!(
        "built correction table: {}/{} pixels calibrated, reference delay {:.1} ps",
        lut.calibrated_count(),
        lut.geometry.n_pixels(),
        lut.reference_ps
    );
    manifest.config = Some(cfg);
    out.finish(manifest)
}

pub fn cmd_apply(events_path: &Path, lut_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("apply");
    let (geometry, events) = load_imager(events_path, &mut manifest)?;
    let lut_bytes = read_input(lut_path, &mut manifest)?;
    let lut = read_lut_json(&lut_bytes[..])
        .map_err(|e| validation(format!("{}: {e}", lut_path.display())))?;
    if lut.geometry != geometry {
        return Err(validation(format!(
            "{}: geometry {geometry:?} does not match the table's {:?}",
            events_path.display(),
            lut.geometry
        )));
    }
    let mut timer = StageTimer::start();
    let (corrected, stats) = apply_lut(&events, &lut).map_err(validation)?;
    timer.lap("apply", &mut manifest);
    let mut out = OutDir::create(out_dir)?;
    out.write_file("corrected.ptev", |w| {
        codec::encode_imager(w, geometry, &corrected)
            .map(drop)
            .map_err(|e| codec_out(Path::new("corrected.ptev"), e))
    })?;
    timer.lap("write", &mut manifest);
    println!(
        "corrected {} events ({} beyond calibrated code range, {} clamped)",
        stats.events, stats.extrapolated, stats.clamped
    );
    out.finish(manifest)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_report(
    uncorrected_path: &Path,
    linear_path: Option<&Path>,
    corrected_path: &Path,
    reference_path: &Path,
    config: Option<&Path>,
    overrides: &AnalysisOverrides,
    out_dir: &Path,
) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("report");
    let mut cfg = effective_config(config, None, overrides, &mut manifest)?;
    let (geometry, reference) = load_reference(reference_path, &mut manifest)?;
    let load_checked = |path: &Path, manifest: &mut RunManifest| {
        let (g, events) = load_imager(path, manifest)?;
        if g != geometry {
            return Err(validation(format!(
                "{}: geometry {g:?} does not match the reference file's {geometry:?}",
                path.display()
            )));
        }
        Ok(events)
    };
    let uncorrected = load_checked(uncorrected_path, &mut manifest)?;
    let linear = match linear_path {
        Some(p) => Some(load_checked(p, &mut manifest)?),
        None => None,
    };
    let corrected = load_checked(corrected_path, &mut manifest)?;
    cfg.geometry = geometry;
    cfg.validate()?;
    let mut timer = StageTimer::start();
    let mut out = OutDir::create(out_dir)?;
    let metrics = write_report(
        &mut out,
        geometry,
        &cfg.analysis,
        &reference,
        &uncorrected,
        linear.as_deref(),
        &corrected,
    )?;
    timer.lap("report", &mut manifest);
    println!(
        "peak FWHM {:.0} ps -> {:.0} ps (improvement {:.2}x), full width {:.0} ps -> {:.0} ps ({:.2}x)",
        metrics.uncorrected.fwhm_ps,
        metrics.corrected.fwhm_ps,
        metrics.improvement_fwhm,
        metrics.uncorrected.full_width_ps,
        metrics.corrected.full_width_ps,
        metrics.improvement_full_width
    );
    manifest.config = Some(cfg);
    out.finish(manifest)
}

pub fn cmd_pipeline(
    config: &Path,
    seed: Option<u64>,
    overrides: &AnalysisOverrides,
    out_dir: &Path,
) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("pipeline");
    let cfg = effective_config(Some(config), seed, overrides, &mut manifest)?;
    manifest.seed = Some(cfg.source.seed);
    let geometry = cfg.geometry;
    let mut out = OutDir::create(out_dir)?;
    let mut timer = StageTimer::start();

    let sim = run_simulation(&cfg)?;
    timer.lap("simulate", &mut manifest);
    write_sim_products(&mut out, geometry, &sim)?;
    timer.lap("write_events", &mut manifest);

    let streams = [("imager".to_string(), sim.imager)];
    let set = coincide_streams(&streams, &sim.reference, histogram_params(geometry, &cfg.analysis))?;
    out.write_file("histograms.csv", |w| {
        write_histograms_csv(w, &set).map_err(io_out(Path::new("histograms.csv")))
    })?;
    timer.lap("coincide", &mut manifest);

    let (models, diagnostics) = fit_all(&set, cfg.fit_settings());
    write_models(&mut out, &models)?;
    out.write_file("fit_diagnostics.csv", |w| {
        write_fit_diagnostics_csv(w, geometry.cols, &diagnostics)
            .map_err(io_out(Path::new("fit_diagnostics.csv")))
    })?;
    timer.lap("fit", &mut manifest);

    let imager = &streams[0].1;
    let lut = build_lut(&models, cfg.analysis.reference_policy).map_err(validation)?;
    out.write_file("lut.json", |w| {
        write_lut_json(&mut *w, &lut).map_err(|e| validation(format!("lut.json: {e}")))
    })?;
    out.write_file("lut.bin", |w| {
        write_lut_bin(&mut *w, &lut).map_err(|e| validation(format!("lut.bin: {e}")))
    })?;
    let (corrected, stats) = apply_lut(imager, &lut).map_err(validation)?;
    out.write_file("corrected.ptev", |w| {
        codec::encode_imager(w, geometry, &corrected)
            .map(drop)
            .map_err(|e| codec_out(Path::new("corrected.ptev"), e))
    })?;
    timer.lap("correct", &mut manifest);

    // First-order baseline for comparison: same pipeline, curve degree 1.
    let linear_settings = FitSettings {
        degree: 1,
        ..cfg.fit_settings()
    };
    let (linear_models, _) = fit_all(&set, linear_settings);
    let linear_lut = build_lut(&linear_models, cfg.analysis.reference_policy).map_err(validation)?;
    let (linear, _) = apply_lut(imager, &linear_lut).map_err(validation)?;
    out.write_file("linear.ptev", |w| {
        codec::encode_imager(w, geometry, &linear)
            .map(drop)
            .map_err(|e| codec_out(Path::new("linear.ptev"), e))
    })?;
    timer.lap("linear_baseline", &mut manifest);

    let metrics = write_report(
        &mut out,
        geometry,
        &cfg.analysis,
        &sim.reference,
        imager,
        Some(&linear),
        &corrected,
    )?;
    timer.lap("report", &mut manifest);

    println!(
        "pipeline done: {} imager events, {}/{} pixels calibrated ({} extrapolated, {} clamped)",
        imager.len(),
        lut.calibrated_count(),
        geometry.n_pixels(),
        stats.extrapolated,
        stats.clamped
    );
    println!(
        "peak FWHM {:.0} ps -> {:.0} ps (improvement {:.2}x), full width {:.0} ps -> {:.0} ps ({:.2}x)",
        metrics.uncorrected.fwhm_ps,
        metrics.corrected.fwhm_ps,
        metrics.improvement_fwhm,
        metrics.uncorrected.full_width_ps,
        metrics.corrected.full_width_ps,
        metrics.improvement_full_width
    );
    manifest.config = Some(cfg);
    out.finish(manifest)
}
