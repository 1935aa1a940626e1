//! Coincidence-delay histograms, sectioned per pixel and per TDC code group.
//!
//! The delay axis spans [−whw, +whw] split into fixed-width sections
//! (left-closed, right-open; the single inclusive point at +whw falls into
//! the last section). Codes are pooled into contiguous groups so each
//! histogram collects enough counts for a stable peak fit. Storage is a
//! dense array, and merging two sets with identical parameters is exact
//! element-wise addition — accumulation order never matters, so shards
//! produced in parallel or from stream chunks combine losslessly.

use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::coincidence::CoincidencePair;
use crate::geometry::{DetectorGeometry, PixelId};

/// Binning layout shared by every histogram in a set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HistogramParams {
    pub geometry: DetectorGeometry,
    /// Number of consecutive TDC codes pooled per histogram.
    pub group_size: u16,
    /// Width of one delay section, ps.
    pub section_ps: u32,
    /// Half-width of the delay axis, ps.
    pub window_half_width_ps: u64,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum HistogramError {
    #[error("group_size must be >= 1")]
    ZeroGroupSize,
    #[error("section_ps must be >= 1")]
    ZeroSection,
    #[error("window half-width {0} ps does not fit a signed time difference")]
    WindowTooWide(u64),
    #[error("invalid geometry: {0}")]
    Geometry(crate::geometry::GeometryError),
    #[error("pixel {pixel} outside detector array")]
    PixelRange { pixel: PixelId },
    #[error("TDC code {code} out of range (n_codes = {n_codes})")]
    CodeRange { code: u16, n_codes: u16 },
    #[error("delay {dt_ps} ps outside ±{window_half_width_ps} ps window")]
    OutOfWindow { dt_ps: i64, window_half_width_ps: u64 },
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum MergeError {
    #[error("histogram parameter mismatch: {left:?} vs {right:?}")]
    ParamsMismatch {
        left: Box<HistogramParams>,
        right: Box<HistogramParams>,
    },
}

impl HistogramParams {
    pub fn validate(&self) -> Result<(), HistogramError> {
        self.geometry.validate().map_err(HistogramError::Geometry)?;
        if self.group_size == 0 {
            return Err(HistogramError::ZeroGroupSize);
        }
        if self.section_ps == 0 {
            return Err(HistogramError::ZeroSection);
        }
        if self.window_half_width_ps > i64::MAX as u64 {
            return Err(HistogramError::WindowTooWide(self.window_half_width_ps));
        }
        Ok(())
    }

    pub fn n_groups(&self) -> usize {
        usize::from(self.geometry.n_codes).div_ceil(usize::from(self.group_size))
    }

    pub fn n_sections(&self) -> usize {
        ((2 * self.window_half_width_ps as u128).div_ceil(u128::from(self.section_ps)) as usize)
            .max(1)
    }

    /// Left edge of section 0.
    pub fn origin_ps(&self) -> i64 {
        -(self.window_half_width_ps as i64)
    }

    pub fn group_of(&self, code: u16) -> usize {
        usize::from(code / self.group_size)
    }

    /// Central code of a group, used as the group's abscissa when fitting
    /// drift against code.
    pub fn representative_code(&self, group: usize) -> u16 {
        let rep = group as u64 * u64::from(self.group_size) + u64::from(self.group_size - 1) / 2;
        rep.min(u64::from(self.geometry.n_codes - 1)) as u16
    }
}

/// One delay histogram (for a single pixel/group, or an aggregate).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoincidenceHistogram {
    pub section_ps: u32,
    /// Left edge of `counts[0]`, ps.
    pub origin_ps: i64,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl CoincidenceHistogram {
    pub fn section_center_ps(&self, section: usize) -> f64 {
        self.origin_ps as f64 + (section as f64 + 0.5) * f64::from(self.section_ps)
    }

    pub fn section_left_edge_ps(&self, section: usize) -> i64 {
        self.origin_ps + section as i64 * i64::from(self.section_ps)
    }
}

/// Dense collection of delay histograms for every (pixel, code group).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistogramSet {
    params: HistogramParams,
    counts: Vec<u64>,
    totals: Vec<u64>,
}

impl HistogramSet {
    pub fn new(params: HistogramParams) -> Result<Self, HistogramError> {
        params.validate()?;
        let keys = params.geometry.n_pixels() as usize * params.n_groups();
        Ok(Self {
            params,
            counts: vec![0; keys * params.n_sections()],
            totals: vec![0; keys],
        })
    }

    pub fn params(&self) -> &HistogramParams {
        &self.params
    }

    fn key(&self, pixel: PixelId, group: usize) -> usize {
        pixel.linear(self.params.geometry.cols) as usize * self.params.n_groups() + group
    }

    pub fn accumulate(&mut self, pair: CoincidencePair) -> Result<(), HistogramError> {
        let g = self.params.geometry;
        if !g.contains(pair.pixel) {
            return Err(HistogramError::PixelRange { pixel: pair.pixel });
        }
        if pair.tdc_code >= g.n_codes {
            return Err(HistogramError::CodeRange {
                code: pair.tdc_code,
                n_codes: g.n_codes,
            });
        }
        let whw = self.params.window_half_width_ps as i64;
        if pair.dt_ps < -whw || pair.dt_ps > whw {
            return Err(HistogramError::OutOfWindow {
                dt_ps: pair.dt_ps,
                window_half_width_ps: self.params.window_half_width_ps,
            });
        }
        // dt = +whw is inside the closed window but on no half-open section;
        // clamp it into the last one.
        let section = (((pair.dt_ps - self.params.origin_ps()) as u64
            / u64::from(self.params.section_ps)) as usize)
            .min(self.params.n_sections() - 1);
        let key = self.key(pair.pixel, self.params.group_of(pair.tdc_code));
        self.counts[key * self.params.n_sections() + section] += 1;
        self.totals[key] += 1;
        Ok(())
    }

    pub fn accumulate_all(&mut self, pairs: &[CoincidencePair]) -> Result<(), HistogramError> {
        pairs.iter().try_for_each(|&p| self.accumulate(p))
    }

    pub fn total(&self, pixel: PixelId, group: usize) -> u64 {
        self.totals[self.key(pixel, group)]
    }

    pub fn grand_total(&self) -> u64 {
        self.totals.iter().sum()
    }

    pub fn histogram(&self, pixel: PixelId, group: usize) -> Option<CoincidenceHistogram> {
        if !self.params.geometry.contains(pixel) || group >= self.params.n_groups() {
            return None;
        }
        let key = self.key(pixel, group);
        let n = self.params.n_sections();
        Some(CoincidenceHistogram {
            section_ps: self.params.section_ps,
            origin_ps: self.params.origin_ps(),
            counts: self.counts[key * n..(key + 1) * n].to_vec(),
            total: self.totals[key],
        })
    }

    /// All (pixel, group) keys in pixel-major order.
    pub fn keys(&self) -> impl Iterator<Item = (PixelId, usize)> + '_ {
        let g = self.params.geometry;
        let n_groups = self.params.n_groups();
        (0..g.n_pixels()).flat_map(move |p| {
            (0..n_groups).map(move |group| (PixelId::from_linear(p, g.cols), group))
        })
    }

    /// Sum of every per-pixel, per-group histogram: the whole-array delay
    /// distribution.
    pub fn aggregate(&self) -> CoincidenceHistogram {
        let n = self.params.n_sections();
        let mut counts = vec![0u64; n];
        for chunk in self.counts.chunks_exact(n) {
            for (acc, &c) in counts.iter_mut().zip(chunk) {
                *acc += c;
            }
        }
        CoincidenceHistogram {
            section_ps: self.params.section_ps,
            origin_ps: self.params.origin_ps(),
            counts,
            total: self.totals.iter().sum(),
        }
    }

    /// Element-wise addition; exact and order-independent.
    pub fn merge_from(&mut self, other: &HistogramSet) -> Result<(), MergeError> {
        if self.params != other.params {
            return Err(MergeError::ParamsMismatch {
                left: Box::new(self.params),
                right: Box::new(other.params),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum HistogramCsvError {
    #[error("histogram csv I/O: {0}")]
    Io(#[from] io::Error),
    #[error("histogram csv line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Histogram(#[from] HistogramError),
}

/// Write a histogram set as CSV: a `#`-prefixed parameter line, a column
/// header, then one row per non-empty section, sorted by (pixel, group,
/// section). Pixels appear as linear indices.
pub fn write_histograms_csv(w: &mut impl Write, set: &HistogramSet) -> io::Result<()> {
    let p = set.params();
    let g = p.geometry;
    writeln!(
        w,
        "# rows={} cols={} n_codes={} bin_ps={} group_size={} section_ps={} window_half_width_ps={}",
        g.rows, g.cols, g.n_codes, g.bin_ps, p.group_size, p.section_ps, p.window_half_width_ps
    )?;
    writeln!(w, "pixel,group,section_index,section_left_edge_ps,count")?;
    let n = p.n_sections();
    for (pixel, group) in set.keys() {
        if set.total(pixel, group) == 0 {
            continue;
        }
        let linear = pixel.linear(g.cols);
        let hist = set.histogram(pixel, group).expect("key from iterator");
        for (section, &count) in hist.counts.iter().enumerate().take(n) {
            if count != 0 {
                writeln!(
                    w,
                    "{linear},{group},{section},{},{count}",
                    hist.section_left_edge_ps(section)
                )?;
            }
        }
    }
    Ok(())
}

pub fn read_histograms_csv(r: impl BufRead) -> Result<HistogramSet, HistogramCsvError> {
    let parse_err = |line: usize, message: String| HistogramCsvError::Parse { line, message };
    let mut lines = r.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?;
    let header = header?;
    let header = header
        .strip_prefix("# ")
        .ok_or_else(|| parse_err(1, "missing parameter line".into()))?;
    let mut fields = std::collections::HashMap::new();
    for kv in header.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| parse_err(1, format!("malformed parameter `{kv}`")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let mut get = |k: &str| -> Result<u64, HistogramCsvError> {
        fields
            .remove(k)
            .ok_or_else(|| parse_err(1, format!("missing parameter `{k}`")))?
            .parse()
            .map_err(|e| parse_err(1, format!("parameter `{k}`: {e}")))
    };
    let params = HistogramParams {
        geometry: DetectorGeometry {
            rows: get("rows")? as u16,
            cols: get("cols")? as u16,
            n_codes: get("n_codes")? as u16,
            bin_ps: get("bin_ps")? as u16,
        },
        group_size: get("group_size")? as u16,
        section_ps: get("section_ps")? as u32,
        window_half_width_ps: get("window_half_width_ps")?,
    };
    let mut set = HistogramSet::new(params)?;
    let n_sections = params.n_sections();
    let n_groups = params.n_groups();
    let n_pixels = params.geometry.n_pixels() as usize;
    for (index, line) in lines {
        let line_no = index + 1;
        let line = line?;
        if index == 1 {
            if line != "pixel,group,section_index,section_left_edge_ps,count" {
                return Err(parse_err(line_no, "unexpected column header".into()));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let mut next = |name: &str| -> Result<u64, HistogramCsvError> {
            cols.next()
                .ok_or_else(|| parse_err(line_no, format!("missing column `{name}`")))?
                .parse()
                .map_err(|e| parse_err(line_no, format!("column `{name}`: {e}")))
        };
        let pixel = next("pixel")? as usize;
        let group = next("group")? as usize;
        let section = next("section_index")? as usize;
        let _edge = cols.next(); // redundant with section_index; ignored
        let count = cols
            .next()
            .ok_or_else(|| parse_err(line_no, "missing column `count`".into()))?
            .parse::<u64>()
            .map_err(|e| parse_err(line_no, format!("column `count`: {e}")))?;
        if pixel >= n_pixels || group >= n_groups || section >= n_sections {
            return Err(parse_err(line_no, "index out of range".into()));
        }
        let key = pixel * n_groups + group;
        set.counts[key * n_sections + section] += count;
        set.totals[key] += count;
    }
    Ok(set)
}
