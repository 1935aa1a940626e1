//! Event-file serialization.
//!
//! Canonical format is a compact little-endian binary stream:
//!
//! ```text
//! header (16 bytes): magic "PTEV" | version u16 | record kind u8 | reserved u8
//!                    | rows u16 | cols u16 | n_codes u16 | bin_ps u16
//! reference record (8 bytes):  time_ps u64
//! imager record   (16 bytes):  time_ps u64 | pixel linear index u32
//!                              | tdc_code u16 | reserved u16
//! ```
//!
//! Records run from the end of the header to the end of the file. A CSV
//! alternative (`time_ps` / `time_ps,pixel,tdc_code`, one event per line,
//! decimal) exists for debugging; binary is canonical.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::event::{ImagerEvent, ReferenceEvent};
use crate::geometry::{DetectorGeometry, PixelId};

pub const MAGIC: [u8; 4] = *b"PTEV";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 16;
pub const REFERENCE_RECORD_LEN: u64 = 8;
pub const IMAGER_RECORD_LEN: u64 = 16;

const KIND_REFERENCE: u8 = 0;
const KIND_IMAGER: u8 = 1;

/// The decoded payload of an event file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EventStream {
    Reference(Vec<ReferenceEvent>),
    Imager(Vec<ImagerEvent>),
}

impl EventStream {
    pub fn len(&self) -> usize {
        match self {
            EventStream::Reference(v) => v.len(),
            EventStream::Imager(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An event stream together with the geometry recorded in its header.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventFile {
    pub geometry: DetectorGeometry,
    pub events: EventStream,
}

#[derive(Debug, Error)]
pub enum CodecError {
    /// A sink write failed; `bytes_written` counts what had been committed.
    #[error("write failed after {bytes_written} bytes")]
    Write {
        bytes_written: u64,
        #[source]
        source: io::Error,
    },
    #[error("read failed")]
    Read(#[from] io::Error),
    #[error("bad magic {found:?}, expected {MAGIC:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0} (expected {FORMAT_VERSION})")]
    Version(u16),
    #[error("unknown record kind {0}")]
    RecordKind(u8),
    /// The byte stream ends mid-record; `offset` is the last complete record
    /// boundary.
    #[error("truncated after {complete_records} complete records (byte offset {offset})")]
    Truncated { complete_records: u64, offset: u64 },
    #[error("record {index}: tdc code {code} out of range (n_codes {n_codes})")]
    CodeRange { index: u64, code: u16, n_codes: u16 },
    #[error("record {index}: pixel index {pixel} outside {rows}x{cols} array")]
    PixelRange {
        index: u64,
        pixel: u32,
        rows: u16,
        cols: u16,
    },
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
}

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<(), CodecError> {
        self.inner.write_all(bytes).map_err(|source| CodecError::Write {
            bytes_written: self.written,
            source,
        })?;
        self.written += bytes.len() as u64;
        Ok(())
    }
}

fn header_bytes(kind: u8, geometry: DetectorGeometry) -> [u8; HEADER_LEN as usize] {
    let mut h = [0u8; HEADER_LEN as usize];
    h[0..4].copy_from_slice(&MAGIC);
    h[4..6].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    h[6] = kind;
    // h[7] reserved
    h[8..10].copy_from_slice(&geometry.rows.to_le_bytes());
    h[10..12].copy_from_slice(&geometry.cols.to_le_bytes());
    h[12..14].copy_from_slice(&geometry.n_codes.to_le_bytes());
    h[14..16].copy_from_slice(&geometry.bin_ps.to_le_bytes());
    h
}

/// Encode a reference stream; returns the total byte count written.
pub fn encode_reference(
    sink: &mut impl Write,
    geometry: DetectorGeometry,
    events: &[ReferenceEvent],
) -> Result<u64, CodecError> {
    let mut w = CountingWriter {
        inner: sink,
        written: 0,
    };
    w.put(&header_bytes(KIND_REFERENCE, geometry))?;
    for e in events {
        w.put(&e.time_ps.to_le_bytes())?;
    }
    Ok(w.written)
}

/// Encode an imager stream; events are validated against the geometry first.
/// Returns the total byte count written.
pub fn encode_imager(
    sink: &mut impl Write,
    geometry: DetectorGeometry,
    events: &[ImagerEvent],
) -> Result<u64, CodecError> {
    for (index, e) in events.iter().enumerate() {
        validate_imager_record(geometry, index as u64, e.pixel.linear(geometry.cols), e.tdc_code)?;
    }
    let mut w = CountingWriter {
        inner: sink,
        written: 0,
    };
    w.put(&header_bytes(KIND_IMAGER, geometry))?;
    for e in events {
        let mut rec = [0u8; IMAGER_RECORD_LEN as usize];
        rec[0..8].copy_from_slice(&e.time_ps.to_le_bytes());
        rec[8..12].copy_from_slice(&e.pixel.linear(geometry.cols).to_le_bytes());
        rec[12..14].copy_from_slice(&e.tdc_code.to_le_bytes());
        // rec[14..16] reserved
        w.put(&rec)?;
    }
    Ok(w.written)
}

fn validate_imager_record(
    geometry: DetectorGeometry,
    index: u64,
    pixel: u32,
    code: u16,
) -> Result<(), CodecError> {
    if pixel >= geometry.n_pixels() {
        return Err(CodecError::PixelRange {
            index,
            pixel,
            rows: geometry.rows,
            cols: geometry.cols,
        });
    }
    if code >= geometry.n_codes {
        return Err(CodecError::CodeRange {
            index,
            code,
            n_codes: geometry.n_codes,
        });
    }
    Ok(())
}

/// Decode an event file, validating header and every record. Events are
/// returned in file order (no sorting).
pub fn decode(source: &mut impl Read) -> Result<EventFile, CodecError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_bytes(&bytes)
}

pub fn decode_bytes(bytes: &[u8]) -> Result<EventFile, CodecError> {
    if bytes.len() < HEADER_LEN as usize {
        return Err(CodecError::Truncated {
            complete_records: 0,
            offset: 0,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(CodecError::BadMagic { found: magic });
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CodecError::Version(version));
    }
    let kind = bytes[6];
    let geometry = DetectorGeometry {
        rows: u16::from_le_bytes(bytes[8..10].try_into().unwrap()),
        cols: u16::from_le_bytes(bytes[10..12].try_into().unwrap()),
        n_codes: u16::from_le_bytes(bytes[12..14].try_into().unwrap()),
        bin_ps: u16::from_le_bytes(bytes[14..16].try_into().unwrap()),
    };
    let body = &bytes[HEADER_LEN as usize..];
    let record_len = match kind {
        KIND_REFERENCE => REFERENCE_RECORD_LEN,
        KIND_IMAGER => IMAGER_RECORD_LEN,
        other => return Err(CodecError::RecordKind(other)),
    } as usize;
    let complete = (body.len() / record_len) as u64;
    if !body.len().is_multiple_of(record_len) {
        return Err(CodecError::Truncated {
            complete_records: complete,
            offset: HEADER_LEN + complete * record_len as u64,
        });
    }
    let events = match kind {
        KIND_REFERENCE => EventStream::Reference(
            body.chunks_exact(record_len)
                .map(|rec| ReferenceEvent {
                    time_ps: u64::from_le_bytes(rec[0..8].try_into().unwrap()),
                })
                .collect(),
        ),
        _ => {
            let mut events = Vec::with_capacity(complete as usize);
            for (index, rec) in body.chunks_exact(record_len).enumerate() {
                let time_ps = u64::from_le_bytes(rec[0..8].try_into().unwrap());
                let pixel = u32::from_le_bytes(rec[8..12].try_into().unwrap());
                let code = u16::from_le_bytes(rec[12..14].try_into().unwrap());
                validate_imager_record(geometry, index as u64, pixel, code)?;
                events.push(ImagerEvent {
                    time_ps,
                    pixel: PixelId::from_linear(pixel, geometry.cols),
                    tdc_code: code,
                });
            }
            EventStream::Imager(events)
        }
    };
    Ok(EventFile { geometry, events })
}

/// CSV alternative, reference stream: header line `time_ps`, one decimal
/// timestamp per line.
pub fn encode_reference_csv(
    sink: &mut impl Write,
    events: &[ReferenceEvent],
) -> Result<u64, CodecError> {
    let mut w = CountingWriter {
        inner: sink,
        written: 0,
    };
    w.put(b"time_ps\n")?;
    for e in events {
        w.put(format!("{}\n", e.time_ps).as_bytes())?;
    }
    Ok(w.written)
}

/// CSV alternative, imager stream: header line `time_ps,pixel,tdc_code` with
/// the pixel as its row-major linear index.
pub fn encode_imager_csv(
    sink: &mut impl Write,
    geometry: DetectorGeometry,
    events: &[ImagerEvent],
) -> Result<u64, CodecError> {
    for (index, e) in events.iter().enumerate() {
        validate_imager_record(geometry, index as u64, e.pixel.linear(geometry.cols), e.tdc_code)?;
    }
    let mut w = CountingWriter {
        inner: sink,
        written: 0,
    };
    w.put(b"time_ps,pixel,tdc_code\n")?;
    for e in events {
        w.put(format!("{},{},{}\n", e.time_ps, e.pixel.linear(geometry.cols), e.tdc_code).as_bytes())?;
    }
    Ok(w.written)
}

/// Decode the CSV alternative. The CSV carries no geometry header, so the
/// caller supplies the geometry to validate imager records against.
pub fn decode_csv(source: &mut impl Read, geometry: DetectorGeometry) -> Result<EventFile, CodecError> {
    let mut text = String::new();
    source
        .read_to_string(&mut text)
        .map_err(CodecError::Read)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(CodecError::Csv {
        line: 1,
        message: "empty file, expected a header line".into(),
    })?;
    let events = match header.trim() {
        "time_ps" => {
            let mut events = Vec::new();
            for (i, line) in lines {
                if line.trim().is_empty() {
                    continue;
                }
                let time_ps = line.trim().parse::<u64>().map_err(|e| CodecError::Csv {
                    line: i + 1,
                    message: format!("bad time_ps: {e}"),
                })?;
                events.push(ReferenceEvent { time_ps });
            }
            EventStream::Reference(events)
        }
        "time_ps,pixel,tdc_code" => {
            let mut events = Vec::new();
            for (i, line) in lines {
                if line.trim().is_empty() {
                    continue;
                }
                let mut fields = line.trim().split(',');
                let mut next = |name: &str| {
                    fields
                        .next()
                        .ok_or_else(|| CodecError::Csv {
                            line: i + 1,
                            message: format!("missing field {name}"),
                        })
                        .map(str::trim)
                };
                let time_ps = next("time_ps")?.parse::<u64>().map_err(|e| CodecError::Csv {
                    line: i + 1,
                    message: format!("bad time_ps: {e}"),
                })?;
                let pixel = next("pixel")?.parse::<u32>().map_err(|e| CodecError::Csv {
                    line: i + 1,
                    message: format!("bad pixel: {e}"),
                })?;
                let code = next("tdc_code")?.parse::<u16>().map_err(|e| CodecError::Csv {
                    line: i + 1,
                    message: format!("bad tdc_code: {e}"),
                })?;
                validate_imager_record(geometry, events.len() as u64, pixel, code)?;
                events.push(ImagerEvent {
                    time_ps,
                    pixel: PixelId::from_linear(pixel, geometry.cols),
                    tdc_code: code,
                });
            }
            EventStream::Imager(events)
        }
        other => {
            return Err(CodecError::Csv {
                line: 1,
                message: format!("unrecognized header {other:?}"),
            })
        }
    };
    Ok(EventFile { geometry, events })
}
