//! The `.swpc` recording container.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                 |
//! |--------|------|-----------------------|
//! | 0      | 4    | magic `b"SWPC"`       |
//! | 4      | 2    | format version (u16)  |
//! | 6      | 2    | n_channels (u16)      |
//! | 8      | 8    | n_samples (u64)       |
//! | 16     | 8    | fs in Hz (f64)        |
//! | 24     | 4    | n_events (u32)        |
//!
//! followed by `n_channels * n_samples` f32 values, channel-major, and
//! `n_events` records of (onset u64, duration u64, label u16).

use std::fs;
use std::path::Path;

use swpc_core::recording::{ChannelMatrix, ContinuousRecording, Event};

pub const MAGIC: [u8; 4] = *b"SWPC";
pub const VERSION: u16 = 1;
/// Bytes before the sample block, magic included.
pub const HEADER_LEN: usize = 28;
/// Bytes per event record.
pub const EVENT_LEN: usize = 18;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("bad magic {0:?}, expected \"SWPC\"")]
    BadMagic([u8; 4]),

    #[error("file truncated in the {section}: need {needed} bytes, have {available}")]
    Truncated {
        section: &'static str,
        needed: u64,
        available: u64,
    },

    #[error("unsupported container version {0} (this build reads version {VERSION})")]
    UnsupportedVersion(u16),

    #[error("invalid recording: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ContainerError>;

/// Fixed-size header fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Header {
    pub version: u16,
    pub n_channels: u16,
    pub n_samples: u64,
    pub fs: f64,
    pub n_events: u32,
}

impl Header {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.n_channels.to_le_bytes());
        out.extend_from_slice(&self.n_samples.to_le_bytes());
        out.extend_from_slice(&self.fs.to_le_bytes());
        out.extend_from_slice(&self.n_events.to_le_bytes());
    }

    /// Parses the header and checks magic and version.
    pub fn decode(bytes: &[u8]) -> Result<Header> {
        if bytes.len() < MAGIC.len() {
            return Err(truncated("magic", MAGIC.len() as u64, bytes.len()));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(ContainerError::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated("header", HEADER_LEN as u64, bytes.len()));
        }
        let mut r = Cursor::new(&bytes[4..HEADER_LEN]);
        let version = u16::from_le_bytes(r.take());
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        Ok(Header {
            version,
            n_channels: u16::from_le_bytes(r.take()),
            n_samples: u64::from_le_bytes(r.take()),
            fs: f64::from_le_bytes(r.take()),
            n_events: u32::from_le_bytes(r.take()),
        })
    }

    /// Total file size implied by the header, `None` on overflow.
    pub fn file_len(&self) -> Option<u64> {
        let samples = (self.n_channels as u64).checked_mul(self.n_samples)?.checked_mul(4)?;
        let events = self.n_events as u64 * EVENT_LEN as u64;
        (HEADER_LEN as u64).checked_add(samples)?.checked_add(events)
    }
}

fn truncated(section: &'static str, needed: u64, available: usize) -> ContainerError {
    ContainerError::Truncated {
        section,
        needed,
        available: available as u64,
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    /// Callers check lengths up front, so slicing cannot fail.
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.bytes[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }
}

/// Serializes a recording. Samples must be finite and representable as f32.
pub fn encode(rec: &ContinuousRecording) -> Result<Vec<u8>> {
    rec.validate().map_err(|e| ContainerError::Invalid(e.to_string()))?;
    let n_channels = u16::try_from(rec.n_channels())
        .map_err(|_| ContainerError::Invalid(format!("{} channels exceed u16", rec.n_channels())))?;
    let n_events = u32::try_from(rec.events.len())
        .map_err(|_| ContainerError::Invalid(format!("{} events exceed u32", rec.events.len())))?;
    let header = Header {
        version: VERSION,
        n_channels,
        n_samples: rec.n_samples() as u64,
        fs: rec.fs,
        n_events,
    };
    let mut out = Vec::with_capacity(header.file_len().unwrap_or(0) as usize);
    header.encode(&mut out);
    for (i, &v) in rec.samples.as_slice().iter().enumerate() {
        let x = v as f32;
        if !x.is_finite() {
            let (c, t) = (i / rec.n_samples(), i % rec.n_samples());
            return Err(ContainerError::Invalid(format!(
                "sample {v} at channel {c}, index {t} is not a finite f32"
            )));
        }
        out.extend_from_slice(&x.to_le_bytes());
    }
    for ev in &rec.events {
        out.extend_from_slice(&(ev.onset as u64).to_le_bytes());
        out.extend_from_slice(&(ev.duration as u64).to_le_bytes());
        out.extend_from_slice(&ev.label.to_le_bytes());
    }
    Ok(out)
}

/// Exact inverse of [`encode`].
pub fn decode(bytes: &[u8]) -> Result<ContinuousRecording> {
    let header = Header::decode(bytes)?;
    let n_ch = header.n_channels as usize;
    let n_samples =
        usize::try_from(header.n_samples).map_err(|_| ContainerError::Invalid("n_samples exceeds usize".into()))?;
    let total = header
        .file_len()
        .ok_or_else(|| ContainerError::Invalid("header sizes overflow".into()))?;
    let samples_end = HEADER_LEN as u64 + 4 * n_ch as u64 * n_samples as u64;
    if (bytes.len() as u64) < samples_end {
        return Err(truncated("sample block", samples_end, bytes.len()));
    }
    if (bytes.len() as u64) < total {
        return Err(truncated("event table", total, bytes.len()));
    }
    if bytes.len() as u64 > total {
        return Err(ContainerError::Invalid(format!(
            "{} trailing bytes after the event table",
            bytes.len() as u64 - total
        )));
    }

    let mut r = Cursor::new(&bytes[HEADER_LEN..]);
    let data: Vec<f64> = (0..n_ch * n_samples)
        .map(|_| f32::from_le_bytes(r.take()) as f64)
        .collect();
    let mut events = Vec::with_capacity(header.n_events as usize);
    for _ in 0..header.n_events {
        let onset = u64::from_le_bytes(r.take());
        let duration = u64::from_le_bytes(r.take());
        let label = u16::from_le_bytes(r.take());
        let to_usize = |v: u64| usize::try_from(v).map_err(|_| ContainerError::Invalid(format!("{v} exceeds usize")));
        events.push(Event {
            onset: to_usize(onset)?,
            duration: to_usize(duration)?,
            label,
        });
    }
    let samples = ChannelMatrix::from_vec(n_ch, n_samples, data).map_err(|e| ContainerError::Invalid(e.to_string()))?;
    ContinuousRecording::new(header.fs, samples, events).map_err(|e| ContainerError::Invalid(e.to_string()))
}

pub fn write_recording(rec: &ContinuousRecording, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(rec)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_recording(path: impl AsRef<Path>) -> Result<ContinuousRecording> {
    decode(&fs::read(path)?)
}

/// Reads only the fixed header.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    use std::io::Read;
    let mut buf = Vec::with_capacity(HEADER_LEN);
    fs::File::open(path)?.take(HEADER_LEN as u64).read_to_end(&mut buf)?;
    Header::decode(&buf)
}

/// `<root>/<dataset>/<subject>/<session>.swpc`
pub fn recording_path(root: &Path, dataset: &str, subject: &str, session: &str) -> std::path::PathBuf {
    root.join(dataset).join(subject).join(format!("{session}.swpc"))
}
