//! Flat binary recording container.
//!
//! Layout (little-endian): magic `EEGW`, `u16` version, `u32` channel
//! count, `u64` sample count, `f32` sample rate, then `channels x samples`
//! `f32` values, channel-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::preprocess::{Label, Recording};

pub const MAGIC: &[u8; 4] = b"EEGW";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 22;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordingHeader {
    pub channels: usize,
    pub n_samples: usize,
    pub fs: f32,
}

impl RecordingHeader {
    pub fn payload_len(&self) -> Option<usize> {
        self.channels.checked_mul(self.n_samples)?.checked_mul(4)
    }
}

/// Header plus samples of a file, before trial metadata is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordingFile {
    pub header: RecordingHeader,
    pub samples: Vec<f32>,
}

impl RecordingFile {
    pub fn into_recording(self, subject_id: &str, trial_id: &str, label: Label) -> Result<Recording> {
        Recording::new(subject_id, trial_id, self.header.fs, self.header.channels, self.samples, label)
    }
}

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<RecordingHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            path,
            bytes.len(),
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(path, 0, format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format_err(path, 4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let channels = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
    let n_samples = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes"));
    let fs = f32::from_le_bytes(bytes[18..22].try_into().expect("4 bytes"));
    let n_samples = usize::try_from(n_samples).map_err(|_| format_err(path, 10, "sample count overflows"))?;
    if channels == 0 || n_samples == 0 {
        return Err(format_err(path, 6, "channel and sample counts must be positive"));
    }
    if !(fs.is_finite() && fs > 0.0) {
        return Err(format_err(path, 18, format!("invalid sample rate {fs}")));
    }
    Ok(RecordingHeader {
        channels: channels as usize,
        n_samples,
        fs,
    })
}

/// Reads only the fixed-size header.
pub fn read_header(path: &Path) -> Result<RecordingHeader> {
    use std::io::Read;
    let mut buf = Vec::with_capacity(HEADER_LEN);
    fs::File::open(path)
        .and_then(|f| f.take(HEADER_LEN as u64).read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    parse_header(path, &buf)
}

pub fn read_recording(path: &Path) -> Result<RecordingFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &bytes)?;
    let expected = header
        .payload_len()
        .ok_or_else(|| format_err(path, 6, "payload size overflows"))?;
    let actual = bytes.len() - HEADER_LEN;
    if actual != expected {
        return Err(format_err(
            path,
            HEADER_LEN + actual.min(expected),
            format!("payload is {actual} bytes, header implies {expected}"),
        ));
    }
    let samples = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(RecordingFile { header, samples })
}

pub fn encode_recording(rec: &Recording) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * rec.samples.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(rec.channels as u32).to_le_bytes());
    out.extend_from_slice(&(rec.n_samples() as u64).to_le_bytes());
    out.extend_from_slice(&rec.fs.to_le_bytes());
    for v in &rec.samples {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_recording(rec: &Recording, path: &Path) -> Result<()> {
    if rec.channels > u32::MAX as usize {
        return Err(Error::Data(format!("{} channels exceed the format limit", rec.channels)));
    }
    fs::write(path, encode_recording(rec)).map_err(|e| Error::io(path, e))
}
