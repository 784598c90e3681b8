//! Minimal PCM file support for the QC audio path: canonical 16-bit
//! little-endian mono WAV, plus raw float32 files. Format is inferred from
//! the file extension.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("{path}: unsupported WAV ({reason}); only 16-bit LE mono PCM is supported")]
    Unsupported { path: String, reason: String },
    #[error("{path}: unknown PCM extension (expected .wav, .f32 or .raw)")]
    UnknownExtension { path: String },
}

fn io_err(path: &Path, source: io::Error) -> WavError {
    WavError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> WavError {
    WavError::Malformed {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Write a canonical 44-byte-header RIFF/WAVE file: PCM, mono, 16-bit LE.
pub fn write_wav_mono16(path: &Path, sample_rate_hz: u32, samples: &[i16]) -> Result<(), WavError> {
    let data_len = (samples.len() * 2) as u32;
    let byte_rate = sample_rate_hz * 2;
    let mut bytes = Vec::with_capacity(44 + samples.len() * 2);
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&sample_rate_hz.to_le_bytes());
    bytes.extend_from_slice(&byte_rate.to_le_bytes());
    bytes.extend_from_slice(&2u16.to_le_bytes()); // block align
    bytes.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Read a 16-bit LE mono PCM WAV file, skipping unknown chunks.
pub fn read_wav_mono16(path: &Path) -> Result<(u32, Vec<i16>), WavError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(malformed(path, "not a RIFF/WAVE file"));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let chunk_id = &bytes[pos..pos + 4];
        let chunk_len =
            u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().expect("4 bytes")) as usize;
        let body_start = pos + 8;
        let body_end = body_start + chunk_len;
        if body_end > bytes.len() {
            return Err(malformed(path, "chunk extends past end of file"));
        }
        match chunk_id {
            b"fmt " => {
                if chunk_len < 16 {
                    return Err(malformed(path, "fmt chunk too short"));
                }
                let body = &bytes[body_start..body_end];
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().expect("2 bytes")),
                    u16::from_le_bytes(body[2..4].try_into().expect("2 bytes")),
                    u32::from_le_bytes(body[4..8].try_into().expect("4 bytes")),
                    u16::from_le_bytes(body[14..16].try_into().expect("2 bytes")),
                ));
            }
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {}
        }
        // Chunks are word aligned.
        pos = body_end + (chunk_len & 1);
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| malformed(path, "missing fmt chunk"))?;
    if format != 1 || channels != 1 || bits != 16 {
        return Err(WavError::Unsupported {
            path: path.display().to_string(),
            reason: format!("format {format}, {channels} channel(s), {bits} bits"),
        });
    }
    let data = data.ok_or_else(|| malformed(path, "missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(malformed(path, "odd data chunk length"));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes(c.try_into().expect("2 bytes")))
        .collect();
    Ok((rate, samples))
}

/// Read normalized PCM samples in [-1, 1] from `.wav` (16-bit LE mono) or
/// raw little-endian float32 (`.f32` / `.raw`) files. The sample rate is
/// only known for WAV input.
pub fn read_pcm(path: &Path) -> Result<(Option<u32>, Vec<f64>), WavError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("wav") => {
            let (rate, samples) = read_wav_mono16(path)?;
            Ok((
                Some(rate),
                samples.iter().map(|&s| s as f64 / 32768.0).collect(),
            ))
        }
        Some("f32") | Some("raw") => {
            let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
            if bytes.len() % 4 != 0 {
                return Err(malformed(path, "length is not a multiple of 4 bytes"));
            }
            let samples = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            Ok((None, samples))
        }
        _ => Err(WavError::UnknownExtension {
            path: path.display().to_string(),
        }),
    }
}
