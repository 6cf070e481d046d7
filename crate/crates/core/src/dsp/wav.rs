//! 16-bit PCM mono WAV with a canonical 44-byte RIFF header.
//!
//! Readers skip unknown chunks between `fmt ` and `data`, but anything other
//! than uncompressed 16-bit mono is refused with a typed error.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::Waveform;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("malformed WAV: {0}")]
    Malformed(String),
    #[error("unsupported WAV encoding: format tag {format_tag}, {bits} bits per sample")]
    UnsupportedEncoding { format_tag: u16, bits: u16 },
    #[error("unsupported channel count {0}; only mono is accepted")]
    ChannelCount(u16),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

const PCM: u16 = 1;

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Quantises to 16 bits (clipping to [-1, 1]) and encodes.
pub fn encode(w: &Waveform) -> Vec<u8> {
    let data_len = (w.len() * 2) as u32;
    let sr = w.sample_rate();
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sr.to_le_bytes());
    out.extend_from_slice(&(sr * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in w.samples() {
        out.extend_from_slice(&quantize(s).to_le_bytes());
    }
    out
}

pub fn quantize(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

pub fn decode(bytes: &[u8]) -> Result<Waveform, WavError> {
    if bytes.len() < 12 {
        return Err(WavError::Malformed("truncated RIFF header".into()));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(WavError::Malformed("missing RIFF/WAVE signature".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        if id == b"fmt " {
            if size < 16 || body + 16 > bytes.len() {
                return Err(WavError::Malformed("truncated fmt chunk".into()));
            }
            let format_tag = u16_at(bytes, body);
            let channels = u16_at(bytes, body + 2);
            let sample_rate = u32_at(bytes, body + 4);
            let bits = u16_at(bytes, body + 14);
            fmt = Some((format_tag, channels, sample_rate, bits));
        } else if id == b"data" {
            let (format_tag, channels, sample_rate, bits) =
                fmt.ok_or_else(|| WavError::Malformed("data chunk before fmt chunk".into()))?;
            if format_tag != PCM || bits != 16 {
                return Err(WavError::UnsupportedEncoding { format_tag, bits });
            }
            if channels != 1 {
                return Err(WavError::ChannelCount(channels));
            }
            if body + size > bytes.len() || size % 2 != 0 {
                return Err(WavError::Malformed("truncated data chunk".into()));
            }
            let samples = bytes[body..body + size]
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32767.0)
                .collect();
            return Waveform::new(samples, sample_rate)
                .map_err(|e| WavError::Malformed(e.to_string()));
        }
        pos = body + size + (size & 1);
    }
    Err(WavError::Malformed("no data chunk".into()))
}

pub fn save_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<(), WavError> {
    fs::write(path, encode(w))?;
    Ok(())
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform, WavError> {
    decode(&fs::read(path)?)
}
