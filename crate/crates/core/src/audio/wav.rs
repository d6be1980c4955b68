use std::path::Path;

use super::{resample, AudioClip, AudioError, Result, SAMPLE_RATE};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

struct Format {
    tag: u16,
    channels: u16,
    sample_rate: u32,
    block_align: u16,
    bits: u16,
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn parse_fmt(body: &[u8]) -> Result<Format> {
    if body.len() < 16 {
        return Err(AudioError::TruncatedHeader("fmt chunk"));
    }
    let mut tag = u16_at(body, 0);
    let channels = u16_at(body, 2);
    let sample_rate = u32_at(body, 4);
    let block_align = u16_at(body, 12);
    let bits = u16_at(body, 14);
    if tag == FORMAT_EXTENSIBLE {
        if body.len() < 26 {
            return Err(AudioError::TruncatedHeader("fmt extension"));
        }
        // first two bytes of the sub-format GUID carry the actual format tag
        tag = u16_at(body, 24);
    }
    if channels == 0 || channels > 2 {
        return Err(AudioError::Unsupported {
            field: "channel count",
            value: channels as u32,
        });
    }
    if sample_rate == 0 {
        return Err(AudioError::Malformed {
            field: "sample rate",
            detail: "zero".into(),
        });
    }
    let supported = match tag {
        FORMAT_PCM => matches!(bits, 8 | 16 | 24 | 32),
        FORMAT_FLOAT => bits == 32,
        _ => {
            return Err(AudioError::Unsupported {
                field: "format tag",
                value: tag as u32,
            })
        }
    };
    if !supported {
        return Err(AudioError::Unsupported {
            field: "bits per sample",
            value: bits as u32,
        });
    }
    let frame = channels as usize * (bits as usize / 8);
    if block_align as usize != frame {
        return Err(AudioError::Malformed {
            field: "block align",
            detail: format!("{block_align}, expected {frame}"),
        });
    }
    Ok(Format {
        tag,
        channels,
        sample_rate,
        block_align,
        bits,
    })
}

fn decode_sample(fmt: &Format, b: &[u8]) -> f32 {
    match (fmt.tag, fmt.bits) {
        (FORMAT_PCM, 8) => (b[0] as f32 - 128.0) / 128.0,
        (FORMAT_PCM, 16) => i16::from_le_bytes([b[0], b[1]]) as f32 / 32_768.0,
        (FORMAT_PCM, 24) => {
            let v = i32::from_le_bytes([0, b[0], b[1], b[2]]) >> 8;
            v as f32 / 8_388_608.0
        }
        (FORMAT_PCM, 32) => (i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64 / 2_147_483_648.0) as f32,
        _ => f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
    }
}

/// Decodes a RIFF/WAVE byte stream to a mono clip at its native rate.
///
/// Stereo input is averaged to mono. Integer PCM is scaled to [-1, 1).
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 {
        return Err(AudioError::TruncatedHeader("RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(AudioError::Malformed {
            field: "RIFF magic",
            detail: format!("{:?}", String::from_utf8_lossy(&bytes[0..4])),
        });
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(AudioError::Malformed {
            field: "WAVE tag",
            detail: format!("{:?}", String::from_utf8_lossy(&bytes[8..12])),
        });
    }

    let mut pos = 12;
    let mut fmt = None;
    let mut data = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let available = bytes.len() - body_start;
        match id {
            b"fmt " => {
                if size > available {
                    return Err(AudioError::TruncatedHeader("fmt chunk"));
                }
                fmt = Some(parse_fmt(&bytes[body_start..body_start + size])?);
            }
            b"data" => {
                if size > available {
                    return Err(AudioError::TruncatedData("data chunk"));
                }
                data = Some(&bytes[body_start..body_start + size]);
                break;
            }
            _ => {}
        }
        pos = body_start.saturating_add(size).saturating_add(size & 1);
    }

    let fmt = fmt.ok_or(AudioError::TruncatedHeader("missing fmt chunk"))?;
    let data = data.ok_or(AudioError::TruncatedHeader("missing data chunk"))?;
    let frame = fmt.block_align as usize;
    if data.len() % frame != 0 {
        return Err(AudioError::TruncatedData("partial sample frame"));
    }
    let width = fmt.bits as usize / 8;
    let channels = fmt.channels as usize;
    let samples: Vec<f32> = data
        .chunks_exact(frame)
        .map(|f| {
            let total: f32 = f.chunks_exact(width).map(|s| decode_sample(&fmt, s)).sum();
            total / channels as f32
        })
        .collect();
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(AudioError::NonFinite);
    }
    AudioClip::new(samples, fmt.sample_rate)
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_wav(&bytes)
}

/// Loads a WAV file and converts it to the internal 16 kHz rate.
pub fn ingest_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let clip = load_wav(path)?;
    resample(&clip, SAMPLE_RATE)
}

/// 16-bit little-endian mono PCM.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate().to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate() * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in clip.samples() {
        let v = (s as f64 * 32_768.0).round().clamp(-32_768.0, 32_767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_wav(clip)).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })
}
