//! Mono audio clips, WAV I/O, resampling, excerpting and level normalization.

mod resample;
mod wav;

pub use resample::resample;
pub use wav::{decode_wav, encode_wav, ingest_wav, load_wav, write_wav};

use thiserror::Error;

/// Internal sample rate of every model-facing clip.
pub const SAMPLE_RATE: u32 = 16_000;
/// Model input length in seconds.
pub const EXCERPT_SECONDS: f64 = 3.0;
/// Model input length in samples at [`SAMPLE_RATE`].
pub const EXCERPT_LEN: usize = 48_000;
/// Level every model input is normalized to.
pub const TARGET_DBFS: f64 = -25.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("truncated header: {0}")]
    TruncatedHeader(&'static str),
    #[error("truncated data: {0}")]
    TruncatedData(&'static str),
    #[error("malformed {field}: {detail}")]
    Malformed { field: &'static str, detail: String },
    #[error("unsupported {field}: {value}")]
    Unsupported { field: &'static str, value: u32 },
    #[error("sample rate must be positive")]
    InvalidRate,
    #[error("clip contains non-finite samples")]
    NonFinite,
    #[error("silent clip")]
    SilentClip,
    #[error("empty clip")]
    EmptyClip,
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// Mono waveform at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidRate);
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite);
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    pub fn is_silent(&self) -> bool {
        self.samples.iter().all(|&s| s == 0.0)
    }

    /// Same rate, new samples; samples must be finite.
    pub(crate) fn with_samples(&self, samples: Vec<f32>) -> Self {
        debug_assert!(samples.iter().all(|s| s.is_finite()));
        AudioClip {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

pub fn rms(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let power: f64 = samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
    (power / samples.len() as f64).sqrt()
}

pub fn dbfs_to_amplitude(dbfs: f64) -> f64 {
    10f64.powf(dbfs / 20.0)
}

/// How [`excerpt`] fills samples past the end of the source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    /// Wrap around to the start of the clip.
    Tile,
    /// Silence.
    Zero,
}

/// Cuts `round(dur_s * rate)` samples starting at `start_s`, padding any
/// shortfall per `pad`.
pub fn excerpt(clip: &AudioClip, start_s: f64, dur_s: f64, pad: Pad) -> AudioClip {
    let rate = clip.sample_rate as f64;
    let n = (dur_s.max(0.0) * rate).round() as usize;
    let start = (start_s.max(0.0) * rate).round() as usize;
    clip.with_samples(excerpt_samples(&clip.samples, start, n, pad))
}

pub(crate) fn excerpt_samples(src: &[f32], start: usize, n: usize, pad: Pad) -> Vec<f32> {
    if src.is_empty() {
        return vec![0.0; n];
    }
    match pad {
        Pad::Zero => (start..start + n).map(|i| src.get(i).copied().unwrap_or(0.0)).collect(),
        Pad::Tile => (start..start + n).map(|i| src[i % src.len()]).collect(),
    }
}

/// Result of [`rms_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub clip: AudioClip,
    /// Scaling pushed some samples past full scale and they were clamped.
    pub clamped: bool,
}

/// Scales the clip to the RMS level `target_dbfs`, then clamps to [-1, 1].
pub fn rms_normalize(clip: &AudioClip, target_dbfs: f64) -> Result<Normalized> {
    let (samples, clamped) = normalize_samples(&clip.samples, target_dbfs)?;
    Ok(Normalized {
        clip: clip.with_samples(samples),
        clamped,
    })
}

pub(crate) fn normalize_samples(samples: &[f32], target_dbfs: f64) -> Result<(Vec<f32>, bool)> {
    let current = rms(samples);
    if current == 0.0 {
        return Err(AudioError::SilentClip);
    }
    let gain = dbfs_to_amplitude(target_dbfs) / current;
    let mut clamped = false;
    let out = samples
        .iter()
        .map(|&s| {
            let v = s as f64 * gain;
            if v.abs() > 1.0 {
                clamped = true;
                v.clamp(-1.0, 1.0) as f32
            } else {
                v as f32
            }
        })
        .collect();
    Ok((out, clamped))
}

/// Canonical model input: level-normalized, silent input passed through.
pub fn model_input(samples: &[f32]) -> Vec<f32> {
    match normalize_samples(samples, TARGET_DBFS) {
        Ok((out, _)) => out,
        Err(_) => samples.to_vec(),
    }
}

/// Non-overlapping 3 s windows covering the clip; the tail window is filled
/// by tiling from the clip start. Every window is level-normalized.
pub fn analysis_windows(clip: &AudioClip) -> Vec<Vec<f32>> {
    let count = clip.len().div_ceil(EXCERPT_LEN).max(1);
    (0..count)
        .map(|w| model_input(&excerpt_samples(&clip.samples, w * EXCERPT_LEN, EXCERPT_LEN, Pad::Tile)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(seconds: usize) -> AudioClip {
        let n = seconds * SAMPLE_RATE as usize;
        AudioClip::new((0..n).map(|i| (i as f32 / n as f32) - 0.5).collect(), SAMPLE_RATE).unwrap()
    }

    #[test]
    fn excerpt_slices_the_source() {
        let clip = ramp(5);
        let out = excerpt(&clip, 1.0, 3.0, Pad::Zero);
        assert_eq!(out.samples(), &clip.samples()[16_000..64_000]);
    }

    #[test]
    fn excerpt_tiles_from_start() {
        let clip = ramp(2);
        let out = excerpt(&clip, 0.0, 3.0, Pad::Tile);
        assert_eq!(out.len(), 48_000);
        assert_eq!(&out.samples()[32_000..], &clip.samples()[..16_000]);
    }

    #[test]
    fn excerpt_zero_pads() {
        let clip = ramp(2);
        let out = excerpt(&clip, 0.0, 3.0, Pad::Zero);
        assert!(out.samples()[32_000..].iter().all(|&s| s == 0.0));
        assert_eq!(&out.samples()[..32_000], clip.samples());
    }

    #[test]
    fn excerpt_of_exact_length_is_identity() {
        let clip = ramp(3);
        assert_eq!(excerpt(&clip, 0.0, 3.0, Pad::Tile), clip);
        assert_eq!(excerpt(&clip, 0.0, 3.0, Pad::Zero), clip);
    }

    #[test]
    fn normalize_at_target_is_unchanged() {
        // "-6.02 dBFS" is the rounded form of 20*log10(0.5)
        let clip = AudioClip::new(vec![0.5; 100], SAMPLE_RATE).unwrap();
        let out = rms_normalize(&clip, 20.0 * 0.5f64.log10()).unwrap();
        assert!(out.clip.samples().iter().all(|&s| (s - 0.5).abs() < 1e-6));
        assert!(!out.clamped);
    }

    #[test]
    fn normalize_doubles_quarter_level() {
        let clip = AudioClip::new(vec![0.25; 100], SAMPLE_RATE).unwrap();
        let out = rms_normalize(&clip, 20.0 * 0.5f64.log10()).unwrap();
        assert!(out.clip.samples().iter().all(|&s| (s - 0.5).abs() < 1e-6));
    }

    #[test]
    fn normalize_is_idempotent() {
        let clip = ramp(1);
        let once = rms_normalize(&clip, -25.0).unwrap().clip;
        let twice = rms_normalize(&once, -25.0).unwrap().clip;
        for (a, b) in once.samples().iter().zip(twice.samples()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-6));
        }
        let target = dbfs_to_amplitude(-25.0);
        assert!((once.rms() - target).abs() / target < 1e-6);
    }

    #[test]
    fn normalize_flags_clamping() {
        let mut samples = vec![0.001f32; 1000];
        samples[0] = 0.9;
        let clip = AudioClip::new(samples, SAMPLE_RATE).unwrap();
        let out = rms_normalize(&clip, -3.0).unwrap();
        assert!(out.clamped);
        assert!(out.clip.peak() <= 1.0);
    }

    #[test]
    fn silent_clip_is_rejected() {
        let clip = AudioClip::new(vec![0.0; 10], SAMPLE_RATE).unwrap();
        assert!(matches!(rms_normalize(&clip, -25.0), Err(AudioError::SilentClip)));
    }

    #[test]
    fn windows_cover_clip_with_tiled_tail() {
        let clip = ramp(4);
        let windows = analysis_windows(&clip);
        assert_eq!(windows.len(), 2);
        assert!(windows.iter().all(|w| w.len() == EXCERPT_LEN));
        let short = AudioClip::new(vec![0.1; 1600], SAMPLE_RATE).unwrap();
        assert_eq!(analysis_windows(&short).len(), 1);
    }

    #[test]
    fn invalid_clips_are_rejected() {
        assert!(matches!(AudioClip::new(vec![0.0], 0), Err(AudioError::InvalidRate)));
        assert!(matches!(AudioClip::new(vec![f32::NAN], 16_000), Err(AudioError::NonFinite)));
    }
}
