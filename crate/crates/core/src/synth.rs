//! Synthetic speech-like sources, graded degradations and MOS-preserving
//! augmentations.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{normalize_samples, AudioClip, AudioError, SAMPLE_RATE, TARGET_DBFS};

/// Number of discrete quality levels per degradation kind.
pub const LEVELS: u8 = 10;
const HARMONICS: usize = 8;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("duration must be positive, got {0} s")]
    InvalidDuration(f64),
    #[error("level {0} out of range 0..=9")]
    InvalidLevel(u8),
    #[error("unknown degradation kind {0:?}")]
    UnknownKind(String),
    #[error("empty clip")]
    EmptyClip,
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Parameters of one synthetic talker, all drawn from the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceParams {
    /// Fundamental frequency in Hz, in [90, 250).
    pub f0: f64,
    pub harmonic_phases: [f64; HARMONICS],
    /// Slow pitch drift: relative depth and rate in Hz.
    pub vibrato: (f64, f64),
    /// Syllabic amplitude modulation rate in Hz, in [3, 6).
    pub am_rate: f64,
    pub am_phase: f64,
    /// Resonances as (center Hz, swing Hz, rate Hz, gain).
    pub formants: [(f64, f64, f64, f64); 2],
    pub noise_seed: u64,
}

impl SourceParams {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f0 = rng.random_range(90.0..250.0);
        let harmonic_phases = std::array::from_fn(|_| rng.random_range(0.0..TAU));
        let vibrato = (rng.random_range(0.01..0.05), rng.random_range(0.3..1.0));
        let am_rate = rng.random_range(3.0..6.0);
        let am_phase = rng.random_range(0.0..TAU);
        let formants = [
            (rng.random_range(400.0..700.0), 150.0, rng.random_range(0.5..1.5), 1.0),
            (rng.random_range(1100.0..1800.0), 300.0, rng.random_range(0.3..1.0), 0.7),
        ];
        SourceParams {
            f0,
            harmonic_phases,
            vibrato,
            am_rate,
            am_phase,
            formants,
            noise_seed: rng.random(),
        }
    }
}

/// Clean speech-like signal at 16 kHz and -25 dBFS.
///
/// An 8-harmonic complex (amplitudes 1/k) with slow pitch drift, gated by a
/// raised-cosine syllable envelope, passed through two slowly sweeping
/// resonators, plus envelope-following aspiration noise for energy above the
/// harmonic range.
pub fn synth_clean(seed: u64, dur_s: f64) -> Result<AudioClip> {
    if !(dur_s > 0.0 && dur_s.is_finite()) {
        return Err(SynthError::InvalidDuration(dur_s));
    }
    render(&SourceParams::from_seed(seed), dur_s)
}

pub fn render(params: &SourceParams, dur_s: f64) -> Result<AudioClip> {
    let fs = SAMPLE_RATE as f64;
    let n = (dur_s * fs).round() as usize;
    if n == 0 {
        return Err(SynthError::InvalidDuration(dur_s));
    }
    let mut phase = 0.0;
    let mut envelope = Vec::with_capacity(n);
    let mut voiced = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / fs;
        let f = params.f0 * (1.0 + params.vibrato.0 * (TAU * params.vibrato.1 * t).sin());
        phase += TAU * f / fs;
        let x: f64 = params
            .harmonic_phases
            .iter()
            .enumerate()
            .map(|(k, ph)| ((k + 1) as f64 * phase + ph).sin() / (k + 1) as f64)
            .sum();
        let env = 0.5 * (1.0 - (TAU * params.am_rate * t + params.am_phase).cos());
        envelope.push(env);
        voiced.push(x * env);
    }

    let mut shaped: Vec<f64> = voiced.iter().map(|v| 0.3 * v).collect();
    for &(center, swing, rate, gain) in &params.formants {
        let mut filter = Biquad::default();
        for (i, (&x, out)) in voiced.iter().zip(shaped.iter_mut()).enumerate() {
            if i % 64 == 0 {
                let fc = center + swing * (TAU * rate * i as f64 / fs).sin();
                filter.set(BiquadCoeffs::bandpass(fc, 5.0, fs));
            }
            *out += gain * filter.process(x);
        }
    }

    let level = rms64(&shaped) * 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(params.noise_seed);
    for (s, env) in shaped.iter_mut().zip(&envelope) {
        let g: f64 = rng.sample(StandardNormal);
        *s += level * env * g;
    }
    let samples: Vec<f32> = shaped.iter().map(|&v| v as f32).collect();
    let (samples, _) = normalize_samples(&samples, TARGET_DBFS)?;
    Ok(AudioClip::new(samples, SAMPLE_RATE)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    AdditiveNoise,
    Lowpass,
    Clip,
    Reverb,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 4] = [
        DegradationKind::AdditiveNoise,
        DegradationKind::Lowpass,
        DegradationKind::Clip,
        DegradationKind::Reverb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DegradationKind::AdditiveNoise => "additive_noise",
            DegradationKind::Lowpass => "lowpass",
            DegradationKind::Clip => "clip",
            DegradationKind::Reverb => "reverb",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DegradationKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self> {
        DegradationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| SynthError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    /// 0 (mildest) to 9 (most degraded).
    pub level: u8,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, level: u8, seed: u64) -> Result<Self> {
        if level >= LEVELS {
            return Err(SynthError::InvalidLevel(level));
        }
        Ok(DegradationSpec { kind, level, seed })
    }

    pub fn mos(&self) -> f64 {
        pseudo_mos(self.level)
    }

    /// Condition label shared by all clips with this kind and level.
    pub fn system_id(&self) -> String {
        format!("{}_L{}", self.kind, self.level)
    }
}

/// Label for a degradation level: 5 at level 0 down to 1 at level 9.
pub fn pseudo_mos(level: u8) -> f64 {
    5.0 - 4.0 * level as f64 / 9.0
}

pub fn snr_db(level: u8) -> f64 {
    40.0 - 4.0 * level as f64
}

/// Lowpass cutoff, geometric from 7600 Hz down to 800 Hz.
pub fn lowpass_cutoff(level: u8) -> f64 {
    7600.0 * (800.0f64 / 7600.0).powf(level as f64 / 9.0)
}

/// Clipping threshold as a fraction of the clip peak, 1.0 down to 0.1.
pub fn clip_fraction(level: u8) -> f64 {
    1.0 - 0.1 * level as f64
}

pub fn rt60(level: u8) -> f64 {
    1.2 * level as f64 / 9.0
}

/// Applies one degradation. The output keeps the input length and is not
/// level-normalized.
pub fn degrade(clip: &AudioClip, spec: &DegradationSpec) -> Result<AudioClip> {
    if spec.level >= LEVELS {
        return Err(SynthError::InvalidLevel(spec.level));
    }
    if clip.is_silent() {
        return Err(AudioError::SilentClip.into());
    }
    let x = clip.samples();
    let fs = clip.sample_rate() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let out: Vec<f32> = match spec.kind {
        DegradationKind::AdditiveNoise => {
            let noise = scaled_noise(x, snr_db(spec.level), &mut rng);
            x.iter().zip(&noise).map(|(&s, &n)| (s as f64 + n) as f32).collect()
        }
        DegradationKind::Lowpass => {
            let mut filter = Biquad::default();
            filter.set(BiquadCoeffs::lowpass(lowpass_cutoff(spec.level), fs));
            x.iter().map(|&s| filter.process(s as f64) as f32).collect()
        }
        DegradationKind::Clip => {
            let thr = clip.peak() as f64 * clip_fraction(spec.level);
            x.iter().map(|&s| (s as f64).clamp(-thr, thr) as f32).collect()
        }
        DegradationKind::Reverb => {
            let ir = reverb_ir(rt60(spec.level), fs, &mut rng);
            fft_convolve(x, &ir)
        }
    };
    Ok(AudioClip::new(out, clip.sample_rate())?)
}

/// White Gaussian noise scaled so that 10·log10(P_signal / P_noise) is
/// exactly `snr_db` for the drawn realization.
pub fn scaled_noise(signal: &[f32], snr_db: f64, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..signal.len()).map(|_| rng.sample(StandardNormal)).collect();
    let p_signal = mean_square(signal.iter().map(|&s| s as f64));
    let p_raw = mean_square(raw.iter().copied());
    let gain = (p_signal / (p_raw * 10f64.powf(snr_db / 10.0))).sqrt();
    raw.into_iter().map(|n| n * gain).collect()
}

/// Direct path plus a Gaussian tail decaying 60 dB over `rt60` seconds.
pub fn reverb_ir(rt60: f64, fs: f64, rng: &mut impl Rng) -> Vec<f64> {
    let len = (rt60 * fs).round() as usize;
    let mut ir = vec![1.0];
    for n in 1..len {
        let g: f64 = rng.sample(StandardNormal);
        ir.push(0.05 * g * (-6.908 * n as f64 / (rt60 * fs)).exp());
    }
    ir
}

/// Linear convolution truncated to the signal length.
fn fft_convolve(x: &[f32], h: &[f64]) -> Vec<f32> {
    if h.len() == 1 {
        return x.iter().map(|&s| (s as f64 * h[0]) as f32).collect();
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(n);
    let inverse = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex<f64>> = x.iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
    a.resize(n, Complex::default());
    let mut b: Vec<Complex<f64>> = h.iter().map(|&s| Complex::new(s, 0.0)).collect();
    b.resize(n, Complex::default());
    forward.process(&mut a);
    forward.process(&mut b);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v;
    }
    inverse.process(&mut a);
    a[..x.len()].iter().map(|c| (c.re / n as f64) as f32).collect()
}

/// A clip with its quality label and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct RatedClip {
    pub clip: AudioClip,
    /// In [1, 5]; clean clips carry exactly 5.
    pub mos: f64,
    pub system_id: String,
    pub utterance_id: String,
}

impl RatedClip {
    /// Augmented copy; the label is carried over unchanged.
    pub fn augmented(&self, kind: Augmentation, rng: &mut impl Rng) -> Result<RatedClip> {
        Ok(RatedClip {
            clip: augment(&self.clip, kind, rng)?,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Invert,
    Reverse,
    TimeStretch,
}

pub const STRETCH_RANGE: (f64, f64) = (0.9, 1.1);
const STRETCH_FRAME: usize = 512;
const STRETCH_HOP: usize = STRETCH_FRAME / 2;

/// Applies a label-preserving perturbation. Time stretching draws its factor
/// uniformly from [0.9, 1.1].
pub fn augment(clip: &AudioClip, kind: Augmentation, rng: &mut impl Rng) -> Result<AudioClip> {
    if clip.is_empty() {
        return Err(SynthError::EmptyClip);
    }
    let x = clip.samples();
    let out = match kind {
        Augmentation::Invert => x.iter().map(|&s| -s).collect(),
        Augmentation::Reverse => x.iter().rev().copied().collect(),
        Augmentation::TimeStretch => {
            let alpha = rng.random_range(STRETCH_RANGE.0..=STRETCH_RANGE.1);
            return time_stretch(clip, alpha);
        }
    };
    Ok(AudioClip::new(out, clip.sample_rate())?)
}

/// Overlap-add stretch to round(alpha·len) samples: Hann frames of 512,
/// synthesis hop 256, analysis hop 256/alpha.
pub fn time_stretch(clip: &AudioClip, alpha: f64) -> Result<AudioClip> {
    if clip.is_empty() {
        return Err(SynthError::EmptyClip);
    }
    let x = clip.samples();
    let out_len = ((x.len() as f64 * alpha).round() as usize).max(1);
    let window: Vec<f64> = (0..STRETCH_FRAME)
        .map(|i| 0.5 * (1.0 - (TAU * i as f64 / STRETCH_FRAME as f64).cos()))
        .collect();
    let half = STRETCH_FRAME as isize / 2;
    let mut acc = vec![0.0f64; out_len];
    let mut weight = vec![0.0f64; out_len];
    let analysis_hop = STRETCH_HOP as f64 / alpha;
    let mut m = 0usize;
    while m * STRETCH_HOP < out_len + STRETCH_HOP {
        let out_center = (m * STRETCH_HOP) as isize;
        let in_center = (m as f64 * analysis_hop).round() as isize;
        for (i, w) in window.iter().enumerate() {
            let o = out_center - half + i as isize;
            if o < 0 || o >= out_len as isize {
                continue;
            }
            let src = in_center - half + i as isize;
            let s = if src >= 0 && (src as usize) < x.len() { x[src as usize] as f64 } else { 0.0 };
            acc[o as usize] += w * s;
            weight[o as usize] += w;
        }
        m += 1;
    }
    let out = acc
        .iter()
        .zip(&weight)
        .map(|(&a, &w)| if w > 1e-6 { (a / w) as f32 } else { 0.0 })
        .collect();
    Ok(AudioClip::new(out, clip.sample_rate())?)
}

#[derive(Debug, Clone, Copy, Default)]
struct BiquadCoeffs {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl BiquadCoeffs {
    fn normalized(b: [f64; 3], a: [f64; 3]) -> Self {
        BiquadCoeffs {
            b0: b[0] / a[0],
            b1: b[1] / a[0],
            b2: b[2] / a[0],
            a1: a[1] / a[0],
            a2: a[2] / a[0],
        }
    }

    /// Butterworth (Q = 1/√2) lowpass.
    fn lowpass(fc: f64, fs: f64) -> Self {
        let w0 = TAU * fc / fs;
        let alpha = w0.sin() / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
        let c = w0.cos();
        Self::normalized(
            [(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0],
            [1.0 + alpha, -2.0 * c, 1.0 - alpha],
        )
    }

    /// Bandpass with unit peak gain.
    fn bandpass(fc: f64, q: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * fc / fs;
        let alpha = w0.sin() / (2.0 * q);
        Self::normalized([alpha, 0.0, -alpha], [1.0 + alpha, -2.0 * w0.cos(), 1.0 - alpha])
    }
}

/// Direct form I, so coefficients can change between samples.
#[derive(Debug, Clone, Copy, Default)]
struct Biquad {
    c: BiquadCoeffs,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl Biquad {
    fn set(&mut self, c: BiquadCoeffs) {
        self.c = c;
    }

    fn process(&mut self, x: f64) -> f64 {
        let c = &self.c;
        let y = c.b0 * x + c.b1 * self.x1 + c.b2 * self.x2 - c.a1 * self.y1 - c.a2 * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn mean_square(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn rms64(x: &[f64]) -> f64 {
    mean_square(x.iter().copied()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::EXCERPT_LEN;

    fn clean() -> AudioClip {
        synth_clean(11, 1.0).unwrap()
    }

    #[test]
    fn synth_is_deterministic_and_sized() {
        let a = synth_clean(5, 3.0).unwrap();
        assert_eq!(a, synth_clean(5, 3.0).unwrap());
        assert_eq!(a.len(), EXCERPT_LEN);
        assert!((20.0 * a.rms().log10() - TARGET_DBFS).abs() < 0.01);
    }

    #[test]
    fn seeds_give_different_fundamentals() {
        let (a, b) = (SourceParams::from_seed(1), SourceParams::from_seed(2));
        assert_ne!(a.f0, b.f0);
        for p in [a, b] {
            assert!((90.0..250.0).contains(&p.f0));
            assert!((3.0..6.0).contains(&p.am_rate));
        }
        assert_ne!(synth_clean(1, 0.5).unwrap(), synth_clean(2, 0.5).unwrap());
    }

    #[test]
    fn nonpositive_duration_is_rejected() {
        assert!(matches!(synth_clean(0, 0.0), Err(SynthError::InvalidDuration(_))));
        assert!(matches!(synth_clean(0, -1.0), Err(SynthError::InvalidDuration(_))));
    }

    #[test]
    fn pseudo_mos_endpoints() {
        assert_eq!(pseudo_mos(0), 5.0);
        assert_eq!(pseudo_mos(9), 1.0);
        assert!((pseudo_mos(5) - (5.0 - 20.0 / 9.0)).abs() < 1e-12);
        assert!((1..LEVELS).all(|l| pseudo_mos(l) < pseudo_mos(l - 1)));
    }

    #[test]
    fn degradation_ladders_hit_their_endpoints() {
        assert_eq!(snr_db(0), 40.0);
        assert_eq!(snr_db(5), 20.0);
        assert!((lowpass_cutoff(0) - 7600.0).abs() < 1e-9);
        assert!((lowpass_cutoff(9) - 800.0).abs() < 1e-9);
        assert_eq!(clip_fraction(0), 1.0);
        assert!((clip_fraction(9) - 0.1).abs() < 1e-12);
        assert_eq!(rt60(0), 0.0);
        assert!((rt60(9) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn clip_level_zero_is_a_no_op() {
        let x = clean();
        let y = degrade(&x, &DegradationSpec::new(DegradationKind::Clip, 0, 0).unwrap()).unwrap();
        for (a, b) in x.samples().iter().zip(y.samples()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn clip_bounds_the_peak() {
        let x = clean();
        let y = degrade(&x, &DegradationSpec::new(DegradationKind::Clip, 9, 0).unwrap()).unwrap();
        assert!(y.peak() <= x.peak() * 0.1 + 1e-6);
    }

    #[test]
    fn reverb_level_zero_is_identity() {
        let x = clean();
        let y = degrade(&x, &DegradationSpec::new(DegradationKind::Reverb, 0, 3).unwrap()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn fft_convolution_matches_direct_sum() {
        let x: Vec<f32> = (0..50).map(|i| ((i * 7 % 11) as f32 - 5.0) / 5.0).collect();
        let h = [1.0, 0.5, -0.25, 0.125];
        let y = fft_convolve(&x, &h);
        for n in 0..x.len() {
            let direct: f64 = (0..h.len()).filter(|&k| k <= n).map(|k| h[k] * x[n - k] as f64).sum();
            assert!((y[n] as f64 - direct).abs() < 1e-6, "{n}");
        }
    }

    fn band_energy(x: &[f32], lo: f64, hi: f64) -> f64 {
        let n = x.len();
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let bin = SAMPLE_RATE as f64 / n as f64;
        buf[..n / 2]
            .iter()
            .enumerate()
            .filter(|(k, _)| (lo..hi).contains(&(*k as f64 * bin)))
            .map(|(_, c)| c.norm_sqr())
            .sum()
    }

    #[test]
    fn lowpass_removes_more_high_band_energy_at_higher_levels() {
        let x = clean();
        let energies: Vec<f64> = (0..LEVELS)
            .map(|l| {
                let y = degrade(&x, &DegradationSpec::new(DegradationKind::Lowpass, l, 0).unwrap()).unwrap();
                band_energy(y.samples(), 1000.0, 8000.0)
            })
            .collect();
        assert!(energies.windows(2).all(|w| w[1] < w[0]), "{energies:?}");
    }

    #[test]
    fn silent_input_and_bad_level_are_errors() {
        let silent = AudioClip::new(vec![0.0; 100], SAMPLE_RATE).unwrap();
        let spec = DegradationSpec::new(DegradationKind::Lowpass, 2, 0).unwrap();
        assert!(matches!(degrade(&silent, &spec), Err(SynthError::Audio(AudioError::SilentClip))));
        assert!(matches!(
            DegradationSpec::new(DegradationKind::Clip, 10, 0),
            Err(SynthError::InvalidLevel(10))
        ));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in DegradationKind::ALL {
            assert_eq!(k.as_str().parse::<DegradationKind>().unwrap(), k);
        }
        assert!("hum".parse::<DegradationKind>().is_err());
    }

    #[test]
    fn invert_example() {
        let x = AudioClip::new(vec![0.1, -0.2], SAMPLE_RATE).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = augment(&x, Augmentation::Invert, &mut rng).unwrap();
        assert_eq!(y.samples(), &[-0.1, 0.2]);
    }

    #[test]
    fn unit_stretch_preserves_length_and_interior() {
        let x = clean();
        let y = time_stretch(&x, 1.0).unwrap();
        assert_eq!(y.len(), x.len());
        for (a, b) in x.samples().iter().zip(y.samples()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn stretch_length_tracks_factor() {
        let x = clean();
        for alpha in [0.9, 0.95, 1.05, 1.1] {
            let y = time_stretch(&x, alpha).unwrap();
            assert!((y.len() as f64 - alpha * x.len() as f64).abs() <= STRETCH_HOP as f64);
        }
    }
}
