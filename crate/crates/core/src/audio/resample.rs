use super::{AudioClip, AudioError, Result};

/// Zero crossings of the sinc on each side of the kernel centre.
const ZERO_CROSSINGS: usize = 24;
/// Passband edge as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.95;
const KAISER_BETA: f64 = 9.0;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Modified Bessel function of the first kind, order zero.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Polyphase Kaiser-windowed sinc filter bank, one branch per output phase.
struct FilterBank {
    half: usize,
    branches: Vec<Vec<f64>>,
}

impl FilterBank {
    fn new(up: usize, cutoff: f64) -> Self {
        let half = (ZERO_CROSSINGS as f64 / cutoff).ceil() as usize;
        let norm = bessel_i0(KAISER_BETA);
        let branches = (0..up)
            .map(|phase| {
                let frac = phase as f64 / up as f64;
                let mut taps: Vec<f64> = (0..2 * half)
                    .map(|j| {
                        let tau = j as f64 - (half as f64 - 1.0) - frac;
                        let u = tau / half as f64;
                        if u.abs() >= 1.0 {
                            return 0.0;
                        }
                        let window = bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / norm;
                        cutoff * sinc(cutoff * tau) * window
                    })
                    .collect();
                let total: f64 = taps.iter().sum();
                taps.iter_mut().for_each(|t| *t /= total);
                taps
            })
            .collect();
        FilterBank { half, branches }
    }
}

/// Band-limited rational-ratio resampling.
///
/// Output length is `ceil(len * target / source)`; samples outside the clip
/// are treated as silence.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(AudioError::InvalidRate);
    }
    let source_rate = clip.sample_rate();
    if source_rate == target_rate {
        return Ok(clip.clone());
    }
    let g = gcd(source_rate as u64, target_rate as u64);
    let up = (target_rate as u64 / g) as usize;
    let down = (source_rate as u64 / g) as usize;
    let cutoff = ROLLOFF * (target_rate as f64 / source_rate as f64).min(1.0);
    let bank = FilterBank::new(up, cutoff);

    let x = clip.samples();
    let out_len = (x.len() * up).div_ceil(down);
    let half = bank.half as isize;
    let out: Vec<f32> = (0..out_len)
        .map(|n| {
            let pos = n * down;
            let centre = (pos / up) as isize;
            let taps = &bank.branches[pos % up];
            let first = centre - (half - 1);
            let mut acc = 0.0f64;
            for (j, &t) in taps.iter().enumerate() {
                let idx = first + j as isize;
                if idx >= 0 && (idx as usize) < x.len() {
                    acc += t * x[idx as usize] as f64;
                }
            }
            acc as f32
        })
        .collect();
    AudioClip::new(out, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn sine(freq: f64, rate: u32, seconds: f64) -> AudioClip {
        let n = (rate as f64 * seconds) as usize;
        let samples = (0..n)
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect();
        AudioClip::new(samples, rate).unwrap()
    }

    fn dominant_bin_hz(clip: &AudioClip) -> f64 {
        let n = clip.len();
        let mut buf: Vec<Complex<f64>> = clip.samples().iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let (bin, _) = buf[..n / 2]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .unwrap();
        bin as f64 * clip.sample_rate() as f64 / n as f64
    }

    #[test]
    fn same_rate_is_bit_identical() {
        let clip = sine(440.0, 16_000, 0.1);
        assert_eq!(resample(&clip, 16_000).unwrap(), clip);
    }

    #[test]
    fn downsampled_sine_keeps_its_peak() {
        let clip = sine(100.0, 48_000, 1.0);
        let out = resample(&clip, 16_000).unwrap();
        assert!((out.len() as i64 - 16_000).abs() <= 1);
        assert_eq!(dominant_bin_hz(&out), 100.0);
    }

    #[test]
    fn upsampling_doubles_length() {
        for n in [1usize, 7, 800, 8001] {
            let clip = AudioClip::new(vec![0.1; n], 8_000).unwrap();
            let out = resample(&clip, 16_000).unwrap();
            assert!((out.len() as i64 - 2 * n as i64).abs() <= 1);
        }
    }

    #[test]
    fn round_trip_through_double_rate() {
        let rate = 16_000;
        let clip = sine(1_234.5, rate, 0.5);
        let back = resample(&resample(&clip, 2 * rate).unwrap(), rate).unwrap();
        assert_eq!(back.len(), clip.len());
        // the kernel needs full support, so the edges are excluded
        let margin = 2 * ZERO_CROSSINGS * 2;
        let worst = clip.samples()[margin..clip.len() - margin]
            .iter()
            .zip(&back.samples()[margin..clip.len() - margin])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 1e-3, "worst error {worst}");
    }

    #[test]
    fn zero_rate_is_rejected() {
        let clip = sine(100.0, 16_000, 0.01);
        assert!(matches!(resample(&clip, 0), Err(AudioError::InvalidRate)));
    }

    #[test]
    fn awkward_ratio_preserves_dc() {
        let clip = AudioClip::new(vec![0.25; 44_100], 44_100).unwrap();
        let out = resample(&clip, 16_000).unwrap();
        let mid = &out.samples()[1000..15_000];
        assert!(mid.iter().all(|&s| (s - 0.25).abs() < 1e-4));
    }
}
