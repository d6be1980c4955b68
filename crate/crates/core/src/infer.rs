//! MOS estimation against clean non-matching references, and pairwise
//! preference queries.

use nmrmos_autograd::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{analysis_windows, AudioClip, SAMPLE_RATE};
use crate::model::{Model, ModelError};

/// Shortest test clip accepted, in seconds.
pub const MIN_TEST_SECONDS: f64 = 0.1;
/// Label assumed for every clean reference.
pub const CLEAN_MOS: f64 = 5.0;

#[derive(Debug, Error)]
pub enum InferError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty reference set")]
    EmptyReferences,
    #[error("n must be positive")]
    ZeroN,
    #[error("requested {requested} references but only {available} are available")]
    TooManyReferences { requested: usize, available: usize },
    #[error("clip of {seconds:.3} s is shorter than {MIN_TEST_SECONDS} s")]
    TooShort { seconds: f64 },
    #[error("clip sample rate {0} Hz, expected {SAMPLE_RATE} Hz")]
    SampleRate(u32),
    #[error("{refs} reference labels for {count} references")]
    LabelCount { refs: usize, count: usize },
}

pub type Result<T> = std::result::Result<T, InferError>;

fn check_clip(clip: &AudioClip) -> Result<()> {
    if clip.sample_rate() != SAMPLE_RATE {
        return Err(InferError::SampleRate(clip.sample_rate()));
    }
    if clip.duration_seconds() < MIN_TEST_SECONDS {
        return Err(InferError::TooShort {
            seconds: clip.duration_seconds(),
        });
    }
    Ok(())
}

/// Projected frames of every 3 s window of a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFrames {
    pub windows: Vec<Tensor<f32>>,
}

impl ClipFrames {
    pub fn new(model: &Model<f32>, clip: &AudioClip) -> Result<Self> {
        check_clip(clip)?;
        let windows = analysis_windows(clip)
            .iter()
            .map(|w| model.frame_embeddings(w))
            .collect::<std::result::Result<_, _>>()?;
        Ok(ClipFrames { windows })
    }
}

/// Reference clips with their frame embeddings cached.
#[derive(Debug, Clone, PartialEq)]
pub struct NmrBank {
    refs: Vec<ClipFrames>,
}

impl NmrBank {
    pub fn new(model: &Model<f32>, clips: &[AudioClip]) -> Result<Self> {
        if clips.is_empty() {
            return Err(InferError::EmptyReferences);
        }
        let refs = clips
            .par_iter()
            .map(|c| ClipFrames::new(model, c))
            .collect::<Result<_>>()?;
        Ok(NmrBank { refs })
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosEstimate {
    pub mos: f64,
    pub mean_r: f64,
    pub std_r: f64,
    pub n: usize,
    pub per_nmr: Vec<f64>,
}

/// Summary of per-reference relative ratings: mos = clamp(5 - mean, 1, 5),
/// population standard deviation.
pub fn estimate_from_ratings(per_nmr: Vec<f64>) -> Result<MosEstimate> {
    if per_nmr.is_empty() {
        return Err(InferError::ZeroN);
    }
    let n = per_nmr.len();
    let mean_r = per_nmr.iter().sum::<f64>() / n as f64;
    let var = per_nmr.iter().map(|r| (r - mean_r).powi(2)).sum::<f64>() / n as f64;
    Ok(MosEstimate {
        mos: (CLEAN_MOS - mean_r).clamp(1.0, 5.0),
        mean_r,
        std_r: var.sqrt(),
        n,
        per_nmr,
    })
}

/// Runs both heads for each test window against the cyclically aligned
/// reference window, returning per-window (p first-is-cleaner, r).
fn window_outputs(model: &Model<f32>, test: &ClipFrames, reference: &ClipFrames) -> Result<Vec<(f64, f64)>> {
    test.windows
        .iter()
        .enumerate()
        .map(|(k, tw)| {
            let rw = &reference.windows[k % reference.windows.len()];
            let out = model.pair_heads(tw, rw)?;
            Ok((out.p[0], out.r))
        })
        .collect()
}

fn resolve_indices(bank: &NmrBank, indices: &[usize]) -> Result<()> {
    if indices.is_empty() {
        return Err(InferError::ZeroN);
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= bank.len()) {
        return Err(InferError::TooManyReferences {
            requested: bad + 1,
            available: bank.len(),
        });
    }
    Ok(())
}

/// Relative rating per selected reference, windows averaged first.
pub fn relative_ratings(model: &Model<f32>, test: &ClipFrames, bank: &NmrBank, indices: &[usize]) -> Result<Vec<f64>> {
    resolve_indices(bank, indices)?;
    indices
        .par_iter()
        .map(|&i| {
            let outs = window_outputs(model, test, &bank.refs[i])?;
            Ok(outs.iter().map(|o| o.1).sum::<f64>() / outs.len() as f64)
        })
        .collect()
}

pub fn predict_with(model: &Model<f32>, test: &ClipFrames, bank: &NmrBank, indices: &[usize]) -> Result<MosEstimate> {
    estimate_from_ratings(relative_ratings(model, test, bank, indices)?)
}

/// Estimate from the first `n` references of the bank.
pub fn predict_mos(model: &Model<f32>, test: &AudioClip, bank: &NmrBank, n: usize) -> Result<MosEstimate> {
    if bank.is_empty() {
        return Err(InferError::EmptyReferences);
    }
    if n == 0 {
        return Err(InferError::ZeroN);
    }
    if n > bank.len() {
        return Err(InferError::TooManyReferences {
            requested: n,
            available: bank.len(),
        });
    }
    let frames = ClipFrames::new(model, test)?;
    let indices: Vec<usize> = (0..n).collect();
    predict_with(model, &frames, bank, &indices)
}

/// Estimate against references of known, not necessarily clean, quality:
/// each reference contributes mos_ref + r when the model prefers the test
/// clip and mos_ref - r otherwise.
pub fn predict_mos_signed(
    model: &Model<f32>,
    test: &AudioClip,
    bank: &NmrBank,
    ref_mos: &[f64],
) -> Result<MosEstimate> {
    if ref_mos.len() != bank.len() {
        return Err(InferError::LabelCount {
            refs: ref_mos.len(),
            count: bank.len(),
        });
    }
    let frames = ClipFrames::new(model, test)?;
    let per_ref: Vec<f64> = (0..bank.len())
        .into_par_iter()
        .map(|i| {
            let outs = window_outputs(model, &frames, &bank.refs[i])?;
            let w = outs.len() as f64;
            let p = outs.iter().map(|o| o.0).sum::<f64>() / w;
            let r = outs.iter().map(|o| o.1).sum::<f64>() / w;
            Ok(if p >= 0.5 { ref_mos[i] + r } else { ref_mos[i] - r })
        })
        .collect::<Result<_>>()?;
    let n = per_ref.len();
    let mean = per_ref.iter().sum::<f64>() / n as f64;
    let std = (per_ref.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    Ok(MosEstimate {
        mos: mean.clamp(1.0, 5.0),
        mean_r: CLEAN_MOS - mean,
        std_r: std,
        n,
        per_nmr: per_ref,
    })
}

/// Quality embedding of a whole clip: per-window embeddings averaged.
pub fn clip_embedding(model: &Model<f32>, clip: &AudioClip) -> Result<Vec<f64>> {
    check_clip(clip)?;
    let windows = analysis_windows(clip);
    let mut acc: Vec<f64> = Vec::new();
    for w in &windows {
        let e = model.embed(w)?;
        acc.resize(e.len(), 0.0);
        acc.iter_mut().zip(&e).for_each(|(a, &v)| *a += v as f64);
    }
    acc.iter_mut().for_each(|a| *a /= windows.len() as f64);
    Ok(acc)
}

const PREFER_GRID: f64 = 8_589_934_592.0; // 2^33

/// Probability that `a` is cleaner than `b`, symmetrized over both input
/// orders and averaged over aligned windows. The result lies on a 2^-32
/// grid, so `prefer(a, b) + prefer(b, a) == 1` holds exactly.
pub fn prefer(model: &Model<f32>, a: &AudioClip, b: &AudioClip) -> Result<f64> {
    let fa = ClipFrames::new(model, a)?;
    let fb = ClipFrames::new(model, b)?;
    let count = fa.windows.len().max(fb.windows.len());
    let mut diff = 0.0;
    for k in 0..count {
        let wa = &fa.windows[k % fa.windows.len()];
        let wb = &fb.windows[k % fb.windows.len()];
        diff += model.pair_heads(wa, wb)?.p[0] - model.pair_heads(wb, wa)?.p[0];
    }
    let half = diff / count as f64 / 2.0;
    Ok(0.5 + (half * PREFER_GRID).round() / PREFER_GRID)
}
