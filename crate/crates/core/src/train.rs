//! Pair sampling, the two-task loss and the optimization loop.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use nmrmos_autograd::{AdamState, Graph, NnError, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{excerpt_samples, ingest_wav, model_input, AudioClip, AudioError, Pad, EXCERPT_LEN};
use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointError};
use crate::eval::{mse, spearman};
use crate::infer::{predict_with, ClipFrames, InferError, NmrBank};
use crate::manifest::{Manifest, ManifestError, Split};
use crate::model::{Model, ModelConfig, ModelError, PairVars};
use crate::synth::{Augmentation, RatedClip, SynthError};

/// Lower clamp applied to probabilities inside the log.
pub const LOG_EPS: f64 = 1e-12;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty {0} set")]
    EmptyDataset(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (pairs: {pairs}): {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        pairs: String,
        detail: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Audio {
        path: PathBuf,
        #[source]
        source: AudioError,
    },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Labeled set; only its train split is used for pairs, dev for selection.
    pub manifest: PathBuf,
    /// Clean set; defaults to the clean entries of the train split.
    pub clean_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub clean_fraction: f64,
    pub lambda_q: f64,
    pub seed: u64,
    /// Pairs per epoch; defaults to the labeled set size.
    pub pairs_per_epoch: Option<usize>,
    /// Clean references used for dev-split MOS estimates.
    pub dev_nmrs: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            manifest: PathBuf::from("corpus/manifest.jsonl"),
            clean_manifest: None,
            out_dir: PathBuf::from("run"),
            batch_size: 64,
            lr: 1e-4,
            epochs: 50,
            clean_fraction: 0.25,
            lambda_q: 1.0,
            seed: 0,
            pairs_per_epoch: None,
            dev_nmrs: 5,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lambda_q > 0.0 && self.lambda_q.is_finite()) {
            return bad("lambda_q must be positive");
        }
        if !(0.0..=1.0).contains(&self.clean_fraction) {
            return bad("clean_fraction must be in [0, 1]");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.pairs_per_epoch == Some(0) {
            return bad("pairs_per_epoch must be at least 1");
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Loads the clips of one split at 16 kHz, in manifest order.
pub fn load_split(manifest: &Manifest, split: Option<Split>, clean_only: bool) -> Result<Vec<RatedClip>> {
    let entries: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s) && (!clean_only || e.is_clean()))
        .collect();
    entries
        .par_iter()
        .map(|e| {
            let path = manifest.resolve(e);
            let clip = ingest_wav(&path).map_err(|source| TrainError::Audio { path, source })?;
            Ok(RatedClip {
                clip,
                mos: e.mos,
                system_id: e.system_id.clone(),
                utterance_id: e.utterance_id.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub x_i: Vec<f32>,
    pub x_j: Vec<f32>,
    /// [1, 0] when the first clip is strictly better rated, else [0, 1].
    pub y: [f64; 2],
    /// |MOS_i - MOS_j| of the unaugmented clips.
    pub s: f64,
    pub source_ids: (String, String),
}

pub fn pair_labels(mos_i: f64, mos_j: f64) -> ([f64; 2], f64) {
    let y = if mos_i > mos_j { [1.0, 0.0] } else { [0.0, 1.0] };
    (y, (mos_i - mos_j).abs())
}

const AUGMENTATIONS: [Option<Augmentation>; 4] = [
    None,
    Some(Augmentation::Invert),
    Some(Augmentation::Reverse),
    Some(Augmentation::TimeStretch),
];

fn draw_side<'a>(
    d_lab: &'a [RatedClip],
    d_clean: &'a [RatedClip],
    clean_fraction: f64,
    rng: &mut impl Rng,
) -> Result<(&'a RatedClip, Vec<f32>)> {
    let source = if rng.random_bool(clean_fraction) {
        &d_clean[rng.random_range(0..d_clean.len())]
    } else {
        &d_lab[rng.random_range(0..d_lab.len())]
    };
    let augmented = match AUGMENTATIONS[rng.random_range(0..AUGMENTATIONS.len())] {
        Some(kind) => source.augmented(kind, rng)?.clip,
        None => source.clip.clone(),
    };
    let samples = augmented.samples();
    let start = if samples.len() > EXCERPT_LEN {
        rng.random_range(0..=samples.len() - EXCERPT_LEN)
    } else {
        0
    };
    let crop = excerpt_samples(samples, start, EXCERPT_LEN, Pad::Tile);
    Ok((source, model_input(&crop)))
}

/// Draws two clips, each from the clean set with probability
/// `clean_fraction`, augments and crops them, and labels the pair from the
/// original ratings.
pub fn sample_pair(
    d_lab: &[RatedClip],
    d_clean: &[RatedClip],
    rng: &mut impl Rng,
    clean_fraction: f64,
) -> Result<TrainingPair> {
    if d_lab.is_empty() {
        return Err(TrainError::EmptyDataset("labeled"));
    }
    if d_clean.is_empty() {
        return Err(TrainError::EmptyDataset("clean"));
    }
    let (ci, x_i) = draw_side(d_lab, d_clean, clean_fraction, rng)?;
    let (cj, x_j) = draw_side(d_lab, d_clean, clean_fraction, rng)?;
    let (y, s) = pair_labels(ci.mos, cj.mos);
    Ok(TrainingPair {
        x_i,
        x_j,
        y,
        s,
        source_ids: (ci.utterance_id.clone(), cj.utterance_id.clone()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub preference: f64,
    pub relative: f64,
    /// A labeled probability fell below the log clamp.
    pub clamped: bool,
}

/// -Σ y·log(max(p, 1e-12)) + lambda_q·|r - s|.
pub fn mtl_loss(p: [f64; 2], r: f64, y: [f64; 2], s: f64, lambda_q: f64) -> LossValue {
    let mut clamped = false;
    let mut preference = 0.0;
    for k in 0..2 {
        if y[k] != 0.0 {
            clamped |= p[k] < LOG_EPS;
            preference -= y[k] * p[k].max(LOG_EPS).ln();
        }
    }
    let relative = (r - s).abs();
    LossValue {
        total: preference + lambda_q * relative,
        preference,
        relative,
        clamped,
    }
}

pub fn mtl_loss_graph<F: nmrmos_autograd::Real>(
    g: &mut Graph<F>,
    out: &PairVars,
    y: [f64; 2],
    s: f64,
    lambda_q: f64,
) -> Result<Var> {
    let target = Tensor::new(&[2], vec![F::lit(y[0]), F::lit(y[1])])?;
    let preference = g.nll_clamped(out.p, &target, F::lit(LOG_EPS))?;
    let s = g.constant(Tensor::new(&[1], vec![F::lit(s)])?);
    let relative = g.l1_loss(out.r, s)?;
    let relative = g.scale(relative, F::lit(lambda_q))?;
    Ok(g.add(preference, relative)?)
}

/// Loss and parameter gradients for one pair.
pub fn pair_gradients(model: &Model<f32>, pair: &TrainingPair, lambda_q: f64) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let out = model.pair_graph(&mut g, &bound, &pair.x_i, &pair.x_j)?;
    let loss = mtl_loss_graph(&mut g, &out, pair.y, pair.s, lambda_q)?;
    g.backward(loss)?;
    let value = g.value(loss).data()[0] as f64;
    Ok((value, bound.vars().iter().map(|&v| g.grad(v)).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_spearman: Option<f64>,
    pub dev_mse: Option<f64>,
}

/// Clips and references for one run.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub lab: Vec<RatedClip>,
    pub clean: Vec<RatedClip>,
    pub dev: Vec<RatedClip>,
    pub dev_refs: Vec<AudioClip>,
}

impl TrainData {
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let manifest = Manifest::load(&cfg.manifest)?;
        let lab = load_split(&manifest, Some(Split::Train), false)?;
        let clean = match &cfg.clean_manifest {
            Some(path) => load_split(&Manifest::load(path)?, None, false)?,
            None => load_split(&manifest, Some(Split::Train), true)?,
        };
        let dev = load_split(&manifest, Some(Split::Dev), false)?;
        let dev_refs = clean.iter().take(cfg.dev_nmrs).map(|c| c.clip.clone()).collect();
        Ok(TrainData {
            lab,
            clean,
            dev,
            dev_refs,
        })
    }
}

/// Utterance-level (Spearman, MSE) of dev MOS estimates, or `None` when
/// there is no dev set or the estimates are constant.
pub fn dev_metrics(model: &Model<f32>, dev: &[RatedClip], refs: &[AudioClip]) -> Result<Option<(f64, f64)>> {
    if dev.len() < 2 || refs.is_empty() {
        return Ok(None);
    }
    let bank = NmrBank::new(model, refs)?;
    let indices: Vec<usize> = (0..bank.len()).collect();
    let pred = dev
        .iter()
        .map(|c| {
            let frames = ClipFrames::new(model, &c.clip)?;
            Ok(predict_with(model, &frames, &bank, &indices)?.mos)
        })
        .collect::<Result<Vec<f64>>>()?;
    let target: Vec<f64> = dev.iter().map(|c| c.mos).collect();
    match (spearman(&pred, &target), mse(&pred, &target)) {
        (Ok(sc), Ok(m)) => Ok(Some((sc, m))),
        _ => Ok(None),
    }
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub best: Model<f32>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn describe_batch(pairs: &[TrainingPair]) -> String {
    let ids: Vec<String> = pairs.iter().map(|p| format!("{}|{}", p.source_ids.0, p.source_ids.1)).collect();
    ids.join(", ")
}

/// Optimizes a fresh model. Pairs are drawn sequentially from one seeded
/// stream; per-pair gradients may run in parallel but are summed in pair
/// order, so results do not depend on the thread count.
pub fn train(cfg: &TrainConfig, data: &TrainData, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.lab.is_empty() {
        return Err(TrainError::EmptyDataset("labeled"));
    }
    if data.clean.is_empty() {
        return Err(TrainError::EmptyDataset("clean"));
    }
    let mut model = Model::<f32>::new(cfg.model.clone())?;
    let mut adam = AdamState::new(model.params(), cfg.lr as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pairs_per_epoch = cfg.pairs_per_epoch.unwrap_or(data.lab.len());
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Model<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut remaining = pairs_per_epoch;
        let mut batch_losses = Vec::new();
        let mut batch = 0;
        while remaining > 0 {
            batch += 1;
            let size = remaining.min(cfg.batch_size);
            remaining -= size;
            let pairs = (0..size)
                .map(|_| sample_pair(&data.lab, &data.clean, &mut rng, cfg.clean_fraction))
                .collect::<Result<Vec<_>>>()?;
            let results: Vec<Result<(f64, Vec<Tensor<f32>>)>> =
                pairs.par_iter().map(|p| pair_gradients(&model, p, cfg.lambda_q)).collect();
            let mut total = 0.0;
            let mut grads: Vec<Tensor<f32>> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
            for r in results {
                let (loss, g) = r.map_err(|e| TrainError::NonFinite {
                    epoch,
                    batch,
                    pairs: describe_batch(&pairs),
                    detail: e.to_string(),
                })?;
                total += loss;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += b;
                    }
                }
            }
            let mean_loss = total / size as f64;
            if !mean_loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch,
                    pairs: describe_batch(&pairs),
                    detail: format!("batch loss {mean_loss}"),
                });
            }
            let scale = 1.0 / size as f32;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            adam.step(model.params_mut(), &grads)?;
            batch_losses.push(mean_loss);
        }
        let train_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        let dev = dev_metrics(&model, &data.dev, &data.dev_refs)?;
        let entry = EpochLog {
            epoch,
            train_loss,
            dev_spearman: dev.map(|d| d.0),
            dev_mse: dev.map(|d| d.1),
        };
        if let Some(score) = entry.dev_spearman {
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, epoch, model.clone()));
            }
        }
        on_epoch(&entry);
        log.push(entry);
    }
    let (_, best_epoch, best_model) = best.unwrap_or_else(|| (0.0, cfg.epochs, model.clone()));
    Ok(TrainOutcome {
        model,
        best: best_model,
        best_epoch,
        log,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads data, trains, and writes the log plus best-dev and final
/// checkpoints under `cfg.out_dir`.
pub fn run_training(cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = TrainData::load(cfg)?;
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let log_path = cfg.out_dir.join(TRAIN_LOG);
    let mut log_file = File::create(&log_path).map_err(io_err(&log_path))?;
    let mut write_error = None;
    let outcome = train(cfg, &data, |entry| {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        if let Err(e) = writeln!(log_file, "{line}") {
            write_error.get_or_insert(e);
        }
        on_epoch(entry);
    })?;
    if let Some(e) = write_error {
        return Err(io_err(&log_path)(e));
    }
    let meta = |epoch: usize| {
        let entry = &outcome.log[epoch - 1];
        serde_json::json!({
            "epoch": epoch,
            "seed": cfg.seed,
            "train_loss": entry.train_loss,
            "dev_spearman": entry.dev_spearman,
        })
    };
    save_checkpoint(
        cfg.out_dir.join(BEST_CHECKPOINT),
        &Checkpoint::from_model(&outcome.best, meta(outcome.best_epoch)),
    )?;
    save_checkpoint(
        cfg.out_dir.join(FINAL_CHECKPOINT),
        &Checkpoint::from_model(&outcome.model, meta(cfg.epochs)),
    )?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;

    #[test]
    fn loss_examples() {
        let l = mtl_loss([1.0, 0.0], 2.0, [1.0, 0.0], 2.0, 1.0);
        assert!(l.total.abs() < 1e-6 && !l.clamped);
        let l = mtl_loss([0.5, 0.5], 2.0, [1.0, 0.0], 2.0, 1.0);
        assert!((l.total - std::f64::consts::LN_2).abs() < 1e-6);
        let l = mtl_loss([0.5, 0.5], 1.5, [0.0, 1.0], 2.5, 2.0);
        assert!((l.total - (std::f64::consts::LN_2 + 2.0)).abs() < 1e-6);
        let l = mtl_loss([1.0, 0.0], 0.0, [0.0, 1.0], 0.0, 1.0);
        assert!(l.clamped && (l.total + LOG_EPS.ln()).abs() < 1e-9);
    }

    #[test]
    fn labels_follow_the_otherwise_branch_on_ties() {
        assert_eq!(pair_labels(4.2, 3.0).0, [1.0, 0.0]);
        assert!((pair_labels(4.2, 3.0).1 - 1.2).abs() < 1e-12);
        assert_eq!(pair_labels(5.0, 5.0), ([0.0, 1.0], 0.0));
        assert_eq!(pair_labels(1.0, 3.0), ([0.0, 1.0], 2.0));
    }

    fn rated(id: &str, mos: f64, len: usize) -> RatedClip {
        let samples = (0..len).map(|i| ((i as f32) * 0.05).sin() * 0.1).collect();
        RatedClip {
            clip: AudioClip::new(samples, SAMPLE_RATE).unwrap(),
            mos,
            system_id: if mos == 5.0 { "clean".into() } else { "x".into() },
            utterance_id: id.into(),
        }
    }

    #[test]
    fn clean_only_sampling_gives_zero_targets() {
        let lab = vec![rated("a", 2.0, 50_000), rated("b", 3.0, 40_000)];
        let clean = vec![rated("c", 5.0, 30_000)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let p = sample_pair(&lab, &clean, &mut rng, 1.0).unwrap();
            assert_eq!((p.y, p.s), ([0.0, 1.0], 0.0));
            assert_eq!(p.x_i.len(), EXCERPT_LEN);
            assert_eq!(p.x_j.len(), EXCERPT_LEN);
        }
        assert!(matches!(
            sample_pair(&[], &clean, &mut rng, 0.5),
            Err(TrainError::EmptyDataset("labeled"))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for cfg in [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lambda_q: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                clean_fraction: 1.5,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))));
        }
    }

    #[test]
    fn zero_lambda_leaves_relative_head_without_gradient() {
        let model = Model::<f32>::new(ModelConfig::reduced(0)).unwrap();
        let lab = vec![rated("a", 2.0, EXCERPT_LEN), rated("b", 4.0, EXCERPT_LEN)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = sample_pair(&lab, &lab, &mut rng, 0.0).unwrap();
        let (_, grads) = pair_gradients(&model, &pair, 0.0).unwrap();
        for (name, g) in model.param_names().iter().zip(&grads) {
            let zero = g.data().iter().all(|&v| v == 0.0);
            if name.starts_with("relative.") {
                assert!(zero, "{name}");
            }
            if name.starts_with("preference.out") {
                assert!(!zero, "{name}");
            }
        }
    }
}
