use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nmrmos::audio::{ingest_wav, AudioClip};
use nmrmos::checkpoint::load_model;
use nmrmos::corpus::{gen_corpus as generate, level_of_system, CorpusConfig};
use nmrmos::eval::{evaluate_both, pca2, retrieval_mp};
use nmrmos::infer::{clip_embedding, predict_mos, predict_mos_signed, NmrBank, CLEAN_MOS};
use nmrmos::manifest::{Manifest, Split};
use nmrmos::model::{Model, ModelConfig};
use nmrmos::predictions::{parse_predictions, Prediction};
use nmrmos::synth::DegradationKind;
use nmrmos::train::{load_split, run_training, TrainConfig};

use crate::settings::Settings;

/// Default number of references when `predict.n` is unset.
pub const DEFAULT_NMRS: usize = 100;
/// Parameter window of the default model layout.
pub const PARAM_WINDOW: (usize, usize) = (100_000, 140_000);

/// Writes to a file, or to stdout for `-`.
fn emit(target: &Path, text: &str) -> Result<()> {
    if target.as_os_str() == "-" {
        let mut out = std::io::stdout().lock();
        out.write_all(text.as_bytes())?;
        out.flush()?;
        return Ok(());
    }
    if let Some(parent) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(target, text).with_context(|| format!("writing {}", target.display()))
}

pub fn gen_corpus(s: &Settings) -> Result<()> {
    let kinds = s
        .list::<String>("corpus.kinds")?
        .iter()
        .map(|k| k.parse::<DegradationKind>())
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = CorpusConfig {
        out_dir: s.path("corpus.out_dir")?,
        seed: s.get("seed")?,
        sources: s.get("corpus.sources")?,
        kinds,
        duration_s: s.get("corpus.duration_s")?,
        nmr_count: s.get("corpus.nmr_count")?,
        train_fraction: s.get("corpus.train_fraction")?,
        dev_fraction: s.get("corpus.dev_fraction")?,
    };
    let corpus = generate(&cfg).with_context(|| format!("generating corpus in {}", cfg.out_dir.display()))?;
    let mut per_split: BTreeMap<&str, usize> = BTreeMap::new();
    let mut per_system: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &corpus.entries {
        *per_split.entry(e.split.as_str()).or_default() += 1;
        *per_system.entry(&e.system_id).or_default() += 1;
    }
    let mut text = format!(
        "wrote {} manifest entries and {} references to {}\n",
        corpus.entries.len(),
        corpus.nmr_paths.len(),
        cfg.out_dir.display()
    );
    for (split, count) in per_split {
        text += &format!("split {split}: {count}\n");
    }
    for (system, count) in per_system {
        text += &format!("system {system}: {count}\n");
    }
    emit(Path::new("-"), &text)
}

fn model_config(s: &Settings) -> Result<ModelConfig> {
    let base = ModelConfig::default();
    Ok(ModelConfig {
        conv_channels: s.list("model.conv_channels")?,
        kernel_sizes: s.list("model.kernel_sizes")?,
        strides: s.list("model.strides")?,
        head_hidden: s.get("model.head_hidden")?,
        seed: s.get("seed")?,
        ..base
    })
}

pub fn train(s: &Settings) -> Result<()> {
    let model = model_config(s)?;
    let cfg = TrainConfig {
        manifest: s.path("train.manifest")?,
        clean_manifest: s.opt::<String>("train.clean_manifest")?.map(PathBuf::from),
        out_dir: s.path("train.out_dir")?,
        batch_size: s.get("train.batch_size")?,
        lr: s.get("train.lr")?,
        epochs: s.get("train.epochs")?,
        clean_fraction: s.get("train.clean_fraction")?,
        lambda_q: s.get("train.lambda_q")?,
        seed: s.get("seed")?,
        pairs_per_epoch: s.opt("train.pairs_per_epoch")?,
        dev_nmrs: s.get("train.dev_nmrs")?,
        model,
    };
    cfg.validate()?;
    let count = cfg.model.param_count();
    let (lo, hi) = PARAM_WINDOW;
    let layout_is_default = ModelConfig { seed: 0, ..cfg.model.clone() } == ModelConfig::default();
    let within = (lo..=hi).contains(&count);
    if layout_is_default && !within {
        bail!("default model has {count} parameters, outside [{lo}, {hi}]");
    }
    println!(
        "parameters: {count} ({} [{lo}, {hi}])",
        if within { "within" } else { "outside" }
    );
    let outcome = run_training(&cfg, |e| {
        let dev = match (e.dev_spearman, e.dev_mse) {
            (Some(sc), Some(mse)) => format!("dev_spearman {sc:.4} dev_mse {mse:.4}"),
            _ => "dev n/a".to_string(),
        };
        println!("epoch {} train_loss {:.6} {dev}", e.epoch, e.train_loss);
    })?;
    println!(
        "best epoch {}; checkpoints in {}",
        outcome.best_epoch,
        cfg.out_dir.display()
    );
    Ok(())
}

/// Reference clips with their assumed ratings, in a stable order.
fn load_references(path: &Path) -> Result<Vec<(AudioClip, f64)>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("reading reference directory {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")));
        files.sort();
        if files.is_empty() {
            bail!("no WAV files in reference directory {}", path.display());
        }
        files
            .iter()
            .map(|f| Ok((ingest_wav(f).with_context(|| format!("reading {}", f.display()))?, CLEAN_MOS)))
            .collect()
    } else {
        let manifest = Manifest::load(path)?;
        let refs: Vec<_> = load_split(&manifest, None, false)?
            .into_iter()
            .map(|c| (c.clip, c.mos))
            .collect();
        if refs.is_empty() {
            bail!("reference manifest {} is empty", path.display());
        }
        Ok(refs)
    }
}

fn is_manifest(path: &Path) -> bool {
    path.extension().is_some_and(|x| x.eq_ignore_ascii_case("jsonl"))
}

fn load_split_arg(s: &Settings, key: &str) -> Result<Split> {
    let raw: String = s.get(key)?;
    raw.parse::<Split>().map_err(|e| anyhow::anyhow!("setting {key}: {e}"))
}

pub fn predict(s: &Settings) -> Result<()> {
    let model = load_model(s.path("predict.checkpoint")?)?;
    let input = s.path("predict.input")?;
    let refs = load_references(&s.path("predict.nmr")?)?;
    let n = match s.opt::<usize>("predict.n")? {
        Some(n) => n,
        None => DEFAULT_NMRS.min(refs.len()),
    };
    if n == 0 {
        bail!("predict.n must be positive");
    }
    if n > refs.len() {
        bail!("requested {n} references but only {} are available", refs.len());
    }
    let signed: bool = s.get("predict.signed")?;
    let tests: Vec<(String, AudioClip)> = if is_manifest(&input) {
        let split = load_split_arg(s, "predict.split")?;
        load_split(&Manifest::load(&input)?, Some(split), false)?
            .into_iter()
            .map(|c| (c.utterance_id, c.clip))
            .collect()
    } else {
        let id = input
            .file_stem()
            .map(|x| x.to_string_lossy().into_owned())
            .unwrap_or_default();
        vec![(id, ingest_wav(&input).with_context(|| format!("reading {}", input.display()))?)]
    };
    let clips: Vec<AudioClip> = refs[..n].iter().map(|r| r.0.clone()).collect();
    let ref_mos: Vec<f64> = refs[..n].iter().map(|r| r.1).collect();
    let bank = NmrBank::new(&model, &clips)?;
    let mut text = String::new();
    for (utterance_id, clip) in tests {
        let estimate = if signed {
            predict_mos_signed(&model, &clip, &bank, &ref_mos)
        } else {
            predict_mos(&model, &clip, &bank, n)
        }
        .with_context(|| format!("predicting {utterance_id}"))?;
        text += &Prediction { utterance_id, estimate }.to_json();
        text.push('\n');
    }
    emit(&s.path("predict.output")?, &text)
}

pub fn evaluate(s: &Settings) -> Result<()> {
    let pred_path = s.path("evaluate.predictions")?;
    let text = fs::read_to_string(&pred_path).with_context(|| format!("reading {}", pred_path.display()))?;
    let predictions = parse_predictions(&text)?;
    let manifest = Manifest::load(s.path("evaluate.manifest")?)?;
    let by_id: HashMap<&str, _> = manifest.entries.iter().map(|e| (e.utterance_id.as_str(), e)).collect();
    let mut seen = HashSet::new();
    let mut rows = Vec::with_capacity(predictions.len());
    for p in &predictions {
        let Some(entry) = by_id.get(p.utterance_id.as_str()) else {
            bail!("prediction for unknown utterance_id {:?}", p.utterance_id);
        };
        if !seen.insert(p.utterance_id.as_str()) {
            bail!("duplicate prediction for utterance_id {:?}", p.utterance_id);
        }
        rows.push((entry.system_id.clone(), p.estimate.mos, entry.mos));
    }
    let reports = evaluate_both(&rows)?;
    let mut out = String::new();
    for r in &reports {
        out += &serde_json::to_string(r)?;
        out.push('\n');
    }
    emit(&s.path("evaluate.output")?, &out)?;
    if let Some(scatter) = s.opt::<PathBuf>("evaluate.scatter")? {
        let mut csv = String::from("utterance_id,system_id,predicted,target\n");
        for (p, (system, pred, target)) in predictions.iter().zip(&rows) {
            csv += &format!("{},{system},{pred},{target}\n", p.utterance_id);
        }
        emit(&scatter, &csv)?;
    }
    Ok(())
}

fn split_embeddings(model: &Model<f32>, manifest: &Path, split: Split, skip_clean: bool) -> Result<Vec<(String, String, Vec<f64>)>> {
    let clips = load_split(&Manifest::load(manifest)?, Some(split), false)?;
    clips
        .into_iter()
        .filter(|c| !(skip_clean && c.system_id == nmrmos::manifest::CLEAN_SYSTEM))
        .map(|c| {
            let e = clip_embedding(model, &c.clip).with_context(|| format!("embedding {}", c.utterance_id))?;
            Ok((c.utterance_id, c.system_id, e))
        })
        .collect()
}

pub fn retrieve(s: &Settings) -> Result<()> {
    let model = load_model(s.path("retrieve.checkpoint")?)?;
    let split = load_split_arg(s, "retrieve.split")?;
    let k: usize = s.get("retrieve.k")?;
    let items = split_embeddings(&model, &s.path("retrieve.manifest")?, split, true)?;
    let labels = items
        .iter()
        .map(|(id, system, _)| {
            level_of_system(system).with_context(|| format!("no quality level in system_id {system:?} of {id}"))
        })
        .collect::<Result<Vec<u8>>>()?;
    let embeddings: Vec<Vec<f64>> = items.into_iter().map(|i| i.2).collect();
    let mp = retrieval_mp(&embeddings, &labels, k)?;
    let json = serde_json::json!({ "k": k, "mp": mp, "count": embeddings.len() });
    emit(Path::new("-"), &format!("{json}\n"))
}

pub fn export_embeddings(s: &Settings) -> Result<()> {
    let model = load_model(s.path("export.checkpoint")?)?;
    let split = load_split_arg(s, "export.split")?;
    let items = split_embeddings(&model, &s.path("export.manifest")?, split, false)?;
    let embeddings: Vec<Vec<f64>> = items.iter().map(|i| i.2.clone()).collect();
    let pca = pca2(&embeddings)?;
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut csv = String::from("utterance_id");
    for d in 0..dim {
        csv += &format!(",e{d}");
    }
    csv += ",pc1,pc2\n";
    for ((id, _, e), xy) in items.iter().zip(&pca.coords) {
        csv += id;
        for v in e {
            csv += &format!(",{v}");
        }
        csv += &format!(",{},{}\n", xy[0], xy[1]);
    }
    emit(&s.path("export.output")?, &csv)
}
