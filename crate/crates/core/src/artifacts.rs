//! On-disk artifacts: the serialized corpus, CSV tables and plot data.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use emovc_numerics::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::Ablation;
use crate::corpus::{CorpusSplit, Utterance, EMOTION_NAMES};
use crate::error::{io_err, CoreError, Result};
use crate::pipeline::{ClapEpochLog, ConversionReport, LossPoint, SweepRow};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const FEATURES_FILE: &str = "features.ckpt";
pub const SPLIT_FILE: &str = "split.json";
pub const FEATURES_KIND: &str = "corpus-features";

/// One corpus line. Real-valued features live in the feature container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: usize,
    pub emotion_id: usize,
    pub emotion: String,
    pub intensity_gt: f64,
    pub frames: usize,
    pub content_tokens: Vec<usize>,
    pub prompt_text: String,
    pub prompt_template_id: usize,
    pub prompt_tokens: Vec<usize>,
    pub mel_noise_seed: u64,
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(io_err(path))?))
}

/// Write `corpus.jsonl`, `features.ckpt` and `split.json` into `dir`.
pub fn write_corpus(dir: &Path, corpus: &[Utterance], split: &CorpusSplit) -> Result<()> {
    ensure_dir(dir)?;
    let path = dir.join(CORPUS_FILE);
    let mut out = create(&path)?;
    let mut features = Checkpoint::new(FEATURES_KIND, 0, "");
    let intensity = Tensor::from_fn(corpus.len(), 1, |i, _| corpus[i].intensity_gt);
    features.push("intensity_gt", &intensity);
    for u in corpus {
        let rec = UtteranceRecord {
            id: u.id,
            emotion_id: u.emotion_id,
            emotion: EMOTION_NAMES[u.emotion_id].to_string(),
            intensity_gt: u.intensity_gt,
            frames: u.frames(),
            content_tokens: u.content_tokens.clone(),
            prompt_text: u.prompt_text.clone(),
            prompt_template_id: u.prompt_template_id,
            prompt_tokens: u.prompt_tokens.clone(),
            mel_noise_seed: u.mel_noise_seed,
        };
        let line = serde_json::to_string(&rec).map_err(|e| CoreError::Format(e.to_string()))?;
        writeln!(out, "{line}").map_err(io_err(&path))?;
        features.push(format!("{}.content", u.id), &u.content_features);
        features.push(format!("{}.audio", u.id), &u.audio_features);
        features.push(format!("{}.mel", u.id), &u.mel_target);
    }
    out.flush().map_err(io_err(&path))?;
    features.save(&dir.join(FEATURES_FILE))?;
    let split_path = dir.join(SPLIT_FILE);
    let text = serde_json::to_string_pretty(split).map_err(|e| CoreError::Format(e.to_string()))?;
    fs::write(&split_path, text).map_err(io_err(&split_path))
}

pub fn read_corpus(dir: &Path) -> Result<(Vec<Utterance>, CorpusSplit)> {
    let path = dir.join(CORPUS_FILE);
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let features = Checkpoint::load(&dir.join(FEATURES_FILE))?;
    features.expect_kind(FEATURES_KIND)?;
    let intensity = features.require("intensity_gt")?;
    let mut corpus = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        let rec: UtteranceRecord = serde_json::from_str(&line)
            .map_err(|e| CoreError::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if rec.id != corpus.len() || rec.id >= intensity.len() {
            return Err(CoreError::Format(format!("{}:{}: unexpected id {}", path.display(), n + 1, rec.id)));
        }
        corpus.push(Utterance {
            id: rec.id,
            content_tokens: rec.content_tokens,
            content_features: features.require(&format!("{}.content", rec.id))?,
            audio_features: features.require(&format!("{}.audio", rec.id))?,
            emotion_id: rec.emotion_id,
            intensity_gt: intensity.data()[rec.id],
            prompt_text: rec.prompt_text,
            prompt_template_id: rec.prompt_template_id,
            prompt_tokens: rec.prompt_tokens,
            mel_target: features.require(&format!("{}.mel", rec.id))?,
            mel_noise_seed: rec.mel_noise_seed,
        });
    }
    let split_path = dir.join(SPLIT_FILE);
    let text = fs::read_to_string(&split_path).map_err(io_err(&split_path))?;
    let split = serde_json::from_str(&text).map_err(|e| CoreError::Format(e.to_string()))?;
    Ok((corpus, split))
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| CoreError::Format(e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_clap_history(path: &Path, logs: &[ClapEpochLog]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        epoch: usize,
        loss: f64,
        val_accuracy: f64,
    }
    write_csv(
        path,
        logs.iter().map(|l| Row {
            epoch: l.epoch,
            loss: l.loss,
            val_accuracy: l.val_accuracy,
        }),
    )
}

pub fn write_loss_history(path: &Path, logs: &[LossPoint]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        step: u64,
        loss: f64,
    }
    write_csv(path, logs.iter().map(|p| Row { step: p.step, loss: p.loss }))
}

/// Columns: `mode, lambda, n, eecs_surrogate, projection, cond_mean_error,
/// retrieval_accuracy` (empty outside retrieval mode).
pub fn write_metrics(path: &Path, rows: &[SweepRow]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        mode: String,
        lambda: f64,
        n: usize,
        eecs_surrogate: f64,
        projection: f64,
        cond_mean_error: f64,
        retrieval_accuracy: Option<f64>,
    }
    write_csv(
        path,
        rows.iter().map(|r| Row {
            mode: r.mode.to_string(),
            lambda: r.lambda,
            n: r.n,
            eecs_surrogate: r.eecs_surrogate,
            projection: r.projection,
            cond_mean_error: r.cond_mean_error,
            retrieval_accuracy: r.retrieval_accuracy,
        }),
    )
}

/// One row per conversion, without the generated frames.
pub fn write_conversions(path: &Path, reports: &[ConversionReport]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        mode: String,
        lambda: f64,
        source_id: usize,
        target_class: usize,
        reference_id: Option<usize>,
        retrieval_hit: Option<bool>,
        eecs_surrogate: f64,
        projection: f64,
        cond_mean_error: f64,
    }
    write_csv(
        path,
        reports.iter().map(|r| Row {
            mode: r.mode.to_string(),
            lambda: r.lambda,
            source_id: r.source_id,
            target_class: r.target_class,
            reference_id: r.reference_id,
            retrieval_hit: r.retrieval_hit,
            eecs_surrogate: r.eecs_surrogate,
            projection: r.projection,
            cond_mean_error: r.cond_mean_error,
        }),
    )
}

/// `(x, y)` pairs per mode: `<mode>_projection.csv`, `<mode>_eecs.csv` and
/// `<mode>_error.csv`, all against λ. Returns the files written.
pub fn write_plot_data(dir: &Path, rows: &[SweepRow]) -> Result<Vec<PathBuf>> {
    #[derive(Serialize)]
    struct Pair {
        lambda: f64,
        value: f64,
    }
    let mut modes: Vec<_> = rows.iter().map(|r| r.mode).collect();
    modes.dedup();
    let mut written = Vec::new();
    for mode in modes {
        let cells: Vec<&SweepRow> = rows.iter().filter(|r| r.mode == mode).collect();
        let series: [(&str, fn(&SweepRow) -> f64); 3] = [
            ("projection", |r| r.projection),
            ("eecs", |r| r.eecs_surrogate),
            ("error", |r| r.cond_mean_error),
        ];
        for (name, get) in series {
            let path = dir.join(format!("{mode}_{name}.csv"));
            write_csv(&path, cells.iter().map(|r| Pair { lambda: r.lambda, value: get(r) }))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// A finished run summarized for the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationEntry {
    pub run: String,
    pub ablation: Ablation,
    pub seed: u64,
    pub emotion_similarity: f64,
    pub retrieval_accuracy: f64,
    pub cond_mean_error: f64,
}

pub fn write_ablation(path: &Path, entries: &[AblationEntry]) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        run: &'a str,
        seed: u64,
        use_emo_label: bool,
        loss: String,
        use_aig: bool,
        emotion_similarity: f64,
        retrieval_accuracy: f64,
        cond_mean_error: f64,
    }
    write_csv(
        path,
        entries.iter().map(|e| Row {
            run: &e.run,
            seed: e.seed,
            use_emo_label: e.ablation.use_emo_label,
            loss: e.ablation.loss.to_string(),
            use_aig: e.ablation.use_aig,
            emotion_similarity: e.emotion_similarity,
            retrieval_accuracy: e.retrieval_accuracy,
            cond_mean_error: e.cond_mean_error,
        }),
    )
}
