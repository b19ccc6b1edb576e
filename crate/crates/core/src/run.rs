//! Commands over a run directory. Each step writes its artifacts under
//! `config.out_dir` and reads its inputs from there.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::artifacts::{self, AblationEntry};
use crate::checkpoint::Checkpoint;
use crate::clap::{ClapModel, EmbedMode};
use crate::config::RunConfig;
use crate::error::{io_err, CoreError, Result};
use crate::pipeline::{
    clap_checkpoint, conversion_pairs, evaluate, load_clap, train_clap, train_vc, ConversionPair, ConversionReport,
    Converter, Dataset, Evaluation, LossPoint, VcTrainer,
};
use crate::store::ReferenceStore;

pub const CONFIG_FILE: &str = "config.toml";
pub const CLAP_FILE: &str = "clap.ckpt";
pub const CLAP_HISTORY_FILE: &str = "clap_history.csv";
pub const VC_FILE: &str = "vc.ckpt";
pub const VC_HISTORY_FILE: &str = "vc_loss.csv";
pub const STORE_FILE: &str = "store.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONVERSIONS_FILE: &str = "conversions.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const PLOT_DIR: &str = "plot";
pub const CORPUS_DIR: &str = "corpus";

fn path(config: &RunConfig, name: &str) -> PathBuf {
    config.out_dir.join(name)
}

fn write_config(config: &RunConfig) -> Result<()> {
    artifacts::ensure_dir(&config.out_dir)?;
    let p = path(config, CONFIG_FILE);
    fs::write(&p, config.to_toml()).map_err(io_err(&p))
}

fn load_checkpoint(p: &Path, what: &str) -> Result<Checkpoint> {
    if !p.exists() {
        return Err(CoreError::Input(format!("{what} checkpoint {} not found", p.display())));
    }
    Ok(Checkpoint::load(p)?)
}

pub fn gen_corpus(config: &RunConfig) -> Result<Dataset> {
    let data = Dataset::generate(&config.corpus)?;
    write_config(config)?;
    artifacts::write_corpus(&path(config, CORPUS_DIR), &data.corpus, &data.split)?;
    Ok(data)
}

pub fn cmd_train_clap(config: &RunConfig, mut log: impl FnMut(&str)) -> Result<ClapModel> {
    let data = Dataset::generate(&config.corpus)?;
    write_config(config)?;
    let (model, history) = train_clap(config, &data, |l| {
        log(&format!("epoch {:>3}  loss {:.4}  val acc {:.3}", l.epoch, l.loss, l.val_accuracy))
    })?;
    clap_checkpoint(&model, &config.clap_hash()).save(&path(config, CLAP_FILE))?;
    artifacts::write_clap_history(&path(config, CLAP_HISTORY_FILE), &history)?;
    Ok(model)
}

/// Load the run's contrastive model, refusing one trained under another
/// configuration.
pub fn load_run_clap(config: &RunConfig) -> Result<ClapModel> {
    let c = load_checkpoint(&path(config, CLAP_FILE), "contrastive")?;
    if c.manifest.config_hash != config.clap_hash() {
        return Err(CoreError::Config(format!(
            "{} was trained under a different configuration",
            path(config, CLAP_FILE).display()
        )));
    }
    load_clap(&c)
}

/// Train (or, with `resume`, continue) the conversion model up to the
/// configured iteration count.
pub fn cmd_train_vc(config: &RunConfig, resume: bool, mut log: impl FnMut(&str)) -> Result<VcTrainer> {
    let data = Dataset::generate(&config.corpus)?;
    let clap = load_run_clap(config)?;
    write_config(config)?;
    let vc_path = path(config, VC_FILE);
    let previous = if resume && vc_path.exists() {
        let c = Checkpoint::load(&vc_path)?;
        if c.manifest.config_hash != config.vc_hash() {
            return Err(CoreError::Config("cannot resume: the conversion config changed".into()));
        }
        let t = VcTrainer::from_checkpoint(&c)?;
        log(&format!("resuming at step {}", t.step));
        Some(t)
    } else {
        None
    };
    let resumed = previous.is_some();
    let (trainer, history) = train_vc(config, &data, &clap, previous, |p| {
        log(&format!("step {:>6}  loss {:.5}", p.step, p.loss))
    })?;
    trainer.to_checkpoint(&config.vc_hash()).save(&vc_path)?;
    let hist_path = path(config, VC_HISTORY_FILE);
    let mut all: Vec<LossPoint> = if resumed && hist_path.exists() {
        read_loss_history(&hist_path)?
    } else {
        Vec::new()
    };
    all.extend(history);
    artifacts::write_loss_history(&hist_path, &all)?;
    Ok(trainer)
}

pub fn read_loss_history(p: &Path) -> Result<Vec<LossPoint>> {
    #[derive(Deserialize)]
    struct Row {
        step: u64,
        loss: f64,
    }
    let mut r = csv::Reader::from_path(p).map_err(|e| CoreError::Format(e.to_string()))?;
    r.deserialize::<Row>()
        .map(|row| {
            row.map(|r| LossPoint { step: r.step, loss: r.loss })
                .map_err(|e| CoreError::Format(e.to_string()))
        })
        .collect()
}

pub fn load_run_vc(config: &RunConfig) -> Result<VcTrainer> {
    let c = load_checkpoint(&path(config, VC_FILE), "conversion")?;
    if c.manifest.config_hash != config.vc_hash() {
        return Err(CoreError::Config(format!(
            "{} was trained under a different configuration",
            path(config, VC_FILE).display()
        )));
    }
    VcTrainer::from_checkpoint(&c)
}

/// Reference store over the training split.
pub fn cmd_build_store(config: &RunConfig) -> Result<ReferenceStore> {
    let data = Dataset::generate(&config.corpus)?;
    let clap = load_run_clap(config)?;
    let store = ReferenceStore::build(&clap, &data.subset(&data.split.train))?;
    store.to_checkpoint().save(&path(config, STORE_FILE))?;
    Ok(store)
}

pub fn load_run_store(config: &RunConfig) -> Result<ReferenceStore> {
    let c = load_checkpoint(&path(config, STORE_FILE), "reference store")?;
    Ok(ReferenceStore::from_checkpoint(&c)?)
}

/// Everything loaded for conversion.
pub struct Loaded {
    pub data: Dataset,
    pub clap: ClapModel,
    pub vc: VcTrainer,
    pub store: ReferenceStore,
    pub probe: crate::metrics::EmotionProbe,
}

impl Loaded {
    pub fn open(config: &RunConfig) -> Result<Self> {
        let data = Dataset::generate(&config.corpus)?;
        let probe = data.probe()?;
        Ok(Self {
            clap: load_run_clap(config)?,
            vc: load_run_vc(config)?,
            store: load_run_store(config)?,
            data,
            probe,
        })
    }

    pub fn converter(&self, config: &RunConfig) -> Converter<'_> {
        Converter {
            data: &self.data,
            clap: &self.clap,
            vc: &self.vc.model,
            store: &self.store,
            probe: &self.probe,
            sampler: config.sampler,
            retrieval_k: config.eval.retrieval_k,
        }
    }
}

/// Convert one source towards the class of `reference`.
pub fn cmd_convert(config: &RunConfig, pair: ConversionPair, mode: EmbedMode, lambda: f64) -> Result<ConversionReport> {
    let loaded = Loaded::open(config)?;
    if pair.source >= loaded.data.corpus.len() || pair.reference >= loaded.data.corpus.len() {
        return Err(CoreError::Input("utterance id outside the corpus".into()));
    }
    let report = loaded.converter(config).convert(&[pair], mode, lambda)?.remove(0);
    Ok(report)
}

/// Run the sweep and write `metrics.csv`, `conversions.csv` and plot data.
/// Each directory in `others` must hold a finished evaluation; together
/// with this run they make up `ablation.csv`.
pub fn cmd_evaluate(config: &RunConfig, others: &[PathBuf]) -> Result<Evaluation> {
    let loaded = Loaded::open(config)?;
    let pairs = conversion_pairs(&loaded.data, config.eval.conversions, config.seed)?;
    let eval = evaluate(&loaded.converter(config), &pairs, &config.eval)?;
    artifacts::write_metrics(&path(config, METRICS_FILE), &eval.rows)?;
    artifacts::write_conversions(&path(config, CONVERSIONS_FILE), &eval.reports)?;
    artifacts::write_plot_data(&path(config, PLOT_DIR), &eval.rows)?;
    if !others.is_empty() {
        let mut entries = vec![ablation_entry(&config.out_dir)?];
        for dir in others {
            entries.push(ablation_entry(dir)?);
        }
        artifacts::write_ablation(&path(config, ABLATION_FILE), &entries)?;
    }
    Ok(eval)
}

#[derive(Deserialize)]
struct MetricsRow {
    mode: String,
    lambda: f64,
    eecs_surrogate: f64,
    cond_mean_error: f64,
    retrieval_accuracy: Option<f64>,
}

/// Summarize a finished run from its config and `metrics.csv`.
pub fn ablation_entry(dir: &Path) -> Result<AblationEntry> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let metrics = dir.join(METRICS_FILE);
    let mut r = csv::Reader::from_path(&metrics).map_err(|e| CoreError::Format(format!("{}: {e}", metrics.display())))?;
    let rows: Vec<MetricsRow> = r
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CoreError::Format(format!("{}: {e}", metrics.display())))?;
    let at_one: Vec<&MetricsRow> = rows.iter().filter(|r| r.lambda == 1.0).collect();
    if at_one.is_empty() {
        return Err(CoreError::Data(format!("{} has no λ = 1 rows", metrics.display())));
    }
    let mean = |xs: Vec<f64>| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    Ok(AblationEntry {
        run: dir.display().to_string(),
        ablation: cfg.ablation,
        seed: cfg.seed,
        emotion_similarity: mean(at_one.iter().map(|r| r.eecs_surrogate).collect()),
        retrieval_accuracy: mean(at_one.iter().filter_map(|r| r.retrieval_accuracy).collect()),
        cond_mean_error: mean(
            at_one
                .iter()
                .filter(|r| r.mode == EmbedMode::Reference.to_string())
                .map(|r| r.cond_mean_error)
                .collect(),
        ),
    })
}
