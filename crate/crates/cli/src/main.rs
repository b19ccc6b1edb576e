//! `emovc`: corpus generation, training, conversion and evaluation.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use emovc_core::clap::{EmbedMode, LossVariant};
use emovc_core::config::RunConfig;
use emovc_core::pipeline::ConversionPair;
use emovc_core::run;

#[derive(Parser, Debug)]
#[command(name = "emovc", version, about = "Emotional voice conversion on a synthetic corpus")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for checkpoints, logs and tables.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Train the contrastive model on prompt agreement alone.
    #[arg(long, global = true)]
    no_emo_label: bool,
    #[arg(long, global = true, value_parser = parse_loss)]
    loss: Option<LossVariant>,
    /// Drop the adaptive intensity gate.
    #[arg(long, global = true)]
    no_aig: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and serialize the synthetic corpus.
    GenCorpus,
    /// Train the contrastive emotion encoders.
    TrainClap,
    /// Train the fusion encoder and flow-matching decoder.
    TrainVc {
        /// Continue from the run's conversion checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Embed the training split into the reference store.
    BuildStore,
    /// Convert one utterance.
    Convert {
        #[arg(long, value_parser = parse_mode)]
        mode: EmbedMode,
        #[arg(long, default_value_t = 1.0)]
        intensity: f64,
        /// Source utterance id.
        #[arg(long)]
        source: usize,
        /// Utterance supplying the reference audio (reference mode) or the
        /// prompt (prompt and retrieval modes).
        #[arg(long)]
        reference: usize,
    },
    /// Run the mode × intensity sweep; extra run directories add rows to
    /// the ablation table.
    Evaluate {
        #[arg(long = "compare", num_args = 1..)]
        compare: Vec<PathBuf>,
    },
}

fn parse_loss(s: &str) -> Result<LossVariant, String> {
    s.parse().map_err(|e: emovc_core::CoreError| e.to_string())
}

fn parse_mode(s: &str) -> Result<EmbedMode, String> {
    s.parse().map_err(|e: emovc_core::CoreError| e.to_string())
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if c.no_emo_label {
        cfg.ablation.use_emo_label = false;
    }
    if let Some(loss) = c.loss {
        cfg.ablation.loss = loss;
    }
    if c.no_aig {
        cfg.ablation.use_aig = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = resolve(&cli.common)?;
    let log = |line: &str| eprintln!("{line}");
    match cli.command {
        Command::GenCorpus => {
            let data = run::gen_corpus(&cfg)?;
            println!(
                "{} utterances ({} train / {} val / {} test) in {}",
                data.corpus.len(),
                data.split.train.len(),
                data.split.val.len(),
                data.split.test.len(),
                cfg.out_dir.join(run::CORPUS_DIR).display()
            );
        }
        Command::TrainClap => {
            run::cmd_train_clap(&cfg, log)?;
            println!("wrote {}", cfg.out_dir.join(run::CLAP_FILE).display());
        }
        Command::TrainVc { resume } => {
            let t = run::cmd_train_vc(&cfg, resume, log)?;
            println!("wrote {} at step {}", cfg.out_dir.join(run::VC_FILE).display(), t.step);
        }
        Command::BuildStore => {
            let store = run::cmd_build_store(&cfg)?;
            println!("{} references in {}", store.len(), cfg.out_dir.join(run::STORE_FILE).display());
        }
        Command::Convert {
            mode,
            intensity,
            source,
            reference,
        } => {
            if !(0.0..=2.0).contains(&intensity) {
                bail!("--intensity must lie in [0, 2]");
            }
            let r = run::cmd_convert(&cfg, ConversionPair { source, reference }, mode, intensity)?;
            let report = serde_json::json!({
                "mode": r.mode.to_string(),
                "lambda": r.lambda,
                "source_id": r.source_id,
                "target_class": r.target_class,
                "reference_id": r.reference_id,
                "retrieved": r.retrieved,
                "eecs_surrogate": r.eecs_surrogate,
                "projection": r.projection,
                "cond_mean_error": r.cond_mean_error,
                "retrieval_hit": r.retrieval_hit,
                "frames": r.mel.rows(),
                "mel": r.mel.data().chunks(r.mel.cols()).collect::<Vec<_>>(),
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Evaluate { compare } => {
            let eval = run::cmd_evaluate(&cfg, &compare)?;
            for row in &eval.rows {
                println!(
                    "{:<9} λ={:<4} eecs {:.3}  proj {:.3}  err {:.3}{}",
                    row.mode,
                    row.lambda,
                    row.eecs_surrogate,
                    row.projection,
                    row.cond_mean_error,
                    row.retrieval_accuracy.map_or(String::new(), |a| format!("  retrieval {a:.3}"))
                );
            }
        }
    }
    Ok(())
}
