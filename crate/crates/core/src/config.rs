//! Run configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cfm::SamplerConfig;
use crate::checkpoint::config_hash;
use crate::clap::{ClapConfig, EmbedMode, LossVariant};
use crate::corpus::CorpusDims;
use crate::error::{CoreError, Result};
use crate::vc::VcConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n: usize,
    pub seed: u64,
    /// Seed of the emotion axes, templates and oracle matrices.
    pub world_seed: u64,
    pub split: [f64; 3],
    pub dims: CorpusDims,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n: 700,
            seed: 1,
            world_seed: 0,
            split: [0.8, 0.1, 0.1],
            dims: CorpusDims::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_emo_label: bool,
    pub loss: LossVariant,
    pub use_aig: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_emo_label: true,
            loss: LossVariant::Symkl,
            use_aig: true,
        }
    }
}

impl Ablation {
    /// Short tag such as `full` or `no-emo-label+kl`.
    pub fn tag(&self) -> String {
        let mut parts = Vec::new();
        if !self.use_emo_label {
            parts.push("no-emo-label");
        }
        if self.loss == LossVariant::Kl {
            parts.push("kl");
        }
        if !self.use_aig {
            parts.push("no-aig");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub lambdas: Vec<f64>,
    pub conversions: usize,
    pub modes: Vec<EmbedMode>,
    /// Candidates reported by retrieval; conversion always uses the first.
    pub retrieval_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            conversions: 50,
            modes: vec![EmbedMode::Reference, EmbedMode::Prompt, EmbedMode::Retrieval],
            retrieval_k: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for initialization, batching and sampling.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// VC loss is logged as a mean over this many steps.
    pub log_every: u64,
    pub corpus: CorpusConfig,
    pub clap: ClapConfig,
    pub vc: VcConfig,
    pub sampler: SamplerConfig,
    pub ablation: Ablation,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            log_every: 200,
            corpus: CorpusConfig::default(),
            clap: ClapConfig::default(),
            vc: VcConfig::default(),
            sampler: SamplerConfig::default(),
            ablation: Ablation::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.dims.validate()?;
        let fu = &self.vc.fuencoder;
        if fu.content_dim != self.corpus.dims.content_dim {
            return Err(CoreError::Config("fusion encoder content_dim must equal corpus content_dim".into()));
        }
        if self.vc.cfm.mel_dim != self.corpus.dims.mel_dim {
            return Err(CoreError::Config("decoder mel_dim must equal corpus mel_dim".into()));
        }
        if fu.emb_dim != self.clap.dim || self.vc.cfm.emb_dim != self.clap.dim {
            return Err(CoreError::Config("emotion embedding widths must equal the contrastive dim".into()));
        }
        if self.clap.batch_size < 2 {
            return Err(CoreError::Config("contrastive batches need at least 2 items".into()));
        }
        if self.vc.batch_size == 0 || self.log_every == 0 {
            return Err(CoreError::Config("batch_size and log_every must be positive".into()));
        }
        if self.eval.lambdas.iter().any(|l| !(0.0..=fu.max_lambda).contains(l)) {
            return Err(CoreError::Config(format!("sweep intensities must lie in [0, {}]", fu.max_lambda)));
        }
        self.sampler.validate()
    }

    /// Contrastive config with the ablation flags applied.
    pub fn clap_config(&self) -> ClapConfig {
        ClapConfig {
            use_emo_label: self.ablation.use_emo_label,
            loss: self.ablation.loss,
            ..self.clap
        }
    }

    pub fn vc_config(&self) -> VcConfig {
        let mut vc = self.vc;
        vc.fuencoder.use_aig = self.ablation.use_aig;
        vc
    }

    /// Hash of everything that shapes the contrastive model.
    pub fn clap_hash(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            seed: u64,
            corpus: &'a CorpusConfig,
            clap: &'a ClapConfig,
            ablation: (bool, LossVariant),
        }
        let key = Key {
            seed: self.seed,
            corpus: &self.corpus,
            clap: &self.clap,
            ablation: (self.ablation.use_emo_label, self.ablation.loss),
        };
        config_hash(&toml::to_string(&key).expect("serializes"))
    }

    /// Hash of everything that shapes the conversion model except the
    /// iteration count, so a run can be extended with `--resume`.
    pub fn vc_hash(&self) -> String {
        #[derive(Serialize)]
        struct Key {
            clap: String,
            vc: VcConfig,
            use_aig: bool,
        }
        let key = Key {
            clap: self.clap_hash(),
            vc: VcConfig { iterations: 0, ..self.vc },
            use_aig: self.ablation.use_aig,
        };
        config_hash(&toml::to_string(&key).expect("serializes"))
    }
}
