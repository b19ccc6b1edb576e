//! The conversion model: fusion encoder and flow-matching decoder sharing
//! one parameter store.

use emovc_numerics::{Adam, Graph, ParamStore, SeedStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::cfm::{CfmConfig, CfmDecoder, SamplerConfig};
use crate::error::{CoreError, Result};
use crate::fuencoder::{FuEncoder, FuEncoderConfig, PackedSeqs};

/// Learning-rate schedule over the configured iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero at the last iteration.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VcConfig {
    pub lr: f64,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub fuencoder: FuEncoderConfig,
    pub cfm: CfmConfig,
}

impl Default for VcConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            schedule: LrSchedule::Constant,
            weight_decay: 0.01,
            batch_size: 32,
            iterations: 20_000,
            fuencoder: FuEncoderConfig::default(),
            cfm: CfmConfig::default(),
        }
    }
}

impl VcConfig {
    /// Learning rate for the update made at `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = (step as f64 / self.iterations.max(1) as f64).min(1.0);
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Training triples packed by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VcBatch {
    pub content: PackedSeqs,
    /// Frozen emotion embeddings, `B × E`.
    pub emb: Tensor,
    /// Normalized Mel targets, `ΣT × D_mel`.
    pub mel: Tensor,
}

#[derive(Debug, Clone)]
pub struct VcModel {
    pub store: ParamStore,
    pub encoder: FuEncoder,
    pub decoder: CfmDecoder,
}

impl VcModel {
    pub fn new(config: &VcConfig, seed: u64) -> Result<Self> {
        let fu = config.fuencoder;
        let cfm = config.cfm;
        if fu.width != cfm.cond_dim || fu.emb_dim != cfm.emb_dim {
            return Err(CoreError::Config(format!(
                "encoder output {}/embedding {} must match decoder condition {}/embedding {}",
                fu.width, fu.emb_dim, cfm.cond_dim, cfm.emb_dim
            )));
        }
        let mut rng = SeedStream::new(seed).named("vc.init").rng();
        let mut store = ParamStore::new();
        let encoder = FuEncoder::new(&mut store, fu, &mut rng)?;
        let decoder = CfmDecoder::new(&mut store, cfm, &mut rng)?;
        Ok(Self { store, encoder, decoder })
    }

    /// Flow-matching loss at intensity 1 with PreNet dropout on. The step
    /// stream seeds both dropout and the path draw.
    pub fn loss(&self, g: &mut Graph, batch: &VcBatch, stream: SeedStream) -> Result<emovc_numerics::Var> {
        let h = g.constant(&batch.emb);
        let mut rng = stream.named("dropout").rng();
        let fused = self.encoder.forward(g, &self.store, &batch.content, h, 1.0, Some(&mut rng as &mut dyn rand::RngCore))?;
        self.decoder
            .cfm_loss(g, &self.store, &batch.mel, fused.f, fused.h_gated, &batch.content.segs, stream)
    }

    /// Sample normalized Mel frames for packed content conditioned on one
    /// embedding per sequence; `keys` select each sequence's noise.
    pub fn generate(&self, content: &PackedSeqs, emb: &Tensor, lambda: f64, keys: &[u64], sampler: &SamplerConfig) -> Result<Tensor> {
        let mut g = Graph::new();
        let h = g.constant(emb);
        let fused = self.encoder.forward(&mut g, &self.store, content, h, lambda, None)?;
        let f = g.to_tensor(fused.f);
        let hg = g.to_tensor(fused.h_gated);
        self.decoder.euler_sample(&self.store, &f, &hg, &content.segs, keys, sampler)
    }
}

pub fn vc_train_step(model: &mut VcModel, optim: &mut Adam, batch: &VcBatch, stream: SeedStream, step: u64) -> Result<f64> {
    let mut g = Graph::new();
    let loss = model.loss(&mut g, batch, stream)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(CoreError::NonFinite {
            step,
            detail: format!("flow-matching loss is {value}"),
        });
    }
    let grads = g.backward(loss)?;
    model.store.zero_grad();
    grads.write_to(&mut model.store)?;
    optim.step(&mut model.store)?;
    Ok(value)
}
