//! Fusion encoder: content frames plus a gated emotion embedding in, a
//! per-frame condition sequence out.
//!
//! PreNet, sinusoidal positions, the adaptive intensity gate and `K`
//! pre-norm fusion blocks whose two layer norms take their scale and shift
//! from the gated embedding.

use emovc_numerics::nn::{
    dropout, sinusoidal_row, Activation, Linear, Mlp2, MultiHeadAttention, LN_EPS,
};
use emovc_numerics::{Graph, ParamId, ParamStore, Segments, Tensor, Var};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuEncoderConfig {
    pub content_dim: usize,
    /// Model width `D`, also the output width.
    pub width: usize,
    /// Width of the emotion embedding.
    pub emb_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub prenet_dropout: f64,
    /// Set from the run's ablation flags.
    #[serde(skip, default = "enabled")]
    pub use_aig: bool,
    pub max_lambda: f64,
}

fn enabled() -> bool {
    true
}

impl Default for FuEncoderConfig {
    fn default() -> Self {
        Self {
            content_dim: 8,
            width: 32,
            emb_dim: 32,
            blocks: 4,
            heads: 4,
            ffn_mult: 2,
            prenet_dropout: 0.5,
            use_aig: true,
            max_lambda: 2.0,
        }
    }
}

/// Variable-length sequences packed row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSeqs {
    pub rows: Tensor,
    pub segs: Segments,
}

impl PackedSeqs {
    pub fn pack(seqs: &[&Tensor]) -> Result<Self> {
        let Some(first) = seqs.first() else {
            return Err(CoreError::Data("empty batch".into()));
        };
        let width = first.cols();
        let mut lengths = Vec::with_capacity(seqs.len());
        let mut data = Vec::new();
        for (i, s) in seqs.iter().enumerate() {
            let (t, d) = s.dims2();
            if t == 0 || d != width {
                return Err(CoreError::Data(format!("sequence {i} has shape {t}×{d}, expected T×{width} with T ≥ 1")));
            }
            if !s.is_finite() {
                return Err(CoreError::Data(format!("sequence {i} has non-finite values")));
            }
            lengths.push(t);
            data.extend_from_slice(s.data());
        }
        let segs = Segments::from_lengths(&lengths)?;
        Ok(Self {
            rows: Tensor::matrix(segs.total_rows(), width, data)?,
            segs,
        })
    }

    /// Split packed rows back into per-sequence tensors.
    pub fn unpack(rows: &Tensor, segs: &Segments) -> Vec<Tensor> {
        let c = rows.cols();
        segs.iter()
            .map(|r| Tensor::matrix(r.len(), c, rows.data()[r.start * c..r.end * c].to_vec()).expect("shape"))
            .collect()
    }
}

/// Scale and shift predicted from the gated embedding.
#[derive(Debug, Clone, Copy)]
pub struct EmoAdaLn {
    pub gamma: Linear,
    pub beta: Linear,
}

impl EmoAdaLn {
    fn new(store: &mut ParamStore, name: &str, emb: usize, width: usize, rng: &mut impl Rng) -> Self {
        let std = 0.5 / (emb as f64).sqrt();
        Self {
            gamma: Linear::with_init(store, &format!("{name}.gamma"), emb, width, std, 1.0, rng),
            beta: Linear::with_init(store, &format!("{name}.beta"), emb, width, std, 0.0, rng),
        }
    }

    /// `γ(h)⊙LN(x) + β(h)`, with `h` given per sequence and broadcast to
    /// its frames.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var, segs: &Segments) -> Result<Var> {
        let owners = segs.owners();
        let n = g.layer_norm_rows(x, LN_EPS);
        let gamma = self.gamma.forward(g, store, h)?;
        let gamma = g.gather_rows(gamma, &owners)?;
        let beta = self.beta.forward(g, store, h)?;
        let beta = g.gather_rows(beta, &owners)?;
        let y = g.mul(gamma, n)?;
        Ok(g.add(y, beta)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionBlock {
    pub norm1: EmoAdaLn,
    pub attn: MultiHeadAttention,
    pub norm2: EmoAdaLn,
    pub ffn: Mlp2,
}

impl FusionBlock {
    /// `x + Attn(AdaLN₁(x))`, then `x + FFN(AdaLN₂(x))`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var, segs: &Segments) -> Result<Var> {
        let n = self.norm1.forward(g, store, x, h, segs)?;
        let a = self.attn.forward(g, store, n, segs)?;
        let x = g.add(x, a)?;
        let n = self.norm2.forward(g, store, x, h, segs)?;
        let f = self.ffn.forward(g, store, n)?;
        Ok(g.add(x, f)?)
    }

    /// Zero both residual-branch output projections.
    pub fn zero_outputs(&self, store: &mut ParamStore) {
        for lin in [self.attn.out, self.ffn.second] {
            lin.zero_weight(store);
            if let Some(b) = lin.bias {
                store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct FuEncoder {
    pub config: FuEncoderConfig,
    pub prenet: [Linear; 2],
    /// `log g` of the adaptive intensity gate.
    pub log_gate: ParamId,
    pub blocks: Vec<FusionBlock>,
    pub out_proj: Linear,
}

/// Output of the fusion encoder.
#[derive(Debug, Clone, Copy)]
pub struct FusedSeq {
    /// `ΣT × D` packed frames.
    pub f: Var,
    /// Embedding after the gate, `B × E`.
    pub h_gated: Var,
}

impl FuEncoder {
    pub fn new(store: &mut ParamStore, config: FuEncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = config;
        if c.blocks == 0 {
            return Err(CoreError::Config("fusion encoder needs at least one block".into()));
        }
        if !c.width.is_multiple_of(2) {
            return Err(CoreError::Config(format!("width {} must be even for positional encoding", c.width)));
        }
        if !(0.0..1.0).contains(&c.prenet_dropout) {
            return Err(CoreError::Config("dropout must lie in [0, 1)".into()));
        }
        let prenet = [
            Linear::new(store, "fu.prenet.0", c.content_dim, c.width, rng),
            Linear::new(store, "fu.prenet.1", c.width, c.width, rng),
        ];
        let log_gate = store.add_const("fu.gate.log", 1, 1, 0.0);
        let mut blocks = Vec::with_capacity(c.blocks);
        for k in 0..c.blocks {
            let name = format!("fu.block{k}");
            let block = FusionBlock {
                norm1: EmoAdaLn::new(store, &format!("{name}.norm1"), c.emb_dim, c.width, rng),
                attn: MultiHeadAttention::new(store, &format!("{name}.attn"), c.width, c.heads, rng)?,
                norm2: EmoAdaLn::new(store, &format!("{name}.norm2"), c.emb_dim, c.width, rng),
                ffn: Mlp2::new(
                    store,
                    &format!("{name}.ffn"),
                    (c.width, c.ffn_mult * c.width, c.width),
                    Activation::Gelu,
                    rng,
                ),
            };
            block.zero_outputs(store);
            blocks.push(block);
        }
        let out_proj = Linear::new(store, "fu.out", c.width, c.width, rng);
        Ok(Self {
            config,
            prenet,
            log_gate,
            blocks,
            out_proj,
        })
    }

    pub fn gate_value(&self, store: &ParamStore) -> f64 {
        store.get(self.log_gate).data()[0].exp()
    }

    /// Two rounds of linear, ReLU and dropout. Dropout runs only when an
    /// RNG is supplied.
    pub fn prenet(&self, g: &mut Graph, store: &ParamStore, x: Var, mut rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let mut h = x;
        for lin in &self.prenet {
            h = lin.forward(g, store, h)?;
            h = g.relu(h);
            let r = rng.as_mut().map(|r| &mut **r as &mut dyn RngCore);
            h = dropout(g, h, self.config.prenet_dropout, r)?;
        }
        Ok(h)
    }

    pub fn check_lambda(&self, lambda: f64) -> Result<()> {
        if !(0.0..=self.config.max_lambda).contains(&lambda) {
            return Err(CoreError::Input(format!(
                "intensity {lambda} outside [0, {}]",
                self.config.max_lambda
            )));
        }
        Ok(())
    }

    /// `λ·g·h`, or `h` itself when the gate is ablated.
    pub fn gate(&self, g: &mut Graph, store: &ParamStore, h: Var, lambda: f64) -> Result<Var> {
        self.check_lambda(lambda)?;
        if !self.config.use_aig {
            return Ok(h);
        }
        let lg = g.param(store, self.log_gate);
        let gv = g.exp(lg);
        let scaled = g.scale(h, lambda);
        Ok(g.scale_by(scaled, gv)?)
    }

    /// Encode packed content frames conditioned on per-sequence embeddings
    /// `h` (`B × E`).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        content: &PackedSeqs,
        h: Var,
        lambda: f64,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<FusedSeq> {
        let c = &self.config;
        if content.rows.cols() != c.content_dim {
            return Err(CoreError::Data(format!(
                "content width {} differs from configured {}",
                content.rows.cols(),
                c.content_dim
            )));
        }
        if g.shape(h) != (content.segs.count(), c.emb_dim) {
            return Err(CoreError::Data(format!(
                "embedding batch {:?} does not match {} sequences of width {}",
                g.shape(h),
                content.segs.count(),
                c.emb_dim
            )));
        }
        let h_gated = self.gate(g, store, h, lambda)?;
        let x = g.constant(&content.rows);
        let mut x = self.prenet(g, store, x, rng)?;
        let pe = positional_rows(&content.segs, c.width)?;
        let pe = g.constant(&pe);
        x = g.add(x, pe)?;
        for block in &self.blocks {
            x = block.forward(g, store, x, h_gated, &content.segs)?;
        }
        let f = self.out_proj.forward(g, store, x)?;
        Ok(FusedSeq { f, h_gated })
    }
}

/// Sinusoidal table `T×D` for a single sequence.
pub fn sinusoidal_pe(len: usize, dim: usize) -> Result<Tensor> {
    Ok(emovc_numerics::nn::sinusoidal_table(len, dim)?)
}

/// Positional rows restarting at 0 for each packed sequence.
fn positional_rows(segs: &Segments, dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(segs.total_rows() * dim);
    for p in segs.positions() {
        data.extend(sinusoidal_row(p as f64, dim)?);
    }
    Ok(Tensor::matrix(segs.total_rows(), dim, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use emovc_numerics::SeedStream;

    #[test]
    fn pe_examples() {
        let pe = sinusoidal_pe(2, 4).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(1, 0) - 0.8414709848).abs() < 1e-10);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert!(sinusoidal_pe(2, 5).is_err());
    }

    #[test]
    fn lambda_bounds_are_enforced() {
        let mut store = ParamStore::new();
        let enc = FuEncoder::new(&mut store, FuEncoderConfig::default(), &mut SeedStream::new(0).rng()).unwrap();
        assert!(enc.check_lambda(2.0).is_ok());
        assert!(enc.check_lambda(2.01).is_err());
        assert!(enc.check_lambda(-0.1).is_err());
    }

    #[test]
    fn pack_rejects_ragged_widths() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 4]);
        assert!(PackedSeqs::pack(&[&a, &b]).is_err());
        assert!(PackedSeqs::pack(&[]).is_err());
    }
}
