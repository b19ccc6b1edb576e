//! Contrastive alignment of acoustic and prompt embeddings with soft labels.
//!
//! Both encoders mean-pool their input, apply a two-layer GELU MLP and
//! L2-normalize. Similarity logits are cosine matrices scaled by two learnable
//! inverse temperatures; row-softmax turns them into distributions that the
//! symmetric KL loss compares with the blended label-agreement targets.

use emovc_numerics::nn::{Activation, Mlp2};
use emovc_numerics::{Adam, Graph, ParamId, ParamStore, SeedStream, Segments, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Floor on predicted probabilities inside the reverse KL terms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// Four-term symmetric KL.
    #[default]
    Symkl,
    /// Only the forward terms `KL(S‖M)`.
    Kl,
}

impl std::str::FromStr for LossVariant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symkl" => Ok(Self::Symkl),
            "kl" => Ok(Self::Kl),
            other => Err(CoreError::Input(format!("unknown loss `{other}`, expected symkl or kl"))),
        }
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Symkl => "symkl",
            Self::Kl => "kl",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClapConfig {
    /// Shared embedding width `D`.
    pub dim: usize,
    pub hidden: usize,
    pub token_dim: usize,
    /// Std of every encoder weight at initialization.
    pub init_std: f64,
    pub eps_init: f64,
    pub alpha_e: f64,
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Set from the run's ablation flags.
    #[serde(skip, default = "enabled")]
    pub use_emo_label: bool,
    #[serde(skip)]
    pub loss: LossVariant,
}

fn enabled() -> bool {
    true
}

impl Default for ClapConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            hidden: 64,
            token_dim: 32,
            init_std: 0.02,
            eps_init: 2.3,
            alpha_e: 0.2,
            alpha: 1e-8,
            lr: 1e-5,
            batch_size: 16,
            epochs: 40,
            use_emo_label: true,
            loss: LossVariant::Symkl,
        }
    }
}

/// One contrastive batch: acoustic sequences with their categorical and
/// prompt labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmoBatch {
    pub audio_features: Vec<Tensor>,
    pub emotion_label: Vec<usize>,
    pub prompt_tokens: Vec<Vec<usize>>,
    pub prompt_label: Vec<usize>,
}

impl EmoBatch {
    pub fn len(&self) -> usize {
        self.emotion_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emotion_label.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let n = self.len();
        if self.audio_features.len() != n || self.prompt_tokens.len() != n || self.prompt_label.len() != n {
            return Err(CoreError::Data("batch fields disagree in length".into()));
        }
        if let Some(bad) = self.emotion_label.iter().find(|&&c| c >= num_classes) {
            return Err(CoreError::Data(format!("emotion label {bad} out of range")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClapModel {
    pub config: ClapConfig,
    pub store: ParamStore,
    pub audio_dim: usize,
    pub vocab_size: usize,
    audio_mlp: Mlp2,
    token_embedding: ParamId,
    text_mlp: Mlp2,
    log_eps_a: ParamId,
    log_eps_t: ParamId,
}

fn mlp(store: &mut ParamStore, name: &str, dims: (usize, usize, usize), std: f64, rng: &mut impl rand::Rng) -> Mlp2 {
    use emovc_numerics::nn::Linear;
    Mlp2 {
        first: Linear::with_init(store, &format!("{name}.0"), dims.0, dims.1, std, 0.0, rng),
        second: Linear::with_init(store, &format!("{name}.1"), dims.1, dims.2, std, 0.0, rng),
        act: Activation::Gelu,
    }
}

impl ClapModel {
    pub fn new(config: ClapConfig, audio_dim: usize, vocab_size: usize, seed: u64) -> Result<Self> {
        if config.dim == 0 || config.hidden == 0 || config.token_dim == 0 {
            return Err(CoreError::Config("encoder widths must be positive".into()));
        }
        if !(config.eps_init > 0.0) {
            return Err(CoreError::Config("temperatures must start positive".into()));
        }
        let mut rng = SeedStream::new(seed).named("clap.init").rng();
        let mut store = ParamStore::new();
        let std = config.init_std;
        let audio_mlp = mlp(&mut store, "audio", (audio_dim, config.hidden, config.dim), std, &mut rng);
        let token_embedding = store.add_normal("text.embedding", vocab_size, config.token_dim, std, &mut rng);
        let text_mlp = mlp(&mut store, "text", (config.token_dim, config.hidden, config.dim), std, &mut rng);
        let log_eps_a = store.add_const("eps_a.log", 1, 1, config.eps_init.ln());
        let log_eps_t = store.add_const("eps_t.log", 1, 1, config.eps_init.ln());
        Ok(Self {
            config,
            store,
            audio_dim,
            vocab_size,
            audio_mlp,
            token_embedding,
            text_mlp,
            log_eps_a,
            log_eps_t,
        })
    }

    pub fn eps_a(&self) -> f64 {
        self.store.get(self.log_eps_a).data()[0].exp()
    }

    pub fn eps_t(&self) -> f64 {
        self.store.get(self.log_eps_t).data()[0].exp()
    }

    /// Temporal mean of each sequence, `N × D_a`.
    pub fn pool_audio(&self, audio: &[Tensor]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(audio.len() * self.audio_dim);
        for (i, seq) in audio.iter().enumerate() {
            let (t, d) = seq.dims2();
            if t == 0 || seq.is_empty() {
                return Err(CoreError::Data(format!("audio sequence {i} is empty")));
            }
            if d != self.audio_dim {
                return Err(CoreError::Data(format!("audio sequence {i} has width {d}, expected {}", self.audio_dim)));
            }
            for j in 0..d {
                data.push((0..t).map(|r| seq.at(r, j)).sum::<f64>() / t as f64);
            }
        }
        Ok(Tensor::matrix(audio.len(), self.audio_dim, data)?)
    }

    /// `Z_a`: pooled audio through the MLP, unit rows.
    pub fn encode_audio(&self, g: &mut Graph, audio: &[Tensor]) -> Result<Var> {
        let pooled = self.pool_audio(audio)?;
        let x = g.constant(&pooled);
        let z = self.audio_mlp.forward(g, &self.store, x)?;
        Ok(g.l2_normalize_rows(z))
    }

    /// `Z_p`: mean token embedding through the MLP, unit rows.
    pub fn encode_text(&self, g: &mut Graph, prompts: &[Vec<usize>]) -> Result<Var> {
        let mut lengths = Vec::with_capacity(prompts.len());
        let mut flat = Vec::new();
        for (i, p) in prompts.iter().enumerate() {
            if p.is_empty() {
                return Err(CoreError::Data(format!("prompt {i} has no tokens")));
            }
            if let Some(bad) = p.iter().find(|&&t| t >= self.vocab_size) {
                return Err(CoreError::Data(format!("token {bad} outside vocabulary")));
            }
            lengths.push(p.len());
            flat.extend_from_slice(p);
        }
        let segs = Segments::from_lengths(&lengths)?;
        let table = g.param(&self.store, self.token_embedding);
        let emb = g.gather_rows(table, &flat)?;
        let pooled = g.segment_mean(emb, &segs)?;
        let z = self.text_mlp.forward(g, &self.store, pooled)?;
        Ok(g.l2_normalize_rows(z))
    }

    /// Positive temperatures `(ε_a, ε_t)` as graph scalars.
    pub fn temperatures(&self, g: &mut Graph) -> (Var, Var) {
        let a = g.param(&self.store, self.log_eps_a);
        let t = g.param(&self.store, self.log_eps_t);
        (g.exp(a), g.exp(t))
    }

    pub fn soft_labels(&self, batch: &EmoBatch) -> Result<SoftLabelMatrix> {
        SoftLabelMatrix::from_labels(
            &batch.emotion_label,
            &batch.prompt_label,
            self.config.alpha_e,
            self.config.alpha,
            self.config.use_emo_label,
        )
    }

    /// Forward pass and training loss for a batch.
    pub fn loss(&self, g: &mut Graph, batch: &EmoBatch) -> Result<Var> {
        batch.validate(crate::corpus::NUM_EMOTIONS)?;
        if batch.len() < 2 {
            return Err(CoreError::Input("contrastive training needs at least 2 items".into()));
        }
        let za = self.encode_audio(g, &batch.audio_features)?;
        let zp = self.encode_text(g, &batch.prompt_tokens)?;
        let (ea, et) = self.temperatures(g);
        let logits = similarity_logits(g, za, zp, ea, et)?;
        let labels = self.soft_labels(batch)?;
        symkl_loss(g, &logits, &labels.m_s, self.config.alpha, self.config.loss)
    }

    /// Unit-norm audio embeddings, one per sequence.
    pub fn embed_audio(&self, audio: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let z = self.encode_audio(&mut g, audio)?;
        Ok(rows_of(&g, z))
    }

    pub fn embed_prompts(&self, prompts: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let z = self.encode_text(&mut g, prompts)?;
        Ok(rows_of(&g, z))
    }

    pub fn embed(&self, input: EmbedInput<'_>) -> Result<EmotionEmbedding> {
        let (vector, source) = match input {
            EmbedInput::Reference(audio) => (self.embed_audio(std::slice::from_ref(audio))?, EmbedMode::Reference),
            EmbedInput::Prompt(tokens) => (self.embed_prompts(&[tokens.to_vec()])?, EmbedMode::Prompt),
        };
        Ok(EmotionEmbedding {
            vector: vector.into_iter().next().expect("one row"),
            source,
        })
    }
}

fn rows_of(g: &Graph, v: Var) -> Vec<Vec<f64>> {
    let (_, c) = g.shape(v);
    g.value(v).chunks(c).map(<[f64]>::to_vec).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    Reference,
    Prompt,
    Retrieval,
}

impl std::str::FromStr for EmbedMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Self::Reference),
            "prompt" => Ok(Self::Prompt),
            "retrieval" => Ok(Self::Retrieval),
            other => Err(CoreError::Input(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for EmbedMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Reference => "reference",
            Self::Prompt => "prompt",
            Self::Retrieval => "retrieval",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum EmbedInput<'a> {
    Reference(&'a Tensor),
    Prompt(&'a [usize]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmotionEmbedding {
    pub vector: Vec<f64>,
    pub source: EmbedMode,
}

#[derive(Debug, Clone, Copy)]
pub struct SimilarityLogits {
    pub s_audio: Var,
    pub s_text: Var,
}

/// `S^a = ε_a·Z_a·Z_pᵀ`, `S^p = ε_t·Z_p·Z_aᵀ`.
pub fn similarity_logits(g: &mut Graph, za: Var, zp: Var, eps_a: Var, eps_t: Var) -> Result<SimilarityLogits> {
    let ap = g.matmul_nt(za, zp)?;
    let pa = g.matmul_nt(zp, za)?;
    Ok(SimilarityLogits {
        s_audio: g.scale_by(ap, eps_a)?,
        s_text: g.scale_by(pa, eps_t)?,
    })
}

/// 1 where labels agree, rows normalized to sum to 1.
pub fn build_agreement_matrix(labels: &[usize]) -> Tensor {
    let n = labels.len();
    let mut m = Tensor::from_fn(n, n, |i, j| if labels[i] == labels[j] { 1.0 } else { 0.0 });
    for row in m.data_mut().chunks_mut(n.max(1)) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    m
}

/// `α_e·M^y + (1−α_e)·M^p`
pub fn build_soft_labels(m_y: &Tensor, m_p: &Tensor, alpha_e: f64) -> Result<Tensor> {
    if m_y.shape() != m_p.shape() {
        return Err(CoreError::Data(format!(
            "label matrices disagree: {:?} vs {:?}",
            m_y.shape(),
            m_p.shape()
        )));
    }
    let data = m_y.data().iter().zip(m_p.data()).map(|(y, p)| alpha_e * y + (1.0 - alpha_e) * p).collect();
    Ok(Tensor::new(m_y.shape().to_vec(), data)?)
}

/// `(1−α)·M + α/N`
pub fn smooth_targets(m_s: &Tensor, alpha: f64) -> Tensor {
    let n = m_s.cols() as f64;
    m_s.map(|v| (1.0 - alpha) * v + alpha / n)
}

/// `Σ S·log(S/M)` with `0·log 0 = 0`.
pub fn kl_div(s: &Tensor, m: &Tensor) -> Result<f64> {
    if s.shape() != m.shape() {
        return Err(CoreError::Data(format!("KL operands disagree: {:?} vs {:?}", s.shape(), m.shape())));
    }
    let mut total = 0.0;
    for (&p, &q) in s.data().iter().zip(m.data()) {
        if p > 0.0 {
            if q <= 0.0 {
                return Err(CoreError::Domain("target is zero where the source has mass".into()));
            }
            total += p * (p / q).ln();
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMatrix {
    pub m_y: Tensor,
    pub m_p: Tensor,
    pub m_s: Tensor,
    pub alpha_e: f64,
    pub alpha: f64,
}

impl SoftLabelMatrix {
    /// With `use_emo_label` off the categorical labels are ignored and
    /// `m_s` is exactly `m_p`.
    pub fn from_labels(emotion: &[usize], prompt: &[usize], alpha_e: f64, alpha: f64, use_emo_label: bool) -> Result<Self> {
        let m_y = build_agreement_matrix(emotion);
        let m_p = build_agreement_matrix(prompt);
        let m_s = if use_emo_label {
            build_soft_labels(&m_y, &m_p, alpha_e)?
        } else {
            m_p.clone()
        };
        Ok(Self {
            m_y,
            m_p,
            m_s,
            alpha_e: if use_emo_label { alpha_e } else { 0.0 },
            alpha,
        })
    }

    pub fn smoothed(&self) -> Tensor {
        smooth_targets(&self.m_s, self.alpha)
    }
}

/// Forward term `Σ S·(log S − log M̃)` and reverse term
/// `Σ M̃·(log M̃ − log max(S, floor))` for one logit matrix.
fn kl_terms(g: &mut Graph, logits: Var, m_tilde: &Tensor, log_m: &Tensor) -> (Var, Var) {
    let s = g.softmax_rows(logits);
    let log_s = g.log_softmax_rows(logits);
    let lm = g.constant(log_m);
    let diff = g.sub(log_s, lm).expect("same shape");
    let fwd = g.mul(s, diff).expect("same shape");
    let forward = g.sum(fwd);

    let log_sf = g.log_floor(s, PROB_FLOOR);
    let diff = g.sub(lm, log_sf).expect("same shape");
    let mt = g.constant(m_tilde);
    let rev = g.mul(mt, diff).expect("same shape");
    (forward, g.sum(rev))
}

/// Symmetric KL between the row-softmaxed logits and the smoothed soft
/// labels, averaged over its four terms. The `Kl` variant averages only the
/// two forward terms.
pub fn symkl_loss(g: &mut Graph, logits: &SimilarityLogits, m_s: &Tensor, alpha: f64, variant: LossVariant) -> Result<Var> {
    let (n, c) = m_s.dims2();
    for v in [logits.s_audio, logits.s_text] {
        if g.shape(v) != (n, c) {
            return Err(CoreError::Data(format!("logits {:?} vs labels {:?}", g.shape(v), (n, c))));
        }
    }
    let m_tilde = smooth_targets(m_s, alpha);
    if m_tilde.data().iter().any(|&v| v <= 0.0) {
        return Err(CoreError::Domain("smoothed targets must be strictly positive; alpha is zero".into()));
    }
    let log_m = m_tilde.map(f64::ln);
    let (fa, ra) = kl_terms(g, logits.s_audio, &m_tilde, &log_m);
    let (fp, rp) = kl_terms(g, logits.s_text, &m_tilde, &log_m);
    let total = match variant {
        LossVariant::Symkl => {
            let a = g.add(fa, ra)?;
            let p = g.add(fp, rp)?;
            let t = g.add(a, p)?;
            g.scale(t, 0.25)
        }
        LossVariant::Kl => {
            let t = g.add(fa, fp)?;
            g.scale(t, 0.5)
        }
    };
    Ok(total)
}

/// Forward, loss, backward and one optimizer update. Returns the pre-step
/// loss.
pub fn clap_train_step(model: &mut ClapModel, optim: &mut Adam, batch: &EmoBatch, step: u64) -> Result<f64> {
    let mut g = Graph::new();
    let loss = model.loss(&mut g, batch)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(CoreError::NonFinite {
            step,
            detail: format!("contrastive loss is {value}"),
        });
    }
    let grads = g.backward(loss)?;
    model.store.zero_grad();
    grads.write_to(&mut model.store)?;
    optim.step(&mut model.store)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agreement_examples() {
        assert_eq!(build_agreement_matrix(&[0, 1, 2]), Tensor::identity(3));
        let m = build_agreement_matrix(&[4, 4]);
        assert_eq!(m.data(), &[0.5; 4]);
        let m = build_agreement_matrix(&[1, 1, 2]);
        assert_eq!(m.data(), &[0.5, 0.5, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn soft_label_examples() {
        let m_y = build_agreement_matrix(&[0, 0]);
        let m_p = Tensor::identity(2);
        let m_s = build_soft_labels(&m_y, &m_p, 0.2).unwrap();
        for (a, b) in m_s.data().iter().zip([0.9, 0.1, 0.1, 0.9]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(build_soft_labels(&m_y, &m_y, 0.2).unwrap(), m_y);
        assert_eq!(build_soft_labels(&m_y, &m_p, 1.0).unwrap(), m_y);
        assert!(build_soft_labels(&m_y, &Tensor::identity(3), 0.2).is_err());
    }

    #[test]
    fn smoothing_examples() {
        let m = Tensor::identity(2);
        assert_eq!(smooth_targets(&m, 0.0), m);
        let s = smooth_targets(&m, 1e-8);
        assert!((s.at(0, 1) - 5e-9).abs() < 1e-24);
        assert!(s.data().iter().all(|&v| v >= 1e-8 / 2.0));
    }

    #[test]
    fn kl_examples() {
        let m = build_agreement_matrix(&[1, 1]);
        assert_eq!(kl_div(&m, &m).unwrap(), 0.0);
        let s = Tensor::identity(2);
        assert!((kl_div(&s, &m).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!(matches!(kl_div(&m, &s), Err(CoreError::Domain(_))));
    }

    #[test]
    fn ablation_uses_prompt_labels_only() {
        let l = SoftLabelMatrix::from_labels(&[0, 0, 1], &[0, 1, 3], 0.2, 1e-8, false).unwrap();
        assert_eq!(l.m_s, l.m_p);
    }

    #[test]
    fn similarity_of_orthonormal_embeddings_is_identity() {
        let mut g = Graph::new();
        let z = g.constant(&Tensor::identity(3));
        let one = g.constant(&Tensor::scalar(1.0));
        let s = similarity_logits(&mut g, z, z, one, one).unwrap();
        assert_eq!(g.to_tensor(s.s_audio), Tensor::identity(3));
    }

    #[test]
    fn loss_variant_parses() {
        assert_eq!("kl".parse::<LossVariant>().unwrap(), LossVariant::Kl);
        assert!("l2".parse::<LossVariant>().is_err());
    }
}
