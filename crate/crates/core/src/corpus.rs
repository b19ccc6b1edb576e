//! Synthetic emotional speech corpus with a known generative oracle.
//!
//! Every utterance pairs a content sequence (a surrogate for phonetic
//! posteriorgrams), an acoustic surrogate that carries the emotion, a
//! templated natural-language prompt and a Mel surrogate produced by a fixed
//! linear map of content plus an intensity-scaled emotion offset.

use std::collections::BTreeSet;

use emovc_numerics::rng::normal_vec;
use emovc_numerics::{SeedStream, Tensor};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const NUM_EMOTIONS: usize = 7;
pub const TEMPLATES_PER_CLASS: usize = 3;
pub const MAX_PROMPT_TOKENS: usize = 24;

pub const EMOTION_NAMES: [&str; NUM_EMOTIONS] =
    ["neutral", "happy", "sad", "angry", "fear", "surprise", "disgust"];

const ADJECTIVES: [[&str; 4]; NUM_EMOTIONS] = [
    ["calm", "neutral", "plain", "even"],
    ["happy", "cheerful", "joyful", "delighted"],
    ["sad", "sorrowful", "gloomy", "melancholy"],
    ["angry", "furious", "irritated", "hostile"],
    ["fearful", "scared", "frightened", "anxious"],
    ["surprised", "astonished", "amazed", "startled"],
    ["disgusted", "repulsed", "revolted", "disdainful"],
];

/// Degree adverbs by intensity bucket: mild, moderate, strong.
const ADVERBS: [[&str; 3]; TEMPLATES_PER_CLASS] = [
    ["slightly", "mildly", "somewhat"],
    ["clearly", "noticeably", "fairly"],
    ["extremely", "very", "intensely"],
];

const NOUNS: [&str; 4] = ["voice", "tone", "delivery", "manner"];

const PATTERNS: [&str; TEMPLATES_PER_CLASS] = [
    "speak in a {adv} {adj} {noun}",
    "the {noun} should sound {adv} {adj}",
    "make this {noun} {adv} {adj} please",
];

/// Mixture weights of the permutations driving the content Markov walk.
const WALK_WEIGHTS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusDims {
    pub content_dim: usize,
    pub emotion_dim: usize,
    /// Extra acoustic dimensions on top of the content dimensions.
    pub audio_extra: usize,
    pub mel_dim: usize,
    pub vocab: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub noise_std: f64,
    pub audio_emotion_scale: f64,
    pub mel_emotion_scale: f64,
    pub noise_free: bool,
}

impl Default for CorpusDims {
    fn default() -> Self {
        Self {
            content_dim: 8,
            emotion_dim: 8,
            audio_extra: 4,
            mel_dim: 16,
            vocab: 32,
            t_min: 8,
            t_max: 16,
            noise_std: 0.01,
            audio_emotion_scale: 2.0,
            mel_emotion_scale: 1.0,
            noise_free: false,
        }
    }
}

impl CorpusDims {
    pub fn audio_dim(&self) -> usize {
        self.content_dim + self.audio_extra
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.emotion_dim < NUM_EMOTIONS {
            return bad(format!(
                "emotion_dim {} cannot hold {NUM_EMOTIONS} orthonormal directions",
                self.emotion_dim
            ));
        }
        if self.audio_dim() < self.emotion_dim {
            return bad("audio dimension must be at least emotion_dim".into());
        }
        if self.content_dim == 0 || self.mel_dim == 0 || self.vocab < 2 {
            return bad("content_dim, mel_dim must be positive and vocab at least 2".into());
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return bad(format!("bad frame range [{}, {}]", self.t_min, self.t_max));
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub id: usize,
    pub emotion_id: usize,
    /// Intensity bucket 0 (mild) to 2 (strong).
    pub level: usize,
    pub pattern: &'static str,
}

/// Fixed matrices of the generative process.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    /// `vocab × D_c`, centred over the vocabulary.
    pub token_embeddings: Tensor,
    /// Successor permutations of the content walk.
    pub walk: Vec<Vec<usize>>,
    /// `D_a × D_e` with orthonormal columns.
    pub audio_projection: Tensor,
    /// `D_c × D_mel`; a Mel frame is `content · A`.
    pub mel_content: Tensor,
    /// `7 × D_mel` rows `B·u_c`.
    pub mel_emotion: Tensor,
    /// `7 × D_a` rows `P·u_c`, unit norm.
    pub audio_axes: Tensor,
}

/// Emotion classes, their ground-truth axes, prompt templates and the
/// oracle matrices, all fixed by one world seed.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionSpec {
    pub dims: CorpusDims,
    pub world_seed: u64,
    /// `7 × D_e` orthonormal rows.
    pub class_directions: Tensor,
    pub prompt_templates: Vec<PromptTemplate>,
    pub oracle: Oracle,
}

fn orthonormal_columns(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_vec(rows, cols, normal_vec(rng, rows * cols));
    g.qr().q()
}

fn dmatrix_to_tensor(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

impl EmotionSpec {
    pub fn new(dims: CorpusDims, world_seed: u64) -> Result<Self> {
        dims.validate()?;
        let root = SeedStream::new(world_seed).named("world");
        let d_a = dims.audio_dim();

        let dirs = orthonormal_columns(dims.emotion_dim, NUM_EMOTIONS, &mut root.named("directions").rng());
        let class_directions = dmatrix_to_tensor(&dirs.transpose());

        let p = orthonormal_columns(d_a, dims.emotion_dim, &mut root.named("audio").rng());
        let audio_axes = dmatrix_to_tensor(&(&p * &dirs).transpose());
        let audio_projection = dmatrix_to_tensor(&p);

        let mut rng = root.named("tokens").rng();
        let mut emb = normal_vec(&mut rng, dims.vocab * dims.content_dim);
        for j in 0..dims.content_dim {
            let mean = (0..dims.vocab).map(|v| emb[v * dims.content_dim + j]).sum::<f64>() / dims.vocab as f64;
            for v in 0..dims.vocab {
                emb[v * dims.content_dim + j] -= mean;
            }
        }
        let token_embeddings = Tensor::matrix(dims.vocab, dims.content_dim, emb)?;

        let mut rng = root.named("walk").rng();
        let walk = (0..WALK_WEIGHTS.len())
            .map(|_| {
                let mut perm: Vec<usize> = (0..dims.vocab).collect();
                perm.shuffle(&mut rng);
                perm
            })
            .collect();

        let mut rng = root.named("mel").rng();
        let a_std = 1.0 / (dims.content_dim as f64).sqrt();
        let a = normal_vec(&mut rng, dims.content_dim * dims.mel_dim);
        let mel_content = Tensor::matrix(dims.content_dim, dims.mel_dim, a.iter().map(|v| v * a_std).collect())?;
        let b_std = dims.mel_emotion_scale / (dims.emotion_dim as f64).sqrt();
        let b = DMatrix::from_vec(
            dims.mel_dim,
            dims.emotion_dim,
            normal_vec(&mut rng, dims.mel_dim * dims.emotion_dim).iter().map(|v| v * b_std).collect(),
        );
        let mel_emotion = dmatrix_to_tensor(&(&b * &dirs).transpose());

        let prompt_templates = (0..NUM_EMOTIONS)
            .flat_map(|c| {
                (0..TEMPLATES_PER_CLASS).map(move |k| PromptTemplate {
                    id: c * TEMPLATES_PER_CLASS + k,
                    emotion_id: c,
                    level: k,
                    pattern: PATTERNS[k],
                })
            })
            .collect();

        Ok(Self {
            dims,
            world_seed,
            class_directions,
            prompt_templates,
            oracle: Oracle {
                token_embeddings,
                walk,
                audio_projection,
                mel_content,
                mel_emotion,
                audio_axes,
            },
        })
    }

    pub fn num_classes(&self) -> usize {
        NUM_EMOTIONS
    }

    pub fn check_emotion(&self, emotion_id: usize) -> Result<()> {
        if emotion_id >= NUM_EMOTIONS {
            return Err(CoreError::Input(format!("unknown emotion id {emotion_id}")));
        }
        Ok(())
    }

    /// Template id for a class at a given ground-truth intensity.
    pub fn template_for(&self, emotion_id: usize, intensity: f64) -> usize {
        let level = (((intensity - 0.5) / 0.5) * TEMPLATES_PER_CLASS as f64).floor();
        let level = level.clamp(0.0, (TEMPLATES_PER_CLASS - 1) as f64) as usize;
        emotion_id * TEMPLATES_PER_CLASS + level
    }

    /// Sorted vocabulary of every word any template can produce.
    pub fn prompt_vocabulary(&self) -> Vocabulary {
        let mut words = BTreeSet::new();
        for pattern in PATTERNS {
            for w in pattern.split_whitespace().filter(|w| !w.starts_with('{')) {
                words.insert(w.to_string());
            }
        }
        words.extend(ADJECTIVES.iter().flatten().map(|w| w.to_string()));
        words.extend(ADVERBS.iter().flatten().map(|w| w.to_string()));
        words.extend(NOUNS.iter().map(|w| w.to_string()));
        Vocabulary::new(words.into_iter().collect())
    }
}

/// Word-level prompt vocabulary. Id 0 is reserved for unknown words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    pub const UNK: usize = 0;

    pub fn new(words: Vec<String>) -> Self {
        Self { words }
    }

    pub fn size(&self) -> usize {
        self.words.len() + 1
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.words.iter().position(|v| *v == w).map_or(Self::UNK, |i| i + 1)
            })
            .collect()
    }
}

/// Fill one of a class's templates; slot words vary with `seed`.
pub fn render_prompt(spec: &EmotionSpec, emotion_id: usize, template_id: usize, seed: u64) -> Result<(String, usize)> {
    spec.check_emotion(emotion_id)?;
    let template = spec
        .prompt_templates
        .get(template_id)
        .ok_or_else(|| CoreError::Input(format!("unknown template id {template_id}")))?;
    if template.emotion_id != emotion_id {
        return Err(CoreError::Input(format!(
            "template {template_id} belongs to class {}, not {emotion_id}",
            template.emotion_id
        )));
    }
    let mut rng = SeedStream::new(seed).named("prompt").rng();
    let adv = ADVERBS[template.level][rng.random_range(0..ADVERBS[template.level].len())];
    let adj = ADJECTIVES[emotion_id][rng.random_range(0..ADJECTIVES[emotion_id].len())];
    let noun = NOUNS[rng.random_range(0..NOUNS.len())];
    let text = template
        .pattern
        .replace("{adv}", adv)
        .replace("{adj}", adj)
        .replace("{noun}", noun);
    Ok((text, template_id))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: usize,
    pub content_tokens: Vec<usize>,
    /// `T × D_c`
    pub content_features: Tensor,
    /// `T × D_a`
    pub audio_features: Tensor,
    pub emotion_id: usize,
    pub intensity_gt: f64,
    pub prompt_text: String,
    pub prompt_template_id: usize,
    pub prompt_tokens: Vec<usize>,
    /// `T × D_mel`
    pub mel_target: Tensor,
    /// Seed of the Mel observation noise, kept so the target is regenerable.
    pub mel_noise_seed: u64,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.content_tokens.len()
    }
}

/// Mel surrogate `content·A + intensity·B·u_c`, plus N(0, σ²) noise drawn
/// from `noise_seed` when given.
pub fn synth_target(
    spec: &EmotionSpec,
    content: &Tensor,
    emotion_id: usize,
    intensity: f64,
    noise_seed: Option<u64>,
) -> Result<Tensor> {
    spec.check_emotion(emotion_id)?;
    if !(0.0..=2.0).contains(&intensity) {
        return Err(CoreError::Input(format!("intensity {intensity} outside [0, 2]")));
    }
    let mut mel = content.matmul(&spec.oracle.mel_content)?;
    let offset = spec.oracle.mel_emotion.row(emotion_id).to_vec();
    let d = spec.dims.mel_dim;
    let noise = match noise_seed {
        Some(seed) if spec.dims.noise_std > 0.0 => {
            normal_vec(&mut SeedStream::new(seed).rng(), mel.len())
        }
        _ => vec![0.0; mel.len()],
    };
    for (i, v) in mel.data_mut().iter_mut().enumerate() {
        *v += intensity * offset[i % d] + spec.dims.noise_std * noise[i];
    }
    Ok(mel)
}

/// Rebuild an utterance's Mel target from its stored fields.
pub fn regenerate_mel(spec: &EmotionSpec, u: &Utterance) -> Result<Tensor> {
    let seed = (!spec.dims.noise_free).then_some(u.mel_noise_seed);
    synth_target(spec, &u.content_features, u.emotion_id, u.intensity_gt, seed)
}

fn content_walk(spec: &EmotionSpec, len: usize, rng: &mut impl Rng) -> Vec<usize> {
    let vocab = spec.dims.vocab;
    let mut tokens = Vec::with_capacity(len);
    let mut cur = rng.random_range(0..vocab);
    tokens.push(cur);
    while tokens.len() < len {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = WALK_WEIGHTS.len() - 1;
        for (i, w) in WALK_WEIGHTS.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        cur = spec.oracle.walk[k][cur];
        tokens.push(cur);
    }
    tokens
}

fn generate_utterance(spec: &EmotionSpec, vocab: &Vocabulary, id: usize, root: SeedStream) -> Result<Utterance> {
    let dims = &spec.dims;
    let stream = root.child(id as u64);
    let emotion_id = id % NUM_EMOTIONS;
    let mut rng = stream.named("meta").rng();
    let intensity_gt = 0.5 + 0.5 * rng.random::<f64>();
    let frames = rng.random_range(dims.t_min..=dims.t_max);
    let content_tokens = content_walk(spec, frames, &mut rng);

    let noise = if dims.noise_free { 0.0 } else { dims.noise_std };
    let d_c = dims.content_dim;
    let content_noise = normal_vec(&mut stream.named("content").rng(), frames * d_c);
    let content_features = Tensor::from_fn(frames, d_c, |t, j| {
        spec.oracle.token_embeddings.at(content_tokens[t], j) + noise * content_noise[t * d_c + j]
    });

    let d_a = dims.audio_dim();
    let axis = spec.oracle.audio_axes.row(emotion_id);
    let audio_noise = normal_vec(&mut stream.named("audio").rng(), frames * d_a);
    let audio_features = Tensor::from_fn(frames, d_a, |t, j| {
        let content = if j < d_c { content_features.at(t, j) } else { 0.0 };
        content + dims.audio_emotion_scale * intensity_gt * axis[j] + noise * audio_noise[t * d_a + j]
    });

    let mel_noise_seed = stream.named("mel").key();
    let template = spec.template_for(emotion_id, intensity_gt);
    let (prompt_text, prompt_template_id) = render_prompt(spec, emotion_id, template, stream.named("prompt").key())?;
    let prompt_tokens = vocab.encode(&prompt_text);
    let mut u = Utterance {
        id,
        content_tokens,
        content_features,
        audio_features,
        emotion_id,
        intensity_gt,
        prompt_text,
        prompt_template_id,
        prompt_tokens,
        mel_target: Tensor::scalar(0.0),
        mel_noise_seed,
    };
    u.mel_target = regenerate_mel(spec, &u)?;
    Ok(u)
}

/// Balanced corpus of `n` utterances; item `i` has class `i mod 7`.
pub fn generate_corpus(spec: &EmotionSpec, n: usize, seed: u64) -> Result<Vec<Utterance>> {
    if n < NUM_EMOTIONS {
        return Err(CoreError::Input(format!("need at least {NUM_EMOTIONS} utterances, got {n}")));
    }
    let vocab = spec.prompt_vocabulary();
    let root = SeedStream::new(seed).named("corpus");
    (0..n).map(|id| generate_utterance(spec, &vocab, id, root)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

/// Stratified train/val/test split. Every class contributes at least one
/// item to each part.
pub fn split(corpus: &[Utterance], ratios: [f64; 3], seed: u64) -> Result<CorpusSplit> {
    if ratios.iter().any(|r| !r.is_finite() || *r <= 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CoreError::Input(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    let mut out = CorpusSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
        ratios,
    };
    let root = SeedStream::new(seed).named("split");
    for class in 0..NUM_EMOTIONS {
        let mut ids: Vec<usize> = corpus.iter().filter(|u| u.emotion_id == class).map(|u| u.id).collect();
        let n = ids.len();
        if n < 3 {
            return Err(CoreError::Input(format!("class {class} has {n} items, cannot split three ways")));
        }
        ids.sort_unstable();
        ids.shuffle(&mut root.child(class as u64).rng());
        let n_val = ((n as f64 * ratios[1]).round() as usize).max(1);
        let n_test = ((n as f64 * ratios[2]).round() as usize).max(1);
        let n_train = n.saturating_sub(n_val + n_test);
        if n_train == 0 {
            return Err(CoreError::Input(format!("ratios {ratios:?} leave class {class} without training items")));
        }
        out.train.extend(&ids[..n_train]);
        out.val.extend(&ids[n_train..n_train + n_val]);
        out.test.extend(&ids[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> EmotionSpec {
        EmotionSpec::new(CorpusDims::default(), 7).unwrap()
    }

    #[test]
    fn directions_are_orthonormal() {
        let s = spec();
        let d = &s.class_directions;
        for i in 0..NUM_EMOTIONS {
            for j in 0..NUM_EMOTIONS {
                let dot: f64 = d.row(i).iter().zip(d.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn template_buckets_cover_intensity_range() {
        let s = spec();
        assert_eq!(s.template_for(2, 0.5), 6);
        assert_eq!(s.template_for(2, 0.7), 7);
        assert_eq!(s.template_for(2, 0.99), 8);
        assert_eq!(s.template_for(2, 1.0), 8);
    }

    #[test]
    fn render_prompt_contract() {
        let s = spec();
        let a = render_prompt(&s, 3, 9, 11).unwrap();
        assert_eq!(a, render_prompt(&s, 3, 9, 11).unwrap());
        let b = render_prompt(&s, 3, 10, 11).unwrap();
        assert_ne!(a.0, b.0);
        let vocab = s.prompt_vocabulary();
        let tokens = vocab.encode(&a.0);
        assert!(!tokens.is_empty() && tokens.len() <= MAX_PROMPT_TOKENS);
        assert!(tokens.iter().all(|&t| t != Vocabulary::UNK));
        assert!(render_prompt(&s, 3, 0, 11).is_err());
        assert!(render_prompt(&s, 7, 0, 11).is_err());
        assert!(render_prompt(&s, 0, 21, 11).is_err());
    }

    #[test]
    fn synth_target_rejects_bad_inputs() {
        let s = spec();
        let c = Tensor::zeros(&[2, 8]);
        assert!(synth_target(&s, &c, 7, 1.0, None).is_err());
        assert!(synth_target(&s, &c, 0, 2.5, None).is_err());
    }

    #[test]
    fn zero_intensity_depends_only_on_content() {
        let s = spec();
        let c = Tensor::from_fn(3, 8, |i, j| (i + j) as f64 * 0.1);
        let a = synth_target(&s, &c, 1, 0.0, None).unwrap();
        let b = synth_target(&s, &c, 5, 0.0, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generate_rejects_small_n() {
        assert!(generate_corpus(&spec(), 6, 1).is_err());
    }

    #[test]
    fn split_rejects_degenerate_ratios() {
        let corpus = generate_corpus(&spec(), 70, 1).unwrap();
        assert!(split(&corpus, [0.8, 0.2, 0.0], 0).is_err());
        assert!(split(&corpus, [0.8, 0.1, 0.2], 0).is_err());
        assert!(split(&corpus[..7], [0.8, 0.1, 0.1], 0).is_err());
    }
}
