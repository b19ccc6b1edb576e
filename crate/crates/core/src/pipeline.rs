//! Training loops, the three conversion modes and the evaluation sweep.

use emovc_numerics::{Adam, AdamConfig, SeedStream, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::cfm::SamplerConfig;
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::clap::{clap_train_step, ClapConfig, ClapModel, EmbedMode, EmoBatch, LossVariant};
use crate::config::{CorpusConfig, EvalConfig, RunConfig};
use crate::corpus::{generate_corpus, split, synth_target, CorpusSplit, EmotionSpec, Utterance, NUM_EMOTIONS, TEMPLATES_PER_CLASS};
use crate::error::{CoreError, Result};
use crate::fuencoder::PackedSeqs;
use crate::metrics::{mean_abs_error, EmotionProbe, MelNorm};
use crate::store::ReferenceStore;
use crate::vc::{vc_train_step, VcBatch, VcConfig, VcModel};

pub const CLAP_KIND: &str = "clap";
pub const VC_KIND: &str = "vc";

/// A generated corpus with its split and the Mel normalizer fitted on the
/// training part.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: EmotionSpec,
    pub corpus: Vec<Utterance>,
    pub split: CorpusSplit,
    pub norm: MelNorm,
}

impl Dataset {
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        let spec = EmotionSpec::new(config.dims, config.world_seed)?;
        let corpus = generate_corpus(&spec, config.n, config.seed)?;
        Self::from_parts(spec, corpus, config.split, config.seed)
    }

    pub fn from_parts(spec: EmotionSpec, corpus: Vec<Utterance>, ratios: [f64; 3], seed: u64) -> Result<Self> {
        if corpus.iter().enumerate().any(|(i, u)| u.id != i) {
            return Err(CoreError::Data("utterance ids must equal their positions".into()));
        }
        let split = split(&corpus, ratios, seed)?;
        let norm = MelNorm::fit(split.train.iter().map(|&i| &corpus[i].mel_target))?;
        Ok(Self {
            spec,
            corpus,
            split,
            norm,
        })
    }

    pub fn get(&self, id: usize) -> &Utterance {
        &self.corpus[id]
    }

    pub fn subset(&self, ids: &[usize]) -> Vec<&Utterance> {
        ids.iter().map(|&i| &self.corpus[i]).collect()
    }

    pub fn vocab_size(&self) -> usize {
        self.spec.prompt_vocabulary().size()
    }

    /// Probe fitted on the training split.
    pub fn probe(&self) -> Result<EmotionProbe> {
        EmotionProbe::fit(&self.subset(&self.split.train), &self.norm)
    }
}

pub fn emo_batch(utts: &[&Utterance]) -> EmoBatch {
    EmoBatch {
        audio_features: utts.iter().map(|u| u.audio_features.clone()).collect(),
        emotion_label: utts.iter().map(|u| u.emotion_id).collect(),
        prompt_tokens: utts.iter().map(|u| u.prompt_tokens.clone()).collect(),
        prompt_label: utts.iter().map(|u| u.prompt_template_id).collect(),
    }
}

/// Fraction of prompts whose top-1 reference in `store` carries the
/// prompt's class.
pub fn retrieval_accuracy(model: &ClapModel, prompts: &[&Utterance], store: &ReferenceStore) -> Result<f64> {
    if prompts.is_empty() {
        return Err(CoreError::Data("no prompts to score".into()));
    }
    let tokens: Vec<Vec<usize>> = prompts.iter().map(|u| u.prompt_tokens.clone()).collect();
    let embs = model.embed_prompts(&tokens)?;
    let mut hits = 0;
    for (u, q) in prompts.iter().zip(&embs) {
        let (id, _) = store.retrieve(q, 1)?[0];
        if store.entry(id).expect("retrieved id is stored").label == u.emotion_id {
            hits += 1;
        }
    }
    Ok(hits as f64 / prompts.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClapEpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Val prompt to val reference top-1 class accuracy.
    pub val_accuracy: f64,
}

pub fn clap_seed(run_seed: u64) -> u64 {
    SeedStream::new(run_seed).named("clap").key()
}

/// Train the contrastive encoders on the training split. `on_epoch` sees
/// every log entry as it is produced.
pub fn train_clap(
    config: &RunConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&ClapEpochLog),
) -> Result<(ClapModel, Vec<ClapEpochLog>)> {
    let ccfg = config.clap_config();
    let mut model = ClapModel::new(ccfg, data.spec.dims.audio_dim(), data.vocab_size(), clap_seed(config.seed))?;
    let mut optim = Adam::new(AdamConfig::adam(ccfg.lr), &model.store);
    let val = data.subset(&data.split.val);
    let shuffle = SeedStream::new(config.seed).named("clap.shuffle");
    let mut logs = Vec::with_capacity(ccfg.epochs);
    let mut step = 0u64;
    for epoch in 0..ccfg.epochs {
        let mut order = data.split.train.clone();
        order.shuffle(&mut shuffle.child(epoch as u64).rng());
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(ccfg.batch_size).filter(|c| c.len() >= 2) {
            total += clap_train_step(&mut model, &mut optim, &emo_batch(&data.subset(chunk)), step)?;
            step += 1;
            count += 1;
        }
        let store = ReferenceStore::build(&model, &val)?;
        let log = ClapEpochLog {
            epoch: epoch + 1,
            loss: total / count.max(1) as f64,
            val_accuracy: retrieval_accuracy(&model, &val, &store)?,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((model, logs))
}

fn meta<T: std::str::FromStr>(c: &Checkpoint, key: &str) -> std::result::Result<T, CheckpointError> {
    c.meta(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CheckpointError::CorruptManifest(format!("metadata `{key}` missing or malformed")))
}

pub fn clap_checkpoint(model: &ClapModel, config_hash: &str) -> Checkpoint {
    let mut c = Checkpoint::new(CLAP_KIND, 0, config_hash);
    c.set_meta("config", toml::to_string(&model.config).expect("serializes"));
    c.set_meta("use_emo_label", model.config.use_emo_label);
    c.set_meta("loss", model.config.loss);
    c.set_meta("audio_dim", model.audio_dim);
    c.set_meta("vocab_size", model.vocab_size);
    c.push_params("clap.", &model.store);
    c
}

pub fn load_clap(c: &Checkpoint) -> Result<ClapModel> {
    c.expect_kind(CLAP_KIND)?;
    let text = c.meta("config").ok_or_else(|| CheckpointError::CorruptManifest("no config".into()))?;
    let mut config: ClapConfig = toml::from_str(text).map_err(|e| CheckpointError::CorruptManifest(e.to_string()))?;
    config.use_emo_label = meta(c, "use_emo_label")?;
    config.loss = meta::<LossVariant>(c, "loss")?;
    let mut model = ClapModel::new(config, meta(c, "audio_dim")?, meta(c, "vocab_size")?, 0)?;
    c.load_params("clap.", &mut model.store)?;
    Ok(model)
}

/// Audio embeddings of every utterance, indexed by id.
pub fn audio_embeddings(clap: &ClapModel, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let audio: Vec<Tensor> = data.corpus.iter().map(|u| u.audio_features.clone()).collect();
    clap.embed_audio(&audio)
}

pub fn vc_batch(data: &Dataset, embeddings: &[Vec<f64>], ids: &[usize]) -> Result<VcBatch> {
    let utts = data.subset(ids);
    let content = PackedSeqs::pack(&utts.iter().map(|u| &u.content_features).collect::<Vec<_>>())?;
    let width = embeddings[0].len();
    let emb = Tensor::from_fn(ids.len(), width, |i, j| embeddings[ids[i]][j]);
    let mels: Vec<Tensor> = utts.iter().map(|u| data.norm.normalize(&u.mel_target)).collect();
    let mel = PackedSeqs::pack(&mels.iter().collect::<Vec<_>>())?.rows;
    Ok(VcBatch { content, emb, mel })
}

/// Conversion model, optimizer and step counter. Batches and per-step
/// randomness are pure functions of `(seed, step)`, so a trainer restored
/// from a checkpoint continues exactly where the original left off.
#[derive(Debug, Clone)]
pub struct VcTrainer {
    pub config: VcConfig,
    pub model: VcModel,
    pub optim: Adam,
    pub step: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub step: u64,
    pub loss: f64,
}

impl VcTrainer {
    pub fn new(config: VcConfig, seed: u64) -> Result<Self> {
        let model = VcModel::new(&config, SeedStream::new(seed).named("vc").key())?;
        let optim = Adam::new(AdamConfig::adamw(config.lr, config.weight_decay), &model.store);
        Ok(Self {
            config,
            model,
            optim,
            step: 0,
            seed,
        })
    }

    pub fn batch_ids(&self, train: &[usize], step: u64) -> Vec<usize> {
        let mut rng = SeedStream::new(self.seed).named("vc.batch").child(step).rng();
        let b = self.config.batch_size.min(train.len());
        rand::seq::index::sample(&mut rng, train.len(), b)
            .into_iter()
            .map(|i| train[i])
            .collect()
    }

    /// One optimizer step; returns the loss before the update.
    pub fn step(&mut self, data: &Dataset, embeddings: &[Vec<f64>]) -> Result<f64> {
        let ids = self.batch_ids(&data.split.train, self.step);
        let batch = vc_batch(data, embeddings, &ids)?;
        self.optim.config.lr = self.config.lr_at(self.step);
        let stream = SeedStream::new(self.seed).named("vc.step").child(self.step);
        let loss = vc_train_step(&mut self.model, &mut self.optim, &batch, stream, self.step)?;
        self.step += 1;
        Ok(loss)
    }

    /// Step until `until`, logging window means every `log_every` steps.
    pub fn train_until(
        &mut self,
        data: &Dataset,
        embeddings: &[Vec<f64>],
        until: u64,
        log_every: u64,
        mut on_log: impl FnMut(&LossPoint),
    ) -> Result<Vec<LossPoint>> {
        let mut logs = Vec::new();
        let mut window = 0.0;
        let mut count = 0u64;
        while self.step < until {
            window += self.step(data, embeddings)?;
            count += 1;
            if self.step.is_multiple_of(log_every) || self.step == until {
                let p = LossPoint {
                    step: self.step,
                    loss: window / count as f64,
                };
                on_log(&p);
                logs.push(p);
                window = 0.0;
                count = 0;
            }
        }
        Ok(logs)
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let mut c = Checkpoint::new(VC_KIND, self.step, config_hash);
        c.set_meta("config", toml::to_string(&self.config).expect("serializes"));
        c.set_meta("use_aig", self.config.fuencoder.use_aig);
        c.set_meta("seed", self.seed);
        c.set_meta("optim_step", self.optim.state.step);
        c.push_params("vc.", &self.model.store);
        for (i, (m, v)) in self.optim.state.first.iter().zip(&self.optim.state.second).enumerate() {
            c.push(format!("adam.m.{i}"), &Tensor::matrix(1, m.len(), m.clone()).expect("shape"));
            c.push(format!("adam.v.{i}"), &Tensor::matrix(1, v.len(), v.clone()).expect("shape"));
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(VC_KIND)?;
        let text = c.meta("config").ok_or_else(|| CheckpointError::CorruptManifest("no config".into()))?;
        let mut config: VcConfig = toml::from_str(text).map_err(|e| CheckpointError::CorruptManifest(e.to_string()))?;
        config.fuencoder.use_aig = meta(c, "use_aig")?;
        let mut t = Self::new(config, meta(c, "seed")?)?;
        c.load_params("vc.", &mut t.model.store)?;
        t.step = c.manifest.step;
        t.optim.state.step = meta(c, "optim_step")?;
        let n = t.optim.state.first.len();
        for i in 0..n {
            for (name, dst) in [("m", &mut t.optim.state.first[i]), ("v", &mut t.optim.state.second[i])] {
                let src = c.require(&format!("adam.{name}.{i}"))?;
                if src.len() != dst.len() {
                    return Err(CheckpointError::Incompatible(format!("optimizer moment {i} has the wrong size")).into());
                }
                dst.copy_from_slice(src.data());
            }
        }
        Ok(t)
    }
}

/// Train the conversion model against frozen audio embeddings.
pub fn train_vc(
    config: &RunConfig,
    data: &Dataset,
    clap: &ClapModel,
    resume: Option<VcTrainer>,
    on_log: impl FnMut(&LossPoint),
) -> Result<(VcTrainer, Vec<LossPoint>)> {
    let vcfg = config.vc_config();
    let mut trainer = match resume {
        Some(mut t) => {
            // Only the iteration count may change between sessions.
            if (VcConfig { iterations: vcfg.iterations, ..t.config }) != vcfg {
                return Err(CoreError::Config("checkpoint was trained with a different conversion config".into()));
            }
            t.config.iterations = vcfg.iterations;
            t
        }
        None => VcTrainer::new(vcfg, config.seed)?,
    };
    let embeddings = audio_embeddings(clap, data)?;
    let logs = trainer.train_until(data, &embeddings, vcfg.iterations, config.log_every, on_log)?;
    Ok((trainer, logs))
}

/// One source to convert towards the class of `reference`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConversionPair {
    pub source: usize,
    pub reference: usize,
}

/// Test-split pairs: sources cycle through the test split, each paired
/// with a test reference of a different, randomly chosen class.
pub fn conversion_pairs(data: &Dataset, count: usize, seed: u64) -> Result<Vec<ConversionPair>> {
    let test = &data.split.test;
    let mut by_class = vec![Vec::new(); NUM_EMOTIONS];
    for &i in test {
        by_class[data.get(i).emotion_id].push(i);
    }
    if test.is_empty() || by_class.iter().any(Vec::is_empty) {
        return Err(CoreError::Data("test split must hold every class".into()));
    }
    let mut rng = SeedStream::new(seed).named("eval.pairs").rng();
    Ok((0..count)
        .map(|k| {
            let source = test[k % test.len()];
            let own = data.get(source).emotion_id;
            let shift = rng.random_range(1..NUM_EMOTIONS);
            let class = (own + shift) % NUM_EMOTIONS;
            let reference = by_class[class][rng.random_range(0..by_class[class].len())];
            ConversionPair { source, reference }
        })
        .collect())
}

/// Centre of the intensity bucket a prompt template encodes.
pub fn template_intensity(template_id: usize) -> f64 {
    let level = template_id % TEMPLATES_PER_CLASS;
    0.5 + 0.5 * (level as f64 + 0.5) / TEMPLATES_PER_CLASS as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversionReport {
    pub source_id: usize,
    pub mode: EmbedMode,
    pub lambda: f64,
    pub target_class: usize,
    /// Reference whose audio was embedded; `None` in prompt mode.
    pub reference_id: Option<usize>,
    /// Retrieval ranking in retrieval mode.
    pub retrieved: Vec<(usize, f64)>,
    /// Normalized Mel surrogate.
    pub mel: Tensor,
    pub eecs_surrogate: f64,
    pub projection: f64,
    pub cond_mean_error: f64,
    /// Retrieval mode only: whether the top reference has the target class.
    pub retrieval_hit: Option<bool>,
}

struct Resolved {
    embedding: Vec<f64>,
    class: usize,
    intensity: f64,
    reference: Option<usize>,
    retrieved: Vec<(usize, f64)>,
}

/// Everything needed to run conversions and score them.
pub struct Converter<'a> {
    pub data: &'a Dataset,
    pub clap: &'a ClapModel,
    pub vc: &'a VcModel,
    pub store: &'a ReferenceStore,
    pub probe: &'a EmotionProbe,
    pub sampler: SamplerConfig,
    pub retrieval_k: usize,
}

impl Converter<'_> {
    fn resolve(&self, pair: &ConversionPair, mode: EmbedMode) -> Result<Resolved> {
        let reference = self.data.get(pair.reference);
        let from_audio = |u: &Utterance, retrieved| -> Result<Resolved> {
            Ok(Resolved {
                embedding: self.clap.embed_audio(std::slice::from_ref(&u.audio_features))?.remove(0),
                class: u.emotion_id,
                intensity: u.intensity_gt,
                reference: Some(u.id),
                retrieved,
            })
        };
        match mode {
            EmbedMode::Reference => from_audio(reference, Vec::new()),
            EmbedMode::Prompt => Ok(Resolved {
                embedding: self.clap.embed_prompts(std::slice::from_ref(&reference.prompt_tokens))?.remove(0),
                class: reference.emotion_id,
                intensity: template_intensity(reference.prompt_template_id),
                reference: None,
                retrieved: Vec::new(),
            }),
            EmbedMode::Retrieval => {
                let q = self.clap.embed_prompts(std::slice::from_ref(&reference.prompt_tokens))?.remove(0);
                let hits = self.store.retrieve(&q, self.retrieval_k)?;
                let top = self.data.get(hits[0].0);
                from_audio(top, hits)
            }
        }
    }

    /// Convert every pair in one batched sampler call. The target class is
    /// always the pair reference's class; the oracle intensity is `λ` times
    /// the intensity the resolved embedding stands for.
    pub fn convert(&self, pairs: &[ConversionPair], mode: EmbedMode, lambda: f64) -> Result<Vec<ConversionReport>> {
        if !(0.0..=self.vc.encoder.config.max_lambda).contains(&lambda) {
            return Err(CoreError::Input(format!("intensity {lambda} outside [0, {}]", self.vc.encoder.config.max_lambda)));
        }
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let resolved: Vec<Resolved> = pairs.iter().map(|p| self.resolve(p, mode)).collect::<Result<_>>()?;
        let sources = self.data.subset(&pairs.iter().map(|p| p.source).collect::<Vec<_>>());
        let content = PackedSeqs::pack(&sources.iter().map(|u| &u.content_features).collect::<Vec<_>>())?;
        let width = resolved[0].embedding.len();
        let emb = Tensor::from_fn(pairs.len(), width, |i, j| resolved[i].embedding[j]);
        let keys: Vec<u64> = pairs.iter().map(|p| p.source as u64).collect();
        let out = self.vc.generate(&content, &emb, lambda, &keys, &self.sampler)?;
        let mels = PackedSeqs::unpack(&out, &content.segs);
        let mut reports = Vec::with_capacity(pairs.len());
        for ((pair, r), (src, mel)) in pairs.iter().zip(resolved).zip(sources.iter().zip(mels)) {
            let target_class = self.data.get(pair.reference).emotion_id;
            let oracle_intensity = (lambda * r.intensity).min(2.0);
            let oracle = synth_target(&self.data.spec, &src.content_features, r.class, oracle_intensity, None)?;
            let report = ConversionReport {
                source_id: src.id,
                mode,
                lambda,
                target_class,
                reference_id: r.reference,
                retrieved: r.retrieved,
                eecs_surrogate: self.probe.eecs(&mel, &src.content_features, target_class)?,
                projection: self.probe.projection(&mel, &src.content_features, target_class)?,
                cond_mean_error: mean_abs_error(&mel, &self.data.norm.normalize(&oracle))?,
                retrieval_hit: (mode == EmbedMode::Retrieval).then_some(r.class == target_class),
                mel,
            };
            if !(report.eecs_surrogate.is_finite() && report.projection.is_finite() && report.cond_mean_error.is_finite()) {
                return Err(CoreError::NonFinite {
                    step: 0,
                    detail: format!("conversion of utterance {} produced non-finite metrics", src.id),
                });
            }
            reports.push(report);
        }
        Ok(reports)
    }
}

/// One cell of the mode × λ grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub mode: EmbedMode,
    pub lambda: f64,
    pub n: usize,
    pub eecs_surrogate: f64,
    pub projection: f64,
    pub cond_mean_error: f64,
    /// Share of retrieved references carrying the target class.
    pub retrieval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<SweepRow>,
    pub reports: Vec<ConversionReport>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

pub fn summarize(mode: EmbedMode, lambda: f64, reports: &[ConversionReport]) -> SweepRow {
    SweepRow {
        mode,
        lambda,
        n: reports.len(),
        eecs_surrogate: mean(reports.iter().map(|r| r.eecs_surrogate)),
        projection: mean(reports.iter().map(|r| r.projection)),
        cond_mean_error: mean(reports.iter().map(|r| r.cond_mean_error)),
        retrieval_accuracy: (mode == EmbedMode::Retrieval)
            .then(|| mean(reports.iter().map(|r| f64::from(u8::from(r.retrieval_hit == Some(true)))))),
    }
}

/// Run the configured mode × λ grid, in config order.
pub fn evaluate(conv: &Converter<'_>, pairs: &[ConversionPair], eval: &EvalConfig) -> Result<Evaluation> {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &mode in &eval.modes {
        for &lambda in &eval.lambdas {
            let cell = conv.convert(pairs, mode, lambda)?;
            rows.push(summarize(mode, lambda, &cell));
            reports.extend(cell);
        }
    }
    Ok(Evaluation { rows, reports })
}

impl Evaluation {
    /// Emotion-similarity surrogate: mean EECS over the λ=1 cells.
    pub fn emotion_similarity(&self) -> f64 {
        mean(self.rows.iter().filter(|r| r.lambda == 1.0).map(|r| r.eecs_surrogate))
    }

    pub fn row(&self, mode: EmbedMode, lambda: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.mode == mode && r.lambda == lambda)
    }
}
