//! Toy-sized models and objectives for finite-difference checks.

use emovc_core::cfm::{CfmConfig, CfmDecoder};
use emovc_core::clap::{symkl_loss, ClapConfig, ClapModel, EmoBatch, LossVariant, SimilarityLogits, SoftLabelMatrix};
use emovc_core::fuencoder::{FuEncoder, FuEncoderConfig, PackedSeqs};
use emovc_numerics::nn::dropout;
use emovc_numerics::rng::normal_vec;
use emovc_numerics::{finite_diff_check, GradCheckReport, NumericsError, Graph, ParamStore, SeedStream, Segments, Tensor};
use rand::Rng;

pub const STEP: f64 = 1e-3;

fn uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Replace every parameter with fresh noise so no branch starts at zero.
fn scramble(store: &mut ParamStore, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let v: Vec<f64> = normal_vec(rng, n).into_iter().map(|x| 0.4 * x).collect();
        store.assign(id, &v).unwrap();
    }
}

pub fn fu_config() -> FuEncoderConfig {
    FuEncoderConfig {
        content_dim: 3,
        width: 8,
        emb_dim: 4,
        blocks: 1,
        heads: 2,
        ffn_mult: 2,
        ..FuEncoderConfig::default()
    }
}

pub fn cfm_config() -> CfmConfig {
    CfmConfig {
        mel_dim: 3,
        cond_dim: 8,
        emb_dim: 4,
        channels: 8,
        blocks: 1,
        heads: 2,
        time_dim: 8,
        ..CfmConfig::default()
    }
}

fn lengths(rng: &mut impl Rng) -> Vec<usize> {
    (0..rng.random_range(1..=3)).map(|_| rng.random_range(2..=5)).collect()
}

/// Contrastive objective on a random batch of 3 to 5 items, through both
/// encoders and the learned temperatures.
pub fn check_symkl(seed: u64, variant: LossVariant) -> GradCheckReport {
    let mut rng = SeedStream::new(seed).named("toy.symkl").rng();
    let config = ClapConfig {
        dim: 4,
        hidden: 5,
        token_dim: 4,
        loss: variant,
        ..ClapConfig::default()
    };
    let mut model = ClapModel::new(config, 3, 9, seed).unwrap();
    scramble(&mut model.store, &mut rng);
    let n = rng.random_range(3..=5);
    let batch = EmoBatch {
        audio_features: (0..n).map(|_| uniform(rng.random_range(2..5), 3, &mut rng)).collect(),
        emotion_label: (0..n).map(|_| rng.random_range(0..3)).collect(),
        prompt_tokens: (0..n).map(|_| (0..rng.random_range(1..4)).map(|_| rng.random_range(0..9)).collect()).collect(),
        prompt_label: (0..n).map(|_| rng.random_range(0..5)).collect(),
    };
    let mut store = model.store.clone();
    finite_diff_check(&mut store, STEP, |g, s| {
        model.store = s.clone();
        model.loss(g, &batch).map_err(|e| NumericsError::Config(e.to_string()))
    })
    .unwrap()
}

/// The bare loss as a function of the two logit matrices.
pub fn check_symkl_logits(seed: u64, variant: LossVariant) -> GradCheckReport {
    let mut rng = SeedStream::new(seed).named("toy.logits").rng();
    let n = rng.random_range(2..=6);
    let emo: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let prompt: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
    let labels = SoftLabelMatrix::from_labels(&emo, &prompt, 0.2, 1e-3, true).unwrap();
    let mut store = ParamStore::new();
    let a = store.add("sa", uniform(n, n, &mut rng).map(|v| 3.0 * v));
    let p = store.add("sp", uniform(n, n, &mut rng).map(|v| 3.0 * v));
    finite_diff_check(&mut store, STEP, |g, s| {
        let logits = SimilarityLogits {
            s_audio: g.param(s, a),
            s_text: g.param(s, p),
        };
        symkl_loss(g, &logits, &labels.m_s, 1e-3, variant).map_err(|e| NumericsError::Config(e.to_string()))
    })
    .unwrap()
}

/// Weighted sum of both encoder outputs, with a fixed dropout mask.
pub fn check_fuencoder(seed: u64) -> GradCheckReport {
    let mut rng = SeedStream::new(seed).named("toy.fu").rng();
    let mut store = ParamStore::new();
    let enc = FuEncoder::new(&mut store, fu_config(), &mut rng).unwrap();
    // Finite differences are meaningless across a ReLU kink, so redraw
    // until every PreNet pre-activation sits clear of zero.
    let (lens, content) = loop {
        scramble(&mut store, &mut rng);
        let lens = lengths(&mut rng);
        let seqs: Vec<Tensor> = lens.iter().map(|&l| uniform(l, 3, &mut rng)).collect();
        let content = PackedSeqs::pack(&seqs.iter().collect::<Vec<_>>()).unwrap();
        if prenet_margin(&enc, &store, &content, seed) > KINK_MARGIN {
            break (lens, content);
        }
    };
    let h = uniform(lens.len(), 4, &mut rng);
    let total: usize = lens.iter().sum();
    let wf = uniform(total, 8, &mut rng);
    let wh = uniform(lens.len(), 4, &mut rng);
    let lambda = rng.random_range(0.2..2.0);
    finite_diff_check(&mut store, STEP, |g, s| {
        let hv = g.constant(&h);
        let mut drop = SeedStream::new(seed).named("toy.drop").rng();
        let out = enc
            .forward(g, s, &content, hv, lambda, Some(&mut drop as &mut dyn rand::RngCore))
            .map_err(|e| NumericsError::Config(e.to_string()))?;
        let a = g.constant(&wf);
        let b = g.constant(&wh);
        let x = g.mul(out.f, a)?;
        let y = g.mul(out.h_gated, b)?;
        let (x, y) = (g.sum(x), g.sum(y));
        g.add(x, y)
    })
    .unwrap()
}

const KINK_MARGIN: f64 = 0.02;

/// Smallest |pre-activation| in the PreNet under the check's dropout mask.
fn prenet_margin(enc: &FuEncoder, store: &ParamStore, content: &PackedSeqs, seed: u64) -> f64 {
    let mut g = Graph::new();
    let mut drop = SeedStream::new(seed).named("toy.drop").rng();
    let mut h = g.constant(&content.rows);
    let mut margin = f64::INFINITY;
    for lin in &enc.prenet {
        let z = lin.forward(&mut g, store, h).unwrap();
        margin = g.value(z).iter().fold(margin, |m, v| m.min(v.abs()));
        let r = g.relu(z);
        h = dropout(&mut g, r, enc.config.prenet_dropout, Some(&mut drop as &mut dyn rand::RngCore)).unwrap();
    }
    margin
}

/// Flow-matching loss through the decoder, with `f` and the condition
/// treated as parameters too.
pub fn check_cfm(seed: u64) -> GradCheckReport {
    let mut rng = SeedStream::new(seed).named("toy.cfm").rng();
    let mut store = ParamStore::new();
    let dec = CfmDecoder::new(&mut store, cfm_config(), &mut rng).unwrap();
    scramble(&mut store, &mut rng);
    let lens = lengths(&mut rng);
    let segs = Segments::from_lengths(&lens).unwrap();
    let total = segs.total_rows();
    let f = store.add("toy.f", uniform(total, 8, &mut rng));
    let cond = store.add("toy.cond", uniform(lens.len(), 4, &mut rng));
    let x1 = uniform(total, 3, &mut rng);
    finite_diff_check(&mut store, STEP, |g, s| {
        let fv = g.param(s, f);
        let cv = g.param(s, cond);
        dec.cfm_loss(g, s, &x1, fv, cv, &segs, SeedStream::new(seed))
            .map_err(|e| NumericsError::Config(e.to_string()))
    })
    .unwrap()
}
