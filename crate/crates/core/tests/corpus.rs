use std::collections::HashSet;

use emovc_core::artifacts::{read_corpus, write_corpus, CORPUS_FILE, FEATURES_FILE};
use emovc_core::corpus::{
    generate_corpus, regenerate_mel, split, synth_target, CorpusDims, EmotionSpec, Utterance, NUM_EMOTIONS,
};
use emovc_core::metrics::linear_probe_accuracy;
use emovc_numerics::Tensor;
use proptest::prelude::*;

fn spec() -> EmotionSpec {
    EmotionSpec::new(CorpusDims::default(), 0).unwrap()
}

fn time_mean(t: &Tensor) -> Vec<f64> {
    let (r, c) = t.dims2();
    (0..c).map(|j| (0..r).map(|i| t.at(i, j)).sum::<f64>() / r as f64).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn seventy_items_are_balanced() {
    let corpus = generate_corpus(&spec(), 70, 1).unwrap();
    for c in 0..NUM_EMOTIONS {
        assert_eq!(corpus.iter().filter(|u| u.emotion_id == c).count(), 10);
    }
    let odd = generate_corpus(&spec(), 75, 1).unwrap();
    let counts: Vec<usize> = (0..NUM_EMOTIONS).map(|c| odd.iter().filter(|u| u.emotion_id == c).count()).collect();
    assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
}

#[test]
fn utterances_honour_their_contract() {
    let s = spec();
    let corpus = generate_corpus(&s, 140, 3).unwrap();
    for u in &corpus {
        assert!((s.dims.t_min..=s.dims.t_max).contains(&u.frames()));
        assert!(u.intensity_gt > 0.0 && u.intensity_gt <= 1.0);
        assert_eq!(u.content_features.dims2(), (u.frames(), s.dims.content_dim));
        assert_eq!(u.audio_features.dims2(), (u.frames(), s.dims.audio_dim()));
        assert!(u.content_tokens.iter().all(|&t| t < s.dims.vocab));
        assert!(!u.prompt_tokens.is_empty() && u.prompt_tokens.len() <= 24);
        assert_eq!(regenerate_mel(&s, u).unwrap(), u.mel_target);
    }
}

#[test]
fn same_seed_same_corpus_and_same_bytes() {
    let s = spec();
    let a = generate_corpus(&s, 70, 9).unwrap();
    let b = generate_corpus(&s, 70, 9).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_corpus(&s, 70, 10).unwrap());

    let sp = split(&a, [0.8, 0.1, 0.1], 2).unwrap();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    write_corpus(d1.path(), &a, &sp).unwrap();
    write_corpus(d2.path(), &b, &sp).unwrap();
    for f in [CORPUS_FILE, FEATURES_FILE] {
        assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap());
    }
    let (back, sp2) = read_corpus(d1.path()).unwrap();
    assert_eq!(back, a);
    assert_eq!(sp2, sp);
}

#[test]
fn class_mean_audio_projects_onto_its_own_axis() {
    let s = spec();
    let corpus = generate_corpus(&s, 700, 1).unwrap();
    for c in 0..NUM_EMOTIONS {
        let members: Vec<&Utterance> = corpus.iter().filter(|u| u.emotion_id == c).collect();
        let d_a = s.dims.audio_dim();
        let mut mean = vec![0.0; d_a];
        for u in &members {
            for (m, v) in mean.iter_mut().zip(time_mean(&u.audio_features)) {
                *m += v / members.len() as f64;
            }
        }
        let own = dot(&mean, s.oracle.audio_axes.row(c));
        assert!(own > 0.5 * s.dims.audio_emotion_scale, "class {c}: {own}");
        for other in (0..NUM_EMOTIONS).filter(|&o| o != c) {
            let p = dot(&mean, s.oracle.audio_axes.row(other));
            assert!(p.abs() < 0.1 * own, "class {c} onto {other}: {p} vs {own}");
        }
    }
}

#[test]
fn emotion_is_linearly_recoverable_from_audio() {
    let s = spec();
    let corpus = generate_corpus(&s, 700, 1).unwrap();
    let feats: Vec<Vec<f64>> = corpus.iter().map(|u| time_mean(&u.audio_features)).collect();
    let labels: Vec<usize> = corpus.iter().map(|u| u.emotion_id).collect();
    assert!(linear_probe_accuracy(&feats, &labels, NUM_EMOTIONS).unwrap() >= 0.99);
}

#[test]
fn split_of_seventy() {
    let corpus = generate_corpus(&spec(), 70, 1).unwrap();
    let sp = split(&corpus, [0.8, 0.1, 0.1], 4).unwrap();
    assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (56, 7, 7));
    assert_eq!(sp, split(&corpus, [0.8, 0.1, 0.1], 4).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn splits_are_stratified_disjoint_and_covering(n in 21usize..200, seed in 0u64..1000) {
        let corpus = generate_corpus(&spec(), n, seed).unwrap();
        let sp = split(&corpus, [0.8, 0.1, 0.1], seed).unwrap();
        let all: HashSet<usize> = sp.train.iter().chain(&sp.val).chain(&sp.test).copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(sp.train.len() + sp.val.len() + sp.test.len(), n);
        for part in [&sp.train, &sp.val, &sp.test] {
            let classes: HashSet<usize> = part.iter().map(|&i| corpus[i].emotion_id).collect();
            prop_assert_eq!(classes.len(), NUM_EMOTIONS);
        }
    }

    #[test]
    fn noise_free_oracle_is_affine_in_intensity(world in 0u64..50, class in 0usize..7, a in 0.0f64..1.0) {
        let s = EmotionSpec::new(CorpusDims { noise_free: true, ..CorpusDims::default() }, world).unwrap();
        let content = Tensor::from_fn(5, s.dims.content_dim, |i, j| ((i * 7 + j) as f64).sin());
        let m0 = synth_target(&s, &content, class, 0.0, None).unwrap();
        let m1 = synth_target(&s, &content, class, 1.0, None).unwrap();
        let m2 = synth_target(&s, &content, class, 2.0, None).unwrap();
        let ma = synth_target(&s, &content, class, a, None).unwrap();
        for i in 0..m0.len() {
            let (x0, x1, x2) = (m0.data()[i], m1.data()[i], m2.data()[i]);
            prop_assert!(((x2 - x1) - (x1 - x0)).abs() < 1e-12);
            prop_assert!((ma.data()[i] - (x0 + a * (x1 - x0))).abs() < 1e-12);
        }
    }
}
