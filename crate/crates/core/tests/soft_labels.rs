mod common;

use emovc_core::clap::{
    build_agreement_matrix, build_soft_labels, smooth_targets, symkl_loss, ClapConfig, ClapModel, EmoBatch,
    LossVariant, SimilarityLogits, SoftLabelMatrix,
};
use emovc_numerics::{Graph, SeedStream, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn labels(max_n: usize, classes: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (2..=max_n).prop_flat_map(move |n| {
        (
            prop::collection::vec(0..classes, n),
            prop::collection::vec(0..classes * 3, n),
        )
    })
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn loss_of(sa: &Tensor, sp: &Tensor, m_s: &Tensor, alpha: f64, variant: LossVariant) -> f64 {
    let mut g = Graph::new();
    let logits = SimilarityLogits {
        s_audio: g.constant(sa),
        s_text: g.constant(sp),
    };
    let l = symkl_loss(&mut g, &logits, m_s, alpha, variant).unwrap();
    g.scalar(l)
}

fn random_logits(n: usize, seed: u64) -> Tensor {
    let mut rng = SeedStream::new(seed).rng();
    Tensor::from_fn(n, n, |_, _| rng.random_range(-4.0..4.0))
}

proptest! {
    #[test]
    fn targets_are_row_stochastic_and_match_brute_force(
        (emo, prompt) in labels(16, 7),
        alpha_e in 0.0f64..=1.0,
        alpha in prop_oneof![Just(1e-8), 0.0f64..0.5],
    ) {
        let n = emo.len();
        let my = build_agreement_matrix(&emo);
        let mp = build_agreement_matrix(&prompt);
        let ms = build_soft_labels(&my, &mp, alpha_e).unwrap();
        let mt = smooth_targets(&ms, alpha);
        for m in [&my, &mp, &ms, &mt] {
            for s in common::row_sums(m.data(), n) {
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
            prop_assert!(m.data().iter().all(|&v| v >= 0.0));
        }
        let want = common::smoothed_targets(&emo, &prompt, alpha_e, alpha);
        for i in 0..n {
            for j in 0..n {
                prop_assert!((mt.at(i, j) - want[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symkl_matches_direct_evaluation((emo, prompt) in labels(10, 7), seed in 0u64..1000) {
        let n = emo.len();
        let lab = SoftLabelMatrix::from_labels(&emo, &prompt, 0.2, 1e-8, true).unwrap();
        let sa = random_logits(n, seed);
        let sp = random_logits(n, seed + 1);
        let got = loss_of(&sa, &sp, &lab.m_s, 1e-8, LossVariant::Symkl);
        let want = common::symkl(&to_rows(&sa), &to_rows(&sp), &common::smoothed_targets(&emo, &prompt, 0.2, 1e-8));
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
        prop_assert!(got > 0.0);
    }

    #[test]
    fn loss_is_invariant_to_batch_order((emo, prompt) in labels(12, 7), seed in 0u64..1000) {
        let n = emo.len();
        let mut rng = SeedStream::new(seed).rng();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let sa = random_logits(n, seed);
        let sp = random_logits(n, seed + 7);
        let lab = SoftLabelMatrix::from_labels(&emo, &prompt, 0.2, 1e-8, true).unwrap();
        let permute = |t: &Tensor| Tensor::from_fn(n, n, |i, j| t.at(perm[i], perm[j]));
        let emo_p: Vec<usize> = perm.iter().map(|&i| emo[i]).collect();
        let prompt_p: Vec<usize> = perm.iter().map(|&i| prompt[i]).collect();
        let lab_p = SoftLabelMatrix::from_labels(&emo_p, &prompt_p, 0.2, 1e-8, true).unwrap();
        for variant in [LossVariant::Symkl, LossVariant::Kl] {
            let a = loss_of(&sa, &sp, &lab.m_s, 1e-8, variant);
            let b = loss_of(&permute(&sa), &permute(&sp), &lab_p.m_s, 1e-8, variant);
            prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }
}

#[test]
fn logits_equal_to_log_targets_give_zero_loss() {
    let emo = [0, 0, 1, 2, 2, 2, 5];
    let prompt = [0, 1, 3, 6, 6, 7, 15];
    let lab = SoftLabelMatrix::from_labels(&emo, &prompt, 0.2, 1e-8, true).unwrap();
    let log_m = lab.smoothed().map(f64::ln);
    for variant in [LossVariant::Symkl, LossVariant::Kl] {
        let l = loss_of(&log_m, &log_m, &lab.m_s, 1e-8, variant);
        assert!(l.abs() < 1e-6, "{variant}: {l}");
    }
}

#[test]
fn kl_variant_is_half_the_forward_terms() {
    let emo = [1, 1, 4, 6];
    let prompt = [2, 3, 12, 18];
    let lab = SoftLabelMatrix::from_labels(&emo, &prompt, 0.2, 1e-8, true).unwrap();
    let target = to_rows(&lab.smoothed());
    let sa = random_logits(4, 3);
    let sp = random_logits(4, 4);
    let fwd = |s: &Tensor| -> f64 {
        to_rows(s)
            .iter()
            .zip(&target)
            .map(|(r, t)| {
                let p = common::softmax(r);
                p.iter().zip(t).map(|(a, b)| a * (a / b).ln()).sum::<f64>()
            })
            .sum()
    };
    let got = loss_of(&sa, &sp, &lab.m_s, 1e-8, LossVariant::Kl);
    assert!((got - 0.5 * (fwd(&sa) + fwd(&sp))).abs() < 1e-9);
}

#[test]
fn zero_smoothing_is_rejected_by_the_loss() {
    let lab = SoftLabelMatrix::from_labels(&[0, 1], &[0, 3], 0.2, 0.0, true).unwrap();
    let s = random_logits(2, 0);
    let mut g = Graph::new();
    let logits = SimilarityLogits {
        s_audio: g.constant(&s),
        s_text: g.constant(&s),
    };
    assert!(symkl_loss(&mut g, &logits, &lab.m_s, 0.0, LossVariant::Symkl).is_err());
}

#[test]
fn model_loss_ignores_batch_order() {
    let model = ClapModel::new(ClapConfig::default(), 12, 40, 5).unwrap();
    let mut rng = SeedStream::new(11).rng();
    let n = 6;
    let audio: Vec<Tensor> = (0..n)
        .map(|i| Tensor::from_fn(5 + i, 12, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let prompts: Vec<Vec<usize>> = (0..n).map(|i| (0..4 + i % 3).map(|j| (i * 7 + j) % 40).collect()).collect();
    let emo = [0, 1, 1, 3, 3, 3];
    let plab = [0, 3, 4, 9, 9, 10];
    let batch = |order: &[usize]| EmoBatch {
        audio_features: order.iter().map(|&i| audio[i].clone()).collect(),
        emotion_label: order.iter().map(|&i| emo[i]).collect(),
        prompt_tokens: order.iter().map(|&i| prompts[i].clone()).collect(),
        prompt_label: order.iter().map(|&i| plab[i]).collect(),
    };
    let eval = |b: &EmoBatch| {
        let mut g = Graph::new();
        let l = model.loss(&mut g, b).unwrap();
        g.scalar(l)
    };
    let a = eval(&batch(&[0, 1, 2, 3, 4, 5]));
    let b = eval(&batch(&[4, 2, 5, 0, 3, 1]));
    assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} vs {b}");
}
