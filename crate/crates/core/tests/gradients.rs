mod common;

use emovc_core::clap::LossVariant;
use common::toy;

const TOL: f64 = 1e-5;

fn assert_close(what: &str, r: emovc_numerics::GradCheckReport) {
    assert!(r.coordinates > 0);
    assert!(
        r.max_rel_error < TOL,
        "{what}: rel err {:.3e} at {:?} (analytic {}, numeric {})",
        r.max_rel_error,
        r.worst,
        r.analytic_at_worst,
        r.numeric_at_worst
    );
}

#[test]
fn contrastive_loss_gradients() {
    for seed in 0..3 {
        assert_close("symkl", toy::check_symkl(seed, LossVariant::Symkl));
        assert_close("kl", toy::check_symkl(seed, LossVariant::Kl));
        assert_close("logits", toy::check_symkl_logits(seed, LossVariant::Symkl));
    }
}

#[test]
fn fusion_encoder_gradients() {
    for seed in 0..3 {
        assert_close("fuencoder", toy::check_fuencoder(seed));
    }
}

#[test]
fn flow_matching_loss_gradients() {
    for seed in 0..3 {
        assert_close("cfm", toy::check_cfm(seed));
    }
}
