use emovc_core::checkpoint::{Checkpoint, CheckpointError, MAGIC};
use emovc_core::clap::{ClapConfig, ClapModel};
use emovc_core::pipeline::{clap_checkpoint, load_clap, VcTrainer};
use emovc_core::store::ReferenceStore;
use emovc_core::vc::VcConfig;
use emovc_numerics::Tensor;
use proptest::prelude::*;

const VERSION_AT: usize = MAGIC.len();

fn sample() -> Checkpoint {
    let mut c = Checkpoint::new("test", 12, "abc");
    c.set_meta("note", "x");
    c.push("a", &Tensor::from_fn(2, 3, |i, j| (i * 3 + j) as f64 - 2.5));
    c.push("b", &Tensor::from_fn(1, 1, |_, _| -0.0));
    c
}

fn manifest_len(bytes: &[u8]) -> usize {
    u64::from_le_bytes(bytes[VERSION_AT + 4..VERSION_AT + 12].try_into().unwrap()) as usize
}

fn special() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>(),
        Just(-0.0),
        Just(f64::MIN_POSITIVE / 3.0),
        Just(f64::INFINITY),
        Just(f64::NAN),
        -1e3f64..1e3,
    ]
}

proptest! {
    #[test]
    fn save_load_save_is_byte_identical(
        shapes in prop::collection::vec((1usize..5, 1usize..5), 1..4),
        pool in prop::collection::vec(special(), 64),
        step in any::<u64>(),
    ) {
        let mut c = Checkpoint::new("prop", step, "hash");
        let mut k = 0;
        for (n, (r, cols)) in shapes.iter().enumerate() {
            let t = Tensor::from_fn(*r, *cols, |_, _| { k += 1; pool[k % pool.len()] });
            c.push(format!("t{n}"), &t);
        }
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.manifest, c.manifest);
    }
}

#[test]
fn file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    sample().save(&p1).unwrap();
    Checkpoint::load(&p1).unwrap().save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn flipped_version_byte_is_a_version_error() {
    let mut b = sample().to_bytes();
    b[VERSION_AT] ^= 0x01;
    assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::VersionMismatch { .. })));
}

#[test]
fn payload_length_disagreement_is_corruption() {
    let b = sample().to_bytes();
    let plen_at = VERSION_AT + 12 + manifest_len(&b);
    let mut bad = b.clone();
    bad[plen_at] = bad[plen_at].wrapping_add(8);
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::CorruptManifest(_))));
    let mut extra = b.clone();
    extra.extend_from_slice(&[0; 8]);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(CheckpointError::CorruptManifest(_))));
}

#[test]
fn truncation_and_garbage_are_distinct_errors() {
    let b = sample().to_bytes();
    assert!(matches!(Checkpoint::from_bytes(&b[..b.len() - 3]), Err(CheckpointError::TruncatedPayload(_))));
    assert!(matches!(Checkpoint::from_bytes(&b[..VERSION_AT + 20]), Err(CheckpointError::CorruptManifest(_))));
    let mut m = b.clone();
    m[VERSION_AT + 12] = b'#';
    assert!(matches!(Checkpoint::from_bytes(&m), Err(CheckpointError::CorruptManifest(_))));
    assert!(matches!(Checkpoint::from_bytes(b"nothing here"), Err(CheckpointError::BadMagic)));
}

#[test]
fn contrastive_model_survives_a_round_trip() {
    let model = ClapModel::new(ClapConfig::default(), 12, 30, 4).unwrap();
    let c = Checkpoint::from_bytes(&clap_checkpoint(&model, "h").to_bytes()).unwrap();
    let back = load_clap(&c).unwrap();
    let audio = vec![Tensor::from_fn(6, 12, |i, j| ((i + 2 * j) as f64).cos())];
    assert_eq!(back.embed_audio(&audio).unwrap(), model.embed_audio(&audio).unwrap());
    assert_eq!(back.embed_prompts(&[vec![1, 5, 7]]).unwrap(), model.embed_prompts(&[vec![1, 5, 7]]).unwrap());
}

#[test]
fn loading_the_wrong_kind_fails() {
    let model = ClapModel::new(ClapConfig::default(), 12, 30, 4).unwrap();
    let c = clap_checkpoint(&model, "h");
    assert!(VcTrainer::from_checkpoint(&c).is_err());
    assert!(matches!(ReferenceStore::from_checkpoint(&c), Err(CheckpointError::WrongKind { .. })));
}

#[test]
fn conversion_trainer_round_trip() {
    let t = VcTrainer::new(VcConfig::default(), 3).unwrap();
    let bytes = t.to_checkpoint("h").to_bytes();
    let back = VcTrainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.to_checkpoint("h").to_bytes(), bytes);
    assert_eq!(back.step, t.step);
}
