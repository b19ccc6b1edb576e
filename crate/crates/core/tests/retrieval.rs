mod common;

use emovc_core::clap::{ClapConfig, ClapModel};
use emovc_core::config::CorpusConfig;
use emovc_core::pipeline::Dataset;
use emovc_core::store::{ReferenceStore, StoreEntry};
use emovc_numerics::rng::normal_vec;
use emovc_numerics::SeedStream;
use proptest::prelude::*;
use rand::Rng;

fn small_data() -> Dataset {
    Dataset::generate(&CorpusConfig {
        n: 140,
        ..CorpusConfig::default()
    })
    .unwrap()
}

fn built_store(data: &Dataset) -> ReferenceStore {
    let model = ClapModel::new(ClapConfig::default(), data.spec.dims.audio_dim(), data.vocab_size(), 2).unwrap();
    ReferenceStore::build(&model, &data.subset(&data.split.train)).unwrap()
}

fn as_pairs(store: &ReferenceStore) -> Vec<(usize, Vec<f64>)> {
    store.entries.iter().map(|e| (e.id, e.embedding.clone())).collect()
}

#[test]
fn built_store_contract() {
    let data = small_data();
    let store = built_store(&data);
    assert_eq!(store.len(), data.split.train.len());
    for e in &store.entries {
        let n: f64 = e.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(e.label, data.get(e.id).emotion_id);
    }
    assert_eq!(store, built_store(&data));
    let model = ClapModel::new(ClapConfig::default(), data.spec.dims.audio_dim(), data.vocab_size(), 2).unwrap();
    assert!(ReferenceStore::build(&model, &[]).is_err());
}

#[test]
fn stored_vector_retrieves_itself() {
    let data = small_data();
    let store = built_store(&data);
    for e in store.entries.iter().step_by(17) {
        let hit = store.retrieve(&e.embedding, 1).unwrap()[0];
        // An untrained encoder may map two references to the same vector;
        // the smaller id then wins.
        assert!((hit.1 - 1.0).abs() < 1e-12);
        assert!(hit.0 <= e.id);
    }
}

#[test]
fn ranking_agrees_with_exhaustive_scan_on_random_queries() {
    let data = small_data();
    let store = built_store(&data);
    let pairs = as_pairs(&store);
    let mut rng = SeedStream::new(8).rng();
    let width = pairs[0].1.len();
    for _ in 0..100 {
        let q = normal_vec(&mut rng, width);
        let k = rng.random_range(1..=store.len());
        assert_eq!(store.retrieve(&q, k).unwrap(), common::exhaustive_top_k(&q, &pairs, k));
    }
    let full = store.retrieve(&normal_vec(&mut rng, width), store.len()).unwrap();
    let mut ids: Vec<usize> = full.iter().map(|h| h.0).collect();
    ids.sort_unstable();
    assert_eq!(ids, data.split.train);
}

proptest! {
    #[test]
    fn ties_break_by_ascending_id(
        vecs in prop::collection::vec(prop::collection::vec(-2i32..=2, 3), 2..30),
        ids in Just(()).prop_perturb(|_, mut rng| {
            let mut v: Vec<usize> = (0..30).map(|i| i * 3 + 1).collect();
            for i in (1..v.len()).rev() {
                v.swap(i, rng.random_range(0..=i));
            }
            v
        }),
        q in prop::collection::vec(-2i32..=2, 3),
    ) {
        prop_assume!(q.iter().any(|&v| v != 0));
        // Small-integer vectors make exact ties common.
        let entries: Vec<StoreEntry> = vecs
            .iter()
            .enumerate()
            .filter(|(_, v)| v.iter().any(|&x| x != 0))
            .map(|(i, v)| {
                let f: Vec<f64> = v.iter().map(|&x| x as f64).collect();
                let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                StoreEntry { id: ids[i], embedding: f.iter().map(|x| x / n).collect(), label: 0 }
            })
            .collect();
        prop_assume!(!entries.is_empty());
        let store = ReferenceStore { entries };
        let q: Vec<f64> = q.iter().map(|&x| x as f64).collect();
        let got = store.retrieve(&q, store.len()).unwrap();
        prop_assert_eq!(got, common::exhaustive_top_k(&q, &as_pairs(&store), store.len()));
    }
}
