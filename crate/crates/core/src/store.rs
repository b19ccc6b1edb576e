//! Reference embedding store and exact cosine retrieval.

use emovc_numerics::Tensor;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::clap::ClapModel;
use crate::corpus::Utterance;
use crate::error::{CoreError, Result};

pub const STORE_KIND: &str = "reference-store";

#[derive(Debug, Clone, PartialEq)]
pub struct StoreEntry {
    pub id: usize,
    /// Unit-norm audio embedding.
    pub embedding: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReferenceStore {
    pub entries: Vec<StoreEntry>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ReferenceStore {
    /// Embed every reference with the audio encoder. Entries are kept in
    /// ascending id order.
    pub fn build(model: &ClapModel, references: &[&Utterance]) -> Result<Self> {
        if references.is_empty() {
            return Err(CoreError::Input("reference subset is empty".into()));
        }
        let mut refs = references.to_vec();
        refs.sort_by_key(|u| u.id);
        if refs.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(CoreError::Input("reference ids must be unique".into()));
        }
        let audio: Vec<Tensor> = refs.iter().map(|u| u.audio_features.clone()).collect();
        let embs = model.embed_audio(&audio)?;
        Ok(Self {
            entries: refs
                .iter()
                .zip(embs)
                .map(|(u, embedding)| StoreEntry {
                    id: u.id,
                    embedding,
                    label: u.emotion_id,
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: usize) -> Option<&StoreEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Top-`k` `(id, cosine)` pairs, descending, ties by ascending id.
    pub fn retrieve(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if self.entries.is_empty() {
            return Err(CoreError::Input("reference store is empty".into()));
        }
        if k == 0 || k > self.entries.len() {
            return Err(CoreError::Input(format!("k = {k} outside [1, {}]", self.entries.len())));
        }
        let qn = dot(query, query).sqrt();
        if qn == 0.0 || query.len() != self.entries[0].embedding.len() {
            return Err(CoreError::Input("query must be a nonzero vector of the store's width".into()));
        }
        let mut scored: Vec<(usize, f64)> = self
            .entries
            .iter()
            .map(|e| (e.id, dot(query, &e.embedding) / qn))
            .collect();
        // `+ 0.0` folds -0.0 into 0.0 so signed zeros tie.
        scored.sort_by(|a, b| (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(STORE_KIND, 0, "");
        let width = self.entries.first().map_or(0, |e| e.embedding.len());
        let emb = Tensor::from_fn(self.entries.len(), width, |i, j| self.entries[i].embedding[j]);
        let ids = Tensor::from_fn(self.entries.len(), 1, |i, _| self.entries[i].id as f64);
        let labels = Tensor::from_fn(self.entries.len(), 1, |i, _| self.entries[i].label as f64);
        c.push("embeddings", &emb);
        c.push("ids", &ids);
        c.push("labels", &labels);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> std::result::Result<Self, CheckpointError> {
        c.expect_kind(STORE_KIND)?;
        let emb = c.require("embeddings")?;
        let ids = c.require("ids")?;
        let labels = c.require("labels")?;
        let (n, w) = emb.dims2();
        if ids.len() != n || labels.len() != n {
            return Err(CheckpointError::Incompatible("store tensors disagree in length".into()));
        }
        Ok(Self {
            entries: (0..n)
                .map(|i| StoreEntry {
                    id: ids.data()[i] as usize,
                    embedding: emb.data()[i * w..(i + 1) * w].to_vec(),
                    label: labels.data()[i] as usize,
                })
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ReferenceStore {
        let e = |id, v: [f64; 2], label| StoreEntry {
            id,
            embedding: v.to_vec(),
            label,
        };
        let s = std::f64::consts::FRAC_1_SQRT_2;
        ReferenceStore {
            entries: vec![e(0, [1.0, 0.0], 0), e(3, [0.0, 1.0], 1), e(5, [s, s], 2), e(7, [0.0, 1.0], 1)],
        }
    }

    #[test]
    fn exact_match_ranks_first() {
        let hits = store().retrieve(&[0.0, 1.0], 2).unwrap();
        assert_eq!(hits[0], (3, 1.0));
        assert_eq!(hits[1], (7, 1.0));
    }

    #[test]
    fn full_ranking_is_a_permutation() {
        let hits = store().retrieve(&[0.3, 0.2], 4).unwrap();
        let mut ids: Vec<usize> = hits.iter().map(|h| h.0).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 3, 5, 7]);
    }

    #[test]
    fn bad_queries_are_rejected() {
        assert!(ReferenceStore::default().retrieve(&[1.0], 1).is_err());
        assert!(store().retrieve(&[1.0, 0.0], 5).is_err());
        assert!(store().retrieve(&[0.0, 0.0], 1).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = store();
        assert_eq!(ReferenceStore::from_checkpoint(&s.to_checkpoint()).unwrap(), s);
    }
}
