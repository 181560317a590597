use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::data::KnowledgeBase;
use crate::encoder::EncoderParams;
use crate::error::Result;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::reader::ReaderHeads;
use crate::retriever::{encode_kb, EntityIndex};
use crate::Scalar;

/// Every trainable tensor of a retriever-reader system.
///
/// The sentence encoder serves both the retriever query side and the reader.
/// A pipeline model instead gives the reader its own encoder.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub store: ParamStore<T>,
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub entity_encoder: EncoderParams,
    pub sentence_encoder: EncoderParams,
    pub reader_encoder: Option<EncoderParams>,
    pub heads: ReaderHeads,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig, vocab_size: usize, separate_reader: bool, seed: u64) -> Result<Self> {
        let enc = config.encoder(vocab_size);
        enc.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let mut store = ParamStore::new();
        let entity_encoder = EncoderParams::new(&mut store, "entity", ParamGroup::Retriever, enc.clone(), &mut rng)?;
        let sentence_group = if separate_reader {
            ParamGroup::Retriever
        } else {
            ParamGroup::Reader
        };
        let sentence_encoder = EncoderParams::new(&mut store, "sentence", sentence_group, enc.clone(), &mut rng)?;
        let reader_encoder = if separate_reader {
            Some(EncoderParams::new(&mut store, "reader_encoder", ParamGroup::Reader, enc, &mut rng)?)
        } else {
            None
        };
        let heads = ReaderHeads::new(&mut store, "reader", config.dim, &mut rng);
        Ok(Model {
            store,
            config: config.clone(),
            vocab_size,
            entity_encoder,
            sentence_encoder,
            reader_encoder,
            heads,
        })
    }

    /// Encoder applied to passage ⊕ entity pairs.
    pub fn reader_encoder(&self) -> &EncoderParams {
        self.reader_encoder.as_ref().unwrap_or(&self.sentence_encoder)
    }

    pub fn retriever_params(&self) -> Vec<ParamId> {
        let mut ids = self.entity_encoder.param_ids();
        ids.extend(self.sentence_encoder.param_ids());
        ids
    }

    pub fn reader_params(&self) -> Vec<ParamId> {
        let mut ids = self.reader_encoder().param_ids();
        ids.extend(self.heads.param_ids());
        ids
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    pub fn encode_index(&self, kb: &KnowledgeBase) -> Result<EntityIndex<T>> {
        encode_kb(&self.store, &self.entity_encoder, kb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_and_separate_layouts() {
        let cfg = ModelConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            ffn_dim: 8,
            max_len: 16,
        };
        let shared = Model::<f64>::new(&cfg, 20, false, 1).unwrap();
        assert!(shared.reader_encoder.is_none());
        let sentence: Vec<_> = shared.sentence_encoder.param_ids();
        assert!(sentence.iter().all(|id| shared.reader_params().contains(id)));
        assert!(sentence.iter().all(|id| shared.store.param(*id).group == ParamGroup::Reader));

        let split = Model::<f64>::new(&cfg, 20, true, 1).unwrap();
        let reader = split.reader_params();
        assert!(split.retriever_params().iter().all(|id| !reader.contains(id)));
        assert_eq!(split.store.len(), shared.store.len() + split.reader_encoder().param_ids().len());

        let again = Model::<f64>::new(&cfg, 20, false, 1).unwrap();
        assert_eq!(again.store.export(), shared.store.export());
    }
}
