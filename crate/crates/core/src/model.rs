//! Clip encoder, text encoder and aggregator sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{stack_sequences, Aggregator, AggregatorConfig, AggregatorKind};
use crate::autodiff::{Graph, ParamStore};
use crate::encoders::{embeddings_from_rows, ClipInput, Embedding, Encoder, EncoderConfig, TextInput};
use crate::error::Result;

/// Items per no-grad forward pass when embedding many inputs.
const EMBED_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub aggregator: AggregatorConfig,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub clip: Encoder,
    pub text: Encoder,
    pub aggregator: Aggregator,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters drawn from `seed`. Aggregator parameters exist only for
    /// the self-attention kind.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.encoder.validate()?;
        let clip = Encoder::clip(config.encoder.clone());
        let text = Encoder::text(config.encoder.clone());
        let aggregator = Aggregator::new(config.aggregator.clone(), config.encoder.embed_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        clip.init_params(&mut params, &mut rng);
        text.init_params(&mut params, &mut rng);
        aggregator.init_params(&mut params, &mut rng);
        Ok(Model {
            clip,
            text,
            aggregator,
            params,
        })
    }

    /// Rebuild around existing parameters.
    pub fn with_params(config: &ModelConfig, params: ParamStore) -> Result<Model> {
        config.encoder.validate()?;
        Ok(Model {
            clip: Encoder::clip(config.encoder.clone()),
            text: Encoder::text(config.encoder.clone()),
            aggregator: Aggregator::new(config.aggregator.clone(), config.encoder.embed_dim)?,
            params,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.clip.config.embed_dim
    }

    pub fn embed_clips(&self, clips: &[&ClipInput]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(EMBED_CHUNK) {
            let mut g = Graph::new();
            let e = self.clip.forward_clips(&mut g, &self.params, chunk)?;
            out.extend(embeddings_from_rows(g.value(e))?);
        }
        Ok(out)
    }

    pub fn embed_texts(&self, texts: &[&TextInput]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(EMBED_CHUNK) {
            let mut g = Graph::new();
            let e = self.text.forward_texts(&mut g, &self.params, chunk)?;
            out.extend(embeddings_from_rows(g.value(e))?);
        }
        Ok(out)
    }

    /// Aggregate sequences of equal length with the model's aggregator, or with
    /// `kind` when given (e.g. averaging at inference).
    pub fn aggregate(&self, seqs: &[&[Embedding]], kind: Option<AggregatorKind>) -> Result<Vec<Embedding>> {
        let agg = match kind {
            Some(k) => self.aggregator.with_kind(k),
            None => self.aggregator.clone(),
        };
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(EMBED_CHUNK) {
            let mut g = Graph::new();
            let x = g.constant(stack_sequences(chunk)?);
            let y = agg.forward(&mut g, &self.params, x)?;
            out.extend(embeddings_from_rows(g.value(y))?);
        }
        Ok(out)
    }
}
