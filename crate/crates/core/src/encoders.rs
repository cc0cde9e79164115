//! Short-term encoders: a clip encoder over frame feature sequences and a text
//! encoder over token sequences. Both are small CLS-pooled transformers that
//! project into one shared, unit-norm embedding space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::transformer::{self, block, first_token, key_padding_bias, prepend_token, sinusoidal_positions};

/// Tolerance on the unit norm of an [`Embedding`].
pub const UNIT_NORM_TOL: Scalar = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    /// Longest frame or token sequence, excluding the CLS token.
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub frame_feature_dim: usize,
    /// Dimension of the shared embedding space.
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            model_dim: 64,
            num_layers: 2,
            num_heads: 4,
            mlp_dim: 128,
            max_seq_len: 16,
            vocab_size: 256,
            frame_feature_dim: 16,
            embed_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.embed_dim == 0 || self.max_seq_len == 0 || self.vocab_size == 0 || self.frame_feature_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// A unit-norm vector in the shared embedding space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Scalar>", into = "Vec<Scalar>")]
pub struct Embedding(Vec<Scalar>);

impl Embedding {
    pub fn new(values: Vec<Scalar>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<Scalar>().sqrt();
        if (norm - 1.0).abs() >= UNIT_NORM_TOL {
            return Err(Error::contract(format!("embedding norm {norm} is not 1")));
        }
        Ok(Embedding(values))
    }

    /// Normalize an arbitrary non-zero vector.
    pub fn normalized(values: Vec<Scalar>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<Scalar>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::contract("cannot normalize a zero vector"));
        }
        Ok(Embedding(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn values(&self) -> &[Scalar] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn neg(&self) -> Embedding {
        Embedding(self.0.iter().map(|v| -v).collect())
    }
}

impl TryFrom<Vec<Scalar>> for Embedding {
    type Error = Error;
    fn try_from(v: Vec<Scalar>) -> Result<Self> {
        Embedding::new(v)
    }
}

impl From<Embedding> for Vec<Scalar> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// Dot product of two unit vectors.
pub fn similarity(a: &Embedding, b: &Embedding) -> Scalar {
    a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum()
}

/// Split a `[b, e]` tensor into per-row embeddings.
pub fn embeddings_from_rows(t: &Tensor) -> Result<Vec<Embedding>> {
    t.rows()?.into_iter().map(Embedding::new).collect()
}

/// Frame feature sequence of one clip. Rows past `valid_len` are padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipInput {
    pub frames: Vec<Vec<Scalar>>,
    pub valid_len: usize,
}

impl ClipInput {
    pub fn new(frames: Vec<Vec<Scalar>>) -> Self {
        let valid_len = frames.len();
        ClipInput { frames, valid_len }
    }

    /// Append zero frames up to `len` rows, keeping `valid_len`.
    pub fn padded_to(&self, len: usize) -> ClipInput {
        let dim = self.frames.first().map_or(0, Vec::len);
        let mut frames = self.frames.clone();
        frames.resize(len.max(frames.len()), vec![0.0; dim]);
        ClipInput {
            frames,
            valid_len: self.valid_len,
        }
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.valid_len == 0 {
            return Err(Error::contract("clip has valid_len 0"));
        }
        if self.valid_len > self.frames.len() || self.frames.len() > cfg.max_seq_len {
            return Err(Error::contract(format!(
                "clip has {} rows with valid_len {} (max_seq_len {})",
                self.frames.len(),
                self.valid_len,
                cfg.max_seq_len
            )));
        }
        if self.frames.iter().any(|f| f.len() != cfg.frame_feature_dim) {
            return Err(Error::dim(
                "encode_clip",
                format!("frames must have {} features", cfg.frame_feature_dim),
            ));
        }
        Ok(())
    }
}

/// Token sequence of a narration or summary. Ids past `valid_len` are padding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextInput {
    pub tokens: Vec<u32>,
    pub valid_len: usize,
}

impl TextInput {
    pub fn new(tokens: Vec<u32>) -> Self {
        let valid_len = tokens.len();
        TextInput { tokens, valid_len }
    }

    pub fn padded_to(&self, len: usize) -> TextInput {
        let mut tokens = self.tokens.clone();
        tokens.resize(len.max(tokens.len()), 0);
        TextInput {
            tokens,
            valid_len: self.valid_len,
        }
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.valid_len == 0 {
            return Err(Error::contract("text has valid_len 0"));
        }
        if self.valid_len > self.tokens.len() || self.tokens.len() > cfg.max_seq_len {
            return Err(Error::contract(format!(
                "text has {} tokens with valid_len {} (max_seq_len {})",
                self.tokens.len(),
                self.valid_len,
                cfg.max_seq_len
            )));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::contract(format!("token id {bad} >= vocab size {}", cfg.vocab_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Clip,
    Text,
}

/// One short-term encoder. Parameters live in a [`ParamStore`] under `prefix`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub modality: Modality,
    pub config: EncoderConfig,
    prefix: &'static str,
}

impl Encoder {
    pub fn clip(config: EncoderConfig) -> Self {
        Encoder {
            modality: Modality::Clip,
            config,
            prefix: "clip",
        }
    }

    pub fn text(config: EncoderConfig) -> Self {
        Encoder {
            modality: Modality::Text,
            config,
            prefix: "text",
        }
    }

    pub fn prefix(&self) -> &'static str {
        self.prefix
    }

    fn name(&self, rest: &str) -> String {
        format!("{}.{rest}", self.prefix)
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = &self.config;
        let d = c.model_dim;
        match self.modality {
            Modality::Clip => transformer::init_linear(store, &self.name("input"), c.frame_feature_dim, d, rng),
            Modality::Text => store.init_normal(&self.name("token_embedding"), &[c.vocab_size, d], 1.0, rng),
        }
        store.init_normal(&self.name("cls"), &[1, 1, d], 0.02, rng);
        for l in 0..c.num_layers {
            transformer::init_block(store, &self.name(&format!("layer{l}")), d, c.mlp_dim, rng);
        }
        transformer::init_layer_norm(store, &self.name("final_ln"), d);
        transformer::init_linear(store, &self.name("proj"), d, c.embed_dim, rng);
    }

    /// Parameter count implied by the configured topology.
    pub fn expected_param_count(&self) -> usize {
        let c = &self.config;
        let d = c.model_dim;
        let input = match self.modality {
            Modality::Clip => c.frame_feature_dim * d + d,
            Modality::Text => c.vocab_size * d,
        };
        input + d + c.num_layers * transformer::block_param_count(d, c.mlp_dim) + 2 * d + d * c.embed_dim + c.embed_dim
    }

    /// Encode a batch of clips to unit vectors `[b, embed_dim]`.
    pub fn forward_clips(&self, g: &mut Graph, store: &ParamStore, clips: &[&ClipInput]) -> Result<Var> {
        if self.modality != Modality::Clip {
            return Err(Error::contract("forward_clips on a text encoder"));
        }
        if clips.is_empty() {
            return Err(Error::contract("empty clip batch"));
        }
        let c = &self.config;
        for clip in clips {
            clip.validate(c)?;
        }
        let t = clips.iter().map(|cl| cl.frames.len()).max().unwrap_or(1);
        let f = c.frame_feature_dim;
        let mut data = vec![0.0; clips.len() * t * f];
        for (i, clip) in clips.iter().enumerate() {
            for (j, frame) in clip.frames.iter().enumerate() {
                let off = (i * t + j) * f;
                data[off..off + f].copy_from_slice(frame);
            }
        }
        let x = g.constant(Tensor::new(vec![clips.len() * t, f], data)?);
        let h = transformer::linear(g, store, &self.name("input"), x)?;
        let h = g.reshape(h, &[clips.len(), t, c.model_dim])?;
        let valid: Vec<usize> = clips.iter().map(|cl| cl.valid_len).collect();
        self.encode_sequence(g, store, h, &valid)
    }

    /// Encode a batch of token sequences to unit vectors `[b, embed_dim]`.
    pub fn forward_texts(&self, g: &mut Graph, store: &ParamStore, texts: &[&TextInput]) -> Result<Var> {
        if self.modality != Modality::Text {
            return Err(Error::contract("forward_texts on a clip encoder"));
        }
        if texts.is_empty() {
            return Err(Error::contract("empty text batch"));
        }
        let c = &self.config;
        for text in texts {
            text.validate(c)?;
        }
        let t = texts.iter().map(|tx| tx.tokens.len()).max().unwrap_or(1);
        let mut ids = vec![0usize; texts.len() * t];
        for (i, text) in texts.iter().enumerate() {
            for (j, &tok) in text.tokens.iter().enumerate() {
                ids[i * t + j] = tok as usize;
            }
        }
        let table = g.param(store, &self.name("token_embedding"))?;
        let h = g.embedding(table, &ids)?;
        let h = g.reshape(h, &[texts.len(), t, c.model_dim])?;
        let valid: Vec<usize> = texts.iter().map(|tx| tx.valid_len).collect();
        self.encode_sequence(g, store, h, &valid)
    }

    fn encode_sequence(&self, g: &mut Graph, store: &ParamStore, h: Var, valid: &[usize]) -> Result<Var> {
        let c = &self.config;
        let (b, t) = (g.shape(h)[0], g.shape(h)[1]);
        let x = prepend_token(g, store, &self.name("cls"), h)?;
        let pe = g.constant(sinusoidal_positions(t + 1, c.model_dim));
        let mut x = g.add(x, pe)?;
        let with_cls: Vec<usize> = valid.iter().map(|v| v + 1).collect();
        let bias = g.constant(key_padding_bias(&with_cls, t + 1));
        for l in 0..c.num_layers {
            x = block(g, store, &self.name(&format!("layer{l}")), x, Some(bias), c.num_heads)?;
        }
        let x = transformer::layer_norm(g, store, &self.name("final_ln"), x)?;
        let cls = first_token(g, x)?;
        debug_assert_eq!(g.shape(cls), &[b, c.model_dim]);
        let out = transformer::linear(g, store, &self.name("proj"), cls)?;
        g.l2_normalize(out)
    }

    pub fn encode_clip(&self, store: &ParamStore, clip: &ClipInput) -> Result<Embedding> {
        let mut g = Graph::new();
        let out = self.forward_clips(&mut g, store, &[clip])?;
        Ok(embeddings_from_rows(g.value(out))?.remove(0))
    }

    pub fn encode_text(&self, store: &ParamStore, text: &TextInput) -> Result<Embedding> {
        let mut g = Graph::new();
        let out = self.forward_texts(&mut g, store, &[text])?;
        Ok(embeddings_from_rows(g.value(out))?.remove(0))
    }
}
