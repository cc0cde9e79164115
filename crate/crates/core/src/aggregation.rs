//! Long-term features as aggregates of short-term ones.
//!
//! The same aggregator (and the same parameters) serves the visual and the
//! narration stream of a video.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::encoders::Embedding;
use crate::error::{Error, Result};
use crate::transformer::{self, block, first_token, prepend_token, sinusoidal_positions};

/// Mean vectors shorter than this cannot be normalized.
pub const DEGENERATE_NORM: Scalar = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregatorKind {
    Average,
    SelfAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorConfig {
    pub kind: AggregatorKind,
    /// Clips sampled per video.
    pub k: usize,
    pub sa_layers: usize,
    pub sa_heads: usize,
    pub sa_mlp_dim: usize,
    /// Width of the self-attention stack; must equal the embedding dimension.
    pub sa_model_dim: usize,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            kind: AggregatorKind::SelfAttention,
            k: 16,
            sa_layers: 2,
            sa_heads: 4,
            sa_mlp_dim: 64,
            sa_model_dim: 32,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("aggregator k must be at least 1".into()));
        }
        if self.kind == AggregatorKind::SelfAttention {
            if self.sa_model_dim != embed_dim {
                return Err(Error::Config(format!(
                    "sa_model_dim {} must equal embed_dim {embed_dim}",
                    self.sa_model_dim
                )));
            }
            if self.sa_heads == 0 || self.sa_model_dim % self.sa_heads != 0 {
                return Err(Error::Config(format!(
                    "sa_model_dim {} must be divisible by sa_heads {}",
                    self.sa_model_dim, self.sa_heads
                )));
            }
        }
        Ok(())
    }
}

/// `k` clip indices spread evenly over `0..num_clips`: index `j` is
/// `floor(j * num_clips / k)`. When the video is shorter than `k`, indices
/// repeat. The result is non-decreasing.
pub fn sample_uniform(num_clips: usize, k: usize) -> Result<Vec<usize>> {
    if num_clips == 0 {
        return Err(Error::contract("cannot sample clips from an empty video"));
    }
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    Ok((0..k).map(|j| j * num_clips / k).collect())
}

/// Short-term embeddings of one video with their source clip indices.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub features: Vec<Embedding>,
    pub clip_indices: Vec<usize>,
}

impl FeatureSequence {
    /// Indices must be non-decreasing (temporal order; repeats allowed for short videos).
    pub fn new(features: Vec<Embedding>, clip_indices: Vec<usize>) -> Result<Self> {
        if features.is_empty() || features.len() != clip_indices.len() {
            return Err(Error::contract("feature sequence needs one index per feature and at least one feature"));
        }
        if clip_indices.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::contract("clip indices must be in temporal order"));
        }
        Ok(FeatureSequence { features, clip_indices })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Stack per-video sequences `[b][k]` of embeddings into a `[b, k, e]` tensor.
pub fn stack_sequences(seqs: &[&[Embedding]]) -> Result<Tensor> {
    let k = seqs.first().map_or(0, |s| s.len());
    let e = seqs.first().and_then(|s| s.first()).map_or(0, Embedding::dim);
    if k == 0 || seqs.iter().any(|s| s.len() != k || s.iter().any(|x| x.dim() != e)) {
        return Err(Error::dim("stack_sequences", "sequences must be non-empty and equally shaped"));
    }
    let data = seqs.iter().flat_map(|s| s.iter().flat_map(|x| x.values().iter().copied())).collect();
    Tensor::new(vec![seqs.len(), k, e], data)
}

#[derive(Clone, Debug)]
pub struct Aggregator {
    pub config: AggregatorConfig,
    pub embed_dim: usize,
    /// Add positional encodings before self-attention. Turning this off is a
    /// diagnostic that makes the self-attention aggregator order-blind.
    pub positional: bool,
}

impl Aggregator {
    pub fn new(config: AggregatorConfig, embed_dim: usize) -> Result<Self> {
        config.validate(embed_dim)?;
        Ok(Aggregator {
            config,
            embed_dim,
            positional: true,
        })
    }

    pub fn kind(&self) -> AggregatorKind {
        self.config.kind
    }

    /// The same aggregator with a different kind (e.g. averaging at inference).
    pub fn with_kind(&self, kind: AggregatorKind) -> Aggregator {
        Aggregator {
            config: AggregatorConfig { kind, ..self.config.clone() },
            ..self.clone()
        }
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        if self.config.kind != AggregatorKind::SelfAttention {
            return;
        }
        let d = self.config.sa_model_dim;
        store.init_normal("agg.cls", &[1, 1, d], 0.02, rng);
        for l in 0..self.config.sa_layers {
            transformer::init_block(store, &format!("agg.layer{l}"), d, self.config.sa_mlp_dim, rng);
        }
        transformer::init_layer_norm(store, "agg.final_ln", d);
        transformer::init_linear(store, "agg.proj", d, d, rng);
    }

    pub fn expected_param_count(&self) -> usize {
        match self.config.kind {
            AggregatorKind::Average => 0,
            AggregatorKind::SelfAttention => {
                let d = self.config.sa_model_dim;
                d + self.config.sa_layers * transformer::block_param_count(d, self.config.sa_mlp_dim) + 2 * d + d * d + d
            }
        }
    }

    /// Aggregate `seq [b, k, e]` of unit vectors into `[b, e]` unit vectors.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: Var) -> Result<Var> {
        let shape = g.shape(seq).to_vec();
        if shape.len() != 3 || shape[1] == 0 || shape[2] != self.embed_dim {
            return Err(Error::dim(
                "aggregate",
                format!("expected [b, k>=1, {}], got {shape:?}", self.embed_dim),
            ));
        }
        match self.config.kind {
            AggregatorKind::Average => aggregate_avg(g, seq),
            AggregatorKind::SelfAttention => self.aggregate_sa(g, store, seq),
        }
    }

    fn aggregate_sa(&self, g: &mut Graph, store: &ParamStore, seq: Var) -> Result<Var> {
        let shape = g.shape(seq).to_vec();
        let (k, d) = (shape[1], shape[2]);
        // unit vectors have entries ~ 1/sqrt(d); rescale to the magnitude of the positional code
        let mut x = g.scale(seq, (d as Scalar).sqrt())?;
        if self.positional {
            let pe = g.constant(sinusoidal_positions(k, d));
            x = g.add(x, pe)?;
        }
        let mut x = prepend_token(g, store, "agg.cls", x)?;
        for l in 0..self.config.sa_layers {
            x = block(g, store, &format!("agg.layer{l}"), x, None, self.config.sa_heads)?;
        }
        let x = transformer::layer_norm(g, store, "agg.final_ln", x)?;
        let cls = first_token(g, x)?;
        let out = transformer::linear(g, store, "agg.proj", cls)?;
        g.l2_normalize(out)
    }

    /// Aggregate a single sequence without recording gradients.
    pub fn aggregate(&self, store: &ParamStore, seq: &[Embedding]) -> Result<Embedding> {
        let mut g = Graph::new();
        let x = g.constant(stack_sequences(&[seq])?);
        let out = self.forward(&mut g, store, x)?;
        Ok(Embedding::new(g.value(out).data().to_vec())?)
    }
}

/// Mean over the sequence axis followed by L2 normalization. Order-independent
/// bit for bit (the mean uses sorted summation).
pub fn aggregate_avg(g: &mut Graph, seq: Var) -> Result<Var> {
    let mean = g.mean_axis(seq, 1)?;
    let e = *g.shape(mean).last().unwrap_or(&1);
    if let Some(norm) = g
        .value(mean)
        .data()
        .chunks(e)
        .map(|r| r.iter().map(|v| v * v).sum::<Scalar>().sqrt())
        .find(|&n| n < DEGENERATE_NORM)
    {
        return Err(Error::DegenerateAggregate { norm: norm as f64 });
    }
    g.l2_normalize(mean)
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::gradcheck::{check_inputs, check_params, project};

    fn random_embeddings(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Embedding> {
        (0..n)
            .map(|_| Embedding::normalized((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect()
    }

    fn sa(cfg: AggregatorConfig, seed: u64) -> (Aggregator, ParamStore) {
        let agg = Aggregator::new(cfg, 32).unwrap();
        let mut store = ParamStore::new();
        agg.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (agg, store)
    }

    #[test]
    fn uniform_sampling_examples() {
        assert_eq!(sample_uniform(16, 16).unwrap(), (0..16).collect::<Vec<_>>());
        assert_eq!(sample_uniform(32, 16).unwrap(), (0..16).map(|j| 2 * j).collect::<Vec<_>>());
        assert_eq!(sample_uniform(4, 8).unwrap(), vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(sample_uniform(1, 3).unwrap(), vec![0, 0, 0]);
        assert!(matches!(sample_uniform(0, 16), Err(Error::Contract(_))));
    }

    #[test]
    fn uniform_sampling_matches_floor_oracle() {
        for n in 1..40usize {
            for k in 1..20usize {
                let got = sample_uniform(n, k).unwrap();
                for (j, &i) in got.iter().enumerate() {
                    // largest i with i * k <= j * n
                    let oracle = (0..n).rev().find(|&i| i * k <= j * n).unwrap();
                    assert_eq!(i, oracle);
                }
                assert!(got.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn average_of_identical_vectors_is_identity() {
        let e = Embedding::normalized(vec![0.2, -0.9, 0.4]).unwrap();
        let agg = Aggregator::new(
            AggregatorConfig {
                kind: AggregatorKind::Average,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let out = agg.aggregate(&ParamStore::new(), &vec![e.clone(); 5]).unwrap();
        for (a, b) in out.values().iter().zip(e.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn average_examples() {
        let agg = Aggregator::new(
            AggregatorConfig {
                kind: AggregatorKind::Average,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        let x = Embedding::new(vec![1.0, 0.0]).unwrap();
        let y = Embedding::new(vec![0.0, 1.0]).unwrap();
        let out = agg.aggregate(&ParamStore::new(), &[x.clone(), y]).unwrap();
        let h = (0.5 as Scalar).sqrt();
        assert!((out.values()[0] - h).abs() < 1e-15 && (out.values()[1] - h).abs() < 1e-15);
        let err = agg.aggregate(&ParamStore::new(), &[x.clone(), x.neg()]).unwrap_err();
        assert!(matches!(err, Error::DegenerateAggregate { .. }));
    }

    #[test]
    fn average_is_permutation_invariant_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let agg = Aggregator::new(
            AggregatorConfig {
                kind: AggregatorKind::Average,
                ..Default::default()
            },
            32,
        )
        .unwrap();
        let seq = random_embeddings(16, 32, &mut rng);
        let base = agg.aggregate(&ParamStore::new(), &seq).unwrap();
        for _ in 0..20 {
            let mut p = seq.clone();
            p.shuffle(&mut rng);
            assert_eq!(agg.aggregate(&ParamStore::new(), &p).unwrap(), base);
        }
    }

    #[test]
    fn self_attention_without_positions_is_order_blind() {
        let (mut agg, store) = sa(AggregatorConfig::default(), 22);
        agg.positional = false;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let seq = random_embeddings(16, 32, &mut rng);
        let base = agg.aggregate(&store, &seq).unwrap();
        for _ in 0..20 {
            let mut p = seq.clone();
            p.shuffle(&mut rng);
            let out = agg.aggregate(&store, &p).unwrap();
            let diff: Scalar = out.values().iter().zip(base.values()).map(|(a, b)| (a - b) * (a - b)).sum();
            assert!(diff.sqrt() < 1e-6);
        }
    }

    #[test]
    fn self_attention_with_positions_is_order_sensitive() {
        let (agg, store) = sa(AggregatorConfig::default(), 24);
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let seq = random_embeddings(16, 32, &mut rng);
        let base = agg.aggregate(&store, &seq).unwrap();
        let max_change = (0..20)
            .map(|_| {
                let mut p = seq.clone();
                p.shuffle(&mut rng);
                let out = agg.aggregate(&store, &p).unwrap();
                out.values().iter().zip(base.values()).map(|(a, b)| (a - b) * (a - b)).sum::<Scalar>().sqrt()
            })
            .fold(0.0, Scalar::max);
        assert!(max_change >= 1e-3, "max change {max_change}");
    }

    #[test]
    fn sa_output_is_unit_norm_and_param_count_matches() {
        let (agg, store) = sa(
            AggregatorConfig {
                sa_layers: 6,
                ..Default::default()
            },
            26,
        );
        assert_eq!(store.numel(), agg.expected_param_count());
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        for k in [1, 3, 16] {
            let out = agg.aggregate(&store, &random_embeddings(k, 32, &mut rng)).unwrap();
            let n = out.values().iter().map(|v| v * v).sum::<Scalar>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn config_validation() {
        let bad = AggregatorConfig {
            sa_model_dim: 16,
            ..Default::default()
        };
        assert!(Aggregator::new(bad, 32).is_err());
        let zero_k = AggregatorConfig { k: 0, ..Default::default() };
        assert!(Aggregator::new(zero_k, 32).is_err());
    }

    #[test]
    fn feature_sequence_requires_temporal_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let f = random_embeddings(3, 4, &mut rng);
        assert!(FeatureSequence::new(f.clone(), vec![0, 0, 2]).is_ok());
        assert!(FeatureSequence::new(f, vec![2, 1, 0]).is_err());
    }

    #[test]
    fn sa_gradients_match_finite_differences() {
        let cfg = AggregatorConfig {
            k: 3,
            sa_layers: 1,
            sa_heads: 2,
            sa_mlp_dim: 6,
            sa_model_dim: 4,
            kind: AggregatorKind::SelfAttention,
        };
        let agg = Aggregator::new(cfg, 4).unwrap();
        let mut store = ParamStore::new();
        agg.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(29));
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let a = random_embeddings(3, 4, &mut rng);
        let b = random_embeddings(3, 4, &mut rng);
        let seq = stack_sequences(&[&a, &b]).unwrap();
        let rep = check_params("sa aggregator params", &store, |g, s| {
            let x = g.constant(seq.clone());
            let out = agg.forward(g, s, x)?;
            project(g, out, 31)
        })
        .unwrap();
        assert!(rep.passed, "{rep:?}");
        let rep = check_inputs("sa aggregator inputs", &[seq.clone()], |g, v| {
            let out = agg.forward(g, &store, v[0])?;
            project(g, out, 32)
        })
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn average_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let a = random_embeddings(4, 5, &mut rng);
        let seq = stack_sequences(&[&a]).unwrap();
        let rep = check_inputs("average aggregator", &[seq], |g, v| {
            let out = aggregate_avg(g, v[0])?;
            project(g, out, 34)
        })
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
