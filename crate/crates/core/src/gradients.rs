//! Finite-difference checks of every differentiable component at a tiny scale:
//! graph ops, both encoders, both aggregators and every loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{aggregate_avg, AggregatorConfig, AggregatorKind};
use crate::autodiff::gradcheck::{check_inputs, check_params, project, random_tensor, GradCheckReport};
use crate::autodiff::suite::check_all_ops;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::encoders::{ClipInput, EncoderConfig, TextInput};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::objectives::{child_loss, parent_loss, ChildBatch, ParentBatch, ParentObjective, PositiveMask, Temperature};

/// Seeds per op in the op-level sweep.
pub const OP_SEEDS: u64 = 10;

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            model_dim: 8,
            num_layers: 1,
            num_heads: 2,
            mlp_dim: 8,
            max_seq_len: 4,
            vocab_size: 12,
            frame_feature_dim: 3,
            embed_dim: 8,
        },
        aggregator: AggregatorConfig {
            kind: AggregatorKind::SelfAttention,
            k: 3,
            sa_layers: 1,
            sa_heads: 2,
            sa_mlp_dim: 8,
            sa_model_dim: 8,
        },
    }
}

struct Fixture {
    model: Model,
    clips: Vec<ClipInput>,
    texts: Vec<TextInput>,
}

impl Fixture {
    fn new(n: usize, seed: u64) -> Result<Fixture> {
        let model = Model::init(&tiny_model_config(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let enc = &model.clip.config;
        let clips = (0..n)
            .map(|i| {
                let len = 1 + i % 3;
                let frames = (0..len)
                    .map(|_| (0..enc.frame_feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect();
                ClipInput::new(frames)
            })
            .collect();
        let texts = (0..n)
            .map(|i| {
                let len = 1 + (i + 1) % 3;
                TextInput::new((0..len).map(|_| rng.random_range(1..enc.vocab_size as u32)).collect())
            })
            .collect();
        Ok(Fixture { model, clips, texts })
    }

    fn encode(&self, g: &mut Graph, store: &ParamStore) -> Result<(Var, Var)> {
        let clips: Vec<&ClipInput> = self.clips.iter().collect();
        let texts: Vec<&TextInput> = self.texts.iter().collect();
        Ok((
            self.model.clip.forward_clips(g, store, &clips)?,
            self.model.text.forward_texts(g, store, &texts)?,
        ))
    }
}

/// Run every check; `op_seeds` random draws per graph op.
pub fn check_everything(op_seeds: u64) -> Result<Vec<GradCheckReport>> {
    let mut reports = check_all_ops(op_seeds)?;
    let tau = Temperature::new(0.05)?;

    let fx = Fixture::new(4, 100)?;
    let all = &fx.model.params;
    let clip_params = all.subset("clip.");
    let text_params = all.subset("text.");

    reports.push(check_params("clip encoder", &clip_params, |g, s| {
        let clips: Vec<&ClipInput> = fx.clips.iter().collect();
        let out = fx.model.clip.forward_clips(g, s, &clips)?;
        project(g, out, 1)
    })?);
    reports.push(check_params("text encoder", &text_params, |g, s| {
        let texts: Vec<&TextInput> = fx.texts.iter().collect();
        let out = fx.model.text.forward_texts(g, s, &texts)?;
        project(g, out, 2)
    })?);

    // aggregators on [2 videos, 3 clips, 8] unit-ish inputs
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seq = random_tensor(&[2, 3, 8], 1.0, &mut rng);
    let sa = fx.model.aggregator.clone();
    reports.push(check_params("self-attention aggregator (params)", &all.subset("agg."), |g, s| {
        let x = g.constant(seq.clone());
        let out = sa.forward(g, s, x)?;
        project(g, out, 4)
    })?);
    reports.push(check_inputs("self-attention aggregator (inputs)", &[seq.clone()], |g, v| {
        let out = sa.forward(g, all, v[0])?;
        project(g, out, 5)
    })?);
    reports.push(check_inputs("average aggregator", &[seq], |g, v| {
        let out = aggregate_avg(g, v[0])?;
        project(g, out, 6)
    })?);

    let encoders = {
        let mut s = clip_params.clone();
        s.extend(text_params.clone());
        s
    };
    let mask = PositiveMask::from_labels(&[0, 1, 0, 2]);
    reports.push(check_params("child loss", &encoders, |g, s| {
        let (clips, narrations) = fx.encode(g, s)?;
        let batch = ChildBatch {
            clips,
            narrations,
            positive_mask: mask.clone(),
        };
        child_loss(g, &batch, tau, true)
    })?);

    // parent level: 2 videos x 3 clips, one summary each
    let pf = Fixture::new(6, 200)?;
    let summaries = vec![TextInput::new(vec![7, 9]), TextInput::new(vec![8])];
    for (name, objective) in [
        ("parent loss (video-summary + narration-summary)", ParentObjective::Full),
        ("parent loss (video-summary only)", ParentObjective::VideoSummary),
        ("parent loss (video-narration, no summary)", ParentObjective::NoSummary),
    ] {
        reports.push(check_params(name, &pf.model.params, |g, s| {
            let (clips, narrs) = pf.encode(g, s)?;
            let e = pf.model.embed_dim();
            let seq_v = g.reshape(clips, &[2, 3, e])?;
            let videos = pf.model.aggregator.forward(g, s, seq_v)?;
            let seq_n = g.reshape(narrs, &[2, 3, e])?;
            let narrations = Some(pf.model.aggregator.forward(g, s, seq_n)?);
            let refs: Vec<&TextInput> = summaries.iter().collect();
            let summaries = Some(pf.model.text.forward_texts(g, s, &refs)?);
            let batch = ParentBatch {
                videos,
                narrations,
                summaries,
                positive_mask: PositiveMask::diagonal(2),
            };
            parent_loss(g, &batch, tau, objective)
        })?);
    }
    Ok(reports)
}

pub fn all_passed(reports: &[GradCheckReport]) -> bool {
    !reports.is_empty() && reports.iter().all(|r| r.passed)
}
