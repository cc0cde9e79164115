//! Five-way multiple-choice probes, retrieval metrics, a linear probe and
//! embedding export.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{sample_uniform, AggregatorKind};
use crate::autodiff::{AdamWConfig, AdamWState, Graph, ParamStore, Scalar, Tensor};
use crate::corpus::Corpus;
use crate::encoders::{similarity, Embedding};
use crate::error::{Error, Result};
use crate::model::Model;

pub const NUM_CHOICES: usize = 5;
pub const CHANCE: f64 = 100.0 / NUM_CHOICES as f64;
/// Candidates scoring within this of the best are tied.
pub const TIE_TOL: Scalar = 1e-12;
/// Attempts at drawing a fresh distractor before giving up.
const MAX_RETRIES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Inter,
    Intra,
    None,
}

impl SplitTag {
    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Inter => "inter",
            SplitTag::Intra => "intra",
            SplitTag::None => "none",
        }
    }
}

/// What the model is asked about. Indices refer to `corpus.videos` and to
/// positions within a video.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Prompt {
    Narration { video: usize, clip: usize },
    Summary { video: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Candidate {
    Clip { video: usize, clip: usize },
    /// A whole video represented by these clips, in this order.
    Video { video: usize, clip_order: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub prompt: Prompt,
    pub candidates: Vec<Candidate>,
    pub answer_index: usize,
    pub split: SplitTag,
}

impl McqItem {
    pub fn new(prompt: Prompt, candidates: Vec<Candidate>, answer_index: usize, split: SplitTag) -> Result<McqItem> {
        if candidates.len() != NUM_CHOICES || answer_index >= NUM_CHOICES {
            return Err(Error::contract(format!(
                "an item needs {NUM_CHOICES} candidates and a valid answer (got {} and {answer_index})",
                candidates.len()
            )));
        }
        Ok(McqItem {
            prompt,
            candidates,
            answer_index,
            split,
        })
    }

    /// Place `answer` at a uniformly random position among `distractors`.
    fn shuffled(prompt: Prompt, answer: Candidate, distractors: Vec<Candidate>, split: SplitTag, rng: &mut impl Rng) -> Result<McqItem> {
        let pos = rng.random_range(0..NUM_CHOICES);
        let mut candidates = distractors;
        candidates.insert(pos.min(candidates.len()), answer);
        McqItem::new(prompt, candidates, pos, split)
    }
}

/// Narration prompt; the answer is its clip. Inter-video distractors are clips
/// of four other videos, intra-video ones other clips of the same video. No
/// distractor shares the answer's action label, so every item has exactly one
/// correct candidate.
pub fn build_child_mcq(corpus: &Corpus, n_items: usize, split: SplitTag, rng: &mut impl Rng) -> Result<Vec<McqItem>> {
    let eligible: Vec<usize> = match split {
        SplitTag::Inter => {
            if corpus.len() < NUM_CHOICES {
                return Err(Error::contract(format!(
                    "inter-video items need {NUM_CHOICES} videos; corpus has {}",
                    corpus.len()
                )));
            }
            (0..corpus.len()).collect()
        }
        SplitTag::Intra => (0..corpus.len()).filter(|&v| corpus.videos[v].clips.len() >= NUM_CHOICES).collect(),
        SplitTag::None => return Err(Error::contract("child items are either inter or intra")),
    };
    if eligible.is_empty() {
        return Err(Error::contract("no video has enough clips for intra-video items"));
    }
    let mut items = Vec::with_capacity(n_items);
    let mut failures = 0;
    while items.len() < n_items {
        let v = *eligible.choose(rng).expect("non-empty");
        let c = rng.random_range(0..corpus.videos[v].clips.len());
        let label = corpus.videos[v].clips[c].action_label;
        let distractors = match split {
            SplitTag::Inter => {
                let mut pool: Vec<(usize, usize)> = Vec::new();
                let mut used = BTreeSet::from([v]);
                for _ in 0..MAX_RETRIES {
                    if pool.len() == NUM_CHOICES - 1 {
                        break;
                    }
                    let w = rng.random_range(0..corpus.len());
                    if used.contains(&w) {
                        continue;
                    }
                    let others: Vec<usize> = (0..corpus.videos[w].clips.len())
                        .filter(|&j| corpus.videos[w].clips[j].action_label != label)
                        .collect();
                    if let Some(&j) = others.choose(rng) {
                        used.insert(w);
                        pool.push((w, j));
                    }
                }
                pool
            }
            _ => {
                let mut others: Vec<usize> = (0..corpus.videos[v].clips.len())
                    .filter(|&j| corpus.videos[v].clips[j].action_label != label)
                    .collect();
                others.shuffle(rng);
                others.into_iter().take(NUM_CHOICES - 1).map(|j| (v, j)).collect()
            }
        };
        if distractors.len() < NUM_CHOICES - 1 {
            failures += 1;
            if failures > MAX_RETRIES {
                return Err(Error::contract("corpus cannot supply distractors with distinct action labels"));
            }
            continue;
        }
        let distractors = distractors.into_iter().map(|(video, clip)| Candidate::Clip { video, clip }).collect();
        items.push(McqItem::shuffled(
            Prompt::Narration { video: v, clip: c },
            Candidate::Clip { video: v, clip: c },
            distractors,
            split,
            rng,
        )?);
    }
    Ok(items)
}

/// Summary prompt; candidates are five whole videos (`k` uniformly sampled
/// clips each), the distractors drawn without replacement from videos of other
/// intents.
pub fn build_summary_mcq(corpus: &Corpus, n_items: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<McqItem>> {
    if corpus.len() < NUM_CHOICES {
        return Err(Error::contract(format!("summary items need {NUM_CHOICES} videos")));
    }
    let video = |v: usize| -> Result<Candidate> {
        Ok(Candidate::Video {
            video: v,
            clip_order: sample_uniform(corpus.videos[v].clips.len(), k)?,
        })
    };
    let mut items = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        let v = rng.random_range(0..corpus.len());
        let intent = corpus.videos[v].latent_intent_id;
        let pool: Vec<usize> = (0..corpus.len()).filter(|&w| corpus.videos[w].latent_intent_id != intent).collect();
        if pool.len() < NUM_CHOICES - 1 {
            return Err(Error::contract("too few videos with other intents for summary distractors"));
        }
        let distractors = pool
            .choose_multiple(rng, NUM_CHOICES - 1)
            .map(|&w| video(w))
            .collect::<Result<Vec<_>>>()?;
        items.push(McqItem::shuffled(Prompt::Summary { video: v }, video(v)?, distractors, SplitTag::None, rng)?);
    }
    Ok(items)
}

/// Summary prompt; all candidates hold the same `k` clips of one video, only
/// the answer in their original order.
pub fn build_shuffle_mcq(corpus: &Corpus, n_items: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<McqItem>> {
    let eligible: Vec<usize> = (0..corpus.len()).filter(|&v| corpus.videos[v].clips.len() >= 3).collect();
    if eligible.is_empty() || k < 3 {
        return Err(Error::contract("shuffle items need videos and k of at least 3 clips"));
    }
    let mut items = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        let v = *eligible.choose(rng).expect("non-empty");
        let original = sample_uniform(corpus.videos[v].clips.len(), k)?;
        let mut seen = BTreeSet::from([original.clone()]);
        let mut distractors = Vec::with_capacity(NUM_CHOICES - 1);
        let mut tries = 0;
        while distractors.len() < NUM_CHOICES - 1 {
            tries += 1;
            if tries > MAX_RETRIES {
                return Err(Error::contract(format!(
                    "could not draw {} distinct shuffles of video {v}",
                    NUM_CHOICES - 1
                )));
            }
            let mut p = original.clone();
            p.shuffle(rng);
            if seen.insert(p.clone()) {
                distractors.push(Candidate::Video { video: v, clip_order: p });
            }
        }
        items.push(McqItem::shuffled(
            Prompt::Summary { video: v },
            Candidate::Video {
                video: v,
                clip_order: original,
            },
            distractors,
            SplitTag::None,
            rng,
        )?);
    }
    Ok(items)
}

/// Embeds prompts and candidates; items are scored by dot product.
pub trait Scorer {
    fn prompt_embedding(&mut self, prompt: &Prompt) -> Result<Embedding>;
    fn candidate_embedding(&mut self, candidate: &Candidate) -> Result<Embedding>;

    /// All candidates of one item; override to batch.
    fn candidate_embeddings(&mut self, candidates: &[Candidate]) -> Result<Vec<Embedding>> {
        candidates.iter().map(|c| self.candidate_embedding(c)).collect()
    }
}

/// Scores with a trained model. Clip, narration and summary embeddings of the
/// whole corpus are computed once up front.
pub struct ModelScorer<'a> {
    model: &'a Model,
    kind: AggregatorKind,
    clips: Vec<Vec<Embedding>>,
    narrations: Vec<Vec<Embedding>>,
    summaries: Vec<Embedding>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, corpus: &Corpus, kind: AggregatorKind) -> Result<ModelScorer<'a>> {
        let flat_clips: Vec<_> = corpus.videos.iter().flat_map(|v| v.clips.iter().map(|c| &c.frames)).collect();
        let flat_narr: Vec<_> = corpus
            .videos
            .iter()
            .flat_map(|v| v.clips.iter().map(|c| &c.narration_tokens))
            .collect();
        let mut clip_emb = model.embed_clips(&flat_clips)?.into_iter();
        let mut narr_emb = model.embed_texts(&flat_narr)?.into_iter();
        let mut clips = Vec::with_capacity(corpus.len());
        let mut narrations = Vec::with_capacity(corpus.len());
        for v in &corpus.videos {
            clips.push(clip_emb.by_ref().take(v.clips.len()).collect());
            narrations.push(narr_emb.by_ref().take(v.clips.len()).collect());
        }
        let summaries = model.embed_texts(&corpus.videos.iter().map(|v| &v.summary_tokens).collect::<Vec<_>>())?;
        Ok(ModelScorer {
            model,
            kind,
            clips,
            narrations,
            summaries,
        })
    }

    fn sequence(&self, video: usize, order: &[usize]) -> Vec<Embedding> {
        order.iter().map(|&c| self.clips[video][c].clone()).collect()
    }

    pub fn clip_embeddings(&self) -> &[Vec<Embedding>] {
        &self.clips
    }

    pub fn narration_embeddings(&self) -> &[Vec<Embedding>] {
        &self.narrations
    }

    /// Long-term feature of a video from the given clips.
    pub fn video_embedding(&self, video: usize, order: &[usize]) -> Result<Embedding> {
        let seq = self.sequence(video, order);
        Ok(self.model.aggregate(&[&seq], Some(self.kind))?.remove(0))
    }
}

impl Scorer for ModelScorer<'_> {
    fn prompt_embedding(&mut self, prompt: &Prompt) -> Result<Embedding> {
        Ok(match *prompt {
            Prompt::Narration { video, clip } => self.narrations[video][clip].clone(),
            Prompt::Summary { video } => self.summaries[video].clone(),
        })
    }

    fn candidate_embedding(&mut self, candidate: &Candidate) -> Result<Embedding> {
        match candidate {
            Candidate::Clip { video, clip } => Ok(self.clips[*video][*clip].clone()),
            Candidate::Video { video, clip_order } => self.video_embedding(*video, clip_order),
        }
    }

    fn candidate_embeddings(&mut self, candidates: &[Candidate]) -> Result<Vec<Embedding>> {
        let all_videos = candidates.iter().all(|c| matches!(c, Candidate::Video { .. }));
        let same_len = candidates
            .iter()
            .filter_map(|c| match c {
                Candidate::Video { clip_order, .. } => Some(clip_order.len()),
                _ => None,
            })
            .collect::<BTreeSet<_>>()
            .len()
            == 1;
        if !(all_videos && same_len) {
            return candidates.iter().map(|c| self.candidate_embedding(c)).collect();
        }
        let seqs: Vec<Vec<Embedding>> = candidates
            .iter()
            .map(|c| match c {
                Candidate::Video { video, clip_order } => self.sequence(*video, clip_order),
                Candidate::Clip { .. } => unreachable!(),
            })
            .collect();
        let refs: Vec<&[Embedding]> = seqs.iter().map(Vec::as_slice).collect();
        self.model.aggregate(&refs, Some(self.kind))
    }
}

/// Ground-truth lookup: clips and narrations map to a one-hot code of their
/// action, summaries and videos to a one-hot code of their intent. Videos are
/// order-blind, like an averaging aggregator.
pub struct LabelOracle<'a> {
    corpus: &'a Corpus,
    num_actions: usize,
    dim: usize,
}

impl<'a> LabelOracle<'a> {
    pub fn new(corpus: &'a Corpus) -> LabelOracle<'a> {
        let num_actions = corpus.videos.iter().flat_map(|v| v.clips.iter().map(|c| c.action_label + 1)).max().unwrap_or(0);
        let num_intents = corpus.videos.iter().map(|v| v.latent_intent_id + 1).max().unwrap_or(0);
        LabelOracle {
            corpus,
            num_actions,
            dim: num_actions + num_intents,
        }
    }

    fn one_hot(&self, i: usize) -> Embedding {
        let mut v = vec![0.0; self.dim];
        v[i] = 1.0;
        Embedding::new(v).expect("unit vector")
    }
}

impl Scorer for LabelOracle<'_> {
    fn prompt_embedding(&mut self, prompt: &Prompt) -> Result<Embedding> {
        Ok(match *prompt {
            Prompt::Narration { video, clip } => self.one_hot(self.corpus.videos[video].clips[clip].action_label),
            Prompt::Summary { video } => self.one_hot(self.num_actions + self.corpus.videos[video].latent_intent_id),
        })
    }

    fn candidate_embedding(&mut self, candidate: &Candidate) -> Result<Embedding> {
        Ok(match *candidate {
            Candidate::Clip { video, clip } => self.one_hot(self.corpus.videos[video].clips[clip].action_label),
            Candidate::Video { video, .. } => self.one_hot(self.num_actions + self.corpus.videos[video].latent_intent_id),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub accuracy: f64,
    pub items: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    /// Percent correct after random tie-breaking.
    pub accuracy: f64,
    /// Percent correct in expectation over tie-breaking.
    pub expected_accuracy: f64,
    pub items: usize,
    pub chance: f64,
    /// Items whose best score was shared by two or more candidates.
    pub ties: usize,
    pub per_split: BTreeMap<String, SplitReport>,
}

/// Pick the highest-scoring candidate of every item, breaking ties uniformly at random.
pub fn score_mcq(task: &str, items: &[McqItem], scorer: &mut dyn Scorer, rng: &mut impl Rng) -> Result<EvalReport> {
    let mut correct = 0usize;
    let mut expected = 0.0f64;
    let mut ties = 0usize;
    let mut splits: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for item in items {
        let p = scorer.prompt_embedding(&item.prompt)?;
        let cands = scorer.candidate_embeddings(&item.candidates)?;
        let scores: Vec<Scalar> = cands.iter().map(|c| similarity(&p, c)).collect();
        let best = scores.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
        let top: Vec<usize> = (0..scores.len()).filter(|&i| (best - scores[i]).abs() <= TIE_TOL).collect();
        if top.len() > 1 {
            ties += 1;
        }
        let pick = *top.choose(rng).expect("at least one candidate");
        let hit = pick == item.answer_index;
        if top.contains(&item.answer_index) {
            expected += 1.0 / top.len() as f64;
        }
        correct += hit as usize;
        let e = splits.entry(item.split.name().to_string()).or_default();
        e.0 += hit as usize;
        e.1 += 1;
    }
    let pct = |c: f64, n: usize| if n == 0 { 0.0 } else { 100.0 * c / n as f64 };
    Ok(EvalReport {
        task: task.to_string(),
        accuracy: pct(correct as f64, items.len()),
        expected_accuracy: pct(expected, items.len()),
        items: items.len(),
        chance: CHANCE,
        ties,
        per_split: splits
            .into_iter()
            .map(|(k, (c, n))| (k, SplitReport { accuracy: pct(c as f64, n), items: n }))
            .collect(),
    })
}

/// Indices sorted by descending score; equal scores keep index order.
fn ranking(scores: &[Scalar]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Average precision of one ranked list; items with positive relevance count
/// as relevant. `None` when nothing is relevant.
pub fn average_precision(scores: &[Scalar], relevance: &[Scalar]) -> Option<Scalar> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if relevance[i] > 0.0 {
            hits += 1;
            sum += hits as Scalar / (rank + 1) as Scalar;
        }
    }
    (hits > 0).then(|| sum / hits as Scalar)
}

/// nDCG with gains `relevance` and a `log2(rank + 1)` discount. `None` when
/// the ideal DCG is zero.
pub fn ndcg(scores: &[Scalar], relevance: &[Scalar]) -> Option<Scalar> {
    let dcg = |order: &[usize]| -> Scalar {
        order
            .iter()
            .enumerate()
            .map(|(r, &i)| relevance[i] / ((r + 2) as Scalar).log2())
            .sum()
    };
    let mut ideal: Vec<usize> = (0..relevance.len()).collect();
    ideal.sort_by(|&a, &b| relevance[b].total_cmp(&relevance[a]));
    let idcg = dcg(&ideal);
    (idcg > 0.0).then(|| dcg(&ranking(scores)) / idcg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub map_q2g: f64,
    pub map_g2q: f64,
    pub ndcg_q2g: f64,
    pub ndcg_g2q: f64,
    /// Averages of the two directions.
    pub map: f64,
    pub ndcg: f64,
}

/// mAP and nDCG of `scores [q][g]` against `relevance [q][g]` in both
/// directions. Lists without relevant items are skipped.
pub fn retrieval_from_scores(scores: &[Vec<Scalar>], relevance: &[Vec<Scalar>]) -> Result<RetrievalReport> {
    let q = scores.len();
    let g = scores.first().map_or(0, Vec::len);
    if relevance.len() != q || scores.iter().chain(relevance).any(|r| r.len() != g) {
        return Err(Error::dim("retrieval", "scores and relevance must both be q x g"));
    }
    let column = |m: &[Vec<Scalar>], j: usize| -> Vec<Scalar> { m.iter().map(|r| r[j]).collect() };
    let mean = |xs: Vec<Scalar>| if xs.is_empty() { 0.0 } else { xs.iter().sum::<Scalar>() / xs.len() as Scalar };
    let rows = |f: fn(&[Scalar], &[Scalar]) -> Option<Scalar>| mean((0..q).filter_map(|i| f(&scores[i], &relevance[i])).collect());
    let cols = |f: fn(&[Scalar], &[Scalar]) -> Option<Scalar>| {
        mean((0..g).filter_map(|j| f(&column(scores, j), &column(relevance, j))).collect())
    };
    let (map_q2g, map_g2q) = (rows(average_precision), cols(average_precision));
    let (ndcg_q2g, ndcg_g2q) = (rows(ndcg), cols(ndcg));
    Ok(RetrievalReport {
        map_q2g: map_q2g as f64,
        map_g2q: map_g2q as f64,
        ndcg_q2g: ndcg_q2g as f64,
        ndcg_g2q: ndcg_g2q as f64,
        map: (map_q2g + map_g2q) as f64 / 2.0,
        ndcg: (ndcg_q2g + ndcg_g2q) as f64 / 2.0,
    })
}

/// Retrieval between two embedding sets scored by dot product.
pub fn retrieval_metrics(queries: &[Embedding], gallery: &[Embedding], relevance: &[Vec<Scalar>]) -> Result<RetrievalReport> {
    let scores: Vec<Vec<Scalar>> = queries.iter().map(|q| gallery.iter().map(|g| similarity(q, g)).collect()).collect();
    retrieval_from_scores(&scores, relevance)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: Scalar,
    pub weight_decay: Scalar,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 300,
            lr: 0.05,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub train_items: usize,
    pub eval_items: usize,
    pub num_classes: usize,
    pub chance: f64,
}

fn rows_tensor(x: &[Embedding]) -> Result<Tensor> {
    let dim = x.first().map_or(0, Embedding::dim);
    Tensor::new(vec![x.len(), dim], x.iter().flat_map(|e| e.values().iter().copied()).collect())
}

/// Train one linear layer with softmax cross-entropy on frozen features
/// (full batch) and report accuracy on the held-out features.
pub fn linear_probe(
    train_x: &[Embedding],
    train_y: &[usize],
    eval_x: &[Embedding],
    eval_y: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if train_x.is_empty() || train_x.len() != train_y.len() || eval_x.len() != eval_y.len() {
        return Err(Error::contract("probe needs non-empty train features with one label each"));
    }
    if let Some(&bad) = train_y.iter().chain(eval_y).find(|&&y| y >= num_classes) {
        return Err(Error::contract(format!("label {bad} out of range for {num_classes} classes")));
    }
    let dim = train_x[0].dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamStore::new();
    params.init_normal("probe.w", &[dim, num_classes], 0.01, &mut rng);
    params.init_const("probe.b", &[num_classes], 0.0);
    let mut opt = AdamWState::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let x = rows_tensor(train_x)?;
    let onehot: Vec<bool> = train_y
        .iter()
        .flat_map(|&y| (0..num_classes).map(move |c| c == y))
        .collect();
    for _ in 0..cfg.iterations {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.param(&params, "probe.w")?;
        let b = g.param(&params, "probe.b")?;
        let h = g.matmul(xv, w)?;
        let logits = g.add(h, b)?;
        let all = g.logsumexp(logits)?;
        let pos = g.masked_logsumexp(logits, &onehot)?;
        let nll = g.sub(all, pos)?;
        let loss = g.mean_all(nll)?;
        let grads = g.backward(loss)?.params(&g);
        opt.step(&mut params, &grads)?;
    }
    let accuracy = |xs: &[Embedding], ys: &[usize]| -> Result<f64> {
        if xs.is_empty() {
            return Ok(0.0);
        }
        let mut g = Graph::new();
        let xv = g.constant(rows_tensor(xs)?);
        let w = g.constant(params.get("probe.w").expect("probe weight").clone());
        let b = g.constant(params.get("probe.b").expect("probe bias").clone());
        let h = g.matmul(xv, w)?;
        let logits = g.add(h, b)?;
        let hits = g
            .value(logits)
            .data()
            .chunks(num_classes)
            .zip(ys)
            .filter(|(row, &y)| {
                let best = (0..num_classes).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)));
                best == Some(y)
            })
            .count();
        Ok(100.0 * hits as f64 / xs.len() as f64)
    };
    Ok(ProbeReport {
        accuracy: accuracy(eval_x, eval_y)?,
        train_accuracy: accuracy(train_x, train_y)?,
        train_items: train_x.len(),
        eval_items: eval_x.len(),
        num_classes,
        chance: 100.0 / num_classes as f64,
    })
}

/// Long-term features of every video (`k` uniformly sampled clips) with their intents.
pub fn video_features(model: &Model, corpus: &Corpus, k: usize, kind: AggregatorKind) -> Result<(Vec<Embedding>, Vec<usize>)> {
    let scorer = ModelScorer::new(model, corpus, kind)?;
    let mut feats = Vec::with_capacity(corpus.len());
    let mut seqs = Vec::with_capacity(corpus.len());
    for (v, video) in corpus.videos.iter().enumerate() {
        seqs.push(scorer.sequence(v, &sample_uniform(video.clips.len(), k)?));
    }
    for chunk in seqs.chunks(64) {
        let refs: Vec<&[Embedding]> = chunk.iter().map(Vec::as_slice).collect();
        feats.extend(model.aggregate(&refs, Some(kind))?);
    }
    Ok((feats, corpus.videos.iter().map(|v| v.latent_intent_id).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportLevel {
    Child,
    Parent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportRow {
    pub id: String,
    pub level: ExportLevel,
    pub label: usize,
    pub vector: Vec<Scalar>,
}

/// Clip embeddings labeled by action (child) or video embeddings labeled by
/// intent (parent), in corpus order.
pub fn export_embeddings(model: &Model, corpus: &Corpus, level: ExportLevel, k: usize, kind: AggregatorKind) -> Result<Vec<ExportRow>> {
    match level {
        ExportLevel::Child => {
            let scorer = ModelScorer::new(model, corpus, kind)?;
            Ok(corpus
                .videos
                .iter()
                .zip(scorer.clip_embeddings())
                .flat_map(|(v, embs)| {
                    v.clips.iter().zip(embs).map(|(c, e)| ExportRow {
                        id: format!("{}/{}", v.video_id, c.clip_index),
                        level,
                        label: c.action_label,
                        vector: e.values().to_vec(),
                    })
                })
                .collect())
        }
        ExportLevel::Parent => {
            let (feats, labels) = video_features(model, corpus, k, kind)?;
            Ok(corpus
                .videos
                .iter()
                .zip(feats.into_iter().zip(labels))
                .map(|(v, (e, label))| ExportRow {
                    id: v.video_id.clone(),
                    level,
                    label,
                    vector: e.values().to_vec(),
                })
                .collect())
        }
    }
}

pub fn write_export(w: &mut impl Write, rows: &[ExportRow]) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub items: usize,
    pub k: usize,
    pub seed: u64,
    /// Also run the intent linear probe (needs a training corpus) and clip-narration retrieval.
    pub extended: bool,
    pub probe: ProbeConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            items: 500,
            k: 16,
            seed: 0,
            extended: true,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub aggregator: AggregatorKind,
    pub child_mcq_inter: EvalReport,
    pub child_mcq_intra: EvalReport,
    pub summary_mcq: EvalReport,
    pub shuffle_mcq: EvalReport,
    pub linear_probe: Option<ProbeReport>,
    pub retrieval: Option<RetrievalReport>,
}

/// Seed for one named task, so adding a task never reshuffles the others.
fn task_rng(seed: u64, task: &str) -> ChaCha8Rng {
    let h = crate::corpus::hex_digest(format!("{seed}/{task}").as_bytes());
    ChaCha8Rng::seed_from_u64(u64::from_str_radix(&h[..16], 16).expect("hex"))
}

/// Every evaluation protocol on `eval`; `train` supplies the probe's training
/// features. Never modifies the model.
pub fn evaluate(model: &Model, kind: AggregatorKind, eval: &Corpus, train: Option<&Corpus>, opts: &EvalOptions) -> Result<EvalSummary> {
    let mut scorer = ModelScorer::new(model, eval, kind)?;
    let mut run = |task: &str, items: Vec<McqItem>| {
        let mut rng = task_rng(opts.seed, &format!("{task}/score"));
        score_mcq(task, &items, &mut scorer, &mut rng)
    };
    let inter = build_child_mcq(eval, opts.items, SplitTag::Inter, &mut task_rng(opts.seed, "child-inter"))?;
    let child_mcq_inter = run("child-mcq-inter", inter)?;
    let intra = build_child_mcq(eval, opts.items, SplitTag::Intra, &mut task_rng(opts.seed, "child-intra"))?;
    let child_mcq_intra = run("child-mcq-intra", intra)?;
    let summary = build_summary_mcq(eval, opts.items, opts.k, &mut task_rng(opts.seed, "summary"))?;
    let summary_mcq = run("summary-mcq", summary)?;
    let shuffle = build_shuffle_mcq(eval, opts.items, opts.k, &mut task_rng(opts.seed, "shuffle"))?;
    let shuffle_mcq = run("shuffle-mcq", shuffle)?;

    let (mut linear_probe_report, mut retrieval) = (None, None);
    if opts.extended {
        if let Some(train) = train {
            let (tx, ty) = video_features(model, train, opts.k, kind)?;
            let (ex, ey) = video_features(model, eval, opts.k, kind)?;
            let classes = ty.iter().chain(&ey).max().map_or(1, |m| m + 1);
            linear_probe_report = Some(linear_probe(&tx, &ty, &ex, &ey, classes, &opts.probe)?);
        }
        let clips: Vec<Embedding> = scorer.clip_embeddings().iter().flatten().cloned().collect();
        let narrs: Vec<Embedding> = scorer.narration_embeddings().iter().flatten().cloned().collect();
        let labels: Vec<usize> = eval.videos.iter().flat_map(|v| v.action_labels()).collect();
        let relevance: Vec<Vec<Scalar>> = labels
            .iter()
            .map(|a| labels.iter().map(|b| if a == b { 1.0 } else { 0.0 }).collect())
            .collect();
        retrieval = Some(retrieval_metrics(&clips, &narrs, &relevance)?);
    }
    Ok(EvalSummary {
        aggregator: kind,
        child_mcq_inter,
        child_mcq_intra,
        summary_mcq,
        shuffle_mcq,
        linear_probe: linear_probe_report,
        retrieval,
    })
}
