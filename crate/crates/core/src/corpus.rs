//! Videos made of clips with aligned narrations and one summary each, a JSONL
//! storage format, batch builders for both training levels, and a synthetic
//! generator with known latent structure.
//!
//! On disk a corpus is a directory holding `manifest.json` and `videos.jsonl`
//! (one [`VideoRecord`] per line).

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::sample_uniform;
use crate::autodiff::Scalar;
use crate::encoders::{ClipInput, TextInput};
use crate::error::{Error, Result};
use crate::objectives::PositiveMask;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VIDEOS_FILE: &str = "videos.jsonl";
pub const CORPUS_SCHEMA_VERSION: u32 = 1;
/// Token id reserved for padding.
pub const PAD_TOKEN: u32 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_index: usize,
    pub frames: ClipInput,
    pub narration_tokens: TextInput,
    pub action_label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub clips: Vec<ClipRecord>,
    pub summary_tokens: TextInput,
    pub latent_intent_id: usize,
    pub duration_clips: usize,
}

impl VideoRecord {
    pub fn validate(&self) -> Result<()> {
        if self.clips.is_empty() {
            return Err(Error::Integrity(format!("video {} has no clips", self.video_id)));
        }
        if let Some((i, c)) = self.clips.iter().enumerate().find(|(i, c)| c.clip_index != *i) {
            return Err(Error::Integrity(format!(
                "video {}: clip at position {i} has index {}",
                self.video_id, c.clip_index
            )));
        }
        if self.duration_clips != self.clips.len() {
            return Err(Error::Integrity(format!(
                "video {}: duration_clips {} but {} clips",
                self.video_id,
                self.duration_clips,
                self.clips.len()
            )));
        }
        Ok(())
    }

    pub fn action_labels(&self) -> Vec<usize> {
        self.clips.iter().map(|c| c.action_label).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Videos in the training split.
    pub num_videos: usize,
    /// Videos in the held-out split.
    pub num_eval_videos: usize,
    pub clips_per_video: usize,
    pub num_intents: usize,
    pub actions_per_intent: usize,
    pub frames_per_clip: usize,
    pub frame_feature_dim: usize,
    pub latent_dim: usize,
    pub vocab_size: usize,
    /// Std of gaussian noise added to every frame feature.
    pub frame_noise: Scalar,
    /// Probability that a text token is replaced by a random token of the same kind.
    pub token_noise: Scalar,
    /// Pair up intents so that partners share an action set and differ only in
    /// the direction their actions are visited.
    pub order_signal: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_videos: 200,
            num_eval_videos: 40,
            clips_per_video: 16,
            num_intents: 8,
            actions_per_intent: 6,
            frames_per_clip: 4,
            frame_feature_dim: 16,
            latent_dim: 8,
            vocab_size: 256,
            frame_noise: 0.3,
            token_noise: 0.1,
            order_signal: true,
        }
    }
}

// Markov chain used when `order_signal` is set.
const P_JUMP: Scalar = 0.05;
const P_ADVANCE: Scalar = 0.40;

/// Token id ranges derived from a generator config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub verb_start: u32,
    pub object_start: u32,
    pub theme_start: u32,
    pub goal_start: u32,
    pub end: u32,
}

impl GeneratorConfig {
    pub fn num_action_sets(&self) -> usize {
        if self.order_signal {
            self.num_intents / 2
        } else {
            self.num_intents
        }
    }

    pub fn num_actions(&self) -> usize {
        self.num_action_sets() * self.actions_per_intent
    }

    pub fn token_layout(&self) -> TokenLayout {
        let verb_start = PAD_TOKEN + 1;
        let object_start = verb_start + self.actions_per_intent as u32;
        let theme_start = object_start + self.num_actions() as u32;
        let goal_start = theme_start + self.num_action_sets() as u32;
        let end = goal_start + self.num_intents as u32;
        TokenLayout {
            verb_start,
            object_start,
            theme_start,
            goal_start,
            end,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clips_per_video == 0 || self.frames_per_clip == 0 || self.num_intents == 0 || self.actions_per_intent == 0 {
            return bad("clips_per_video, frames_per_clip, num_intents and actions_per_intent must be positive".into());
        }
        if self.frame_feature_dim == 0 || self.latent_dim == 0 {
            return bad("feature dimensions must be positive".into());
        }
        if self.order_signal && self.num_intents % 2 != 0 {
            return bad(format!("order_signal pairs intents; num_intents {} is odd", self.num_intents));
        }
        if self.actions_per_intent * self.num_intents > self.vocab_size {
            return bad(format!(
                "{} intents x {} actions exceed vocab_size {}",
                self.num_intents, self.actions_per_intent, self.vocab_size
            ));
        }
        let layout = self.token_layout();
        if layout.end as usize > self.vocab_size {
            return bad(format!("token layout needs {} ids but vocab_size is {}", layout.end, self.vocab_size));
        }
        if !(self.frame_noise >= 0.0 && self.frame_noise.is_finite()) || !(0.0..=1.0).contains(&self.token_noise) {
            return bad("noise levels out of range".into());
        }
        Ok(())
    }
}

/// Provenance stored with synthetic corpora, enough to regenerate them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub config: GeneratorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub split: String,
    pub video_count: usize,
    pub vocab_size: usize,
    pub frame_feature_dim: usize,
    #[serde(default)]
    pub num_intents: usize,
    #[serde(default)]
    pub num_actions: usize,
    #[serde(default)]
    pub generator: Option<GeneratorInfo>,
}

impl CorpusManifest {
    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        hex_digest(&bytes)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub videos: Vec<VideoRecord>,
}

impl Corpus {
    pub fn empty(split: &str, vocab_size: usize, frame_feature_dim: usize) -> Corpus {
        Corpus {
            manifest: CorpusManifest {
                schema_version: CORPUS_SCHEMA_VERSION,
                split: split.to_string(),
                video_count: 0,
                vocab_size,
                frame_feature_dim,
                num_intents: 0,
                num_actions: 0,
                generator: None,
            },
            videos: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn num_clips(&self) -> usize {
        self.videos.iter().map(|v| v.clips.len()).sum()
    }

    /// Write `manifest.json` and `videos.jsonl` into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if self.manifest.video_count != self.videos.len() {
            return Err(Error::Integrity(format!(
                "manifest says {} videos but corpus holds {}",
                self.manifest.video_count,
                self.videos.len()
            )));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::path(dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let mut m = serde_json::to_string_pretty(&self.manifest)?;
        m.push('\n');
        std::fs::write(&manifest_path, m).map_err(|e| Error::path(&manifest_path, e))?;
        let videos_path = dir.join(VIDEOS_FILE);
        let file = File::create(&videos_path).map_err(|e| Error::path(&videos_path, e))?;
        let mut w = BufWriter::new(file);
        for v in &self.videos {
            serde_json::to_writer(&mut w, v)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Load a whole corpus, checking every record and the manifest count.
    pub fn load(dir: &Path) -> Result<Corpus> {
        let reader = CorpusReader::open(dir)?;
        let manifest = reader.manifest().clone();
        let videos = reader.collect::<Result<Vec<_>>>()?;
        Ok(Corpus { manifest, videos })
    }

    /// Load and check the manifest only.
    pub fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::path(&path, e))?;
        let manifest: CorpusManifest = serde_json::from_str(&text)?;
        if manifest.schema_version != CORPUS_SCHEMA_VERSION {
            return Err(Error::Integrity(format!(
                "corpus schema version {} is not supported (expected {CORPUS_SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        Ok(manifest)
    }
}

/// Streams videos one line at a time. Yields an integrity error at the end if
/// the line count disagrees with the manifest.
pub struct CorpusReader {
    manifest: CorpusManifest,
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
    seen: usize,
    done: bool,
}

impl CorpusReader {
    pub fn open(dir: &Path) -> Result<CorpusReader> {
        let manifest = Corpus::load_manifest(dir)?;
        let path = dir.join(VIDEOS_FILE);
        let file = File::open(&path).map_err(|e| Error::path(&path, e))?;
        Ok(CorpusReader {
            manifest,
            path,
            lines: BufReader::new(file).lines(),
            line_no: 0,
            seen: 0,
            done: false,
        })
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }
}

impl Iterator for CorpusReader {
    type Item = Result<VideoRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            match self.lines.next() {
                None => {
                    self.done = true;
                    if self.seen != self.manifest.video_count {
                        return Some(Err(Error::Integrity(format!(
                            "{} holds {} videos but the manifest declares {}",
                            self.path.display(),
                            self.seen,
                            self.manifest.video_count
                        ))));
                    }
                    return None;
                }
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(Error::path(&self.path, e)));
                }
                Some(Ok(line)) => {
                    self.line_no += 1;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let parsed = serde_json::from_str::<VideoRecord>(&line)
                        .map_err(|e| Error::Parse {
                            line: self.line_no,
                            message: e.to_string(),
                        })
                        .and_then(|v| v.validate().map(|_| v));
                    if parsed.is_err() {
                        self.done = true;
                    }
                    self.seen += 1;
                    return Some(parsed);
                }
            }
        }
    }
}

/// Latent parameters shared by every split generated from one seed.
struct World {
    /// `[action][frame] -> latent vector`.
    action_latents: Vec<Vec<Vec<Scalar>>>,
    /// `frame_feature_dim x latent_dim` rendering matrix.
    render: Vec<Vec<Scalar>>,
}

impl World {
    fn new(cfg: &GeneratorConfig, seed: u64) -> World {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a11);
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let action_latents = (0..cfg.num_actions())
            .map(|_| {
                let base: Vec<Scalar> = (0..cfg.latent_dim).map(|_| normal.sample(&mut rng)).collect();
                (0..cfg.frames_per_clip)
                    .map(|_| base.iter().map(|b| b + 0.3 * normal.sample(&mut rng)).collect())
                    .collect()
            })
            .collect();
        let scale = 1.0 / (cfg.latent_dim as Scalar).sqrt();
        let render = (0..cfg.frame_feature_dim)
            .map(|_| (0..cfg.latent_dim).map(|_| scale * normal.sample(&mut rng)).collect())
            .collect();
        World { action_latents, render }
    }

    fn render_frame(&self, action: usize, frame: usize) -> Vec<Scalar> {
        let z = &self.action_latents[action][frame];
        self.render.iter().map(|row| row.iter().zip(z).map(|(r, x)| r * x).sum()).collect()
    }
}

/// Action set of an intent, and whether it is walked backwards.
fn intent_structure(cfg: &GeneratorConfig, intent: usize) -> (usize, bool) {
    if cfg.order_signal {
        (intent / 2, intent % 2 == 1)
    } else {
        (intent, false)
    }
}

/// Sequence of local action indices for one video.
fn action_sequence(cfg: &GeneratorConfig, reverse: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let a = cfg.actions_per_intent;
    if !cfg.order_signal {
        return (0..cfg.clips_per_video).map(|_| rng.random_range(0..a)).collect();
    }
    let mut step = 0usize;
    let mut seq = Vec::with_capacity(cfg.clips_per_video);
    for _ in 0..cfg.clips_per_video {
        let u: Scalar = rng.random();
        let local = if u < P_JUMP {
            rng.random_range(0..a)
        } else {
            if u < P_JUMP + P_ADVANCE && !seq.is_empty() {
                step = (step + 1).min(a - 1);
            }
            if reverse {
                a - 1 - step
            } else {
                step
            }
        };
        seq.push(local);
    }
    seq
}

/// A generated train/eval pair sharing latent structure.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Corpus,
    pub eval: Corpus,
}

/// Generate both splits deterministically from `seed`.
pub fn generate_synthetic(cfg: &GeneratorConfig, seed: u64) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let world = World::new(cfg, seed);
    let train = generate_split(cfg, seed, &world, "train", cfg.num_videos)?;
    let eval = generate_split(cfg, seed, &world, "eval", cfg.num_eval_videos)?;
    Ok(SyntheticCorpus { train, eval })
}

fn split_seed(seed: u64, split: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}/{split}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn generate_split(cfg: &GeneratorConfig, seed: u64, world: &World, split: &str, count: usize) -> Result<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, split));
    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let layout = cfg.token_layout();
    let a = cfg.actions_per_intent;
    let noisy_token = |rng: &mut ChaCha8Rng, start: u32, n: usize, value: usize| -> u32 {
        if rng.random::<Scalar>() < cfg.token_noise {
            start + rng.random_range(0..n) as u32
        } else {
            start + value as u32
        }
    };

    let mut videos = Vec::with_capacity(count);
    for v in 0..count {
        let intent = rng.random_range(0..cfg.num_intents);
        let (set, reverse) = intent_structure(cfg, intent);
        let locals = action_sequence(cfg, reverse, &mut rng);
        let clips = locals
            .iter()
            .enumerate()
            .map(|(i, &local)| {
                let action = set * a + local;
                let frames = (0..cfg.frames_per_clip)
                    .map(|f| {
                        let mut x = world.render_frame(action, f);
                        if cfg.frame_noise > 0.0 {
                            x.iter_mut().for_each(|e| *e += cfg.frame_noise * noise.sample(&mut rng));
                        }
                        x
                    })
                    .collect();
                let verb = noisy_token(&mut rng, layout.verb_start, a, local);
                let object = noisy_token(&mut rng, layout.object_start, cfg.num_actions(), action);
                ClipRecord {
                    clip_index: i,
                    frames: ClipInput::new(frames),
                    narration_tokens: TextInput::new(vec![verb, object]),
                    action_label: action,
                }
            })
            .collect();
        let theme = noisy_token(&mut rng, layout.theme_start, cfg.num_action_sets(), set);
        let goal = noisy_token(&mut rng, layout.goal_start, cfg.num_intents, intent);
        videos.push(VideoRecord {
            video_id: format!("{split}-{v:06}"),
            clips,
            summary_tokens: TextInput::new(vec![theme, goal]),
            latent_intent_id: intent,
            duration_clips: cfg.clips_per_video,
        });
    }
    Ok(Corpus {
        manifest: CorpusManifest {
            schema_version: CORPUS_SCHEMA_VERSION,
            split: split.to_string(),
            video_count: count,
            vocab_size: cfg.vocab_size,
            frame_feature_dim: cfg.frame_feature_dim,
            num_intents: cfg.num_intents,
            num_actions: cfg.num_actions(),
            generator: Some(GeneratorInfo {
                seed,
                config: cfg.clone(),
            }),
        },
        videos,
    })
}

/// Clip-narration pairs from distinct videos.
#[derive(Clone, Debug)]
pub struct RawChildBatch<'a> {
    pub videos: Vec<&'a VideoRecord>,
    pub clips: Vec<&'a ClipRecord>,
    pub positive_mask: PositiveMask,
}

impl RawChildBatch<'_> {
    pub fn clip_inputs(&self) -> Vec<&ClipInput> {
        self.clips.iter().map(|c| &c.frames).collect()
    }

    pub fn narration_inputs(&self) -> Vec<&TextInput> {
        self.clips.iter().map(|c| &c.narration_tokens).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.clips.iter().map(|c| c.action_label).collect()
    }
}

/// One random clip from each of `batch_size` distinct videos. Items sharing
/// an action label are mutual positives.
pub fn build_child_batch<'a, R: Rng>(corpus: &'a Corpus, batch_size: usize, rng: &mut R) -> Result<RawChildBatch<'a>> {
    if batch_size == 0 || corpus.len() < batch_size {
        return Err(Error::contract(format!(
            "child batch of {batch_size} needs that many videos; corpus has {}",
            corpus.len()
        )));
    }
    let videos: Vec<&VideoRecord> = rand::seq::index::sample(rng, corpus.len(), batch_size)
        .into_iter()
        .map(|i| &corpus.videos[i])
        .collect();
    let clips: Vec<&ClipRecord> = videos.iter().map(|v| v.clips.choose(rng).expect("non-empty video")).collect();
    let labels: Vec<usize> = clips.iter().map(|c| c.action_label).collect();
    Ok(RawChildBatch {
        videos,
        clips,
        positive_mask: PositiveMask::from_labels(&labels),
    })
}

/// `K` uniformly spaced clips from each of several distinct videos.
#[derive(Clone, Debug)]
pub struct RawParentBatch<'a> {
    pub videos: Vec<&'a VideoRecord>,
    /// Per video, ascending clip indices.
    pub clip_indices: Vec<Vec<usize>>,
    pub positive_mask: PositiveMask,
}

impl<'a> RawParentBatch<'a> {
    /// Clips of video `i` in sampled order.
    pub fn clips_of(&self, i: usize) -> Vec<&'a ClipRecord> {
        self.clip_indices[i].iter().map(|&c| &self.videos[i].clips[c]).collect()
    }

    pub fn summaries(&self) -> Vec<&'a TextInput> {
        self.videos.iter().map(|v| &v.summary_tokens).collect()
    }
}

pub fn build_parent_batch<'a, R: Rng>(corpus: &'a Corpus, num_videos: usize, k: usize, rng: &mut R) -> Result<RawParentBatch<'a>> {
    if num_videos == 0 || corpus.len() < num_videos {
        return Err(Error::contract(format!(
            "parent batch of {num_videos} videos; corpus has {}",
            corpus.len()
        )));
    }
    let videos: Vec<&VideoRecord> = rand::seq::index::sample(rng, corpus.len(), num_videos)
        .into_iter()
        .map(|i| &corpus.videos[i])
        .collect();
    let clip_indices = videos
        .iter()
        .map(|v| sample_uniform(v.clips.len(), k))
        .collect::<Result<Vec<_>>>()?;
    Ok(RawParentBatch {
        videos,
        clip_indices,
        positive_mask: PositiveMask::diagonal(num_videos),
    })
}

/// Position-aware label-level classifier: the larger of the ascending and
/// descending fractions of adjacent pairs, in within-set local index order.
pub fn order_score(labels: &[usize], actions_per_intent: usize) -> Scalar {
    if labels.len() < 2 {
        return 1.0;
    }
    let local: Vec<usize> = labels.iter().map(|l| l % actions_per_intent).collect();
    let pairs = (local.len() - 1) as Scalar;
    let up = local.windows(2).filter(|w| w[0] <= w[1]).count() as Scalar;
    let down = local.windows(2).filter(|w| w[0] >= w[1]).count() as Scalar;
    up.max(down) / pairs
}

/// Distinct action labels of a corpus.
pub fn action_labels(corpus: &Corpus) -> BTreeSet<usize> {
    corpus.videos.iter().flat_map(|v| v.clips.iter().map(|c| c.action_label)).collect()
}
