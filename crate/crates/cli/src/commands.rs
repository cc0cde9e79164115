use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use strata_core::corpus::{generate_synthetic, Corpus, CorpusManifest};
use strata_core::evalsuite::{evaluate, export_embeddings, write_export, EvalSummary, ExportLevel};
use strata_core::experiments::reproduce as run_all;
use strata_core::gradients::{all_passed, check_everything};
use strata_core::trainer::{write_metrics_line, Checkpoint, Mode, Trainer, TrainConfig};
use strata_core::Error;

use crate::config::RunConfig;
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum Level {
    Child,
    Parent,
}

/// Where a run's inputs came from; written next to the effective config.
#[derive(Serialize)]
struct RunInfo {
    command: &'static str,
    version: &'static str,
    corpora: Vec<CorpusRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    init: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_config_hash: Option<String>,
}

#[derive(Serialize)]
struct CorpusRef {
    path: PathBuf,
    split: String,
    video_count: usize,
    manifest_hash: String,
}

impl CorpusRef {
    fn new(path: &Path, m: &CorpusManifest) -> CorpusRef {
        CorpusRef {
            path: path.to_path_buf(),
            split: m.split.clone(),
            video_count: m.video_count,
            manifest_hash: m.content_hash(),
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| Error::Path {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::from)?;
    s.push('\n');
    write_text(path, &s)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| Error::Path {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn open_write(path: &Path, append: bool) -> Result<BufWriter<File>, CliError> {
    let f = File::options()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::Path {
            path: path.to_path_buf(),
            source: e,
        })?;
    Ok(BufWriter::new(f))
}

fn write_run_info(dir: &Path, cfg: &RunConfig, info: &RunInfo) -> Result<(), CliError> {
    cfg.write_to(dir)?;
    write_json(&dir.join(RUN_FILE), info)
}

/// The encoders are sized from the config; refuse a corpus they cannot read.
fn check_corpus_fits(train: &TrainConfig, vocab_size: usize, frame_feature_dim: usize) -> Result<(), CliError> {
    let enc = &train.encoder;
    if vocab_size > enc.vocab_size || frame_feature_dim != enc.frame_feature_dim {
        return Err(CliError::Config(format!(
            "corpus has vocab {vocab_size} and frame dim {frame_feature_dim}, but the encoder is configured for vocab {} and frame dim {}",
            enc.vocab_size, enc.frame_feature_dim
        )));
    }
    Ok(())
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let corpus = generate_synthetic(&cfg.corpus, cfg.seed)?;
    let (train_dir, eval_dir) = (out.join("train"), out.join("eval"));
    create_dir(out)?;
    corpus.train.save(&train_dir)?;
    corpus.eval.save(&eval_dir)?;
    let info = RunInfo {
        command: "generate",
        version: env!("CARGO_PKG_VERSION"),
        corpora: vec![
            CorpusRef::new(&train_dir, &corpus.train.manifest),
            CorpusRef::new(&eval_dir, &corpus.eval.manifest),
        ],
        init: None,
        train_config_hash: None,
    };
    write_run_info(out, cfg, &info)?;
    for c in &info.corpora {
        println!("{:<5} {:>5} videos  {}  {}", c.split, c.video_count, c.manifest_hash, c.path.display());
    }
    Ok(())
}

/// Keep only the metrics lines for steps a resumed checkpoint has completed.
fn truncate_metrics(path: &Path, completed: usize) -> Result<(), CliError> {
    if !path.exists() {
        return Ok(());
    }
    let f = File::open(path).map_err(|e| Error::Path {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut kept = String::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let m: strata_core::trainer::StepMetrics = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if m.step < completed {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    write_text(path, &kept)
}

pub fn train(
    cfg: &RunConfig,
    corpus_dir: &Path,
    out: &Path,
    init: Option<&Path>,
    resume: bool,
    checkpoint_every: usize,
) -> Result<(), CliError> {
    if cfg.train.mode == Mode::WoJoint && init.is_none() && !resume {
        return Err(CliError::Usage("wo-joint starts from child-only weights: pass --init <child-only checkpoint>".into()));
    }
    let corpus = Corpus::load(corpus_dir)?;
    check_corpus_fits(&cfg.train, corpus.manifest.vocab_size, corpus.manifest.frame_feature_dim)?;
    let ck_dir = out.join("checkpoints");
    create_dir(&ck_dir)?;
    let final_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);

    let tc = cfg.train.clone();
    let mut trainer = if resume {
        let ck = Checkpoint::load(&final_path)?;
        truncate_metrics(&metrics_path, ck.step)?;
        Trainer::resume(tc, &corpus, ck)?
    } else if let Some(p) = init {
        let ck = Checkpoint::load(p)?;
        Trainer::from_pretrained(tc, &corpus, &ck.params)?
    } else {
        Trainer::new(tc, &corpus)?
    };
    write_run_info(
        out,
        cfg,
        &RunInfo {
            command: "train",
            version: env!("CARGO_PKG_VERSION"),
            corpora: vec![CorpusRef::new(corpus_dir, &corpus.manifest)],
            init: init.map(Path::to_path_buf),
            train_config_hash: Some(cfg.train.hash()),
        },
    )?;

    let mut log = open_write(&metrics_path, resume)?;
    let total = cfg.train.total_steps;
    let mut last_loss = f64::NAN;
    trainer.run(|m, t| {
        write_metrics_line(&mut log, m)?;
        last_loss = m.loss;
        let done = t.step();
        if checkpoint_every > 0 && done % checkpoint_every == 0 && done < total {
            log.flush()?;
            let ck = t.checkpoint();
            ck.save(&ck_dir.join(format!("step-{done:06}.json")))?;
            // latest state, so an interrupted run can `--resume`
            ck.save(&final_path)?;
        }
        if done % 50 == 0 || done == total {
            eprintln!("step {done:>6}/{total}  {:<6} loss {:.4}", m.level.name(), m.loss);
        }
        Ok(())
    })?;
    log.flush()?;
    trainer.checkpoint().save(&final_path)?;
    println!(
        "trained {} for {} steps (final loss {last_loss:.4}); checkpoint {}",
        cfg.train.mode.name(),
        trainer.step(),
        final_path.display()
    );
    Ok(())
}

fn eval_table(s: &EvalSummary) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "{:<16} {:>9} {:>9} {:>6} {:>6} {:>7}", "task", "accuracy", "expected", "ties", "items", "chance");
    for r in [&s.child_mcq_inter, &s.child_mcq_intra, &s.summary_mcq, &s.shuffle_mcq] {
        let _ = writeln!(
            t,
            "{:<16} {:>9.1} {:>9.1} {:>6} {:>6} {:>7.1}",
            r.task, r.accuracy, r.expected_accuracy, r.ties, r.items, r.chance
        );
    }
    if let Some(p) = &s.linear_probe {
        let _ = writeln!(
            t,
            "linear probe     {:>9.1} (train {:.1}, {} classes, chance {:.1})",
            p.accuracy, p.train_accuracy, p.num_classes, p.chance
        );
    }
    if let Some(r) = &s.retrieval {
        let _ = writeln!(
            t,
            "retrieval        mAP {:.4} (clip->text {:.4}, text->clip {:.4})  nDCG {:.4} ({:.4}, {:.4})",
            r.map, r.map_q2g, r.map_g2q, r.ndcg, r.ndcg_q2g, r.ndcg_g2q
        );
    }
    t
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, corpus_dir: &Path, train_dir: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let eval_corpus = Corpus::load(corpus_dir)?;
    check_corpus_fits(&ck.config, eval_corpus.manifest.vocab_size, eval_corpus.manifest.frame_feature_dim)?;
    let train_corpus = train_dir.map(Corpus::load).transpose()?;
    let mut corpora = vec![CorpusRef::new(corpus_dir, &eval_corpus.manifest)];
    if let (Some(d), Some(c)) = (train_dir, &train_corpus) {
        corpora.push(CorpusRef::new(d, &c.manifest));
    }
    let model = ck.model()?;
    let kind = ck.config.mode.aggregator_kind();
    let summary = evaluate(&model, kind, &eval_corpus, train_corpus.as_ref(), &cfg.eval)?;
    create_dir(out)?;
    write_run_info(
        out,
        cfg,
        &RunInfo {
            command: "eval",
            version: env!("CARGO_PKG_VERSION"),
            corpora,
            init: Some(checkpoint.to_path_buf()),
            train_config_hash: Some(ck.config_hash.clone()),
        },
    )?;
    let table = eval_table(&summary);
    write_json(&out.join("eval.json"), &summary)?;
    write_text(&out.join("eval.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn gradcheck(seeds: u64, out: Option<&Path>) -> Result<(), CliError> {
    let start = Instant::now();
    let reports = check_everything(seeds)?;
    let mut t = String::new();
    let _ = writeln!(t, "{:<50} {:>8} {:>12}  status", "check", "entries", "max rel err");
    for r in &reports {
        let status = if r.passed { "ok" } else { "FAIL" };
        let _ = writeln!(t, "{:<50} {:>8} {:>12.3e}  {status}", r.name, r.entries, r.max_rel_err);
    }
    let _ = writeln!(t, "{} checks in {:.1}s", reports.len(), start.elapsed().as_secs_f64());
    print!("{t}");
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("gradcheck.json"), &reports)?;
        write_text(&dir.join("gradcheck.txt"), &t)?;
    }
    if all_passed(&reports) {
        Ok(())
    } else {
        let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        Err(CliError::GradCheck {
            failed: failed.len(),
            total: reports.len(),
            names: failed.join(", "),
        })
    }
}

pub fn export(checkpoint: &Path, corpus_dir: &Path, level: Level, out: &Path) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let corpus = Corpus::load(corpus_dir)?;
    check_corpus_fits(&ck.config, corpus.manifest.vocab_size, corpus.manifest.frame_feature_dim)?;
    let model = ck.model()?;
    let level = match level {
        Level::Child => ExportLevel::Child,
        Level::Parent => ExportLevel::Parent,
    };
    let rows = export_embeddings(&model, &corpus, level, ck.config.k, ck.config.mode.aggregator_kind())?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut w = open_write(out, false)?;
    write_export(&mut w, &rows)?;
    w.flush()?;
    println!("wrote {} embeddings to {}", rows.len(), out.display());
    Ok(())
}

pub fn reproduce(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    check_corpus_fits(&cfg.train, cfg.corpus.vocab_size, cfg.corpus.frame_feature_dim)?;
    let corpus = generate_synthetic(&cfg.corpus, cfg.seed)?;
    let (train_dir, eval_dir) = (out.join("corpus").join("train"), out.join("corpus").join("eval"));
    create_dir(out)?;
    corpus.train.save(&train_dir)?;
    corpus.eval.save(&eval_dir)?;
    write_run_info(
        out,
        cfg,
        &RunInfo {
            command: "reproduce",
            version: env!("CARGO_PKG_VERSION"),
            corpora: vec![
                CorpusRef::new(&train_dir, &corpus.train.manifest),
                CorpusRef::new(&eval_dir, &corpus.eval.manifest),
            ],
            init: None,
            train_config_hash: Some(cfg.train.hash()),
        },
    )?;

    let budget = cfg.reproduce.budget_minutes;
    let mut finished: Vec<&'static str> = Vec::new();
    let mut over: Option<f64> = None;
    let result = run_all(&cfg.train, &corpus.train, &corpus.eval, &cfg.eval, &cfg.reproduce.modes, |mode, run| {
        let dir = out.join("runs").join(mode.name());
        fs::create_dir_all(&dir).map_err(|e| Error::Path {
            path: dir.clone(),
            source: e,
        })?;
        let mut log = Vec::new();
        for m in &run.metrics {
            write_metrics_line(&mut log, m)?;
        }
        fs::write(dir.join(METRICS_FILE), log)?;
        run.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
        fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&run.eval)? + "\n")?;
        fs::write(dir.join("eval.txt"), eval_table(&run.eval))?;
        finished.push(mode.name());
        let minutes = start.elapsed().as_secs_f64() / 60.0;
        eprintln!(
            "{:<13} summary {:>5.1}  shuffle {:>5.1}  ({minutes:.1} min elapsed)",
            mode.name(),
            run.eval.summary_mcq.accuracy,
            run.eval.shuffle_mcq.accuracy
        );
        if minutes > budget {
            over = Some(minutes);
            return Err(Error::Config(format!("budget of {budget} min exceeded")));
        }
        Ok(())
    });
    let (table, _) = match (result, over) {
        (_, Some(elapsed_minutes)) => {
            return Err(CliError::Budget {
                budget_minutes: budget,
                elapsed_minutes,
                finished: finished.join(","),
            })
        }
        (r, None) => r?,
    };
    let text = table.to_text();
    write_text(&out.join("table.txt"), &text)?;
    write_json(&out.join("table.json"), &table)?;
    print!("{text}");
    Ok(())
}
