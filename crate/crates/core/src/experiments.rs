//! The full comparison: train every mode on one corpus and evaluate each.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregatorKind;
use crate::corpus::Corpus;
use crate::error::Result;
use crate::evalsuite::{evaluate, EvalOptions, EvalSummary};
use crate::trainer::{run_schedule, Checkpoint, Mode, StepMetrics, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproduceRow {
    pub mode: Mode,
    pub aggregator: AggregatorKind,
    pub child_mcq_inter: f64,
    pub child_mcq_intra: f64,
    pub summary_mcq: f64,
    pub shuffle_mcq: f64,
    pub shuffle_ties: usize,
    pub items: usize,
    pub steps: usize,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproduceTable {
    pub rows: Vec<ReproduceRow>,
    pub chance: f64,
}

impl ReproduceTable {
    pub fn row(&self, mode: Mode) -> Option<&ReproduceRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    /// Fixed-width text table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:<15} {:>11} {:>11} {:>11} {:>11} {:>6}",
            "mode", "aggregator", "child-inter", "child-intra", "summary", "shuffle", "ties"
        );
        for r in &self.rows {
            let agg = match r.aggregator {
                AggregatorKind::Average => "average",
                AggregatorKind::SelfAttention => "self-attention",
            };
            let _ = writeln!(
                s,
                "{:<14} {:<15} {:>11.1} {:>11.1} {:>11.1} {:>11.1} {:>6}",
                r.mode.name(),
                agg,
                r.child_mcq_inter,
                r.child_mcq_intra,
                r.summary_mcq,
                r.shuffle_mcq,
                r.shuffle_ties
            );
        }
        let _ = writeln!(s, "chance = {:.1}", self.chance);
        s
    }
}

/// Everything one mode produced.
#[derive(Clone, Debug)]
pub struct ModeRun {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
    pub eval: EvalSummary,
}

/// Train and evaluate `modes` (in the given order) with `base` as the shared
/// config. `WoJoint` starts from the child-only weights, which are trained
/// first if child-only is not itself requested before it. An error from
/// `progress` stops the run.
pub fn reproduce(
    base: &TrainConfig,
    train: &Corpus,
    eval: &Corpus,
    opts: &EvalOptions,
    modes: &[Mode],
    mut progress: impl FnMut(Mode, &ModeRun) -> Result<()>,
) -> Result<(ReproduceTable, BTreeMap<Mode, ModeRun>)> {
    let mut runs: BTreeMap<Mode, ModeRun> = BTreeMap::new();
    let mut child_only_params = None;
    let mut rows = Vec::new();
    for &mode in modes {
        let cfg = TrainConfig { mode, ..base.clone() };
        let pretrained = if mode == Mode::WoJoint {
            if child_only_params.is_none() {
                let (ck, _) = run_schedule(&TrainConfig { mode: Mode::ChildOnly, ..base.clone() }, train, None)?;
                child_only_params = Some(ck.params);
            }
            child_only_params.as_ref()
        } else {
            None
        };
        let (checkpoint, metrics) = run_schedule(&cfg, train, pretrained)?;
        if mode == Mode::ChildOnly {
            child_only_params = Some(checkpoint.params.clone());
        }
        let model = checkpoint.model()?;
        let summary = evaluate(&model, mode.aggregator_kind(), eval, None, &EvalOptions { extended: false, ..opts.clone() })?;
        rows.push(ReproduceRow {
            mode,
            aggregator: mode.aggregator_kind(),
            child_mcq_inter: summary.child_mcq_inter.accuracy,
            child_mcq_intra: summary.child_mcq_intra.accuracy,
            summary_mcq: summary.summary_mcq.accuracy,
            shuffle_mcq: summary.shuffle_mcq.accuracy,
            shuffle_ties: summary.shuffle_mcq.ties,
            items: summary.summary_mcq.items,
            steps: metrics.len(),
            final_loss: metrics.last().map_or(f64::NAN, |m| m.loss),
        });
        let run = ModeRun {
            checkpoint,
            metrics,
            eval: summary,
        };
        progress(mode, &run)?;
        runs.insert(mode, run);
    }
    Ok((
        ReproduceTable {
            rows,
            chance: crate::evalsuite::CHANCE,
        },
        runs,
    ))
}
