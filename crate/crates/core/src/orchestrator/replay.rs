//! Serial replay of a search log through a fresh controller and reward
//! pipeline.

use std::path::Path;

use serde::Serialize;

use super::pipeline::RunDir;
use super::search::{read_log, sample_rng, GateMode, SearchCheckpoint, SearchConfig, SearchLogRecord, PENALTY_REWARD};
use crate::controller::{Controller, MetricSense, RewardBreakdown, RewardPipeline};
use crate::error::{Error, Result};
use crate::searchspace::{decision_dims, SpaceKind};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplayReport {
    pub space: SpaceKind,
    pub records: usize,
    pub steps: usize,
    /// Whether genomes, entropies and the final controller were re-derived
    /// too (single-worker logs only).
    pub full: bool,
}

fn mismatch(step: usize, detail: impl Into<String>) -> Error {
    Error::ReplayMismatch { step, detail: detail.into() }
}

fn check(step: usize, what: &str, logged: Option<f64>, expected: Option<f64>) -> Result<()> {
    let same = match (logged, expected) {
        (Some(a), Some(b)) => a.to_bits() == b.to_bits(),
        (None, None) => true,
        _ => false,
    };
    if same {
        Ok(())
    } else {
        Err(mismatch(step, format!("{what}: logged {logged:?}, replayed {expected:?}")))
    }
}

/// Re-derives every logged reward from the logged metrics. With one
/// worker the controller is replayed as well: each genome, its entropy and
/// log-probability are re-sampled and compared bit for bit, and the final
/// policy must equal `final_controller` when given.
pub fn replay_records(
    cfg: &SearchConfig,
    sense: MetricSense,
    records: &[SearchLogRecord],
    final_controller: Option<&Controller>,
) -> Result<ReplayReport> {
    let full = cfg.workers == 1;
    let mut pipeline = RewardPipeline::new(sense);
    let mut controller = Controller::new(&decision_dims(cfg.space), cfg.controller_seed);
    let mut steps = 0;
    for rec in records {
        let step = rec.step;
        if rec.space != cfg.space {
            return Err(mismatch(step, "record from a different search space"));
        }
        if full {
            let s = controller.sample(&mut sample_rng(cfg.sample_seed, rec.sample_index));
            if s.decisions != rec.genome {
                return Err(mismatch(step, format!("genome {:?} but the policy samples {:?}", rec.genome, s.decisions)));
            }
            check(step, "entropy", Some(rec.entropy), Some(s.entropy))?;
            check(step, "log_prob", Some(rec.log_prob), Some(s.log_prob))?;
        }
        let reward = if !rec.gate.passed() {
            let expected = (cfg.gate_mode == GateMode::Penalty).then_some(PENALTY_REWARD);
            check(step, "reward", rec.reward, expected)?;
            if rec.metric.is_some() || !rec.commits.is_empty() {
                return Err(mismatch(step, "gate-rejected sample was evaluated"));
            }
            expected
        } else {
            let b: RewardBreakdown = match rec.metric {
                Some(m) => pipeline.compute_reward(m, rec.entropy).map_err(|e| mismatch(step, e.to_string()))?,
                None => pipeline.failure_reward(rec.entropy),
            };
            check(step, "normalized", rec.normalized, Some(b.normalized))?;
            check(step, "advantage", rec.advantage, Some(b.advantage))?;
            check(step, "reward", rec.reward, Some(b.reward))?;
            Some(b.reward)
        };
        if let Some(r) = reward {
            steps += 1;
            if full && !cfg.freeze_controller {
                controller.reinforce_update(&rec.genome, r)?;
            }
        }
    }
    if let (true, Some(c)) = (full, final_controller) {
        if c.params().iter().zip(controller.params()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(mismatch(steps, "final controller differs from the replayed policy"));
        }
    }
    Ok(ReplayReport { space: cfg.space, records: records.len(), steps, full })
}

/// Replays a log against the configuration stored in its checkpoint. The
/// final policy is compared only when the checkpoint covers the whole log.
pub fn replay_log(log: &Path, checkpoint: &Path) -> Result<ReplayReport> {
    let ck = SearchCheckpoint::load(checkpoint)?;
    let records = read_log(log)?;
    if records.len() < ck.log_records {
        return Err(Error::State(format!(
            "{} has {} records but the checkpoint covers {}",
            log.display(),
            records.len(),
            ck.log_records
        )));
    }
    let controller = (records.len() == ck.log_records).then_some(&ck.controller);
    replay_records(&ck.config, ck.pipeline.sense, &records, controller)
}

/// Replays every search log present in a run directory.
pub fn replay_run(run: &RunDir) -> Result<Vec<ReplayReport>> {
    let mut out = Vec::new();
    for space in [SpaceKind::Generator, SpaceKind::Discriminator] {
        let (log, ckpt) = (run.search_log(space), run.checkpoint(space));
        if ckpt.exists() {
            out.push(replay_log(&log, &ckpt)?);
        }
    }
    if out.is_empty() {
        return Err(Error::State(format!("no search checkpoints in {}", run.root.display())));
    }
    Ok(out)
}
