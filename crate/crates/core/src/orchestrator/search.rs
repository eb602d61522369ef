use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::evaluators::{EvalRequest, Evaluation, Evaluator};
use crate::controller::{Controller, MetricSense, RewardBreakdown, RewardPipeline};
use crate::costmodel::GateOutcome;
use crate::error::{Error, Result};
use crate::searchspace::{decision_dims, Genome, SpaceKind};
use crate::weightcache::{CommitOutcome, WeightCache};

/// Reward given to cost-rejected samples in [`GateMode::Penalty`].
pub const PENALTY_REWARD: f64 = -1.0;

/// What happens to samples that fail the cost gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// Re-sample without consuming a step or updating the controller.
    #[default]
    Skip,
    /// Consume a step and update the controller with [`PENALTY_REWARD`].
    Penalty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub space: SpaceKind,
    /// Number of evaluated (non-rejected) samples.
    pub steps: usize,
    pub workers: usize,
    pub controller_seed: u64,
    pub sample_seed: u64,
    pub eval_seed: u64,
    #[serde(default)]
    pub gate_mode: GateMode,
    /// Upper bound on consecutive cost rejections before giving up.
    pub max_consecutive_rejections: usize,
    /// Write a checkpoint after this many completed steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Sample from the initial policy without ever updating it.
    #[serde(default)]
    pub freeze_controller: bool,
}

impl SearchConfig {
    pub fn new(space: SpaceKind, steps: usize, seed: u64) -> Self {
        SearchConfig {
            space,
            steps,
            workers: 1,
            controller_seed: seed,
            sample_seed: seed.wrapping_add(1),
            eval_seed: seed.wrapping_add(2),
            gate_mode: GateMode::Skip,
            max_consecutive_rejections: 100_000,
            checkpoint_every: 0,
            freeze_controller: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("search steps must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        Ok(())
    }
}

/// RNG for the `index`-th controller sample of a search.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Seed handed to the evaluator for the `index`-th sample.
pub fn eval_seed(seed: u64, index: u64) -> u64 {
    seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub node: usize,
    pub op: String,
    pub metric: f64,
    pub outcome: CommitOutcome,
}

/// One line of the search log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchLogRecord {
    pub space: SpaceKind,
    /// Evaluated samples are numbered densely from 1 in completion order;
    /// a rejected sample carries the step it was drawn for.
    pub step: usize,
    pub sample_index: u64,
    pub genome: Vec<usize>,
    pub gate: GateOutcome,
    pub metric: Option<f64>,
    pub failure: Option<String>,
    pub normalized: Option<f64>,
    pub advantage: Option<f64>,
    pub reward: Option<f64>,
    pub entropy: f64,
    pub log_prob: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub commits: Vec<CommitRecord>,
    pub wall_time_s: f64,
    pub worker: usize,
}

impl SearchLogRecord {
    /// Whether the record consumed a step.
    pub fn is_step(&self) -> bool {
        self.gate.passed() || self.reward.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub step: usize,
    pub genome: Genome,
    pub metric: f64,
}

/// Resumable search state, written as `controller.ckpt`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchCheckpoint {
    pub version: u32,
    pub config: SearchConfig,
    pub controller: Controller,
    pub pipeline: RewardPipeline,
    pub completed: usize,
    pub next_sample: u64,
    pub log_records: usize,
    pub best: Option<BestRecord>,
    pub finished: bool,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl SearchCheckpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

/// Where a search persists its state. All fields are optional.
#[derive(Clone, Copy, Default)]
pub struct SearchIo<'a> {
    pub log: Option<&'a Path>,
    pub checkpoint: Option<&'a Path>,
    /// The live cache and the directory it is saved to at checkpoints.
    pub cache: Option<(&'a WeightCache, &'a Path)>,
    pub stop: Option<&'a AtomicBool>,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub best: Option<BestRecord>,
    pub records: Vec<SearchLogRecord>,
    pub controller: Controller,
    pub interrupted: bool,
}

pub fn read_log(path: &Path) -> Result<Vec<SearchLogRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e))
        })
        .collect()
}

fn write_log(path: &Path, records: &[SearchLogRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct State {
    controller: Controller,
    pipeline: RewardPipeline,
    completed: usize,
    dispatched: usize,
    next_sample: u64,
    best: Option<BestRecord>,
    records: Vec<SearchLogRecord>,
    log: Option<File>,
    rejections: usize,
    failed: Option<Error>,
    finished: bool,
}

fn write_checkpoint(cfg: &SearchConfig, io: &SearchIo<'_>, st: &State) -> Result<()> {
    if let Some((cache, dir)) = io.cache {
        cache.save(dir)?;
    }
    if let Some(path) = io.checkpoint {
        SearchCheckpoint {
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            controller: st.controller.clone(),
            pipeline: st.pipeline.clone(),
            completed: st.completed,
            next_sample: st.next_sample,
            log_records: st.records.len(),
            best: st.best.clone(),
            finished: st.finished,
        }
        .save(path)?;
    }
    Ok(())
}

/// A sample that passed the gate and awaits evaluation.
struct Claim {
    index: u64,
    genome: Genome,
    entropy: f64,
    log_prob: f64,
}

struct Shared<'a> {
    cfg: &'a SearchConfig,
    io: SearchIo<'a>,
    start: Instant,
    state: Mutex<State>,
}

impl Shared<'_> {
    fn append(&self, st: &mut State, rec: SearchLogRecord) -> Result<()> {
        if let (Some(f), Some(path)) = (st.log.as_mut(), self.io.log) {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::io(path, e))?;
        }
        st.records.push(rec);
        Ok(())
    }

    fn checkpoint(&self, st: &State) -> Result<()> {
        write_checkpoint(self.cfg, &self.io, st)
    }

    fn stopping(&self) -> bool {
        self.io.stop.is_some_and(|s| s.load(Ordering::SeqCst))
    }

    fn update_controller(&self, st: &mut State, genome: &[usize], reward: f64) -> Result<()> {
        if !self.cfg.freeze_controller {
            st.controller.reinforce_update(genome, reward)?;
        }
        Ok(())
    }

    /// Draws samples until one passes the gate. Returns `None` when the
    /// search is done or stopping.
    fn claim(&self, evaluator: &dyn Evaluator, worker: usize) -> Result<Option<Claim>> {
        let mut st = self.state.lock().expect("search state poisoned");
        loop {
            if st.failed.is_some() || st.dispatched >= self.cfg.steps || self.stopping() {
                return Ok(None);
            }
            let index = st.next_sample;
            st.next_sample += 1;
            let sample = st.controller.sample(&mut sample_rng(self.cfg.sample_seed, index));
            let genome = Genome::new(self.cfg.space, sample.decisions.clone())?;
            let gate = evaluator.gate(&genome)?;
            if gate.passed() {
                st.dispatched += 1;
                st.rejections = 0;
                return Ok(Some(Claim { index, genome, entropy: sample.entropy, log_prob: sample.log_prob }));
            }
            let penalty = self.cfg.gate_mode == GateMode::Penalty;
            let step = st.completed + 1;
            let rec = SearchLogRecord {
                space: self.cfg.space,
                step,
                sample_index: index,
                genome: sample.decisions.clone(),
                gate,
                metric: None,
                failure: None,
                normalized: None,
                advantage: None,
                reward: penalty.then_some(PENALTY_REWARD),
                entropy: sample.entropy,
                log_prob: sample.log_prob,
                commits: Vec::new(),
                wall_time_s: self.start.elapsed().as_secs_f64(),
                worker,
            };
            self.append(&mut st, rec)?;
            if penalty {
                self.update_controller(&mut st, &sample.decisions, PENALTY_REWARD)?;
                st.dispatched += 1;
                st.completed += 1;
                self.maybe_checkpoint(&mut st)?;
            } else {
                st.rejections += 1;
                if st.rejections >= self.cfg.max_consecutive_rejections {
                    return Err(Error::Config(format!(
                        "{} consecutive samples exceeded the cost limit",
                        st.rejections
                    )));
                }
            }
        }
    }

    fn maybe_checkpoint(&self, st: &mut State) -> Result<()> {
        if st.completed >= self.cfg.steps {
            st.finished = true;
            return self.checkpoint(st);
        }
        if self.cfg.checkpoint_every > 0 && st.completed % self.cfg.checkpoint_every == 0 {
            self.checkpoint(st)?;
        }
        Ok(())
    }

    fn complete(
        &self,
        evaluator: &dyn Evaluator,
        worker: usize,
        claim: Claim,
        result: Result<Evaluation>,
    ) -> Result<()> {
        let Claim { index, genome, entropy, log_prob } = claim;
        let mut st = self.state.lock().expect("search state poisoned");
        let step = st.completed + 1;
        let (metric, failure, commits, breakdown): (Option<f64>, Option<String>, Vec<CommitRecord>, RewardBreakdown) =
            match result.and_then(|ev| st.pipeline.compute_reward(ev.metric, entropy).map(|b| (ev, b))) {
                Ok((ev, b)) => (Some(ev.metric), None, ev.commits, b),
                Err(e) => {
                    log::warn!("{} step {step}: evaluation failed: {e}", self.cfg.space.as_str());
                    (None, Some(e.to_string()), Vec::new(), st.pipeline.failure_reward(entropy))
                }
            };
        self.update_controller(&mut st, &genome.decisions, breakdown.reward)?;
        if let Some(m) = metric {
            let better = match &st.best {
                None => true,
                Some(b) => match evaluator.sense() {
                    MetricSense::Maximize => m > b.metric,
                    MetricSense::Minimize => m < b.metric,
                },
            };
            if better {
                st.best = Some(BestRecord { step, genome: genome.clone(), metric: m });
            }
        }
        let rec = SearchLogRecord {
            space: self.cfg.space,
            step,
            sample_index: index,
            genome: genome.decisions,
            gate: GateOutcome::Pass,
            metric,
            failure,
            normalized: Some(breakdown.normalized),
            advantage: Some(breakdown.advantage),
            reward: Some(breakdown.reward),
            entropy,
            log_prob,
            commits,
            wall_time_s: self.start.elapsed().as_secs_f64(),
            worker,
        };
        self.append(&mut st, rec)?;
        st.completed += 1;
        log::info!(
            "{} step {}/{}: metric {:?}, reward {:.4}",
            self.cfg.space.as_str(),
            step,
            self.cfg.steps,
            metric,
            breakdown.reward
        );
        self.maybe_checkpoint(&mut st)
    }

    fn worker(&self, evaluator: &dyn Evaluator, worker: usize) {
        let run = || -> Result<()> {
            while let Some(claim) = self.claim(evaluator, worker)? {
                let req = EvalRequest {
                    genome: &claim.genome,
                    sample_index: claim.index,
                    seed: eval_seed(self.cfg.eval_seed, claim.index),
                    worker,
                };
                let result = panic::catch_unwind(AssertUnwindSafe(|| evaluator.evaluate(&req)))
                    .unwrap_or_else(|_| Err(Error::State("evaluator panicked".into())));
                self.complete(evaluator, worker, claim, result)?;
            }
            Ok(())
        };
        if let Err(e) = run() {
            let mut st = self.state.lock().expect("search state poisoned");
            st.failed.get_or_insert(e);
        }
    }
}

fn resume_state(cfg: &SearchConfig, io: &SearchIo<'_>, dims: &[usize], sense: MetricSense) -> Result<State> {
    let fresh = || State {
        controller: Controller::new(dims, cfg.controller_seed),
        pipeline: RewardPipeline::new(sense),
        completed: 0,
        dispatched: 0,
        next_sample: 0,
        best: None,
        records: Vec::new(),
        log: None,
        rejections: 0,
        failed: None,
        finished: false,
    };
    let Some(path) = io.checkpoint.filter(|p| p.exists()) else {
        return Ok(fresh());
    };
    let ck = SearchCheckpoint::load(path)?;
    if ck.config.space != cfg.space || ck.config.controller_seed != cfg.controller_seed || ck.config.sample_seed != cfg.sample_seed {
        return Err(Error::Config(format!(
            "checkpoint {} belongs to a different search",
            path.display()
        )));
    }
    let mut records = match io.log.filter(|p| p.exists()) {
        Some(log) => read_log(log)?,
        None => Vec::new(),
    };
    if records.len() < ck.log_records {
        return Err(Error::Config(format!(
            "search log has {} records but the checkpoint expects {}",
            records.len(),
            ck.log_records
        )));
    }
    records.truncate(ck.log_records);
    if let Some(log) = io.log {
        write_log(log, &records)?;
    }
    Ok(State {
        controller: ck.controller,
        pipeline: ck.pipeline,
        completed: ck.completed,
        dispatched: ck.completed,
        next_sample: ck.next_sample,
        best: ck.best,
        records,
        finished: ck.finished && ck.completed >= cfg.steps,
        ..fresh()
    })
}

/// Runs the REINFORCE search loop with `cfg.workers` concurrent
/// evaluations. Resumes from `io.checkpoint` when it exists.
pub fn search(cfg: &SearchConfig, evaluator: &dyn Evaluator, io: SearchIo<'_>) -> Result<SearchOutcome> {
    cfg.validate()?;
    if evaluator.space() != cfg.space {
        return Err(Error::Config(format!(
            "evaluator scores {} genomes but the search is over {}",
            evaluator.space().as_str(),
            cfg.space.as_str()
        )));
    }
    let dims = decision_dims(cfg.space);
    let mut state = resume_state(cfg, &io, &dims, evaluator.sense())?;
    if let Some(path) = io.log {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        state.log = Some(f);
    }
    let already_done = state.finished;
    let shared = Shared {
        cfg,
        io,
        start: Instant::now(),
        state: Mutex::new(state),
    };
    if !already_done {
        std::thread::scope(|s| {
            for w in 0..cfg.workers {
                let shared = &shared;
                s.spawn(move || shared.worker(evaluator, w));
            }
        });
    }
    let mut st = shared.state.into_inner().expect("search state poisoned");
    if let Some(e) = st.failed.take() {
        return Err(e);
    }
    let interrupted = st.completed < cfg.steps;
    if interrupted {
        write_checkpoint(cfg, &io, &st)?;
    }
    Ok(SearchOutcome {
        best: st.best,
        records: st.records,
        controller: st.controller,
        interrupted,
    })
}
