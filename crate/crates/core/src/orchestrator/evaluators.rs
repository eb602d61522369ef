//! Genome evaluators: the real proxy-training evaluators and cheap
//! deterministic surrogates for smoke runs and tests.

use sha2::{Digest, Sha256};

use super::search::CommitRecord;
use crate::controller::MetricSense;
use crate::costmodel::{gate, generator_cost, CostLimit, GateOutcome};
use crate::data::Dataset;
use crate::error::Result;
use crate::modelbuilder::{build_discriminator, build_frozen_extractor, build_generator, GeneratorInit, GeneratorNet};
use crate::searchspace::{decode_discriminator, decode_generator, Genome, OpKind, SpaceKind};
use crate::tensorkit::WeightSnapshot;
use crate::trainer::{train_distortion, train_gan, DistortionConfig, GanConfig};
use crate::weightcache::WeightCache;

/// One evaluation request handed to a worker.
#[derive(Clone, Copy, Debug)]
pub struct EvalRequest<'a> {
    pub genome: &'a Genome,
    pub sample_index: u64,
    /// Seed for everything random inside the evaluation.
    pub seed: u64,
    pub worker: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metric: f64,
    pub commits: Vec<CommitRecord>,
}

impl Evaluation {
    pub fn metric(metric: f64) -> Self {
        Evaluation { metric, commits: Vec::new() }
    }
}

/// Scores genomes of one search space. Errors become failure records.
pub trait Evaluator: Sync {
    fn space(&self) -> SpaceKind;

    fn sense(&self) -> MetricSense;

    /// Cost gate applied before evaluation; passes by default.
    fn gate(&self, _genome: &Genome) -> Result<GateOutcome> {
        Ok(GateOutcome::Pass)
    }

    fn evaluate(&self, req: &EvalRequest<'_>) -> Result<Evaluation>;
}

/// Generator cost gate at the limit's reference resolution.
pub fn generator_gate(genome: &Genome, n: usize, scale: usize, limit: Option<&CostLimit>) -> Result<GateOutcome> {
    match limit {
        None => Ok(GateOutcome::Pass),
        Some(limit) => {
            let cell = decode_generator(genome)?;
            let report = generator_cost(&cell, n, scale, limit.resolution)?;
            Ok(gate(&report, limit))
        }
    }
}

/// Commits every node of a trained generator under its whole-model metric.
pub fn commit_nodes(net: &GeneratorNet, cache: &WeightCache, metric: f64, step: u64) -> Result<Vec<CommitRecord>> {
    let mut out = Vec::with_capacity(net.cell.len());
    for (i, node) in net.cell.nodes.iter().enumerate() {
        let outcome = cache.commit(i + 1, node.op, net.node_snapshot(i + 1), metric, step)?;
        out.push(CommitRecord { node: i + 1, op: node.op.slug(), metric, outcome });
    }
    Ok(out)
}

/// Uniform value in `[0, 1)` derived from a genome's hash.
fn genome_jitter(genome: &Genome, salt: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update(genome.to_json().as_bytes());
    let d = h.finalize();
    let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (x >> 11) as f64 / (1u64 << 53) as f64
}

/// Fixed per-operation quality scores used by the surrogates.
fn op_quality(op: OpKind) -> f64 {
    match op {
        OpKind::Conv { k } => 0.20 + 0.02 * k as f64,
        OpKind::GroupConv { k } => 0.14 + 0.02 * k as f64,
        OpKind::DSep { k } => 0.16 + 0.015 * k as f64,
        OpKind::InvBlock { k } => 0.22 + 0.02 * k as f64,
        OpKind::SeBlock => 0.12,
        OpKind::CaBlock => 0.15,
        OpKind::Identity => 0.0,
    }
}

/// Deterministic stand-in for proxy distortion training. The metric is a
/// PSNR-like sum of per-node quality scores plus genome-hashed jitter.
/// When a cache is supplied, freshly built node weights are committed
/// under that metric so weight-sharing bookkeeping is exercised.
pub struct SurrogateGenerator<'a> {
    pub channels: usize,
    pub scale: usize,
    pub limit: Option<CostLimit>,
    pub cache: Option<&'a WeightCache>,
}

impl SurrogateGenerator<'_> {
    pub fn metric(genome: &Genome) -> Result<f64> {
        let cell = decode_generator(genome)?;
        let quality: f64 = cell.nodes.iter().map(|n| op_quality(n.op)).sum();
        let depth_bonus = 0.05 * cell.leaves.len() as f64;
        Ok(28.0 + quality + depth_bonus + 0.01 * genome_jitter(genome, "gen"))
    }
}

impl Evaluator for SurrogateGenerator<'_> {
    fn space(&self) -> SpaceKind {
        SpaceKind::Generator
    }

    fn sense(&self) -> MetricSense {
        MetricSense::Maximize
    }

    fn gate(&self, genome: &Genome) -> Result<GateOutcome> {
        generator_gate(genome, self.channels, self.scale, self.limit.as_ref())
    }

    fn evaluate(&self, req: &EvalRequest<'_>) -> Result<Evaluation> {
        let metric = Self::metric(req.genome)?;
        let commits = match self.cache {
            Some(cache) => {
                let init = GeneratorInit { seed: req.seed, cache: Some(cache), snapshot: None };
                let net = build_generator(req.genome, self.channels, self.scale, init)?;
                commit_nodes(&net, cache, metric, req.sample_index)?
            }
            None => Vec::new(),
        };
        Ok(Evaluation { metric, commits })
    }
}

/// Deterministic stand-in for GAN fine-tuning; lower is better.
pub struct SurrogateDiscriminator;

impl SurrogateDiscriminator {
    pub fn metric(genome: &Genome) -> Result<f64> {
        let blocks = decode_discriminator(genome, 1)?;
        let quality: f64 = blocks
            .iter()
            .map(|b| op_quality(b.op) + 0.01 * b.reduction.kernel() as f64)
            .sum();
        Ok(0.5 - 0.1 * quality + 0.001 * genome_jitter(genome, "disc"))
    }
}

impl Evaluator for SurrogateDiscriminator {
    fn space(&self) -> SpaceKind {
        SpaceKind::Discriminator
    }

    fn sense(&self) -> MetricSense {
        MetricSense::Minimize
    }

    fn evaluate(&self, req: &EvalRequest<'_>) -> Result<Evaluation> {
        Ok(Evaluation::metric(Self::metric(req.genome)?))
    }
}

/// Generator evaluation: build from the weight cache, train on the proxy
/// distortion task, commit node weights, report validation PSNR.
pub struct GeneratorEvaluator<'a> {
    pub dataset: &'a Dataset,
    pub cache: Option<&'a WeightCache>,
    pub channels: usize,
    pub limit: Option<CostLimit>,
    pub proxy: DistortionConfig,
}

impl Evaluator for GeneratorEvaluator<'_> {
    fn space(&self) -> SpaceKind {
        SpaceKind::Generator
    }

    fn sense(&self) -> MetricSense {
        MetricSense::Maximize
    }

    fn gate(&self, genome: &Genome) -> Result<GateOutcome> {
        generator_gate(genome, self.channels, self.dataset.scale, self.limit.as_ref())
    }

    fn evaluate(&self, req: &EvalRequest<'_>) -> Result<Evaluation> {
        let init = GeneratorInit { seed: req.seed, cache: self.cache, snapshot: None };
        let mut net = build_generator(req.genome, self.channels, self.dataset.scale, init)?;
        let cfg = DistortionConfig { seed: req.seed, ..self.proxy.clone() };
        let report = train_distortion(&mut net, self.dataset, &cfg, None)?;
        let commits = match self.cache {
            Some(cache) => commit_nodes(&net, cache, report.value, req.sample_index)?,
            None => Vec::new(),
        };
        Ok(Evaluation { metric: report.value, commits })
    }
}

/// Discriminator evaluation: a fresh discriminator fine-tunes a private
/// copy of the best generator on the proxy perceptual task. No weight
/// sharing. Reports the windowed best feature distance.
pub struct DiscriminatorEvaluator<'a> {
    pub dataset: &'a Dataset,
    pub generator_genome: Genome,
    pub generator_weights: &'a WeightSnapshot,
    pub channels: usize,
    pub disc_channels: usize,
    pub bottleneck: usize,
    pub extractor_seed: u64,
    pub proxy: GanConfig,
}

impl Evaluator for DiscriminatorEvaluator<'_> {
    fn space(&self) -> SpaceKind {
        SpaceKind::Discriminator
    }

    fn sense(&self) -> MetricSense {
        MetricSense::Minimize
    }

    fn evaluate(&self, req: &EvalRequest<'_>) -> Result<Evaluation> {
        let mut gen = build_generator(&self.generator_genome, self.channels, self.dataset.scale, GeneratorInit::random(req.seed))?;
        gen.load_snapshot(self.generator_weights)?;
        let mut d = build_discriminator(req.genome, self.disc_channels, self.bottleneck, self.proxy.patch, req.seed)?;
        let mut phi = build_frozen_extractor(self.extractor_seed);
        let cfg = GanConfig { seed: req.seed, ..self.proxy.clone() };
        let report = train_gan(&mut gen, &mut d, &mut phi, self.dataset, &cfg, None)?;
        Ok(Evaluation::metric(report.value))
    }
}
