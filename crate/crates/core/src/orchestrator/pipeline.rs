//! The four-phase pipeline: generator search, full distortion training,
//! discriminator search and GAN fine-tuning, persisted in a run directory.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::evaluators::{DiscriminatorEvaluator, GeneratorEvaluator, SurrogateDiscriminator, SurrogateGenerator};
use super::search::{search, BestRecord, GateMode, SearchConfig, SearchIo, SearchOutcome};
use crate::costmodel::CostLimit;
use crate::data::{generate_dataset, load_png_folder, Dataset, DatasetManifest, DatasetSpec};
use crate::error::{Error, Result};
use crate::modelbuilder::{build_discriminator, build_frozen_extractor, build_generator, GeneratorInit, DEFAULT_CHANNELS};
use crate::searchspace::{Genome, SpaceKind};
use crate::tensorkit::WeightSnapshot;
use crate::trainer::{train_distortion, train_gan, validate_feature_distance, validate_psnr, DistortionConfig, GanConfig};
use crate::weightcache::WeightCache;

/// Which evaluator scores candidates during a search.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatorKind {
    /// Proxy training on the dataset.
    #[default]
    Real,
    /// Deterministic closed-form stand-in.
    Surrogate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSearchConfig {
    pub steps: usize,
    pub workers: usize,
    pub evaluator: EvaluatorKind,
    /// Mult-Adds limit; `None` disables the cost gate.
    pub cost_limit: Option<u64>,
    /// Output resolution (width, height) the limit refers to.
    pub cost_resolution: (usize, usize),
    #[serde(default)]
    pub gate_mode: GateMode,
    pub checkpoint_every: usize,
    pub proxy: DistortionConfig,
}

impl Default for GeneratorSearchConfig {
    fn default() -> Self {
        GeneratorSearchConfig {
            steps: 200,
            workers: 1,
            evaluator: EvaluatorKind::Real,
            cost_limit: Some(5_000_000_000),
            cost_resolution: (1280, 720),
            gate_mode: GateMode::Skip,
            checkpoint_every: 10,
            proxy: DistortionConfig::proxy(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSearchConfig {
    pub steps: usize,
    pub workers: usize,
    pub evaluator: EvaluatorKind,
    pub checkpoint_every: usize,
    /// Stem width of the discriminator.
    pub channels: usize,
    /// Width of the hidden classifier layer.
    pub bottleneck: usize,
    pub proxy: GanConfig,
}

impl Default for DiscriminatorSearchConfig {
    fn default() -> Self {
        DiscriminatorSearchConfig {
            steps: 50,
            workers: 1,
            evaluator: EvaluatorKind::Real,
            checkpoint_every: 5,
            channels: 8,
            bottleneck: 32,
            proxy: GanConfig::proxy(),
        }
    }
}

/// The whole run as one document. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Procedural dataset; its `scale` is overridden per phase.
    pub dataset: DatasetSpec,
    /// Folder with `train/` and `val/` PNGs used instead of the procedural set.
    #[serde(default)]
    pub image_dir: Option<PathBuf>,
    /// Generator width.
    pub channels: usize,
    /// Upscaling factors; the search runs at the first, later ones start
    /// from the previous scale's trained weights.
    pub scales: Vec<usize>,
    pub generator_search: GeneratorSearchConfig,
    pub discriminator_search: DiscriminatorSearchConfig,
    pub full_distortion: DistortionConfig,
    pub full_gan: GanConfig,
    pub extractor_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetSpec { image_size: 96, ..DatasetSpec::default() },
            image_dir: None,
            channels: DEFAULT_CHANNELS,
            scales: vec![2],
            generator_search: GeneratorSearchConfig::default(),
            discriminator_search: DiscriminatorSearchConfig::default(),
            full_distortion: DistortionConfig::full(),
            full_gan: GanConfig::full(),
            extractor_seed: 7,
        }
    }
}

impl RunConfig {
    /// Surrogate evaluators and tiny training budgets; finishes in seconds.
    pub fn smoke() -> Self {
        let tiny_distortion = DistortionConfig {
            epochs: 2,
            steps_per_epoch: 1,
            batch: 2,
            lr_patch: 8,
            ..DistortionConfig::proxy()
        };
        let tiny_gan = GanConfig { epochs: 3, batch: 2, patch: 32, ..GanConfig::proxy() };
        RunConfig {
            dataset: DatasetSpec { count_train: 4, count_val: 2, image_size: 32, ..DatasetSpec::default() },
            channels: 8,
            generator_search: GeneratorSearchConfig {
                evaluator: EvaluatorKind::Surrogate,
                checkpoint_every: 50,
                proxy: tiny_distortion.clone(),
                ..GeneratorSearchConfig::default()
            },
            discriminator_search: DiscriminatorSearchConfig {
                evaluator: EvaluatorKind::Surrogate,
                checkpoint_every: 10,
                proxy: tiny_gan.clone(),
                ..DiscriminatorSearchConfig::default()
            },
            full_distortion: tiny_distortion,
            full_gan: tiny_gan,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("at least one scale is required".into()));
        }
        for &s in &self.scales {
            DatasetSpec { scale: s, ..self.dataset.clone() }.validate()?;
        }
        if self.generator_search.steps == 0 || self.discriminator_search.steps == 0 {
            return Err(Error::Config("search steps must be at least 1".into()));
        }
        if self.generator_search.workers == 0 || self.discriminator_search.workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        if let Some(limit) = self.generator_search.cost_limit {
            CostLimit::new(limit, self.generator_search.cost_resolution)?;
        }
        self.generator_search.proxy.validate()?;
        self.full_distortion.validate()?;
        self.discriminator_search.proxy.validate()?;
        self.full_gan.validate()?;
        let size = self.dataset.image_size;
        for (name, patch) in [("discriminator_search.proxy", self.discriminator_search.proxy.patch), ("full_gan", self.full_gan.patch)] {
            if self.image_dir.is_none() && patch > size {
                return Err(Error::Config(format!("{name}.patch {patch} exceeds image size {size}")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn search_scale(&self) -> usize {
        self.scales[0]
    }

    pub fn final_scale(&self) -> usize {
        *self.scales.last().expect("validated non-empty")
    }

    pub fn generator_search_config(&self) -> SearchConfig {
        let g = &self.generator_search;
        SearchConfig {
            workers: g.workers,
            gate_mode: g.gate_mode,
            checkpoint_every: g.checkpoint_every,
            ..SearchConfig::new(SpaceKind::Generator, g.steps, self.seed)
        }
    }

    pub fn discriminator_search_config(&self) -> SearchConfig {
        let d = &self.discriminator_search;
        SearchConfig {
            workers: d.workers,
            checkpoint_every: d.checkpoint_every,
            ..SearchConfig::new(SpaceKind::Discriminator, d.steps, self.seed.wrapping_add(1000))
        }
    }

    pub fn cost_limit(&self) -> Result<Option<CostLimit>> {
        self.generator_search
            .cost_limit
            .map(|l| CostLimit::new(l, self.generator_search.cost_resolution))
            .transpose()
    }

    /// Initialization seed of the full-task generator at `scale`.
    pub fn generator_init_seed(&self, scale: usize) -> u64 {
        self.seed.wrapping_add(2000 + scale as u64)
    }

    pub fn discriminator_init_seed(&self) -> u64 {
        self.seed.wrapping_add(3000)
    }

    /// Every seed the run uses, by role.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let g = self.generator_search_config();
        let d = self.discriminator_search_config();
        let mut m = BTreeMap::new();
        m.insert("run".into(), self.seed);
        m.insert("dataset".into(), self.dataset.seed);
        m.insert("generator_controller".into(), g.controller_seed);
        m.insert("generator_sample".into(), g.sample_seed);
        m.insert("generator_eval".into(), g.eval_seed);
        m.insert("discriminator_controller".into(), d.controller_seed);
        m.insert("discriminator_sample".into(), d.sample_seed);
        m.insert("discriminator_eval".into(), d.eval_seed);
        for &s in &self.scales {
            m.insert(format!("generator_init_x{s}"), self.generator_init_seed(s));
        }
        m.insert("full_distortion".into(), self.full_distortion.seed);
        m.insert("discriminator_init".into(), self.discriminator_init_seed());
        m.insert("full_gan".into(), self.full_gan.seed);
        m.insert("extractor".into(), self.extractor_seed);
        m
    }

    /// Dataset for `scale`: procedural, or the PNG folder when configured.
    pub fn dataset(&self, scale: usize) -> Result<Dataset> {
        match &self.image_dir {
            None => generate_dataset(&DatasetSpec { scale, ..self.dataset.clone() }),
            Some(dir) => {
                let train = load_png_folder(&dir.join("train"), scale)?;
                let val = load_png_folder(&dir.join("val"), scale)?;
                if train.is_empty() {
                    return Err(Error::Config(format!("no PNG images in {}", dir.join("train").display())));
                }
                Ok(Dataset::from_pairs(scale, train, val))
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn state(&self) -> PathBuf {
        self.root.join("pipeline_state.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn dataset_manifest(&self) -> PathBuf {
        self.root.join("dataset.json")
    }

    pub fn search_log(&self, space: SpaceKind) -> PathBuf {
        match space {
            SpaceKind::Generator => self.root.join("search_log.jsonl"),
            SpaceKind::Discriminator => self.root.join("disc_search_log.jsonl"),
        }
    }

    pub fn checkpoint(&self, space: SpaceKind) -> PathBuf {
        match space {
            SpaceKind::Generator => self.root.join("controller.ckpt"),
            SpaceKind::Discriminator => self.root.join("disc_controller.ckpt"),
        }
    }

    pub fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }

    /// Stem of a weight snapshot (`.json` and `.bin` are appended).
    pub fn snapshot(&self, name: &str) -> PathBuf {
        self.root.join("snapshots").join(name)
    }

    pub fn trace(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}_trace.jsonl"))
    }

    /// Creates the directory, writing `config.json` on first use and
    /// refusing a different configuration afterwards.
    pub fn init(&self, cfg: &RunConfig) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.config();
        if path.exists() {
            let existing = RunConfig::load(&path)?;
            if existing.hash() != cfg.hash() {
                return Err(Error::Config(format!(
                    "{} holds a different configuration; use a fresh run directory",
                    path.display()
                )));
            }
            Ok(())
        } else {
            cfg.save(&path)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleResult {
    pub scale: usize,
    pub psnr: f64,
    pub snapshot: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalResult {
    pub feature_distance: f64,
    pub psnr: f64,
    pub windowed_feature_distance: f64,
}

/// Completed phases; written after each phase and each trained scale.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub config_hash: String,
    pub generator: Option<BestRecord>,
    #[serde(default)]
    pub distortion: Vec<ScaleResult>,
    pub discriminator: Option<BestRecord>,
    pub final_result: Option<FinalResult>,
}

impl PipelineState {
    pub fn load_or_new(run: &RunDir, cfg: &RunConfig) -> Result<Self> {
        let path = run.state();
        if !path.exists() {
            return Ok(PipelineState { config_hash: cfg.hash(), ..Default::default() });
        }
        let st: PipelineState = read_json(&path)?;
        if st.config_hash != cfg.hash() {
            return Err(Error::Config(format!("{} belongs to a different configuration", path.display())));
        }
        Ok(st)
    }

    pub fn save(&self, run: &RunDir) -> Result<()> {
        write_json(&run.state(), self)
    }

    pub fn distortion_done(&self, cfg: &RunConfig) -> bool {
        self.distortion.len() == cfg.scales.len()
    }
}

/// Provenance of the final model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub generator_genome: Genome,
    pub discriminator_genome: Genome,
    pub generator_search_metric: f64,
    pub discriminator_search_metric: f64,
    pub seeds: BTreeMap<String, u64>,
    pub dataset: DatasetManifest,
    pub distortion: Vec<ScaleResult>,
    pub final_result: FinalResult,
    pub generator_snapshot: String,
    pub discriminator_snapshot: String,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub state: PipelineState,
    pub manifest: Option<RunManifest>,
    pub interrupted: bool,
}

fn stopping(stop: Option<&AtomicBool>) -> bool {
    stop.is_some_and(|s| s.load(Ordering::SeqCst))
}

fn trace_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Phase 1: generator search at the first scale, with weight sharing.
pub fn generator_search_phase(cfg: &RunConfig, run: &RunDir, stop: Option<&AtomicBool>) -> Result<SearchOutcome> {
    let scale = cfg.search_scale();
    let cache_dir = run.cache();
    let cache = if cache_dir.join("index.json").exists() {
        WeightCache::load(&cache_dir)?
    } else {
        WeightCache::new(cfg.channels)
    };
    let limit = cfg.cost_limit()?;
    let scfg = cfg.generator_search_config();
    let log = run.search_log(SpaceKind::Generator);
    let ckpt = run.checkpoint(SpaceKind::Generator);
    let io = SearchIo { log: Some(&log), checkpoint: Some(&ckpt), cache: Some((&cache, &cache_dir)), stop };
    match cfg.generator_search.evaluator {
        EvaluatorKind::Surrogate => {
            let ev = SurrogateGenerator { channels: cfg.channels, scale, limit, cache: Some(&cache) };
            search(&scfg, &ev, io)
        }
        EvaluatorKind::Real => {
            let ds = cfg.dataset(scale)?;
            let ev = GeneratorEvaluator {
                dataset: &ds,
                cache: Some(&cache),
                channels: cfg.channels,
                limit,
                proxy: cfg.generator_search.proxy.clone(),
            };
            search(&scfg, &ev, io)
        }
    }
}

/// Trains `genome` on the full distortion task at one scale. The first
/// scale starts from the search cache, later ones from `previous`.
pub fn train_scale(
    cfg: &RunConfig,
    run: &RunDir,
    genome: &Genome,
    scale: usize,
    previous: Option<&WeightSnapshot>,
) -> Result<(WeightSnapshot, f64)> {
    let cache_dir = run.cache();
    let cache = match previous {
        None if cache_dir.join("index.json").exists() => Some(WeightCache::load(&cache_dir)?),
        _ => None,
    };
    let init = GeneratorInit { seed: cfg.generator_init_seed(scale), cache: cache.as_ref(), snapshot: previous };
    let mut net = build_generator(genome, cfg.channels, scale, init)?;
    let ds = cfg.dataset(scale)?;
    let mut trace = trace_file(&run.trace(&format!("train_x{scale}")))?;
    let report = train_distortion(&mut net, &ds, &cfg.full_distortion, Some(&mut trace))?;
    let mut snap = net.snapshot();
    snap.tags.insert("psnr".into(), report.value.to_string());
    Ok((snap, report.value))
}

/// Phase 2 for every configured scale, skipping scales already trained.
pub fn distortion_phase(cfg: &RunConfig, run: &RunDir, state: &mut PipelineState, genome: &Genome) -> Result<()> {
    for (i, &scale) in cfg.scales.iter().enumerate() {
        if i < state.distortion.len() {
            continue;
        }
        let previous = match i {
            0 => None,
            _ => Some(WeightSnapshot::load(&run.snapshot(&state.distortion[i - 1].snapshot))?),
        };
        log::info!("full distortion training at x{scale}");
        let (snap, psnr) = train_scale(cfg, run, genome, scale, previous.as_ref())?;
        let name = format!("g_best_x{scale}");
        snap.save(&run.snapshot(&name))?;
        state.distortion.push(ScaleResult { scale, psnr, snapshot: name });
        state.save(run)?;
    }
    Ok(())
}

/// Phase 3: discriminator search against a fixed trained generator.
pub fn discriminator_search_phase(
    cfg: &RunConfig,
    run: &RunDir,
    generator: &Genome,
    weights: &WeightSnapshot,
    stop: Option<&AtomicBool>,
) -> Result<SearchOutcome> {
    let scfg = cfg.discriminator_search_config();
    let log = run.search_log(SpaceKind::Discriminator);
    let ckpt = run.checkpoint(SpaceKind::Discriminator);
    let io = SearchIo { log: Some(&log), checkpoint: Some(&ckpt), cache: None, stop };
    let d = &cfg.discriminator_search;
    match d.evaluator {
        EvaluatorKind::Surrogate => search(&scfg, &SurrogateDiscriminator, io),
        EvaluatorKind::Real => {
            let ds = cfg.dataset(cfg.final_scale())?;
            let ev = DiscriminatorEvaluator {
                dataset: &ds,
                generator_genome: generator.clone(),
                generator_weights: weights,
                channels: cfg.channels,
                disc_channels: d.channels,
                bottleneck: d.bottleneck,
                extractor_seed: cfg.extractor_seed,
                proxy: d.proxy.clone(),
            };
            search(&scfg, &ev, io)
        }
    }
}

/// Phase 4: full GAN fine-tuning. Returns the tuned generator and
/// discriminator snapshots and the final metrics.
pub fn gan_phase(
    cfg: &RunConfig,
    run: &RunDir,
    generator: &Genome,
    weights: &WeightSnapshot,
    discriminator: &Genome,
) -> Result<(WeightSnapshot, WeightSnapshot, FinalResult)> {
    let scale = cfg.final_scale();
    let ds = cfg.dataset(scale)?;
    let mut gen = build_generator(generator, cfg.channels, scale, GeneratorInit::random(cfg.generator_init_seed(scale)))?;
    gen.load_snapshot(weights)?;
    let dcfg = &cfg.discriminator_search;
    let mut d = build_discriminator(discriminator, dcfg.channels, dcfg.bottleneck, cfg.full_gan.patch, cfg.discriminator_init_seed())?;
    let mut phi = build_frozen_extractor(cfg.extractor_seed);
    let mut trace = trace_file(&run.trace("finetune_gan"))?;
    let report = train_gan(&mut gen, &mut d, &mut phi, &ds, &cfg.full_gan, Some(&mut trace))?;
    let result = FinalResult {
        feature_distance: validate_feature_distance(&mut gen, &ds, &mut phi, cfg.full_gan.feature_depth)?,
        psnr: validate_psnr(&mut gen, &ds)?,
        windowed_feature_distance: report.value,
    };
    let mut g_snap = gen.snapshot();
    g_snap.tags.insert("discriminator_genome".into(), discriminator.to_json());
    g_snap.tags.insert("config_hash".into(), cfg.hash());
    Ok((g_snap, d.snapshot(), result))
}

fn interrupted(state: PipelineState) -> PipelineOutcome {
    PipelineOutcome { state, manifest: None, interrupted: true }
}

/// Pipeline phases in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    GeneratorSearch,
    Distortion,
    DiscriminatorSearch,
    Finetune,
}

impl Phase {
    /// Whether `state` already records this phase as complete.
    pub fn done(self, state: &PipelineState, cfg: &RunConfig) -> bool {
        match self {
            Phase::GeneratorSearch => state.generator.is_some(),
            Phase::Distortion => state.distortion_done(cfg),
            Phase::DiscriminatorSearch => state.discriminator.is_some(),
            Phase::Finetune => state.final_result.is_some(),
        }
    }
}

/// Runs all four phases in `run`, resuming whatever is already done.
pub fn run_pipeline(cfg: &RunConfig, run: &RunDir, stop: Option<&AtomicBool>) -> Result<PipelineOutcome> {
    run_until(cfg, run, stop, Phase::Finetune)
}

/// Runs the phases up to and including `last`, skipping completed ones.
/// The manifest is written once the final phase is done.
pub fn run_until(cfg: &RunConfig, run: &RunDir, stop: Option<&AtomicBool>, last: Phase) -> Result<PipelineOutcome> {
    cfg.validate()?;
    run.init(cfg)?;
    let mut state = PipelineState::load_or_new(run, cfg)?;
    cfg.dataset(cfg.final_scale())?.write_manifest(&run.dataset_manifest())?;
    let partial = |state: PipelineState, interrupted: bool| PipelineOutcome { state, manifest: None, interrupted };

    let g_best = match state.generator.clone() {
        Some(b) => b,
        None => {
            log::info!("phase 1: generator search");
            let out = generator_search_phase(cfg, run, stop)?;
            if out.interrupted {
                return Ok(interrupted(state));
            }
            let best = out.best.ok_or_else(|| Error::State("generator search produced no successful evaluation".into()))?;
            state.generator = Some(best.clone());
            state.save(run)?;
            best
        }
    };
    if stopping(stop) {
        return Ok(interrupted(state));
    }
    if last == Phase::GeneratorSearch {
        return Ok(partial(state, false));
    }

    if !state.distortion_done(cfg) {
        log::info!("phase 2: full distortion training of {}", g_best.genome);
        distortion_phase(cfg, run, &mut state, &g_best.genome)?;
    }
    if stopping(stop) {
        return Ok(interrupted(state));
    }
    if last == Phase::Distortion {
        return Ok(partial(state, false));
    }
    let trained = state.distortion.last().expect("distortion phase complete").clone();
    let g_weights = WeightSnapshot::load(&run.snapshot(&trained.snapshot))?;

    let d_best = match state.discriminator.clone() {
        Some(b) => b,
        None => {
            log::info!("phase 3: discriminator search");
            let out = discriminator_search_phase(cfg, run, &g_best.genome, &g_weights, stop)?;
            if out.interrupted {
                return Ok(interrupted(state));
            }
            let best = out.best.ok_or_else(|| Error::State("discriminator search produced no successful evaluation".into()))?;
            state.discriminator = Some(best.clone());
            state.save(run)?;
            best
        }
    };
    if stopping(stop) {
        return Ok(interrupted(state));
    }
    if last == Phase::DiscriminatorSearch {
        return Ok(partial(state, false));
    }

    let final_result = match state.final_result.clone() {
        Some(r) => r,
        None => {
            log::info!("phase 4: GAN fine-tuning with {}", d_best.genome);
            let (g, d, r) = gan_phase(cfg, run, &g_best.genome, &g_weights, &d_best.genome)?;
            g.save(&run.snapshot("g_final"))?;
            d.save(&run.snapshot("d_final"))?;
            state.final_result = Some(r.clone());
            state.save(run)?;
            r
        }
    };

    let manifest = RunManifest {
        config_hash: cfg.hash(),
        generator_genome: g_best.genome.clone(),
        discriminator_genome: d_best.genome.clone(),
        generator_search_metric: g_best.metric,
        discriminator_search_metric: d_best.metric,
        seeds: cfg.seeds(),
        dataset: read_json(&run.dataset_manifest())?,
        distortion: state.distortion.clone(),
        final_result,
        generator_snapshot: "snapshots/g_final".into(),
        discriminator_snapshot: "snapshots/d_final".into(),
    };
    write_json(&run.manifest(), &manifest)?;
    Ok(PipelineOutcome { state, manifest: Some(manifest), interrupted: false })
}

#[cfg(test)]
mod tests {
    use std::time::Instant;

    use super::super::replay::replay_run;
    use super::*;

    #[test]
    fn smoke_pipeline_completes_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path().join("run"));
        let cfg = RunConfig::smoke();
        let start = Instant::now();
        let out = run_pipeline(&cfg, &run, None).unwrap();
        eprintln!("smoke pipeline took {:.1}s", start.elapsed().as_secs_f64());
        let manifest = out.manifest.unwrap();
        assert_eq!(manifest.config_hash, cfg.hash());
        assert!(manifest.final_result.psnr.is_finite());
        for p in [run.config(), run.manifest(), run.search_log(SpaceKind::Generator), run.cache().join("index.json")] {
            assert!(p.exists(), "{}", p.display());
        }
        let reports = replay_run(&run).unwrap();
        assert_eq!(reports.iter().map(|r| r.steps).collect::<Vec<_>>(), vec![200, 50]);

        let g_before = fs::read(run.snapshot("g_best_x2").with_extension("bin")).unwrap();
        let again = run_pipeline(&cfg, &run, None).unwrap();
        assert_eq!(again.manifest.unwrap(), manifest);
        assert_eq!(fs::read(run.snapshot("g_best_x2").with_extension("bin")).unwrap(), g_before);
    }

    #[test]
    fn different_config_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        run.init(&RunConfig::smoke()).unwrap();
        let other = RunConfig { seed: 1, ..RunConfig::smoke() };
        assert!(matches!(run.init(&other), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(RunConfig::smoke()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }
}
