//! `srnas` command-line front end. Results go to stdout as JSON (or the
//! replay verdict line); logs and errors go to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use srnas::costmodel::{discriminator_cost, gate, generator_cost, CostLimit};
use srnas::data::read_png;
use srnas::modelbuilder::{build_frozen_extractor, build_generator, GeneratorInit};
use srnas::orchestrator::{
    read_log, replay_log, replay_run, run_until, sample_rng, train_scale, Phase, PipelineOutcome, PipelineState,
    RunConfig, RunDir, SearchCheckpoint, SearchLogRecord,
};
use srnas::searchspace::{decode_discriminator, decode_generator, Genome, SpaceKind};
use srnas::tensorkit::WeightSnapshot;
use srnas::trainer::{feature_distance, psnr, validate_feature_distance, validate_psnr};

/// Overrides relative run directories.
const RUN_ROOT_ENV: &str = "SRNAS_RUN_ROOT";
/// Exit code after a graceful stop on SIGINT.
const EXIT_INTERRUPTED: u8 = 130;

#[derive(Parser)]
#[command(name = "srnas", version, about = "Architecture search for tiny perceptual super-resolution models")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (JSON). Defaults to the built-in preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// Override one config value, e.g. `--set generator_search.steps=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory; relative paths resolve against $SRNAS_RUN_ROOT when set.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Smoke,
}

#[derive(Subcommand)]
enum Command {
    /// All four phases, resuming whatever is already done.
    Run(CsvArg),
    /// Phase 1: generator search with weight sharing.
    SearchGen(CsvArg),
    /// Phase 3: discriminator search against the trained generator.
    SearchDisc(CsvArg),
    /// Full distortion training: phase 2, or a given genome.
    Train {
        /// Train this genome instead of the searched one.
        #[arg(long)]
        genome: Option<PathBuf>,
        /// Scale for --genome (default: the first configured scale).
        #[arg(long)]
        scale: Option<usize>,
    },
    /// Phase 4: GAN fine-tuning of the trained generator.
    FinetuneGan,
    /// PSNR and feature distance of a generator snapshot or an image pair.
    Eval {
        /// Generator snapshot stem, evaluated on the configured validation set.
        #[arg(long, conflicts_with_all = ["pred", "target"])]
        snapshot: Option<PathBuf>,
        #[arg(long, requires = "target")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        target: Option<PathBuf>,
    },
    /// Mult-Adds and parameter count of a genome.
    Cost {
        #[arg(long)]
        genome: PathBuf,
        #[arg(long, default_value_t = 2)]
        scale: usize,
        /// Generator output width and height (default: the gate resolution).
        #[arg(long, num_args = 2, value_names = ["W", "H"])]
        resolution: Option<Vec<usize>>,
        /// Discriminator input patch (default: the GAN patch).
        #[arg(long)]
        patch: Option<usize>,
        /// Width override (default: from the config).
        #[arg(long)]
        channels: Option<usize>,
    },
    /// Draw genomes from a controller checkpoint.
    Sample {
        /// Defaults to the run's generator controller checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-derive every logged reward and verify it bit for bit.
    Replay {
        /// A single log; requires --checkpoint. Defaults to every log in the run.
        #[arg(long, requires = "checkpoint")]
        log: Option<PathBuf>,
        #[arg(long, requires = "log")]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        csv: CsvArg,
    },
    /// Print the effective configuration.
    Config,
}

#[derive(Args)]
struct CsvArg {
    /// Also export the search log(s) as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Failure reported as JSON on stderr with a matching exit code.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
    step: Option<usize>,
}

fn classify(err: &anyhow::Error) -> Failure {
    use srnas::Error as E;
    let message = format!("{err:#}");
    let lib = err.chain().find_map(|e| e.downcast_ref::<E>());
    let (code, kind, step) = match lib {
        Some(E::Config(_) | E::InvalidGenome(_) | E::Parse { .. }) => (2, "config", None),
        Some(E::Diverged(_) | E::NonFiniteMetric(_)) => (3, "divergence", None),
        Some(E::Io { .. }) => (4, "io", None),
        Some(E::ReplayMismatch { step, .. }) => (1, "replay_mismatch", Some(*step)),
        Some(E::Shape { .. } | E::ShapeMismatch { .. }) => (2, "shape", None),
        Some(_) => (1, "internal", None),
        None if err.chain().any(|e| e.is::<std::io::Error>()) => (4, "io", None),
        None if err.chain().any(|e| e.is::<serde_json::Error>()) => (2, "config", None),
        None => (2, "usage", None),
    };
    Failure { code, kind, message, step }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    if let Err(e) = ctrlc::set_handler(move || {
        log::warn!("interrupt received; checkpointing after the current evaluation");
        flag.store(true, Ordering::SeqCst);
    }) {
        log::warn!("could not install the interrupt handler: {e}");
    }
    match execute(&cli, &stop) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            let f = classify(&err);
            let mut doc = json!({ "error": f.kind, "message": f.message, "exit_code": f.code });
            if let Some(step) = f.step {
                doc["step"] = json!(step);
            }
            eprintln!("{doc}");
            ExitCode::from(f.code)
        }
    }
}

/// Writes one stdout line; a closed pipe (e.g. `| head`) is not an error.
fn emit(line: &str) -> anyhow::Result<()> {
    match writeln!(std::io::stdout().lock(), "{line}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json(value: &impl Serialize) -> anyhow::Result<()> {
    emit(&serde_json::to_string_pretty(value)?)
}

fn execute(cli: &Cli, stop: &AtomicBool) -> anyhow::Result<u8> {
    let cfg = load_config(&cli.global)?;
    let run = RunDir::new(resolve_run_dir(&cli.global.run_dir));
    match &cli.command {
        Command::Config => {
            print_json(&cfg)?;
            Ok(0)
        }
        Command::Run(csv) => phase(&cfg, &run, stop, Phase::Finetune, csv),
        Command::SearchGen(csv) => phase(&cfg, &run, stop, Phase::GeneratorSearch, csv),
        Command::SearchDisc(csv) => {
            require(&cfg, &run, Phase::Distortion, "search-disc needs a trained generator; run search-gen and train first")?;
            phase(&cfg, &run, stop, Phase::DiscriminatorSearch, csv)
        }
        Command::Train { genome: None, .. } => {
            require(&cfg, &run, Phase::GeneratorSearch, "train needs a searched generator (run search-gen) or --genome")?;
            phase(&cfg, &run, stop, Phase::Distortion, &CsvArg { csv: None })
        }
        Command::Train { genome: Some(path), scale } => train_genome(&cfg, &run, path, scale.unwrap_or(cfg.search_scale())),
        Command::FinetuneGan => {
            require(&cfg, &run, Phase::DiscriminatorSearch, "finetune-gan needs a searched discriminator; run search-disc first")?;
            phase(&cfg, &run, stop, Phase::Finetune, &CsvArg { csv: None })
        }
        Command::Eval { snapshot: Some(stem), .. } => eval_snapshot(&cfg, stem),
        Command::Eval { pred: Some(pred), target: Some(target), .. } => eval_pair(&cfg, pred, target),
        Command::Eval { .. } => bail!("eval needs --snapshot or --pred with --target"),
        Command::Cost { genome, scale, resolution, patch, channels } => {
            cost(&cfg, genome, *scale, resolution.as_deref(), *patch, *channels)
        }
        Command::Sample { checkpoint, count, seed } => {
            let path = checkpoint.clone().unwrap_or_else(|| run.checkpoint(SpaceKind::Generator));
            sample(&path, *count, *seed)
        }
        Command::Replay { log, checkpoint, csv } => replay(&run, log.as_deref(), checkpoint.as_deref(), csv),
    }
}

fn resolve_run_dir(dir: &Path) -> PathBuf {
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

fn load_config(g: &Global) -> anyhow::Result<RunConfig> {
    let base = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => match g.preset {
            Preset::Default => RunConfig::default(),
            Preset::Smoke => RunConfig::smoke(),
        },
    };
    if g.overrides.is_empty() {
        base.validate()?;
        return Ok(base);
    }
    let mut doc = serde_json::to_value(&base)?;
    for item in &g.overrides {
        apply_override(&mut doc, item)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| srnas::Error::Config(format!("after --set: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Sets a dotted key to a JSON value (bare words are taken as strings).
/// Only existing keys may be set.
fn apply_override(doc: &mut Value, item: &str) -> anyhow::Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| srnas::Error::Config(format!("--set expects KEY=VALUE, got `{item}`")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = doc;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) if map.contains_key(part) => map.get_mut(part).expect("key present"),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)).ok_or_else(|| {
                srnas::Error::Config(format!("--set {key}: no element `{part}`"))
            })?,
            _ => return Err(srnas::Error::Config(format!("--set {key}: unknown key `{part}`")).into()),
        };
    }
    *slot = value;
    Ok(())
}

fn require(cfg: &RunConfig, run: &RunDir, phase: Phase, msg: &str) -> anyhow::Result<()> {
    let done = run.state().exists() && phase.done(&PipelineState::load_or_new(run, cfg)?, cfg);
    if !done {
        return Err(srnas::Error::Config(msg.into()).into());
    }
    Ok(())
}

fn phase(cfg: &RunConfig, run: &RunDir, stop: &AtomicBool, last: Phase, csv: &CsvArg) -> anyhow::Result<u8> {
    let out: PipelineOutcome = run_until(cfg, run, Some(stop), last)?;
    if let Some(path) = &csv.csv {
        let spaces: &[SpaceKind] = match last {
            Phase::GeneratorSearch | Phase::Distortion => &[SpaceKind::Generator],
            Phase::DiscriminatorSearch => &[SpaceKind::Discriminator],
            Phase::Finetune => &[SpaceKind::Generator, SpaceKind::Discriminator],
        };
        export_csv(run, spaces, path)?;
    }
    let doc = json!({
        "run_dir": run.root,
        "phase": last,
        "interrupted": out.interrupted,
        "state": out.state,
        "manifest": out.manifest,
    });
    print_json(&doc)?;
    Ok(if out.interrupted { EXIT_INTERRUPTED } else { 0 })
}

fn read_genome(path: &Path) -> anyhow::Result<Genome> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Genome::from_json(&text)?)
}

fn train_genome(cfg: &RunConfig, run: &RunDir, path: &Path, scale: usize) -> anyhow::Result<u8> {
    let genome = read_genome(path)?;
    run.init(cfg)?;
    let (snap, value) = train_scale(cfg, run, &genome, scale, None)?;
    let name = format!("train_{}_x{scale}", &genome.hash_hex()[..12]);
    snap.save(&run.snapshot(&name))?;
    print_json(&json!({ "genome": genome, "scale": scale, "psnr": value, "snapshot": run.snapshot(&name) }))?;
    Ok(0)
}

fn tag<T: std::str::FromStr>(snap: &WeightSnapshot, key: &str) -> anyhow::Result<T> {
    snap.tags
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| srnas::Error::Config(format!("snapshot has no usable `{key}` tag")).into())
}

fn eval_snapshot(cfg: &RunConfig, stem: &Path) -> anyhow::Result<u8> {
    let snap = WeightSnapshot::load(stem)?;
    let genome = Genome::from_json(snap.tags.get("genome").map(String::as_str).unwrap_or_default())?;
    let scale: usize = tag(&snap, "scale")?;
    let channels: usize = tag(&snap, "channels")?;
    let mut gen = build_generator(&genome, channels, scale, GeneratorInit::random(0))?;
    gen.load_snapshot(&snap)?;
    let ds = cfg.dataset(scale)?;
    let mut phi = build_frozen_extractor(cfg.extractor_seed);
    let depth = cfg.full_gan.feature_depth;
    let doc = json!({
        "snapshot": stem,
        "scale": scale,
        "images": if ds.val.is_empty() { ds.train.len() } else { ds.val.len() },
        "psnr": validate_psnr(&mut gen, &ds)?,
        "feature_distance": validate_feature_distance(&mut gen, &ds, &mut phi, depth)?,
    });
    print_json(&doc)?;
    Ok(0)
}

fn eval_pair(cfg: &RunConfig, pred: &Path, target: &Path) -> anyhow::Result<u8> {
    let load = |p: &Path| -> anyhow::Result<_> {
        let img = read_png(p, 1)?;
        let shape = img.shape().to_vec();
        Ok(img.reshape(&[1, shape[0], shape[1], shape[2]])?)
    };
    let (a, b) = (load(pred)?, load(target)?);
    let mut phi = build_frozen_extractor(cfg.extractor_seed);
    let doc = json!({
        "pred": pred,
        "target": target,
        "psnr": psnr(&a, &b, 1.0, 0)?,
        "feature_distance": feature_distance(&a, &b, &mut phi, cfg.full_gan.feature_depth)?,
    });
    print_json(&doc)?;
    Ok(0)
}

fn cost(
    cfg: &RunConfig,
    path: &Path,
    scale: usize,
    resolution: Option<&[usize]>,
    patch: Option<usize>,
    channels: Option<usize>,
) -> anyhow::Result<u8> {
    let genome = read_genome(path)?;
    match genome.space {
        SpaceKind::Generator => {
            let cell = decode_generator(&genome)?;
            let (w, h) = match resolution {
                Some(r) => (r[0], r[1]),
                None => cfg.generator_search.cost_resolution,
            };
            let n = channels.unwrap_or(cfg.channels);
            let report = generator_cost(&cell, n, scale, (w, h))?;
            if let Some(max) = cfg.generator_search.cost_limit {
                let verdict = gate(&report, &CostLimit::new(max, (w, h))?);
                log::info!("gate at {w}x{h} with limit {max}: {verdict:?}");
            }
            print_json(&report)?;
        }
        SpaceKind::Discriminator => {
            let d = &cfg.discriminator_search;
            let n = channels.unwrap_or(d.channels);
            let blocks = decode_discriminator(&genome, n)?;
            print_json(&discriminator_cost(&blocks, n, d.bottleneck, patch.unwrap_or(cfg.full_gan.patch))?)?;
        }
    }
    Ok(0)
}

fn sample(path: &Path, count: usize, seed: u64) -> anyhow::Result<u8> {
    let ck = SearchCheckpoint::load(path)?;
    let space = ck.config.space;
    for i in 0..count as u64 {
        let s = ck.controller.sample(&mut sample_rng(seed, i));
        let genome = Genome::new(space, s.decisions)?;
        emit(&json!({ "genome": genome, "log_prob": s.log_prob, "entropy": s.entropy }).to_string())?;
    }
    Ok(0)
}

fn replay(run: &RunDir, log: Option<&Path>, checkpoint: Option<&Path>, csv: &CsvArg) -> anyhow::Result<u8> {
    let reports = match (log, checkpoint) {
        (Some(log), Some(ck)) => {
            if let Some(out) = &csv.csv {
                write_csv(&read_log(log)?, out)?;
            }
            vec![replay_log(log, ck)?]
        }
        _ => {
            if !run.root.exists() {
                return Err(srnas::Error::Config(format!("run directory {} does not exist", run.root.display())).into());
            }
            let reports = replay_run(run)?;
            if let Some(out) = &csv.csv {
                let spaces: Vec<SpaceKind> = reports.iter().map(|r| r.space).collect();
                export_csv(run, &spaces, out)?;
            }
            reports
        }
    };
    for r in &reports {
        log::info!("{}: {} records, {} steps, full controller replay: {}", r.space.as_str(), r.records, r.steps, r.full);
    }
    let total: usize = reports.iter().map(|r| r.records).sum();
    emit(&format!("OK, {total} records verified"))?;
    Ok(0)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    space: &'a str,
    step: usize,
    sample_index: u64,
    genome: String,
    gate: &'a str,
    metric: Option<f64>,
    normalized: Option<f64>,
    advantage: Option<f64>,
    reward: Option<f64>,
    entropy: f64,
    log_prob: f64,
    failure: Option<&'a str>,
    wall_time_s: f64,
    worker: usize,
}

fn export_csv(run: &RunDir, spaces: &[SpaceKind], out: &Path) -> anyhow::Result<()> {
    let mut records = Vec::new();
    for &space in spaces {
        let log = run.search_log(space);
        if log.exists() {
            records.extend(read_log(&log)?);
        }
    }
    write_csv(&records, out)
}

fn write_csv(records: &[SearchLogRecord], out: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
    for r in records {
        w.serialize(CsvRow {
            space: r.space.as_str(),
            step: r.step,
            sample_index: r.sample_index,
            genome: r.genome.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" "),
            gate: if r.gate.passed() { "pass" } else { "reject" },
            metric: r.metric,
            normalized: r.normalized,
            advantage: r.advantage,
            reward: r.reward,
            entropy: r.entropy,
            log_prob: r.log_prob,
            failure: r.failure.as_deref(),
            wall_time_s: r.wall_time_s,
            worker: r.worker,
        })?;
    }
    w.flush().with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
