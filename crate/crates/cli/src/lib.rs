//! Command implementations behind the `guidegate` binary.
//!
//! Every command works inside one run directory,
//! `<runs root>/<config.name>/`, laid out as
//!
//! ```text
//! config.json  manifest.json  demos.jsonl  pretrain.csv
//! checkpoints/guide.ckpt  checkpoints/seed_<s>/epoch_<eee>.ckpt
//! frames/seed_<s>/epoch_<eee>.jsonl  metrics.csv  batches.csv  analysis/
//! ```
//!
//! Baselines train into `baseline-alone/` and `baseline-guided/` below the
//! run directory and reuse its demonstrations and guide.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use guidegate::agents::GateMode;
use guidegate::analysis::{self, EpochFrames, FrameRecord, HeatmapGrid};
use guidegate::diffcore::ParameterStore;
use guidegate::expert::Demonstration;
use guidegate::gridworld::Level;
use guidegate::training::{self, TrainConfig, TrainError, TrainMode};

pub const RUNS_DIR_ENV: &str = "GUIDEGATE_RUNS_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("corrupt data in {path}:{line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("{stage} failed: {source}")]
    Stage { stage: &'static str, source: TrainError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Corrupt { .. } => 4,
            CliError::Stage { source: TrainError::Config(_), .. } => 2,
            CliError::Stage { .. } | CliError::Io { .. } => 1,
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "guidegate", version, about = "Gated-guidance imitation learning experiments")]
pub struct Cli {
    /// Worker threads for demo generation and validation rollouts.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate expert demonstrations.
    GenDemos(ConfigArgs),
    /// Pretrain the guide on the demonstrations.
    Pretrain(ConfigArgs),
    /// Train the gated learner or one of the baselines.
    Train {
        #[command(flatten)]
        args: ConfigArgs,
        /// none (gated), alone (gate always closed) or guided (always open, no penalty).
        #[arg(long, default_value = "none")]
        baseline: TrainMode,
    },
    /// Compute analysis CSVs from a run directory's frame logs.
    Analyze {
        run_dir: PathBuf,
    },
    /// gen-demos, pretrain, train and analyze in one go.
    Pipeline {
        #[command(flatten)]
        args: ConfigArgs,
        /// Also train and analyze both baselines.
        #[arg(long)]
        baselines: bool,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub level: Option<Level>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn load_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut config = TrainConfig::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(level) = args.level {
        config.level = level;
    }
    if let Some(lambda) = args.lambda {
        config.lambda = Some(lambda);
    }
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

pub fn run_dir(root: &Path, config: &TrainConfig) -> PathBuf {
    root.join(&config.name)
}

fn baseline_dir(run: &Path, mode: TrainMode) -> PathBuf {
    match mode {
        TrainMode::Gated => run.to_path_buf(),
        _ => run.join(format!("baseline-{}", mode.name())),
    }
}

/// Content hash in git's object style: `sha256("blob <len>\0" ++ bytes)`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("sha256:{:x}", h.finalize())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_required(path: &Path, what: &str) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(CliError::Missing(format!("{what} not found at {}", path.display())));
    }
    fs::read(path).map_err(io_err(path))
}

fn remove_dir_if_present(path: &Path) -> Result<()> {
    if path.is_dir() {
        fs::remove_dir_all(path).map_err(io_err(path))?;
    }
    Ok(())
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Provenance of each command executed in a run directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub started_unix_ms: u128,
    pub wall_clock_secs: Option<f64>,
    #[serde(default)]
    pub details: BTreeMap<String, serde_json::Value>,
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Ok(RunManifest::default());
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Corrupt {
        path,
        line: e.line(),
        message: e.to_string(),
    })
}

/// Manifest key for `path`, relative to the stage directory where possible.
fn relative_name(dir: &Path, path: &Path) -> String {
    if let Ok(rel) = path.strip_prefix(dir) {
        return rel.display().to_string();
    }
    match dir.parent().map(|p| path.strip_prefix(p)) {
        Some(Ok(rel)) => Path::new("..").join(rel).display().to_string(),
        _ => path.display().to_string(),
    }
}

/// Open manifest entry for one stage; written when created and finalized by [`Stage::finish`].
struct Stage {
    dir: PathBuf,
    name: &'static str,
    record: StageRecord,
    clock: Instant,
}

impl Stage {
    fn begin(dir: &Path, name: &'static str, config: &TrainConfig, seeds: Vec<u64>, inputs: &[&Path]) -> Result<Stage> {
        let mut hashes = BTreeMap::new();
        for path in inputs {
            let bytes = fs::read(path).map_err(io_err(path))?;
            hashes.insert(relative_name(dir, path), content_hash(&bytes));
        }
        let stage = Stage {
            dir: dir.to_path_buf(),
            name,
            record: StageRecord {
                status: "running".into(),
                config: serde_json::to_value(config).expect("config serializes"),
                inputs: hashes,
                outputs: BTreeMap::new(),
                seeds,
                started_unix_ms: unix_ms(),
                wall_clock_secs: None,
                details: BTreeMap::new(),
            },
            clock: Instant::now(),
        };
        stage.save()?;
        Ok(stage)
    }

    fn save(&self) -> Result<()> {
        let mut manifest = read_manifest(&self.dir)?;
        manifest.stages.insert(self.name.to_string(), self.record.clone());
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_file(&self.dir.join("manifest.json"), text.as_bytes())
    }

    fn detail(&mut self, key: &str, value: impl Serialize) {
        self.record
            .details
            .insert(key.to_string(), serde_json::to_value(value).expect("detail serializes"));
    }

    fn finish(mut self, outputs: &[PathBuf]) -> Result<()> {
        for path in outputs {
            let bytes = fs::read(path).map_err(io_err(path))?;
            self.record.outputs.insert(relative_name(&self.dir, path), content_hash(&bytes));
        }
        self.record.status = "complete".into();
        self.record.wall_clock_secs = Some(self.clock.elapsed().as_secs_f64());
        self.save()
    }
}

fn write_config(dir: &Path, config: &TrainConfig) -> Result<PathBuf> {
    let path = dir.join("config.json");
    write_file(&path, config.to_json().as_bytes())?;
    Ok(path)
}

pub fn cmd_gen_demos(root: &Path, config: &TrainConfig) -> Result<PathBuf> {
    let dir = run_dir(root, config);
    let config_path = write_config(&dir, config)?;
    let mut stage = Stage::begin(&dir, "gen-demos", config, vec![config.seed], &[&config_path])?;
    let demos = training::generate_demos(config).map_err(|source| CliError::Stage { stage: "gen-demos", source })?;
    let path = dir.join("demos.jsonl");
    write_file(&path, guidegate::expert::demos_to_jsonl(&demos).as_bytes())?;
    stage.detail("demo_count", demos.len());
    stage.detail("frames", demos.iter().map(Demonstration::length).sum::<usize>());
    stage.finish(std::slice::from_ref(&path))?;
    log::info!("wrote {} demonstrations to {}", demos.len(), path.display());
    Ok(path)
}

/// Parse a JSONL file line by line; the first bad line aborts with its number.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| CliError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn load_demos(dir: &Path, config: &TrainConfig) -> Result<(PathBuf, Vec<Demonstration>)> {
    let path = dir.join("demos.jsonl");
    read_required(&path, "demonstrations (run gen-demos first)")?;
    let demos: Vec<Demonstration> = read_jsonl(&path)?;
    if let Some((i, d)) = demos.iter().enumerate().find(|(_, d)| d.level != config.level) {
        return Err(CliError::Config(format!(
            "{}:{} holds a {} demonstration but the config asks for {}",
            path.display(),
            i + 1,
            d.level,
            config.level
        )));
    }
    Ok((path, demos))
}

fn episodes(demos: &[Demonstration], stage: &'static str) -> Result<Vec<training::Episode>> {
    training::episodes_from_demos(demos).map_err(|source| CliError::Stage { stage, source })
}

pub fn cmd_pretrain(root: &Path, config: &TrainConfig) -> Result<PathBuf> {
    let dir = run_dir(root, config);
    let (demo_path, demos) = load_demos(&dir, config)?;
    let config_path = write_config(&dir, config)?;
    let mut stage = Stage::begin(&dir, "pretrain", config, vec![config.seed], &[&config_path, &demo_path])?;
    let eps = episodes(&demos, "pretrain")?;
    let outcome = training::pretrain_guide(config, &eps).map_err(|source| CliError::Stage { stage: "pretrain", source })?;
    let ckpt = dir.join("checkpoints").join("guide.ckpt");
    write_file(&ckpt, &outcome.guide().to_bytes())?;
    let mut csv = String::from("epoch,train_loss,val_accuracy,val_success\n");
    for h in &outcome.history {
        csv.push_str(&format!("{},{},{},{}\n", h.epoch, h.train_loss, h.val_accuracy, h.val_success));
    }
    let log_path = dir.join("pretrain.csv");
    write_file(&log_path, csv.as_bytes())?;
    if let Some(last) = outcome.history.last() {
        stage.detail("val_accuracy", last.val_accuracy);
    }
    stage.finish(&[ckpt.clone(), log_path])?;
    Ok(ckpt)
}

fn load_guide(dir: &Path) -> Result<(PathBuf, ParameterStore)> {
    let path = dir.join("checkpoints").join("guide.ckpt");
    let bytes = read_required(&path, "guide checkpoint (run pretrain first)")?;
    let store = ParameterStore::from_bytes(&bytes).map_err(|e| CliError::Corrupt {
        path: path.clone(),
        line: 0,
        message: e.to_string(),
    })?;
    Ok((path, store))
}

pub fn frame_path(dir: &Path, seed: u64, epoch: usize) -> PathBuf {
    dir.join("frames").join(format!("seed_{seed}")).join(format!("epoch_{epoch:03}.jsonl"))
}

pub fn checkpoint_path(dir: &Path, seed: u64, epoch: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("seed_{seed}")).join(format!("epoch_{epoch:03}.ckpt"))
}

fn wants_checkpoint(config: &TrainConfig, epoch: usize) -> bool {
    epoch == 0 || epoch == config.epochs || (config.checkpoint_every > 0 && epoch.is_multiple_of(config.checkpoint_every))
}

/// Train every configured run seed; returns the output directory.
pub fn cmd_train(root: &Path, config: &TrainConfig, mode: TrainMode) -> Result<PathBuf> {
    let run = run_dir(root, config);
    let (demo_path, demos) = load_demos(&run, config)?;
    let guide = if mode.needs_guide() { Some(load_guide(&run)?) } else { None };
    let dir = baseline_dir(&run, mode);
    let config_path = write_config(&dir, config)?;
    let mut inputs = vec![config_path.as_path(), demo_path.as_path()];
    if let Some((p, _)) = &guide {
        inputs.push(p);
    }
    let mut stage = Stage::begin(&dir, "train", config, config.run_seeds(), &inputs)?;
    stage.detail("baseline", mode.name());
    stage.detail("lambda", mode.lambda(config));
    stage.save()?;
    remove_dir_if_present(&dir.join("frames"))?;
    for seed in config.run_seeds() {
        remove_dir_if_present(&dir.join("checkpoints").join(format!("seed_{seed}")))?;
    }
    let eps = episodes(&demos, "train")?;

    let metrics_path = dir.join("metrics.csv");
    let batches_path = dir.join("batches.csv");
    let mut metrics = training::metrics_csv_header();
    let mut batches = String::from("run_seed,epoch,batch,frames,loss,mean_ce,mean_gate,lambda\n");
    let mut outputs = Vec::new();
    for seed in config.run_seeds() {
        let guide_store = guide.as_ref().map(|(_, s)| s);
        training::train_run(config, mode, guide_store, &eps, seed, |report| {
            let sink = |e: CliError| TrainError::Sink(e.to_string());
            let epoch = report.metrics.epoch;
            let mut lines = String::new();
            for f in &report.validation.frames {
                lines.push_str(&f.to_json_line());
                lines.push('\n');
            }
            let fp = frame_path(&dir, seed, epoch);
            write_file(&fp, lines.as_bytes()).map_err(sink)?;
            outputs.push(fp);
            metrics.push_str(&training::metrics_csv_row(seed, report.metrics));
            if let Some(train) = report.train {
                for b in &train.batches {
                    batches.push_str(&format!(
                        "{seed},{},{},{},{},{},{},{}\n",
                        b.epoch, b.batch, b.frames, b.loss, b.mean_ce, b.mean_gate, b.lambda
                    ));
                }
            }
            if wants_checkpoint(config, epoch) {
                let cp = checkpoint_path(&dir, seed, epoch);
                write_file(&cp, &report.model.store.to_bytes()).map_err(sink)?;
                outputs.push(cp);
            }
            // Keep the CSVs current so long runs can be monitored.
            write_file(&metrics_path, metrics.as_bytes()).map_err(sink)?;
            write_file(&batches_path, batches.as_bytes()).map_err(sink)
        })
        .map_err(|source| CliError::Stage { stage: "train", source })?;
    }
    outputs.push(metrics_path);
    outputs.push(batches_path);
    stage.finish(&outputs)?;
    Ok(dir)
}

/// Frame logs of a run directory: epoch -> seed -> path.
fn frame_files(dir: &Path) -> Result<BTreeMap<usize, BTreeMap<u64, PathBuf>>> {
    let root = dir.join("frames");
    let entries = fs::read_dir(&root).map_err(|_| CliError::Missing(format!("no frame logs under {}", root.display())))?;
    let mut out: BTreeMap<usize, BTreeMap<u64, PathBuf>> = BTreeMap::new();
    for seed_dir in entries {
        let seed_dir = seed_dir.map_err(io_err(&root))?.path();
        let Some(seed) = parse_suffix(&seed_dir, "seed_", "") else { continue };
        for f in fs::read_dir(&seed_dir).map_err(io_err(&seed_dir))? {
            let f = f.map_err(io_err(&seed_dir))?.path();
            if let Some(epoch) = parse_suffix(&f, "epoch_", ".jsonl") {
                out.entry(epoch as usize).or_default().insert(seed, f);
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::Missing(format!("no frame logs under {}", root.display())));
    }
    Ok(out)
}

fn parse_suffix(path: &Path, prefix: &str, ext: &str) -> Option<u64> {
    let name = path.file_name()?.to_str()?;
    name.strip_prefix(prefix)?.strip_suffix(ext)?.parse().ok()
}

/// Load every epoch's frames, pooled over run seeds in ascending seed order.
pub fn load_frames(dir: &Path) -> Result<Vec<(usize, Vec<FrameRecord>)>> {
    frame_files(dir)?
        .into_iter()
        .map(|(epoch, seeds)| {
            let mut frames = Vec::new();
            for path in seeds.values() {
                frames.extend(read_jsonl::<FrameRecord>(path)?);
            }
            Ok((epoch, frames))
        })
        .collect()
}

fn analysis_mode(dir: &Path) -> Result<GateMode> {
    let manifest = read_manifest(dir)?;
    let baseline = manifest
        .stages
        .get("train")
        .and_then(|s| s.details.get("baseline"))
        .and_then(|v| v.as_str())
        .unwrap_or("none");
    let mode: TrainMode = baseline.parse().map_err(CliError::Config)?;
    Ok(mode.gate_mode())
}

/// Heatmaps for every epoch with checkpoints, summed over run seeds.
fn heatmaps(dir: &Path, config: &TrainConfig) -> Result<BTreeMap<usize, HeatmapGrid>> {
    let mode = analysis_mode(dir)?;
    let ckpt_root = dir.join("checkpoints");
    let mission = &training::validation_missions(&TrainConfig {
        validation_episodes: 1,
        ..config.clone()
    })[0];
    let mut grids: BTreeMap<usize, HeatmapGrid> = BTreeMap::new();
    for seed in config.run_seeds() {
        let seed_dir = ckpt_root.join(format!("seed_{seed}"));
        let Ok(entries) = fs::read_dir(&seed_dir) else { continue };
        let mut files: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        files.sort();
        for f in files {
            let Some(epoch) = parse_suffix(&f, "epoch_", ".ckpt") else { continue };
            let bytes = fs::read(&f).map_err(io_err(&f))?;
            let corrupt = |message: String| CliError::Corrupt {
                path: f.clone(),
                line: 0,
                message,
            };
            let stored = ParameterStore::from_bytes(&bytes).map_err(|e| corrupt(e.to_string()))?;
            let mut model = training::init_gated_model(config, seed, None).map_err(|e| corrupt(e.to_string()))?;
            let loaded = model.store.load_from(&stored).map_err(|e| corrupt(e.to_string()))?;
            if loaded != model.store.len() {
                return Err(corrupt(format!("{loaded} of {} tensors present", model.store.len())));
            }
            let grid = analysis::build_heatmap(&model, mission, config.heatmap_rollouts, config.seed, mode);
            let acc = grids
                .entry(epoch as usize)
                .or_insert_with(|| HeatmapGrid::new(grid.size));
            for i in 0..grid.count.len() {
                acc.count[i] += grid.count[i];
                acc.gate_sum[i] += grid.gate_sum[i];
            }
        }
    }
    Ok(grids)
}

pub const ANALYSIS_FILES: [&str; 5] = [
    "by_action.csv",
    "by_message.csv",
    "by_obstype.csv",
    "quantiles.csv",
    "counterfactual.csv",
];

pub fn cmd_analyze(dir: &Path) -> Result<PathBuf> {
    let config_path = dir.join("config.json");
    let text = read_required(&config_path, "config.json")?;
    let config = TrainConfig::from_json(&String::from_utf8_lossy(&text)).map_err(|e| CliError::Config(e.to_string()))?;
    let epochs = load_frames(dir)?;
    let views: Vec<EpochFrames> = epochs.iter().map(|(e, f)| (*e, f.as_slice())).collect();
    let out = dir.join("analysis");
    let tables = [
        analysis::by_action_csv(&views),
        analysis::by_message_csv(&views),
        analysis::by_obstype_csv(&views),
        analysis::quantiles_csv(&views),
        analysis::counterfactual_csv(&views),
    ];
    let mut written = BTreeSet::new();
    for (name, body) in ANALYSIS_FILES.iter().zip(tables) {
        write_file(&out.join(name), body.as_bytes())?;
        written.insert(name.to_string());
    }
    for (epoch, grid) in heatmaps(dir, &config)? {
        let name = format!("heatmap_{epoch:03}.csv");
        write_file(&out.join(&name), grid.to_csv().as_bytes())?;
        written.insert(name);
    }
    // Drop heatmaps left over from an earlier training run.
    if let Ok(entries) = fs::read_dir(&out) {
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().into_owned();
            if name.starts_with("heatmap_") && !written.contains(&name) {
                fs::remove_file(e.path()).map_err(io_err(&e.path()))?;
            }
        }
    }
    Ok(out)
}

pub fn cmd_pipeline(root: &Path, config: &TrainConfig, baselines: bool) -> Result<PathBuf> {
    cmd_gen_demos(root, config)?;
    cmd_pretrain(root, config)?;
    let dir = cmd_train(root, config, TrainMode::Gated)?;
    cmd_analyze(&dir)?;
    if baselines {
        for mode in [TrainMode::Alone, TrainMode::Guided] {
            let b = cmd_train(root, config, mode)?;
            cmd_analyze(&b)?;
        }
    }
    Ok(dir)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        // Only fails if a pool already exists (tests calling run twice).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let root = runs_root();
    match cli.command {
        Command::GenDemos(args) => cmd_gen_demos(&root, &load_config(&args)?).map(drop),
        Command::Pretrain(args) => cmd_pretrain(&root, &load_config(&args)?).map(drop),
        Command::Train { args, baseline } => cmd_train(&root, &load_config(&args)?, baseline).map(drop),
        Command::Analyze { run_dir } => cmd_analyze(&run_dir).map(drop),
        Command::Pipeline { args, baselines } => cmd_pipeline(&root, &load_config(&args)?, baselines).map(drop),
    }
}

/// Print `err` and return the process exit code.
pub fn report(err: &CliError) -> i32 {
    let mut stderr = std::io::stderr();
    let _ = writeln!(stderr, "error: {err}");
    err.exit_code()
}
