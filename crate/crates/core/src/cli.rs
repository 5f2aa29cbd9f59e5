//! Command-line front end.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::assembler::{assemble, read_sequences, write_sequences, AssemblyError, InputSequence, SequenceFile};
use crate::clustering::cluster_video;
use crate::config::{RunConfig, SEED_ENV};
use crate::evaluation::{attention_svg, evaluate, localize, score_videos, EvalError, ScoredVideo};
use crate::model::{fit, fit_sequences, load_checkpoint, save_checkpoint, MintimeModel, ModelError, ModelInput};
use crate::synth::{generate, SynthError};
use crate::trackdata::{Label, load_manifest, load_raw_manifest, ratio_stats, save_manifest, DataError, TensorDirSource};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => CliError::Config(m),
            ModelError::NonFinite { .. } | ModelError::Numerics(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AssemblyError> for CliError {
    fn from(e: AssemblyError) -> Self {
        match e {
            AssemblyError::EmptySequence | AssemblyError::NoIdentities => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(m) => CliError::Config(m),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mintime", version, about = "Multi-identity video deepfake detection pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Common {
    /// key=value config file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Seed; falls back to the config file, then MINTIME_SEED
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Print the resolved configuration and exit
    #[arg(long, global = true)]
    pub dump_config: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset (manifest, raw detections, crops)
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster raw detections into identity tracks
    Cluster {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assemble fixed-length sequences from a track manifest
    Assemble {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Crop root (defaults to the manifest's directory)
        #[arg(long)]
        crops: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
        /// Use the inference identity cap instead of the training one
        #[arg(long)]
        inference: bool,
    },
    /// Train a model from a manifest or a sequence file
    Train {
        #[command(flatten)]
        input: DataInput,
        /// Checkpoint directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Score videos; writes one JSON line per video
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        input: DataInput,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics report and per-video localization
    Eval {
        /// Scores written by `infer`
        #[arg(long, conflicts_with = "checkpoint")]
        scores: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        input: DataInput,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-video localization JSON
        #[arg(long)]
        localization: Option<PathBuf>,
    },
    /// Face-frame area ratio statistics of a manifest
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-slot attention histograms as SVG
    Plot {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Default)]
pub struct DataInput {
    #[arg(long, conflicts_with = "sequences")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub sequences: Option<PathBuf>,
    #[arg(long)]
    pub crops: Option<PathBuf>,
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// Writes through a temporary sibling so a failed run leaves no partial file.
fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

pub fn resolve_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    let mut seeded = false;
    if let Some(path) = &common.config {
        require_file(path, "config file")?;
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        seeded |= text.lines().any(|l| l.split_once('=').is_some_and(|(k, _)| k.trim() == "seed"));
        cfg.apply_text(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        seeded |= k.trim() == "seed";
        cfg.set(k.trim(), v.trim()).map_err(CliError::Config)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    } else if !seeded {
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}=`{v}` is not an integer")))?;
        }
    }
    cfg.sync_seeds();
    cfg.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
    cfg.synth.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn crop_root(explicit: &Option<PathBuf>, data_file: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        data_file
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    })
}

enum Loaded {
    Videos(Vec<crate::trackdata::VideoRecord>, TensorDirSource),
    Sequences(Vec<InputSequence>, TensorDirSource),
}

fn load_input(input: &DataInput) -> Result<Loaded, CliError> {
    match (&input.manifest, &input.sequences) {
        (Some(m), None) => {
            require_file(m, "manifest")?;
            let videos = load_manifest(m)?;
            Ok(Loaded::Videos(videos, TensorDirSource::new(crop_root(&input.crops, m))))
        }
        (None, Some(s)) => {
            require_file(s, "sequence file")?;
            let f = fs::File::open(s).map_err(|e| io_err(s, e))?;
            let file = read_sequences(&mut BufReader::new(f)).map_err(|e| CliError::Data(format!("{}: {e}", s.display())))?;
            let root = input.crops.clone().unwrap_or_else(|| PathBuf::from(&file.source));
            Ok(Loaded::Sequences(file.sequences, TensorDirSource::new(root)))
        }
        _ => Err(CliError::Config("exactly one of --manifest or --sequences is required".into())),
    }
}

fn score_sequences(
    model: &MintimeModel<f64>,
    seqs: &[InputSequence],
    source: &TensorDirSource,
) -> Result<Vec<ScoredVideo>, CliError> {
    use rayon::prelude::*;
    seqs.par_iter()
        .map(|seq| {
            let input = ModelInput::from_sequence(seq, source, &model.config)?;
            let out = model.forward(&input)?;
            let score = out.probability();
            if !score.is_finite() {
                return Err(CliError::Numeric(format!("non-finite score for {}", seq.video_id)));
            }
            Ok(ScoredVideo {
                video_id: seq.video_id.clone(),
                score,
                label: seq.label,
                class: match seq.label {
                    Some(Label::Fake) => "fake".into(),
                    Some(Label::Pristine) => "pristine".into(),
                    None => "unlabelled".into(),
                },
                slot_attention: out.attention.slot_attention,
                slot_identity: out.attention.slot_identity,
                slot_frame: seq.slots.iter().map(|s| s.as_ref().map(|f| f.frame_index)).collect(),
            })
        })
        .collect()
}

fn score_input(model: &MintimeModel<f64>, cfg: &RunConfig, input: &DataInput) -> Result<Vec<ScoredVideo>, CliError> {
    Ok(match load_input(input)? {
        Loaded::Videos(videos, src) => score_videos(model, &videos, &cfg.inference_assembly(), &src)?,
        Loaded::Sequences(seqs, src) => score_sequences(model, &seqs, &src)?,
    })
}

fn load_model(path: &Path) -> Result<MintimeModel<f64>, CliError> {
    if !path.join(crate::model::CONFIG_FILE).is_file() {
        return Err(CliError::Config(format!("{} is not a checkpoint directory", path.display())));
    }
    Ok(load_checkpoint::<f64>(path)?.0)
}

fn read_scores(path: &Path) -> Result<Vec<ScoredVideo>, CliError> {
    require_file(path, "scores file")?;
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn scores_jsonl(scored: &[ScoredVideo]) -> String {
    scored
        .iter()
        .map(|s| serde_json::to_string(s).expect("serializable") + "\n")
        .collect()
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.common)?;
    if cli.common.dump_config {
        print!("{}", cfg.dump());
        return Ok(());
    }
    if let Some(jobs) = cli.common.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        // fails only if a pool already exists (e.g. repeated in-process runs)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    log::info!("seed {}", cfg.seed);
    for (k, v) in cfg.pairs() {
        log::debug!("{k}={v}");
    }
    match cli.command {
        Command::Synth { out } => {
            let data = generate(&cfg.synth)?;
            data.write(&out)?;
            log::info!("wrote {} videos to {}", data.videos.len(), out.display());
        }
        Command::Cluster { input, out } => {
            require_file(&input, "raw manifest")?;
            let raw = load_raw_manifest(&input)?;
            let mut videos = Vec::with_capacity(raw.len());
            for r in &raw {
                if let Some(v) = cluster_video(r, &cfg.cluster).map_err(|e| CliError::Data(e.to_string()))? {
                    videos.push(v);
                }
            }
            let tmp = out.with_extension("partial");
            save_manifest(&tmp, &videos)?;
            fs::rename(&tmp, &out).map_err(|e| io_err(&out, e))?;
        }
        Command::Assemble {
            manifest,
            out,
            crops,
            epoch,
            inference,
        } => {
            require_file(&manifest, "manifest")?;
            let videos = load_manifest(&manifest)?;
            let asm = if inference { cfg.inference_assembly() } else { cfg.assemble.clone() };
            let sequences = videos
                .iter()
                .map(|v| assemble(v, &asm, epoch))
                .collect::<Result<Vec<_>, _>>()?;
            let root = crop_root(&crops, &manifest);
            let root = fs::canonicalize(&root).unwrap_or(root);
            let file = SequenceFile {
                sequence_length: asm.sequence_length,
                source: root.to_string_lossy().into_owned(),
                sequences,
            };
            let mut buf = Vec::new();
            write_sequences(&mut buf, &file).map_err(|e| CliError::Data(e.to_string()))?;
            write_file(&out, &buf)?;
        }
        Command::Train { input, out } => {
            let loaded = load_input(&input)?;
            let mut model = MintimeModel::<f64>::new(cfg.model.clone(), cfg.seed)?;
            log::info!("model has {} parameters", model.parameter_count());
            match &loaded {
                Loaded::Videos(v, src) => fit(&mut model, v, &cfg.assemble, src, &cfg.train, |_| {})?,
                Loaded::Sequences(s, src) => fit_sequences(&mut model, s, src, &cfg.train, |_| {})?,
            };
            let extra: Vec<(String, String)> = cfg.pairs().into_iter().filter(|(k, _)| !k.starts_with("model.")).collect();
            let tmp = out.with_extension("partial");
            if tmp.exists() {
                fs::remove_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;
            }
            save_checkpoint(&tmp, &model, &extra)?;
            if out.exists() {
                fs::remove_dir_all(&out).map_err(|e| io_err(&out, e))?;
            }
            fs::rename(&tmp, &out).map_err(|e| io_err(&out, e))?;
        }
        Command::Infer { checkpoint, input, out } => {
            let model = load_model(&checkpoint)?;
            let scored = score_input(&model, &cfg, &input)?;
            emit(out.as_deref(), &scores_jsonl(&scored))?;
        }
        Command::Eval {
            scores,
            checkpoint,
            input,
            out,
            localization,
        } => {
            let scored = match (scores, checkpoint) {
                (Some(s), None) => read_scores(&s)?,
                (None, Some(c)) => score_input(&load_model(&c)?, &cfg, &input)?,
                _ => return Err(CliError::Config("eval needs --scores or --checkpoint".into())),
            };
            let report = evaluate(&scored, cfg.threshold)?;
            if let Some(path) = localization {
                let locs: Vec<_> = scored.iter().filter_map(|s| localize(s).ok()).collect();
                write_file(&path, json(&locs).as_bytes())?;
            }
            emit(out.as_deref(), &json(&report))?;
        }
        Command::Stats { manifest, out } => {
            require_file(&manifest, "manifest")?;
            let videos = load_manifest(&manifest)?;
            let stats = ratio_stats(&videos)?;
            #[derive(Serialize)]
            struct Summary {
                videos: usize,
                tracks: usize,
                faces: usize,
                area_ratio_percent: crate::trackdata::RatioStats,
            }
            let summary = Summary {
                videos: videos.len(),
                tracks: videos.iter().map(|v| v.tracks.len()).sum(),
                faces: stats.count,
                area_ratio_percent: stats,
            };
            emit(out.as_deref(), &json(&summary))?;
        }
        Command::Plot { scores, out } => {
            let scored = read_scores(&scores)?;
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            for s in &scored {
                let name: String = s
                    .video_id
                    .chars()
                    .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                    .collect();
                write_file(&out.join(format!("{name}.svg")), attention_svg(s).as_bytes())?;
            }
        }
    }
    Ok(())
}

/// Parses arguments, runs, and maps the outcome to an exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            EXIT_OK
        }
        Err(e) => {
            eprintln!("mintime: {e}");
            e.code()
        }
    }
}
