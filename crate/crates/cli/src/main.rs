//! `csmc`: encode, decode, train and evaluate block compressive-sensing
//! video models.
//!
//! Failures print one JSON object `{"error": {"kind": ..., "message": ...}}`
//! on stderr and exit with status 1.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use csmc_core::checkpoint::{self, Checkpoint};
use csmc_core::codec::{encode_video, read_measurements, write_measurements, EncodedVideo};
use csmc_core::experiments::{
    ablate_stages, dataset_from_videos, desk_videos, eval_clip, evaluate, noise_sweep, train_model,
    ExperimentConfig,
};
use csmc_core::sensing::make_matrix;
use csmc_core::training::{fit_normalization, pretrain_prelim, train, EpochLog, TrainConfig};
use csmc_core::video::{make_synthetic, read_gsv, write_gsv};
use csmc_core::{Dataset64, McMode, Model64, RawVideo, SensingConfig, SyntheticKind};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "csmc",
    version,
    about = "Block compressive-sensing video codec"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic clip.
    MakeSynthetic(MakeSynthetic),
    /// Measure every block of a video.
    Encode(Encode),
    /// Reconstruct a video from a measurements file.
    Decode(Decode),
    /// Pre-train the preliminary CNN and write an initial checkpoint.
    Pretrain(TrainArgs),
    /// Train a model end to end.
    Train(TrainArgs),
    /// Per-frame and mean PSNR/SSIM of a decoded video.
    Eval(Eval),
    /// Train one model per stage count and compare them.
    AblateStages(Ablate),
    /// Decode one clip at several measurement SNRs.
    NoiseSweep(NoiseSweep),
}

#[derive(Args)]
struct MakeSynthetic {
    #[arg(long, default_value = "translate")]
    kind: SyntheticKind,
    /// `WxH` or a single side length.
    #[arg(long, default_value = "160")]
    size: String,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pixels per frame as `dx,dy`.
    #[arg(long, default_value = "2,0", allow_hyphen_values = true)]
    velocity: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Encode {
    /// Take the measurement matrix from this checkpoint.
    #[arg(long, conflicts_with = "sensing", required_unless_present = "sensing")]
    model: Option<PathBuf>,
    /// Sensing configuration JSON; the matrix is built from `--matrix-seed`.
    #[arg(long)]
    sensing: Option<PathBuf>,
    #[arg(long, default_value_t = 0, requires = "sensing")]
    matrix_seed: u64,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
}

#[derive(Args)]
struct Decode {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the mode stored in the model.
    #[arg(long)]
    mc_mode: Option<McMode>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Training clips; without them the synthetic desk corpus from the
    /// config is generated.
    #[arg(long, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Line-delimited JSON training log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5")]
    stages: Vec<usize>,
    #[arg(long, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct NoiseSweep {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "20,30,40,50")]
    snr_list: Vec<f64>,
    /// Clip to encode; defaults to the standard held-out translating clip.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    #[arg(long)]
    mc_mode: Option<McMode>,
    #[arg(long)]
    report: PathBuf,
}

fn parse_pair<T: std::str::FromStr>(s: &str, sep: char) -> Result<(T, T)>
where
    T::Err: std::fmt::Display,
{
    let parse = |p: &str| {
        p.trim()
            .parse::<T>()
            .map_err(|e| anyhow::anyhow!("bad value {p:?}: {e}"))
    };
    match s.split_once(sep) {
        Some((a, b)) => Ok((parse(a)?, parse(b)?)),
        None => bail!("expected two values separated by {sep:?}, got {s:?}"),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(csmc_core::Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(csmc_core::Error::from)?;
    fs::write(path, text + "\n").map_err(csmc_core::Error::from)?;
    Ok(())
}

fn load_video(path: &Path) -> Result<RawVideo> {
    read_gsv(path).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> Result<Checkpoint<f64>> {
    checkpoint::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn training_data(config: &ExperimentConfig, paths: &[PathBuf]) -> Result<Dataset64> {
    let videos: Vec<RawVideo> = if paths.is_empty() {
        desk_videos(&config.data)?
    } else {
        paths.iter().map(|p| load_video(p)).collect::<Result<_>>()?
    };
    Ok(dataset_from_videos(&videos, &config.dataset_config())?)
}

fn make_synthetic_cmd(a: MakeSynthetic) -> Result<()> {
    let (w, h) = match a.size.split_once('x') {
        Some(_) => parse_pair::<usize>(&a.size, 'x')?,
        None => {
            let s = a.size.parse::<usize>().context("size")?;
            (s, s)
        }
    };
    let velocity = parse_pair::<isize>(&a.velocity, ',')?;
    let video = make_synthetic(a.kind, w, h, a.frames, velocity, a.seed)?;
    write_gsv(&a.out, &video)?;
    Ok(())
}

fn encode_cmd(a: Encode) -> Result<()> {
    let video = load_video(&a.input)?;
    let encoded = match (&a.model, &a.sensing) {
        (Some(path), _) => {
            let model = load_model(path)?.model;
            encode_video(
                &model.phi,
                model.block_size(),
                &video,
                a.snr_db,
                a.noise_seed,
            )?
        }
        (None, Some(path)) => {
            let sensing: SensingConfig = read_json(path)?;
            let phi = make_matrix::<f64>(&sensing, a.matrix_seed)?;
            let snr = a.snr_db.or(sensing.noise_snr_db);
            encode_video(&phi, sensing.block_size, &video, snr, a.noise_seed)?
        }
        (None, None) => bail!("either --model or --sensing is required"),
    };
    write_measurements(&a.out, &encoded)?;
    Ok(())
}

fn decode_cmd(a: Decode) -> Result<()> {
    let model = load_model(&a.model)?.model;
    let encoded: EncodedVideo<f64> =
        read_measurements(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mode = a.mc_mode.unwrap_or(model.config.mc_mode);
    write_gsv(&a.out, &encoded.decode(&model, mode)?)?;
    Ok(())
}

struct EpochWriter {
    log: Option<BufWriter<File>>,
    out: PathBuf,
    train: TrainConfig,
}

impl EpochWriter {
    fn new(log: Option<&Path>, out: &Path, train: &TrainConfig) -> Result<Self> {
        let log = log
            .map(File::create)
            .transpose()
            .map_err(csmc_core::Error::from)?
            .map(BufWriter::new);
        Ok(Self {
            log,
            out: out.to_path_buf(),
            train: train.clone(),
        })
    }

    /// Appends the epoch record and rewrites the checkpoint.
    fn record(
        &mut self,
        model: &Model64,
        adam: &csmc_core::AdamState<f64>,
        history: &[EpochLog],
    ) -> csmc_core::Result<()> {
        let last = history.last().expect("epoch logged");
        if let Some(log) = &mut self.log {
            serde_json::to_writer(&mut *log, last)?;
            log.write_all(b"\n")?;
            log.flush()?;
        }
        checkpoint::save(
            &self.out,
            &Checkpoint {
                model: model.clone(),
                adam: Some(adam.clone()),
                train_config: Some(self.train.clone()),
                epoch: last.epoch + 1,
                lr: last.lr,
                loss_history: history.to_vec(),
            },
        )
    }
}

fn pretrain_cmd(a: TrainArgs) -> Result<()> {
    let config: ExperimentConfig = read_json(&a.config)?;
    let data = training_data(&config, &a.data)?;
    let mut model = match &a.init {
        Some(p) => load_model(p)?.model,
        None => Model64::new(config.model_config())?,
    };
    fit_normalization(&mut model, &data)?;
    let pre = TrainConfig {
        epochs: config.pretrain_epochs.max(1),
        ..config.train.clone()
    };
    let report = pretrain_prelim(&mut model, &data, &pre)?;
    if let Some(path) = &a.log {
        let mut f = BufWriter::new(File::create(path).map_err(csmc_core::Error::from)?);
        for (epoch, loss) in report.epoch_losses.iter().enumerate() {
            writeln!(f, "{}", serde_json::json!({ "epoch": epoch, "mse": loss }))
                .map_err(csmc_core::Error::from)?;
        }
    }
    let mut ckpt = Checkpoint::from_model(model);
    ckpt.train_config = Some(pre);
    checkpoint::save(&a.out, &ckpt)?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config: ExperimentConfig = read_json(&a.config)?;
    let data = training_data(&config, &a.data)?;
    let mut writer = EpochWriter::new(a.log.as_deref(), &a.out, &config.train)?;
    match &a.init {
        Some(p) => {
            let mut model = load_model(p)?.model;
            train(&mut model, &data, &config.train, |m, s, h| {
                writer.record(m, s, h)
            })?;
        }
        None => {
            train_model(&config, &data, |m, s, h| writer.record(m, s, h))?;
        }
    }
    Ok(())
}

fn eval_cmd(a: Eval) -> Result<()> {
    let report = evaluate(&load_video(&a.reference)?, &load_video(&a.test)?)?;
    write_json(&a.report, &report)
}

fn ablate_cmd(a: Ablate) -> Result<()> {
    let config: ExperimentConfig = read_json(&a.config)?;
    let data = training_data(&config, &a.data)?;
    let report = ablate_stages(&config, &data, &a.stages)?;
    write_json(&a.report, &report)
}

fn noise_sweep_cmd(a: NoiseSweep) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let video = match &a.input {
        Some(p) => load_video(p)?,
        None => eval_clip(&ExperimentConfig::default().eval)?,
    };
    let mode = a.mc_mode.unwrap_or(ckpt.model.config.mc_mode);
    let report = noise_sweep(&ckpt.model, &video, &a.snr_list, a.noise_seed, mode)?;
    write_json(&a.report, &report)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeSynthetic(a) => make_synthetic_cmd(a),
        Command::Encode(a) => encode_cmd(a),
        Command::Decode(a) => decode_cmd(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::AblateStages(a) => ablate_cmd(a),
        Command::NoiseSweep(a) => noise_sweep_cmd(a),
    }
}

fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<csmc_core::Error>())
        .map_or("usage", csmc_core::Error::kind);
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain().map(ToString::to_string) {
        if !parts.last().is_some_and(|prev| prev.contains(&cause)) {
            parts.push(cause);
        }
    }
    serde_json::json!({ "error": { "kind": kind, "message": parts.join(": ") } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ");
            eprintln!(
                "{}",
                serde_json::json!({ "error": { "kind": "usage", "message": first } })
            );
            return ExitCode::FAILURE;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
