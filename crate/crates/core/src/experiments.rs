//! Evaluation reports, the stage ablation, the noise sweep and the desk
//! dataset used by both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::encode_video;
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::metrics::{psnr, ssim};
use crate::network::{McMode, Model, ModelConfig};
use crate::scalar::Scalar;
use crate::training::{
    fit_normalization, pretrain_prelim, train, EpochLog, TrainConfig, TrainReport,
};
use crate::video::{
    build_dataset, make_synthetic, BlockDataset, DatasetConfig, RawVideo, SyntheticKind,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Per-frame and mean PSNR/SSIM of `test` against `reference`.
pub fn evaluate(reference: &RawVideo, test: &RawVideo) -> Result<EvalReport> {
    if (reference.width, reference.height, reference.frames)
        != (test.width, test.height, test.frames)
    {
        return Err(Error::dim(
            "video geometry",
            format!(
                "{}x{}x{}",
                reference.width, reference.height, reference.frames
            ),
            format!("{}x{}x{}", test.width, test.height, test.frames),
        ));
    }
    let frames = (0..reference.frames)
        .map(|f| {
            let a: Frame<f64> = reference.frame(f);
            let b: Frame<f64> = test.frame(f);
            Ok(FrameMetrics {
                frame: f,
                psnr: psnr(&a, &b)?,
                ssim: ssim(&a, &b)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = frames.len().max(1) as f64;
    Ok(EvalReport {
        mean_psnr: frames.iter().map(|m| m.psnr).sum::<f64>() / n,
        mean_ssim: frames.iter().map(|m| m.ssim).sum::<f64>() / n,
        frames,
    })
}

/// Encodes `video`, decodes it with `model` and scores the result.
pub fn round_trip<T: Scalar>(
    model: &Model<T>,
    video: &RawVideo,
    mode: McMode,
    snr_db: Option<f64>,
    noise_seed: u64,
) -> Result<(RawVideo, EvalReport)> {
    let encoded = encode_video(&model.phi, model.block_size(), video, snr_db, noise_seed)?;
    let decoded = encoded.decode(model, mode)?;
    let report = evaluate(video, &decoded)?;
    Ok((decoded, report))
}

/// Recipe for the seeded synthetic training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskDataConfig {
    pub videos: usize,
    pub frames: usize,
    /// Side of the square clips.
    pub size: usize,
    /// Largest velocity component in pixels per frame.
    pub max_speed: usize,
    /// Fraction of clips that are bouncing sprites rather than pans.
    pub bounce_fraction: f64,
    pub seed: u64,
}

impl Default for DeskDataConfig {
    fn default() -> Self {
        // 20 clips x 10 referenced frames x 100 blocks = 20k pairs.
        Self {
            videos: 20,
            frames: 11,
            size: 160,
            max_speed: 4,
            bounce_fraction: 0.25,
            seed: 2024,
        }
    }
}

/// Generates the desk corpus. Velocities are drawn per clip.
pub fn desk_videos(config: &DeskDataConfig) -> Result<Vec<RawVideo>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let s = config.max_speed as i64;
    (0..config.videos)
        .map(|_| {
            let bounce = rng.random_bool(config.bounce_fraction.clamp(0.0, 1.0));
            let kind = if bounce {
                SyntheticKind::Bounce
            } else {
                SyntheticKind::Translate
            };
            let v = (
                rng.random_range(-s..=s) as isize,
                rng.random_range(-s..=s) as isize,
            );
            let seed = rng.random::<u64>();
            make_synthetic(kind, config.size, config.size, config.frames, v, seed)
        })
        .collect()
}

/// Tiles a list of videos into one dataset, tagging samples by list index.
pub fn dataset_from_videos<T: Scalar>(
    videos: &[RawVideo],
    config: &DatasetConfig,
) -> Result<BlockDataset<T>> {
    let mut data = BlockDataset::default();
    for (i, v) in videos.iter().enumerate() {
        data.extend(build_dataset(v, config, i)?);
    }
    Ok(data)
}

/// Full recipe for a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Pre-training epochs for the preliminary CNN; 0 skips it.
    #[serde(default)]
    pub pretrain_epochs: usize,
    #[serde(default)]
    pub data: DeskDataConfig,
    /// Centre crop applied when tiling clips; `None` keeps full frames.
    #[serde(default = "default_crop")]
    pub crop: Option<usize>,
    /// Held-out evaluation clip.
    #[serde(default)]
    pub eval: EvalClipConfig,
}

fn default_crop() -> Option<usize> {
    Some(160)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pretrain_epochs: 0,
            data: DeskDataConfig::default(),
            crop: default_crop(),
            eval: EvalClipConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            block_size: self.model.sensing.block_size,
            window: self.model.window,
            crop: self.crop,
        }
    }

    /// Model configuration with the stage count taken from the training
    /// recipe.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            stages: self.train.stage_count,
            ..self.model.clone()
        }
    }
}

/// A translating clip kept out of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalClipConfig {
    pub size: usize,
    pub frames: usize,
    pub velocity: (isize, isize),
    pub seed: u64,
}

impl Default for EvalClipConfig {
    fn default() -> Self {
        Self {
            size: 96,
            frames: 6,
            velocity: (2, 2),
            seed: 777_000,
        }
    }
}

pub fn eval_clip(config: &EvalClipConfig) -> Result<RawVideo> {
    make_synthetic(
        SyntheticKind::Translate,
        config.size,
        config.size,
        config.frames,
        config.velocity,
        config.seed,
    )
}

/// A trained model and its history.
#[derive(Clone, Debug)]
pub struct TrainedModel<T> {
    pub model: Model<T>,
    pub report: TrainReport<T>,
    pub pretrain_losses: Vec<f64>,
}

/// Builds, normalizes, optionally pre-trains and trains a model.
pub fn train_model<T: Scalar>(
    config: &ExperimentConfig,
    data: &BlockDataset<T>,
    on_epoch: impl FnMut(&Model<T>, &crate::training::AdamState<T>, &[EpochLog]) -> Result<()>,
) -> Result<TrainedModel<T>> {
    let mut model = Model::new(config.model_config())?;
    fit_normalization(&mut model, data)?;
    let pretrain_losses = if config.pretrain_epochs > 0 {
        let pre = TrainConfig {
            epochs: config.pretrain_epochs,
            ..config.train.clone()
        };
        pretrain_prelim(&mut model, data, &pre)?.epoch_losses
    } else {
        Vec::new()
    };
    let report = train(&mut model, data, &config.train, on_epoch)?;
    Ok(TrainedModel {
        model,
        report,
        pretrain_losses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub stages: usize,
    pub cr: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub final_l_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub mc_mode: McMode,
    pub rows: Vec<AblationRow>,
}

/// Trains one model per stage count on the same data and scores each on the
/// evaluation clip.
pub fn ablate_stages<T: Scalar>(
    config: &ExperimentConfig,
    data: &BlockDataset<T>,
    stage_counts: &[usize],
) -> Result<AblationReport> {
    if stage_counts.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one stage count".into(),
        ));
    }
    let clip = eval_clip(&config.eval)?;
    let mode = config.model.mc_mode;
    let mut rows = Vec::with_capacity(stage_counts.len());
    for &stages in stage_counts {
        let mut cfg = config.clone();
        cfg.train.stage_count = stages;
        let trained = train_model(&cfg, data, |_, _, _| Ok(()))?;
        let (_, report) = round_trip(&trained.model, &clip, mode, None, 0)?;
        rows.push(AblationRow {
            stages,
            cr: config.model.sensing.compression_factor,
            psnr: report.mean_psnr,
            ssim: report.mean_ssim,
            final_l_err: trained.report.last.err,
        });
    }
    Ok(AblationReport {
        mc_mode: mode,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    /// `None` is the noiseless baseline.
    pub snr_db: Option<f64>,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub mc_mode: McMode,
    pub rows: Vec<NoiseRow>,
}

/// Decodes `video` at each SNR plus a noiseless baseline (first row).
pub fn noise_sweep<T: Scalar>(
    model: &Model<T>,
    video: &RawVideo,
    snr_list: &[f64],
    noise_seed: u64,
    mode: McMode,
) -> Result<NoiseReport> {
    let mut rows = Vec::with_capacity(snr_list.len() + 1);
    for snr in std::iter::once(None).chain(snr_list.iter().map(|&s| Some(s))) {
        let (_, report) = round_trip(model, video, mode, snr, noise_seed)?;
        rows.push(NoiseRow {
            snr_db: snr,
            psnr: report.mean_psnr,
            ssim: report.mean_ssim,
        });
    }
    Ok(NoiseReport {
        mc_mode: mode,
        rows,
    })
}
