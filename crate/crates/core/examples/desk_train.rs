//! Trains a model on the synthetic desk corpus and compares decoding modes
//! on the held-out clip. Usage: `desk_train [config.json]`.

use std::time::Instant;

use csmc_core::experiments::{
    dataset_from_videos, desk_videos, eval_clip, round_trip, train_model, ExperimentConfig,
};
use csmc_core::{Dataset64, McMode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config: ExperimentConfig = match std::env::args().nth(1) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    let start = Instant::now();
    let videos = desk_videos(&config.data)?;
    let data: Dataset64 = dataset_from_videos(&videos, &config.dataset_config())?;
    println!(
        "{} samples ({:.1}s)",
        data.len(),
        start.elapsed().as_secs_f64()
    );
    let trained = train_model(&config, &data, |_, _, log| {
        let e = log.last().expect("epoch logged");
        println!(
            "epoch {} lr {:.0e} L_err {:.4} L_mc {:.4} ({:.0}s)",
            e.epoch,
            e.lr,
            e.l_err,
            e.l_mc,
            start.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    println!("pretrain losses {:?}", trained.pretrain_losses);
    println!(
        "probe L_err {:.4} -> {:.4}",
        trained.report.initial.err, trained.report.last.err
    );
    let clip = eval_clip(&config.eval)?;
    for mode in [McMode::Learned, McMode::Lsq, McMode::Off] {
        let (_, r) = round_trip(&trained.model, &clip, mode, None, 0)?;
        let per: Vec<String> = r.frames.iter().map(|f| format!("{:.2}", f.psnr)).collect();
        println!(
            "{mode:>8}: PSNR {:.3} SSIM {:.4} [{}]",
            r.mean_psnr,
            r.mean_ssim,
            per.join(" ")
        );
    }
    let gammas: Vec<f64> = trained.model.stages.iter().map(|s| s.gamma()).collect();
    println!("gammas {gammas:?}");
    println!("total {:.0}s", start.elapsed().as_secs_f64());
    Ok(())
}
