//! Measures forward/backward throughput of the default architecture, in
//! total and per component.

use std::time::Instant;

use csmc_core::experiments::{dataset_from_videos, desk_videos, DeskDataConfig};
use csmc_core::mh::gather_hypotheses;
use csmc_core::sensing::measure;
use csmc_core::training::{fit_normalization, loss_and_grad};
use csmc_core::video::DatasetConfig;
use csmc_core::{Dataset64, McMode, Model64, ModelConfig};

fn time<R>(label: &str, reps: usize, mut f: impl FnMut() -> R) {
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(f());
    }
    println!(
        "{label:>20}: {:8.3} ms",
        t.elapsed().as_secs_f64() * 1e3 / reps as f64
    );
}

fn main() -> csmc_core::Result<()> {
    let videos = desk_videos(&DeskDataConfig {
        videos: 1,
        frames: 2,
        ..DeskDataConfig::default()
    })?;
    let data: Dataset64 = dataset_from_videos(&videos, &DatasetConfig::default())?;
    let mut model = Model64::new(ModelConfig::default())?;
    fit_normalization(&mut model, &data)?;
    let batch: Vec<_> = data.samples[100..132].to_vec();
    let s = &batch[0];
    let rp = s.reference.as_ref().expect("frame 1 sample");
    let y = measure(&model.phi, &s.x)?;
    let hyp = gather_hypotheses(&rp.patch, rp.pos, 16, &model.config.window)?;
    let stage = &model.stages[0];

    time("gather_hypotheses", 200, || {
        gather_hypotheses(&rp.patch, rp.pos, 16, &model.config.window)
    });
    time("prelim forward", 50, || stage.prelim.forward(&y).unwrap());
    let pt = stage.prelim.forward(&y)?;
    time("prelim backward", 50, || {
        stage.prelim.backward(&pt, &s.x).unwrap()
    });
    time("residual forward", 50, || {
        stage.residual.forward(&y).unwrap()
    });
    let rt = stage.residual.forward(&y)?;
    time("residual backward", 50, || {
        stage.residual.backward(&rt, &s.x).unwrap()
    });
    time("mc head forward", 200, || {
        stage.mc_head.forward(&hyp, &s.x).unwrap()
    });
    let mt = stage.mc_head.forward(&hyp, &s.x)?;
    time("mc head backward", 200, || {
        stage.mc_head.backward(&hyp, &mt, &s.x).unwrap()
    });
    time("model forward", 20, || {
        model
            .forward_block(&y, Some(&hyp), McMode::Learned)
            .unwrap()
    });
    let bt = model.forward_block(&y, Some(&hyp), McMode::Learned)?;
    time("model backward", 20, || {
        model
            .backward_block(Some(&hyp), &bt, &s.x, 0.1, McMode::Learned)
            .unwrap()
    });

    let t = Instant::now();
    let reps = 3;
    for _ in 0..reps {
        loss_and_grad(&model, &batch, 0.5)?;
    }
    let per = t.elapsed().as_secs_f64() / (reps * batch.len()) as f64;
    println!("{:.2} ms per sample (forward + backward)", per * 1e3);
    Ok(())
}
