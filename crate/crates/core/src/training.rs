//! End-to-end training: the two-term loss, Adam, the loss-increase learning
//! rate schedule and preliminary-CNN pre-training.
//!
//! Batch gradients are computed per sample and reduced in a fixed order
//! (per fixed-size chunk, then chunk by chunk), so results are bit-identical
//! regardless of thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mh::{gather_hypotheses, HypothesisSet};
use crate::network::{BlockCnn, McMode, Model, NormStats, ParamSet, StageParams};
use crate::scalar::Scalar;
use crate::sensing::measure;
use crate::tensor::Tensor;
use crate::video::{BlockDataset, BlockSample};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const MIN_LR: f64 = 1e-7;
const REDUCE_CHUNK: usize = 8;

fn default_lambda() -> f64 {
    0.5
}
fn default_lr0() -> f64 {
    0.01
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    40
}
fn default_decay() -> f64 {
    10.0
}
fn default_stages() -> usize {
    4
}

/// Optimization hyperparameters. Defaults are desk scale (batch 32,
/// 40 epochs); the large-scale protocol uses batch 400 and 200 epochs.
/// `lr0` keeps the large-batch value of 0.01, which diverges at batch 32;
/// desk runs set about 1e-3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lambda")]
    pub lambda_mc: f64,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_decay")]
    pub lr_decay_factor: f64,
    #[serde(default)]
    pub seed: u64,
    /// Stage count of freshly built models.
    #[serde(default = "default_stages")]
    pub stage_count: usize,
    /// Cap on optimizer steps per epoch; `None` visits every sample.
    #[serde(default)]
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_mc: default_lambda(),
            lr0: default_lr0(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            lr_decay_factor: default_decay(),
            seed: 0,
            stage_count: default_stages(),
            max_batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_mc.is_nan() || self.lambda_mc < 0.0 {
            return Err(Error::Config(format!(
                "lambda_mc must be >= 0, got {}",
                self.lambda_mc
            )));
        }
        if self.lr0.is_nan() || self.lr0 <= 0.0 {
            return Err(Error::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.stage_count == 0 {
            return Err(Error::Config(
                "batch size, epochs and stage count must be >= 1".into(),
            ));
        }
        if self.lr_decay_factor.is_nan() || self.lr_decay_factor < 1.0 {
            return Err(Error::Config(format!(
                "lr decay factor must be >= 1, got {}",
                self.lr_decay_factor
            )));
        }
        if self.max_batches_per_epoch == Some(0) {
            return Err(Error::Config("max_batches_per_epoch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Components of the training loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub err: f64,
    pub mc: f64,
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_err")]
    pub l_err: f64,
    #[serde(rename = "L_mc")]
    pub l_mc: f64,
    pub total: f64,
}

/// Adam moments for every parameter tensor, in [`ParamSet`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn for_model(model: &Model<T>) -> Self {
        Self::new(model.params())
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: Vec<&mut Tensor<T>>,
    grads: Vec<&Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(
            "adam parameter count",
            state.m.len(),
            params.len(),
        ));
    }
    for ((p, g), m) in params.iter().zip(&grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::dim(
                "adam tensor shape",
                format!("{:?}", m.shape()),
                format!("{:?}/{:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let bc1 = T::of(1.0 - state.beta1.powi(t));
    let bc2 = T::of(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(state.eps));
    let one = T::one();
    for (((p, g), m), v) in params
        .into_iter()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Divides `lr` by `decay` when the latest epoch loss exceeds the previous
/// one. Decay stops at [`MIN_LR`] and the rate never increases.
pub fn lr_schedule(losses: &[f64], lr: f64, decay: f64) -> f64 {
    match losses {
        [.., prev, cur] if cur > prev => (lr / decay).max(MIN_LR).min(lr),
        _ => lr,
    }
}

/// A sample prepared for the network: measurements and hypotheses.
struct Prepared<T> {
    y: Tensor<T>,
    hyp: Option<HypothesisSet<T>>,
}

fn prepare<T: Scalar>(model: &Model<T>, s: &BlockSample<T>, mode: McMode) -> Result<Prepared<T>> {
    let y = measure(&model.phi, &s.x)?;
    let hyp = match (&s.reference, mode) {
        (Some(r), McMode::Learned | McMode::Lsq) => Some(gather_hypotheses(
            &r.patch,
            r.pos,
            model.block_size(),
            &model.config.window,
        )?),
        _ => None,
    };
    Ok(Prepared { y, hyp })
}

/// Per-sample loss pieces before batch averaging: `(|f(y) - x|^2, sum_s |d_s|^2)`.
fn sample_sq_errors<T: Scalar>(
    x: &Tensor<T>,
    trace: &crate::network::BlockTrace<T>,
) -> Result<(f64, f64)> {
    let err = trace.output().sub(x)?.norm_sq().as_f64();
    let mc: f64 = trace.stages.iter().map(|s| s.d.norm_sq().as_f64()).sum();
    Ok((err, mc))
}

fn combine(err_sum: f64, mc_sum: f64, batch: usize, stages: usize, lambda: f64) -> LossParts {
    let err = err_sum / (2.0 * batch as f64);
    let mc = mc_sum / (2.0 * batch as f64 * stages as f64);
    LossParts {
        total: err + lambda * mc,
        err,
        mc,
    }
}

/// Loss of a batch: `L_err = 1/(2B) sum |f(y_i) - x_i|^2`,
/// `L_mc = 1/(2BS) sum_i sum_s |y_i - phi x_mc,s,i|^2`, `total = L_err + lambda L_mc`.
pub fn loss<T: Scalar>(
    model: &Model<T>,
    batch: &[BlockSample<T>],
    lambda: f64,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::Config("loss needs a non-empty batch".into()));
    }
    let mode = model.config.mc_mode;
    let parts = batch
        .par_iter()
        .map(|s| {
            let p = prepare(model, s, mode)?;
            let trace = model.forward_block(&p.y, p.hyp.as_ref(), mode)?;
            sample_sq_errors(&s.x, &trace)
        })
        .collect::<Result<Vec<_>>>()?;
    let (e, m) = parts
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    Ok(combine(e, m, batch.len(), model.stages.len(), lambda))
}

fn add_into<T: Scalar>(acc: &mut Vec<StageParams<T>>, g: &Vec<StageParams<T>>) {
    for (a, b) in acc.params_mut().into_iter().zip(g.params()) {
        for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

/// Loss and its gradient with respect to every stage parameter.
pub fn loss_and_grad<T: Scalar>(
    model: &Model<T>,
    batch: &[BlockSample<T>],
    lambda: f64,
) -> Result<(LossParts, Vec<StageParams<T>>)> {
    if batch.is_empty() {
        return Err(Error::Config("loss needs a non-empty batch".into()));
    }
    let mode = model.config.mc_mode;
    let nb = batch.len() as f64;
    let s = model.stages.len() as f64;
    let d_coef = T::of(lambda / (nb * s));
    let inv_nb = T::of(1.0 / nb);

    let chunks = batch
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| -> Result<_> {
            let mut acc = model.zero_grads();
            let (mut e, mut m) = (0.0, 0.0);
            for sample in chunk {
                let p = prepare(model, sample, mode)?;
                let trace = model.forward_block(&p.y, p.hyp.as_ref(), mode)?;
                let (se, sm) = sample_sq_errors(&sample.x, &trace)?;
                e += se;
                m += sm;
                let d_final = trace.output().sub(&sample.x)?.scale(inv_nb);
                let g = model.backward_block(p.hyp.as_ref(), &trace, &d_final, d_coef, mode)?;
                add_into(&mut acc, &g);
            }
            Ok((acc, e, m))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut iter = chunks.into_iter();
    let (mut grad, mut e, mut m) = iter.next().expect("non-empty batch");
    for (g, ce, cm) in iter {
        add_into(&mut grad, &g);
        e += ce;
        m += cm;
    }
    Ok((combine(e, m, batch.len(), model.stages.len(), lambda), grad))
}

/// Plain MSE of one preliminary CNN and its gradient:
/// `1/(2B) sum |prelim(y_i) - x_i|^2`.
pub fn prelim_loss_and_grad<T: Scalar>(
    model: &Model<T>,
    prelim: &BlockCnn<T>,
    batch: &[BlockSample<T>],
) -> Result<(f64, BlockCnn<T>)> {
    if batch.is_empty() {
        return Err(Error::Config("loss needs a non-empty batch".into()));
    }
    let mean = T::of(model.norm.mean);
    let inv_std = T::of(1.0 / model.norm.std);
    let inv_nb = T::of(1.0 / batch.len() as f64);
    let zero = || {
        let mut z = prelim.clone();
        z.params_mut()
            .into_iter()
            .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = T::zero()));
        z
    };
    let chunks = batch
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| -> Result<_> {
            let mut acc = zero();
            let mut e = 0.0;
            for s in chunk {
                let y = measure(&model.phi, &s.x)?.map(|v| (v - mean) * inv_std);
                let trace = prelim.forward(&y)?;
                let diff = trace.output().sub(&s.x)?;
                e += diff.norm_sq().as_f64();
                let (g, _) = prelim.backward(&trace, &diff.scale(inv_nb))?;
                for (a, b) in acc.params_mut().into_iter().zip(g.params()) {
                    a.axpy(T::one(), b)?;
                }
            }
            Ok((acc, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = chunks.into_iter();
    let (mut grad, mut e) = iter.next().expect("non-empty batch");
    for (g, ce) in iter {
        for (a, b) in grad.params_mut().into_iter().zip(g.params()) {
            a.axpy(T::one(), b)?;
        }
        e += ce;
    }
    Ok((e / (2.0 * batch.len() as f64), grad))
}

/// Computes and stores measurement normalization from a dataset.
pub fn fit_normalization<T: Scalar>(
    model: &mut Model<T>,
    data: &BlockDataset<T>,
) -> Result<NormStats> {
    let ys = data
        .samples
        .iter()
        .map(|s| measure(&model.phi, &s.x))
        .collect::<Result<Vec<_>>>()?;
    let norm = NormStats::from_measurements(&ys)?;
    model.set_norm(norm)?;
    Ok(norm)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

fn batches(order: &[usize], config: &TrainConfig) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order
        .chunks(config.batch_size)
        .map(<[usize]>::to_vec)
        .collect();
    if let Some(cap) = config.max_batches_per_epoch {
        out.truncate(cap);
    }
    out
}

fn gather<T: Scalar>(data: &BlockDataset<T>, idx: &[usize]) -> Vec<BlockSample<T>> {
    idx.iter().map(|&i| data.samples[i].clone()).collect()
}

/// Outcome of pre-training.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Pre-trains a preliminary CNN under plain MSE and installs it in every
/// stage. Optimization starts from stage 1's weights; all other parameters
/// are left untouched.
pub fn pretrain_prelim<T: Scalar>(
    model: &mut Model<T>,
    data: &BlockDataset<T>,
    config: &TrainConfig,
) -> Result<PretrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config(
            "pre-training needs a non-empty dataset".into(),
        ));
    }
    let mut prelim = model.stages[0].prelim.clone();
    let mut adam = AdamState::new(prelim.params());
    let mut lr = config.lr0;
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = epoch_order(data.len(), config.seed.wrapping_add(0x5eed), epoch);
        let mut sum = 0.0;
        let mut count = 0usize;
        for idx in batches(&order, config) {
            let batch = gather(data, &idx);
            let (l, g) = prelim_loss_and_grad(model, &prelim, &batch)?;
            adam_step(prelim.params_mut(), g.params(), &mut adam, lr)?;
            sum += l * batch.len() as f64;
            count += batch.len();
        }
        losses.push(sum / count as f64);
        lr = lr_schedule(&losses, lr, config.lr_decay_factor);
    }
    for stage in &mut model.stages {
        stage.prelim = prelim.clone();
    }
    Ok(PretrainReport {
        epoch_losses: losses,
    })
}

/// Outcome of [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport<T> {
    pub log: Vec<EpochLog>,
    /// Loss on the fixed probe subset before the first update.
    pub initial: LossParts,
    /// Loss on the same probe subset after the last update.
    pub last: LossParts,
    pub adam: AdamState<T>,
}

const PROBE_SIZE: usize = 256;

/// Seeded probe subset used to report initial and final loss.
pub fn probe_subset<T: Scalar>(data: &BlockDataset<T>, seed: u64) -> Vec<BlockSample<T>> {
    let order = epoch_order(data.len(), seed.wrapping_add(0x9b0be), usize::MAX);
    order
        .into_iter()
        .take(PROBE_SIZE.min(data.len()))
        .map(|i| data.samples[i].clone())
        .collect()
}

/// Full end-to-end optimization. `on_epoch` sees the model, optimizer state
/// and log after every epoch (used for checkpointing).
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &BlockDataset<T>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&Model<T>, &AdamState<T>, &[EpochLog]) -> Result<()>,
) -> Result<TrainReport<T>> {
    config.validate()?;
    if data.len() < config.batch_size {
        return Err(Error::Config(format!(
            "dataset has {} samples, fewer than one batch of {}",
            data.len(),
            config.batch_size
        )));
    }
    let probe = probe_subset(data, config.seed);
    let initial = loss(model, &probe, config.lambda_mc)?;
    let mut adam = AdamState::for_model(model);
    let mut lr = config.lr0;
    let mut log: Vec<EpochLog> = Vec::with_capacity(config.epochs);
    let mut totals = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = epoch_order(data.len(), config.seed, epoch);
        let mut acc = LossParts::default();
        let mut count = 0usize;
        for idx in batches(&order, config) {
            let batch = gather(data, &idx);
            let (parts, grad) = loss_and_grad(model, &batch, config.lambda_mc)?;
            adam_step(model.params_mut(), grad.params(), &mut adam, lr)?;
            let w = batch.len() as f64;
            acc.total += parts.total * w;
            acc.err += parts.err * w;
            acc.mc += parts.mc * w;
            count += batch.len();
        }
        let n = count as f64;
        let entry = EpochLog {
            epoch,
            lr,
            l_err: acc.err / n,
            l_mc: acc.mc / n,
            total: acc.total / n,
        };
        log.push(entry);
        totals.push(entry.total);
        on_epoch(model, &adam, &log)?;
        lr = lr_schedule(&totals, lr, config.lr_decay_factor);
    }
    let last = loss(model, &probe, config.lambda_mc)?;
    Ok(TrainReport {
        log,
        initial,
        last,
        adam,
    })
}
