//! The unrolled decoder.
//!
//! Every stage runs three modules on the block measurements `y`:
//!
//! 1. a preliminary CNN mapping normalized `y` to a block estimate `x_pre`;
//! 2. multi-hypothesis motion compensation producing `x_mc` from the
//!    reference frame, matched against the previous stage's output (stage 1
//!    matches against its own `x_pre`);
//! 3. a residual CNN reconstructing `x_res` from `d = y - phi x_mc`.
//!
//! The stage output is `gamma x_pre + (1 - gamma)(x_mc + x_res)` with a
//! learned scalar `gamma = sigmoid(logit)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{block_grid, BlockPos, Frame};
use crate::layers::{relu_backward, relu_forward, Conv2d, Linear};
use crate::mh::{
    default_tikhonov, gather_hypotheses, take2, HypothesisSet, LsqSolver, McHead, McHeadTrace,
    SearchWindow,
};
use crate::scalar::Scalar;
use crate::sensing::{make_matrix, MeasurementMatrix, SensingConfig};
use crate::tensor::Tensor;

pub const MAX_STAGES: usize = 8;
const LOGIT_LIMIT: f64 = 40.0;

/// How a stage obtains its motion-compensated prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum McMode {
    #[default]
    Learned,
    Lsq,
    Off,
}

impl std::str::FromStr for McMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "lsq" => Ok(Self::Lsq),
            "off" => Ok(Self::Off),
            other => Err(Error::Config(format!(
                "unknown mc mode {other:?} (learned|lsq|off)"
            ))),
        }
    }
}

impl std::fmt::Display for McMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Learned => "learned",
            Self::Lsq => "lsq",
            Self::Off => "off",
        })
    }
}

fn default_prelim_channels() -> Vec<usize> {
    vec![64, 32, 16]
}

fn default_residual_channels() -> Vec<usize> {
    vec![32, 16, 8, 4]
}

/// Architecture and sensing setup of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub sensing: SensingConfig,
    #[serde(default = "default_stage_count")]
    pub stages: usize,
    #[serde(default)]
    pub window: SearchWindow,
    #[serde(default)]
    pub mc_mode: McMode,
    /// Hidden widths of the preliminary CNN (`1 -> ... -> 1`).
    #[serde(default = "default_prelim_channels")]
    pub prelim_channels: Vec<usize>,
    /// Hidden widths of the residual CNN; four widths give five convolutions.
    #[serde(default = "default_residual_channels")]
    pub residual_channels: Vec<usize>,
    #[serde(default)]
    pub matrix_seed: u64,
    #[serde(default)]
    pub init_seed: u64,
    /// Tikhonov weight for `lsq` mode; `None` uses `1e-2 trace(H^T H) / K`.
    #[serde(default)]
    pub tikhonov_lambda: Option<f64>,
}

fn default_stage_count() -> usize {
    4
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sensing: SensingConfig::default(),
            stages: default_stage_count(),
            window: SearchWindow::default(),
            mc_mode: McMode::Learned,
            prelim_channels: default_prelim_channels(),
            residual_channels: default_residual_channels(),
            matrix_seed: 0,
            init_seed: 0,
            tikhonov_lambda: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.sensing.validate()?;
        self.window.validate()?;
        if !(1..=MAX_STAGES).contains(&self.stages) {
            return Err(Error::Config(format!(
                "stage count {} outside 1..={MAX_STAGES}",
                self.stages
            )));
        }
        let strictly_decreasing =
            |c: &[usize]| c.windows(2).all(|p| p[0] > p[1]) && c.iter().all(|&v| v > 0);
        if self.prelim_channels.is_empty() || !strictly_decreasing(&self.prelim_channels) {
            return Err(Error::Config(format!(
                "preliminary CNN widths {:?} must be non-empty and strictly decreasing",
                self.prelim_channels
            )));
        }
        if self.residual_channels.len() != 4 || !strictly_decreasing(&self.residual_channels) {
            return Err(Error::Config(format!(
                "residual CNN needs four strictly decreasing hidden widths (five convolutions), got {:?}",
                self.residual_channels
            )));
        }
        if let Some(l) = self.tikhonov_lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!(
                    "tikhonov lambda {l} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Dataset statistics used to standardize measurements.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl NormStats {
    /// Mean and population standard deviation over every entry.
    pub fn from_measurements<'a, T: Scalar>(
        ys: impl IntoIterator<Item = &'a Tensor<T>>,
    ) -> Result<Self> {
        let (mut n, mut sum, mut sum_sq) = (0usize, 0.0f64, 0.0f64);
        for y in ys {
            for &v in y.data() {
                let v = v.as_f64();
                n += 1;
                sum += v;
                sum_sq += v * v;
            }
        }
        if n == 0 {
            return Err(Error::Config(
                "cannot compute normalization from zero measurements".into(),
            ));
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        let std = var.sqrt();
        if std.is_nan() || std <= 0.0 {
            return Err(Error::DegenerateSignal(
                "measurements have zero variance".into(),
            ));
        }
        Ok(Self { mean, std })
    }
}

/// Access to every learnable tensor in a fixed, documented order.
pub trait ParamSet<T> {
    fn params(&self) -> Vec<&Tensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;
}

impl<T> ParamSet<T> for Linear<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl<T> ParamSet<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.kernels, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.kernels, &mut self.bias]
    }
}

impl<T> ParamSet<T> for McHead<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v
    }
}

/// Fully-connected lift from measurements to a `B x B` map, followed by a
/// stack of 3x3 convolutions with ReLU between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCnn<T> {
    pub fc: Linear<T>,
    pub convs: Vec<Conv2d<T>>,
    /// Whether a ReLU follows the fully-connected layer.
    pub fc_relu: bool,
}

/// Intermediate values of a [`BlockCnn`] evaluation.
#[derive(Clone, Debug)]
pub struct CnnTrace<T> {
    pub fc_input: Tensor<T>,
    pub fc_pre: Tensor<T>,
    /// Input of each convolution.
    pub conv_inputs: Vec<Tensor<T>>,
    /// Pre-activation output of each convolution.
    pub conv_pre: Vec<Tensor<T>>,
}

impl<T: Scalar> CnnTrace<T> {
    /// Rasterized network output.
    pub fn output(&self) -> Tensor<T> {
        let last = self.conv_pre.last().expect("at least one convolution");
        Tensor::from_vec(last.data().to_vec())
    }
}

impl<T: Scalar> BlockCnn<T> {
    fn widths(hidden: &[usize]) -> Vec<usize> {
        let mut w = vec![1];
        w.extend_from_slice(hidden);
        w.push(1);
        w
    }

    pub fn zeros(m: usize, block_size: usize, hidden: &[usize], fc_relu: bool) -> Self {
        let w = Self::widths(hidden);
        Self {
            fc: Linear::zeros(m, block_size * block_size),
            convs: w.windows(2).map(|p| Conv2d::zeros(p[0], p[1])).collect(),
            fc_relu,
        }
    }

    pub fn init<R: rand::Rng + ?Sized>(
        m: usize,
        block_size: usize,
        hidden: &[usize],
        fc_relu: bool,
        rng: &mut R,
    ) -> Self {
        let w = Self::widths(hidden);
        let n_conv = w.len() - 1;
        let convs = w
            .windows(2)
            .enumerate()
            .map(|(i, p)| Conv2d::init(p[0], p[1], if i + 1 == n_conv { 1.0 } else { 2.0 }, rng))
            .collect();
        let fc = Linear::init(
            m,
            block_size * block_size,
            if fc_relu { 2.0 } else { 1.0 },
            rng,
        );
        Self { fc, convs, fc_relu }
    }

    pub fn block_size(&self) -> usize {
        (self.fc.n_out() as f64).sqrt() as usize
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<CnnTrace<T>> {
        let b = self.block_size();
        let fc_pre = self.fc.forward(input)?;
        let mut h = if self.fc_relu {
            relu_forward(&fc_pre)
        } else {
            fc_pre.clone()
        }
        .reshape(&[1, b, b])?;
        let mut conv_inputs = Vec::with_capacity(self.convs.len());
        let mut conv_pre = Vec::with_capacity(self.convs.len());
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            let z = conv.forward(&h)?;
            let next = if i < last {
                relu_forward(&z)
            } else {
                z.clone()
            };
            conv_inputs.push(std::mem::replace(&mut h, next));
            conv_pre.push(z);
        }
        Ok(CnnTrace {
            fc_input: input.clone(),
            fc_pre,
            conv_inputs,
            conv_pre,
        })
    }

    /// Returns parameter gradients (as a `BlockCnn`) and `d loss / d input`.
    pub fn backward(
        &self,
        trace: &CnnTrace<T>,
        d_out: &Tensor<T>,
    ) -> Result<(BlockCnn<T>, Tensor<T>)> {
        let b = self.block_size();
        let mut g = d_out.clone().reshape(&[1, b, b])?;
        let last = self.convs.len() - 1;
        let mut conv_grads = Vec::with_capacity(self.convs.len());
        for i in (0..self.convs.len()).rev() {
            if i < last {
                g = relu_backward(&trace.conv_pre[i], &g)?.d_input;
            }
            let lg = self.convs[i].backward(&trace.conv_inputs[i], &g)?;
            let [kernels, bias] = take2(lg.d_params);
            conv_grads.push(Conv2d { kernels, bias });
            g = lg.d_input;
        }
        conv_grads.reverse();
        let mut g = g.reshape(&[b * b])?;
        if self.fc_relu {
            g = relu_backward(&trace.fc_pre, &g)?.d_input;
        }
        let lg = self.fc.backward(&trace.fc_input, &g)?;
        let [weight, bias] = take2(lg.d_params);
        Ok((
            BlockCnn {
                fc: Linear { weight, bias },
                convs: conv_grads,
                fc_relu: self.fc_relu,
            },
            lg.d_input,
        ))
    }
}

impl<T> ParamSet<T> for BlockCnn<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = self.fc.params();
        for c in &self.convs {
            v.extend(c.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.fc.params_mut();
        for c in &mut self.convs {
            v.extend(c.params_mut());
        }
        v
    }
}

/// Preliminary reconstruction of one block from normalized measurements.
pub fn prelim_forward<T: Scalar>(params: &BlockCnn<T>, y_norm: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(params.forward(y_norm)?.output())
}

/// Learnable tensors of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageParams<T> {
    pub prelim: BlockCnn<T>,
    pub mc_head: McHead<T>,
    pub residual: BlockCnn<T>,
    /// Unconstrained fusion logit, `[1]`; `gamma = sigmoid(logit)`.
    pub fusion: Tensor<T>,
}

impl<T> ParamSet<T> for StageParams<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = self.prelim.params();
        v.extend(self.mc_head.params());
        v.extend(self.residual.params());
        v.push(&self.fusion);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.prelim.params_mut();
        v.extend(self.mc_head.params_mut());
        v.extend(self.residual.params_mut());
        v.push(&mut self.fusion);
        v
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> StageParams<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let m = config.sensing.measurements();
        let b = config.sensing.block_size;
        Self {
            prelim: BlockCnn::zeros(m, b, &config.prelim_channels, true),
            mc_head: McHead::zeros(config.window.hypotheses()),
            residual: BlockCnn::zeros(m, b, &config.residual_channels, false),
            fusion: Tensor::zeros(&[1]),
        }
    }

    pub fn init<R: rand::Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let m = config.sensing.measurements();
        let b = config.sensing.block_size;
        Self {
            prelim: BlockCnn::init(m, b, &config.prelim_channels, true, rng),
            mc_head: McHead::init(config.window.hypotheses(), rng),
            residual: BlockCnn::init(m, b, &config.residual_channels, false, rng),
            fusion: Tensor::zeros(&[1]),
        }
    }

    pub fn gamma(&self) -> T {
        sigmoid(self.fusion.data()[0])
    }

    /// Sets the fusion weight; `gamma` in `{0, 1}` saturates the logit.
    pub fn set_gamma(&mut self, gamma: f64) {
        let g = gamma.clamp(0.0, 1.0);
        let logit = (g / (1.0 - g)).ln().clamp(-LOGIT_LIMIT, LOGIT_LIMIT);
        self.fusion = Tensor::from_vec(vec![T::of(logit)]);
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    /// Runs the stage. `x_match` is the motion-compensation matching target;
    /// `None` uses this stage's own preliminary output.
    pub fn forward(
        &self,
        ctx: &StageContext<'_, T>,
        y: &Tensor<T>,
        hyp: Option<&HypothesisSet<T>>,
        x_match: Option<&Tensor<T>>,
    ) -> Result<StageTrace<T>> {
        let y_norm = ctx.normalize(y);
        let prelim = self.prelim.forward(&y_norm)?;
        let x_pre = prelim.output();
        let target = x_match.unwrap_or(&x_pre);
        let (mc, x_mc) = match (hyp, ctx.mode) {
            (None, _) | (_, McMode::Off) => (McTrace::Off, Tensor::zeros(&[x_pre.len()])),
            (Some(h), McMode::Learned) => {
                let t = self.mc_head.forward(h, target)?;
                let x = t.x_mc.clone();
                (McTrace::Learned(Box::new(t)), x)
            }
            (Some(h), McMode::Lsq) => {
                let lambda = ctx.tikhonov.map_or_else(|| default_tikhonov(h), T::of);
                let solver = LsqSolver::new(h, lambda)?;
                let x = solver.apply_projector(h, target)?;
                (McTrace::Lsq(solver), x)
            }
        };
        let d = crate::sensing::residual_measure(y, ctx.phi, &x_mc)?;
        let residual = self.residual.forward(&d.scale(ctx.inv_std))?;
        let x_res = residual.output();
        let gamma = self.gamma();
        let one_minus = T::one() - gamma;
        let x_out = Tensor::from_vec(
            x_pre
                .data()
                .iter()
                .zip(x_mc.data())
                .zip(x_res.data())
                .map(|((&p, &m), &r)| gamma * p + one_minus * (m + r))
                .collect(),
        );
        Ok(StageTrace {
            prelim,
            mc,
            x_pre,
            x_mc,
            d,
            residual,
            x_res,
            gamma,
            x_out,
        })
    }

    /// Backpropagates through one stage.
    ///
    /// `d_out` is `d loss / d x_out`; `d_coef` adds `d_coef * d` to
    /// `d loss / d d`, which is how the motion-compensation loss enters.
    /// Returns the parameter gradients, and `d loss / d x_match` when a
    /// matching target other than the stage's own preliminary output was
    /// used and motion compensation was active.
    pub fn backward(
        &self,
        ctx: &StageContext<'_, T>,
        hyp: Option<&HypothesisSet<T>>,
        trace: &StageTrace<T>,
        d_out: &Tensor<T>,
        d_coef: T,
        own_match: bool,
    ) -> Result<(StageParams<T>, Option<Tensor<T>>)> {
        let gamma = trace.gamma;
        let one_minus = T::one() - gamma;
        let mut d_gamma = T::zero();
        for (((&g, &p), &m), &r) in d_out
            .data()
            .iter()
            .zip(trace.x_pre.data())
            .zip(trace.x_mc.data())
            .zip(trace.x_res.data())
        {
            d_gamma += g * (p - m - r);
        }
        let d_logit = d_gamma * gamma * one_minus;

        let mut d_pre = d_out.scale(gamma);
        let d_branch = d_out.scale(one_minus);

        let (res_grad, d_res_in) = self.residual.backward(&trace.residual, &d_branch)?;
        let mut d_d = d_res_in.scale(ctx.inv_std);
        d_d.axpy(d_coef, &trace.d)?;

        let mut mc_grad = self.mc_head.zeros_like();
        let d_match = match (&trace.mc, hyp) {
            (McTrace::Off, _) => None,
            (_, None) => {
                return Err(Error::Config(
                    "stage trace used hypotheses that were not supplied".into(),
                ))
            }
            (McTrace::Learned(t), Some(h)) => {
                let mut d_xmc = d_branch.clone();
                d_xmc.axpy(-T::one(), &ctx.phi.adjoint(&d_d)?)?;
                let (g, d_est) = self.mc_head.backward(h, t, &d_xmc)?;
                mc_grad = g;
                Some(d_est)
            }
            (McTrace::Lsq(solver), Some(h)) => {
                let mut d_xmc = d_branch.clone();
                d_xmc.axpy(-T::one(), &ctx.phi.adjoint(&d_d)?)?;
                Some(solver.apply_projector(h, &d_xmc)?)
            }
        };

        let d_match = match d_match {
            Some(dm) if own_match => {
                d_pre.axpy(T::one(), &dm)?;
                None
            }
            other => other,
        };
        let (prelim_grad, _) = self.prelim.backward(&trace.prelim, &d_pre)?;

        Ok((
            StageParams {
                prelim: prelim_grad,
                mc_head: mc_grad,
                residual: res_grad,
                fusion: Tensor::from_vec(vec![d_logit]),
            },
            d_match,
        ))
    }
}

impl<T: Scalar> McHead<T> {
    pub fn zeros_like(&self) -> Self {
        McHead::zeros(self.hypotheses())
    }
}

/// How the stage reached its motion-compensated prediction.
#[derive(Clone, Debug)]
pub enum McTrace<T> {
    Off,
    Learned(Box<McHeadTrace<T>>),
    Lsq(LsqSolver<T>),
}

/// Intermediate values of one stage.
#[derive(Clone, Debug)]
pub struct StageTrace<T> {
    pub prelim: CnnTrace<T>,
    pub mc: McTrace<T>,
    pub x_pre: Tensor<T>,
    pub x_mc: Tensor<T>,
    /// Residual measurement `y - phi x_mc`.
    pub d: Tensor<T>,
    pub residual: CnnTrace<T>,
    pub x_res: Tensor<T>,
    pub gamma: T,
    pub x_out: Tensor<T>,
}

/// Shared, read-only inputs to every stage evaluation.
#[derive(Clone, Copy, Debug)]
pub struct StageContext<'a, T> {
    pub phi: &'a MeasurementMatrix<T>,
    pub mean: T,
    pub inv_std: T,
    pub mode: McMode,
    pub tikhonov: Option<f64>,
}

impl<T: Scalar> StageContext<'_, T> {
    fn normalize(&self, y: &Tensor<T>) -> Tensor<T> {
        y.map(|v| (v - self.mean) * self.inv_std)
    }
}

/// Full decoder: stage parameters plus everything needed to interpret
/// measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub stages: Vec<StageParams<T>>,
    pub phi: MeasurementMatrix<T>,
    pub norm: NormStats,
}

/// Per-stage traces of one block.
#[derive(Clone, Debug)]
pub struct BlockTrace<T> {
    pub stages: Vec<StageTrace<T>>,
}

impl<T: Scalar> BlockTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.stages.last().expect("at least one stage").x_out
    }
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized model (seeded by `config.init_seed`).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let phi = make_matrix(&config.sensing, config.matrix_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let stages = (0..config.stages)
            .map(|_| StageParams::init(&config, &mut rng))
            .collect();
        Ok(Self {
            config,
            stages,
            phi,
            norm: NormStats::default(),
        })
    }

    /// Model with every parameter zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let phi = make_matrix(&config.sensing, config.matrix_seed)?;
        let stages = (0..config.stages)
            .map(|_| StageParams::zeros(&config))
            .collect();
        Ok(Self {
            config,
            stages,
            phi,
            norm: NormStats::default(),
        })
    }

    pub fn block_size(&self) -> usize {
        self.config.sensing.block_size
    }

    pub fn measurements(&self) -> usize {
        self.phi.rows()
    }

    pub fn set_norm(&mut self, norm: NormStats) -> Result<()> {
        if !(norm.std > 0.0 && norm.std.is_finite() && norm.mean.is_finite()) {
            return Err(Error::Config(format!(
                "normalization std must be positive, got {}",
                norm.std
            )));
        }
        self.norm = norm;
        Ok(())
    }

    pub fn context(&self, mode: McMode) -> StageContext<'_, T> {
        StageContext {
            phi: &self.phi,
            mean: T::of(self.norm.mean),
            inv_std: T::of(1.0 / self.norm.std),
            mode,
            tikhonov: self.config.tikhonov_lambda,
        }
    }

    /// Runs every stage on one block, keeping intermediates for backprop.
    pub fn forward_block(
        &self,
        y: &Tensor<T>,
        hyp: Option<&HypothesisSet<T>>,
        mode: McMode,
    ) -> Result<BlockTrace<T>> {
        if y.len() != self.measurements() {
            return Err(Error::dim(
                "block measurements",
                self.measurements(),
                y.len(),
            ));
        }
        let ctx = self.context(mode);
        let mut traces: Vec<StageTrace<T>> = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let x_match = traces.last().map(|t| &t.x_out);
            let t = stage.forward(&ctx, y, hyp, x_match)?;
            traces.push(t);
        }
        Ok(BlockTrace { stages: traces })
    }

    /// Gradients of a per-block loss.
    ///
    /// `d_final` is `d loss / d output`; `d_coef` is the weight such that
    /// the loss contains `d_coef / 2 * |d_s|^2` for every stage `s`.
    pub fn backward_block(
        &self,
        hyp: Option<&HypothesisSet<T>>,
        trace: &BlockTrace<T>,
        d_final: &Tensor<T>,
        d_coef: T,
        mode: McMode,
    ) -> Result<Vec<StageParams<T>>> {
        let ctx = self.context(mode);
        let mut grads = Vec::with_capacity(self.stages.len());
        let mut d_out = d_final.clone();
        for (s, (stage, st)) in self.stages.iter().zip(&trace.stages).enumerate().rev() {
            let (g, d_match) = stage.backward(&ctx, hyp, st, &d_out, d_coef, s == 0)?;
            grads.push(g);
            d_out = d_match.unwrap_or_else(|| Tensor::zeros(&[d_final.len()]));
        }
        grads.reverse();
        Ok(grads)
    }

    /// Reconstructs one block. The result is not clamped.
    pub fn decode_block(
        &self,
        y: &Tensor<T>,
        reference: Option<&Frame<T>>,
        pos: BlockPos,
        mode: McMode,
    ) -> Result<Tensor<T>> {
        let hyp = match (reference, mode) {
            (Some(r), McMode::Learned | McMode::Lsq) => Some(gather_hypotheses(
                r,
                pos,
                self.block_size(),
                &self.config.window,
            )?),
            _ => None,
        };
        let trace = self.forward_block(y, hyp.as_ref(), mode)?;
        Ok(trace
            .stages
            .into_iter()
            .last()
            .expect("at least one stage")
            .x_out)
    }

    /// Decodes every block of a frame against the frozen buffer, then
    /// stores the result in the buffer. Blocks are processed in parallel and
    /// only read the model and the buffer.
    pub fn decode_frame(
        &self,
        measurements: &[Tensor<T>],
        width: usize,
        height: usize,
        buffer: &mut FrameBuffer<T>,
        mode: McMode,
    ) -> Result<Frame<T>> {
        let b = self.block_size();
        let positions = block_grid(width, height, b)?;
        if positions.len() != measurements.len() {
            return Err(Error::Config(format!(
                "{width}x{height} frame has {} blocks but {} measurement vectors were supplied",
                positions.len(),
                measurements.len()
            )));
        }
        if let Some(r) = buffer.frame() {
            if (r.width(), r.height()) != (width, height) {
                return Err(Error::Config(
                    "reference frame geometry differs from the decoded frame".into(),
                ));
            }
        }
        let reference = buffer.frame();
        let blocks = positions
            .par_iter()
            .zip(measurements)
            .map(|(&pos, y)| self.decode_block(y, reference, pos, mode))
            .collect::<Result<Vec<_>>>()?;
        let frame = Frame::from_blocks(width, height, b, &blocks)?.clamp01();
        buffer.store(frame.clone());
        Ok(frame)
    }

    /// Decodes a whole sequence, threading the frame buffer.
    pub fn decode_video(
        &self,
        measurements: &[Vec<Tensor<T>>],
        width: usize,
        height: usize,
        mode: McMode,
    ) -> Result<Vec<Frame<T>>> {
        let mut buffer = FrameBuffer::new();
        measurements
            .iter()
            .map(|m| self.decode_frame(m, width, height, &mut buffer, mode))
            .collect()
    }

    pub fn zero_grads(&self) -> Vec<StageParams<T>> {
        self.stages.iter().map(StageParams::zeros_like).collect()
    }
}

impl<T> ParamSet<T> for Model<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        self.stages.iter().flat_map(|s| s.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.stages
            .iter_mut()
            .flat_map(|s| s.params_mut())
            .collect()
    }
}

impl<T> ParamSet<T> for Vec<StageParams<T>> {
    fn params(&self) -> Vec<&Tensor<T>> {
        self.iter().flat_map(|s| s.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.iter_mut().flat_map(|s| s.params_mut()).collect()
    }
}

/// Holds the previously decoded frame. Written only between frames.
#[derive(Clone, Debug, Default)]
pub struct FrameBuffer<T> {
    frame: Option<Frame<T>>,
}

impl<T: Scalar> FrameBuffer<T> {
    pub fn new() -> Self {
        Self { frame: None }
    }

    pub fn frame(&self) -> Option<&Frame<T>> {
        self.frame.as_ref()
    }

    pub fn store(&mut self, frame: Frame<T>) {
        self.frame = Some(frame);
    }

    pub fn clear(&mut self) {
        self.frame = None;
    }
}
