//! Binary model checkpoints.
//!
//! ```text
//! 0    "CSMC"
//! 4    u16 version (LE)
//! 6    u32 header length H (LE)
//! 10   H bytes of UTF-8 JSON header
//! 10+H f64 LE payload:
//!        measurement matrix entries (rows x cols, row-major)
//!        every stage parameter tensor in ParamSet order
//!        Adam first moments, then second moments, same order (if present)
//! ```
//!
//! Per stage, the parameter order is: preliminary fc weight/bias, each
//! preliminary conv kernels/bias, MC head fc1 weight/bias, fc2 weight/bias,
//! residual fc weight/bias, each residual conv kernels/bias, fusion logit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig, NormStats, ParamSet};
use crate::scalar::Scalar;
use crate::sensing::{MeasurementMatrix, MATRIX_RNG_ID};
use crate::tensor::Tensor;
use crate::training::{AdamState, EpochLog, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSMC";
pub const CHECKPOINT_VERSION: u16 = 1;
const PREFIX_LEN: usize = 10;

/// A model plus optional optimizer state and training history.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub adam: Option<AdamState<T>>,
    pub train_config: Option<TrainConfig>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub loss_history: Vec<EpochLog>,
}

impl<T: Scalar> Checkpoint<T> {
    /// A checkpoint carrying only a model.
    pub fn from_model(model: Model<T>) -> Self {
        Self {
            model,
            adam: None,
            train_config: None,
            epoch: 0,
            lr: 0.0,
            loss_history: Vec::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixHeader {
    rows: usize,
    cols: usize,
    seed: u64,
    rng: String,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    scalar: String,
    model_config: ModelConfig,
    norm: NormStats,
    matrix: MatrixHeader,
    train_config: Option<TrainConfig>,
    epoch: usize,
    lr: f64,
    loss_history: Vec<EpochLog>,
    adam: Option<AdamHeader>,
    param_shapes: Vec<Vec<usize>>,
    payload_values: usize,
}

fn push_all<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for v in t.data() {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
}

pub fn to_bytes<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let model = &ckpt.model;
    let params = model.params();
    let param_values: usize = params.iter().map(|p| p.len()).sum();
    let adam_values = if ckpt.adam.is_some() {
        2 * param_values
    } else {
        0
    };
    let payload_values = model.phi.entries().len() + param_values + adam_values;
    let header = Header {
        scalar: T::NAME.to_string(),
        model_config: model.config.clone(),
        norm: model.norm,
        matrix: MatrixHeader {
            rows: model.phi.rows(),
            cols: model.phi.cols(),
            seed: model.phi.seed(),
            rng: MATRIX_RNG_ID.to_string(),
        },
        train_config: ckpt.train_config.clone(),
        epoch: ckpt.epoch,
        lr: ckpt.lr,
        loss_history: ckpt.loss_history.clone(),
        adam: ckpt.adam.as_ref().map(|a| AdamHeader {
            step: a.step,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }),
        param_shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
        payload_values,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + 8 * payload_values);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    push_all(&mut out, model.phi.entries());
    for p in &params {
        push_all(&mut out, p);
    }
    if let Some(adam) = &ckpt.adam {
        if adam.m.len() != params.len() {
            return Err(Error::dim("adam state tensors", params.len(), adam.m.len()));
        }
        for t in adam.m.iter().chain(&adam.v) {
            push_all(&mut out, t);
        }
    }
    Ok(out)
}

/// Reads the length-prefixed JSON header shared by the binary formats.
pub(crate) fn read_prefixed_json<H: for<'de> Deserialize<'de>>(
    bytes: &[u8],
    magic: &[u8; 4],
    version: Option<u16>,
) -> Result<(H, usize)> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::format(
            0,
            format!("missing {} magic", String::from_utf8_lossy(magic)),
        ));
    }
    let mut offset = 4;
    if let Some(expected) = version {
        let v = bytes
            .get(4..6)
            .ok_or_else(|| Error::format(4, "truncated version field"))?;
        let v = u16::from_le_bytes([v[0], v[1]]);
        if v != expected {
            return Err(Error::format(
                4,
                format!("unsupported version {v}, expected {expected}"),
            ));
        }
        offset = 6;
    }
    let len = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| Error::format(offset as u64, "truncated header length"))?;
    let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
    let start = offset + 4;
    let json = bytes.get(start..start + len).ok_or_else(|| {
        Error::format(
            start as u64,
            format!(
                "truncated header: expected {len} bytes, got {}",
                bytes.len() - start
            ),
        )
    })?;
    let header = serde_json::from_slice(json)
        .map_err(|e| Error::format(start as u64, format!("bad header: {e}")))?;
    Ok((header, start + len))
}

/// Cursor over an f64 LE payload.
pub(crate) struct Payload<'a> {
    bytes: &'a [u8],
    base: usize,
    pos: usize,
}

impl<'a> Payload<'a> {
    pub(crate) fn new(bytes: &'a [u8], base: usize, values: usize) -> Result<Self> {
        let have = bytes.len() - base;
        if have != values * 8 {
            return Err(Error::format(
                base as u64,
                format!(
                    "payload length mismatch: expected {} bytes, got {have}",
                    values * 8
                ),
            ));
        }
        Ok(Self {
            bytes,
            base,
            pos: base,
        })
    }

    pub(crate) fn take<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let end = self.pos + 8 * n;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format(self.pos as u64, "payload ended early"))?;
        self.pos = end;
        Ok(chunk
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "{} trailing payload bytes after offset {}",
                    self.bytes.len() - self.pos,
                    self.base
                ),
            ));
        }
        Ok(())
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (header, start): (Header, usize) =
        read_prefixed_json(bytes, CHECKPOINT_MAGIC, Some(CHECKPOINT_VERSION))?;
    if header.matrix.rng != MATRIX_RNG_ID {
        return Err(Error::format(
            PREFIX_LEN as u64,
            format!("unknown matrix generator {:?}", header.matrix.rng),
        ));
    }
    let mut model = Model::<T>::zeros(header.model_config)?;
    model.set_norm(header.norm)?;
    let mut payload = Payload::new(bytes, start, header.payload_values)?;

    let (rows, cols) = (header.matrix.rows, header.matrix.cols);
    if (rows, cols) != (model.phi.rows(), model.phi.cols()) {
        return Err(Error::dim(
            "checkpoint matrix",
            format!("{}x{}", model.phi.rows(), model.phi.cols()),
            format!("{rows}x{cols}"),
        ));
    }
    let entries = Tensor::new(&[rows, cols], payload.take(rows * cols)?)?;
    model.phi = MeasurementMatrix::from_entries(entries, header.matrix.seed)?;

    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
    if shapes != header.param_shapes {
        return Err(Error::format(
            PREFIX_LEN as u64,
            "parameter shapes in header do not match the model configuration",
        ));
    }
    for p in model.params_mut() {
        let n = p.len();
        p.data_mut().copy_from_slice(&payload.take::<T>(n)?);
    }
    let adam = match header.adam {
        Some(h) => {
            let mut m = Vec::with_capacity(shapes.len());
            let mut v = Vec::with_capacity(shapes.len());
            for s in &shapes {
                m.push(Tensor::new(s, payload.take(s.iter().product())?)?);
            }
            for s in &shapes {
                v.push(Tensor::new(s, payload.take(s.iter().product())?)?);
            }
            Some(AdamState {
                m,
                v,
                step: h.step,
                beta1: h.beta1,
                beta2: h.beta2,
                eps: h.eps,
            })
        }
        None => None,
    };
    payload.finish()?;
    Ok(Checkpoint {
        model,
        adam,
        train_config: header.train_config,
        epoch: header.epoch,
        lr: header.lr,
        loss_history: header.loss_history,
    })
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, ckpt: &Checkpoint<T>) -> Result<()> {
    fs::write(path, to_bytes(ckpt)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    from_bytes(&fs::read(path)?)
}
