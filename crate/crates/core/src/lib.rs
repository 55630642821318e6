//! Block compressive-sensing video codec with an unrolled,
//! multi-hypothesis motion-compensated decoder.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar for the common cases. Training and file
//! formats are exercised in `f64`.

pub mod checkpoint;
pub mod codec;
pub mod error;
pub mod experiments;
pub mod frame;
pub mod layers;
pub mod linalg;
pub mod metrics;
pub mod mh;
pub mod network;
pub mod scalar;
pub mod sensing;
pub mod tensor;
pub mod training;
pub mod video;

pub use checkpoint::Checkpoint;
pub use codec::{encode_video, EncodedVideo, MeasurementHeader};
pub use error::{Error, Result};
pub use frame::{BlockPos, Frame};
pub use mh::{HypothesisSet, SearchWindow};
pub use network::{McMode, Model, ModelConfig, NormStats, ParamSet};
pub use scalar::Scalar;
pub use sensing::{MeasurementMatrix, SensingConfig};
pub use tensor::Tensor;
pub use training::{AdamState, TrainConfig};
pub use video::{BlockDataset, RawVideo, SyntheticKind};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Frame64 = Frame<f64>;
pub type Frame32 = Frame<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type Matrix64 = MeasurementMatrix<f64>;
pub type Matrix32 = MeasurementMatrix<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
pub type Dataset64 = BlockDataset<f64>;
