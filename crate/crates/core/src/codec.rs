//! Encoder and the measurements container.
//!
//! ```text
//! 0    "CSMM"
//! 4    u32 header length H (LE)
//! 8    H bytes of UTF-8 JSON header
//! 8+H  f64 LE measurements: frame-major, blocks in raster order, M per block
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_prefixed_json, Payload};
use crate::error::{Error, Result};
use crate::frame::block_grid;
use crate::network::{McMode, Model};
use crate::scalar::Scalar;
use crate::sensing::{add_noise, measure, MeasurementMatrix, MATRIX_RNG_ID};
use crate::tensor::Tensor;
use crate::video::RawVideo;

pub const MEASUREMENTS_MAGIC: &[u8; 4] = b"CSMM";
pub const MEASUREMENTS_VERSION: u32 = 1;

/// Self-describing header of a measurements file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementHeader {
    pub version: u32,
    pub block_size: usize,
    pub measurements: usize,
    pub compression_factor: usize,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub matrix_seed: u64,
    pub matrix_rng: String,
    pub snr_db: Option<f64>,
    pub noise_seed: Option<u64>,
}

/// Encoded video: one `[M]` vector per block, grouped by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedVideo<T> {
    pub header: MeasurementHeader,
    pub frames: Vec<Vec<Tensor<T>>>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Noise seed of one block, derived from the file-level seed.
pub fn block_noise_seed(noise_seed: u64, frame: usize, block: usize) -> u64 {
    splitmix64(splitmix64(noise_seed ^ (frame as u64).rotate_left(32)) ^ block as u64)
}

/// Measures every block of every frame. With `snr_db` set, each block gets
/// independent noise; all-zero blocks carry no energy and stay noiseless.
pub fn encode_video<T: Scalar>(
    phi: &MeasurementMatrix<T>,
    block_size: usize,
    video: &RawVideo,
    snr_db: Option<f64>,
    noise_seed: u64,
) -> Result<EncodedVideo<T>> {
    if phi.cols() != block_size * block_size {
        return Err(Error::dim(
            "matrix columns",
            block_size * block_size,
            phi.cols(),
        ));
    }
    let positions = block_grid(video.width, video.height, block_size)?;
    let mut frames = Vec::with_capacity(video.frames);
    for f in 0..video.frames {
        let frame = video.frame::<T>(f);
        let mut blocks = Vec::with_capacity(positions.len());
        for (i, &pos) in positions.iter().enumerate() {
            let y = measure(phi, &frame.block(pos, block_size)?)?;
            let y = match snr_db {
                Some(snr) if y.norm_sq().as_f64() > 0.0 => {
                    add_noise(&y, snr, block_noise_seed(noise_seed, f, i))?
                }
                _ => y,
            };
            blocks.push(y);
        }
        frames.push(blocks);
    }
    Ok(EncodedVideo {
        header: MeasurementHeader {
            version: MEASUREMENTS_VERSION,
            block_size,
            measurements: phi.rows(),
            compression_factor: phi.cols() / phi.rows(),
            width: video.width,
            height: video.height,
            frames: video.frames,
            matrix_seed: phi.seed(),
            matrix_rng: MATRIX_RNG_ID.to_string(),
            snr_db,
            noise_seed: snr_db.map(|_| noise_seed),
        },
        frames,
    })
}

impl<T: Scalar> EncodedVideo<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        let blocks = (h.width / h.block_size.max(1)) * (h.height / h.block_size.max(1));
        if self.frames.len() != h.frames || self.frames.iter().any(|f| f.len() != blocks) {
            return Err(Error::Config(
                "encoded frames disagree with the header geometry".into(),
            ));
        }
        let json = serde_json::to_vec(h)?;
        let mut out = Vec::with_capacity(8 + json.len() + 8 * h.frames * blocks * h.measurements);
        out.extend_from_slice(MEASUREMENTS_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for y in self.frames.iter().flatten() {
            if y.len() != h.measurements {
                return Err(Error::dim("measurement vector", h.measurements, y.len()));
            }
            for v in y.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, start): (MeasurementHeader, usize) =
            read_prefixed_json(bytes, MEASUREMENTS_MAGIC, None)?;
        if header.version != MEASUREMENTS_VERSION {
            return Err(Error::format(
                8,
                format!("unsupported measurements version {}", header.version),
            ));
        }
        if header.block_size == 0 || header.measurements == 0 {
            return Err(Error::format(
                8,
                "block size and measurement count must be positive",
            ));
        }
        let blocks = block_grid(header.width, header.height, header.block_size)?.len();
        let m = header.measurements;
        let mut payload = Payload::new(bytes, start, header.frames * blocks * m)?;
        let mut frames = Vec::with_capacity(header.frames);
        for _ in 0..header.frames {
            let mut f = Vec::with_capacity(blocks);
            for _ in 0..blocks {
                f.push(Tensor::new(&[m], payload.take(m)?)?);
            }
            frames.push(f);
        }
        payload.finish()?;
        Ok(Self { header, frames })
    }

    /// Refuses a model whose matrix differs from the one used to encode.
    pub fn check_model(&self, model: &Model<T>) -> Result<()> {
        let h = &self.header;
        if h.matrix_rng != MATRIX_RNG_ID {
            return Err(Error::Config(format!(
                "unknown matrix generator {:?}",
                h.matrix_rng
            )));
        }
        if h.matrix_seed != model.phi.seed() {
            return Err(Error::Config(format!(
                "matrix seed mismatch: measurements use {}, model uses {}",
                h.matrix_seed,
                model.phi.seed()
            )));
        }
        if h.block_size != model.block_size() || h.measurements != model.measurements() {
            return Err(Error::Config(format!(
                "geometry mismatch: measurements have B={} M={}, model has B={} M={}",
                h.block_size,
                h.measurements,
                model.block_size(),
                model.measurements()
            )));
        }
        Ok(())
    }

    /// Decodes the sequence with `model`, after checking compatibility.
    pub fn decode(&self, model: &Model<T>, mode: McMode) -> Result<RawVideo> {
        self.check_model(model)?;
        let frames =
            model.decode_video(&self.frames, self.header.width, self.header.height, mode)?;
        RawVideo::from_frames(&frames)
    }
}

pub fn write_measurements<T: Scalar>(
    path: impl AsRef<Path>,
    encoded: &EncodedVideo<T>,
) -> Result<()> {
    fs::write(path, encoded.to_bytes()?)?;
    Ok(())
}

pub fn read_measurements<T: Scalar>(path: impl AsRef<Path>) -> Result<EncodedVideo<T>> {
    EncodedVideo::from_bytes(&fs::read(path)?)
}
