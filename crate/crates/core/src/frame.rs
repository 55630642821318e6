//! Luma frames and their block tiling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A single-channel frame, row-major, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Pixel origin `(row, col)` of a block.
pub type BlockPos = (usize, usize);

impl<T: Scalar> Frame<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dim("Frame::new", width * height, data.len()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    /// Rasterized `size x size` block at `pos`.
    pub fn block(&self, pos: BlockPos, size: usize) -> Result<Tensor<T>> {
        let (r, c) = pos;
        if r + size > self.height || c + size > self.width {
            return Err(Error::Bounds(format!(
                "block {size}x{size} at ({r},{c}) exceeds {}x{} frame",
                self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(size * size);
        for row in r..r + size {
            out.extend_from_slice(&self.data[row * self.width + c..][..size]);
        }
        Ok(Tensor::from_vec(out))
    }

    /// Sub-frame copy with top-left corner at `pos`.
    pub fn crop(&self, pos: BlockPos, width: usize, height: usize) -> Result<Self> {
        let (r, c) = pos;
        if r + height > self.height || c + width > self.width {
            return Err(Error::Bounds(format!(
                "crop {width}x{height} at ({r},{c}) exceeds {}x{} frame",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height);
        for row in r..r + height {
            data.extend_from_slice(&self.data[row * self.width + c..][..width]);
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Block origins in raster order for a non-overlapping tiling.
    pub fn block_positions(&self, size: usize) -> Result<Vec<BlockPos>> {
        block_grid(self.width, self.height, size)
    }

    /// Tiles the frame into rasterized blocks in raster order.
    pub fn to_blocks(&self, size: usize) -> Result<Vec<Tensor<T>>> {
        self.block_positions(size)?
            .into_iter()
            .map(|p| self.block(p, size))
            .collect()
    }

    /// Inverse of [`Frame::to_blocks`].
    pub fn from_blocks(
        width: usize,
        height: usize,
        size: usize,
        blocks: &[Tensor<T>],
    ) -> Result<Self> {
        let positions = block_grid(width, height, size)?;
        if positions.len() != blocks.len() {
            return Err(Error::dim(
                "Frame::from_blocks block count",
                positions.len(),
                blocks.len(),
            ));
        }
        let mut data = vec![T::zero(); width * height];
        for (&(r, c), block) in positions.iter().zip(blocks) {
            if block.len() != size * size {
                return Err(Error::dim(
                    "Frame::from_blocks block length",
                    size * size,
                    block.len(),
                ));
            }
            for (dy, src) in block.data().chunks_exact(size).enumerate() {
                data[(r + dy) * width + c..][..size].copy_from_slice(src);
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn clamp01(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|v| v.max(T::zero()).min(T::one()))
                .collect(),
        }
    }
}

/// Raster-order block origins; both dimensions must be multiples of `size`.
pub fn block_grid(width: usize, height: usize, size: usize) -> Result<Vec<BlockPos>> {
    if size == 0 || !width.is_multiple_of(size) || !height.is_multiple_of(size) {
        return Err(Error::Config(format!(
            "frame {width}x{height} is not tileable by {size}x{size} blocks"
        )));
    }
    Ok((0..height / size)
        .flat_map(|br| (0..width / size).map(move |bc| (br * size, bc * size)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Frame<f64> {
        Frame::new(
            w,
            h,
            (0..w * h).map(|i| i as f64 / (w * h) as f64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn blocks_round_trip() {
        let f = ramp(32, 16);
        let blocks = f.to_blocks(8).unwrap();
        assert_eq!(blocks.len(), 8);
        assert_eq!(Frame::from_blocks(32, 16, 8, &blocks).unwrap(), f);
    }

    #[test]
    fn block_bounds() {
        let f = ramp(16, 16);
        assert!(f.block((8, 8), 8).is_ok());
        assert!(matches!(f.block((9, 8), 8), Err(Error::Bounds(_))));
        assert!(f.to_blocks(5).is_err());
    }

    #[test]
    fn clamp_is_idempotent() {
        let f = Frame::new(2, 1, vec![-0.5f64, 1.5]).unwrap();
        let c = f.clamp01();
        assert_eq!(c.data(), &[0.0, 1.0]);
        assert_eq!(c.clamp01(), c);
    }
}
