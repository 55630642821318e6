//! 8-bit luma video: the GSV container, PNG sequence import, a seeded
//! synthetic generator and block dataset construction.
//!
//! GSV layout (little-endian):
//!
//! ```text
//! 0   "GSV1"
//! 4   u32 width
//! 8   u32 height
//! 12  u32 frame count
//! 16  width * height * frames luma bytes, row-major, frame-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{BlockPos, Frame};
use crate::mh::SearchWindow;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const GSV_MAGIC: &[u8; 4] = b"GSV1";
const GSV_HEADER_LEN: u64 = 16;

/// Raw 8-bit luma frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawVideo {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// `width * height * frames` samples.
    pub luma: Vec<u8>,
}

impl RawVideo {
    pub fn new(width: usize, height: usize, frames: usize, luma: Vec<u8>) -> Result<Self> {
        if luma.len() != width * height * frames {
            return Err(Error::dim(
                "RawVideo samples",
                width * height * frames,
                luma.len(),
            ));
        }
        Ok(Self {
            width,
            height,
            frames,
            luma,
        })
    }

    pub fn frame_bytes(&self, index: usize) -> &[u8] {
        let n = self.width * self.height;
        &self.luma[index * n..(index + 1) * n]
    }

    /// Frame `index` scaled to `[0, 1]` by exactly `1 / 255`.
    pub fn frame<T: Scalar>(&self, index: usize) -> Frame<T> {
        let inv = T::one() / T::of(255.0);
        let data = self
            .frame_bytes(index)
            .iter()
            .map(|&v| T::of(v as f64) * inv)
            .collect();
        Frame::new(self.width, self.height, data).expect("frame geometry matches")
    }

    pub fn to_frames<T: Scalar>(&self) -> Vec<Frame<T>> {
        (0..self.frames).map(|i| self.frame(i)).collect()
    }

    /// Quantizes `[0, 1]` frames to 8 bits (rounded, clamped).
    pub fn from_frames<T: Scalar>(frames: &[Frame<T>]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Config("no frames to store".into()))?;
        let (w, h) = (first.width(), first.height());
        let mut luma = Vec::with_capacity(w * h * frames.len());
        for f in frames {
            if (f.width(), f.height()) != (w, h) {
                return Err(Error::dim(
                    "frame geometry",
                    format!("{w}x{h}"),
                    format!("{}x{}", f.width(), f.height()),
                ));
            }
            luma.extend(
                f.data()
                    .iter()
                    .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8),
            );
        }
        Self::new(w, h, frames.len(), luma)
    }

    /// Center crop to `width x height`.
    pub fn center_crop(&self, width: usize, height: usize) -> Result<Self> {
        if width > self.width || height > self.height {
            return Err(Error::Config(format!(
                "cannot crop {width}x{height} from a {}x{} video",
                self.width, self.height
            )));
        }
        let (r0, c0) = ((self.height - height) / 2, (self.width - width) / 2);
        let mut luma = Vec::with_capacity(width * height * self.frames);
        for f in 0..self.frames {
            let src = self.frame_bytes(f);
            for r in r0..r0 + height {
                luma.extend_from_slice(&src[r * self.width + c0..][..width]);
            }
        }
        Self::new(width, height, self.frames, luma)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(GSV_HEADER_LEN as usize + self.luma.len());
        out.extend_from_slice(GSV_MAGIC);
        for v in [self.width, self.height, self.frames] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.luma);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != GSV_MAGIC {
            return Err(Error::format(0, "missing GSV1 magic"));
        }
        if bytes.len() < GSV_HEADER_LEN as usize {
            return Err(Error::format(
                bytes.len() as u64,
                format!(
                    "truncated header: expected {GSV_HEADER_LEN} bytes, got {}",
                    bytes.len()
                ),
            ));
        }
        let field =
            |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (w, h, f) = (field(0), field(1), field(2));
        let expected = (w as u64) * (h as u64) * (f as u64);
        let actual = bytes.len() as u64 - GSV_HEADER_LEN;
        if actual != expected {
            return Err(Error::format(
                GSV_HEADER_LEN + actual.min(expected),
                format!("payload length mismatch: expected {expected} luma bytes, got {actual}"),
            ));
        }
        Self::new(w, h, f, bytes[GSV_HEADER_LEN as usize..].to_vec())
    }
}

pub fn read_gsv(path: impl AsRef<Path>) -> Result<RawVideo> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    RawVideo::from_bytes(&bytes)
}

pub fn write_gsv(path: impl AsRef<Path>, video: &RawVideo) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&video.to_bytes())?;
    w.flush()?;
    Ok(())
}

/// Reads `frame_000000.png, frame_000001.png, ...` (8-bit grayscale) from a
/// directory until the first missing index.
pub fn import_png_sequence(dir: impl AsRef<Path>) -> Result<RawVideo> {
    let dir = dir.as_ref();
    let mut frames: Vec<Vec<u8>> = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    loop {
        let path = dir.join(format!("frame_{:06}.png", frames.len()));
        if !path.exists() {
            break;
        }
        let decoder = png::Decoder::new(BufReader::new(File::open(&path)?));
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::format(0, format!("{}: {e}", path.display())))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::format(0, format!("{}: {e}", path.display())))?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::format(
                0,
                format!(
                    "{}: expected 8-bit grayscale, got {:?} {:?}",
                    path.display(),
                    info.color_type,
                    info.bit_depth
                ),
            ));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        if *dims.get_or_insert((w, h)) != (w, h) {
            return Err(Error::Config(format!(
                "{} has a different size",
                path.display()
            )));
        }
        buf.truncate(info.buffer_size());
        let mut packed = Vec::with_capacity(w * h);
        for row in buf.chunks(info.line_size).take(h) {
            packed.extend_from_slice(&row[..w]);
        }
        frames.push(packed);
    }
    let (w, h) =
        dims.ok_or_else(|| Error::Config(format!("no frame_000000.png in {}", dir.display())))?;
    RawVideo::new(w, h, frames.len(), frames.concat())
}

/// Writes each frame as `frame_%06d.png`.
pub fn export_png_sequence(video: &RawVideo, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for i in 0..video.frames {
        let file = File::create(dir.join(format!("frame_{i:06}.png")))?;
        let mut enc = png::Encoder::new(
            BufWriter::new(file),
            video.width as u32,
            video.height as u32,
        );
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::format(0, e.to_string()))?;
        writer
            .write_image_data(video.frame_bytes(i))
            .map_err(|e| Error::format(0, e.to_string()))?;
    }
    Ok(())
}

/// Kinds of synthetic clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Global integer-pixel pan over a textured background.
    Translate,
    /// A textured sprite reflecting off the borders of a static background.
    Bounce,
    /// Every frame identical.
    Static,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translate" => Ok(Self::Translate),
            "bounce" => Ok(Self::Bounce),
            "static" => Ok(Self::Static),
            other => Err(Error::Config(format!(
                "unknown synthetic kind {other:?} (translate|bounce|static)"
            ))),
        }
    }
}

/// Smooth multi-octave value noise plus a few hard-edged shapes, in [0, 1].
fn texture(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = vec![0.0f64; width * height];
    for (cell, amp) in [(32usize, 0.45), (16, 0.25), (8, 0.15), (4, 0.1)] {
        let gw = width / cell + 2;
        let gh = height / cell + 2;
        let grid: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>() - 0.5).collect();
        for r in 0..height {
            let fy = r as f64 / cell as f64;
            let (gy, ty) = (fy.floor() as usize, fy.fract());
            for c in 0..width {
                let fx = c as f64 / cell as f64;
                let (gx, tx) = (fx.floor() as usize, fx.fract());
                let (sy, sx) = (ty * ty * (3.0 - 2.0 * ty), tx * tx * (3.0 - 2.0 * tx));
                let g = |y: usize, x: usize| grid[y * gw + x];
                let top = g(gy, gx) * (1.0 - sx) + g(gy, gx + 1) * sx;
                let bot = g(gy + 1, gx) * (1.0 - sx) + g(gy + 1, gx + 1) * sx;
                img[r * width + c] += amp * (top * (1.0 - sy) + bot * sy);
            }
        }
    }
    let shapes = (width * height / 2048).max(2);
    for _ in 0..shapes {
        let (cy, cx) = (
            rng.random_range(0..height) as f64,
            rng.random_range(0..width) as f64,
        );
        let rad = rng.random_range(3.0..12.0);
        let delta = rng.random_range(-0.3..0.3);
        let square = rng.random_bool(0.5);
        for r in 0..height {
            for c in 0..width {
                let (dy, dx) = (r as f64 - cy, c as f64 - cx);
                let inside = if square {
                    dy.abs() < rad && dx.abs() < rad
                } else {
                    dy * dy + dx * dx < rad * rad
                };
                if inside {
                    img[r * width + c] += delta;
                }
            }
        }
    }
    img.iter().map(|v| (0.5 + v).clamp(0.02, 0.98)).collect()
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Seeded synthetic clip. `velocity` is `(dx, dy)` in pixels per frame.
///
/// For `Translate`, frame `t` satisfies `frame_t(r, c) = frame_{t-1}(r - dy, c - dx)`
/// wherever both sides are inside the frame.
pub fn make_synthetic(
    kind: SyntheticKind,
    width: usize,
    height: usize,
    frames: usize,
    velocity: (isize, isize),
    seed: u64,
) -> Result<RawVideo> {
    if width == 0 || height == 0 || frames == 0 {
        return Err(Error::Config(
            "synthetic video needs positive dimensions and frame count".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (vx, vy) = velocity;
    let mut luma = Vec::with_capacity(width * height * frames);
    match kind {
        SyntheticKind::Static => {
            let tex: Vec<u8> = texture(width, height, &mut rng)
                .into_iter()
                .map(quantize)
                .collect();
            for _ in 0..frames {
                luma.extend_from_slice(&tex);
            }
        }
        SyntheticKind::Translate => {
            let span = frames - 1;
            let cw = width + vx.unsigned_abs() * span;
            let ch = height + vy.unsigned_abs() * span;
            let canvas: Vec<u8> = texture(cw, ch, &mut rng)
                .into_iter()
                .map(quantize)
                .collect();
            // canvas column for frame t, column c: c - t*vx + offset
            let ox = if vx > 0 { (vx as usize) * span } else { 0 };
            let oy = if vy > 0 { (vy as usize) * span } else { 0 };
            for t in 0..frames {
                let r0 = (oy as isize - t as isize * vy) as usize;
                let c0 = (ox as isize - t as isize * vx) as usize;
                for r in 0..height {
                    luma.extend_from_slice(&canvas[(r0 + r) * cw + c0..][..width]);
                }
            }
        }
        SyntheticKind::Bounce => {
            let bg: Vec<u8> = texture(width, height, &mut rng)
                .into_iter()
                .map(quantize)
                .collect();
            let side = 24.min(width).min(height);
            let sprite: Vec<u8> = texture(side, side, &mut rng)
                .into_iter()
                .map(|v| quantize(1.0 - v))
                .collect();
            let (max_x, max_y) = ((width - side) as isize, (height - side) as isize);
            let (mut x, mut y) = (
                rng.random_range(0..=max_x as i64) as isize,
                rng.random_range(0..=max_y as i64) as isize,
            );
            let (mut dx, mut dy) = (vx, vy);
            for _ in 0..frames {
                let mut f = bg.clone();
                for r in 0..side {
                    let dst = (y as usize + r) * width + x as usize;
                    f[dst..dst + side].copy_from_slice(&sprite[r * side..(r + 1) * side]);
                }
                luma.extend_from_slice(&f);
                let reflect = |p: &mut isize, d: &mut isize, max: isize| {
                    *p += *d;
                    if *p < 0 {
                        *p = -*p;
                        *d = -*d;
                    }
                    if *p > max {
                        *p = 2 * max - *p;
                        *d = -*d;
                    }
                    *p = (*p).clamp(0, max);
                };
                reflect(&mut x, &mut dx, max_x);
                reflect(&mut y, &mut dy, max_y);
            }
        }
    }
    RawVideo::new(width, height, frames, luma)
}

/// Reference data for one training block: the part of the previous frame
/// that the search window can reach, and where the block sits inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct RefPatch<T> {
    pub patch: Frame<T>,
    pub pos: BlockPos,
}

impl<T: Scalar> RefPatch<T> {
    /// Extracts the neighbourhood of the block at `pos` in `frame`. Clamping
    /// candidate origins inside the patch gives the same candidates as
    /// clamping them inside the whole frame.
    pub fn extract(
        frame: &Frame<T>,
        pos: BlockPos,
        block_size: usize,
        window: &SearchWindow,
    ) -> Result<Self> {
        let span = block_size + 2 * window.radius;
        let pw = span.min(frame.width());
        let ph = span.min(frame.height());
        let r0 = pos.0.saturating_sub(window.radius).min(frame.height() - ph);
        let c0 = pos.1.saturating_sub(window.radius).min(frame.width() - pw);
        Ok(Self {
            patch: frame.crop((r0, c0), pw, ph)?,
            pos: (pos.0 - r0, pos.1 - c0),
        })
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSample<T> {
    pub x: Tensor<T>,
    pub reference: Option<RefPatch<T>>,
    pub video: usize,
    pub frame: usize,
    pub pos: BlockPos,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub block_size: usize,
    pub window: SearchWindow,
    /// Side of the centre crop; `None` keeps the full frame.
    pub crop: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            block_size: 16,
            window: SearchWindow::default(),
            crop: Some(160),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockDataset<T> {
    pub samples: Vec<BlockSample<T>>,
}

impl<T: Scalar> BlockDataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn extend(&mut self, other: BlockDataset<T>) {
        self.samples.extend(other.samples);
    }

    /// Splits by video index: a seeded `holdout` fraction of videos goes to
    /// the second set.
    pub fn split_by_video(self, holdout: f64, seed: u64) -> (Self, Self) {
        let mut videos: Vec<usize> = self.samples.iter().map(|s| s.video).collect();
        videos.sort_unstable();
        videos.dedup();
        videos.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_hold = ((videos.len() as f64 * holdout).round() as usize).min(videos.len());
        let held: Vec<usize> = videos[..n_hold].to_vec();
        let (b, a): (Vec<_>, Vec<_>) = self
            .samples
            .into_iter()
            .partition(|s| held.contains(&s.video));
        (Self { samples: a }, Self { samples: b })
    }
}

/// Crops, scales to `[0, 1]` and tiles a video into training samples.
/// Blocks of frame `t >= 1` carry the neighbourhood from frame `t - 1`.
pub fn build_dataset<T: Scalar>(
    video: &RawVideo,
    config: &DatasetConfig,
    video_index: usize,
) -> Result<BlockDataset<T>> {
    config.window.validate()?;
    if video.frames < 2 {
        return Err(Error::Config(format!(
            "dataset videos need at least 2 frames, got {}",
            video.frames
        )));
    }
    let cropped = match config.crop {
        Some(side) => {
            if video.width < side || video.height < side {
                return Err(Error::Config(format!(
                    "video {}x{} is smaller than the {side}x{side} crop",
                    video.width, video.height
                )));
            }
            video.center_crop(side, side)?
        }
        None => video.clone(),
    };
    let b = config.block_size;
    let frames: Vec<Frame<T>> = cropped.to_frames();
    let positions = frames[0].block_positions(b)?;
    let mut samples = Vec::with_capacity(positions.len() * frames.len());
    for (t, frame) in frames.iter().enumerate() {
        for &pos in &positions {
            let reference = if t > 0 {
                Some(RefPatch::extract(&frames[t - 1], pos, b, &config.window)?)
            } else {
                None
            };
            samples.push(BlockSample {
                x: frame.block(pos, b)?,
                reference,
                video: video_index,
                frame: t,
                pos,
            });
        }
    }
    Ok(BlockDataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mh::gather_hypotheses;

    #[test]
    fn gsv_round_trip_and_errors() {
        let v = make_synthetic(SyntheticKind::Bounce, 32, 24, 3, (3, 2), 1).unwrap();
        let bytes = v.to_bytes();
        let back = RawVideo::from_bytes(&bytes).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_bytes(), bytes);

        let err = RawVideo::from_bytes(&bytes[..bytes.len() - 5])
            .unwrap_err()
            .to_string();
        assert!(err.contains(&format!("expected {}", 32 * 24 * 3)), "{err}");
        assert!(err.contains(&format!("got {}", 32 * 24 * 3 - 5)), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            RawVideo::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(RawVideo::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn uniform_file_scales() {
        let v = RawVideo::new(16, 16, 1, vec![128; 256]).unwrap();
        let f: Frame<f64> = v.frame(0);
        assert!(f.data().iter().all(|&p| p == 128.0 / 255.0));
        let edge = RawVideo::new(2, 1, 1, vec![0, 255])
            .unwrap()
            .frame::<f64>(0);
        assert_eq!(edge.data(), &[0.0, 1.0]);
    }

    #[test]
    fn synthetic_contracts() {
        let s = make_synthetic(SyntheticKind::Static, 48, 32, 4, (0, 0), 5).unwrap();
        for t in 1..4 {
            assert_eq!(s.frame_bytes(t), s.frame_bytes(0));
        }
        let tr = make_synthetic(SyntheticKind::Translate, 48, 32, 4, (2, 0), 5).unwrap();
        for t in 1..4 {
            let (cur, prev) = (tr.frame_bytes(t), tr.frame_bytes(t - 1));
            for r in 0..32 {
                for c in 2..48 {
                    assert_eq!(cur[r * 48 + c], prev[r * 48 + c - 2]);
                }
            }
        }
        let neg = make_synthetic(SyntheticKind::Translate, 32, 32, 3, (-2, 4), 6).unwrap();
        let (cur, prev) = (neg.frame_bytes(2), neg.frame_bytes(1));
        for r in 4..32 {
            for c in 0..30 {
                assert_eq!(cur[r * 32 + c], prev[(r - 4) * 32 + c + 2]);
            }
        }
        assert_eq!(
            make_synthetic(SyntheticKind::Translate, 48, 32, 4, (2, 0), 5).unwrap(),
            tr
        );
        assert!("zoom".parse::<SyntheticKind>().is_err());
    }

    #[test]
    fn dataset_block_counts_and_references() {
        let v = make_synthetic(SyntheticKind::Translate, 176, 170, 2, (2, 2), 3).unwrap();
        let ds: BlockDataset<f64> = build_dataset(&v, &DatasetConfig::default(), 0).unwrap();
        assert_eq!(ds.len(), 200);
        assert!(ds.samples[..100].iter().all(|s| s.reference.is_none()));
        assert!(ds.samples[100..].iter().all(|s| s.reference.is_some()));

        let small = make_synthetic(SyntheticKind::Static, 100, 100, 2, (0, 0), 3).unwrap();
        assert!(build_dataset::<f64>(&small, &DatasetConfig::default(), 0).is_err());
        let single = make_synthetic(SyntheticKind::Static, 160, 160, 1, (0, 0), 3).unwrap();
        assert!(build_dataset::<f64>(&single, &DatasetConfig::default(), 0).is_err());
    }

    #[test]
    fn patch_gather_equals_frame_gather() {
        let v = make_synthetic(SyntheticKind::Translate, 64, 48, 1, (0, 0), 9).unwrap();
        let f: Frame<f64> = v.frame(0);
        let window = SearchWindow::default();
        for pos in f.block_positions(16).unwrap() {
            let p = RefPatch::extract(&f, pos, 16, &window).unwrap();
            let a = gather_hypotheses(&f, pos, 16, &window).unwrap();
            let b = gather_hypotheses(&p.patch, p.pos, 16, &window).unwrap();
            assert_eq!(a.matrix(), b.matrix(), "block at {pos:?}");
        }
    }

    #[test]
    fn png_sequence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = make_synthetic(SyntheticKind::Bounce, 40, 24, 3, (1, 1), 2).unwrap();
        export_png_sequence(&v, dir.path()).unwrap();
        assert_eq!(import_png_sequence(dir.path()).unwrap(), v);
        assert!(import_png_sequence(dir.path().join("missing")).is_err());
    }
}
