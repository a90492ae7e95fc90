//! Frame stacks and their on-disk format.
//!
//! A stack file is a 32-byte little-endian header followed by the frames,
//! frame-major and row-major within a frame:
//!
//! | offset | size | field                                        |
//! |--------|------|----------------------------------------------|
//! | 0      | 4    | magic `BPSR`                                 |
//! | 4      | 2    | format version (`1`)                         |
//! | 6      | 2    | dtype code: 0 = u16, 1 = f32, 2 = packed u1  |
//! | 8      | 4    | width                                        |
//! | 12     | 4    | height                                       |
//! | 16     | 4    | frame count                                  |
//! | 20     | 12   | reserved, zero                               |
//!
//! Packed binary frames store 8 pixels per byte, most significant bit first,
//! with every row padded to a whole number of bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const MAGIC: &[u8; 4] = b"BPSR";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;

/// Pixel representation of a stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dtype {
    U16Counts,
    F32Analog,
    Binary,
}

impl Dtype {
    pub fn code(self) -> u16 {
        match self {
            Dtype::U16Counts => 0,
            Dtype::F32Analog => 1,
            Dtype::Binary => 2,
        }
    }

    pub fn from_code(code: u16) -> Result<Self> {
        match code {
            0 => Ok(Dtype::U16Counts),
            1 => Ok(Dtype::F32Analog),
            2 => Ok(Dtype::Binary),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    fn admits(self, v: f32) -> bool {
        match self {
            Dtype::U16Counts => v.fract() == 0.0 && (0.0..=65535.0).contains(&v),
            Dtype::F32Analog => v.is_finite(),
            Dtype::Binary => v == 0.0 || v == 1.0,
        }
    }
}

/// Random access to an ordered sequence of equally sized frames.
///
/// Implemented by in-memory stacks and by the simulator, which renders
/// frames on demand so that large stacks never need to be materialized.
pub trait FrameSource: Sync {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn count(&self) -> usize;
    /// Writes frame `index` into `out` (length `width * height`).
    fn frame_into(&self, index: usize, out: &mut [f32]);
}

/// An ordered sequence of `count` frames of `width x height` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStack {
    width: usize,
    height: usize,
    dtype: Dtype,
    data: Vec<f32>,
}

impl FrameStack {
    pub fn new(width: usize, height: usize, dtype: Dtype, frames: Vec<Vec<f32>>) -> Result<Self> {
        let pixels = width * height;
        let mut data = Vec::with_capacity(pixels * frames.len());
        for (i, f) in frames.iter().enumerate() {
            if f.len() != pixels {
                return Err(Error::Shape(format!(
                    "frame {i} has {} pixels, expected {width}x{height}",
                    f.len()
                )));
            }
            data.extend_from_slice(f);
        }
        Self::from_flat(width, height, dtype, data)
    }

    pub fn from_flat(width: usize, height: usize, dtype: Dtype, data: Vec<f32>) -> Result<Self> {
        let pixels = width * height;
        if pixels == 0 {
            return Err(Error::Shape("frames must have at least one pixel".into()));
        }
        if data.len() % pixels != 0 {
            return Err(Error::Shape(format!(
                "{} values do not divide into {width}x{height} frames",
                data.len()
            )));
        }
        let count = data.len() / pixels;
        if count < 2 {
            return Err(Error::InsufficientData(format!(
                "a stack needs at least 2 frames, got {count}"
            )));
        }
        if let Some(pos) = data.iter().position(|&v| !dtype.admits(v)) {
            return Err(Error::Format(format!(
                "value {} in frame {} is not representable as {dtype:?}",
                data[pos],
                pos / pixels
            )));
        }
        Ok(FrameStack {
            width,
            height,
            dtype,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn count(&self) -> usize {
        self.data.len() / (self.width * self.height)
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn frame(&self, index: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[index * n..(index + 1) * n]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.width * self.height)
    }

    /// Intensity image: the mean of the first `count - 1` frames.
    pub fn mean_image(&self) -> Image {
        let n = self.count() - 1;
        let mut acc = vec![0.0f64; self.width * self.height];
        for f in self.frames().take(n) {
            for (a, &v) in acc.iter_mut().zip(f) {
                *a += v as f64;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        Image::native(self.width, self.height, acc)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = [0u8; HEADER_LEN];
        header[0..4].copy_from_slice(MAGIC);
        header[4..6].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        header[6..8].copy_from_slice(&self.dtype.code().to_le_bytes());
        header[8..12].copy_from_slice(&(self.width as u32).to_le_bytes());
        header[12..16].copy_from_slice(&(self.height as u32).to_le_bytes());
        header[16..20].copy_from_slice(&(self.count() as u32).to_le_bytes());
        w.write_all(&header)?;

        match self.dtype {
            Dtype::U16Counts => {
                let mut buf = Vec::with_capacity(self.data.len() * 2);
                for &v in &self.data {
                    buf.extend_from_slice(&(v as u16).to_le_bytes());
                }
                w.write_all(&buf)?;
            }
            Dtype::F32Analog => {
                let mut buf = Vec::with_capacity(self.data.len() * 4);
                for &v in &self.data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
            Dtype::Binary => {
                let row_bytes = self.width.div_ceil(8);
                let mut row = vec![0u8; row_bytes];
                for r in self.data.chunks_exact(self.width) {
                    row.fill(0);
                    for (x, &v) in r.iter().enumerate() {
                        if v != 0.0 {
                            row[x / 8] |= 0x80 >> (x % 8);
                        }
                    }
                    w.write_all(&row)?;
                }
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("truncated frame stack: {e}"));
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header).map_err(fmt)?;
        if &header[0..4] != MAGIC {
            return Err(Error::Format("bad magic, not a frame stack".into()));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dtype = Dtype::from_code(u16::from_le_bytes([header[6], header[7]]))?;
        let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap()) as usize;
        let (width, height, count) = (u32_at(8), u32_at(12), u32_at(16));
        let pixels = width
            .checked_mul(height)
            .ok_or_else(|| Error::Format("frame size overflows".into()))?;

        let data = match dtype {
            Dtype::U16Counts => {
                let mut buf = vec![0u8; pixels * count * 2];
                r.read_exact(&mut buf).map_err(fmt)?;
                buf.chunks_exact(2)
                    .map(|b| u16::from_le_bytes([b[0], b[1]]) as f32)
                    .collect()
            }
            Dtype::F32Analog => {
                let mut buf = vec![0u8; pixels * count * 4];
                r.read_exact(&mut buf).map_err(fmt)?;
                buf.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect()
            }
            Dtype::Binary => {
                let row_bytes = width.div_ceil(8);
                let mut buf = vec![0u8; row_bytes * height * count];
                r.read_exact(&mut buf).map_err(fmt)?;
                let mut data = Vec::with_capacity(pixels * count);
                for row in buf.chunks_exact(row_bytes.max(1)) {
                    for x in 0..width {
                        data.push(((row[x / 8] >> (7 - x % 8)) & 1) as f32);
                    }
                }
                data
            }
        };
        FrameStack::from_flat(width, height, dtype, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

impl FrameSource for FrameStack {
    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    fn count(&self) -> usize {
        FrameStack::count(self)
    }

    fn frame_into(&self, index: usize, out: &mut [f32]) {
        out.copy_from_slice(self.frame(index));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(dtype: Dtype) -> FrameStack {
        let frames = (0..3)
            .map(|l| {
                (0..(11 * 3))
                    .map(|i| match dtype {
                        Dtype::Binary => ((i + l) % 3 == 0) as u8 as f32,
                        Dtype::U16Counts => ((i * 7 + l) % 300) as f32,
                        Dtype::F32Analog => i as f32 * 0.25 - l as f32,
                    })
                    .collect()
            })
            .collect();
        FrameStack::new(11, 3, dtype, frames).unwrap()
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let s = stack(Dtype::U16Counts);
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"BPSR");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..8], &[0, 0]);
        assert_eq!(&buf[8..12], &[11, 0, 0, 0]);
        assert_eq!(&buf[12..16], &[3, 0, 0, 0]);
        assert_eq!(&buf[16..20], &[3, 0, 0, 0]);
        assert!(buf[20..32].iter().all(|&b| b == 0));
        assert_eq!(buf.len(), 32 + 11 * 3 * 3 * 2);
    }

    #[test]
    fn binary_rows_are_padded_msb_first() {
        let s = stack(Dtype::Binary);
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        // 11 pixels per row -> 2 bytes per row.
        assert_eq!(buf.len(), 32 + 2 * 3 * 3);
        // frame 0, row 0: pixels 0,3,6,9 set -> 1001_0010 0100_0000
        assert_eq!(buf[32], 0b1001_0010);
        assert_eq!(buf[33], 0b0100_0000);
    }

    #[test]
    fn all_dtypes_round_trip() {
        for dtype in [Dtype::U16Counts, Dtype::F32Analog, Dtype::Binary] {
            let s = stack(dtype);
            let mut buf = Vec::new();
            s.write_to(&mut buf).unwrap();
            assert_eq!(FrameStack::read_from(&buf[..]).unwrap(), s);
        }
    }

    #[test]
    fn rejects_invalid_stacks() {
        assert!(matches!(
            FrameStack::new(2, 2, Dtype::U16Counts, vec![vec![0.0; 4]]),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            FrameStack::new(2, 2, Dtype::U16Counts, vec![vec![0.0; 4], vec![0.0; 3]]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            FrameStack::new(2, 1, Dtype::Binary, vec![vec![0.0, 2.0], vec![1.0, 0.0]]),
            Err(Error::Format(_))
        ));
        let mut buf = Vec::new();
        stack(Dtype::U16Counts).write_to(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(FrameStack::read_from(&buf[..]).is_err());
        let mut good = Vec::new();
        stack(Dtype::U16Counts).write_to(&mut good).unwrap();
        assert!(FrameStack::read_from(&good[..40]).is_err());
    }
}
