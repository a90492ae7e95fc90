//! Real-valued images on the native pixel grid or on a half-pitch grid,
//! plus the raw `f64` and 16-bit PGM file formats used by the CLI.
//!
//! Raw image files (`.f64`) are a 40-byte little-endian header followed by
//! `width * height` row-major `f64` values and, when flagged, one mask byte
//! per pixel (1 = defined):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `BPSI`                            |
//! | 4      | 2    | version (`1`)                           |
//! | 6      | 2    | grid: 0 = native, 1 = half-pitch        |
//! | 8      | 4    | width                                   |
//! | 12     | 4    | height                                  |
//! | 16     | 1    | mask present                            |
//! | 17     | 7    | reserved, zero                          |
//! | 24     | 8    | origin x (half-pitch grids)             |
//! | 32     | 8    | origin y (half-pitch grids)             |

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: &[u8; 4] = b"BPSI";
const IMAGE_HEADER_LEN: usize = 40;

/// Sampling grid of an image.
///
/// On a half-pitch grid, sample `(i, j)` sits at physical position
/// `origin + (i, j) / 2`, in native pixel units where pixel `k` spans `[k, k + 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Grid {
    Native,
    HalfPitch { origin: [f64; 2] },
}

impl Grid {
    /// Samples per native pixel along each axis.
    pub fn samples_per_pixel(&self) -> f64 {
        match self {
            Grid::Native => 1.0,
            Grid::HalfPitch { .. } => 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub grid: Grid,
    pub values: Vec<f64>,
    /// Per-pixel validity; `None` means every pixel is defined.
    pub mask: Option<Vec<bool>>,
}

impl Image {
    pub fn native(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height);
        Image {
            width,
            height,
            grid: Grid::Native,
            values,
            mask: None,
        }
    }

    pub fn half_pitch(width: usize, height: usize, origin: [f64; 2], values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height);
        Image {
            width,
            height,
            grid: Grid::HalfPitch { origin },
            values,
            mask: None,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Image {
            values: vec![0.0; self.values.len()],
            mask: None,
            ..self.clone()
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    pub fn is_defined(&self, x: usize, y: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[y * self.width + x])
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.values[y * self.width..(y + 1) * self.width]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Image {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    pub fn write_raw<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = [0u8; IMAGE_HEADER_LEN];
        header[0..4].copy_from_slice(IMAGE_MAGIC);
        header[4..6].copy_from_slice(&1u16.to_le_bytes());
        let (code, origin) = match self.grid {
            Grid::Native => (0u16, [0.0, 0.0]),
            Grid::HalfPitch { origin } => (1u16, origin),
        };
        header[6..8].copy_from_slice(&code.to_le_bytes());
        header[8..12].copy_from_slice(&(self.width as u32).to_le_bytes());
        header[12..16].copy_from_slice(&(self.height as u32).to_le_bytes());
        header[16] = self.mask.is_some() as u8;
        header[24..32].copy_from_slice(&origin[0].to_le_bytes());
        header[32..40].copy_from_slice(&origin[1].to_le_bytes());
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(mask) = &self.mask {
            buf.extend(mask.iter().map(|&m| m as u8));
        }
        w.write_all(&buf)?;
        w.flush()
    }

    pub fn read_raw<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("truncated image: {e}"));
        let mut header = [0u8; IMAGE_HEADER_LEN];
        r.read_exact(&mut header).map_err(fmt)?;
        if &header[0..4] != IMAGE_MAGIC {
            return Err(Error::Format("bad magic, not a raw image".into()));
        }
        let grid_code = u16::from_le_bytes([header[6], header[7]]);
        let width = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let has_mask = header[16] != 0;
        let origin = [
            f64::from_le_bytes(header[24..32].try_into().unwrap()),
            f64::from_le_bytes(header[32..40].try_into().unwrap()),
        ];
        let grid = match grid_code {
            0 => Grid::Native,
            1 => Grid::HalfPitch { origin },
            c => return Err(Error::Format(format!("unknown grid code {c}"))),
        };
        let n = width * height;
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf).map_err(fmt)?;
        let values = buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let mask = if has_mask {
            let mut m = vec![0u8; n];
            r.read_exact(&mut m).map_err(fmt)?;
            Some(m.into_iter().map(|b| b != 0).collect())
        } else {
            None
        };
        Ok(Image {
            width,
            height,
            grid,
            values,
            mask,
        })
    }

    /// Writes a 16-bit binary graymap, linearly mapping `[min, max]` of the
    /// defined pixels onto `[0, 65535]`. Undefined pixels are written as 0.
    /// The sampling grid is recorded in a header comment.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let defined = || {
            self.values
                .iter()
                .enumerate()
                .filter(|(i, v)| v.is_finite() && self.mask.as_ref().is_none_or(|m| m[*i]))
                .map(|(_, v)| *v)
        };
        let lo = defined().fold(f64::INFINITY, f64::min);
        let hi = defined().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let grid = match self.grid {
            Grid::Native => "native".to_string(),
            Grid::HalfPitch { origin } => format!("half-pitch {} {}", origin[0], origin[1]),
        };
        write!(
            w,
            "P5\n# grid {grid}\n{} {}\n65535\n",
            self.width, self.height
        )?;
        let mut buf = Vec::with_capacity(self.values.len() * 2);
        for (i, &v) in self.values.iter().enumerate() {
            let ok = v.is_finite() && self.mask.as_ref().is_none_or(|m| m[i]);
            let q = if ok {
                (((v - lo) / span) * 65535.0).round().clamp(0.0, 65535.0) as u16
            } else {
                0
            };
            buf.extend_from_slice(&q.to_be_bytes());
        }
        w.write_all(&buf)?;
        w.flush()
    }

    /// Reads an 8- or 16-bit binary graymap. Pixel values are returned as raw
    /// gray levels.
    pub fn read_pgm<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut tokens: Vec<String> = Vec::new();
        let mut grid = Grid::Native;
        while tokens.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line)
                .map_err(|e| Error::Format(e.to_string()))?
                == 0
            {
                return Err(Error::Format("truncated PGM header".into()));
            }
            if let Some(comment) = line.trim().strip_prefix('#') {
                let parts: Vec<&str> = comment.split_whitespace().collect();
                if let ["grid", "half-pitch", ox, oy] = parts[..] {
                    let parse = |s: &str| {
                        s.parse::<f64>()
                            .map_err(|_| Error::Format(format!("bad grid origin {s}")))
                    };
                    grid = Grid::HalfPitch {
                        origin: [parse(ox)?, parse(oy)?],
                    };
                }
                continue;
            }
            tokens.extend(line.split_whitespace().map(str::to_owned));
        }
        if tokens[0] != "P5" {
            return Err(Error::Format(format!(
                "unsupported PGM magic {}",
                tokens[0]
            )));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PGM header field {s}")))
        };
        let (width, height, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
        let n = width * height;
        let values = if maxval > 255 {
            let mut buf = vec![0u8; n * 2];
            r.read_exact(&mut buf)
                .map_err(|e| Error::Format(format!("truncated PGM: {e}")))?;
            buf.chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64)
                .collect()
        } else {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)
                .map_err(|e| Error::Format(format!("truncated PGM: {e}")))?;
            buf.into_iter().map(f64::from).collect()
        };
        Ok(Image {
            width,
            height,
            grid,
            values,
            mask: None,
        })
    }

    pub fn save_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_raw(BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_pgm(BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    /// Loads a raw `.f64` image or a PGM, chosen by the file's magic bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(IMAGE_MAGIC) {
            Self::read_raw(&bytes[..])
        } else if bytes.starts_with(b"P5") {
            Self::read_pgm(&bytes[..])
        } else {
            Err(Error::Format(format!(
                "{} is neither a raw image nor a PGM",
                path.display()
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_keeps_grid_and_mask() {
        let mut img = Image::half_pitch(3, 2, [0.5, -1.5], vec![1.0, -2.0, 3.5, 0.0, 1e-300, 7.0]);
        img.mask = Some(vec![true, false, true, true, true, false]);
        let mut buf = Vec::new();
        img.write_raw(&mut buf).unwrap();
        assert_eq!(buf.len(), 40 + 6 * 8 + 6);
        assert_eq!(Image::read_raw(&buf[..]).unwrap(), img);
    }

    #[test]
    fn pgm_scales_to_full_range() {
        let img = Image::half_pitch(2, 2, [0.5, 0.5], vec![1.0, 2.0, 3.0, 5.0]);
        let mut buf = Vec::new();
        img.write_pgm(&mut buf).unwrap();
        let back = Image::read_pgm(&buf[..]).unwrap();
        assert_eq!(back.values, vec![0.0, 16384.0, 32768.0, 65535.0]);
        assert_eq!(back.grid, img.grid);
    }
}
