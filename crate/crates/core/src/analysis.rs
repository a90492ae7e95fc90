//! Spectra, peak finding, artifact metrics and brute-force oracles.

use std::io::Write;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::frames::FrameStack;
use crate::image::Image;

/// Amplitude spectrum against spatial frequency in cycles per native pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub frequencies: Vec<f64>,
    pub amplitudes: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Window {
    #[default]
    None,
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Transform along y, average over x.
    Y,
    /// Transform along x, average over y.
    X,
}

impl Spectrum {
    pub fn bin_width(&self) -> f64 {
        self.frequencies.get(1).copied().unwrap_or(f64::NAN)
    }

    /// Index of the bin closest to `f`.
    pub fn bin(&self, f: f64) -> usize {
        let step = self.bin_width();
        ((f / step).round().max(0.0) as usize).min(self.frequencies.len() - 1)
    }

    /// Largest amplitude within `tolerance` (cycles/pixel) of `f`.
    pub fn amplitude_near(&self, f: f64, tolerance: f64) -> f64 {
        self.frequencies
            .iter()
            .zip(&self.amplitudes)
            .filter(|(&q, _)| (q - f).abs() <= tolerance)
            .map(|(_, &a)| a)
            .fold(0.0, f64::max)
    }

    /// Median amplitude of the bins within `half_width` of `f`, skipping
    /// bins within `guard` bins of `f` or of any frequency in `exclude`.
    pub fn noise_floor(&self, f: f64, half_width: f64, exclude: &[f64], guard: usize) -> f64 {
        let step = self.bin_width();
        let guard = (guard as f64 + 0.5) * step;
        let mut vals: Vec<f64> = self
            .frequencies
            .iter()
            .zip(&self.amplitudes)
            .skip(1)
            .filter(|(&q, _)| (q - f).abs() <= half_width)
            .filter(|(&q, _)| {
                (q - f).abs() > guard && exclude.iter().all(|&e| (q - e).abs() > guard)
            })
            .map(|(_, &a)| a)
            .collect();
        if vals.is_empty() {
            return f64::NAN;
        }
        vals.sort_by(f64::total_cmp);
        let m = vals.len() / 2;
        if vals.len() % 2 == 1 {
            vals[m]
        } else {
            (vals[m - 1] + vals[m]) / 2.0
        }
    }
}

fn samples_per_pixel(image: &Image) -> f64 {
    image.grid.samples_per_pixel()
}

/// Column-wise (or row-wise) FFT amplitudes, averaged over the other axis
/// and divided by the averaged zero-order amplitude. Bins run from 0 to the
/// Nyquist frequency of the image grid, which is 1.0 cycles/pixel on a
/// half-pitch grid.
pub fn spectrum(image: &Image, axis: Axis, window: Window) -> Result<Spectrum> {
    if image.values.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    let (n, lines) = match axis {
        Axis::Y => (image.height, image.width),
        Axis::X => (image.width, image.height),
    };
    let taper: Vec<f64> = match window {
        Window::None => vec![1.0; n],
        Window::Hann if n > 1 => (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
            .collect(),
        Window::Hann => vec![1.0],
    };
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let bins = n / 2 + 1;
    let sums = (0..lines)
        .into_par_iter()
        .map(|line| {
            let mut buf: Vec<Complex64> = (0..n)
                .map(|i| {
                    let v = match axis {
                        Axis::Y => image.get(line, i),
                        Axis::X => image.get(i, line),
                    };
                    Complex64::new(v * taper[i], 0.0)
                })
                .collect();
            fft.process(&mut buf);
            buf[..bins].iter().map(|c| c.norm()).collect::<Vec<f64>>()
        })
        .reduce(
            || vec![0.0; bins],
            |mut a, b| {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let zero = sums[0];
    let amplitudes = if zero > 0.0 {
        sums.iter().map(|s| s / zero).collect()
    } else {
        sums.iter().map(|s| s / lines as f64).collect()
    };
    let step = samples_per_pixel(image) / n as f64;
    Ok(Spectrum {
        frequencies: (0..bins).map(|k| k as f64 * step).collect(),
        amplitudes,
    })
}

/// Spectrum along y averaged over x, without windowing.
pub fn spectrum_x_avg(image: &Image) -> Result<Spectrum> {
    spectrum(image, Axis::Y, Window::None)
}

/// `Σ_k |X_k|² / n` summed over all columns; equals `Σ x²` by Parseval.
pub fn spectral_power(image: &Image) -> f64 {
    let n = image.height;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    (0..image.width)
        .map(|x| {
            let mut buf: Vec<Complex64> = (0..n)
                .map(|y| Complex64::new(image.get(x, y), 0.0))
                .collect();
            fft.process(&mut buf);
            buf.iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub index: usize,
    pub frequency: f64,
    pub amplitude: f64,
    pub prominence: f64,
}

/// Local maxima other than the zero-order bin whose topographic prominence
/// reaches `min_prominence`, sorted by frequency.
pub fn detect_peaks(spectrum: &Spectrum, min_prominence: f64) -> Vec<Peak> {
    let a = &spectrum.amplitudes;
    let n = a.len();
    let mut peaks = Vec::new();
    let mut i = 1;
    while i < n {
        // plateau [i, j]
        let mut j = i;
        while j + 1 < n && a[j + 1] == a[i] {
            j += 1;
        }
        let left_lower = a[i - 1] < a[i];
        let right_lower = j + 1 == n || a[j + 1] < a[i];
        if left_lower && right_lower {
            let h = a[i];
            let mut left_min = h;
            let mut k = i;
            while k > 1 {
                k -= 1;
                if a[k] > h {
                    break;
                }
                left_min = left_min.min(a[k]);
            }
            let mut right_min = h;
            let mut k = j;
            while k + 1 < n {
                k += 1;
                if a[k] > h {
                    break;
                }
                right_min = right_min.min(a[k]);
            }
            let prominence = h - left_min.max(right_min);
            if prominence >= min_prominence && prominence > 0.0 {
                let mid = (i + j) / 2;
                peaks.push(Peak {
                    index: mid,
                    frequency: spectrum.frequencies[mid],
                    amplitude: h,
                    prominence,
                });
            }
        }
        i = j + 1;
    }
    peaks
}

/// Variance of the row means plus variance of the column means, each
/// divided by the squared global mean. Masked pixels are ignored.
pub fn stripe_metric(image: &Image) -> Result<f64> {
    let (w, h) = (image.width, image.height);
    let mut rows = vec![(0.0, 0usize); h];
    let mut cols = vec![(0.0, 0usize); w];
    let (mut total, mut count) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if !image.is_defined(x, y) {
                continue;
            }
            let v = image.get(x, y);
            rows[y].0 += v;
            rows[y].1 += 1;
            cols[x].0 += v;
            cols[x].1 += 1;
            total += v;
            count += 1;
        }
    }
    let mean = total / count.max(1) as f64;
    if count == 0 || mean == 0.0 {
        return Err(Error::UndefinedMetric("image has zero mean".into()));
    }
    let variance = |lines: &[(f64, usize)]| {
        let means: Vec<f64> = lines
            .iter()
            .filter(|l| l.1 > 0)
            .map(|l| l.0 / l.1 as f64)
            .collect();
        let m = means.iter().sum::<f64>() / means.len() as f64;
        means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / means.len() as f64
    };
    Ok((variance(&rows) + variance(&cols)) / (mean * mean))
}

/// Largest sensor, in pixels, accepted by [`dense_oracle_jpd`].
pub const DENSE_ORACLE_MAX_PIXELS: usize = 256;

/// Full 4D JPD indexed by pixel pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseJpd {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DenseJpd {
    pub fn get(&self, r1: [usize; 2], r2: [usize; 2]) -> f64 {
        let n = self.width * self.height;
        self.values[(r1[1] * self.width + r1[0]) * n + r2[1] * self.width + r2[0]]
    }
}

/// Literal double loop over all ordered pixel pairs:
/// `(1/N) Σ_l [I_l(r₁)I_l(r₂) − I_l(r₁)I_{l+1}(r₂)]`, then `(Γ + Γᵀ)/2`.
pub fn dense_oracle_jpd(frames: &FrameStack) -> Result<DenseJpd> {
    let (w, h) = (frames.width(), frames.height());
    let n = w * h;
    if n > DENSE_ORACLE_MAX_PIXELS {
        return Err(Error::TooLarge(format!(
            "dense oracle is limited to {DENSE_ORACLE_MAX_PIXELS} pixels, got {w}x{h}"
        )));
    }
    let pairs = frames.count() - 1;
    let mut sums = vec![0.0f64; n * n];
    for l in 0..pairs {
        let cur = frames.frame(l);
        let next = frames.frame(l + 1);
        for a in 0..n {
            for b in 0..n {
                let ia = cur[a] as f64;
                sums[a * n + b] += ia * cur[b] as f64 - ia * next[b] as f64;
            }
        }
    }
    let mean: Vec<f64> = sums.iter().map(|s| s / pairs as f64).collect();
    let mut values = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            values[a * n + b] = (mean[a * n + b] + mean[b * n + a]) / 2.0;
        }
    }
    Ok(DenseJpd {
        width: w,
        height: h,
        values,
    })
}

/// Pearson correlation over paired samples.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Correlation between an image and its 180° rotation, over pixels defined
/// in both.
pub fn symmetry_correlation(image: &Image) -> f64 {
    let (w, h) = (image.width, image.height);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for y in 0..h {
        for x in 0..w {
            let (xr, yr) = (w - 1 - x, h - 1 - y);
            if image.is_defined(x, y) && image.is_defined(xr, yr) {
                a.push(image.get(x, y));
                b.push(image.get(xr, yr));
            }
        }
    }
    pearson(&a, &b)
}

/// Writes `frequency_cycles_per_pixel,amplitude` rows with 12 significant
/// digits.
pub fn write_spectrum_csv<W: Write>(spectrum: &Spectrum, mut w: W) -> std::io::Result<()> {
    writeln!(w, "frequency_cycles_per_pixel,amplitude")?;
    for (f, a) in spectrum.frequencies.iter().zip(&spectrum.amplitudes) {
        writeln!(w, "{f:.11e},{a:.11e}")?;
    }
    w.flush()
}
