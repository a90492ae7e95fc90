//! Forward model: photon-pair sources, objects, cameras.
//!
//! Coordinates are in native pixel units; pixel `(i, j)` covers
//! `[i, i+1) × [j, j+1)`. Object maps live on a sub-grid with `factor`
//! cells per pixel along each axis.
//!
//! Each frame emits `Poisson(rate)` pairs. A pair has a midpoint `x` drawn
//! uniformly over the sensor and a separation `ξ ~ N(0, σ²)` per axis:
//! near field `x₁ = x − ξ/2, x₂ = x + ξ/2`; far field
//! `x₁ = x − ξ/2, x₂ = C − x − ξ/2` with `C = (W, H)`, so pixel `i` is
//! paired with pixel `W − 1 − i`. Each photon then crosses the object
//! independently with probability `|t|²`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};

use crate::error::{Error, Result};
use crate::frames::{Dtype, FrameSource, FrameStack};
use crate::jpd::{Geometry, Jpd, Mode, Unmeasurable};

/// Real-valued map on the object sub-grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SubGridMap {
    pub factor: usize,
    /// Cells along x (`sensor width × factor`).
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl SubGridMap {
    pub fn constant(sensor: [usize; 2], factor: usize, value: f64) -> Self {
        let (width, height) = (sensor[0] * factor, sensor[1] * factor);
        SubGridMap {
            factor,
            width,
            height,
            values: vec![value; width * height],
        }
    }

    /// Samples `f` at cell centres, in pixel units.
    pub fn from_fn(sensor: [usize; 2], factor: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let (width, height) = (sensor[0] * factor, sensor[1] * factor);
        let h = 1.0 / factor as f64;
        let mut values = Vec::with_capacity(width * height);
        for j in 0..height {
            for i in 0..width {
                values.push(f((i as f64 + 0.5) * h, (j as f64 + 0.5) * h));
            }
        }
        SubGridMap {
            factor,
            width,
            height,
            values,
        }
    }

    /// Cell containing `(x, y)`; `None` off the sensor.
    #[inline]
    pub fn cell(&self, x: f64, y: f64) -> Option<usize> {
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let i = (x * self.factor as f64) as usize;
        let j = (y * self.factor as f64) as usize;
        (i < self.width && j < self.height).then_some(j * self.width + i)
    }

    #[inline]
    pub fn at(&self, x: f64, y: f64) -> Option<f64> {
        self.cell(x, y).map(|c| self.values[c])
    }

    /// Average of the cells inside each native pixel.
    pub fn pixel_average(&self) -> Vec<f64> {
        let (w, h) = (self.width / self.factor, self.height / self.factor);
        let mut out = vec![0.0; w * h];
        for j in 0..self.height {
            for i in 0..self.width {
                out[(j / self.factor) * w + i / self.factor] += self.values[j * self.width + i];
            }
        }
        let n = (self.factor * self.factor) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

/// Object, illumination and source description.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub mode: Mode,
    /// Sensor size in pixels.
    pub width: usize,
    pub height: usize,
    /// Amplitude transmission `|t|` in `[0, 1]`.
    pub amplitude: SubGridMap,
    /// Birefringent phase maps `θ_H`, `θ_V` (radians). Present only in
    /// holography scenes.
    pub phase: Option<(SubGridMap, SubGridMap)>,
    /// SLM phase `α` (radians).
    pub slm_phase: Option<SubGridMap>,
    /// Standard deviation of the pair separation per axis, in pixels.
    pub correlation_width: f64,
    /// Fringe contrast `v ∈ (0, 1]` of the polarization interference.
    pub fringe_visibility: f64,
    /// Mean classical photons per frame per pixel area, on the sub-grid.
    pub classical: Option<SubGridMap>,
}

pub const DEFAULT_SUBGRID: usize = 10;
pub const DEFAULT_CORRELATION_WIDTH: f64 = 0.25;

impl Scene {
    /// Uniform, fully transmitting object.
    pub fn new(mode: Mode, width: usize, height: usize, factor: usize) -> Self {
        Scene {
            mode,
            width,
            height,
            amplitude: SubGridMap::constant([width, height], factor, 1.0),
            phase: None,
            slm_phase: None,
            correlation_width: DEFAULT_CORRELATION_WIDTH,
            fringe_visibility: 1.0,
            classical: None,
        }
    }

    pub fn factor(&self) -> usize {
        self.amplitude.factor
    }

    pub fn sensor(&self) -> [usize; 2] {
        [self.width, self.height]
    }

    pub fn with_amplitude(mut self, f: impl Fn(f64, f64) -> f64) -> Self {
        self.amplitude = SubGridMap::from_fn(self.sensor(), self.factor(), f);
        self
    }

    pub fn with_correlation_width(mut self, sigma: f64) -> Self {
        self.correlation_width = sigma;
        self
    }

    /// Sets `Δθ` through `θ_H = Δθ`, `θ_V = 0`.
    pub fn with_phase_difference(mut self, f: impl Fn(f64, f64) -> f64) -> Self {
        let h = SubGridMap::from_fn(self.sensor(), self.factor(), f);
        let v = SubGridMap::constant(self.sensor(), self.factor(), 0.0);
        self.phase = Some((h, v));
        self
    }

    pub fn with_slm_phase(mut self, f: impl Fn(f64, f64) -> f64) -> Self {
        self.slm_phase = Some(SubGridMap::from_fn(self.sensor(), self.factor(), f));
        self
    }

    pub fn with_classical(mut self, f: impl Fn(f64, f64) -> f64) -> Self {
        self.classical = Some(SubGridMap::from_fn(self.sensor(), self.factor(), f));
        self
    }

    pub fn is_holographic(&self) -> bool {
        self.phase.is_some() || self.slm_phase.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("sensor must have at least one pixel".into()));
        }
        if self.factor() < 2 {
            return Err(Error::Resolution(format!(
                "sub-grid factor {} is coarser than half a pixel",
                self.factor()
            )));
        }
        let maps = std::iter::once(&self.amplitude)
            .chain(self.phase.iter().flat_map(|(h, v)| [h, v]))
            .chain(&self.slm_phase)
            .chain(&self.classical);
        for m in maps {
            if m.factor != self.factor()
                || m.width != self.width * m.factor
                || m.height != self.height * m.factor
            {
                return Err(Error::Shape("scene maps must share the sub-grid".into()));
            }
            if m.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("scene maps must be finite".into()));
            }
        }
        if self
            .amplitude
            .values
            .iter()
            .any(|&a| !(0.0..=1.0).contains(&a))
        {
            return Err(Error::Config(
                "amplitude transmission must lie in [0, 1]".into(),
            ));
        }
        if let Some(c) = &self.classical {
            if c.values.iter().any(|&v| v < 0.0) {
                return Err(Error::Config(
                    "classical intensity must be non-negative".into(),
                ));
            }
        }
        if !(self.correlation_width >= 0.0 && self.correlation_width.is_finite()) {
            return Err(Error::Config(
                "correlation width must be finite and >= 0".into(),
            ));
        }
        if !(self.fringe_visibility > 0.0 && self.fringe_visibility <= 1.0) {
            return Err(Error::Config("fringe visibility must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Pair phase `Φ(x) = Δθ(x) − α(x)` on the sub-grid, if any.
    fn pair_phase(&self) -> Option<Vec<f64>> {
        if !self.is_holographic() {
            return None;
        }
        let n = self.amplitude.values.len();
        let mut phi = vec![0.0; n];
        if let Some((h, v)) = &self.phase {
            for (p, (a, b)) in phi.iter_mut().zip(h.values.iter().zip(&v.values)) {
                *p += a - b;
            }
        }
        if let Some(alpha) = &self.slm_phase {
            for (p, a) in phi.iter_mut().zip(&alpha.values) {
                *p -= a;
            }
        }
        Some(phi)
    }

    /// Normalized two-photon fringe `[1 + v cos φ]² / (1 + v)²`.
    pub fn pair_fringe(&self, phase_sum: f64) -> f64 {
        let v = self.fringe_visibility;
        let f = 1.0 + v * phase_sum.cos();
        f * f / ((1.0 + v) * (1.0 + v))
    }

    /// Normalized classical fringe `[1 + v cos φ] / (1 + v)`.
    pub fn classical_fringe(&self, phase: f64) -> f64 {
        (1.0 + self.fringe_visibility * phase.cos()) / (1.0 + self.fringe_visibility)
    }

    /// Classical intensity after the 45° polarizer:
    /// `I(x) = |t|² [1 + v cos(Δθ − α)] / (1 + v)` for unit input.
    pub fn classical_hologram(&self) -> SubGridMap {
        let mut out = self.amplitude.clone();
        let phi = self.pair_phase();
        for (i, v) in out.values.iter_mut().enumerate() {
            let fringe = phi.as_ref().map_or(1.0, |p| self.classical_fringe(p[i]));
            *v = *v * *v * fringe;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CameraKind {
    /// Noiseless photon-number-resolving detector.
    Ideal,
    Emccd,
    Spad,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Crosstalk {
    #[default]
    Four,
    Eight,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub kind: CameraKind,
    pub quantum_efficiency: f64,
    /// Fraction of each pixel covered by the centred square active area.
    pub fill_factor: f64,
    /// EMCCD per-frame gain distribution, counts per photo-electron.
    pub gain_mean: f64,
    pub gain_sigma: f64,
    pub read_noise_sigma: f64,
    /// Constant offset added by the EMCCD readout, counts.
    pub bias: f64,
    /// Mean dark events per pixel per frame.
    pub dark_rate: f64,
    /// EMCCD fraction of charge left behind per row transfer.
    pub smearing_coeff: f64,
    pub crosstalk_prob: f64,
    pub crosstalk: Crosstalk,
}

impl CameraModel {
    pub fn ideal() -> Self {
        CameraModel {
            kind: CameraKind::Ideal,
            quantum_efficiency: 1.0,
            fill_factor: 1.0,
            gain_mean: 1.0,
            gain_sigma: 0.0,
            read_noise_sigma: 0.0,
            bias: 0.0,
            dark_rate: 0.0,
            smearing_coeff: 0.0,
            crosstalk_prob: 0.0,
            crosstalk: Crosstalk::Four,
        }
    }

    pub fn emccd() -> Self {
        CameraModel {
            kind: CameraKind::Emccd,
            quantum_efficiency: 0.9,
            gain_mean: 100.0,
            gain_sigma: 10.0,
            read_noise_sigma: 5.0,
            bias: 100.0,
            smearing_coeff: 0.05,
            ..Self::ideal()
        }
    }

    /// SPAD array with the detection efficiency and fill factor of the
    /// far-field experiments.
    pub fn spad() -> Self {
        CameraModel {
            kind: CameraKind::Spad,
            quantum_efficiency: 0.026 / 0.105,
            fill_factor: 0.105,
            dark_rate: 0.0,
            crosstalk_prob: 0.01,
            ..Self::ideal()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} is not in [0, 1]")))
            }
        };
        prob("quantum_efficiency", self.quantum_efficiency)?;
        prob("fill_factor", self.fill_factor)?;
        prob("crosstalk_prob", self.crosstalk_prob)?;
        if !(0.0..1.0).contains(&self.smearing_coeff) {
            return Err(Error::Config("smearing_coeff must lie in [0, 1)".into()));
        }
        for (name, v) in [
            ("gain_mean", self.gain_mean),
            ("gain_sigma", self.gain_sigma),
            ("read_noise_sigma", self.read_noise_sigma),
            ("bias", self.bias),
            ("dark_rate", self.dark_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn dtype(&self) -> Dtype {
        match self.kind {
            CameraKind::Spad => Dtype::Binary,
            _ => Dtype::U16Counts,
        }
    }

    /// Entries the estimator cannot measure with this detector. Photon
    /// counting detectors see their own shot noise on the diagonal.
    pub fn unmeasurable(&self) -> Unmeasurable {
        match self.kind {
            CameraKind::Ideal => Unmeasurable::Diagonal,
            CameraKind::Emccd => Unmeasurable::SameColumn,
            CameraKind::Spad => Unmeasurable::Neighbours,
        }
    }

    /// Detection probability at pixel-local coordinates `(u, v) ∈ [0, 1)²`.
    #[inline]
    fn detects(&self, u: f64, v: f64) -> bool {
        if self.fill_factor >= 1.0 {
            return true;
        }
        let half = self.fill_factor.sqrt() / 2.0;
        (u - 0.5).abs() < half && (v - 0.5).abs() < half
    }

    /// Fraction of a sub-grid cell covered by the active area.
    fn cell_coverage(&self, i: usize, j: usize, factor: usize) -> f64 {
        let half = self.fill_factor.sqrt() / 2.0;
        let h = 1.0 / factor as f64;
        let overlap = |k: usize| {
            let lo = (k % factor) as f64 * h;
            let hi = lo + h;
            ((hi.min(0.5 + half) - lo.max(0.5 - half)).max(0.0)) / h
        };
        overlap(i) * overlap(j)
    }
}

/// One pair whose photons both crossed the object, in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairEvent {
    pub x1: [f64; 2],
    pub x2: [f64; 2],
    /// `Φ(x₁) + Φ(x₂)` for holography scenes, 0 otherwise.
    pub phase_sum: f64,
}

/// Photons reaching the sensor plane in one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FramePhotons {
    pub pairs: Vec<PairEvent>,
    /// Photons whose partner was lost, plus classical photons.
    pub singles: Vec<[f64; 2]>,
}

/// Draws the photons of one frame for a scene.
#[derive(Clone, Debug)]
pub struct PairSampler {
    scene: Scene,
    rate: f64,
    transmission: Vec<f64>,
    phase: Option<Vec<f64>>,
    classical_cdf: Option<(Vec<f64>, f64)>,
}

impl PairSampler {
    pub fn new(scene: &Scene, rate: f64) -> Result<Self> {
        scene.validate()?;
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(Error::Config(format!(
                "pair rate {rate} must be finite and >= 0"
            )));
        }
        let transmission: Vec<f64> = scene.amplitude.values.iter().map(|a| a * a).collect();
        if rate > 0.0 && transmission.iter().all(|&t| t == 0.0) {
            return Err(Error::DegenerateDensity("object transmits no light".into()));
        }
        let classical_cdf = scene.classical.as_ref().and_then(|m| {
            let mut acc = 0.0;
            let per_cell = 1.0 / (m.factor * m.factor) as f64;
            let cdf: Vec<f64> = m
                .values
                .iter()
                .map(|v| {
                    acc += v * per_cell;
                    acc
                })
                .collect();
            (acc > 0.0).then_some((cdf, acc))
        });
        Ok(PairSampler {
            scene: scene.clone(),
            rate,
            transmission,
            phase: scene.pair_phase(),
            classical_cdf,
        })
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn sample_frame<R: Rng>(&self, rng: &mut R) -> FramePhotons {
        let s = &self.scene;
        let (w, h) = (s.width as f64, s.height as f64);
        let mut out = FramePhotons::default();
        if self.rate > 0.0 {
            let n = Poisson::new(self.rate).unwrap().sample(rng) as usize;
            let spread = Normal::new(0.0, s.correlation_width.max(0.0)).unwrap();
            for _ in 0..n {
                let x = [rng.random::<f64>() * w, rng.random::<f64>() * h];
                let xi = if s.correlation_width > 0.0 {
                    [spread.sample(rng), spread.sample(rng)]
                } else {
                    [0.0, 0.0]
                };
                let x1 = [x[0] - xi[0] / 2.0, x[1] - xi[1] / 2.0];
                let x2 = match s.mode {
                    Mode::NearField => [x[0] + xi[0] / 2.0, x[1] + xi[1] / 2.0],
                    Mode::FarField => [w - x[0] - xi[0] / 2.0, h - x[1] - xi[1] / 2.0],
                };
                let c1 = s.amplitude.cell(x1[0], x1[1]);
                let c2 = s.amplitude.cell(x2[0], x2[1]);
                let pass1 = c1.is_some_and(|c| rng.random::<f64>() < self.transmission[c]);
                let pass2 = c2.is_some_and(|c| rng.random::<f64>() < self.transmission[c]);
                match (pass1, pass2) {
                    (true, true) => {
                        let phase_sum = self
                            .phase
                            .as_ref()
                            .map_or(0.0, |p| p[c1.unwrap()] + p[c2.unwrap()]);
                        if self.phase.is_some() && rng.random::<f64>() >= s.pair_fringe(phase_sum) {
                            continue;
                        }
                        out.pairs.push(PairEvent { x1, x2, phase_sum });
                    }
                    (true, false) => out.singles.push(x1),
                    (false, true) => out.singles.push(x2),
                    (false, false) => {}
                }
            }
        }
        if let Some((cdf, total)) = &self.classical_cdf {
            let m = s.classical.as_ref().unwrap();
            let n = Poisson::new(*total).unwrap().sample(rng) as usize;
            let cell = 1.0 / m.factor as f64;
            for _ in 0..n {
                let u = rng.random::<f64>() * total;
                let c = cdf.partition_point(|&v| v <= u).min(cdf.len() - 1);
                let (i, j) = (c % m.width, c / m.width);
                out.singles.push([
                    (i as f64 + rng.random::<f64>()) * cell,
                    (j as f64 + rng.random::<f64>()) * cell,
                ]);
            }
        }
        out
    }
}

/// Infinite stream of pair events, frame after frame, from one seed.
pub fn sample_pair_events(
    scene: &Scene,
    pairs_per_frame: f64,
    seed: u64,
) -> Result<impl Iterator<Item = PairEvent>> {
    if !(pairs_per_frame > 0.0) {
        return Err(Error::Config("pair rate must be positive".into()));
    }
    let sampler = PairSampler::new(scene, pairs_per_frame)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(std::iter::repeat_with(move || sampler.sample_frame(&mut rng).pairs).flatten())
}

/// Per-frame random stream: `master seed XOR frame index`.
pub fn frame_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index as u64)
}

/// Converts detected photon positions into one camera frame.
pub fn render_photons<R: Rng>(
    photons: &FramePhotons,
    camera: &CameraModel,
    width: usize,
    height: usize,
    rng: &mut R,
    out: &mut [f32],
) {
    let mut counts = vec![0u32; width * height];
    let positions = photons
        .pairs
        .iter()
        .flat_map(|p| [p.x1, p.x2])
        .chain(photons.singles.iter().copied());
    for [x, y] in positions {
        if !(x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64) {
            continue;
        }
        if !camera.detects(x.fract(), y.fract()) {
            continue;
        }
        if camera.quantum_efficiency < 1.0 && rng.random::<f64>() >= camera.quantum_efficiency {
            continue;
        }
        counts[y as usize * width + x as usize] += 1;
    }
    if camera.dark_rate > 0.0 {
        let n = Poisson::new(camera.dark_rate * (width * height) as f64)
            .unwrap()
            .sample(rng) as usize;
        for _ in 0..n {
            counts[rng.random_range(0..width * height)] += 1;
        }
    }
    match camera.kind {
        CameraKind::Ideal => {
            for (o, &c) in out.iter_mut().zip(&counts) {
                *o = c.min(u16::MAX as u32) as f32;
            }
        }
        CameraKind::Spad => render_spad(&counts, camera, width, height, rng, out),
        CameraKind::Emccd => render_emccd(&counts, camera, width, height, rng, out),
    }
}

fn render_spad<R: Rng>(
    counts: &[u32],
    camera: &CameraModel,
    width: usize,
    height: usize,
    rng: &mut R,
    out: &mut [f32],
) {
    for (o, &c) in out.iter_mut().zip(counts) {
        *o = (c > 0) as u8 as f32;
    }
    if camera.crosstalk_prob <= 0.0 {
        return;
    }
    let neighbours: &[(i64, i64)] = match camera.crosstalk {
        Crosstalk::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
        Crosstalk::Eight => &[
            (1, 0),
            (-1, 0),
            (0, 1),
            (0, -1),
            (1, 1),
            (1, -1),
            (-1, 1),
            (-1, -1),
        ],
    };
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let (x, y) = ((i % width) as i64, (i / width) as i64);
        for &(dx, dy) in neighbours {
            let (nx, ny) = (x + dx, y + dy);
            if nx >= 0
                && ny >= 0
                && (nx as usize) < width
                && (ny as usize) < height
                && rng.random::<f64>() < camera.crosstalk_prob
            {
                out[ny as usize * width + nx as usize] = 1.0;
            }
        }
    }
}

fn render_emccd<R: Rng>(
    counts: &[u32],
    camera: &CameraModel,
    width: usize,
    height: usize,
    rng: &mut R,
    out: &mut [f32],
) {
    let gain = if camera.gain_sigma > 0.0 {
        Normal::new(camera.gain_mean, camera.gain_sigma)
            .unwrap()
            .sample(rng)
            .max(0.0)
    } else {
        camera.gain_mean
    };
    let s = camera.smearing_coeff;
    let read =
        (camera.read_noise_sigma > 0.0).then(|| Normal::new(0.0, camera.read_noise_sigma).unwrap());
    for x in 0..width {
        // charge carried down the column during readout
        let mut carried = 0.0;
        for y in 0..height {
            let i = y * width + x;
            carried = counts[i] as f64 * gain + s * carried;
            let mut v = (1.0 - s) * carried + camera.bias;
            if let Some(r) = &read {
                v += r.sample(rng);
            }
            out[i] = v.round().clamp(0.0, u16::MAX as f64) as f32;
        }
    }
}

/// A simulated acquisition, rendered frame by frame on demand.
#[derive(Clone, Debug)]
pub struct Simulation {
    sampler: PairSampler,
    camera: CameraModel,
    frames: usize,
    seed: u64,
}

impl Simulation {
    pub fn new(
        scene: &Scene,
        camera: CameraModel,
        pairs_per_frame: f64,
        frames: usize,
        seed: u64,
    ) -> Result<Self> {
        camera.validate()?;
        if frames < 2 {
            return Err(Error::Config(format!(
                "a simulation needs at least 2 frames, got {frames}"
            )));
        }
        Ok(Simulation {
            sampler: PairSampler::new(scene, pairs_per_frame)?,
            camera,
            frames,
            seed,
        })
    }

    pub fn scene(&self) -> &Scene {
        self.sampler.scene()
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    pub fn photons(&self, index: usize) -> FramePhotons {
        self.sampler.sample_frame(&mut frame_rng(self.seed, index))
    }

    /// Renders every frame into memory.
    pub fn to_stack(&self) -> Result<FrameStack> {
        let n = self.width() * self.height();
        let mut data = vec![0.0f32; n * self.frames];
        data.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out)| self.frame_into(i, out));
        FrameStack::from_flat(self.width(), self.height(), self.camera.dtype(), data)
    }
}

impl FrameSource for Simulation {
    fn width(&self) -> usize {
        self.sampler.scene().width
    }

    fn height(&self) -> usize {
        self.sampler.scene().height
    }

    fn count(&self) -> usize {
        self.frames
    }

    fn frame_into(&self, index: usize, out: &mut [f32]) {
        let mut rng = frame_rng(self.seed, index);
        let photons = self.sampler.sample_frame(&mut rng);
        render_photons(
            &photons,
            &self.camera,
            self.width(),
            self.height(),
            &mut rng,
            out,
        );
    }
}

/// Renders `frames` frames of a scene into an in-memory stack.
pub fn render_frames(
    scene: &Scene,
    camera: &CameraModel,
    pairs_per_frame: f64,
    frames: usize,
    seed: u64,
) -> Result<FrameStack> {
    Simulation::new(scene, *camera, pairs_per_frame, frames, seed)?.to_stack()
}

/// `∫∫` over two cells of width `h` whose origins are `k h` apart of the
/// Gaussian separation density: `F(kh+h) − 2F(kh) + F(kh−h)` with
/// `F(x) = x Φ(x/σ) + σ φ(x/σ)`.
fn cell_pair_weight(k: i64, h: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return if k == 0 { h } else { 0.0 };
    }
    let std = StdNormal::new(0.0, 1.0).unwrap();
    let f = |x: f64| x * std.cdf(x / sigma) + sigma * std.pdf(x / sigma);
    let kh = k as f64 * h;
    (f(kh + h) - 2.0 * f(kh) + f(kh - h)).max(0.0)
}

/// Expected pair-induced JPD per emitted pair:
/// `Γ(r₁, r₂) = R(r₁, r₂) + R(r₂, r₁)` where `R` is the probability that
/// photon 1 is detected in `r₁` and photon 2 in `r₂`.
///
/// Detection uses the camera's quantum efficiency and fill factor; pass
/// `None` for perfect detection. The estimator's diagonal additionally
/// carries shot noise, which this model leaves out.
pub fn ground_truth_jpd(
    scene: &Scene,
    camera: Option<&CameraModel>,
    band_radius: usize,
) -> Result<Jpd> {
    scene.validate()?;
    let geometry = Geometry::new(
        scene.mode,
        scene.width,
        scene.height,
        band_radius,
        Some(Geometry::mirror_center(scene.width, scene.height)),
    )?;
    let f = scene.factor();
    let (cw, ch) = (scene.amplitude.width, scene.amplitude.height);
    let hcell = 1.0 / f as f64;
    let det = |i: usize, j: usize| {
        camera.map_or(1.0, |c| c.quantum_efficiency * c.cell_coverage(i, j, f))
    };
    let weights: Vec<f64> = (0..cw * ch)
        .map(|c| {
            let a = scene.amplitude.values[c];
            a * a * det(c % cw, c / cw)
        })
        .collect();
    // Weighted sums to evaluate with the separation kernel, and their
    // coefficients in the fringe expansion
    // [1 + v cos P]² = 1 + v²/2 + 2v cos P + (v²/2) cos 2P.
    let mut terms: Vec<(f64, Vec<Complex64>)> = Vec::new();
    match scene.pair_phase() {
        None => terms.push((
            1.0,
            weights.iter().map(|&w| Complex64::new(w, 0.0)).collect(),
        )),
        Some(phi) => {
            let v = scene.fringe_visibility;
            let norm = (1.0 + v) * (1.0 + v);
            for (coef, mult) in [(1.0 + v * v / 2.0, 0.0), (2.0 * v, 1.0), (v * v / 2.0, 2.0)] {
                let m = weights
                    .iter()
                    .zip(&phi)
                    .map(|(&w, &p)| Complex64::from_polar(w, mult * p))
                    .collect();
                terms.push((coef / norm, m));
            }
        }
    }
    let k = band_radius as i64;
    let reach = (k + 2) * f as i64;
    let kernel: Vec<f64> = (-reach..=reach)
        .map(|d| cell_pair_weight(d, hcell, scene.correlation_width))
        .collect();
    let g = |d: i64| kernel.get((d + reach) as usize).copied().unwrap_or(0.0);
    let side = 2 * band_radius + 1;
    let (w, hgt) = (scene.width, scene.height);
    // partner cell index along each axis: identity (near) or mirrored (far)
    let mirror = scene.mode == Mode::FarField;
    let mut r = vec![vec![0.0f64; w * hgt]; side * side];
    for (coef, map) in &terms {
        let partner = |i: usize, j: usize| -> Complex64 {
            if mirror {
                map[(ch - 1 - j) * cw + (cw - 1 - i)]
            } else {
                map[j * cw + i]
            }
        };
        // t[(by * cw + ax) * side + dx]: Σ over the cells bx of partner
        // column px(ax) + dx of partner(bx, by) · G(bx − ax)
        let mut t = vec![Complex64::new(0.0, 0.0); cw * ch * side];
        for by in 0..ch {
            for ax in 0..cw {
                let px = (ax / f) as i64;
                for (di, dx) in (-k..=k).enumerate() {
                    let col = px + dx;
                    if col < 0 || col >= w as i64 {
                        continue;
                    }
                    let mut acc = Complex64::new(0.0, 0.0);
                    for bx in col as usize * f..(col as usize + 1) * f {
                        acc += partner(bx, by) * g(bx as i64 - ax as i64);
                    }
                    t[(by * cw + ax) * side + di] = acc;
                }
            }
        }
        for ay in 0..ch {
            let py = (ay / f) as i64;
            for ax in 0..cw {
                let wa = map[ay * cw + ax];
                if wa == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let px = ax / f;
                for (dj, dy) in (-k..=k).enumerate() {
                    let row = py + dy;
                    if row < 0 || row >= hgt as i64 {
                        continue;
                    }
                    for di in 0..side {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for by in row as usize * f..(row as usize + 1) * f {
                            acc += t[(by * cw + ax) * side + di] * g(by as i64 - ay as i64);
                        }
                        r[dj * side + di][py as usize * w + px] += coef * (wa * acc).re;
                    }
                }
            }
        }
    }
    let area = (w * hgt) as f64;
    // near field: R(r, r + d) is r[d]; far field: R(r, c − r + u) is r[−u]
    let lookup = |r1: [usize; 2], r2: [usize; 2]| -> f64 {
        let q = if mirror {
            [w - 1 - r2[0], hgt - 1 - r2[1]]
        } else {
            r2
        };
        let d = [q[0] as i64 - r1[0] as i64, q[1] as i64 - r1[1] as i64];
        if d[0].abs() > k || d[1].abs() > k {
            return 0.0;
        }
        r[((d[1] + k) as usize) * side + (d[0] + k) as usize][r1[1] * w + r1[0]] / area
    };
    Ok(Jpd::from_fn(geometry, |r1, r2| {
        lookup(r1, r2) + lookup(r2, r1)
    }))
}

/// Analytic delta-correlated near-field JPD sampled at pair midpoints:
/// `Γ(r, r + d) = w(d) |t(r + ½ + d/2)|⁴` for `‖d‖∞ ≤ 1`, with per-axis
/// weights `w(0) = 1`, `w(±1) = ½`. Each half-pitch site of its sum
/// projection then collects exactly `|t|⁴` at that site's position.
pub fn ideal_delta_jpd(width: usize, height: usize, t: impl Fn(f64, f64) -> f64) -> Result<Jpd> {
    let geometry = Geometry::new(Mode::NearField, width, height, 1, None)?;
    Ok(Jpd::from_fn(geometry, |r1, r2| {
        let weight = |a: usize, b: usize| if a == b { 1.0 } else { 0.5 };
        let x = (r1[0] + r2[0]) as f64 / 2.0 + 0.5;
        let y = (r1[1] + r2[1]) as f64 / 2.0 + 0.5;
        weight(r1[0], r2[0]) * weight(r1[1], r2[1]) * t(x, y).powi(4)
    }))
}

/// Expected photon detections per pixel per emitted pair, counting both
/// photons and those whose partner was absorbed: `2 ⟨|t|² η⟩_pixel / area`.
pub fn expected_intensity(scene: &Scene, camera: Option<&CameraModel>) -> Result<Vec<f64>> {
    scene.validate()?;
    let f = scene.factor();
    let cw = scene.amplitude.width;
    let mut det = scene.amplitude.clone();
    for (c, v) in det.values.iter_mut().enumerate() {
        let eff = camera.map_or(1.0, |cam| {
            cam.quantum_efficiency * cam.cell_coverage(c % cw, c / cw, f)
        });
        *v = *v * *v * eff;
    }
    let area = (scene.width * scene.height) as f64;
    Ok(det
        .pixel_average()
        .into_iter()
        .map(|v| 2.0 * v / area)
        .collect())
}

/// Expected estimator output for an EMCCD whose gain fluctuates from frame
/// to frame, in units of `λ ⟨g⟩²`:
/// `(1 + c²) Γ(r₁, r₂) + c² λ I(r₁) I(r₂)`, with `c = gain_sigma / gain_mean`,
/// `Γ` the per-pair JPD and `I` the per-pair intensity. The second term is
/// the background that carries the native-resolution intensity image.
pub fn gain_fluctuation_jpd(
    pair_jpd: &Jpd,
    intensity: &[f64],
    camera: &CameraModel,
    pairs_per_frame: f64,
) -> Result<Jpd> {
    camera.validate()?;
    let g = *pair_jpd.geometry();
    if intensity.len() != g.pixels() {
        return Err(Error::Shape(format!(
            "intensity has {} pixels, JPD has {}",
            intensity.len(),
            g.pixels()
        )));
    }
    if camera.gain_mean <= 0.0 {
        return Err(Error::Config("gain_mean must be positive".into()));
    }
    let c2 = (camera.gain_sigma / camera.gain_mean).powi(2);
    let w = g.width;
    let at = |r: [usize; 2]| intensity[r[1] * w + r[0]];
    Ok(Jpd::from_fn(g, |r1, r2| {
        let pair = pair_jpd.entry(r1, r2).map_or(0.0, |e| e.0);
        (1.0 + c2) * pair + c2 * pairs_per_frame * at(r1) * at(r2)
    }))
}
