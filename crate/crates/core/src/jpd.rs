//! Banded joint probability distribution of photon-pair detections.
//!
//! A [`Jpd`] stores Γ(r₁, r₂) only inside a band of radius `K` around the
//! correlation support, as `(2K+1)²` planes the size of the sensor:
//!
//! * near field, plane `d`: `Γ_d(r) = Γ(r, r + d)`;
//! * far field, plane `u`: `Γ_u(r) = Γ(r, c − r + u)` for an integer
//!   sum-coordinate centre `c`.
//!
//! Every stored entry carries an [`EntryState`]; entries whose partner falls
//! off the sensor are [`EntryState::Outside`] and never contribute to sums.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::FrameSource;
use crate::image::Image;

pub const JPD_MAGIC: &[u8; 4] = b"BPSJ";

/// Frame pairs processed by one accumulation task.
pub const CHUNK_PAIRS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    NearField = 0,
    FarField = 1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum EntryState {
    Valid = 0,
    /// Partner pixel lies off the sensor.
    Outside = 1,
    /// Not measurable by the detector; must be interpolated or excluded
    /// before the JPD can be projected.
    Unmeasured = 2,
    /// Unmeasured entry that was dropped from all sums.
    Excluded = 3,
}

impl EntryState {
    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => EntryState::Valid,
            1 => EntryState::Outside,
            2 => EntryState::Unmeasured,
            3 => EntryState::Excluded,
            c => return Err(Error::Format(format!("unknown entry state {c}"))),
        })
    }
}

/// Pixel pairs a detector cannot measure, as a function of `r₂ − r₁`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Unmeasurable {
    #[default]
    None,
    /// The diagonal `r₂ = r₁`, which carries the detector's own shot noise.
    Diagonal,
    /// Same-column pairs, diagonal included (EMCCD charge smearing).
    SameColumn,
    /// Pairs within one pixel of each other, diagonal included (SPAD crosstalk).
    Neighbours,
}

impl Unmeasurable {
    pub fn contains(self, dx: i64, dy: i64) -> bool {
        match self {
            Unmeasurable::None => false,
            Unmeasurable::Diagonal => dx == 0 && dy == 0,
            Unmeasurable::SameColumn => dx == 0,
            Unmeasurable::Neighbours => dx.abs() <= 1 && dy.abs() <= 1,
        }
    }
}

/// Shape of a banded JPD: sensor size, band and pairing rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub mode: Mode,
    pub width: usize,
    pub height: usize,
    pub band_radius: usize,
    /// Sum-coordinate centre `c` (far field only).
    pub center: Option<[i64; 2]>,
}

impl Geometry {
    pub fn new(
        mode: Mode,
        width: usize,
        height: usize,
        band_radius: usize,
        center: Option<[i64; 2]>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape("sensor must have at least one pixel".into()));
        }
        if band_radius == 0 {
            return Err(Error::Config("band radius must be at least 1".into()));
        }
        let center = match (mode, center) {
            (Mode::FarField, None) => {
                return Err(Error::Config("far-field JPD requires a centre".into()))
            }
            (Mode::NearField, _) => None,
            (Mode::FarField, c) => c,
        };
        Ok(Geometry {
            mode,
            width,
            height,
            band_radius,
            center,
        })
    }

    /// Centre of a far-field JPD whose partner of pixel `i` is pixel
    /// `size − 1 − i` along each axis.
    pub fn mirror_center(width: usize, height: usize) -> [i64; 2] {
        [width as i64 - 1, height as i64 - 1]
    }

    pub fn side(&self) -> usize {
        2 * self.band_radius + 1
    }

    pub fn plane_count(&self) -> usize {
        self.side() * self.side()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn plane_index(&self, offset: [i64; 2]) -> Option<usize> {
        let k = self.band_radius as i64;
        if offset[0].abs() > k || offset[1].abs() > k {
            return None;
        }
        Some(((offset[1] + k) as usize) * self.side() + (offset[0] + k) as usize)
    }

    pub fn plane_offset(&self, index: usize) -> [i64; 2] {
        let k = self.band_radius as i64;
        let side = self.side();
        [(index % side) as i64 - k, (index / side) as i64 - k]
    }

    /// Partner pixel of `(x, y)` in the plane with `offset`, if on the sensor.
    pub fn partner(&self, offset: [i64; 2], x: usize, y: usize) -> Option<[usize; 2]> {
        let (px, py) = match self.mode {
            Mode::NearField => (x as i64 + offset[0], y as i64 + offset[1]),
            Mode::FarField => {
                let c = self.center.expect("far-field geometry has a centre");
                (c[0] - x as i64 + offset[0], c[1] - y as i64 + offset[1])
            }
        };
        self.on_sensor(px, py)
    }

    /// Plane offset and anchor holding the ordered pair `(r1, r2)`.
    pub fn locate(&self, r1: [usize; 2], r2: [usize; 2]) -> Option<[i64; 2]> {
        let offset = match self.mode {
            Mode::NearField => [r2[0] as i64 - r1[0] as i64, r2[1] as i64 - r1[1] as i64],
            Mode::FarField => {
                let c = self.center.expect("far-field geometry has a centre");
                [
                    r1[0] as i64 + r2[0] as i64 - c[0],
                    r1[1] as i64 + r2[1] as i64 - c[1],
                ]
            }
        };
        self.plane_index(offset).map(|_| offset)
    }

    fn on_sensor(&self, x: i64, y: i64) -> Option<[usize; 2]> {
        (x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height)
            .then_some([x as usize, y as usize])
    }

    /// Offset `e` such that the partner of `(x, y)` is element `(x, y) + e`
    /// of the diff frame, flipped along both axes in the far field.
    fn kernel_shift(&self, offset: [i64; 2]) -> [i64; 2] {
        match self.mode {
            Mode::NearField => offset,
            Mode::FarField => {
                let c = self.center.expect("far-field geometry has a centre");
                [
                    self.width as i64 - 1 - c[0] - offset[0],
                    self.height as i64 - 1 - c[1] - offset[1],
                ]
            }
        }
    }
}

/// One displacement (near field) or anti-displacement (far field) plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub offset: [i64; 2],
    pub values: Vec<f64>,
    pub states: Vec<EntryState>,
}

impl Plane {
    pub fn mass(&self) -> f64 {
        self.valid_values().sum()
    }

    pub fn valid_count(&self) -> usize {
        self.states
            .iter()
            .filter(|&&s| s == EntryState::Valid)
            .count()
    }

    /// Mean over valid entries; `None` when the plane has none.
    pub fn mean(&self) -> Option<f64> {
        let n = self.valid_count();
        (n > 0).then(|| self.mass() / n as f64)
    }

    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .zip(&self.states)
            .filter(|(_, &s)| s == EntryState::Valid)
            .map(|(&v, _)| v)
    }

    pub fn has_pending(&self) -> bool {
        self.states.contains(&EntryState::Unmeasured)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionKind {
    /// Indexed by `r₁ + r₂`.
    Sum,
    /// Indexed by `r₂ − r₁`.
    Minus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiagonalKind {
    Diagonal,
    AntiDiagonal,
}

/// Banded, symmetric JPD. Planes removed by filtering are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Jpd {
    geometry: Geometry,
    planes: Vec<Option<Plane>>,
    frame_pairs: u64,
}

impl Jpd {
    /// Builds a JPD by evaluating `f(r1, r2)` on every in-band, on-sensor
    /// entry. Off-sensor entries are marked [`EntryState::Outside`].
    pub fn from_fn(geometry: Geometry, f: impl Fn([usize; 2], [usize; 2]) -> f64) -> Self {
        let planes = (0..geometry.plane_count())
            .map(|p| {
                let offset = geometry.plane_offset(p);
                let mut values = vec![0.0; geometry.pixels()];
                let mut states = vec![EntryState::Outside; geometry.pixels()];
                for y in 0..geometry.height {
                    for x in 0..geometry.width {
                        if let Some(r2) = geometry.partner(offset, x, y) {
                            values[y * geometry.width + x] = f([x, y], r2);
                            states[y * geometry.width + x] = EntryState::Valid;
                        }
                    }
                }
                Some(Plane {
                    offset,
                    values,
                    states,
                })
            })
            .collect();
        Jpd {
            geometry,
            planes,
            frame_pairs: 0,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn mode(&self) -> Mode {
        self.geometry.mode
    }

    pub fn width(&self) -> usize {
        self.geometry.width
    }

    pub fn height(&self) -> usize {
        self.geometry.height
    }

    pub fn band_radius(&self) -> usize {
        self.geometry.band_radius
    }

    pub fn center(&self) -> Option<[i64; 2]> {
        self.geometry.center
    }

    /// Number of frame pairs the estimate was averaged over (0 if synthetic).
    pub fn frame_pairs(&self) -> u64 {
        self.frame_pairs
    }

    pub fn plane(&self, offset: [i64; 2]) -> Option<&Plane> {
        self.geometry
            .plane_index(offset)
            .and_then(|i| self.planes[i].as_ref())
    }

    pub fn plane_mut(&mut self, offset: [i64; 2]) -> Option<&mut Plane> {
        self.geometry
            .plane_index(offset)
            .and_then(|i| self.planes[i].as_mut())
    }

    /// Surviving planes in index order.
    pub fn planes(&self) -> impl Iterator<Item = &Plane> {
        self.planes.iter().flatten()
    }

    pub fn planes_mut(&mut self) -> impl Iterator<Item = &mut Plane> {
        self.planes.iter_mut().flatten()
    }

    pub fn surviving_offsets(&self) -> Vec<[i64; 2]> {
        self.planes().map(|p| p.offset).collect()
    }

    /// Removes a plane; later reads treat it as zero.
    pub fn remove_plane(&mut self, offset: [i64; 2]) {
        if let Some(i) = self.geometry.plane_index(offset) {
            self.planes[i] = None;
        }
    }

    /// Value and state of the ordered pair `(r1, r2)`, if it is in the band
    /// and its plane survives.
    pub fn entry(&self, r1: [usize; 2], r2: [usize; 2]) -> Option<(f64, EntryState)> {
        let offset = self.geometry.locate(r1, r2)?;
        let plane = self.plane(offset)?;
        let i = r1[1] * self.width() + r1[0];
        Some((plane.values[i], plane.states[i]))
    }

    /// Value of a valid entry, `None` otherwise.
    pub fn get(&self, r1: [usize; 2], r2: [usize; 2]) -> Option<f64> {
        match self.entry(r1, r2) {
            Some((v, EntryState::Valid)) => Some(v),
            _ => None,
        }
    }

    pub fn has_pending(&self) -> bool {
        self.planes().any(Plane::has_pending)
    }

    pub fn total_mass(&self) -> f64 {
        self.planes().map(Plane::mass).sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for p in out.planes_mut() {
            p.values.iter_mut().for_each(|v| *v *= factor);
        }
        out
    }

    fn require_resolved(&self) -> Result<()> {
        if self.has_pending() {
            return Err(Error::State(
                "JPD has unmeasured entries; interpolate or exclude them first".into(),
            ));
        }
        Ok(())
    }

    fn projection_size(&self) -> (usize, usize) {
        (2 * self.width() - 1, 2 * self.height() - 1)
    }

    /// Projection site of entry `(r, plane offset)` on the half-pitch grid.
    fn site(&self, kind: ProjectionKind, offset: [i64; 2], x: usize, y: usize) -> usize {
        let [x2, y2] = self
            .geometry
            .partner(offset, x, y)
            .expect("valid entries have on-sensor partners");
        let (w, h) = (self.width() as i64, self.height() as i64);
        let (sx, sy) = match kind {
            ProjectionKind::Sum => (x as i64 + x2 as i64, y as i64 + y2 as i64),
            ProjectionKind::Minus => (x2 as i64 - x as i64 + w - 1, y2 as i64 - y as i64 + h - 1),
        };
        sy as usize * (2 * w - 1) as usize + sx as usize
    }

    fn accumulate_sites(
        &self,
        kind: ProjectionKind,
        mut weight: impl FnMut(&Plane, usize) -> f64,
    ) -> Vec<f64> {
        let (pw, ph) = self.projection_size();
        let mut out = vec![0.0; pw * ph];
        let w = self.width();
        for plane in self.planes() {
            for y in 0..self.height() {
                for x in 0..w {
                    let i = y * w + x;
                    if plane.states[i] == EntryState::Valid {
                        out[self.site(kind, plane.offset, x, y)] += weight(plane, i);
                    }
                }
            }
        }
        out
    }

    fn projection_image(&self, kind: ProjectionKind, values: Vec<f64>) -> Image {
        let (pw, ph) = self.projection_size();
        let origin = match kind {
            ProjectionKind::Sum => [0.5, 0.5],
            ProjectionKind::Minus => [
                -(self.width() as f64 - 1.0) / 2.0,
                -(self.height() as f64 - 1.0) / 2.0,
            ],
        };
        Image::half_pitch(pw, ph, origin, values)
    }

    pub fn project(&self, kind: ProjectionKind) -> Result<Image> {
        self.require_resolved()?;
        let values = self.accumulate_sites(kind, |p, i| p.values[i]);
        Ok(self.projection_image(kind, values))
    }

    /// `P₊(s) = Σ_{r₁+r₂=s} Γ(r₁, r₂)` on the `(2W−1) × (2H−1)` grid;
    /// sample `s` sits at physical position `0.5 + s/2`.
    pub fn sum_projection(&self) -> Result<Image> {
        self.project(ProjectionKind::Sum)
    }

    /// `P₋(d) = Σ_{r₂−r₁=d} Γ(r₁, r₂)`; sample `d` sits at `d/2`.
    pub fn minus_projection(&self) -> Result<Image> {
        self.project(ProjectionKind::Minus)
    }

    /// Number of valid entries landing on each projection site.
    pub fn coverage(&self, kind: ProjectionKind) -> Result<Image> {
        self.require_resolved()?;
        let values = self.accumulate_sites(kind, |_, _| 1.0);
        Ok(self.projection_image(kind, values))
    }

    /// Native-resolution image of `Γ(r, r)` (near field) or `Γ(r, c − r)`
    /// (far field). Pixels without a valid entry are masked out.
    pub fn extract_diagonal_image(&self, kind: DiagonalKind) -> Result<Image> {
        match (kind, self.mode()) {
            (DiagonalKind::Diagonal, Mode::NearField)
            | (DiagonalKind::AntiDiagonal, Mode::FarField) => {}
            _ => {
                return Err(Error::Config(format!(
                    "{kind:?} image is not defined for a {:?} JPD",
                    self.mode()
                )))
            }
        }
        self.require_resolved()?;
        let (w, h) = (self.width(), self.height());
        let Some(plane) = self.plane([0, 0]) else {
            let mut img = Image::native(w, h, vec![0.0; w * h]);
            img.mask = Some(vec![false; w * h]);
            return Ok(img);
        };
        let mut img = Image::native(w, h, plane.values.clone());
        if plane.states.iter().any(|&s| s != EntryState::Valid) {
            img.mask = Some(
                plane
                    .states
                    .iter()
                    .map(|&s| s == EntryState::Valid)
                    .collect(),
            );
            for (v, &s) in img.values.iter_mut().zip(&plane.states) {
                if s != EntryState::Valid {
                    *v = 0.0;
                }
            }
        }
        Ok(img)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let g = &self.geometry;
        let mut header = Vec::with_capacity(48);
        header.extend_from_slice(JPD_MAGIC);
        header.extend_from_slice(&1u16.to_le_bytes());
        header.extend_from_slice(&(g.mode as u16).to_le_bytes());
        header.extend_from_slice(&(g.width as u32).to_le_bytes());
        header.extend_from_slice(&(g.height as u32).to_le_bytes());
        header.extend_from_slice(&(g.band_radius as u32).to_le_bytes());
        let c = g.center.unwrap_or([0, 0]);
        header.extend_from_slice(&c[0].to_le_bytes());
        header.extend_from_slice(&c[1].to_le_bytes());
        header.extend_from_slice(&self.frame_pairs.to_le_bytes());
        let present: Vec<&Plane> = self.planes().collect();
        header.extend_from_slice(&(present.len() as u32).to_le_bytes());
        w.write_all(&header)?;
        for p in &present {
            w.write_all(&(p.offset[0] as i32).to_le_bytes())?;
            w.write_all(&(p.offset[1] as i32).to_le_bytes())?;
        }
        for p in &present {
            let mut buf = Vec::with_capacity(p.values.len() * 9);
            for v in &p.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend(p.states.iter().map(|&s| s as u8));
            w.write_all(&buf)?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("truncated JPD snapshot: {e}"));
        let mut header = [0u8; 48];
        r.read_exact(&mut header).map_err(fmt)?;
        if &header[0..4] != JPD_MAGIC {
            return Err(Error::Format("bad magic, not a JPD snapshot".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap()) as usize;
        let i64_at = |o: usize| i64::from_le_bytes(header[o..o + 8].try_into().unwrap());
        let mode = match u16::from_le_bytes([header[6], header[7]]) {
            0 => Mode::NearField,
            1 => Mode::FarField,
            m => return Err(Error::Format(format!("unknown mode code {m}"))),
        };
        let center = (mode == Mode::FarField).then(|| [i64_at(20), i64_at(28)]);
        let geometry = Geometry::new(mode, u32_at(8), u32_at(12), u32_at(16), center)
            .map_err(|e| Error::Format(e.to_string()))?;
        let frame_pairs = i64_at(36) as u64;
        let present = u32_at(44);
        if present > geometry.plane_count() {
            return Err(Error::Format(format!("{present} planes exceed the band")));
        }
        let mut table = vec![0u8; present * 8];
        r.read_exact(&mut table).map_err(fmt)?;
        let mut planes = vec![None; geometry.plane_count()];
        let n = geometry.pixels();
        for t in table.chunks_exact(8) {
            let offset = [
                i32::from_le_bytes(t[0..4].try_into().unwrap()) as i64,
                i32::from_le_bytes(t[4..8].try_into().unwrap()) as i64,
            ];
            let idx = geometry
                .plane_index(offset)
                .ok_or_else(|| Error::Format(format!("plane {offset:?} outside the band")))?;
            let mut buf = vec![0u8; n * 9];
            r.read_exact(&mut buf).map_err(fmt)?;
            let values = buf[..n * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let states = buf[n * 8..]
                .iter()
                .map(|&b| EntryState::from_code(b))
                .collect::<Result<_>>()?;
            planes[idx] = Some(Plane {
                offset,
                values,
                states,
            });
        }
        Ok(Jpd {
            geometry,
            planes,
            frame_pairs,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Estimator settings for [`accumulate_jpd`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub mode: Mode,
    pub band_radius: usize,
    pub center: Option<[i64; 2]>,
    pub unmeasurable: Unmeasurable,
}

impl EstimatorConfig {
    pub fn near(band_radius: usize) -> Self {
        EstimatorConfig {
            mode: Mode::NearField,
            band_radius,
            center: None,
            unmeasurable: Unmeasurable::None,
        }
    }

    pub fn far(band_radius: usize, center: [i64; 2]) -> Self {
        EstimatorConfig {
            mode: Mode::FarField,
            band_radius,
            center: Some(center),
            unmeasurable: Unmeasurable::None,
        }
    }

    pub fn with_unmeasurable(self, unmeasurable: Unmeasurable) -> Self {
        EstimatorConfig {
            unmeasurable,
            ..self
        }
    }
}

/// Raw sums `Σ_l I_l(r₁)[I_l(r₂) − I_{l+1}(r₂)]` over a run of frame pairs.
///
/// Partial accumulators over disjoint runs combine with [`merge`](Self::merge);
/// [`finalize`](Self::finalize) divides by the pair count and symmetrizes.
#[derive(Clone, Debug)]
pub struct JpdAccumulator {
    geometry: Geometry,
    sums: Vec<Vec<f64>>,
    pairs: u64,
    diff: Vec<f64>,
    cur: Vec<f64>,
}

impl JpdAccumulator {
    pub fn new(geometry: Geometry) -> Self {
        JpdAccumulator {
            geometry,
            sums: vec![vec![0.0; geometry.pixels()]; geometry.plane_count()],
            pairs: 0,
            diff: vec![0.0; geometry.pixels()],
            cur: vec![0.0; geometry.pixels()],
        }
    }

    pub fn pairs(&self) -> u64 {
        self.pairs
    }

    /// Adds the term for frame `current` followed by frame `next`.
    pub fn add_pair(&mut self, current: &[f32], next: &[f32]) {
        let g = self.geometry;
        let (w, h) = (g.width, g.height);
        assert_eq!(current.len(), g.pixels());
        assert_eq!(next.len(), g.pixels());
        let flip = g.mode == Mode::FarField;
        let mut nonzero = 0usize;
        for i in 0..w * h {
            let c = current[i] as f64;
            self.cur[i] = c;
            nonzero += (c != 0.0) as usize;
            let j = if flip { w * h - 1 - i } else { i };
            self.diff[j] = c - next[i] as f64;
        }
        self.pairs += 1;
        if nonzero == 0 {
            return;
        }
        if nonzero * 4 < w * h {
            self.add_sparse();
        } else {
            self.add_dense();
        }
    }

    fn add_dense(&mut self) {
        let g = self.geometry;
        let (w, h) = (g.width as i64, g.height as i64);
        for (p, acc) in self.sums.iter_mut().enumerate() {
            let [ex, ey] = g.kernel_shift(g.plane_offset(p));
            let (x0, x1) = (0.max(-ex), w.min(w - ex));
            let (y0, y1) = (0.max(-ey), h.min(h - ey));
            if x0 >= x1 || y0 >= y1 {
                continue;
            }
            for y in y0..y1 {
                let row = (y * w) as usize;
                let p0 = ((y + ey) * w + ex + x0) as usize;
                let n = (x1 - x0) as usize;
                let acc = &mut acc[row + x0 as usize..][..n];
                let cur = &self.cur[row + x0 as usize..][..n];
                let diff = &self.diff[p0..p0 + n];
                for ((a, &c), &d) in acc.iter_mut().zip(cur).zip(diff) {
                    *a += c * d;
                }
            }
        }
    }

    fn add_sparse(&mut self) {
        let g = self.geometry;
        let (w, h) = (g.width as i64, g.height as i64);
        let shifts: Vec<[i64; 2]> = (0..g.plane_count())
            .map(|p| g.kernel_shift(g.plane_offset(p)))
            .collect();
        for (i, &c) in self.cur.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let (x, y) = (i as i64 % w, i as i64 / w);
            for (acc, &[ex, ey]) in self.sums.iter_mut().zip(&shifts) {
                let (px, py) = (x + ex, y + ey);
                if px >= 0 && py >= 0 && px < w && py < h {
                    acc[i] += c * self.diff[(py * w + px) as usize];
                }
            }
        }
    }

    /// Adds another accumulator's sums. Exact when values are integers.
    pub fn merge(&mut self, other: &JpdAccumulator) {
        assert_eq!(self.geometry, other.geometry);
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.pairs += other.pairs;
    }

    /// Mean over frame pairs, symmetrized as `(Γ̂ + Γ̂ᵀ)/2`, with
    /// off-sensor and unmeasurable entries flagged.
    pub fn finalize(&self, unmeasurable: Unmeasurable) -> Result<Jpd> {
        if self.pairs == 0 {
            return Err(Error::InsufficientData("no frame pairs accumulated".into()));
        }
        let g = self.geometry;
        let n = self.pairs as f64;
        let means: Vec<Vec<f64>> = self
            .sums
            .iter()
            .map(|s| s.iter().map(|v| v / n).collect())
            .collect();
        let w = g.width;
        let planes = (0..g.plane_count())
            .map(|p| {
                let offset = g.plane_offset(p);
                let mut values = vec![0.0; g.pixels()];
                let mut states = vec![EntryState::Outside; g.pixels()];
                for y in 0..g.height {
                    for x in 0..w {
                        let Some([x2, y2]) = g.partner(offset, x, y) else {
                            continue;
                        };
                        let i = y * w + x;
                        let dx = x2 as i64 - x as i64;
                        let dy = y2 as i64 - y as i64;
                        if unmeasurable.contains(dx, dy) {
                            states[i] = EntryState::Unmeasured;
                            continue;
                        }
                        let t = g.locate([x2, y2], [x, y]).expect("band is symmetric");
                        let tp = g.plane_index(t).unwrap();
                        values[i] = (means[p][i] + means[tp][y2 * w + x2]) / 2.0;
                        states[i] = EntryState::Valid;
                    }
                }
                Some(Plane {
                    offset,
                    values,
                    states,
                })
            })
            .collect();
        Ok(Jpd {
            geometry: g,
            planes,
            frame_pairs: self.pairs,
        })
    }
}

/// Accumulates the accidental-subtracted JPD estimate from all consecutive
/// frame pairs of `source`.
///
/// Work is split into fixed chunks of [`CHUNK_PAIRS`] pairs and merged in
/// chunk order, so the result does not depend on thread scheduling.
pub fn accumulate_jpd(
    source: &(impl FrameSource + ?Sized),
    config: &EstimatorConfig,
) -> Result<Jpd> {
    let count = source.count();
    if count < 2 {
        return Err(Error::InsufficientData(format!(
            "the estimator needs at least 2 frames, got {count}"
        )));
    }
    let geometry = Geometry::new(
        config.mode,
        source.width(),
        source.height(),
        config.band_radius,
        config.center,
    )?;
    let pairs = count - 1;
    let chunks = pairs.div_ceil(CHUNK_PAIRS);
    let batch = rayon::current_num_threads().max(1) * 2;
    let mut total = JpdAccumulator::new(geometry);
    for start in (0..chunks).step_by(batch) {
        let partials: Vec<JpdAccumulator> = (start..chunks.min(start + batch))
            .into_par_iter()
            .map(|c| {
                let a = c * CHUNK_PAIRS;
                let b = ((c + 1) * CHUNK_PAIRS).min(pairs);
                let mut acc = JpdAccumulator::new(geometry);
                let mut cur = vec![0.0f32; geometry.pixels()];
                let mut next = vec![0.0f32; geometry.pixels()];
                source.frame_into(a, &mut cur);
                for l in a..b {
                    source.frame_into(l + 1, &mut next);
                    acc.add_pair(&cur, &next);
                    std::mem::swap(&mut cur, &mut next);
                }
                acc
            })
            .collect();
        for p in &partials {
            total.merge(p);
        }
    }
    total.finalize(config.unmeasurable)
}
