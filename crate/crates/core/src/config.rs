//! TOML scene description. Every dimensional key carries its unit in the
//! name: `_px` (native pixels), `_rad` (radians), `_counts` (camera counts).
//!
//! ```toml
//! frames = 10000
//! pairs_per_frame = 20.0
//!
//! [sensor]
//! width_px = 32
//! height_px = 32
//!
//! [source]
//! geometry = "near-field"
//! correlation_width_px = 1.2
//!
//! [object]
//! kind = "grating"
//! period_px = 5.0
//! line_width_px = 1.0
//! low_amplitude = 0.5
//!
//! [camera]
//! kind = "ideal"
//! ```

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::jpd::Mode;
use crate::optics::{
    CameraKind, CameraModel, Crosstalk, Scene, DEFAULT_CORRELATION_WIDTH, DEFAULT_SUBGRID,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub frames: usize,
    pub pairs_per_frame: f64,
    /// Default master seed; the command line may override it.
    pub seed: Option<u64>,
    pub sensor: SensorConfig,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default)]
    pub object: ObjectConfig,
    #[serde(default)]
    pub slm: SlmConfig,
    #[serde(default)]
    pub camera: CameraConfig,
    pub classical: Option<ClassicalConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub width_px: usize,
    pub height_px: usize,
    #[serde(default = "default_subgrid")]
    pub subgrid_factor: usize,
}

fn default_subgrid() -> usize {
    DEFAULT_SUBGRID
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    #[serde(default = "default_geometry")]
    pub geometry: Mode,
    #[serde(default = "default_width")]
    pub correlation_width_px: f64,
    #[serde(default = "one")]
    pub fringe_visibility: f64,
}

fn default_geometry() -> Mode {
    Mode::NearField
}
fn default_width() -> f64 {
    DEFAULT_CORRELATION_WIDTH
}
fn one() -> f64 {
    1.0
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            geometry: Mode::NearField,
            correlation_width_px: DEFAULT_CORRELATION_WIDTH,
            fringe_visibility: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    #[default]
    Full,
    LeftHalf,
    RightHalf,
}

impl Region {
    fn contains(self, x: f64, width: f64) -> bool {
        match self {
            Region::Full => true,
            Region::LeftHalf => x < width / 2.0,
            Region::RightHalf => x >= width / 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Lines of width `line_width_px` at `low_amplitude`.
    #[default]
    Square,
    /// Intensity `|t|²` varying as a raised cosine between `low_amplitude²` and 1.
    Cosine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LineAxis {
    /// Horizontal lines: transmission varies along `y`.
    #[default]
    Y,
    X,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
#[derive(Default)]
pub enum ObjectConfig {
    #[default]
    Uniform,
    Grating {
        period_px: f64,
        #[serde(default = "one")]
        line_width_px: f64,
        #[serde(default)]
        low_amplitude: f64,
        #[serde(default)]
        profile: Profile,
        #[serde(default)]
        axis: LineAxis,
        #[serde(default)]
        offset_px: f64,
        #[serde(default)]
        region: Region,
    },
    /// Lines along both axes.
    Grid {
        period_px: f64,
        #[serde(default = "one")]
        line_width_px: f64,
        #[serde(default)]
        low_amplitude: f64,
        #[serde(default)]
        region: Region,
    },
    /// Birefringent phase tiles `Δθ`, row-major, on a `tiles × tiles` board.
    CheckerboardPhase {
        phases_rad: Vec<f64>,
        #[serde(default = "three")]
        tiles: usize,
        #[serde(default)]
        region: Region,
    },
    /// Cat silhouette transmitting on one half of the sensor, the other half open.
    HalfPlaneCat {
        #[serde(default = "right")]
        side: Region,
    },
    /// 8- or 16-bit binary PGM scaled to `[0, 1]` and stretched over the sensor.
    Pgm {
        path: PathBuf,
        #[serde(default)]
        region: Region,
    },
}

fn three() -> usize {
    3
}
fn right() -> Region {
    Region::RightHalf
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlmConfig {
    /// Uniform SLM phase; absent means no SLM in the path.
    pub phase_rad: Option<f64>,
    #[serde(default)]
    pub region: Region,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    #[serde(default = "ideal_kind")]
    pub kind: CameraKind,
    pub quantum_efficiency: Option<f64>,
    pub fill_factor: Option<f64>,
    pub gain_mean_counts: Option<f64>,
    pub gain_sigma_counts: Option<f64>,
    pub read_noise_sigma_counts: Option<f64>,
    pub bias_counts: Option<f64>,
    pub dark_rate_counts: Option<f64>,
    pub smearing_coeff: Option<f64>,
    pub crosstalk_prob: Option<f64>,
    pub crosstalk: Option<Crosstalk>,
}

fn ideal_kind() -> CameraKind {
    CameraKind::Ideal
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            kind: CameraKind::Ideal,
            quantum_efficiency: None,
            fill_factor: None,
            gain_mean_counts: None,
            gain_sigma_counts: None,
            read_noise_sigma_counts: None,
            bias_counts: None,
            dark_rate_counts: None,
            smearing_coeff: None,
            crosstalk_prob: None,
            crosstalk: None,
        }
    }
}

impl CameraConfig {
    pub fn model(&self) -> CameraModel {
        let mut m = match self.kind {
            CameraKind::Ideal => CameraModel::ideal(),
            CameraKind::Emccd => CameraModel::emccd(),
            CameraKind::Spad => CameraModel::spad(),
        };
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut m.quantum_efficiency, self.quantum_efficiency);
        set(&mut m.fill_factor, self.fill_factor);
        set(&mut m.gain_mean, self.gain_mean_counts);
        set(&mut m.gain_sigma, self.gain_sigma_counts);
        set(&mut m.read_noise_sigma, self.read_noise_sigma_counts);
        set(&mut m.bias, self.bias_counts);
        set(&mut m.dark_rate, self.dark_rate_counts);
        set(&mut m.smearing_coeff, self.smearing_coeff);
        set(&mut m.crosstalk_prob, self.crosstalk_prob);
        if let Some(c) = self.crosstalk {
            m.crosstalk = c;
        }
        m
    }
}

/// Classical light added on top of the pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicalConfig {
    /// Mean photons per pixel per frame before the object.
    pub photons_per_pixel: f64,
    /// Shape the classical light by the object transmission `|t|²`.
    #[serde(default)]
    pub through_object: bool,
    /// Pass through object, SLM and polarizer: `n |t|² [1 + v cos(Δθ − α)] / (1 + v)`.
    /// Implies `through_object`.
    #[serde(default)]
    pub hologram: bool,
}

/// A validated configuration ready to simulate.
#[derive(Clone, Debug)]
pub struct Simulated {
    pub scene: Scene,
    pub camera: CameraModel,
    pub pairs_per_frame: f64,
    pub frames: usize,
}

impl SceneConfig {
    /// Parses and validates; errors name the offending line where possible.
    pub fn from_toml(source: &str) -> Result<Self> {
        let cfg: SceneConfig = toml::from_str(source).map_err(|e| {
            // tagged tables are buffered, so their spans point at the header
            let named = e
                .message()
                .strip_prefix("unknown field `")
                .and_then(|m| m.split('`').next())
                .and_then(|k| line_of(source, k));
            let line = named
                .or_else(|| {
                    e.span()
                        .map(|s| source[..s.start].matches('\n').count() + 1)
                })
                .map_or(String::new(), |l| format!("line {l}: "));
            Error::Config(format!("{line}{}", e.message()))
        })?;
        cfg.validate().map_err(|(key, msg)| {
            let line = line_of(source, key).map_or(String::new(), |l| format!("line {l}: "));
            Error::Config(format!("{line}{key}: {msg}"))
        })?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative object files resolve against the config's directory
        if let ObjectConfig::Pgm { path: p, .. } = &mut cfg.object {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.frames < 2 {
            return Err((
                "frames",
                format!("needs at least 2 frames, got {}", self.frames),
            ));
        }
        if !(self.pairs_per_frame >= 0.0 && self.pairs_per_frame.is_finite()) {
            return Err(("pairs_per_frame", "must be finite and >= 0".into()));
        }
        if self.sensor.width_px == 0 || self.sensor.height_px == 0 {
            return Err(("width_px", "sensor must have at least one pixel".into()));
        }
        if self.sensor.subgrid_factor < 2 {
            return Err(("subgrid_factor", "must be at least 2".into()));
        }
        match &self.object {
            ObjectConfig::Grating {
                period_px,
                line_width_px,
                low_amplitude,
                ..
            }
            | ObjectConfig::Grid {
                period_px,
                line_width_px,
                low_amplitude,
                ..
            } => {
                if !(*period_px > 0.0) {
                    return Err(("period_px", "must be positive".into()));
                }
                if !(*line_width_px >= 0.0 && line_width_px <= period_px) {
                    return Err(("line_width_px", "must lie in [0, period_px]".into()));
                }
                if !(0.0..=1.0).contains(low_amplitude) {
                    return Err(("low_amplitude", "must lie in [0, 1]".into()));
                }
            }
            ObjectConfig::CheckerboardPhase {
                phases_rad, tiles, ..
            } if (*tiles == 0 || phases_rad.len() != tiles * tiles) => {
                return Err((
                    "phases_rad",
                    format!("needs tiles² = {} values", tiles * tiles),
                ));
            }
            _ => {}
        }
        if let Some(c) = &self.classical {
            if !(c.photons_per_pixel >= 0.0 && c.photons_per_pixel.is_finite()) {
                return Err(("photons_per_pixel", "must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Simulated> {
        let (w, h) = (self.sensor.width_px, self.sensor.height_px);
        let (wf, hf) = (w as f64, h as f64);
        let mut scene = Scene::new(self.source.geometry, w, h, self.sensor.subgrid_factor)
            .with_correlation_width(self.source.correlation_width_px);
        scene.fringe_visibility = self.source.fringe_visibility;
        let amplitude: Box<dyn Fn(f64, f64) -> f64> = match &self.object {
            ObjectConfig::Uniform | ObjectConfig::CheckerboardPhase { .. } => Box::new(|_, _| 1.0),
            ObjectConfig::Grating {
                period_px,
                line_width_px,
                low_amplitude,
                profile,
                axis,
                offset_px,
                region,
            } => {
                let (p, lw, low, prof, ax, off, r) = (
                    *period_px,
                    *line_width_px,
                    *low_amplitude,
                    *profile,
                    *axis,
                    *offset_px,
                    *region,
                );
                Box::new(move |x, y| {
                    if !r.contains(x, wf) {
                        return 1.0;
                    }
                    let c = match ax {
                        LineAxis::Y => y,
                        LineAxis::X => x,
                    } - off;
                    match prof {
                        Profile::Square => {
                            if c.rem_euclid(p) < lw {
                                low
                            } else {
                                1.0
                            }
                        }
                        Profile::Cosine => {
                            let lo = low * low;
                            (lo + (1.0 - lo) * 0.5 * (1.0 + (2.0 * PI * c / p).cos())).sqrt()
                        }
                    }
                })
            }
            ObjectConfig::Grid {
                period_px,
                line_width_px,
                low_amplitude,
                region,
            } => {
                let (p, lw, low, r) = (*period_px, *line_width_px, *low_amplitude, *region);
                Box::new(move |x, y| {
                    if r.contains(x, wf) && (x.rem_euclid(p) < lw || y.rem_euclid(p) < lw) {
                        low
                    } else {
                        1.0
                    }
                })
            }
            ObjectConfig::HalfPlaneCat { side } => {
                let s = *side;
                Box::new(move |x, y| {
                    if !s.contains(x, wf) {
                        return 1.0;
                    }
                    // cat centred in its half
                    let half = wf / 2.0;
                    let x0 = if s == Region::LeftHalf { 0.0 } else { half };
                    let u = (x - x0) / half;
                    let v = y / hf;
                    if cat_silhouette(u, v) {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
            ObjectConfig::Pgm { path, region } => {
                let img = Image::load(path)?;
                let max = img.max();
                let r = *region;
                let (iw, ih) = (img.width as f64, img.height as f64);
                Box::new(move |x, y| {
                    if !r.contains(x, wf) {
                        return 1.0;
                    }
                    let i = ((x / wf * iw) as usize).min(img.width - 1);
                    let j = ((y / hf * ih) as usize).min(img.height - 1);
                    if max > 0.0 {
                        (img.get(i, j) / max).clamp(0.0, 1.0)
                    } else {
                        0.0
                    }
                })
            }
        };
        scene = scene.with_amplitude(amplitude);
        if let ObjectConfig::CheckerboardPhase {
            phases_rad,
            tiles,
            region,
        } = &self.object
        {
            let (ph, n, r) = (phases_rad.clone(), *tiles, *region);
            let (x0, span) = match r {
                Region::Full => (0.0, wf),
                Region::LeftHalf => (0.0, wf / 2.0),
                Region::RightHalf => (wf / 2.0, wf / 2.0),
            };
            scene = scene.with_phase_difference(move |x, y| {
                if !r.contains(x, wf) {
                    return 0.0;
                }
                let i = (((x - x0) / span * n as f64) as usize).min(n - 1);
                let j = ((y / hf * n as f64) as usize).min(n - 1);
                ph[j * n + i]
            });
        }
        if let Some(alpha) = self.slm.phase_rad {
            let r = self.slm.region;
            scene = scene.with_slm_phase(move |x, _| if r.contains(x, wf) { alpha } else { 0.0 });
        }
        if let Some(c) = self.classical.as_ref().filter(|c| c.hologram) {
            let mut map = scene.classical_hologram();
            map.values
                .iter_mut()
                .for_each(|v| *v *= c.photons_per_pixel);
            scene.classical = Some(map);
        } else if let Some(c) = &self.classical {
            let amp = scene.amplitude.clone();
            let (n, through) = (c.photons_per_pixel, c.through_object);
            scene = scene.with_classical(|x, y| {
                if through {
                    n * amp.at(x, y).unwrap_or(0.0).powi(2)
                } else {
                    n
                }
            });
        }
        scene.validate()?;
        let camera = self.camera.model();
        camera.validate()?;
        Ok(Simulated {
            scene,
            camera,
            pairs_per_frame: self.pairs_per_frame,
            frames: self.frames,
        })
    }
}

/// Cat silhouette in unit coordinates `(u, v) ∈ [0, 1]²`, `v` pointing down:
/// round head with two ears above an elliptic body and a tail.
pub fn cat_silhouette(u: f64, v: f64) -> bool {
    let inside_ellipse = |cx: f64, cy: f64, rx: f64, ry: f64| {
        ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2) <= 1.0
    };
    let inside_triangle = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| {
        let s = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (v - p.1) - (q.1 - p.1) * (u - p.0);
        let (d1, d2, d3) = (s(a, b), s(b, c), s(c, a));
        !((d1 < 0.0 || d2 < 0.0 || d3 < 0.0) && (d1 > 0.0 || d2 > 0.0 || d3 > 0.0))
    };
    let head = inside_ellipse(0.45, 0.3, 0.16, 0.14);
    let ears = inside_triangle((0.31, 0.24), (0.33, 0.06), (0.43, 0.18))
        || inside_triangle((0.47, 0.18), (0.57, 0.06), (0.59, 0.24));
    let body = inside_ellipse(0.5, 0.65, 0.22, 0.2);
    let tail = inside_ellipse(0.76, 0.72, 0.06, 0.16);
    head || ears || body || tail
}

/// First line (1-based) assigning `key`.
fn line_of(source: &str, key: &str) -> Option<usize> {
    source
        .lines()
        .position(|l| {
            let t = l.trim_start();
            t.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}
