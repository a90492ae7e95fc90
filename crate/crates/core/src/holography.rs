//! Four-step phase-shifting reconstruction for the entangled far-field,
//! two-photon N00N and classical protocols, and the SLM phase sweep that
//! exposes the doubled phase of photon pairs.

use std::f64::consts::PI;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::jpd::Mode;
use crate::optics::{ground_truth_jpd, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Object and SLM on opposite halves, far-field pairs: recovers `Δθ`.
    EntangledFarField,
    /// Near-field pairs through object and SLM: recovers `2Δθ`.
    Noon,
    /// Laser illumination: recovers `Δθ`.
    Classical,
}

impl Protocol {
    /// SLM phases, in the order `[a, b, c, d]` used by
    /// `arg[(I_a − I_c) + i (I_b − I_d)]`.
    pub fn shifts(self) -> [f64; 4] {
        match self {
            Protocol::Noon => [0.0, PI / 4.0, PI / 2.0, 3.0 * PI / 4.0],
            _ => [0.0, PI / 2.0, PI, 3.0 * PI / 2.0],
        }
    }

    /// Multiple of the object phase carried by the reconstruction.
    pub fn phase_multiple(self) -> f64 {
        match self {
            Protocol::Noon => 2.0,
            _ => 1.0,
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entangled" | "entangled-far-field" => Ok(Protocol::EntangledFarField),
            "noon" => Ok(Protocol::Noon),
            "classical" => Ok(Protocol::Classical),
            other => Err(Error::Config(format!("unknown protocol `{other}`"))),
        }
    }
}

/// Images recorded at successive SLM phases.
#[derive(Clone, Debug)]
pub struct PhaseSeries {
    pub shifts: Vec<f64>,
    pub images: Vec<Image>,
}

impl PhaseSeries {
    pub fn new(shifts: Vec<f64>, images: Vec<Image>) -> Result<Self> {
        if shifts.len() != images.len() {
            return Err(Error::Shape(format!(
                "{} shifts for {} images",
                shifts.len(),
                images.len()
            )));
        }
        if let Some(first) = images.first() {
            if images
                .iter()
                .any(|i| i.width != first.width || i.height != first.height || i.grid != first.grid)
            {
                return Err(Error::Shape("series images must share one grid".into()));
            }
        }
        Ok(PhaseSeries { shifts, images })
    }

    /// Series in the canonical shift order of `protocol`.
    pub fn for_protocol(protocol: Protocol, images: Vec<Image>) -> Result<Self> {
        Self::new(protocol.shifts().to_vec(), images)
    }
}

/// Wraps to `(−π, π]`.
pub fn wrap_phase(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y + 2.0 * PI
    } else {
        y
    }
}

/// Four-step reconstruction. Pixels where the quadrature vanishes (all four
/// images equal, e.g. zero) or any input is masked are marked undefined.
pub fn reconstruct_phase_four_step(series: &PhaseSeries, protocol: Protocol) -> Result<Image> {
    let expected = protocol.shifts();
    if series.shifts.len() != 4
        || series
            .shifts
            .iter()
            .zip(expected)
            .any(|(a, b)| (a - b).abs() > 1e-9)
    {
        return Err(Error::Protocol(format!(
            "{protocol:?} needs shifts {expected:?}, got {:?}",
            series.shifts
        )));
    }
    let [a, b, c, d] = [
        &series.images[0],
        &series.images[1],
        &series.images[2],
        &series.images[3],
    ];
    let mut out = a.zeros_like();
    let mut mask = vec![true; out.values.len()];
    for (i, m) in mask.iter_mut().enumerate() {
        let defined = [a, b, c, d]
            .iter()
            .all(|im| im.mask.as_ref().is_none_or(|mk| mk[i]));
        let re = a.values[i] - c.values[i];
        let im = b.values[i] - d.values[i];
        if !defined || (re == 0.0 && im == 0.0) {
            *m = false;
            continue;
        }
        out.values[i] = wrap_phase(im.atan2(re));
    }
    if mask.contains(&false) {
        out.mask = Some(mask);
    }
    Ok(out)
}

/// One of the two candidates for `Δθ` given a N00N map of `2Δθ`; the other
/// is this plus `π`.
pub fn half_phase(doubled: &Image) -> Image {
    let mut out = doubled.clone();
    out.values.iter_mut().for_each(|v| *v /= 2.0);
    out
}

/// Noiseless images of `scene` at the pixel centres for each shift of
/// `protocol`: `|t|⁴ [1 + v cos m(Δθ − α)]² / (1 + v)²` for pairs (`m = 2` for
/// N00N, 1 for the far-field scheme where object and SLM each hold one
/// photon) and `|t|² [1 + v cos(Δθ − α)] / (1 + v)` for classical light.
pub fn analytic_series(scene: &Scene, protocol: Protocol) -> Result<PhaseSeries> {
    scene.validate()?;
    let (w, h) = (scene.width, scene.height);
    let centre = |i: usize| (i % w) as f64 + 0.5;
    let row = |i: usize| (i / w) as f64 + 0.5;
    let theta = |x: f64, y: f64| {
        scene.phase.as_ref().map_or(0.0, |(th, tv)| {
            th.at(x, y).unwrap_or(0.0) - tv.at(x, y).unwrap_or(0.0)
        })
    };
    let images = protocol
        .shifts()
        .iter()
        .map(|&alpha| {
            let values = (0..w * h)
                .map(|i| {
                    let (x, y) = (centre(i), row(i));
                    let t2 = scene.amplitude.at(x, y).unwrap_or(0.0).powi(2);
                    let phase = theta(x, y) - alpha;
                    match protocol {
                        Protocol::Classical => t2 * scene.classical_fringe(phase),
                        _ => t2 * t2 * scene.pair_fringe(protocol.phase_multiple() * phase),
                    }
                })
                .collect();
            Image::native(w, h, values)
        })
        .collect();
    PhaseSeries::for_protocol(protocol, images)
}

/// Central correlation peak and classical intensity against a uniform SLM phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseCurve {
    pub alphas: Vec<f64>,
    /// `P₋(0)` of the pair JPD.
    pub noon: Vec<f64>,
    /// Mean classical intensity after the polarizer.
    pub classical: Vec<f64>,
}

/// Sweeps a uniform SLM phase over `n_points` values spanning `[0, 2π]` in a
/// near-field scene without object phase.
pub fn double_phase_curve(scene: &Scene, n_points: usize) -> Result<PhaseCurve> {
    if n_points < 2 {
        return Err(Error::Config("a sweep needs at least 2 points".into()));
    }
    if scene.mode != Mode::NearField {
        return Err(Error::Config(
            "the double-phase sweep is a near-field measurement".into(),
        ));
    }
    let alphas: Vec<f64> = (0..n_points)
        .map(|k| 2.0 * PI * k as f64 / (n_points - 1) as f64)
        .collect();
    let mut noon = Vec::with_capacity(n_points);
    let mut classical = Vec::with_capacity(n_points);
    for &alpha in &alphas {
        let s = scene.clone().with_slm_phase(|_, _| alpha);
        noon.push(
            ground_truth_jpd(&s, None, 1)?
                .plane([0, 0])
                .map_or(0.0, |p| p.mass()),
        );
        let hologram = s.classical_hologram();
        classical.push(hologram.values.iter().sum::<f64>() / hologram.values.len() as f64);
    }
    Ok(PhaseCurve {
        alphas,
        noon,
        classical,
    })
}

/// Period of the best least-squares sinusoid `a + b cos(2πx/p) + c sin(2πx/p)`
/// through the samples, searched over periods in `[min_period, max_period]`.
pub fn fit_period(x: &[f64], y: &[f64], min_period: f64, max_period: f64) -> Result<f64> {
    if x.len() != y.len() || x.len() < 4 {
        return Err(Error::InsufficientData(
            "a period fit needs at least 4 samples".into(),
        ));
    }
    if !(min_period > 0.0 && max_period > min_period) {
        return Err(Error::Config("invalid period range".into()));
    }
    let residual = |p: f64| sinusoid_residual(x, y, 2.0 * PI / p);
    // coarse scan in frequency, then golden-section refinement
    let steps = 2000;
    let (fmin, fmax) = (1.0 / max_period, 1.0 / min_period);
    let freq = |k: usize| fmin + (fmax - fmin) * k as f64 / steps as f64;
    let best = (0..=steps)
        .min_by(|&a, &b| residual(1.0 / freq(a)).total_cmp(&residual(1.0 / freq(b))))
        .unwrap();
    let (mut lo, mut hi) = (freq(best.saturating_sub(1)), freq((best + 1).min(steps)));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if residual(1.0 / a) < residual(1.0 / b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    Ok(2.0 / (lo + hi))
}

fn sinusoid_residual(x: &[f64], y: &[f64], omega: f64) -> f64 {
    // normal equations for [1, cos, sin]
    let mut ata = [[0.0f64; 3]; 3];
    let mut aty = [0.0f64; 3];
    for (&xi, &yi) in x.iter().zip(y) {
        let row = [1.0, (omega * xi).cos(), (omega * xi).sin()];
        for i in 0..3 {
            aty[i] += row[i] * yi;
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    let Some(coef) = solve3(ata, aty) else {
        return f64::INFINITY;
    };
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let f = coef[0] + coef[1] * (omega * xi).cos() + coef[2] * (omega * xi).sin();
            (yi - f).powi(2)
        })
        .sum()
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..3 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..3 {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    Some([b[0] / a[0][0], b[1] / a[1][1], b[2] / a[2][2]])
}
