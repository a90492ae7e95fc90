//! The super-resolution pipeline: resolve unmeasured entries, filter planes
//! by their projected weight, normalize each plane, project onto the
//! half-pitch grid.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::frames::FrameSource;
use crate::image::Image;
use crate::jpd::{
    accumulate_jpd, EntryState, EstimatorConfig, Jpd, Mode, ProjectionKind, Unmeasurable,
};

/// Replaces unmeasured near-field entries by the mean of their horizontal
/// neighbours `Γ(r, r + d ± e_x)`, or by the single one available.
///
/// Only originally valid entries are used as sources.
pub fn interpolate_invalid(jpd: &Jpd) -> Result<Jpd> {
    if jpd.mode() != Mode::NearField {
        return Err(Error::Config(
            "interpolation is defined for near-field JPDs only".into(),
        ));
    }
    let mut out = jpd.clone();
    for plane in out.planes_mut() {
        if !plane.has_pending() {
            continue;
        }
        let d = plane.offset;
        let left = jpd.plane([d[0] - 1, d[1]]);
        let right = jpd.plane([d[0] + 1, d[1]]);
        for i in 0..plane.values.len() {
            if plane.states[i] != EntryState::Unmeasured {
                continue;
            }
            let sources: Vec<f64> = [left, right]
                .into_iter()
                .flatten()
                .filter(|p| p.states[i] == EntryState::Valid)
                .map(|p| p.values[i])
                .collect();
            if sources.is_empty() {
                let (x, y) = (i % jpd.width(), i / jpd.width());
                return Err(Error::Interpolation(format!(
                    "entry ({x}, {y}) of plane {d:?} has no valid horizontal neighbour"
                )));
            }
            plane.values[i] = sources.iter().sum::<f64>() / sources.len() as f64;
            plane.states[i] = EntryState::Valid;
        }
    }
    Ok(out)
}

/// Drops unmeasured entries from all later sums and means.
pub fn exclude_unmeasured(jpd: &Jpd) -> Jpd {
    let mut out = jpd.clone();
    for plane in out.planes_mut() {
        for (v, s) in plane.values.iter_mut().zip(plane.states.iter_mut()) {
            if *s == EntryState::Unmeasured {
                *s = EntryState::Excluded;
                *v = 0.0;
            }
        }
    }
    out
}

/// Value of each surviving plane in the selector projection: `P₋(d)` in the
/// near field, `P₊(c + u)` in the far field. Both equal the plane mass.
pub fn plane_masses(jpd: &Jpd) -> Vec<([i64; 2], f64)> {
    jpd.planes().map(|p| (p.offset, p.mass())).collect()
}

/// Removes every plane whose selector value is below `threshold` times the
/// largest one. `threshold = 0` keeps everything.
pub fn filter_jpd(jpd: &Jpd, threshold: f64) -> Result<Jpd> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    if jpd.has_pending() {
        return Err(Error::State(
            "filtering needs a JPD without unmeasured entries".into(),
        ));
    }
    if threshold == 0.0 {
        return Ok(jpd.clone());
    }
    let masses = plane_masses(jpd);
    let max = masses.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::EmptyFilter { threshold });
    }
    let mut out = jpd.clone();
    for (offset, mass) in masses {
        if mass < threshold * max {
            out.remove_plane(offset);
        }
    }
    Ok(out)
}

/// Divides every surviving plane by its mean over valid entries.
pub fn normalize_jpd(jpd: &Jpd) -> Result<Jpd> {
    let mut out = jpd.clone();
    if out.planes().next().is_none() {
        return Err(Error::EmptyFilter {
            threshold: f64::NAN,
        });
    }
    for plane in out.planes_mut() {
        let mean = plane.mean().unwrap_or(0.0);
        if mean == 0.0 || !mean.is_finite() {
            return Err(Error::DegeneratePlane {
                dx: plane.offset[0] as i32,
                dy: plane.offset[1] as i32,
            });
        }
        for (v, &s) in plane.values.iter_mut().zip(&plane.states) {
            if s == EntryState::Valid {
                *v /= mean;
            }
        }
    }
    Ok(out)
}

/// Divides each projection site by the number of valid entries landing on
/// it. Sites without any entry are masked and set to 0.
pub fn equalize_coverage(projection: &Image, coverage: &Image) -> Image {
    let mut out = projection.clone();
    let mut mask = vec![true; out.values.len()];
    for ((v, &c), m) in out.values.iter_mut().zip(&coverage.values).zip(&mut mask) {
        if c > 0.0 {
            *v /= c;
        } else {
            *v = 0.0;
            *m = false;
        }
    }
    if mask.contains(&false) {
        out.mask = Some(mask);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuperResConfig {
    pub estimator: EstimatorConfig,
    pub threshold: f64,
    /// Per-plane mean normalization.
    pub normalize: bool,
    /// Average rather than sum the entries landing on each projection site.
    pub equalize: bool,
}

impl SuperResConfig {
    pub fn new(estimator: EstimatorConfig, threshold: f64) -> Self {
        SuperResConfig {
            estimator,
            threshold,
            normalize: true,
            equalize: true,
        }
    }

    /// Raw sum projection of the filtered JPD.
    pub fn unnormalized(self) -> Self {
        SuperResConfig {
            normalize: false,
            equalize: false,
            ..self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlaneMass {
    pub dx: i64,
    pub dy: i64,
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuperResReport {
    pub mode: Mode,
    pub band_radius: usize,
    pub threshold: f64,
    pub frame_pairs: u64,
    pub plane_masses: Vec<PlaneMass>,
    pub surviving_planes: Vec<[i64; 2]>,
}

#[derive(Clone, Debug)]
pub struct SuperResolution {
    /// Image on the half-pitch grid.
    pub image: Image,
    /// The JPD after filtering and normalization.
    pub jpd: Jpd,
    pub report: SuperResReport,
}

/// Makes a freshly accumulated JPD projectable: interpolates diagonal and
/// same-column entries in the near field, excludes anything else pending.
pub fn resolve_unmeasured(jpd: &Jpd, unmeasurable: Unmeasurable) -> Result<Jpd> {
    if !jpd.has_pending() {
        return Ok(jpd.clone());
    }
    match (jpd.mode(), unmeasurable) {
        (Mode::NearField, Unmeasurable::SameColumn | Unmeasurable::Diagonal) => {
            interpolate_invalid(jpd)
        }
        _ => Ok(exclude_unmeasured(jpd)),
    }
}

/// Filters, normalizes and projects an already estimated JPD.
pub fn super_resolve_jpd(jpd: &Jpd, config: &SuperResConfig) -> Result<SuperResolution> {
    let resolved = resolve_unmeasured(jpd, config.estimator.unmeasurable)?;
    let plane_masses = plane_masses(&resolved)
        .into_iter()
        .map(|(o, mass)| PlaneMass {
            dx: o[0],
            dy: o[1],
            mass,
        })
        .collect();
    let filtered = filter_jpd(&resolved, config.threshold)?;
    let processed = if config.normalize {
        normalize_jpd(&filtered)?
    } else {
        filtered
    };
    let kind = match processed.mode() {
        Mode::NearField => ProjectionKind::Sum,
        Mode::FarField => ProjectionKind::Minus,
    };
    let projection = processed.project(kind)?;
    let image = if config.equalize {
        equalize_coverage(&projection, &processed.coverage(kind)?)
    } else {
        projection
    };
    let report = SuperResReport {
        mode: processed.mode(),
        band_radius: processed.band_radius(),
        threshold: config.threshold,
        frame_pairs: processed.frame_pairs(),
        plane_masses,
        surviving_planes: processed.surviving_offsets(),
    };
    Ok(SuperResolution {
        image,
        jpd: processed,
        report,
    })
}

/// Full pipeline from frames to the super-resolved image.
pub fn super_resolve(
    source: &(impl FrameSource + ?Sized),
    config: &SuperResConfig,
) -> Result<SuperResolution> {
    let jpd = accumulate_jpd(source, &config.estimator)?;
    super_resolve_jpd(&jpd, config)
}

/// Super-resolves several JPDs of one scene with shared processing: plane
/// selection and per-plane normalization constants both come from their sum,
/// so the relative scale between members survives (phase-shifting series).
pub fn super_resolve_series(
    jpds: &[Jpd],
    config: &SuperResConfig,
) -> Result<(Vec<Image>, SuperResReport)> {
    let resolved: Vec<Jpd> = jpds
        .iter()
        .map(|j| resolve_unmeasured(j, config.estimator.unmeasurable))
        .collect::<Result<_>>()?;
    let Some(first) = resolved.first() else {
        return Err(Error::InsufficientData("empty JPD series".into()));
    };
    let mut total = first.clone();
    for j in &resolved[1..] {
        if j.geometry() != first.geometry() {
            return Err(Error::Shape("series JPDs differ in geometry".into()));
        }
        for plane in total.planes_mut() {
            if let Some(other) = j.plane(plane.offset) {
                for ((v, s), (&o, &os)) in plane
                    .values
                    .iter_mut()
                    .zip(plane.states.iter_mut())
                    .zip(other.values.iter().zip(&other.states))
                {
                    *v += o;
                    if os != EntryState::Valid {
                        *s = os;
                    }
                }
            }
        }
    }
    let plane_masses = plane_masses(&total)
        .into_iter()
        .map(|(o, mass)| PlaneMass {
            dx: o[0],
            dy: o[1],
            mass,
        })
        .collect();
    let filtered = filter_jpd(&total, config.threshold)?;
    let keep = filtered.surviving_offsets();
    let scale: Vec<f64> = if config.normalize {
        keep.iter()
            .map(|&o| match filtered.plane(o).and_then(|p| p.mean()) {
                Some(m) if m != 0.0 && m.is_finite() => Ok(1.0 / m),
                _ => Err(Error::DegeneratePlane {
                    dx: o[0] as i32,
                    dy: o[1] as i32,
                }),
            })
            .collect::<Result<_>>()?
    } else {
        vec![1.0; keep.len()]
    };
    let kind = match first.mode() {
        Mode::NearField => ProjectionKind::Sum,
        Mode::FarField => ProjectionKind::Minus,
    };
    let mut images = Vec::with_capacity(resolved.len());
    for j in &resolved {
        let mut member = j.clone();
        for o in member.surviving_offsets() {
            if !keep.contains(&o) {
                member.remove_plane(o);
            }
        }
        for (o, &f) in keep.iter().zip(&scale) {
            if let Some(p) = member.plane_mut(*o) {
                for (v, &st) in p.values.iter_mut().zip(&filtered.plane(*o).unwrap().states) {
                    if st == EntryState::Valid {
                        *v *= f;
                    }
                }
            }
        }
        let projection = member.project(kind)?;
        images.push(if config.equalize {
            equalize_coverage(&projection, &member.coverage(kind)?)
        } else {
            projection
        });
    }
    let report = SuperResReport {
        mode: first.mode(),
        band_radius: first.band_radius(),
        threshold: config.threshold,
        frame_pairs: resolved.iter().map(Jpd::frame_pairs).sum(),
        plane_masses,
        surviving_planes: keep,
    };
    Ok((images, report))
}
