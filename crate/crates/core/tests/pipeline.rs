use approx::assert_relative_eq;
use proptest::prelude::*;

use jpdsr::analysis::{stripe_metric, symmetry_correlation};
use jpdsr::optics::{ground_truth_jpd, Scene};
use jpdsr::superres::{
    exclude_unmeasured, filter_jpd, interpolate_invalid, normalize_jpd, super_resolve_jpd,
    SuperResConfig,
};
use jpdsr::{EntryState, Error, EstimatorConfig, Geometry, Jpd, Mode, Unmeasurable};

fn smooth_jpd(w: usize, h: usize, sigma: f64) -> Jpd {
    let scene = Scene::new(Mode::NearField, w, h, 6)
        .with_amplitude(|x, y| 0.6 + 0.4 * ((x * 0.9).sin() * (y * 0.7).cos()).abs())
        .with_correlation_width(sigma);
    ground_truth_jpd(&scene, None, 2).unwrap()
}

fn mark(jpd: &Jpd, u: Unmeasurable) -> Jpd {
    let mut out = jpd.clone();
    for p in out.planes_mut() {
        if u.contains(p.offset[0], p.offset[1]) {
            for s in p.states.iter_mut().filter(|s| **s == EntryState::Valid) {
                *s = EntryState::Unmeasured;
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn filtering_is_idempotent(sigma in 0.2f64..1.6, t in 0.0f64..=1.0) {
        let jpd = smooth_jpd(6, 5, sigma);
        let once = filter_jpd(&jpd, t).unwrap();
        let twice = filter_jpd(&once, t).unwrap();
        prop_assert_eq!(once.surviving_offsets(), twice.surviving_offsets());
    }

    #[test]
    fn higher_threshold_keeps_a_subset(sigma in 0.2f64..1.6, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let jpd = smooth_jpd(6, 5, sigma);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let kept_lo = filter_jpd(&jpd, lo).unwrap().surviving_offsets();
        let kept_hi = filter_jpd(&jpd, hi).unwrap().surviving_offsets();
        prop_assert!(!kept_hi.is_empty());
        prop_assert!(kept_hi.iter().all(|o| kept_lo.contains(o)));
    }

    #[test]
    fn normalized_image_ignores_global_scale(sigma in 0.4f64..1.6, scale in 1e-6f64..1e6) {
        let jpd = smooth_jpd(6, 6, sigma);
        let cfg = SuperResConfig::new(EstimatorConfig::near(2), 0.5);
        let a = super_resolve_jpd(&jpd, &cfg).unwrap().image;
        let b = super_resolve_jpd(&jpd.scaled(scale), &cfg).unwrap().image;
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn normalized_planes_have_unit_mean(sigma in 0.3f64..1.6) {
        let jpd = normalize_jpd(&filter_jpd(&smooth_jpd(5, 5, sigma), 0.2).unwrap()).unwrap();
        for p in jpd.planes() {
            prop_assert!((p.mean().unwrap() - 1.0).abs() < 1e-12);
        }
    }
}

/// A corrupted diagonal and same-column band: each corrupted entry becomes
/// the mean of its horizontal neighbours.
#[test]
fn interpolation_uses_horizontal_neighbours() {
    let g = Geometry::new(Mode::NearField, 5, 4, 2, None).unwrap();
    let jpd = Jpd::from_fn(g, |r1, r2| {
        (r1[0] * 7 + r1[1] * 3 + r2[0] * 11 + r2[1] * 5) as f64
    });
    let fixed = interpolate_invalid(&mark(&jpd, Unmeasurable::SameColumn)).unwrap();
    for y in 0..4usize {
        for x in 0..5usize {
            for dy in -2i64..=2 {
                let Some(r2y) = y.checked_add_signed(dy as isize).filter(|&v| v < 4) else {
                    continue;
                };
                let side = |dx: i64| {
                    x.checked_add_signed(dx as isize)
                        .filter(|&v| v < 5)
                        .map(|x2| jpd.get([x, y], [x2, r2y]).unwrap())
                };
                let n: Vec<f64> = [side(-1), side(1)].into_iter().flatten().collect();
                let expected = n.iter().sum::<f64>() / n.len() as f64;
                assert_eq!(
                    fixed.get([x, y], [x, r2y]),
                    Some(expected),
                    "({x},{y}) dy={dy}"
                );
            }
        }
    }
    assert!(!fixed.has_pending());
}

#[test]
fn interpolation_fails_without_neighbours() {
    let g = Geometry::new(Mode::NearField, 1, 3, 1, None).unwrap();
    let jpd = mark(&Jpd::from_fn(g, |_, _| 1.0), Unmeasurable::Diagonal);
    assert!(matches!(
        interpolate_invalid(&jpd),
        Err(Error::Interpolation(_))
    ));
}

#[test]
fn excluded_entries_leave_the_sums() {
    let jpd = smooth_jpd(5, 5, 0.8);
    let excluded = exclude_unmeasured(&mark(&jpd, Unmeasurable::Neighbours));
    assert!(!excluded.has_pending());
    for p in excluded.planes() {
        let inner = p.offset[0].abs() <= 1 && p.offset[1].abs() <= 1;
        assert_eq!(p.valid_count() == 0, inner, "{:?}", p.offset);
    }
    assert!(excluded.sum_projection().is_ok());
}

#[test]
fn pending_entries_block_projection_and_filtering() {
    let jpd = mark(&smooth_jpd(4, 4, 0.8), Unmeasurable::Diagonal);
    assert!(matches!(jpd.sum_projection(), Err(Error::State(_))));
    assert!(matches!(filter_jpd(&jpd, 0.5), Err(Error::State(_))));
}

#[test]
fn threshold_outside_unit_interval_is_rejected() {
    assert!(matches!(
        filter_jpd(&smooth_jpd(4, 4, 0.8), 1.5),
        Err(Error::Config(_))
    ));
}

#[test]
fn all_zero_jpd_has_nothing_to_keep() {
    let g = Geometry::new(Mode::NearField, 4, 4, 1, None).unwrap();
    let jpd = Jpd::from_fn(g, |_, _| 0.0);
    assert!(matches!(
        filter_jpd(&jpd, 0.5),
        Err(Error::EmptyFilter { .. })
    ));
}

#[test]
fn zero_mean_plane_is_degenerate() {
    let g = Geometry::new(Mode::NearField, 4, 4, 1, None).unwrap();
    let jpd = Jpd::from_fn(g, |r1, r2| if r1 == r2 { 1.0 } else { 0.0 });
    assert!(matches!(
        normalize_jpd(&jpd),
        Err(Error::DegeneratePlane { .. })
    ));
}

/// A uniform object: every sub-image carries the same level, so the
/// normalized, equalized projection is flat while the raw one shows the
/// parity stripes of unequal plane weights.
#[test]
fn normalization_flattens_a_uniform_object() {
    let scene = Scene::new(Mode::NearField, 12, 12, 6).with_correlation_width(1.2);
    let jpd = ground_truth_jpd(&scene, None, 2).unwrap();
    let cfg = SuperResConfig::new(EstimatorConfig::near(2), 0.3);
    let norm = super_resolve_jpd(&jpd, &cfg).unwrap();
    let raw = super_resolve_jpd(&jpd, &cfg.unnormalized()).unwrap();
    assert!(norm.report.surviving_planes.len() >= 9);
    let flat = stripe_metric(&norm.image).unwrap();
    let striped = stripe_metric(&raw.image).unwrap();
    assert!(flat < 1e-3 * striped, "{flat} vs {striped}");
}

#[test]
fn far_field_projection_is_point_symmetric() {
    let scene = Scene::new(Mode::FarField, 8, 8, 6)
        .with_amplitude(|x, y| if x > 4.0 && y < 5.0 { 1.0 } else { 0.3 })
        .with_correlation_width(0.9);
    let jpd = ground_truth_jpd(&scene, None, 2).unwrap();
    let cfg = SuperResConfig::new(EstimatorConfig::far(2, Geometry::mirror_center(8, 8)), 0.3);
    let sr = super_resolve_jpd(&jpd, &cfg).unwrap();
    assert_eq!((sr.image.width, sr.image.height), (15, 15));
    assert_relative_eq!(symmetry_correlation(&sr.image), 1.0, epsilon = 1e-9);
}
