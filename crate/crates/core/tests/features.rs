use approx::assert_relative_eq;
use featalign::features::*;
use featalign::geometry::{Camera, Pose};
use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_level(w: usize, h: usize, dim: usize, stride: f64, seed: u64) -> FeatureLevel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = (0..w * h * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let u = (0..w * h).map(|_| rng.random_range(0.0..3.0)).collect();
    FeatureLevel::new(w, h, dim, stride, f, u).unwrap()
}

fn constant_pyramid(value: &[f64], u: f64) -> FeaturePyramid {
    let (w, h) = (100, 100);
    let f = value.iter().copied().cycle().take(w * h * value.len()).collect();
    FeaturePyramid::new(vec![FeatureLevel::new(w, h, value.len(), 1.0, f, vec![u; w * h]).unwrap()]).unwrap()
}

fn camera() -> Camera {
    Camera::new(100.0, 100.0, 49.5, 49.5, 100, 100).unwrap()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

#[test]
fn normalized_grid_has_unit_or_zero_cells() {
    let mut lvl = random_level(23, 17, 8, 2.0, 7);
    for c in [0, 5, 100] {
        let (i, j) = (c % 23, c / 23);
        lvl.cell_mut(i, j).iter_mut().for_each(|x| *x = 0.0);
    }
    let lvl = normalize_channels(lvl);
    for j in 0..17 {
        for i in 0..23 {
            let n = lvl.cell(i, j).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(n == 0.0 || (n - 1.0).abs() <= 1e-6, "cell ({i},{j}) norm {n}");
        }
    }
}

#[test]
fn cell_centers_reproduce_stored_values() {
    for stride in [1.0, 4.0, 16.0] {
        let lvl = random_level(12, 9, 4, stride, 3);
        for j in 0..9 {
            for i in 0..12 {
                let c = lvl.cell_center(i, j);
                let out = interpolate(&lvl, &c);
                let (iw, ih) = lvl.image_size();
                let inside = |v: f64, size: f64| v >= BORDER_MARGIN && v <= size - 1.0 - BORDER_MARGIN;
                assert_eq!(out.valid, inside(c.x, iw) && inside(c.y, ih));
                if !out.valid {
                    continue;
                }
                for (a, b) in out.feature.iter().zip(lvl.cell(i, j)) {
                    assert!((a - b).abs() <= 1e-12);
                }
                assert!((out.uncertainty - lvl.cell_uncertainty(i, j)).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn midpoint_matches_brute_force_weights() {
    let lvl = random_level(10, 10, 5, 4.0, 11);
    let (a, b) = (lvl.cell_center(3, 4), lvl.cell_center(4, 5));
    let p = (a + b) / 2.0;
    let out = interpolate(&lvl, &p);
    for c in 0..5 {
        let mean = (lvl.cell(3, 4)[c] + lvl.cell(4, 4)[c] + lvl.cell(3, 5)[c] + lvl.cell(4, 5)[c]) / 4.0;
        assert_relative_eq!(out.feature[c], mean, epsilon = 1e-14);
    }
}

#[test]
fn border_rule_example() {
    let lvl = FeatureLevel::from_features(100, 100, 2, 1.0, vec![0.5; 20_000]).unwrap();
    let out = interpolate(&lvl, &Vector2::new(1.0, 10.0));
    assert!(!out.valid);
    assert_eq!(out.uncertainty, 0.0);
    assert!(out.grad.iter().all(|x| *x == 0.0));
}

#[test]
fn confidence_examples() {
    assert_eq!(confidence_from_uncertainty(0.0), 1.0);
    assert_eq!(confidence_from_uncertainty(1.0), 0.5);
    assert_relative_eq!(confidence_from_uncertainty(1e6), 1e-6, max_relative = 1e-5);
}

#[test]
fn pyramid_rejects_bad_stride_order() {
    let a = FeatureLevel::from_features(4, 4, 1, 4.0, vec![1.0; 16]).unwrap();
    let b = FeatureLevel::from_features(16, 16, 1, 1.0, vec![1.0; 256]).unwrap();
    assert!(FeaturePyramid::new(vec![a.clone(), b.clone()]).is_ok());
    assert_eq!(FeaturePyramid::new(vec![b, a]), Err(FeatureError::StrideOrder));
    assert_eq!(FeaturePyramid::new(vec![]), Err(FeatureError::EmptyPyramid));
}

#[test]
fn single_reference_aggregation_is_its_lookup() {
    let pyr = constant_pyramid(&[1.0, 2.0, 2.0], 0.0);
    let refs = [ReferenceView { pyramid: &pyr, pose: Pose::identity(), camera: camera() }];
    let (keep, pf) = aggregate_reference(&[Vector3::new(0.1, -0.2, 5.0)], &refs, 5).unwrap();
    assert_eq!(keep, vec![0]);
    let (d, conf) = pf.levels[0].get(0).unwrap();
    assert_relative_eq!(d, &unit(&[1.0, 2.0, 2.0])[..], epsilon = 1e-12);
    assert_eq!(conf, 1.0);
}

#[test]
fn identical_descriptors_ignore_confidence() {
    let a = constant_pyramid(&[0.0, 0.6, 0.8], 0.0);
    let b = constant_pyramid(&[0.0, 0.6, 0.8], 7.0);
    let refs = [
        ReferenceView { pyramid: &a, pose: Pose::identity(), camera: camera() },
        ReferenceView { pyramid: &b, pose: Pose::identity(), camera: camera() },
    ];
    let (_, pf) = aggregate_reference(&[Vector3::new(0.0, 0.0, 3.0)], &refs, 5).unwrap();
    let (d, conf) = pf.levels[0].get(0).unwrap();
    assert_relative_eq!(d, &[0.0, 0.6, 0.8][..], epsilon = 1e-12);
    assert_eq!(conf, 1.0);
}

#[test]
fn three_reference_weighted_mean() {
    // confidences 0.5, 0.5 and (numerically) 0
    let a = constant_pyramid(&[1.0, 0.0, 0.0], 1.0);
    let b = constant_pyramid(&[0.0, 1.0, 0.0], 1.0);
    let c = constant_pyramid(&[0.0, 0.0, 1.0], 1e300);
    let refs: Vec<_> = [&a, &b, &c]
        .into_iter()
        .map(|p| ReferenceView { pyramid: p, pose: Pose::identity(), camera: camera() })
        .collect();
    let (_, pf) = aggregate_reference(&[Vector3::new(0.0, 0.0, 2.0)], &refs, 5).unwrap();
    let (d, conf) = pf.levels[0].get(0).unwrap();
    let s = 0.5f64.sqrt();
    assert_relative_eq!(d, &[s, s, 0.0][..], epsilon = 1e-12);
    assert_relative_eq!(conf, 0.5);
}

#[test]
fn unobserved_points_are_omitted() {
    let pyr = constant_pyramid(&[1.0], 0.0);
    let refs = [ReferenceView { pyramid: &pyr, pose: Pose::identity(), camera: camera() }];
    let pts = [Vector3::new(0.0, 0.0, -2.0), Vector3::new(0.0, 0.0, 2.0), Vector3::new(50.0, 0.0, 1.0)];
    let (keep, pf) = aggregate_reference(&pts, &refs, 5).unwrap();
    assert_eq!(keep, vec![1]);
    assert_eq!(pf.num_points(), 1);
    assert_eq!(aggregate_reference(&pts[..1], &refs, 5).unwrap_err(), FeatureError::EmptyModel);
}

// Grid coordinates with fractional parts clear of cell boundaries.
fn grid_point(w: usize, h: usize) -> impl Strategy<Value = Vector2<f64>> {
    (0usize..w - 1, 0usize..h - 1, 0.02..0.98f64, 0.02..0.98f64)
        .prop_map(|(i, j, fx, fy)| Vector2::new(i as f64 + fx, j as f64 + fy))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn interpolation_gradient_matches_central_differences(
        seed in 0u64..1000,
        stride in prop::sample::select(vec![1.0, 4.0, 16.0]),
        g in grid_point(20, 14),
    ) {
        let q = (g + Vector2::repeat(0.5)) * stride - Vector2::repeat(0.5);
        let lvl = random_level(20, 14, 6, stride, seed);
        let (iw, ih) = lvl.image_size();
        let m = BORDER_MARGIN + 1e-3;
        prop_assume!(q.x >= m && q.y >= m && q.x <= iw - 1.0 - m && q.y <= ih - 1.0 - m);
        let out = interpolate(&lvl, &q);
        prop_assert!(out.valid);
        let h = 1e-4;
        for k in 0..2 {
            let mut e = Vector2::zeros();
            e[k] = h;
            let fp = interpolate(&lvl, &(q + e)).feature;
            let fm = interpolate(&lvl, &(q - e)).feature;
            for c in 0..6 {
                let fd = (fp[c] - fm[c]) / (2.0 * h);
                let a = out.grad[(c, k)];
                prop_assert!((a - fd).abs() <= 1e-6 && (a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()) + 1e-9,
                    "channel {c} axis {k}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn bilinear_weights_are_a_partition_of_unity(seed in 0u64..1000, x in 2.0..37.0f64, y in 2.0..27.0f64) {
        // a constant field is reproduced everywhere iff the weights sum to one
        let lvl = FeatureLevel::new(10, 8, 1, 4.0, vec![2.5; 80], vec![0.0; 80]).unwrap();
        let out = interpolate(&lvl, &Vector2::new(x, y));
        prop_assert!(out.valid);
        prop_assert!((out.feature[0] - 2.5).abs() < 1e-12);
        // and nonnegative weights keep values inside the cell range
        let rnd = random_level(10, 8, 1, 4.0, seed);
        let v = interpolate(&rnd, &Vector2::new(x, y));
        let lo = rnd.features().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = rnd.features().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v.feature[0] >= lo - 1e-12 && v.feature[0] <= hi + 1e-12);
    }

    #[test]
    fn composite_weight_is_in_unit_interval(
        uq in prop_oneof![Just(0.0), 1e-12..1e6f64],
        ur in prop_oneof![Just(0.0), 1e-12..1e6f64],
    ) {
        let w = confidence_from_uncertainty(uq) * confidence_from_uncertainty(ur);
        prop_assert!((0.0..=1.0).contains(&w));
        prop_assert_eq!(w == 1.0, uq == 0.0 && ur == 0.0);
    }
}
