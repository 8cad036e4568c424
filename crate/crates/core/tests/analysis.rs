use featalign::analysis::*;
use featalign::features::{FeatureLevel, FeaturePyramid, BORDER_MARGIN};
use featalign::geometry::{project, transform, Camera, Pose, Rotation};
use featalign::initpose::perturb;
use featalign::{DampingParams, Scene, SceneSpec};
use nalgebra::{Vector2, Vector3};

fn level_from(w: usize, h: usize, dim: usize, f: impl Fn(f64, f64) -> Vec<f64>) -> FeatureLevel {
    let mut v = Vec::with_capacity(w * h * dim);
    for y in 0..h {
        for x in 0..w {
            v.extend(f(x as f64, y as f64));
        }
    }
    FeatureLevel::from_features(w, h, dim, 1.0, v).unwrap()
}

fn interior(w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let m = BORDER_MARGIN as usize;
    (m..h - m - 1).flat_map(move |y| (m..w - m - 1).map(move |x| (x, y)))
}

#[test]
fn initial_error_examples() {
    let cam = Camera::new(100.0, 100.0, 50.0, 50.0, 101, 101).unwrap();
    let pts: Vec<_> = (0..10).map(|i| Vector3::new(0.1 * i as f64 - 0.5, 0.05 * i as f64, 4.0)).collect();
    let gt = Pose::identity();
    assert_eq!(initial_reproj_error(&gt, &gt, &pts, &cam).unwrap(), 0.0);
    // all points at depth 4: a 0.2 x-translation moves every image by 5 px
    let shifted = Pose::new(Rotation::identity(), Vector3::new(0.2, 0.0, 0.0));
    assert!((initial_reproj_error(&shifted, &gt, &pts, &cam).unwrap() - 5.0).abs() < 1e-12);

    let p0 = perturb(&gt, 0.05, 0.1, 3);
    let brute: f64 = pts
        .iter()
        .map(|p| (project(&cam, &transform(&p0, p)).unwrap() - project(&cam, &transform(&gt, p)).unwrap()).norm())
        .sum::<f64>()
        / pts.len() as f64;
    assert!((initial_reproj_error(&p0, &gt, &pts, &cam).unwrap() - brute).abs() < 1e-12);

    let behind = [Vector3::new(0.0, 0.0, -1.0)];
    assert_eq!(initial_reproj_error(&gt, &gt, &behind, &cam), Err(AnalysisError::NoVisiblePoints));
}

fn small_scene() -> Scene {
    Scene::generate(&SceneSpec {
        n_points: 80,
        ..SceneSpec::standard(0)
    })
    .unwrap()
}

#[test]
fn zero_perturbation_always_succeeds() {
    let scene = small_scene();
    let sp = scene.scene_points().unwrap();
    let prob = SweepProblem {
        scene: &sp,
        query: &scene.query,
        camera: &scene.camera,
        gt: &scene.gt_pose,
        diameter: scene.diameter,
    };
    let cfg = SweepConfig {
        n_trials: 8,
        max_rotation_deg: 0.0,
        max_translation: 0.0,
        ..SweepConfig::default()
    };
    let res = convergence_sweep(&prob, &scene.solver_config(), &DampingParams::from_lambda(3, 1e-2), &cfg).unwrap();
    assert_eq!(res.bins[0].trials, 8);
    assert_eq!(res.bins[0].rate(), Some(1.0));
    assert!(res.bins[1..].iter().all(|b| b.trials == 0 && b.rate().is_none()));
}

#[test]
fn sweep_is_reproducible_across_thread_counts() {
    let scene = small_scene();
    let sp = scene.scene_points().unwrap();
    let prob = SweepProblem {
        scene: &sp,
        query: &scene.query,
        camera: &scene.camera,
        gt: &scene.gt_pose,
        diameter: scene.diameter,
    };
    let cfg = SweepConfig {
        n_trials: 12,
        seed: 77,
        ..SweepConfig::default()
    };
    let solver = scene.solver_config();
    let damping = DampingParams::from_lambda(3, 1e-2);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| convergence_sweep(&prob, &solver, &damping, &cfg).unwrap())
    };
    let a = run(1);
    assert_eq!(a, run(3));
    assert_eq!(a.trials.len(), 12);
    assert_eq!(a.bins.iter().map(|b| b.trials).sum::<usize>(), 12);
}

#[test]
fn sweep_config_validation() {
    let bad = SweepConfig {
        bin_edges: vec![0.0, 10.0, 10.0],
        ..SweepConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(SweepConfig { n_trials: 0, ..SweepConfig::default() }.validate().is_err());
}

#[test]
fn inversions_are_counted() {
    let bin = |t, s| SweepBin { lo: 0.0, hi: 1.0, trials: t, successes: s };
    let bins = [bin(10, 10), bin(10, 8), bin(0, 0), bin(10, 9), bin(10, 2)];
    let (n, m) = rate_inversions(&bins);
    assert_eq!(n, 1);
    assert!((m - 0.1).abs() < 1e-12);
}

#[test]
fn radial_field_basin_covers_the_image() {
    let (w, h) = (48, 40);
    let lvl = level_from(w, h, 2, |x, y| vec![0.05 * x, 0.05 * y]);
    let pyr = FeaturePyramid::new(vec![lvl]).unwrap();
    let seed = Vector2::new(20.0, 17.0);
    let d = descriptors_at(&pyr, seed).unwrap();
    let b = basin(&pyr, &d, seed).unwrap();
    assert_eq!(b.at(None, 20, 17), 1.0);
    for (x, y) in interior(w, h) {
        assert!(b.at(None, x, y) > 0.9, "({x}, {y}): {}", b.at(None, x, y));
    }
    assert!(b.combined.iter().all(|s| (0.0..=1.0).contains(s)));
}

#[test]
fn bimodal_field_separates_basins() {
    // period-32 pattern along x: minima at the seed and 32 px to its right
    let (w, h) = (64, 24);
    let k = std::f64::consts::TAU / 32.0;
    let lvl = level_from(w, h, 3, |x, y| vec![(k * x).cos(), (k * x).sin(), 0.02 * y]);
    let pyr = FeaturePyramid::new(vec![lvl]).unwrap();
    let seed = Vector2::new(16.0, 12.0);
    let d = descriptors_at(&pyr, seed).unwrap();
    let b = basin(&pyr, &d, seed).unwrap();
    let mut near_far = 0;
    for (x, y) in interior(w, h) {
        let (dx_seed, dx_far) = ((x as f64 - 16.0).abs(), (x as f64 - 48.0).abs());
        if dx_far + 2.0 < dx_seed {
            assert!(b.at(None, x, y) < 0.1, "({x}, {y}): {}", b.at(None, x, y));
            near_far += 1;
        }
        if dx_seed + 2.0 < dx_far && (x as f64 - 16.0).abs() < 10.0 {
            assert!(b.at(None, x, y) > 0.5, "({x}, {y}): {}", b.at(None, x, y));
        }
    }
    assert!(near_far > 100);
}

#[test]
fn multi_level_scores_only_grow_toward_coarse() {
    let scene = small_scene();
    let q = &scene.query[1];
    let seed = Vector2::new(160.0, 128.0);
    let d = descriptors_at(q, seed).unwrap();
    let a = basin(q, &d, seed).unwrap();
    let b = basin(q, &d, seed).unwrap();
    assert_eq!(a, b);
    let (fine, coarse) = (&a.levels[q.len() - 1], &a.levels[0]);
    assert!(fine.iter().zip(coarse).all(|(f, c)| c >= f));
    assert_eq!(&a.combined, coarse);
    assert_eq!(a.at(None, 160, 128), 1.0);
}

#[test]
fn basin_rejects_bad_seeds() {
    let lvl = level_from(20, 20, 1, |x, _| vec![x]);
    let pyr = FeaturePyramid::new(vec![lvl]).unwrap();
    assert!(matches!(basin(&pyr, &[vec![1.0]], Vector2::new(0.0, 5.0)), Err(AnalysisError::SeedOutOfBounds(..))));
    assert!(matches!(basin(&pyr, &[vec![1.0, 2.0]], Vector2::new(5.0, 5.0)), Err(AnalysisError::InvalidInput(_))));
    assert!(descriptors_at(&pyr, Vector2::new(19.0, 5.0)).is_err());
}
