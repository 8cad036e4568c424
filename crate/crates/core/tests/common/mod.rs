#![allow(dead_code)]

use featalign::features::{FeatureLevel, FeaturePyramid, LevelDescriptors, PointFeatures};
use featalign::geometry::{hat, project, transform, Camera, Point3, Pose};
use featalign::solver::{cauchy, ScenePoints};
use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3x6, Matrix6, Vector2, Vector3, Vector6};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const W: usize = 160;
pub const H: usize = 120;

pub fn camera() -> Camera {
    Camera::new(120.0, 120.0, 79.5, 59.5, W as u32, H as u32).unwrap()
}

/// A stride-1 level whose channels are affine in the pixel position.
pub struct LinearField {
    /// `dim × 2` spatial gradient.
    pub grad: Vec<[f64; 2]>,
    pub offset: Vec<f64>,
}

impl LinearField {
    pub fn standard() -> Self {
        Self {
            grad: vec![[0.010, 0.003], [-0.004, 0.009], [0.006, -0.007]],
            offset: vec![0.5, -0.2, 0.1],
        }
    }

    pub fn eval(&self, p: &Vector2<f64>) -> Vec<f64> {
        self.grad
            .iter()
            .zip(&self.offset)
            .map(|(g, o)| g[0] * p.x + g[1] * p.y + o)
            .collect()
    }

    pub fn level(&self, uncertainty: f64) -> FeatureLevel {
        let d = self.offset.len();
        let mut f = Vec::with_capacity(W * H * d);
        for j in 0..H {
            for i in 0..W {
                f.extend(self.eval(&Vector2::new(i as f64, j as f64)));
            }
        }
        FeatureLevel::new(W, H, d, 1.0, f, vec![uncertainty; W * H]).unwrap()
    }

    pub fn gradient_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.grad.len(), 2, |r, c| self.grad[r][c])
    }
}

/// Points in front of the identity camera, projecting well inside the image.
pub fn interior_points(n: usize, seed: u64) -> Vec<Point3> {
    let cam = camera();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let px = Vector2::new(rng.random_range(30.0..130.0), rng.random_range(25.0..95.0));
            let z = rng.random_range(3.0..6.0);
            cam.unproject(&px) * z
        })
        .collect()
}

/// Scene whose descriptors are the field values at the projections under
/// `gt`, with the given per-point confidence.
pub fn linear_scene(field: &LinearField, points: &[Point3], gt: &Pose, conf: f64) -> ScenePoints {
    let cam = camera();
    let mut d = LevelDescriptors::empty(points.len(), field.offset.len());
    for (i, p) in points.iter().enumerate() {
        let px = project(&cam, &transform(gt, p)).unwrap();
        d.set(i, &field.eval(&px), conf);
    }
    ScenePoints::new(points.to_vec(), vec![PointFeatures { levels: vec![d] }]).unwrap()
}

pub fn single_level(level: FeatureLevel) -> FeaturePyramid {
    FeaturePyramid::new(vec![level]).unwrap()
}

/// Dense least-squares oracle for one Gauss–Newton step on the linear field:
/// stacks every point's `D×6` Jacobian from an independent chain rule,
/// weights rows by `sqrt(w·ρ')` and solves with an SVD. Returns the step and
/// the dense `JᵀWJ`.
pub fn dense_gn_step(field: &LinearField, points: &[Point3], descriptors: &[Vec<f64>], conf: f64, pose: &Pose, c: f64) -> (Vector6<f64>, Matrix6<f64>) {
    let cam = camera();
    let d = field.offset.len();
    let g = field.gradient_matrix();
    let n = points.len();
    let mut a = DMatrix::zeros(n * d, 6);
    let mut b = DVector::zeros(n * d);
    for (i, p) in points.iter().enumerate() {
        let r = pose.rotation.matrix();
        let pc = r * p + pose.translation;
        let (x, y, z) = (pc.x, pc.y, pc.z);
        let jp = Matrix2x3::new(cam.fx / z, 0.0, -cam.fx * x / (z * z), 0.0, cam.fy / z, -cam.fy * y / (z * z));
        let mut jt = Matrix3x6::zeros();
        jt.fixed_view_mut::<3, 3>(0, 0).copy_from(&nalgebra::Matrix3::identity());
        jt.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(&pc)));
        let px = Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy);
        let f = field.eval(&px);
        let res: Vec<f64> = f.iter().zip(&descriptors[i]).map(|(a, b)| a - b).collect();
        let sq: f64 = res.iter().map(|v| v * v).sum();
        let (_, rp) = cauchy(sq, c);
        let s = (conf * rp).sqrt();
        let ji = &g * DMatrix::from_fn(2, 6, |rr, cc| (jp * jt)[(rr, cc)]);
        for k in 0..d {
            for col in 0..6 {
                a[(i * d + k, col)] = s * ji[(k, col)];
            }
            b[i * d + k] = s * res[k];
        }
    }
    let svd = a.clone().svd(true, true);
    let delta = -svd.solve(&b, 1e-14).unwrap();
    let ata = a.transpose() * &a;
    (Vector6::from_iterator(delta.iter().copied()), Matrix6::from_iterator(ata.iter().copied()))
}

/// A fronto-parallel plane at depth `z`, sampled on a pixel grid.
pub fn plane_points(z: f64, step: usize, margin: usize) -> Vec<Point3> {
    let cam = camera();
    let mut pts = Vec::new();
    for j in (margin..H - margin).step_by(step) {
        for i in (margin..W - margin).step_by(step) {
            pts.push(cam.unproject(&Vector2::new(i as f64, j as f64)) * z);
        }
    }
    pts
}

/// Unit-norm periodic pattern with the given period in pixels.
pub fn periodic(p: &Vector2<f64>, period: f64) -> Vec<f64> {
    let k = std::f64::consts::TAU / period;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    vec![s * (k * p.x).cos(), s * (k * p.x).sin(), s * (k * p.y).cos(), s * (k * p.y).sin()]
}

/// Two-level pyramid: a wide-period coarse level (stride 8) over a
/// short-period fine level (stride 1).
pub fn two_minimum_pyramid(coarse_period: f64, fine_period: f64) -> FeaturePyramid {
    let level = |stride: f64, period: f64| {
        let (w, h) = (W / stride as usize, H / stride as usize);
        let mut f = Vec::with_capacity(w * h * 4);
        for j in 0..h {
            for i in 0..w {
                let px = Vector2::new((i as f64 + 0.5) * stride - 0.5, (j as f64 + 0.5) * stride - 0.5);
                f.extend(periodic(&px, period));
            }
        }
        FeatureLevel::from_features(w, h, 4, stride, f).unwrap()
    };
    FeaturePyramid::new(vec![level(8.0, coarse_period), level(1.0, fine_period)]).unwrap()
}

/// Descriptors of `points` at both levels of `pyr` under `gt`, looked up
/// in the pyramid itself so residuals vanish at the truth.
pub fn exact_descriptors(pyr: &FeaturePyramid, points: &[Point3], gt: &Pose) -> ScenePoints {
    let cam = camera();
    let levels = pyr
        .levels()
        .iter()
        .map(|lvl| {
            let mut d = LevelDescriptors::empty(points.len(), lvl.dim());
            for (i, p) in points.iter().enumerate() {
                let px = project(&cam, &transform(gt, p)).unwrap();
                let out = featalign::features::interpolate(lvl, &px);
                if out.valid {
                    d.set(i, out.feature.as_slice(), 1.0);
                }
            }
            d
        })
        .collect();
    ScenePoints::new(points.to_vec(), vec![PointFeatures { levels }]).unwrap()
}

pub fn translation(x: f64, y: f64, z: f64) -> Pose {
    Pose::new(featalign::geometry::Rotation::identity(), Vector3::new(x, y, z))
}

/// Small-camera scene used by the damping-fitting experiments: one image
/// scale, strides 8/2/1, and appearance noise on the query.
pub fn learning_spec(seed: u64) -> featalign::SceneSpec {
    featalign::SceneSpec {
        n_points: 60,
        image_scales: vec![1.0],
        camera: Camera::new(125.0, 125.0, 79.5, 63.5, 160, 128).unwrap(),
        pyramid: featalign::scene::PyramidSpec {
            strides: vec![8.0, 2.0, 1.0],
            dims: vec![8, 8, 8],
        },
        query_noise: 0.3,
        seed,
        ..featalign::SceneSpec::default()
    }
}

pub fn train_config() -> featalign::learning::TrainConfig {
    featalign::learning::TrainConfig {
        solver: featalign::SolverConfig {
            image_pyramid_scales: vec![1.0],
            max_iters_per_level: 15,
            ..featalign::SolverConfig::default()
        },
        ..Default::default()
    }
}

/// Samples whose initial pose differs from the truth only by camera x/z
/// translation, uniform in ±`half_range`. Scene `s` of fleet `master` uses
/// seed `1000·master + s`.
pub fn planar_fleet(master: u64, n_scenes: u64, per_scene: u64, half_range: f64) -> Vec<featalign::learning::TrainSample> {
    let mut out = Vec::new();
    for s in 0..n_scenes {
        out.extend(planar_scene_samples(master, s, per_scene, half_range));
    }
    out
}

/// The samples of scene `s` in [`planar_fleet`].
pub fn planar_scene_samples(master: u64, s: u64, per_scene: u64, half_range: f64) -> Vec<featalign::learning::TrainSample> {
    let scene = featalign::Scene::generate(&learning_spec(master * 1000 + s)).unwrap();
    let sp = scene.scene_points().unwrap();
    (0..per_scene)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(master * 7919 + s * 100 + k);
            let v = Vector3::new(rng.random_range(-half_range..half_range), 0.0, rng.random_range(-half_range..half_range));
            let d = featalign::Tangent::from_parts(v, Vector3::zeros());
            featalign::learning::TrainSample {
                scene: sp.clone(),
                query: scene.query.clone(),
                camera: scene.camera,
                gt: scene.gt_pose,
                init: featalign::geometry::left_update(&scene.gt_pose, &d),
            }
        })
        .collect()
}
