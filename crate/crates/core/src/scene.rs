//! Synthetic scenes with analytic, world-anchored feature fields.
//!
//! The world is the inside of an axis-aligned box (a corridor seen from one
//! end). Each pyramid level at each image scale has its own smooth field
//! defined on 3D world positions; a view is rendered by casting the ray of
//! every cell center to the box wall and evaluating the field there, so
//! query and reference renderings agree at corresponding projections up to
//! bilinear sampling error.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureLevel, FeaturePyramid, ReferenceView};
use crate::geometry::{project, so3_exp, transform, Camera, Point3, Pose, Rotation};
use crate::solver::{ScenePoints, SolverConfig};

/// Upper bound on sinusoids per channel.
pub const MAX_SINUSOIDS: usize = 32;

/// Upper bound on field bandwidth, cycles per cell.
pub const MAX_BANDWIDTH: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("infeasible scene spec: {0}")]
    InfeasibleSpec(String),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldType {
    /// Features affine in world position; the cost has a single minimum.
    QuadraticBasin,
    /// Band-limited sums of sinusoids per channel.
    RandomSmooth,
    /// Two identical blobs on the far wall, giving two minima.
    Bimodal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyPattern {
    Zero,
    Random,
    OccluderPatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidSpec {
    /// Coarse to fine, strictly decreasing.
    pub strides: Vec<f64>,
    pub dims: Vec<usize>,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        Self {
            strides: vec![16.0, 4.0, 1.0],
            dims: vec![8, 8, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub n_points: usize,
    /// Depth of the box in scene units; other dimensions scale with it.
    pub extent: f64,
    pub field: FieldType,
    pub uncertainty: UncertaintyPattern,
    pub pyramid: PyramidSpec,
    pub camera: Camera,
    pub image_scales: Vec<f64>,
    pub n_references: usize,
    /// Highest field frequency in cycles per cell of each level.
    pub bandwidth: f64,
    pub sinusoids: usize,
    /// Amplitude of an independent smooth field added to the query only,
    /// relative to the scene field; models appearance change.
    pub query_noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_points: 200,
            extent: 10.0,
            field: FieldType::RandomSmooth,
            uncertainty: UncertaintyPattern::Zero,
            pyramid: PyramidSpec::default(),
            camera: Camera {
                fx: 250.0,
                fy: 250.0,
                cx: 159.5,
                cy: 127.5,
                width: 320,
                height: 256,
            },
            image_scales: vec![0.25, 1.0],
            n_references: 3,
            bandwidth: 0.08,
            sinusoids: 8,
            query_noise: 0.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// The standard scene used by the benchmarks.
    pub fn standard(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidSpec(m));
        if self.n_points < 6 {
            return bad(format!("n_points = {} < 6", self.n_points));
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return bad(format!("extent = {}", self.extent));
        }
        let p = &self.pyramid;
        if p.strides.is_empty() || p.strides.len() != p.dims.len() {
            return bad("pyramid strides and dims must be nonempty and of equal length".into());
        }
        if p.strides.windows(2).any(|w| w[1] >= w[0]) || p.strides.iter().any(|s| !(*s > 0.0)) {
            return bad("pyramid strides must be positive and strictly decreasing".into());
        }
        if p.dims.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.field == FieldType::QuadraticBasin && p.dims.iter().any(|d| *d < 4) {
            return bad("quadratic-basin fields need at least 4 channels".into());
        }
        if self.camera.validate().is_err() {
            return bad("invalid camera".into());
        }
        if self.image_scales.is_empty()
            || self.image_scales.iter().any(|s| !(*s > 0.0 && *s <= 1.0))
            || self.image_scales.windows(2).any(|w| w[1] <= w[0])
        {
            return bad("image scales must be increasing in (0, 1]".into());
        }
        if self.n_references == 0 {
            return bad("need at least one reference view".into());
        }
        if !(self.bandwidth > 0.0 && self.bandwidth <= MAX_BANDWIDTH) {
            return bad(format!("bandwidth {} outside (0, {MAX_BANDWIDTH}]", self.bandwidth));
        }
        if !(self.query_noise >= 0.0 && self.query_noise.is_finite()) {
            return bad(format!("query_noise = {}", self.query_noise));
        }
        if self.sinusoids == 0 || self.sinusoids > MAX_SINUSOIDS {
            return bad(format!("sinusoids per channel must be in 1..={MAX_SINUSOIDS}"));
        }
        Ok(())
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            image_pyramid_scales: self.image_scales.clone(),
            ..SolverConfig::default()
        }
    }
}

/// splitmix64, used to derive independent streams from one seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Wave {
    k: Vector3<f64>,
    phase: f64,
    amp: f64,
}

/// Feature field of one stage (image scale × pyramid level).
#[derive(Debug, Clone, PartialEq)]
enum StageField {
    Waves(Vec<Vec<Wave>>),
    Affine { a: Vec<Vector3<f64>>, b: Vec<f64> },
    Blobs { centers: [Vector3<f64>; 2], sigma: f64, dim: usize },
}

impl StageField {
    fn eval(&self, p: &Vector3<f64>, out: &mut [f64]) {
        match self {
            StageField::Waves(ch) => {
                for (o, waves) in out.iter_mut().zip(ch) {
                    *o = waves.iter().map(|w| w.amp * (w.k.dot(p) + w.phase).sin()).sum();
                }
            }
            StageField::Affine { a, b } => {
                for ((o, ac), bc) in out.iter_mut().zip(a).zip(b) {
                    *o = ac.dot(p) + bc;
                }
            }
            StageField::Blobs { centers, sigma, dim } => {
                let s2 = 2.0 * sigma * sigma;
                let g: f64 = centers.iter().map(|c| (-(p - c).norm_squared() / s2).exp()).sum();
                out[..*dim].iter_mut().for_each(|x| *x = 0.0);
                out[0] = g;
                out[1] = 0.25;
            }
        }
    }
}

/// Smooth non-negative scalar field used for random uncertainty maps.
#[derive(Debug, Clone, PartialEq)]
struct ScalarField(Vec<Wave>);

impl ScalarField {
    fn eval(&self, p: &Vector3<f64>) -> f64 {
        let s: f64 = self.0.iter().map(|w| w.amp * (w.k.dot(p) + w.phase).sin()).sum();
        (1.0 + s).max(0.0)
    }
}

/// Box interior, `lo < hi` componentwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Room {
    pub lo: Vector3<f64>,
    pub hi: Vector3<f64>,
}

impl Room {
    fn for_extent(e: f64) -> Self {
        Self {
            lo: Vector3::new(-0.35 * e, -0.25 * e, -0.2 * e),
            hi: Vector3::new(0.35 * e, 0.25 * e, 1.0 * e),
        }
    }

    /// Exit point of a ray starting inside the box.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Vector3<f64> {
        let mut t = f64::INFINITY;
        for a in 0..3 {
            if dir[a] > 0.0 {
                t = t.min((self.hi[a] - origin[a]) / dir[a]);
            } else if dir[a] < 0.0 {
                t = t.min((self.lo[a] - origin[a]) / dir[a]);
            }
        }
        origin + dir * t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceImage {
    pub pose: Pose,
    /// One pyramid per image scale.
    pub pyramids: Vec<FeaturePyramid>,
}

/// Occluder placed in a rendered view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= self.x0 && p.x < self.x1 && p.y >= self.y0 && p.y < self.y1
    }

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn scaled(&self, s: f64) -> Rect {
        Rect {
            x0: self.x0 * s,
            y0: self.y0 * s,
            x1: self.x1 * s,
            y1: self.y1 * s,
        }
    }
}

/// What an occluder shows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OccluderContent {
    /// Independent random unit vectors per cell.
    Noise,
    /// The view's own content displaced by a seeded offset, a repeated
    /// pattern that is locally consistent with a wrong pose.
    ShiftedCopy,
}

/// Overwrites features inside `rect` (full-resolution pixels of the
/// pyramid's image) and sets their uncertainty to `uncertainty_value`.
pub fn render_occluder(
    pyramid: &FeaturePyramid,
    rect: &Rect,
    uncertainty_value: f64,
    content: OccluderContent,
    seed: u64,
) -> FeaturePyramid {
    let mut out = pyramid.clone();
    if rect.is_empty() {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x0cc1));
    let ang = rng.random_range(0.0..std::f64::consts::TAU);
    let mag = rng.random_range(0.5..1.0) * 0.25 * (rect.x1 - rect.x0).min(rect.y1 - rect.y0);
    let offset = Vector2::new(mag * ang.cos(), mag * ang.sin());
    for (src, lvl) in pyramid.levels().iter().zip(out.levels_mut()) {
        let dim = lvl.dim();
        for j in 0..lvl.height() {
            for i in 0..lvl.width() {
                let c = lvl.cell_center(i, j);
                if !rect.contains(&c) {
                    continue;
                }
                match content {
                    OccluderContent::Noise => {
                        let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                        v.iter_mut().for_each(|x| *x /= n);
                        lvl.cell_mut(i, j).copy_from_slice(&v);
                    }
                    OccluderContent::ShiftedCopy => {
                        let q = c + offset;
                        let s = src.stride();
                        let si = (((q.x + 0.5) / s - 0.5).round().max(0.0) as usize).min(src.width() - 1);
                        let sj = (((q.y + 0.5) / s - 0.5).round().max(0.0) as usize).min(src.height() - 1);
                        let v = src.cell(si, sj).to_vec();
                        lvl.cell_mut(i, j).copy_from_slice(&v);
                    }
                }
                lvl.set_cell_uncertainty(i, j, uncertainty_value);
            }
        }
    }
    out
}

/// A generated scene: ground truth, references and the rendered query.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub camera: Camera,
    pub gt_pose: Pose,
    pub points: Vec<Point3>,
    pub references: Vec<ReferenceImage>,
    /// Query pyramids, one per image scale.
    pub query: Vec<FeaturePyramid>,
    /// Bounding-box diagonal of the points.
    pub diameter: f64,
    room: Room,
    fields: Vec<Vec<StageField>>,
    noise_fields: Option<Vec<Vec<StageField>>>,
    uncertainty_field: Option<ScalarField>,
}

/// Pose of a camera at `center` with camera-to-world rotation `r_wc`.
pub fn pose_from_center(r_wc: &Matrix3<f64>, center: &Vector3<f64>) -> Pose {
    let r = r_wc.transpose();
    Pose::new(Rotation::from_matrix_unchecked(r), -(r * center))
}

fn small_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Matrix3<f64> {
    let axis = unit_vector(rng);
    let ang = rng.random_range(0.0..=max_angle);
    *so3_exp(&(axis * ang)).matrix()
}

/// Default occluder rectangle: the central part of the image.
pub fn default_occluder_rect(cam: &Camera) -> Rect {
    let (w, h) = (cam.width as f64, cam.height as f64);
    Rect {
        x0: 0.2 * w,
        y0: 0.2 * h,
        x1: 0.8 * w,
        y1: 0.8 * h,
    }
}

impl Scene {
    pub fn generate(spec: &SceneSpec) -> Result<Scene, SceneError> {
        spec.validate()?;
        let e = spec.extent;
        let room = Room::for_extent(e);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1));

        let center = Vector3::new(
            rng.random_range(-0.03..0.03) * e,
            rng.random_range(-0.03..0.03) * e,
            rng.random_range(-0.03..0.03) * e,
        );
        let r_wc = small_rotation(&mut rng, 5f64.to_radians());
        let gt_pose = pose_from_center(&r_wc, &center);

        let ref_poses: Vec<Pose> = (0..spec.n_references)
            .map(|_| {
                let off = unit_vector(&mut rng) * rng.random_range(0.0..0.04) * e;
                let r = small_rotation(&mut rng, 4f64.to_radians()) * r_wc;
                pose_from_center(&r, &(center + off))
            })
            .collect();

        let fields = Self::make_fields(spec, &room, &mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2)));
        let noise_fields = (spec.query_noise > 0.0).then(|| {
            let noise_spec = SceneSpec {
                field: FieldType::RandomSmooth,
                ..spec.clone()
            };
            Self::make_fields(&noise_spec, &room, &mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 5)))
        });
        let uncertainty_field = (spec.uncertainty == UncertaintyPattern::Random).then(|| {
            let mut r = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 3));
            let kmax = 2.0 * std::f64::consts::PI * 2.0 / e;
            ScalarField(
                (0..4)
                    .map(|_| Wave {
                        k: unit_vector(&mut r) * r.random_range(0.3..1.0) * kmax,
                        phase: r.random_range(0.0..std::f64::consts::TAU),
                        amp: 0.5,
                    })
                    .collect(),
            )
        });

        let mut scene = Scene {
            spec: spec.clone(),
            camera: spec.camera,
            gt_pose,
            points: Vec::new(),
            references: Vec::new(),
            query: Vec::new(),
            diameter: 0.0,
            room,
            fields,
            noise_fields,
            uncertainty_field,
        };
        scene.points = scene.sample_points(&ref_poses, &mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 4)))?;
        let (lo, hi) = scene.points.iter().fold(
            (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), p| (lo.inf(p), hi.sup(p)),
        );
        scene.diameter = (hi - lo).norm();
        scene.references = ref_poses
            .iter()
            .map(|p| ReferenceImage {
                pose: *p,
                pyramids: scene.render(p),
            })
            .collect();
        scene.query = scene.render_query(&gt_pose);
        if spec.uncertainty == UncertaintyPattern::OccluderPatch {
            let rect = default_occluder_rect(&scene.camera);
            scene.query = scene
                .query
                .iter()
                .zip(&spec.image_scales)
                .map(|(q, s)| render_occluder(q, &rect.scaled(*s), 1e3, OccluderContent::ShiftedCopy, spec.seed))
                .collect();
        }
        Ok(scene)
    }

    fn make_fields(spec: &SceneSpec, room: &Room, rng: &mut ChaCha8Rng) -> Vec<Vec<StageField>> {
        let e = spec.extent;
        // the far wall sets the finest image-space frequency
        let z_ref = 1.5 * room.hi.z;
        let tau = std::f64::consts::TAU;
        spec.image_scales
            .iter()
            .map(|scale| {
                spec.pyramid
                    .strides
                    .iter()
                    .zip(&spec.pyramid.dims)
                    .map(|(stride, &dim)| match spec.field {
                        FieldType::RandomSmooth => {
                            let f = spec.camera.fx * scale;
                            let kmax = tau * spec.bandwidth * f / (stride * z_ref);
                            StageField::Waves(
                                (0..dim)
                                    .map(|_| {
                                        (0..spec.sinusoids)
                                            .map(|_| {
                                                let mag = rng.random_range(0.25..1.0) * kmax;
                                                Wave {
                                                    k: unit_vector(rng) * mag,
                                                    phase: rng.random_range(0.0..tau),
                                                    amp: kmax / mag,
                                                }
                                            })
                                            .collect()
                                    })
                                    .collect(),
                            )
                        }
                        FieldType::QuadraticBasin => {
                            // b stays away from the span of the rows so the
                            // normalized field is injective
                            let a: Vec<Vector3<f64>> = (0..dim)
                                .map(|c| {
                                    if c < 3 {
                                        Vector3::ith(c, 1.0 / e) + unit_vector(rng) * (0.2 / e)
                                    } else {
                                        unit_vector(rng) * (0.1 / e)
                                    }
                                })
                                .collect();
                            let b: Vec<f64> = (0..dim).map(|c| if c == 3 { 2.0 } else { rng.random_range(-0.1..0.1) }).collect();
                            StageField::Affine { a, b }
                        }
                        FieldType::Bimodal => StageField::Blobs {
                            centers: [
                                Vector3::new(-0.12 * e, 0.0, room.hi.z),
                                Vector3::new(0.12 * e, 0.0, room.hi.z),
                            ],
                            sigma: 0.05 * e,
                            dim,
                        },
                    })
                    .collect()
            })
            .collect()
    }

    fn sample_points(&self, refs: &[Pose], rng: &mut ChaCha8Rng) -> Result<Vec<Point3>, SceneError> {
        let cam = &self.camera;
        let (mx, my) = (0.08 * cam.width as f64, 0.08 * cam.height as f64);
        let mut pts = Vec::with_capacity(self.spec.n_points);
        let max_tries = 100 * self.spec.n_points;
        let cams: Vec<Camera> = self.spec.image_scales.iter().map(|s| cam.scaled(*s)).collect();
        for _ in 0..max_tries {
            if pts.len() == self.spec.n_points {
                break;
            }
            let px = Vector2::new(
                rng.random_range(mx..cam.width as f64 - 1.0 - mx),
                rng.random_range(my..cam.height as f64 - 1.0 - my),
            );
            let p = self.cast_pixel(&self.gt_pose, cam, &px);
            let seen = refs.iter().any(|r| {
                cams.iter().all(|c| {
                    project(c, &transform(r, &p))
                        .map(|q| c.contains(&q, crate::features::BORDER_MARGIN + 1.0))
                        .unwrap_or(false)
                })
            });
            if seen {
                pts.push(p);
            }
        }
        if pts.len() < self.spec.n_points {
            return Err(SceneError::InfeasibleSpec(format!(
                "only {} of {} points are visible from the references",
                pts.len(),
                self.spec.n_points
            )));
        }
        Ok(pts)
    }

    fn cast_pixel(&self, pose: &Pose, cam: &Camera, px: &Vector2<f64>) -> Point3 {
        let rt = pose.rotation.matrix().transpose();
        let origin = pose.center();
        let dir = rt * cam.unproject(px);
        self.room.cast(&origin, &dir)
    }

    /// Field value (before normalization) of stage `(scale, level)` at a
    /// world point.
    pub fn field_at(&self, scale: usize, level: usize, p: &Point3) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.pyramid.dims[level]];
        self.fields[scale][level].eval(p, &mut out);
        out
    }

    /// Renders normalized feature pyramids of a view at every image scale.
    pub fn render(&self, pose: &Pose) -> Vec<FeaturePyramid> {
        self.render_view(pose, false)
    }

    /// Like [`Scene::render`], with the query's appearance noise.
    pub fn render_query(&self, pose: &Pose) -> Vec<FeaturePyramid> {
        self.render_view(pose, true)
    }

    fn render_view(&self, pose: &Pose, noisy: bool) -> Vec<FeaturePyramid> {
        self.spec
            .image_scales
            .iter()
            .enumerate()
            .map(|(si, &scale)| {
                let cam = self.camera.scaled(scale);
                let levels = self
                    .spec
                    .pyramid
                    .strides
                    .iter()
                    .zip(&self.spec.pyramid.dims)
                    .enumerate()
                    .map(|(l, (&stride, &dim))| {
                        let noise = self.noise_fields.as_ref().filter(|_| noisy).map(|n| &n[si][l]);
                        self.render_level(pose, &cam, stride, dim, &self.fields[si][l], noise)
                    })
                    .collect();
                FeaturePyramid::new(levels).expect("validated strides")
            })
            .collect()
    }

    fn render_level(
        &self,
        pose: &Pose,
        cam: &Camera,
        stride: f64,
        dim: usize,
        field: &StageField,
        noise: Option<&StageField>,
    ) -> FeatureLevel {
        let w = ((cam.width as f64 / stride).floor() as usize).max(1);
        let h = ((cam.height as f64 / stride).floor() as usize).max(1);
        let mut feats = vec![0.0; w * h * dim];
        let mut unc = vec![0.0; w * h];
        let rt = pose.rotation.matrix().transpose();
        let origin = pose.center();
        let mut extra = vec![0.0; dim];
        for j in 0..h {
            for i in 0..w {
                let px = Vector2::new((i as f64 + 0.5) * stride - 0.5, (j as f64 + 0.5) * stride - 0.5);
                let p = self.room.cast(&origin, &(rt * cam.unproject(&px)));
                let o = (j * w + i) * dim;
                field.eval(&p, &mut feats[o..o + dim]);
                if let Some(n) = noise {
                    n.eval(&p, &mut extra);
                    feats[o..o + dim]
                        .iter_mut()
                        .zip(&extra)
                        .for_each(|(f, e)| *f += self.spec.query_noise * e);
                }
                if let Some(u) = &self.uncertainty_field {
                    unc[j * w + i] = u.eval(&p);
                }
            }
        }
        let mut lvl = FeatureLevel::new(w, h, dim, stride, feats, unc).expect("consistent sizes");
        lvl.normalize();
        lvl
    }

    /// Aggregated scene model from the reference views.
    pub fn scene_points(&self) -> Result<ScenePoints, SceneError> {
        let per_scale: Vec<Vec<ReferenceView<'_>>> = (0..self.spec.image_scales.len())
            .map(|s| {
                let cam = self.camera.scaled(self.spec.image_scales[s]);
                self.references
                    .iter()
                    .map(|r| ReferenceView {
                        pyramid: &r.pyramids[s],
                        pose: r.pose,
                        camera: cam,
                    })
                    .collect()
            })
            .collect();
        ScenePoints::from_references(self.points.clone(), &per_scale, self.references.len())
            .map(|(sp, _)| sp)
            .map_err(|e| SceneError::InfeasibleSpec(e.to_string()))
    }

    /// Scene model whose descriptors are the query's own lookups at the
    /// ground-truth projections, so residuals vanish exactly at the truth.
    pub fn exact_scene_points(&self) -> Result<ScenePoints, SceneError> {
        let per_scale: Vec<Vec<ReferenceView<'_>>> = (0..self.spec.image_scales.len())
            .map(|s| {
                vec![ReferenceView {
                    pyramid: &self.query[s],
                    pose: self.gt_pose,
                    camera: self.camera.scaled(self.spec.image_scales[s]),
                }]
            })
            .collect();
        ScenePoints::from_references(self.points.clone(), &per_scale, 1)
            .map(|(sp, _)| sp)
            .map_err(|e| SceneError::InfeasibleSpec(e.to_string()))
    }

    pub fn solver_config(&self) -> SolverConfig {
        self.spec.solver_config()
    }
}
