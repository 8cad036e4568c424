//! Confidence-weighted robust Levenberg–Marquardt over SE(3).
//!
//! Each stage (one pyramid level at one image scale) repeatedly assembles
//! the normal equations of the feature-metric residuals, solves the damped
//! system with per-parameter damping and applies the update on the left of
//! the current pose. Stages run coarse to fine, each initialized from the
//! previous one. Damping is a fixed per-level parameter, so every step is
//! accepted.
//!
//! All routines on the optimization path are generic over [`Real`] so the
//! unrolled solver can be differentiated with dual numbers.

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{aggregate_all, confidence_from_uncertainty, FeatureLevel, FeaturePyramid, LevelDescriptors, PointFeatures, ReferenceView, BORDER_MARGIN};
use crate::geometry::{left_update, project_with_jacobian, Camera, Point3, Pose, Tangent};
use crate::real::Real;

/// Ridge added to the damped system before factorization.
pub const RIDGE: f64 = 1e-10;

pub const LAMBDA_MIN: f64 = -6.0;
pub const LAMBDA_MAX: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("no valid observations at this level")]
    NoValidObservations,
    #[error("damped system is not positive definite")]
    SingularSystem,
    #[error("every optimization stage was skipped")]
    InitializationFailed,
    #[error("invalid solver input: {0}")]
    InvalidInput(String),
}

/// Reference points with their aggregated descriptors, one [`PointFeatures`]
/// per image scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePoints {
    points: Vec<Point3>,
    features: Vec<PointFeatures>,
}

impl ScenePoints {
    pub fn new(points: Vec<Point3>, features: Vec<PointFeatures>) -> Result<Self, SolverError> {
        if points.is_empty() {
            return Err(SolverError::InvalidInput("scene has no points".into()));
        }
        if features.is_empty() {
            return Err(SolverError::InvalidInput("scene has no descriptors".into()));
        }
        if features.iter().any(|f| f.num_points() != points.len()) {
            return Err(SolverError::InvalidInput("descriptor count does not match point count".into()));
        }
        Ok(Self { points, features })
    }

    /// Aggregates descriptors from posed references, one reference list per
    /// image scale. Points unobserved at every scale and level are dropped;
    /// returns the kept indices.
    pub fn from_references(
        points: Vec<Point3>,
        refs_per_scale: &[Vec<ReferenceView<'_>>],
        top_k: usize,
    ) -> Result<(Self, Vec<usize>), SolverError> {
        let all: Vec<PointFeatures> = refs_per_scale
            .iter()
            .map(|refs| aggregate_all(&points, refs, top_k, BORDER_MARGIN))
            .collect();
        let keep: Vec<usize> = (0..points.len()).filter(|&i| all.iter().any(|f| f.observed(i))).collect();
        if keep.is_empty() {
            return Err(SolverError::NoValidObservations);
        }
        let pts = keep.iter().map(|&i| points[i]).collect();
        let feats = all.iter().map(|f| f.select(&keep)).collect();
        Ok((Self::new(pts, feats)?, keep))
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn features(&self, scale: usize) -> &PointFeatures {
        &self.features[scale]
    }

    pub fn num_scales(&self) -> usize {
        self.features.len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Learned damping: per level a 6-vector `θ_l` mapped through a sigmoid to
/// `log10 λ ∈ (lambda_min, lambda_max)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DampingParams {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub theta: Vec<[f64; 6]>,
}

impl DampingParams {
    pub fn zeros(levels: usize) -> Self {
        Self::uniform(levels, 0.0)
    }

    pub fn uniform(levels: usize, theta: f64) -> Self {
        Self {
            lambda_min: LAMBDA_MIN,
            lambda_max: LAMBDA_MAX,
            theta: vec![[theta; 6]; levels],
        }
    }

    /// Parameters giving the same `λ` for every axis and level.
    pub fn from_lambda(levels: usize, lambda: f64) -> Self {
        let s = (lambda.log10() - LAMBDA_MIN) / (LAMBDA_MAX - LAMBDA_MIN);
        Self::uniform(levels, (s / (1.0 - s)).ln())
    }

    pub fn validate(&self, levels: usize) -> Result<(), SolverError> {
        if self.lambda_min != LAMBDA_MIN || self.lambda_max != LAMBDA_MAX {
            return Err(SolverError::InvalidInput(format!(
                "damping bounds must be ({LAMBDA_MIN}, {LAMBDA_MAX})"
            )));
        }
        if self.theta.len() < levels {
            return Err(SolverError::InvalidInput(format!(
                "damping has {} levels, pyramid has {levels}",
                self.theta.len()
            )));
        }
        if self.theta.iter().flatten().any(|x| !x.is_finite()) {
            return Err(SolverError::InvalidInput("non-finite damping parameter".into()));
        }
        Ok(())
    }

    pub fn theta_vector(&self, level: usize) -> Vector6<f64> {
        Vector6::from_row_slice(&self.theta[level])
    }

    pub fn lambda(&self, level: usize) -> Vector6<f64> {
        damping(&self.theta_vector(level))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iters_per_level: usize,
    /// Cauchy scale `c`.
    pub cost_scale: f64,
    pub step_tol: f64,
    pub grad_tol: f64,
    pub border_margin: f64,
    pub image_pyramid_scales: Vec<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters_per_level: 100,
            cost_scale: 0.1,
            step_tol: 1e-5,
            grad_tol: 1e-7,
            border_margin: 2.0,
            image_pyramid_scales: vec![0.25, 1.0],
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidInput(m.into()));
        if self.max_iters_per_level < 1 {
            return bad("max_iters_per_level must be at least 1");
        }
        if !(self.cost_scale > 0.0 && self.step_tol > 0.0 && self.grad_tol > 0.0) {
            return bad("tolerances and cost scale must be positive");
        }
        if !(self.border_margin >= 0.0) {
            return bad("border margin must be non-negative");
        }
        if self.image_pyramid_scales.is_empty()
            || self.image_pyramid_scales.iter().any(|s| !(*s > 0.0))
            || self.image_pyramid_scales.windows(2).any(|w| w[1] <= w[0])
        {
            return bad("image scales must be positive and increasing");
        }
        Ok(())
    }
}

/// One LM iteration: cost and gradient at the pose before the step, the
/// step taken and the resulting pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub cost: f64,
    pub grad_norm: f64,
    pub step_norm: f64,
    pub n_valid: usize,
    pub n_dropped: usize,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub scale: f64,
    pub level: usize,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    pub skipped: bool,
    /// Largest number of observations dropped in any iteration.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub stages: Vec<LevelTrace>,
    pub final_pose: Pose,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.stages.iter().any(|s| !s.skipped) && self.stages.iter().all(|s| s.skipped || s.converged)
    }

    pub fn final_cost(&self) -> Option<f64> {
        self.stages.iter().rev().find(|s| !s.skipped)?.iterations.last().map(|r| r.cost)
    }
}

/// Feature-metric residual `query − reference`.
pub fn residual<T: Real>(query: &[T], reference: &[T]) -> Vec<T> {
    query.iter().zip(reference).map(|(a, b)| *a - *b).collect()
}

/// Cauchy cost `ρ(s) = c²·ln(1 + s/c²)` and its derivative `1/(1 + s/c²)`.
pub fn cauchy<T: Real>(s: T, c: f64) -> (T, T) {
    let c2 = T::lit(c * c);
    let x = T::one() + s / c2;
    (c2 * x.ln(), T::one() / x)
}

/// `λ = 10^(λ_min + sigmoid(θ)·(λ_max − λ_min))`, elementwise.
pub fn damping<T: Real>(theta: &Vector6<T>) -> Vector6<T> {
    let ln10 = T::lit(std::f64::consts::LN_10);
    theta.map(|t| {
        let s = T::one() / (T::one() + (-t).exp());
        let log10 = T::lit(LAMBDA_MIN) + s * T::lit(LAMBDA_MAX - LAMBDA_MIN);
        (log10 * ln10).exp()
    })
}

/// `δ = −(H + diag(λ ∘ diag H) + εI)⁻¹ g`, via Cholesky.
pub fn lm_step<T: Real>(h: &Matrix6<T>, g: &Vector6<T>, lambda: &Vector6<T>) -> Result<Tangent<T>, SolverError> {
    let mut a = *h;
    for j in 0..6 {
        a[(j, j)] += lambda[j] * h[(j, j)] + T::lit(RIDGE);
    }
    let chol = a.cholesky().ok_or(SolverError::SingularSystem)?;
    let delta = -chol.solve(g);
    if delta.iter().any(|x| !x.value().is_finite()) {
        return Err(SolverError::SingularSystem);
    }
    Ok(Tangent(delta))
}

/// Hash of the discrete decisions taken along a solve (cell indices,
/// validity, iteration counts). Two solves with equal signatures followed
/// the same piecewise-smooth branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchSignature(u64);

impl Default for BranchSignature {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl BranchSignature {
    pub fn mix(&mut self, x: u64) {
        for b in x.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn value(&self) -> u64 {
        self.0
    }
}

/// Normal equations at one pose.
#[derive(Debug, Clone, PartialEq)]
pub struct System<T: Real> {
    pub h: Matrix6<T>,
    pub g: Vector6<T>,
    pub cost: T,
    pub n_valid: usize,
    pub n_dropped: usize,
}

/// Inputs of one optimization stage.
#[derive(Debug, Clone, Copy)]
pub struct LevelProblem<'a> {
    pub points: &'a [Point3],
    pub descriptors: &'a LevelDescriptors,
    pub query: &'a FeatureLevel,
    pub camera: &'a Camera,
    pub cost_scale: f64,
    pub margin: f64,
}

impl<'a> LevelProblem<'a> {
    pub fn new(scene: &'a ScenePoints, scale: usize, query: &'a FeaturePyramid, camera: &'a Camera, level: usize, config: &SolverConfig) -> Result<Self, SolverError> {
        let feats = scene
            .features
            .get(scale)
            .ok_or_else(|| SolverError::InvalidInput(format!("scene has no descriptors for scale {scale}")))?;
        if level >= query.len() || level >= feats.levels.len() {
            return Err(SolverError::InvalidInput(format!("level {level} does not exist")));
        }
        let descriptors = &feats.levels[level];
        let q = query.level(level);
        if descriptors.dim() != q.dim() {
            return Err(SolverError::InvalidInput(format!(
                "descriptor dimension {} differs from query dimension {} at level {level}",
                descriptors.dim(),
                q.dim()
            )));
        }
        Ok(Self {
            points: scene.points(),
            descriptors,
            query: q,
            camera,
            cost_scale: config.cost_scale,
            margin: config.border_margin,
        })
    }

    /// Accumulates cost and, when `with_system`, the Gauss–Newton system.
    pub fn assemble<T: Real>(
        &self,
        pose: &Pose<T>,
        with_system: bool,
        mut sig: Option<&mut BranchSignature>,
    ) -> Result<System<T>, SolverError> {
        let d = self.query.dim();
        let mut f = vec![T::zero(); d];
        let mut gr = vec![[T::zero(); 2]; d];
        let mut h = Matrix6::<T>::zeros();
        let mut g = Vector6::<T>::zeros();
        let mut cost = T::zero();
        let (mut n_valid, mut n_dropped) = (0usize, 0usize);
        for (i, p) in self.points.iter().enumerate() {
            let Some((desc, conf)) = self.descriptors.get(i) else {
                continue;
            };
            let lookup = project_with_jacobian(self.camera, pose, &p.map(T::lit)).ok().and_then(|(px, jp)| {
                let pv = px.map(|x| x.value());
                if !self.camera.contains(&pv, self.margin) {
                    return None;
                }
                self.query.sample_into(&px, self.margin, &mut f, &mut gr).map(|(u, cell)| (u, cell, jp))
            });
            let Some((u, cell, jp)) = lookup else {
                n_dropped += 1;
                if let Some(s) = sig.as_deref_mut() {
                    s.mix(i as u64);
                    s.mix(u64::MAX);
                }
                continue;
            };
            if let Some(s) = sig.as_deref_mut() {
                s.mix(i as u64);
                s.mix(((cell[0] as u64) << 32) | cell[1] as u64);
            }
            n_valid += 1;
            let w = confidence_from_uncertainty(u) * T::lit(conf);
            let mut sq = T::zero();
            // GᵀG and Gᵀr, with G the d×2 feature gradient
            let (mut a00, mut a01, mut a11) = (T::zero(), T::zero(), T::zero());
            let (mut b0, mut b1) = (T::zero(), T::zero());
            for c in 0..d {
                let r = f[c] - T::lit(desc[c]);
                sq += r * r;
                if with_system {
                    let (gx, gy) = (gr[c][0], gr[c][1]);
                    a00 += gx * gx;
                    a01 += gx * gy;
                    a11 += gy * gy;
                    b0 += gx * r;
                    b1 += gy * r;
                }
            }
            let (rho, rho_p) = cauchy(sq, self.cost_scale);
            cost += w * rho;
            if with_system {
                let k = w * rho_p;
                let a = nalgebra::Matrix2::new(a00, a01, a01, a11) * k;
                let b = nalgebra::Vector2::new(b0, b1) * k;
                let jt = jp.transpose();
                h += jt * a * jp;
                g += jt * b;
            }
        }
        if n_valid == 0 {
            return Err(SolverError::NoValidObservations);
        }
        if with_system {
            h = (h + h.transpose()) * T::lit(0.5);
        }
        Ok(System {
            h,
            g,
            cost,
            n_valid,
            n_dropped,
        })
    }
}

/// Robust weighted cost of `pose` at one level of one scale. Returns `(E, n_valid)`.
pub fn total_cost(pose: &Pose, scene: &ScenePoints, query: &FeaturePyramid, cam: &Camera, level: usize, config: &SolverConfig) -> Result<(f64, usize), SolverError> {
    let prob = LevelProblem::new(scene, 0, query, cam, level, config)?;
    let s = prob.assemble(pose, false, None)?;
    Ok((s.cost, s.n_valid))
}

/// Gauss–Newton system `(H, g, E, n_valid)` at one level.
pub fn build_system(
    pose: &Pose,
    scene: &ScenePoints,
    query: &FeaturePyramid,
    cam: &Camera,
    level: usize,
    config: &SolverConfig,
) -> Result<(Matrix6<f64>, Vector6<f64>, f64, usize), SolverError> {
    let prob = LevelProblem::new(scene, 0, query, cam, level, config)?;
    let s = prob.assemble(pose, true, None)?;
    Ok((s.h, s.g, s.cost, s.n_valid))
}

/// Runs one stage. On `NoValidObservations` the stage is marked skipped and
/// the input pose is returned unchanged.
pub fn run_level<T: Real>(
    pose0: &Pose<T>,
    prob: &LevelProblem<'_>,
    theta: &Vector6<T>,
    max_iters: usize,
    step_tol: f64,
    grad_tol: f64,
    mut sig: Option<&mut BranchSignature>,
) -> (Pose<T>, LevelTrace) {
    let lambda = damping(theta);
    let mut pose = *pose0;
    let mut trace = LevelTrace {
        scale: 1.0,
        level: 0,
        iterations: Vec::new(),
        converged: false,
        skipped: false,
        dropped: 0,
    };
    for _ in 0..max_iters {
        let sys = match prob.assemble(&pose, true, sig.as_deref_mut()) {
            Ok(s) => s,
            Err(_) if trace.iterations.is_empty() => {
                trace.skipped = true;
                break;
            }
            // observations vanished mid-level: keep what we have
            Err(_) => break,
        };
        trace.dropped = trace.dropped.max(sys.n_dropped);
        let gnorm = sys.g.map(|x| x.value()).norm();
        let mut rec = IterationRecord {
            cost: sys.cost.value(),
            grad_norm: gnorm,
            step_norm: 0.0,
            n_valid: sys.n_valid,
            n_dropped: sys.n_dropped,
            pose: pose.value(),
        };
        if gnorm < grad_tol {
            trace.iterations.push(rec);
            trace.converged = true;
            break;
        }
        let delta = match lm_step(&sys.h, &sys.g, &lambda) {
            Ok(d) => d,
            Err(_) => {
                trace.iterations.push(rec);
                break;
            }
        };
        pose = left_update(&pose, &delta);
        let snorm = delta.norm().value();
        rec.step_norm = snorm;
        rec.pose = pose.value();
        trace.iterations.push(rec);
        if snorm < step_tol {
            trace.converged = true;
            break;
        }
    }
    if let Some(s) = sig {
        s.mix(trace.iterations.len() as u64);
    }
    (pose, trace)
}

/// Single-level optimization, the `scale = 1` / one-stage special case.
pub fn optimize_level(
    pose0: &Pose,
    scene: &ScenePoints,
    query: &FeaturePyramid,
    cam: &Camera,
    level: usize,
    config: &SolverConfig,
    damping_params: &DampingParams,
) -> Result<(Pose, LevelTrace), SolverError> {
    config.validate()?;
    damping_params.validate(level + 1)?;
    let prob = LevelProblem::new(scene, 0, query, cam, level, config)?;
    let (pose, mut trace) = run_level(
        pose0,
        &prob,
        &damping_params.theta_vector(level),
        config.max_iters_per_level,
        config.step_tol,
        config.grad_tol,
        None,
    );
    trace.level = level;
    if trace.skipped {
        return Err(SolverError::NoValidObservations);
    }
    Ok((pose, trace))
}

/// Which stages to run: `(scale index, level)` pairs in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule(pub Vec<(usize, usize)>);

impl Schedule {
    /// Every level of every scale, coarse to fine.
    pub fn full(n_scales: usize, n_levels: usize) -> Self {
        Self((0..n_scales).flat_map(|s| (0..n_levels).map(move |l| (s, l))).collect())
    }

    /// Finest scale only, skipping its coarsest level.
    pub fn refine(n_scales: usize, n_levels: usize) -> Self {
        let s = n_scales.saturating_sub(1);
        let first = if n_levels > 1 { 1 } else { 0 };
        Self((first..n_levels).map(|l| (s, l)).collect())
    }
}

/// Stage-by-stage poses of a generic solve.
pub struct GenericSolve<T: Real> {
    pub stage_poses: Vec<Pose<T>>,
    pub report: SolveReport,
    pub signature: BranchSignature,
}

/// Runs `schedule` starting from `pose0`. `theta[l]` is the damping
/// parameter of pyramid level `l`.
#[allow(clippy::too_many_arguments)]
pub fn solve_generic<T: Real>(
    pose0: &Pose<T>,
    scene: &ScenePoints,
    query_multiscale: &[FeaturePyramid],
    cam: &Camera,
    config: &SolverConfig,
    theta: &[Vector6<T>],
    schedule: &Schedule,
) -> Result<GenericSolve<T>, SolverError> {
    config.validate()?;
    if query_multiscale.len() != config.image_pyramid_scales.len() {
        return Err(SolverError::InvalidInput(format!(
            "{} query pyramids for {} image scales",
            query_multiscale.len(),
            config.image_pyramid_scales.len()
        )));
    }
    let mut sig = BranchSignature::default();
    let mut pose = *pose0;
    let mut stages = Vec::with_capacity(schedule.0.len());
    let mut stage_poses = Vec::with_capacity(schedule.0.len());
    for &(s, l) in &schedule.0 {
        let scale = config.image_pyramid_scales[s];
        let cam_s = if scale == 1.0 { *cam } else { cam.scaled(scale) };
        let th = theta
            .get(l)
            .ok_or_else(|| SolverError::InvalidInput(format!("no damping parameters for level {l}")))?;
        let prob = LevelProblem::new(scene, s, &query_multiscale[s], &cam_s, l, config)?;
        let (p, mut trace) = run_level(&pose, &prob, th, config.max_iters_per_level, config.step_tol, config.grad_tol, Some(&mut sig));
        trace.scale = scale;
        trace.level = l;
        pose = p;
        stage_poses.push(pose);
        stages.push(trace);
    }
    if stages.iter().all(|s| s.skipped) {
        return Err(SolverError::InitializationFailed);
    }
    Ok(GenericSolve {
        stage_poses,
        report: SolveReport {
            stages,
            final_pose: pose.value(),
        },
        signature: sig,
    })
}

fn theta_list(damping_params: &DampingParams, levels: usize) -> Result<Vec<Vector6<f64>>, SolverError> {
    damping_params.validate(levels)?;
    Ok((0..levels).map(|l| damping_params.theta_vector(l)).collect())
}

/// Full coarse-to-fine solve over every image scale and pyramid level.
pub fn optimize(
    pose0: &Pose,
    scene: &ScenePoints,
    query_multiscale: &[FeaturePyramid],
    cam: &Camera,
    config: &SolverConfig,
    damping_params: &DampingParams,
) -> Result<(Pose, SolveReport), SolverError> {
    let levels = query_multiscale.first().map_or(0, |q| q.len());
    let theta = theta_list(damping_params, levels)?;
    let schedule = Schedule::full(query_multiscale.len(), levels);
    let out = solve_generic(pose0, scene, query_multiscale, cam, config, &theta, &schedule)?;
    Ok((out.report.final_pose, out.report))
}

/// Refinement of an already good pose: finest scale, medium and fine levels.
pub fn refine(
    pose0: &Pose,
    scene: &ScenePoints,
    query_multiscale: &[FeaturePyramid],
    cam: &Camera,
    config: &SolverConfig,
    damping_params: &DampingParams,
) -> Result<(Pose, SolveReport), SolverError> {
    let levels = query_multiscale.first().map_or(0, |q| q.len());
    let theta = theta_list(damping_params, levels)?;
    let schedule = Schedule::refine(query_multiscale.len(), levels);
    let out = solve_generic(pose0, scene, query_multiscale, cam, config, &theta, &schedule)?;
    Ok((out.report.final_pose, out.report))
}
