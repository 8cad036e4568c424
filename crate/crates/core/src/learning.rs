//! Training objective for the damping parameters and its exact gradient
//! through the unrolled solver.
//!
//! Features are fixed; only `θ` is learned. Gradients come from running the
//! whole coarse-to-fine solve with vector dual numbers, one pass per pyramid
//! level seeding that level's six components.

use nalgebra::{Vector2, Vector6};
use num_dual::DualSVec64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeaturePyramid;
use crate::geometry::{project, transform, Camera, Point3, Pose};
use crate::real::Real;
use crate::solver::{solve_generic, BranchSignature, DampingParams, Schedule, ScenePoints, SolverConfig, SolverError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearningError {
    #[error("no point is visible under both poses")]
    NoVisiblePoints,
    #[error("no training samples")]
    NoSamples,
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// One supervised alignment problem.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub scene: ScenePoints,
    /// One pyramid per image scale of the solver config.
    pub query: Vec<FeaturePyramid>,
    pub camera: Camera,
    pub gt: Pose,
    pub init: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Huber elbow, pixels.
    pub huber_delta: f64,
    /// A level counts only if the previous one ended below this mean error.
    pub gate_threshold: f64,
    /// Upper bound on each level's term.
    pub clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            huber_delta: 1.0,
            gate_threshold: 50.0,
            clamp: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub solver: SolverConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig {
                max_iters_per_level: 15,
                ..SolverConfig::default()
            },
            loss: LossConfig::default(),
        }
    }
}

/// Per-stage loss terms with their gates.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport<T: Real = f64> {
    pub per_level: Vec<T>,
    pub active: Vec<bool>,
    /// Mean (unrobust) reprojection error of each stage, pixels.
    pub mean_error: Vec<f64>,
    pub total: T,
}

impl<T: Real> LossReport<T> {
    pub fn value(&self) -> LossReport<f64> {
        LossReport {
            per_level: self.per_level.iter().map(|x| x.value()).collect(),
            active: self.active.clone(),
            mean_error: self.mean_error.clone(),
            total: self.total.value(),
        }
    }
}

/// Huber cost of an error with squared norm `sq`: `½e²` up to `delta`,
/// linear beyond. Taking the square keeps the derivative finite at zero.
pub fn huber<T: Real>(sq: T, delta: f64) -> T {
    if sq.value() <= delta * delta {
        sq * T::lit(0.5)
    } else {
        sq.sqrt() * T::lit(delta) - T::lit(0.5 * delta * delta)
    }
}

/// Mean Huber reprojection error of `points` between `pose` and `gt`.
/// Returns `(loss, mean pixel error, points used)`; points behind either
/// camera are skipped.
pub fn reprojection_loss<T: Real>(
    pose: &Pose<T>,
    gt: &Pose,
    points: &[Point3],
    cam: &Camera,
    huber_delta: f64,
) -> Result<(T, f64, usize), LearningError> {
    let mut sum = T::zero();
    let mut err = 0.0;
    let mut n = 0usize;
    for p in points {
        let Ok(target) = project(cam, &transform(gt, p)) else {
            continue;
        };
        let Ok(px) = project(cam, &transform(pose, &p.map(T::lit))) else {
            continue;
        };
        let d: Vector2<T> = px - target.map(T::lit);
        let sq = d.norm_squared();
        sum += huber(sq, huber_delta);
        err += sq.value().sqrt();
        n += 1;
    }
    if n == 0 {
        return Err(LearningError::NoVisiblePoints);
    }
    let nf = n as f64;
    Ok((sum / T::lit(nf), err / nf, n))
}

/// Gated, clamped sum of per-level terms divided by the number of levels.
/// A level whose poses leave no point visible counts as failed.
pub fn gated_total_loss<T: Real>(
    per_level_poses: &[Pose<T>],
    gt: &Pose,
    points: &[Point3],
    cam: &Camera,
    cfg: &LossConfig,
) -> LossReport<T> {
    let n = per_level_poses.len();
    let mut per_level = vec![T::zero(); n];
    let mut active = vec![false; n];
    let mut mean_error = vec![f64::INFINITY; n];
    let mut total = T::zero();
    let mut open = true;
    for (l, pose) in per_level_poses.iter().enumerate() {
        let res = reprojection_loss(pose, gt, points, cam, cfg.huber_delta);
        if let Ok((_, e, _)) = &res {
            mean_error[l] = *e;
        }
        if !open {
            continue;
        }
        active[l] = true;
        let term = match res {
            Ok((v, _, _)) if v.value() < cfg.clamp => v,
            _ => T::lit(cfg.clamp),
        };
        per_level[l] = term;
        total += term;
        open = mean_error[l] < cfg.gate_threshold;
    }
    if n > 0 {
        total /= T::lit(n as f64);
    }
    LossReport {
        per_level,
        active,
        mean_error,
        total,
    }
}

fn schedule_for(sample: &TrainSample, config: &SolverConfig) -> Schedule {
    let levels = sample.query.first().map_or(0, |q| q.len());
    Schedule::full(config.image_pyramid_scales.len(), levels)
}

fn loss_generic<T: Real>(
    sample: &TrainSample,
    cfg: &TrainConfig,
    theta: &[Vector6<T>],
) -> Result<(LossReport<T>, BranchSignature), LearningError> {
    let schedule = schedule_for(sample, &cfg.solver);
    let out = solve_generic(
        &sample.init.lift::<T>(),
        &sample.scene,
        &sample.query,
        &sample.camera,
        &cfg.solver,
        theta,
        &schedule,
    )?;
    let report = gated_total_loss(&out.stage_poses, &sample.gt, sample.scene.points(), &sample.camera, &cfg.loss);
    let mut sig = out.signature;
    for a in &report.active {
        sig.mix(*a as u64);
    }
    for v in &report.per_level {
        // clamped terms are flat in θ
        sig.mix((v.value() >= cfg.loss.clamp) as u64);
    }
    Ok((report, sig))
}

fn thetas(params: &DampingParams, levels: usize) -> Result<Vec<Vector6<f64>>, LearningError> {
    params.validate(levels)?;
    Ok((0..levels).map(|l| params.theta_vector(l)).collect())
}

/// Loss of the unrolled solve and its branch signature.
pub fn sample_loss(
    sample: &TrainSample,
    cfg: &TrainConfig,
    params: &DampingParams,
) -> Result<(LossReport, BranchSignature), LearningError> {
    let levels = sample.query.first().map_or(0, |q| q.len());
    loss_generic(sample, cfg, &thetas(params, levels)?)
}

/// Exact `d loss / dθ`, one 6-vector per pyramid level, with the loss
/// report and branch signature of the primal solve.
pub fn theta_gradient(
    sample: &TrainSample,
    cfg: &TrainConfig,
    params: &DampingParams,
) -> Result<(LossReport, Vec<[f64; 6]>, BranchSignature), LearningError> {
    type D6 = DualSVec64<6>;
    let levels = sample.query.first().map_or(0, |q| q.len());
    let base = thetas(params, levels)?;
    let mut grads = vec![[0.0; 6]; levels];
    let mut primal = None;
    for (l, grad) in grads.iter_mut().enumerate() {
        let theta: Vec<Vector6<D6>> = base
            .iter()
            .enumerate()
            .map(|(k, t)| Vector6::from_fn(|i, _| if k == l { D6::from_re(t[i]).derivative(i) } else { D6::lit(t[i]) }))
            .collect();
        let (rep, sig) = loss_generic(sample, cfg, &theta)?;
        if let Some(eps) = rep.total.eps.0.as_ref() {
            grad.copy_from_slice(eps.as_slice());
        }
        primal.get_or_insert((rep.value(), sig));
    }
    let (report, sig) = match primal {
        Some(p) => p,
        None => loss_generic(sample, cfg, &base)?,
    };
    Ok((report, grads, sig))
}

/// One component of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdComponent {
    pub level: usize,
    pub axis: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// A discrete decision changed within the difference stencil.
    pub crosses_branch: bool,
}

impl FdComponent {
    pub fn agrees(&self, rel: f64, abs: f64) -> bool {
        (self.analytic - self.numeric).abs() <= rel * self.analytic.abs().max(self.numeric.abs()) + abs
    }
}

/// Central differences of the loss in every `θ` component.
pub fn finite_difference_check(
    sample: &TrainSample,
    cfg: &TrainConfig,
    params: &DampingParams,
    step: f64,
) -> Result<Vec<FdComponent>, LearningError> {
    let (_, grads, sig0) = theta_gradient(sample, cfg, params)?;
    let mut out = Vec::new();
    for (l, g) in grads.iter().enumerate() {
        for (i, &analytic) in g.iter().enumerate() {
            let eval = |h: f64| {
                let mut p = params.clone();
                p.theta[l][i] += h;
                sample_loss(sample, cfg, &p)
            };
            let (lp, sp) = eval(step)?;
            let (lm, sm) = eval(-step)?;
            out.push(FdComponent {
                level: l,
                axis: i,
                analytic,
                numeric: (lp.total - lm.total) / (2.0 * step),
                crosses_branch: sp != sig0 || sm != sig0,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: DampingParams,
    pub history: Vec<HistoryRow>,
}

/// Gradient components are clipped to this magnitude before each step.
pub const GRAD_CLIP: f64 = 1.0;

/// Mean loss over samples; failed solves contribute the clamp value.
pub fn mean_loss(samples: &[TrainSample], cfg: &TrainConfig, params: &DampingParams) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| sample_loss(s, cfg, params).map_or(cfg.loss.clamp, |(r, _)| r.total))
        .collect();
    losses.iter().sum::<f64>() / samples.len() as f64
}

/// Plain gradient descent on `θ` over the mean training loss. Records one
/// history row per step (loss before the update) plus the final state.
pub fn fit_damping(
    train: &[TrainSample],
    val: &[TrainSample],
    cfg: &TrainConfig,
    init: &DampingParams,
    lr: f64,
    steps: usize,
) -> Result<FitResult, LearningError> {
    if train.is_empty() {
        return Err(LearningError::NoSamples);
    }
    let levels = train[0].query.first().map_or(0, |q| q.len());
    init.validate(levels)?;
    let mut params = init.clone();
    let mut history = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let results: Vec<Option<(f64, Vec<[f64; 6]>)>> = train
            .par_iter()
            .map(|s| theta_gradient(s, cfg, &params).ok().map(|(r, g, _)| (r.total, g)))
            .collect();
        // merged in sample order for reproducibility
        let mut grad = vec![[0.0; 6]; levels];
        let mut loss = 0.0;
        for r in &results {
            match r {
                Some((l, g)) => {
                    loss += l;
                    for (acc, gl) in grad.iter_mut().zip(g) {
                        acc.iter_mut().zip(gl).for_each(|(a, b)| *a += b);
                    }
                }
                None => loss += cfg.loss.clamp,
            }
        }
        let n = train.len() as f64;
        let val_loss = if val.is_empty() { f64::NAN } else { mean_loss(val, cfg, &params) };
        history.push(HistoryRow {
            step,
            train_loss: loss / n,
            val_loss,
        });
        if step == steps {
            break;
        }
        for (t, g) in params.theta.iter_mut().zip(&grad) {
            t.iter_mut()
                .zip(g)
                .for_each(|(t, g)| *t -= lr * (g / n).clamp(-GRAD_CLIP, GRAD_CLIP));
        }
    }
    Ok(FitResult { params, history })
}

/// Final mean reprojection error of the full solve, pixels; `∞` on failure.
pub fn final_error(sample: &TrainSample, solver: &SolverConfig, params: &DampingParams) -> f64 {
    let levels = sample.query.first().map_or(0, |q| q.len());
    let Ok(theta) = thetas(params, levels) else {
        return f64::INFINITY;
    };
    solve_generic(
        &sample.init,
        &sample.scene,
        &sample.query,
        &sample.camera,
        solver,
        &theta,
        &schedule_for(sample, solver),
    )
    .ok()
    .and_then(|out| reprojection_loss(&out.report.final_pose, &sample.gt, sample.scene.points(), &sample.camera, 1.0).ok())
    .map_or(f64::INFINITY, |(_, e, _)| e)
}

/// Area under the cumulative error curve up to `max_error`, normalized to
/// `[0, 1]`.
pub fn success_auc(errors: &[f64], max_error: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors
        .iter()
        .map(|e| if e.is_finite() { 1.0 - e.min(max_error) / max_error } else { 0.0 })
        .sum::<f64>()
        / errors.len() as f64
}
