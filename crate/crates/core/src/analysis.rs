//! Evaluation harnesses: convergence sweeps over the initial reprojection
//! error and per-point attraction basins.

use nalgebra::Vector2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{interpolate, FeaturePyramid, BORDER_MARGIN};
use crate::geometry::{left_update, project, transform, Camera, Point3, Pose};
use crate::initpose::random_tangent;
use crate::scene::derive_seed;
use crate::solver::{optimize, DampingParams, ScenePoints, SolverConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("no point is visible under both poses")]
    NoVisiblePoints,
    #[error("seed pixel ({0}, {1}) is outside the valid region")]
    SeedOutOfBounds(f64, f64),
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error("invalid basin input: {0}")]
    InvalidInput(String),
}

/// Mean pixel distance between projections under `pose0` and `gt`, over
/// points in front of both cameras.
pub fn initial_reproj_error(pose0: &Pose, gt: &Pose, points: &[Point3], cam: &Camera) -> Result<f64, AnalysisError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in points {
        if let (Ok(a), Ok(b)) = (project(cam, &transform(pose0, p)), project(cam, &transform(gt, p))) {
            sum += (a - b).norm();
            n += 1;
        }
    }
    if n == 0 {
        return Err(AnalysisError::NoVisiblePoints);
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub n_trials: usize,
    /// Each trial draws `f ~ U(0, 1)` and perturbs by rotation `f·max`
    /// and translation within the ball of radius `f·max`.
    pub max_rotation_deg: f64,
    /// Fraction of the scene diameter.
    pub max_translation: f64,
    /// Strictly increasing; values past the last edge are not binned.
    pub bin_edges: Vec<f64>,
    pub rotation_tol_deg: f64,
    /// Fraction of the scene diameter.
    pub translation_tol: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n_trials: 500,
            max_rotation_deg: 90.0,
            max_translation: 0.5,
            bin_edges: vec![0.0, 100.0, 200.0, 300.0, 400.0, 500.0, 600.0, f64::INFINITY],
            rotation_tol_deg: 0.5,
            translation_tol: 0.01,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |m: &str| Err(AnalysisError::InvalidSweep(m.into()));
        if self.n_trials == 0 {
            return bad("need at least one trial");
        }
        if self.bin_edges.len() < 2 || self.bin_edges.windows(2).any(|w| !(w[1] > w[0])) {
            return bad("bin edges must be strictly increasing, at least two");
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_translation >= 0.0) {
            return bad("perturbation magnitudes must be non-negative");
        }
        if !(self.rotation_tol_deg > 0.0 && self.translation_tol > 0.0) {
            return bad("success tolerances must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepBin {
    pub lo: f64,
    pub hi: f64,
    pub trials: usize,
    pub successes: usize,
}

impl SweepBin {
    /// `None` for an empty bin.
    pub fn rate(&self) -> Option<f64> {
        (self.trials > 0).then(|| self.successes as f64 / self.trials as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub initial_error: f64,
    pub rotation_error_deg: f64,
    pub translation_error: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub bins: Vec<SweepBin>,
    pub trials: Vec<Trial>,
}

/// Inputs shared by every sweep trial.
#[derive(Debug, Clone, Copy)]
pub struct SweepProblem<'a> {
    pub scene: &'a ScenePoints,
    pub query: &'a [FeaturePyramid],
    pub camera: &'a Camera,
    pub gt: &'a Pose,
    /// Length scale for translations and tolerances.
    pub diameter: f64,
}

fn run_trial(prob: &SweepProblem<'_>, solver: &SolverConfig, damping: &DampingParams, cfg: &SweepConfig, k: usize) -> Trial {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, k as u64));
    let f: f64 = rng.random_range(0.0..1.0);
    let tangent = random_tangent(
        f * cfg.max_rotation_deg.to_radians(),
        f * cfg.max_translation * prob.diameter,
        &mut rng,
    );
    let pose0 = left_update(prob.gt, &tangent);
    let initial_error = initial_reproj_error(&pose0, prob.gt, prob.scene.points(), prob.camera).unwrap_or(f64::INFINITY);
    let (rotation_error_deg, translation_error) = match optimize(&pose0, prob.scene, prob.query, prob.camera, solver, damping) {
        Ok((p, _)) => {
            let (r, t) = p.error_to(prob.gt);
            (r.to_degrees(), t)
        }
        Err(_) => (f64::INFINITY, f64::INFINITY),
    };
    Trial {
        initial_error,
        rotation_error_deg,
        translation_error,
        success: rotation_error_deg < cfg.rotation_tol_deg && translation_error < cfg.translation_tol * prob.diameter,
    }
}

/// Perturb → optimize → classify, binned by initial reprojection error.
/// Trials run in parallel on the current rayon pool with per-trial seeds
/// and are merged by index, so results do not depend on the thread count.
pub fn convergence_sweep(
    prob: &SweepProblem<'_>,
    solver: &SolverConfig,
    damping: &DampingParams,
    cfg: &SweepConfig,
) -> Result<SweepResult, AnalysisError> {
    cfg.validate()?;
    let trials: Vec<Trial> = (0..cfg.n_trials)
        .into_par_iter()
        .map(|k| run_trial(prob, solver, damping, cfg, k))
        .collect();
    let mut bins: Vec<SweepBin> = cfg
        .bin_edges
        .windows(2)
        .map(|w| SweepBin {
            lo: w[0],
            hi: w[1],
            trials: 0,
            successes: 0,
        })
        .collect();
    for t in &trials {
        let e = t.initial_error;
        // an unmeasurable error belongs to an open last bin
        if let Some(b) = bins.iter_mut().find(|b| (e >= b.lo && e < b.hi) || (e.is_infinite() && b.hi.is_infinite())) {
            b.trials += 1;
            b.successes += t.success as usize;
        }
    }
    Ok(SweepResult { bins, trials })
}

/// Counts adjacent pairs of nonempty bins whose rate increases, returning
/// `(count, largest increase)`.
pub fn rate_inversions(bins: &[SweepBin]) -> (usize, f64) {
    let rates: Vec<f64> = bins.iter().filter_map(|b| b.rate()).collect();
    rates
        .windows(2)
        .filter(|w| w[1] > w[0])
        .fold((0, 0.0), |(n, m), w| (n + 1, f64::max(m, w[1] - w[0])))
}

/// Basin scores on the full-resolution pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BasinRaster {
    pub width: usize,
    pub height: usize,
    /// Row-major scores after processing each level, indexed by level.
    pub levels: Vec<Vec<f64>>,
    /// Scores after the last (coarsest) level.
    pub combined: Vec<f64>,
    pub seed: (usize, usize),
}

impl BasinRaster {
    pub fn at(&self, level: Option<usize>, x: usize, y: usize) -> f64 {
        let m = level.map_or(&self.combined, |l| &self.levels[l]);
        m[y * self.width + x]
    }
}

const NEIGHBORS: [(i64, i64); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

/// Each pixel's (up to) two downhill neighbors with soft-vote weights.
type Links = Vec<[(usize, f64); 2]>;

fn level_links(level: &crate::features::FeatureLevel, descriptor: &[f64], w: usize, h: usize) -> (Links, Vec<bool>) {
    let mut links = vec![[(0usize, 0.0); 2]; w * h];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let lk = interpolate::<f64>(level, &Vector2::new(x as f64, y as f64));
            if !lk.valid {
                continue;
            }
            valid[i] = true;
            let r = &lk.feature - nalgebra::DVector::from_column_slice(descriptor);
            let g = lk.grad.transpose() * r;
            let gn = g.norm();
            if gn == 0.0 {
                continue;
            }
            let mut cand: Vec<(f64, usize)> = Vec::with_capacity(8);
            for (dx, dy) in NEIGHBORS {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let d = Vector2::new(dx as f64, dy as f64);
                let cos = g.dot(&d) / (gn * d.norm());
                cand.push((cos, ny as usize * w + nx as usize));
            }
            // most opposed to the gradient first; ties by neighbor order
            cand.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (slot, (cos, j)) in links[i].iter_mut().zip(cand) {
                *slot = (j, (-cos).max(0.0));
            }
        }
    }
    (links, valid)
}

fn propagate(score: &mut [f64], links: &Links, valid: &[bool], seed: usize, w: usize, h: usize) {
    let n = w * h;
    let update = |score: &mut [f64], i: usize| -> f64 {
        if i == seed || !valid[i] {
            return 0.0;
        }
        let [(a, wa), (b, wb)] = links[i];
        let ws = wa + wb;
        if ws <= 0.0 {
            return 0.0;
        }
        let v = (wa * score[a] + wb * score[b]) / ws;
        if v > score[i] {
            let d = v - score[i];
            score[i] = v;
            d
        } else {
            0.0
        }
    };
    for sweep in 0..n.max(1) {
        let mut change: f64 = 0.0;
        // alternate raster direction so information travels both ways
        if sweep % 2 == 0 {
            for i in 0..n {
                change = change.max(update(score, i));
            }
        } else {
            for i in (0..n).rev() {
                change = change.max(update(score, i));
            }
        }
        if change < 1e-6 {
            break;
        }
    }
}

/// Attraction basin of the point whose descriptor at level `l` is
/// `descriptors[l]`, seeded at `seed` (full-resolution pixels). Levels are
/// processed finest to coarsest, each starting from the previous scores.
pub fn basin(query: &FeaturePyramid, descriptors: &[Vec<f64>], seed: Vector2<f64>) -> Result<BasinRaster, AnalysisError> {
    if descriptors.len() != query.len() {
        return Err(AnalysisError::InvalidInput(format!(
            "{} descriptors for {} levels",
            descriptors.len(),
            query.len()
        )));
    }
    for (l, (lvl, d)) in query.levels().iter().zip(descriptors).enumerate() {
        if lvl.dim() != d.len() {
            return Err(AnalysisError::InvalidInput(format!("descriptor {l} has wrong dimension")));
        }
    }
    let finest = query.level(query.len() - 1);
    let (wf, hf) = finest.image_size();
    let (w, h) = (wf.round() as usize, hf.round() as usize);
    let (sx, sy) = (seed.x.round(), seed.y.round());
    let inside = sx >= BORDER_MARGIN && sy >= BORDER_MARGIN && sx <= wf - 1.0 - BORDER_MARGIN && sy <= hf - 1.0 - BORDER_MARGIN;
    if !inside {
        return Err(AnalysisError::SeedOutOfBounds(seed.x, seed.y));
    }
    let (sx, sy) = (sx as usize, sy as usize);
    let s = sy * w + sx;
    let mut score = vec![0.0; w * h];
    score[s] = 1.0;
    let mut levels = vec![Vec::new(); query.len()];
    for l in (0..query.len()).rev() {
        let (links, valid) = level_links(query.level(l), &descriptors[l], w, h);
        propagate(&mut score, &links, &valid, s, w, h);
        levels[l] = score.clone();
    }
    Ok(BasinRaster {
        width: w,
        height: h,
        combined: score,
        levels,
        seed: (sx, sy),
    })
}

/// Descriptors of the query itself at `pixel`, one per level.
pub fn descriptors_at(query: &FeaturePyramid, pixel: Vector2<f64>) -> Result<Vec<Vec<f64>>, AnalysisError> {
    query
        .levels()
        .iter()
        .map(|lvl| {
            let lk = interpolate::<f64>(lvl, &pixel);
            if lk.valid {
                Ok(lk.feature.as_slice().to_vec())
            } else {
                Err(AnalysisError::SeedOutOfBounds(pixel.x, pixel.y))
            }
        })
        .collect()
}
