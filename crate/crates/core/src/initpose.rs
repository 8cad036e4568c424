//! Initial poses from retrieval priors, and seeded perturbations for
//! experiments.

use nalgebra::{Matrix4, Quaternion, UnitQuaternion, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{left_update, Pose, Rotation, Tangent};
use crate::scene::unit_vector;

/// Eigenvalue gap below which the rotation average is ambiguous.
pub const EIGEN_TIE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InitPoseError {
    #[error("no prior poses")]
    Empty,
    #[error("invalid weight {0}: weights must be finite and non-negative")]
    BadWeight(f64),
    #[error("prior weights sum to zero")]
    ZeroWeight,
    #[error("rotation average is degenerate (top eigenvalues {0} and {1})")]
    DegenerateRotationSet(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedPose {
    pub pose: Pose,
    pub weight: f64,
}

fn check(candidates: &[WeightedPose]) -> Result<usize, InitPoseError> {
    if candidates.is_empty() {
        return Err(InitPoseError::Empty);
    }
    if let Some(c) = candidates.iter().find(|c| !(c.weight >= 0.0 && c.weight.is_finite())) {
        return Err(InitPoseError::BadWeight(c.weight));
    }
    if candidates.iter().map(|c| c.weight).sum::<f64>() <= 0.0 {
        return Err(InitPoseError::ZeroWeight);
    }
    // first maximum, so ties resolve by input order
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.weight > candidates[best].weight {
            best = i;
        }
    }
    Ok(best)
}

/// Weighted pose average: arithmetic mean of translations and the principal
/// eigenvector of `Σ wᵢ qᵢqᵢᵀ` over sign-aligned quaternions.
pub fn average_poses(candidates: &[WeightedPose]) -> Result<Pose, InitPoseError> {
    let best = check(candidates)?;
    let wsum: f64 = candidates.iter().map(|c| c.weight).sum();
    let t = candidates
        .iter()
        .fold(Vector3::zeros(), |acc, c| acc + c.pose.translation * c.weight)
        / wsum;

    let q_ref = candidates[best].pose.rotation.to_quaternion().into_inner().coords;
    let mut m = Matrix4::<f64>::zeros();
    for c in candidates {
        let mut q = c.pose.rotation.to_quaternion().into_inner().coords;
        if q.dot(&q_ref) < 0.0 {
            q = -q;
        }
        m += q * q.transpose() * c.weight;
    }
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l0, l1) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if (l0 - l1).abs() <= EIGEN_TIE_TOL * wsum.max(1.0) {
        return Err(InitPoseError::DegenerateRotationSet(l0, l1));
    }
    let mut v = eig.eigenvectors.column(order[0]).into_owned();
    if v.dot(&q_ref) < 0.0 {
        v = -v;
    }
    // nalgebra stores quaternion coords as (x, y, z, w)
    let q = UnitQuaternion::from_quaternion(Quaternion::new(v[3], v[0], v[1], v[2]));
    Ok(Pose::new(Rotation::from_quaternion(&q), t))
}

/// [`average_poses`], falling back to the highest-weight candidate when the
/// rotation average is degenerate.
pub fn average_or_best(candidates: &[WeightedPose]) -> Result<(Pose, bool), InitPoseError> {
    match average_poses(candidates) {
        Ok(p) => Ok((p, false)),
        Err(InitPoseError::DegenerateRotationSet(..)) => Ok((candidates[check(candidates)?].pose, true)),
        Err(e) => Err(e),
    }
}

/// Random tangent with rotation part of norm exactly `rot_mag` (uniform
/// direction) and translation uniform in the ball of radius `trans_mag`.
pub fn random_tangent(rot_mag: f64, trans_mag: f64, rng: &mut ChaCha8Rng) -> Tangent {
    let w = unit_vector(rng) * rot_mag;
    let r: f64 = rng.random_range(0.0..1.0);
    let v = unit_vector(rng) * trans_mag * r.cbrt();
    Tangent::from_parts(v, w)
}

/// Left-perturbs `pose`; deterministic per seed.
pub fn perturb(pose: &Pose, rot_mag: f64, trans_mag: f64, seed: u64) -> Pose {
    assert!(rot_mag >= 0.0 && trans_mag >= 0.0, "perturbation magnitudes must be non-negative");
    if rot_mag == 0.0 && trans_mag == 0.0 {
        return *pose;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    left_update(pose, &random_tangent(rot_mag, trans_mag, &mut rng))
}
