//! Synthetic training fleets for damping fits.

use featalign::geometry::{left_update, Camera};
use featalign::initpose::random_tangent;
use featalign::learning::TrainSample;
use featalign::scene::{derive_seed, PyramidSpec, SceneError};
use featalign::{Scene, SceneSpec, Tangent};
use nalgebra::Vector3;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::args::Motion;

/// Small single-scale scene with appearance noise between query and map,
/// sized so a fit of a few hundred solves stays interactive.
pub fn default_fleet_spec() -> SceneSpec {
    SceneSpec {
        n_points: 60,
        image_scales: vec![1.0],
        camera: Camera::new(125.0, 125.0, 79.5, 63.5, 160, 128).expect("valid camera"),
        pyramid: PyramidSpec {
            strides: vec![8.0, 2.0, 1.0],
            dims: vec![8, 8, 8],
        },
        query_noise: 0.3,
        ..SceneSpec::default()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FleetSpec {
    pub n_scenes: usize,
    pub per_scene: usize,
    pub motion: Motion,
    /// Radians.
    pub max_rotation: f64,
    /// Scene units.
    pub max_translation: f64,
}

fn offset(motion: Motion, rot: f64, trans: f64, rng: &mut ChaCha8Rng) -> Tangent {
    match motion {
        Motion::Planar => {
            let v = Vector3::new(rng.random_range(-trans..=trans), 0.0, rng.random_range(-trans..=trans));
            Tangent::from_parts(v, Vector3::zeros())
        }
        Motion::Full => random_tangent(rot, trans, rng),
    }
}

/// Scene `s` uses seed `derive_seed(seed, stream + s)`; its `k`-th initial
/// pose draws from `derive_seed(scene_seed, k)`.
pub fn generate_fleet(base: &SceneSpec, fleet: &FleetSpec, seed: u64, stream: u64) -> Result<Vec<TrainSample>, SceneError> {
    let per_scene: Vec<Vec<TrainSample>> = (0..fleet.n_scenes as u64)
        .into_par_iter()
        .map(|s| {
            let spec = SceneSpec {
                seed: derive_seed(seed, stream + s),
                ..base.clone()
            };
            let scene = Scene::generate(&spec)?;
            let sp = scene.scene_points()?;
            Ok((0..fleet.per_scene as u64)
                .map(|k| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, k));
                    let d = offset(fleet.motion, fleet.max_rotation, fleet.max_translation, &mut rng);
                    TrainSample {
                        scene: sp.clone(),
                        query: scene.query.clone(),
                        camera: scene.camera,
                        gt: scene.gt_pose,
                        init: left_update(&scene.gt_pose, &d),
                    }
                })
                .collect())
        })
        .collect::<Result<_, SceneError>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}
