//! Feature-metric direct alignment for 6-DoF camera localization.
//!
//! A query camera pose is estimated by aligning multi-level feature maps
//! against a 3D point model with confidence-weighted robust
//! Levenberg–Marquardt on SE(3), using a learned per-parameter damping.
//! Synthetic scenes with analytic feature fields provide ground truth for
//! every stage.

pub mod analysis;
pub mod features;
pub mod initpose;
pub mod io;
pub mod learning;
pub mod geometry;
pub mod real;
pub mod scene;
pub mod solver;

pub use features::{FeatureLevel, FeaturePyramid, PointFeatures};
pub use geometry::{Camera, Point3, Pose, Rotation, Tangent};
pub use real::Real;
pub use solver::{DampingParams, ScenePoints, SolveReport, SolverConfig};
pub use scene::{FieldType, Scene, SceneSpec, UncertaintyPattern};
