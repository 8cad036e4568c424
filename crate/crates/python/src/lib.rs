//! Python bindings: poses, scene generation and the two solve entry points.
//! Structured values (configs, damping, reports) cross the boundary as JSON
//! text so the Python side sees exactly what the CLI writes.

use std::path::PathBuf;

use featalign::geometry::{self, Rotation};
use featalign::io;
use featalign::solver::{self, SolverError};
use featalign::{
    Camera, DampingParams, FeaturePyramid, Pose, Scene, SceneSpec, ScenePoints, SolveReport, SolverConfig, Tangent,
};
use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector6};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn solver_err(e: SolverError) -> PyErr {
    match e {
        SolverError::InvalidInput(m) => PyValueError::new_err(m),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

/// World→camera rigid transform.
#[pyclass(name = "Pose", module = "featalign_py", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyPose(Pose);

#[pymethods]
impl PyPose {
    /// `q` is a unit quaternion `[w, x, y, z]` (renormalized), `t` the translation.
    #[new]
    #[pyo3(signature = (q = [1.0, 0.0, 0.0, 0.0], t = [0.0, 0.0, 0.0]))]
    fn new(q: [f64; 4], t: [f64; 3]) -> PyResult<Self> {
        let q = Quaternion::new(q[0], q[1], q[2], q[3]);
        if !(q.norm() > 0.0) || !q.coords.iter().chain(&t).all(|v| v.is_finite()) {
            return Err(value_err("pose needs a finite, non-zero quaternion and finite translation"));
        }
        let r = Rotation::from_quaternion(&UnitQuaternion::from_quaternion(q));
        Ok(Self(Pose::new(r, Vector3::from(t))))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        io::parse_json::<Pose>(text).map(Self).map_err(value_err)
    }

    fn to_json(&self) -> String {
        io::to_json(&self.0)
    }

    #[getter]
    fn q(&self) -> [f64; 4] {
        let q = self.0.rotation.to_quaternion();
        [q.w, q.i, q.j, q.k]
    }

    #[getter]
    fn t(&self) -> [f64; 3] {
        self.0.translation.into()
    }

    /// Row-major 3×3 rotation.
    #[getter]
    fn rotation(&self) -> [[f64; 3]; 3] {
        let m = self.0.rotation.matrix();
        std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.0.center().into()
    }

    fn compose(&self, other: &PyPose) -> Self {
        Self(self.0.compose(&other.0))
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    /// `exp(δ)·self`, δ = (translation, rotation).
    fn left_update(&self, delta: [f64; 6]) -> Self {
        Self(geometry::left_update(&self.0, &Tangent(Vector6::from(delta))))
    }

    /// `(rotation error in radians, camera-center distance)`.
    fn error_to(&self, other: &PyPose) -> (f64, f64) {
        self.0.error_to(&other.0)
    }

    fn transform(&self, p: [f64; 3]) -> [f64; 3] {
        geometry::transform(&self.0, &Vector3::from(p)).into()
    }

    fn __repr__(&self) -> String {
        let (q, t) = (self.q(), self.t());
        format!("Pose(q={q:?}, t={t:?})")
    }
}

#[pyfunction]
fn se3_exp(delta: [f64; 6]) -> PyPose {
    PyPose(geometry::se3_exp(&Tangent(Vector6::from(delta))))
}

#[pyfunction]
fn se3_log(pose: &PyPose) -> [f64; 6] {
    geometry::se3_log(&pose.0).0.into()
}

/// Map points plus query feature pyramids: everything a solve needs.
#[pyclass(name = "Problem", module = "featalign_py", frozen)]
struct PyProblem {
    scene: ScenePoints,
    query: Vec<FeaturePyramid>,
    camera: Camera,
    image_scales: Vec<f64>,
    gt: Option<Pose>,
    diameter: Option<f64>,
}

type SolveFn = fn(
    &Pose,
    &ScenePoints,
    &[FeaturePyramid],
    &Camera,
    &SolverConfig,
    &DampingParams,
) -> Result<(Pose, SolveReport), SolverError>;

impl PyProblem {
    fn config(&self, config_json: Option<&str>) -> PyResult<SolverConfig> {
        let cfg = match config_json {
            None => SolverConfig {
                image_pyramid_scales: self.image_scales.clone(),
                ..SolverConfig::default()
            },
            Some(text) => {
                let mut v: serde_json::Value = serde_json::from_str(text).map_err(value_err)?;
                let obj = v.as_object_mut().ok_or_else(|| value_err("solver config must be a JSON object"))?;
                obj.entry("image_pyramid_scales")
                    .or_insert_with(|| serde_json::json!(self.image_scales));
                let cfg: SolverConfig = serde_json::from_value(v).map_err(value_err)?;
                if cfg.image_pyramid_scales != self.image_scales {
                    return Err(value_err("image_pyramid_scales differ from the query's image scales"));
                }
                cfg
            }
        };
        cfg.validate().map_err(solver_err)?;
        Ok(cfg)
    }

    fn damping(&self, damping_json: Option<&str>) -> PyResult<DampingParams> {
        let levels = self.query.first().map_or(0, |p| p.len());
        match damping_json {
            None => Ok(DampingParams::zeros(levels)),
            Some(text) => {
                let d: DampingParams = io::parse_json(text).map_err(value_err)?;
                d.validate(levels).map_err(value_err)?;
                Ok(d)
            }
        }
    }

    fn solve(
        &self,
        py: Python<'_>,
        entry: SolveFn,
        pose0: &PyPose,
        config_json: Option<&str>,
        damping_json: Option<&str>,
    ) -> PyResult<(PyPose, String)> {
        let cfg = self.config(config_json)?;
        let damping = self.damping(damping_json)?;
        let p0 = pose0.0;
        let (pose, report) = py
            .detach(|| entry(&p0, &self.scene, &self.query, &self.camera, &cfg, &damping))
            .map_err(solver_err)?;
        Ok((PyPose(pose), io::to_json(&report)))
    }
}

#[pymethods]
impl PyProblem {
    /// Loads a bundle written by `write_scene` / `featalign make-scene`.
    #[staticmethod]
    fn load(scene_json: PathBuf) -> PyResult<Self> {
        let s = io::load_scene(&scene_json).map_err(value_err)?;
        Self::from_parts(s.map, s.query, None, None)
    }

    /// Loads a separate map manifest and query manifest.
    #[staticmethod]
    fn from_files(map_json: PathBuf, query_json: PathBuf) -> PyResult<Self> {
        let m = io::load_map(&map_json).map_err(value_err)?;
        let q = io::load_query(&query_json).map_err(value_err)?;
        Self::from_parts(m, q, None, None)
    }

    /// Synthetic scene from a seed; `spec_json` overrides fields of the
    /// standard scene spec.
    #[staticmethod]
    #[pyo3(signature = (seed, spec_json = None))]
    fn generate(py: Python<'_>, seed: u64, spec_json: Option<&str>) -> PyResult<Self> {
        let spec = spec_from(seed, spec_json)?;
        let scene = py.detach(|| Scene::generate(&spec)).map_err(value_err)?;
        let sp = scene.scene_points().map_err(value_err)?;
        Ok(Self {
            scene: sp,
            query: scene.query,
            camera: scene.camera,
            image_scales: scene.spec.image_scales,
            gt: Some(scene.gt_pose),
            diameter: Some(scene.diameter),
        })
    }

    /// Ground truth, for generated problems only.
    #[getter]
    fn gt_pose(&self) -> Option<PyPose> {
        self.gt.map(PyPose)
    }

    #[getter]
    fn diameter(&self) -> Option<f64> {
        self.diameter
    }

    #[getter]
    fn image_scales(&self) -> Vec<f64> {
        self.image_scales.clone()
    }

    #[getter]
    fn n_levels(&self) -> usize {
        self.query.first().map_or(0, |p| p.len())
    }

    #[getter]
    fn n_points(&self) -> usize {
        self.scene.points().len()
    }

    /// Full coarse-to-fine solve. Returns `(pose, report_json)`. Without
    /// `damping_json` the damping parameters are all zero.
    #[pyo3(signature = (pose0, config_json = None, damping_json = None))]
    fn localize(
        &self,
        py: Python<'_>,
        pose0: &PyPose,
        config_json: Option<&str>,
        damping_json: Option<&str>,
    ) -> PyResult<(PyPose, String)> {
        self.solve(py, solver::optimize, pose0, config_json, damping_json)
    }

    /// Finest-scale refinement from an already-close pose.
    #[pyo3(signature = (pose0, config_json = None, damping_json = None))]
    fn refine(
        &self,
        py: Python<'_>,
        pose0: &PyPose,
        config_json: Option<&str>,
        damping_json: Option<&str>,
    ) -> PyResult<(PyPose, String)> {
        self.solve(py, solver::refine, pose0, config_json, damping_json)
    }
}

impl PyProblem {
    fn from_parts(m: io::LoadedMap, q: io::LoadedQuery, gt: Option<Pose>, diameter: Option<f64>) -> PyResult<Self> {
        if m.image_scales != q.image_scales {
            return Err(value_err("query image scales differ from the map's"));
        }
        if m.camera != q.camera {
            return Err(value_err("query camera differs from the map's"));
        }
        Ok(Self {
            scene: m.scene,
            query: q.pyramids,
            camera: m.camera,
            image_scales: m.image_scales,
            gt,
            diameter,
        })
    }
}

fn spec_from(seed: u64, spec_json: Option<&str>) -> PyResult<SceneSpec> {
    let mut v = serde_json::to_value(SceneSpec::standard(seed)).map_err(value_err)?;
    if let Some(text) = spec_json {
        let over: serde_json::Value = serde_json::from_str(text).map_err(value_err)?;
        let over = over.as_object().ok_or_else(|| value_err("scene spec must be a JSON object"))?;
        let base = v.as_object_mut().expect("spec serializes to an object");
        for (k, x) in over {
            base.insert(k.clone(), x.clone());
        }
        base.insert("seed".into(), serde_json::json!(seed));
    }
    serde_json::from_value(v).map_err(value_err)
}

/// Generates a scene and writes it as a bundle under `out_dir`; returns the
/// written paths (scene manifest first) and the ground-truth pose.
#[pyfunction]
#[pyo3(signature = (out_dir, seed, spec_json = None))]
fn write_scene(py: Python<'_>, out_dir: PathBuf, seed: u64, spec_json: Option<&str>) -> PyResult<(Vec<PathBuf>, PyPose)> {
    let spec = spec_from(seed, spec_json)?;
    let scene = py.detach(|| Scene::generate(&spec)).map_err(value_err)?;
    let paths = io::write_scene(&scene, &out_dir).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((paths, PyPose(scene.gt_pose)))
}

#[pymodule]
fn featalign_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPose>()?;
    m.add_class::<PyProblem>()?;
    m.add_function(wrap_pyfunction!(se3_exp, m)?)?;
    m.add_function(wrap_pyfunction!(se3_log, m)?)?;
    m.add_function(wrap_pyfunction!(write_scene, m)?)?;
    Ok(())
}
