use std::path::Path;

use featalign::analysis::{self, AnalysisError, SweepConfig, SweepProblem};
use featalign::initpose::{average_or_best, perturb, WeightedPose};
use featalign::io::{self, IoError, LoadedMap, LoadedQuery};
use featalign::learning::{fit_damping, TrainConfig};
use featalign::solver::{optimize, refine, SolverError};
use featalign::{DampingParams, Pose, Scene, SceneSpec, SolveReport, SolverConfig};
use nalgebra::Vector2;
use serde::Serialize;
use thiserror::Error;

use crate::args::*;
use crate::fleet::{default_fleet_spec, generate_fleet, FleetSpec};
use crate::manifest::Ctx;

#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed or inconsistent input; exit 1.
    #[error("{0}")]
    Input(String),
    /// The optimization itself failed; exit 2.
    #[error("{0}")]
    Solve(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Solve(_) => 2,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Input(e.to_string())
    }
}

fn input_err(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {msg}", path.display()))
}

fn solver_err(e: SolverError) -> CliError {
    match e {
        SolverError::InvalidInput(m) => CliError::Input(m),
        e => CliError::Solve(e.to_string()),
    }
}

/// Solver config from a JSON file; missing image scales default to the
/// query's, and present ones must agree with it.
fn solver_config(path: Option<&Path>, scales: &[f64], ctx: &mut Ctx) -> Result<SolverConfig, CliError> {
    let cfg = match path {
        None => SolverConfig {
            image_pyramid_scales: scales.to_vec(),
            ..SolverConfig::default()
        },
        Some(p) => {
            ctx.input(p);
            let mut v: serde_json::Value = io::read_json(p)?;
            let obj = v.as_object_mut().ok_or_else(|| input_err(p, "solver config must be a JSON object"))?;
            obj.entry("image_pyramid_scales").or_insert_with(|| serde_json::json!(scales));
            let cfg: SolverConfig = serde_json::from_value(v).map_err(|e| input_err(p, e))?;
            if cfg.image_pyramid_scales != scales {
                return Err(input_err(p, "image_pyramid_scales differ from the query's image scales"));
            }
            cfg
        }
    };
    cfg.validate().map_err(solver_err)?;
    Ok(cfg)
}

fn load_damping(path: Option<&Path>, levels: usize, ctx: &mut Ctx) -> Result<DampingParams, CliError> {
    match path {
        Some(p) if p.exists() => {
            ctx.input(p);
            let d: DampingParams = io::read_json(p)?;
            d.validate(levels).map_err(|e| input_err(p, e))?;
            Ok(d)
        }
        Some(p) => {
            ctx.warn(format!("damping file {} not found; using theta = 0", p.display()));
            Ok(DampingParams::zeros(levels))
        }
        None => {
            ctx.warn("no damping file given; using theta = 0");
            Ok(DampingParams::zeros(levels))
        }
    }
}

fn load_problem(map: &Path, query: &Path, ctx: &mut Ctx) -> Result<(LoadedMap, LoadedQuery), CliError> {
    ctx.map_inputs(map);
    ctx.query_inputs(query);
    let m = io::load_map(map)?;
    let q = io::load_query(query)?;
    if m.image_scales != q.image_scales {
        return Err(input_err(query, "image scales differ from the map's"));
    }
    if m.camera != q.camera {
        return Err(input_err(query, "camera differs from the map's"));
    }
    Ok((m, q))
}

fn levels_of(q: &LoadedQuery) -> usize {
    q.pyramids.first().map_or(0, |p| p.len())
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    initial_pose: Pose,
    converged: bool,
    final_cost: Option<f64>,
    report: &'a SolveReport,
}

fn write_solve(ctx: &mut Ctx, initial: &Pose, pose: &Pose, report: &SolveReport) -> Result<(), CliError> {
    ctx.write_json("pose.json", pose)?;
    let out = SolveOutput {
        initial_pose: *initial,
        converged: report.converged(),
        final_cost: report.final_cost(),
        report,
    };
    ctx.write_json("report.json", &out)?;
    if !out.converged {
        ctx.warn("iteration budget exhausted before convergence on some level");
    }
    Ok(())
}

pub fn cmd_localize(a: &LocalizeArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let (map, query) = load_problem(&a.map, &a.query, ctx)?;
    ctx.input(&a.prior);
    let prior: Vec<WeightedPose> = io::read_json(&a.prior)?;
    if prior.is_empty() {
        return Err(input_err(&a.prior, "no prior poses"));
    }
    let (pose0, fell_back) = average_or_best(&prior).map_err(|e| input_err(&a.prior, e))?;
    if fell_back {
        ctx.warn("prior rotations are degenerate; starting from the heaviest candidate");
    }
    let cfg = solver_config(a.config.as_deref(), &query.image_scales, ctx)?;
    let damping = load_damping(a.damping.as_deref(), levels_of(&query), ctx)?;
    let (pose, report) = ctx
        .time("optimize", || optimize(&pose0, &map.scene, &query.pyramids, &query.camera, &cfg, &damping))
        .map_err(solver_err)?;
    write_solve(ctx, &pose0, &pose, &report)
}

pub fn cmd_refine(a: &RefineArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let (map, query) = load_problem(&a.map, &a.query, ctx)?;
    ctx.input(&a.pose);
    let pose0: Pose = io::read_json(&a.pose)?;
    let cfg = solver_config(a.config.as_deref(), &query.image_scales, ctx)?;
    let damping = load_damping(a.damping.as_deref(), levels_of(&query), ctx)?;
    let (pose, report) = ctx
        .time("refine", || refine(&pose0, &map.scene, &query.pyramids, &query.camera, &cfg, &damping))
        .map_err(solver_err)?;
    write_solve(ctx, &pose0, &pose, &report)
}

pub fn cmd_fit_damping(a: &FitDampingArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let base = match &a.spec {
        Some(p) => {
            ctx.input(p);
            io::read_json(p)?
        }
        None => default_fleet_spec(),
    };
    let cfg = match &a.config {
        Some(p) => {
            ctx.input(p);
            let c: TrainConfig = io::read_json(p)?;
            if c.solver.image_pyramid_scales != base.image_scales {
                return Err(input_err(p, "solver image scales differ from the fleet spec's"));
            }
            c
        }
        None => TrainConfig {
            solver: SolverConfig {
                image_pyramid_scales: base.image_scales.clone(),
                ..TrainConfig::default().solver
            },
            ..TrainConfig::default()
        },
    };
    cfg.solver.validate().map_err(solver_err)?;
    if a.scenes == 0 || a.per_scene == 0 {
        return Err(CliError::Input("need at least one training scene and sample".into()));
    }
    if !(a.lr.is_finite() && a.max_rotation_deg >= 0.0 && a.max_translation >= 0.0) {
        return Err(CliError::Input("learning rate and motion ranges must be finite and non-negative".into()));
    }
    let fleet = |n: usize| FleetSpec {
        n_scenes: n,
        per_scene: a.per_scene,
        motion: a.motion,
        max_rotation: a.max_rotation_deg.to_radians(),
        max_translation: a.max_translation,
    };
    let scene_err = |e: featalign::scene::SceneError| CliError::Input(format!("fleet spec: {e}"));
    let train = ctx.time("generate", || generate_fleet(&base, &fleet(a.scenes), a.seed, 0)).map_err(scene_err)?;
    let val = generate_fleet(&base, &fleet(a.val_scenes), a.seed, 1 << 32).map_err(scene_err)?;
    let levels = base.pyramid.strides.len();
    let init = match &a.init {
        Some(p) => {
            ctx.input(p);
            let d: DampingParams = io::read_json(p)?;
            d.validate(levels).map_err(|e| input_err(p, e))?;
            d
        }
        None => DampingParams::zeros(levels),
    };
    let fit = ctx
        .time("fit", || fit_damping(&train, &val, &cfg, &init, a.lr, a.steps))
        .map_err(|e| CliError::Solve(e.to_string()))?;
    ctx.write_json("damping.json", &fit.params)?;
    ctx.write_text("history.csv", &io::history_csv(&fit.history))?;
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let mut cfg = SweepConfig {
        n_trials: a.trials,
        max_rotation_deg: a.max_rotation_deg,
        max_translation: a.max_translation,
        rotation_tol_deg: a.rotation_tol_deg,
        translation_tol: a.translation_tol,
        seed: a.seed,
        ..SweepConfig::default()
    };
    if let Some(e) = &a.bin_edges {
        cfg.bin_edges = e.clone();
    }
    cfg.validate().map_err(|e| CliError::Input(e.to_string()))?;
    ctx.scene_inputs(&a.scene);
    let loaded = io::load_scene(&a.scene)?;
    let (map, query) = (&loaded.map, &loaded.query);
    let solver = solver_config(a.config.as_deref(), &query.image_scales, ctx)?;
    let damping = load_damping(a.damping.as_deref(), levels_of(query), ctx)?;
    let prob = SweepProblem {
        scene: &map.scene,
        query: &query.pyramids,
        camera: &query.camera,
        gt: &loaded.manifest.gt_pose,
        diameter: loaded.manifest.diameter,
    };
    let res = ctx
        .time("sweep", || analysis::convergence_sweep(&prob, &solver, &damping, &cfg))
        .map_err(|e| match e {
            AnalysisError::InvalidSweep(_) | AnalysisError::InvalidInput(_) => CliError::Input(e.to_string()),
            e => CliError::Solve(e.to_string()),
        })?;
    ctx.write_text("sweep.csv", &io::sweep_csv(&res))?;
    let mut trials = String::from("initial_error,rotation_error_deg,translation_error,success\n");
    for t in &res.trials {
        trials += &format!(
            "{},{},{},{}\n",
            io::format_f64(t.initial_error),
            io::format_f64(t.rotation_error_deg),
            io::format_f64(t.translation_error),
            t.success as u8
        );
    }
    ctx.write_text("trials.csv", &trials)?;
    let (n, worst) = analysis::rate_inversions(&res.bins);
    if n > 0 {
        ctx.warn(format!("{n} success-rate inversion(s) across bins, largest {:.1} points", 100.0 * worst));
    }
    Ok(())
}

pub fn cmd_basin(a: &BasinArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    ctx.query_inputs(&a.query);
    let q = io::load_query(&a.query)?;
    let s = a.scale.unwrap_or(q.pyramids.len() - 1);
    let pyr = q
        .pyramids
        .get(s)
        .ok_or_else(|| input_err(&a.query, format!("no image scale {s}")))?;
    let px = Vector2::new(a.pixel[0], a.pixel[1]);
    let err = |e: AnalysisError| CliError::Input(e.to_string());
    let desc = analysis::descriptors_at(pyr, px).map_err(err)?;
    let b = ctx.time("basin", || analysis::basin(pyr, &desc, px)).map_err(err)?;
    for (l, scores) in b.levels.iter().enumerate() {
        ctx.write_bytes(&format!("basin_level{l}.pgm"), &io::pgm(b.width, b.height, scores))?;
    }
    ctx.write_bytes("basin_combined.pgm", &io::pgm(b.width, b.height, &b.combined))?;
    Ok(())
}

pub fn cmd_make_scene(a: &MakeSceneArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let mut spec: SceneSpec = match &a.spec {
        Some(p) => {
            ctx.input(p);
            io::read_json(p)?
        }
        None => SceneSpec::default(),
    };
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.n_points {
        spec.n_points = v;
    }
    if let Some(v) = a.field {
        spec.field = v;
    }
    if let Some(v) = a.uncertainty {
        spec.uncertainty = v;
    }
    if let Some(v) = a.query_noise {
        spec.query_noise = v;
    }
    if !(a.prior_rotation_deg >= 0.0 && a.prior_translation >= 0.0) {
        return Err(CliError::Input("prior perturbation magnitudes must be non-negative".into()));
    }
    let scene = ctx
        .time("generate", || Scene::generate(&spec))
        .map_err(|e| CliError::Input(e.to_string()))?;
    for p in io::write_scene(&scene, &ctx.out.clone())? {
        ctx.wrote(p);
    }
    let prior: Vec<WeightedPose> = (0..a.prior_candidates as u64)
        .map(|k| WeightedPose {
            pose: perturb(
                &scene.gt_pose,
                a.prior_rotation_deg.to_radians(),
                a.prior_translation * scene.diameter,
                featalign::scene::derive_seed(spec.seed, 0x5052_0000 + k),
            ),
            weight: 1.0,
        })
        .collect();
    ctx.write_json("prior.json", &prior)?;
    ctx.write_json("gt_pose.json", &scene.gt_pose)?;
    Ok(())
}
