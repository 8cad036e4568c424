use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use featalign::{FieldType, UncertaintyPattern};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "featalign", version, about = "Feature-metric camera localization")]
pub struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "FEATALIGN_THREADS", default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Average a pose prior and run the full coarse-to-fine solve.
    Localize(LocalizeArgs),
    /// Polish a pose on the finest image scale, medium and fine levels only.
    Refine(RefineArgs),
    /// Fit per-level damping on a synthetic training fleet.
    FitDamping(FitDampingArgs),
    /// Success rate against initial reprojection error.
    Sweep(SweepArgs),
    /// Attraction-basin rasters around a seed pixel.
    Basin(BasinArgs),
    /// Generate a synthetic scene bundle.
    MakeScene(MakeSceneArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Localize(_) => "localize",
            Command::Refine(_) => "refine",
            Command::FitDamping(_) => "fit-damping",
            Command::Sweep(_) => "sweep",
            Command::Basin(_) => "basin",
            Command::MakeScene(_) => "make-scene",
        }
    }

    pub fn out(&self) -> &PathBuf {
        match self {
            Command::Localize(a) => &a.out,
            Command::Refine(a) => &a.out,
            Command::FitDamping(a) => &a.out,
            Command::Sweep(a) => &a.out,
            Command::Basin(a) => &a.out,
            Command::MakeScene(a) => &a.out,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct LocalizeArgs {
    /// Map manifest (JSON).
    #[arg(long)]
    pub map: PathBuf,
    /// Query manifest (JSON).
    #[arg(long)]
    pub query: PathBuf,
    /// JSON list of weighted candidate poses.
    #[arg(long)]
    pub prior: PathBuf,
    /// Solver config (JSON); image scales default to the query's.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Damping parameters (JSON); θ = 0 when absent.
    #[arg(long)]
    pub damping: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RefineArgs {
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub query: PathBuf,
    /// Starting pose (JSON).
    #[arg(long)]
    pub pose: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub damping: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    /// Camera x/z translation only.
    Planar,
    /// Random rotation and translation.
    Full,
}

#[derive(Debug, Args, Serialize)]
pub struct FitDampingArgs {
    /// Base scene spec (JSON) for the fleet; seeds are derived per scene.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Training config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Initial damping parameters (JSON); θ = 0 when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub scenes: usize,
    #[arg(long, default_value_t = 1)]
    pub per_scene: usize,
    #[arg(long, default_value_t = 0)]
    pub val_scenes: usize,
    #[arg(long, value_enum, default_value_t = Motion::Full)]
    pub motion: Motion,
    /// Rotation magnitude for full motion, degrees.
    #[arg(long, default_value_t = 3.0)]
    pub max_rotation_deg: f64,
    /// Translation range in scene units (ball radius, or ± per axis for planar).
    #[arg(long, default_value_t = 1.0)]
    pub max_translation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 3.0)]
    pub lr: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    /// Scene manifest (JSON) from make-scene.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub damping: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub trials: usize,
    #[arg(long, default_value_t = 90.0)]
    pub max_rotation_deg: f64,
    /// Fraction of the scene diameter.
    #[arg(long, default_value_t = 0.5)]
    pub max_translation: f64,
    /// Comma-separated, strictly increasing bin edges in pixels; `inf` allowed.
    #[arg(long, value_delimiter = ',')]
    pub bin_edges: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.5)]
    pub rotation_tol_deg: f64,
    /// Fraction of the scene diameter.
    #[arg(long, default_value_t = 0.01)]
    pub translation_tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BasinArgs {
    /// Query manifest (JSON).
    #[arg(long)]
    pub query: PathBuf,
    /// Image scale index; defaults to the finest.
    #[arg(long)]
    pub scale: Option<usize>,
    /// Seed pixel at the chosen image scale.
    #[arg(long, num_args = 2, value_names = ["X", "Y"], required = true)]
    pub pixel: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MakeSceneArgs {
    /// Scene spec (JSON); flags below override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_points: Option<usize>,
    #[arg(long, value_parser = parse_kebab::<FieldType>)]
    pub field: Option<FieldType>,
    #[arg(long, value_parser = parse_kebab::<UncertaintyPattern>)]
    pub uncertainty: Option<UncertaintyPattern>,
    #[arg(long)]
    pub query_noise: Option<f64>,
    /// Number of perturbed ground-truth candidates written to prior.json.
    #[arg(long, default_value_t = 3)]
    pub prior_candidates: usize,
    #[arg(long, default_value_t = 3.0)]
    pub prior_rotation_deg: f64,
    /// Fraction of the scene diameter.
    #[arg(long, default_value_t = 0.03)]
    pub prior_translation: f64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_kebab<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|e| e.to_string())
}
