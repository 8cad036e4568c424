//! File formats: FMAP feature blobs, f32 point blobs, JSON manifests with
//! full-precision floats, CSV tables and PGM rasters.
//!
//! Errors name the file and, when known, the byte offset of the problem.

use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::analysis::SweepResult;
use crate::features::{FeatureLevel, FeaturePyramid, ReferenceView};
use crate::geometry::{Camera, Point3, Pose};
use crate::learning::HistoryRow;
use crate::scene::{Scene, SceneSpec};
use crate::solver::ScenePoints;

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const FMAP_VERSION: u32 = 1;

#[derive(Debug)]
pub struct IoError {
    pub path: PathBuf,
    pub offset: Option<u64>,
    pub message: String,
}

impl IoError {
    pub fn new(path: &Path, offset: Option<u64>, message: impl Into<String>) -> Self {
        Self {
            path: path.to_path_buf(),
            offset,
            message: message.into(),
        }
    }
}

impl fmt::Display for IoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.offset {
            Some(o) => write!(f, "{}: byte {}: {}", self.path.display(), o, self.message),
            None => write!(f, "{}: {}", self.path.display(), self.message),
        }
    }
}

impl std::error::Error for IoError {}

/// A decoding failure at a byte offset, before a path is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeError {
    pub offset: u64,
    pub message: String,
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "byte {}: {}", self.offset, self.message)
    }
}

impl std::error::Error for DecodeError {}

impl DecodeError {
    fn at(offset: usize, message: impl Into<String>) -> Self {
        Self {
            offset: offset as u64,
            message: message.into(),
        }
    }

    pub fn in_file(self, path: &Path) -> IoError {
        IoError::new(path, Some(self.offset), self.message)
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|e| IoError::new(path, None, e.to_string()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| IoError::new(dir, None, e.to_string()))?;
    }
    std::fs::write(path, bytes).map_err(|e| IoError::new(path, None, e.to_string()))
}

// ---------------------------------------------------------------- FMAP

pub fn encode_fmap(pyramid: &FeaturePyramid) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FMAP_MAGIC);
    out.extend_from_slice(&FMAP_VERSION.to_le_bytes());
    out.extend_from_slice(&(pyramid.len() as u32).to_le_bytes());
    for lvl in pyramid.levels() {
        for v in [lvl.width(), lvl.height(), lvl.dim()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(lvl.stride() as f32).to_le_bytes());
        for x in lvl.features().iter().chain(lvl.uncertainty()) {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < n {
            return Err(DecodeError::at(self.buf.len(), format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32, DecodeError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, DecodeError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| DecodeError::at(self.pos, "size overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

pub fn decode_fmap(bytes: &[u8]) -> Result<FeaturePyramid, DecodeError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != FMAP_MAGIC {
        return Err(DecodeError::at(0, "bad magic, expected FMAP"));
    }
    let vpos = r.pos;
    let version = r.u32("version")?;
    if version != FMAP_VERSION {
        return Err(DecodeError::at(vpos, format!("unsupported version {version}")));
    }
    let n_levels = r.u32("level count")? as usize;
    if n_levels == 0 {
        return Err(DecodeError::at(8, "no levels"));
    }
    let mut levels = Vec::with_capacity(n_levels.min(64));
    for l in 0..n_levels {
        let start = r.pos;
        let w = r.u32("level header")? as usize;
        let h = r.u32("level header")? as usize;
        let d = r.u32("level header")? as usize;
        let stride = r.f32("level header")? as f64;
        let n = w
            .checked_mul(h)
            .and_then(|x| x.checked_mul(d))
            .ok_or_else(|| DecodeError::at(start, "level size overflow"))?;
        let feats = r.f32s(n, "features")?;
        let upos = r.pos;
        let unc = r.f32s(w * h, "uncertainties")?;
        let lvl = FeatureLevel::new(w, h, d, stride, feats, unc).map_err(|e| {
            let at = if matches!(e, crate::features::FeatureError::NegativeUncertainty) { upos } else { start };
            DecodeError::at(at, format!("level {l}: {e}"))
        })?;
        levels.push(lvl);
    }
    if r.pos != bytes.len() {
        return Err(DecodeError::at(r.pos, "trailing bytes"));
    }
    FeaturePyramid::new(levels).map_err(|e| DecodeError::at(8, e.to_string()))
}

pub fn write_fmap(path: &Path, pyramid: &FeaturePyramid) -> Result<(), IoError> {
    write_bytes(path, &encode_fmap(pyramid))
}

pub fn read_fmap(path: &Path) -> Result<FeaturePyramid, IoError> {
    decode_fmap(&read_bytes(path)?).map_err(|e| e.in_file(path))
}

// ---------------------------------------------------------------- points

pub fn encode_points(points: &[Point3]) -> Vec<u8> {
    points
        .iter()
        .flat_map(|p| p.iter().flat_map(|x| (*x as f32).to_le_bytes()).collect::<Vec<u8>>())
        .collect()
}

pub fn decode_points(bytes: &[u8]) -> Result<Vec<Point3>, DecodeError> {
    if !bytes.len().is_multiple_of(12) {
        return Err(DecodeError::at(bytes.len() - bytes.len() % 12, "point blob is not a whole number of f32 triplets"));
    }
    bytes
        .chunks_exact(12)
        .enumerate()
        .map(|(i, c)| {
            let f = |k: usize| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
            let p = Point3::new(f(0), f(1), f(2));
            if p.iter().all(|x| x.is_finite()) {
                Ok(p)
            } else {
                Err(DecodeError::at(12 * i, "non-finite coordinate"))
            }
        })
        .collect()
}

// ---------------------------------------------------------------- JSON

/// Pretty JSON with every float written with 17 significant digits.
pub struct PreciseFormatter<'a>(PrettyFormatter<'a>);

impl Default for PreciseFormatter<'_> {
    fn default() -> Self {
        Self(PrettyFormatter::with_indent(b"  "))
    }
}

impl Formatter for PreciseFormatter<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{}", format_f64(value))
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        write!(w, "{}", format_f64(value as f64))
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PreciseFormatter::default());
    value.serialize(&mut ser).expect("serializing to memory cannot fail");
    buf.push(b'\n');
    String::from_utf8(buf).expect("JSON is UTF-8")
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    write_bytes(path, to_json(value).as_bytes())
}

/// Byte offset of a 1-based (line, column) position.
fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)) as u64
}

pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T, DecodeError> {
    serde_json::from_str(text).map_err(|e| DecodeError {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| IoError::new(path, Some(e.valid_up_to() as u64), "invalid UTF-8"))?;
    parse_json(text).map_err(|e| e.in_file(path))
}

// ---------------------------------------------------------------- manifests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub pose: Pose,
    /// FMAP paths, one per image scale, relative to the manifest.
    pub features: Vec<String>,
}

/// Reference views and 3D points making up a map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapManifest {
    pub camera: Camera,
    pub image_scales: Vec<f64>,
    /// Binary f32 triplets, relative to the manifest.
    pub points: String,
    pub references: Vec<ReferenceEntry>,
    /// Observations kept per point when aggregating descriptors.
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryManifest {
    pub camera: Camera,
    pub image_scales: Vec<f64>,
    /// FMAP paths, one per image scale, relative to the manifest.
    pub features: Vec<String>,
}

/// A generated scene on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub spec: SceneSpec,
    pub gt_pose: Pose,
    pub diameter: f64,
    pub map: String,
    pub query: String,
}

fn rel(base: &Path, p: &str) -> PathBuf {
    base.parent().unwrap_or(Path::new(".")).join(p)
}

pub struct LoadedMap {
    pub scene: ScenePoints,
    pub camera: Camera,
    pub image_scales: Vec<f64>,
}

/// Loads references and aggregates point descriptors.
pub fn load_map(path: &Path) -> Result<LoadedMap, IoError> {
    let m: MapManifest = read_json(path)?;
    m.camera
        .validate()
        .map_err(|e| IoError::new(path, None, format!("camera: {e}")))?;
    if m.image_scales.is_empty() {
        return Err(IoError::new(path, None, "no image scales"));
    }
    let pts_path = rel(path, &m.points);
    let points = decode_points(&read_bytes(&pts_path)?).map_err(|e| e.in_file(&pts_path))?;
    let mut pyramids = Vec::with_capacity(m.references.len());
    for r in &m.references {
        if r.features.len() != m.image_scales.len() {
            return Err(IoError::new(path, None, "reference feature count differs from image scale count"));
        }
        let p: Vec<FeaturePyramid> = r
            .features
            .iter()
            .map(|f| read_fmap(&rel(path, f)))
            .collect::<Result<_, _>>()?;
        pyramids.push(p);
    }
    let per_scale: Vec<Vec<ReferenceView<'_>>> = m
        .image_scales
        .iter()
        .enumerate()
        .map(|(s, &scale)| {
            m.references
                .iter()
                .zip(&pyramids)
                .map(|(r, p)| ReferenceView {
                    pyramid: &p[s],
                    pose: r.pose,
                    camera: m.camera.scaled(scale),
                })
                .collect()
        })
        .collect();
    let (scene, _) = ScenePoints::from_references(points, &per_scale, m.top_k)
        .map_err(|e| IoError::new(path, None, format!("no usable map points: {e}")))?;
    Ok(LoadedMap {
        scene,
        camera: m.camera,
        image_scales: m.image_scales,
    })
}

pub struct LoadedQuery {
    pub pyramids: Vec<FeaturePyramid>,
    pub camera: Camera,
    pub image_scales: Vec<f64>,
}

pub fn load_query(path: &Path) -> Result<LoadedQuery, IoError> {
    let m: QueryManifest = read_json(path)?;
    m.camera
        .validate()
        .map_err(|e| IoError::new(path, None, format!("camera: {e}")))?;
    if m.features.len() != m.image_scales.len() || m.features.is_empty() {
        return Err(IoError::new(path, None, "need one feature file per image scale"));
    }
    let pyramids = m
        .features
        .iter()
        .map(|f| read_fmap(&rel(path, f)))
        .collect::<Result<_, _>>()?;
    Ok(LoadedQuery {
        pyramids,
        camera: m.camera,
        image_scales: m.image_scales,
    })
}

/// Writes a scene bundle into `dir`; returns the written paths, scene
/// manifest first.
pub fn write_scene(scene: &Scene, dir: &Path) -> Result<Vec<PathBuf>, IoError> {
    let scale_tag = |s: usize| format!("s{s}");
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<String, IoError> {
        let p = dir.join(&name);
        write_bytes(&p, &bytes)?;
        written.push(p);
        Ok(name)
    };
    let points = put("points.bin".into(), encode_points(&scene.points))?;
    let mut references = Vec::new();
    for (i, r) in scene.references.iter().enumerate() {
        let features = r
            .pyramids
            .iter()
            .enumerate()
            .map(|(s, p)| put(format!("ref{i}_{}.fmap", scale_tag(s)), encode_fmap(p)))
            .collect::<Result<_, _>>()?;
        references.push(ReferenceEntry { pose: r.pose, features });
    }
    let query_files = scene
        .query
        .iter()
        .enumerate()
        .map(|(s, p)| put(format!("query_{}.fmap", scale_tag(s)), encode_fmap(p)))
        .collect::<Result<_, _>>()?;
    let map = MapManifest {
        camera: scene.camera,
        image_scales: scene.spec.image_scales.clone(),
        points,
        references,
        top_k: scene.references.len(),
    };
    let query = QueryManifest {
        camera: scene.camera,
        image_scales: scene.spec.image_scales.clone(),
        features: query_files,
    };
    let manifest = SceneManifest {
        spec: scene.spec.clone(),
        gt_pose: scene.gt_pose,
        diameter: scene.diameter,
        map: "map.json".into(),
        query: "query.json".into(),
    };
    put("map.json".into(), to_json(&map).into_bytes())?;
    put("query.json".into(), to_json(&query).into_bytes())?;
    let mp = dir.join("scene.json");
    write_bytes(&mp, to_json(&manifest).as_bytes())?;
    written.insert(0, mp);
    Ok(written)
}

pub struct LoadedScene {
    pub manifest: SceneManifest,
    pub map: LoadedMap,
    pub query: LoadedQuery,
}

pub fn load_scene(path: &Path) -> Result<LoadedScene, IoError> {
    let manifest: SceneManifest = read_json(path)?;
    let map = load_map(&rel(path, &manifest.map))?;
    let query = load_query(&rel(path, &manifest.query))?;
    Ok(LoadedScene { manifest, map, query })
}

// ---------------------------------------------------------------- tables and rasters

pub fn sweep_csv(result: &SweepResult) -> String {
    let mut s = String::from("bin_lo,bin_hi,trials,successes,rate\n");
    for b in &result.bins {
        let rate = b.rate().map(format_f64).unwrap_or_default();
        s += &format!("{},{},{},{},{}\n", format_f64(b.lo), format_f64(b.hi), b.trials, b.successes, rate);
    }
    s
}

pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut s = String::from("step,train_loss,val_loss\n");
    for h in history {
        let val = if h.val_loss.is_nan() { String::new() } else { format_f64(h.val_loss) };
        s += &format!("{},{},{}\n", h.step, format_f64(h.train_loss), val);
    }
    s
}

/// Binary PGM of scores in `[0, 1]`, scaled to 0–255.
pub fn pgm(width: usize, height: usize, scores: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(scores.iter().map(|s| (s.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    write_bytes(path, text.as_bytes())
}

pub fn write_binary(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    write_bytes(path, bytes)
}
