//! Multi-level feature and uncertainty grids, sub-pixel lookup, and
//! confidence-weighted aggregation of reference descriptors per 3D point.
//!
//! Cell `(i, j)` of a level with stride `s` is centered at full-resolution
//! pixel `((i + 0.5)·s − 0.5, (j + 0.5)·s − 0.5)`.

use nalgebra::{DVector, Dyn, OMatrix, Vector2, U2};
use thiserror::Error;

use crate::geometry::{project, transform, Camera, Point3, Pose};
use crate::real::Real;

/// Lookups closer than this to the image border (full-res pixels) are invalid.
pub const BORDER_MARGIN: f64 = 2.0;

/// Cells with a smaller feature norm are left untouched by normalization.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("level has {got} values, expected {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("invalid level shape: {0}")]
    BadShape(String),
    #[error("uncertainty must be finite and non-negative")]
    NegativeUncertainty,
    #[error("pyramid strides must be strictly decreasing from coarse to fine")]
    StrideOrder,
    #[error("pyramid has no levels")]
    EmptyPyramid,
    #[error("no point has a valid reference observation")]
    EmptyModel,
}

/// One level of a feature pyramid: `height × width × dim` features stored
/// row-major with channels last, plus a `height × width` uncertainty grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    width: usize,
    height: usize,
    dim: usize,
    stride: f64,
    features: Vec<f64>,
    uncertainty: Vec<f64>,
}

impl FeatureLevel {
    pub fn new(
        width: usize,
        height: usize,
        dim: usize,
        stride: f64,
        features: Vec<f64>,
        uncertainty: Vec<f64>,
    ) -> Result<Self, FeatureError> {
        if width == 0 || height == 0 || dim == 0 {
            return Err(FeatureError::BadShape(format!("{width}x{height}x{dim}")));
        }
        if !(stride.is_finite() && stride > 0.0) {
            return Err(FeatureError::BadShape(format!("stride {stride}")));
        }
        if features.len() != width * height * dim {
            return Err(FeatureError::SizeMismatch {
                expected: width * height * dim,
                got: features.len(),
            });
        }
        if uncertainty.len() != width * height {
            return Err(FeatureError::SizeMismatch {
                expected: width * height,
                got: uncertainty.len(),
            });
        }
        if uncertainty.iter().any(|u| !(u.is_finite() && *u >= 0.0)) {
            return Err(FeatureError::NegativeUncertainty);
        }
        Ok(Self {
            width,
            height,
            dim,
            stride,
            features,
            uncertainty,
        })
    }

    /// A level with zero uncertainty everywhere.
    pub fn from_features(width: usize, height: usize, dim: usize, stride: f64, features: Vec<f64>) -> Result<Self, FeatureError> {
        Self::new(width, height, dim, stride, features, vec![0.0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stride(&self) -> f64 {
        self.stride
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn uncertainty(&self) -> &[f64] {
        &self.uncertainty
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let o = (j * self.width + i) * self.dim;
        &self.features[o..o + self.dim]
    }

    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = (j * self.width + i) * self.dim;
        &mut self.features[o..o + self.dim]
    }

    pub fn cell_uncertainty(&self, i: usize, j: usize) -> f64 {
        self.uncertainty[j * self.width + i]
    }

    pub fn set_cell_uncertainty(&mut self, i: usize, j: usize, u: f64) {
        self.uncertainty[j * self.width + i] = u.max(0.0);
    }

    /// Full-resolution pixel at the center of cell `(i, j)`.
    pub fn cell_center(&self, i: usize, j: usize) -> Vector2<f64> {
        Vector2::new(
            (i as f64 + 0.5) * self.stride - 0.5,
            (j as f64 + 0.5) * self.stride - 0.5,
        )
    }

    /// Extent of the full-resolution image covered by this level.
    pub fn image_size(&self) -> (f64, f64) {
        (self.width as f64 * self.stride, self.height as f64 * self.stride)
    }

    pub fn normalize(&mut self) {
        for cell in self.features.chunks_exact_mut(self.dim) {
            let n = cell.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n >= NORM_FLOOR {
                cell.iter_mut().for_each(|x| *x /= n);
            } else {
                cell.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Bilinear lookup writing the feature and its gradient with respect to
    /// full-resolution pixel coordinates into caller buffers.
    ///
    /// Returns `None` outside the valid region. Otherwise returns the
    /// interpolated uncertainty and the containing cell.
    pub fn sample_into<T: Real>(
        &self,
        p: &Vector2<T>,
        margin: f64,
        feature: &mut [T],
        grad: &mut [[T; 2]],
    ) -> Option<(T, [usize; 2])> {
        let (px, py) = (p.x.value(), p.y.value());
        let (iw, ih) = self.image_size();
        if !(px >= margin && py >= margin && px <= iw - 1.0 - margin && py <= ih - 1.0 - margin) {
            return None;
        }
        let (x0, ax, dax) = axis_weights(p.x, self.stride, self.width);
        let (y0, ay, day) = axis_weights(p.y, self.stride, self.height);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let one = T::one();
        let f00 = self.cell(x0, y0);
        let f10 = self.cell(x1, y0);
        let f01 = self.cell(x0, y1);
        let f11 = self.cell(x1, y1);
        let w00 = (one - ax) * (one - ay);
        let w10 = ax * (one - ay);
        let w01 = (one - ax) * ay;
        let w11 = ax * ay;
        for c in 0..self.dim {
            let (a, b, d, e) = (T::lit(f00[c]), T::lit(f10[c]), T::lit(f01[c]), T::lit(f11[c]));
            feature[c] = w00 * a + w10 * b + w01 * d + w11 * e;
            grad[c][0] = ((one - ay) * (b - a) + ay * (e - d)) * dax;
            grad[c][1] = ((one - ax) * (d - a) + ax * (e - b)) * day;
        }
        let u = |i, j| T::lit(self.cell_uncertainty(i, j));
        let unc = w00 * u(x0, y0) + w10 * u(x1, y0) + w01 * u(x0, y1) + w11 * u(x1, y1);
        Some((unc, [x0, y0]))
    }
}

/// Grid index, fractional weight and `d(weight)/d(pixel)` along one axis.
/// Coordinates beyond the outermost cell centers are clamped.
fn axis_weights<T: Real>(x: T, stride: f64, n: usize) -> (usize, T, T) {
    let inv = 1.0 / stride;
    let u = (x + T::lit(0.5)) * T::lit(inv) - T::lit(0.5);
    let uv = u.value();
    let hi = (n - 1) as f64;
    if n == 1 {
        return (0, T::zero(), T::zero());
    }
    if uv <= 0.0 {
        return (0, T::zero(), T::zero());
    }
    if uv >= hi {
        return (n - 2, T::one(), T::zero());
    }
    let i0 = (uv.floor() as usize).min(n - 2);
    (i0, u - T::lit(i0 as f64), T::lit(inv))
}

/// Result of [`interpolate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Lookup<T: Real> {
    pub feature: DVector<T>,
    /// `dim × 2`, derivative with respect to full-resolution pixels.
    pub grad: OMatrix<T, Dyn, U2>,
    pub uncertainty: T,
    pub valid: bool,
}

/// Bilinear lookup with the default border margin.
pub fn interpolate<T: Real>(level: &FeatureLevel, p: &Vector2<T>) -> Lookup<T> {
    interpolate_with_margin(level, p, BORDER_MARGIN)
}

pub fn interpolate_with_margin<T: Real>(level: &FeatureLevel, p: &Vector2<T>, margin: f64) -> Lookup<T> {
    let d = level.dim();
    let mut feature = vec![T::zero(); d];
    let mut grad = vec![[T::zero(); 2]; d];
    match level.sample_into(p, margin, &mut feature, &mut grad) {
        Some((u, _)) => Lookup {
            feature: DVector::from_vec(feature),
            grad: OMatrix::<T, Dyn, U2>::from_fn(d, |r, c| grad[r][c]),
            uncertainty: u,
            valid: true,
        },
        None => Lookup {
            feature: DVector::zeros(d),
            grad: OMatrix::<T, Dyn, U2>::zeros(d),
            uncertainty: T::zero(),
            valid: false,
        },
    }
}

pub fn normalize_channels(mut level: FeatureLevel) -> FeatureLevel {
    level.normalize();
    level
}

/// Per-location confidence `1 / (1 + U)`.
pub fn confidence_from_uncertainty<T: Real>(u: T) -> T {
    T::one() / (T::one() + u)
}

/// Ordered feature levels, coarse to fine.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureLevel>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureLevel>) -> Result<Self, FeatureError> {
        if levels.is_empty() {
            return Err(FeatureError::EmptyPyramid);
        }
        if levels.windows(2).any(|w| w[1].stride >= w[0].stride) {
            return Err(FeatureError::StrideOrder);
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[FeatureLevel] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [FeatureLevel] {
        &mut self.levels
    }

    pub fn level(&self, l: usize) -> &FeatureLevel {
        &self.levels[l]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn normalize(&mut self) {
        self.levels.iter_mut().for_each(FeatureLevel::normalize);
    }
}

/// Aggregated reference descriptors of every point at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelDescriptors {
    dim: usize,
    descriptors: Vec<f64>,
    confidence: Vec<f64>,
    present: Vec<bool>,
}

impl LevelDescriptors {
    pub fn empty(n: usize, dim: usize) -> Self {
        Self {
            dim,
            descriptors: vec![0.0; n * dim],
            confidence: vec![0.0; n],
            present: vec![false; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    /// Descriptor and confidence of point `i`, if it was observed.
    pub fn get(&self, i: usize) -> Option<(&[f64], f64)> {
        self.present[i].then(|| (&self.descriptors[i * self.dim..(i + 1) * self.dim], self.confidence[i]))
    }

    pub fn set(&mut self, i: usize, descriptor: &[f64], confidence: f64) {
        self.descriptors[i * self.dim..(i + 1) * self.dim].copy_from_slice(descriptor);
        self.confidence[i] = confidence.clamp(0.0, 1.0);
        self.present[i] = true;
    }

    fn select(&self, keep: &[usize]) -> Self {
        let mut out = Self::empty(keep.len(), self.dim);
        for (k, &i) in keep.iter().enumerate() {
            if let Some((d, c)) = self.get(i) {
                out.set(k, d, c);
            }
        }
        out
    }
}

/// Per-point reference descriptors for each level of a pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatures {
    pub levels: Vec<LevelDescriptors>,
}

impl PointFeatures {
    pub fn num_points(&self) -> usize {
        self.levels.first().map_or(0, |l| l.len())
    }

    pub fn select(&self, keep: &[usize]) -> Self {
        Self {
            levels: self.levels.iter().map(|l| l.select(keep)).collect(),
        }
    }

    /// Whether point `i` has a descriptor at any level.
    pub fn observed(&self, i: usize) -> bool {
        self.levels.iter().any(|l| l.present[i])
    }
}

/// A posed reference image.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceView<'a> {
    pub pyramid: &'a FeaturePyramid,
    pub pose: Pose,
    pub camera: Camera,
}

/// Confidence-weighted descriptor of every input point, keeping all points
/// (unobserved ones are marked absent).
pub fn aggregate_all(points: &[Point3], refs: &[ReferenceView<'_>], top_k: usize, margin: f64) -> PointFeatures {
    let n_levels = refs.iter().map(|r| r.pyramid.len()).min().unwrap_or(0);
    let mut levels = Vec::with_capacity(n_levels);
    for l in 0..n_levels {
        let dim = refs[0].pyramid.level(l).dim();
        let mut out = LevelDescriptors::empty(points.len(), dim);
        let mut feat = vec![0.0; dim];
        let mut grad = vec![[0.0; 2]; dim];
        let mut obs: Vec<(f64, Vec<f64>)> = Vec::with_capacity(refs.len());
        for (i, p) in points.iter().enumerate() {
            obs.clear();
            for r in refs {
                let level = r.pyramid.level(l);
                if level.dim() != dim {
                    continue;
                }
                let Ok(px) = project(&r.camera, &transform(&r.pose, p)) else {
                    continue;
                };
                if !r.camera.contains(&px, margin) {
                    continue;
                }
                if let Some((u, _)) = level.sample_into(&px, margin, &mut feat, &mut grad) {
                    obs.push((confidence_from_uncertainty(u), feat.clone()));
                }
            }
            if obs.is_empty() {
                continue;
            }
            // stable: ties keep reference order
            obs.sort_by(|a, b| b.0.total_cmp(&a.0));
            obs.truncate(top_k.max(1));
            let wsum: f64 = obs.iter().map(|o| o.0).sum();
            let conf = obs[0].0;
            let mut d = vec![0.0; dim];
            if wsum > 0.0 {
                for (w, f) in &obs {
                    d.iter_mut().zip(f).for_each(|(a, b)| *a += w * b);
                }
                d.iter_mut().for_each(|a| *a /= wsum);
            } else {
                // all observations fully uncertain: plain mean
                for (_, f) in &obs {
                    d.iter_mut().zip(f).for_each(|(a, b)| *a += b);
                }
            }
            let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < NORM_FLOOR {
                continue;
            }
            d.iter_mut().for_each(|x| *x /= n);
            out.set(i, &d, conf);
        }
        levels.push(out);
    }
    PointFeatures { levels }
}

/// Aggregates reference observations per point and level, omitting points
/// without any valid observation. Returns the indices of the kept points.
pub fn aggregate_reference(
    points: &[Point3],
    refs: &[ReferenceView<'_>],
    top_k: usize,
) -> Result<(Vec<usize>, PointFeatures), FeatureError> {
    let all = aggregate_all(points, refs, top_k, BORDER_MARGIN);
    let keep: Vec<usize> = (0..points.len()).filter(|&i| all.observed(i)).collect();
    if keep.is_empty() {
        return Err(FeatureError::EmptyModel);
    }
    Ok((keep.clone(), all.select(&keep)))
}
