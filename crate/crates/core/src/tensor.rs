//! Domain tensors and the CMTF binary container.
//!
//! Layout of a CMTF file (all integers little-endian):
//!
//! ```text
//! "CMTF" | version u8 = 1 | dtype u8 (0=f32, 1=f64, 2=u16) | rank u8 | dims u32[rank] | payload
//! ```
//!
//! The payload is row-major. Missing real values are stored as a canonical
//! quiet NaN; ignored label pixels are stored as [`IGNORE`].

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value for pixels that carry no supervision.
pub const IGNORE: u16 = u16::MAX;

pub const MAGIC: &[u8; 4] = b"CMTF";
pub const VERSION: u8 = 1;

/// Tolerance on per-pixel class sums for a map to count as normalized.
pub const NORMALIZATION_TOL: f64 = 1e-6;

const CANONICAL_NAN_BITS: u64 = 0x7ff8_0000_0000_0000;
const CANONICAL_NAN_BITS_F32: u32 = 0x7fc0_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
    U16 = 2,
}

impl Dtype {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::U16),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U16 => 2,
        }
    }
}

/// Untyped contents of a CMTF file.
#[derive(Debug, Clone)]
pub enum RawTensor {
    F32 { dims: Vec<usize>, data: Vec<f32> },
    F64 { dims: Vec<usize>, data: Vec<f64> },
    U16 { dims: Vec<usize>, data: Vec<u16> },
}

impl RawTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            RawTensor::F32 { dims, .. } | RawTensor::F64 { dims, .. } | RawTensor::U16 { dims, .. } => {
                dims
            }
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            RawTensor::F32 { .. } => Dtype::F32,
            RawTensor::F64 { .. } => Dtype::F64,
            RawTensor::U16 { .. } => Dtype::U16,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let dims = self.dims();
        let rank = u8::try_from(dims.len())
            .map_err(|_| Error::Malformed(format!("rank {} exceeds 255", dims.len())))?;
        let count = element_count(dims)?;
        let mut out = Vec::with_capacity(8 + 4 * dims.len() + count * self.dtype().width());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dtype() as u8);
        out.push(rank);
        for &d in dims {
            let d = u32::try_from(d).map_err(|_| Error::Malformed(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match self {
            RawTensor::F32 { data, .. } => {
                check_len(data.len(), count)?;
                for v in data {
                    let bits = if v.is_nan() { CANONICAL_NAN_BITS_F32 } else { v.to_bits() };
                    out.extend_from_slice(&bits.to_le_bytes());
                }
            }
            RawTensor::F64 { data, .. } => {
                check_len(data.len(), count)?;
                for v in data {
                    let bits = if v.is_nan() { CANONICAL_NAN_BITS } else { v.to_bits() };
                    out.extend_from_slice(&bits.to_le_bytes());
                }
            }
            RawTensor::U16 { data, .. } => {
                check_len(data.len(), count)?;
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 7 {
            return Err(Error::Malformed("truncated header".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::BadVersion(bytes[4]));
        }
        let dtype = Dtype::from_code(bytes[5])?;
        let rank = bytes[6] as usize;
        let header_len = 7 + 4 * rank;
        if bytes.len() < header_len {
            return Err(Error::Malformed("truncated dimensions".into()));
        }
        let dims: Vec<usize> = bytes[7..header_len]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let count = element_count(&dims)?;
        let payload_len = count
            .checked_mul(dtype.width())
            .ok_or_else(|| Error::Malformed("dimension overflow".into()))?;
        let payload = &bytes[header_len..];
        if payload.len() != payload_len {
            return Err(Error::Malformed(format!(
                "payload is {} bytes, header declares {}",
                payload.len(),
                payload_len
            )));
        }
        Ok(match dtype {
            Dtype::F32 => RawTensor::F32 {
                dims,
                data: payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            },
            Dtype::F64 => RawTensor::F64 {
                dims,
                data: payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            },
            Dtype::U16 => RawTensor::U16 {
                dims,
                data: payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            },
        })
    }

    fn into_f64(self, what: &str, rank: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let (dims, data) = match self {
            RawTensor::F64 { dims, data } => (dims, data),
            RawTensor::F32 { dims, data } => (dims, data.into_iter().map(f64::from).collect()),
            RawTensor::U16 { .. } => {
                return Err(Error::Validation(format!("{what} needs a real-valued tensor")))
            }
        };
        if dims.len() != rank {
            return Err(Error::Validation(format!(
                "{what} needs rank {rank}, found rank {}",
                dims.len()
            )));
        }
        Ok((dims, data))
    }

    fn into_u16(self, what: &str, rank: usize) -> Result<(Vec<usize>, Vec<u16>)> {
        match self {
            RawTensor::U16 { dims, data } if dims.len() == rank => Ok((dims, data)),
            RawTensor::U16 { dims, .. } => Err(Error::Validation(format!(
                "{what} needs rank {rank}, found rank {}",
                dims.len()
            ))),
            _ => Err(Error::Validation(format!("{what} needs a u16 tensor"))),
        }
    }
}

fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Malformed("dimension overflow".into()))
}

fn check_len(actual: usize, expected: usize) -> Result<()> {
    if actual == expected {
        Ok(())
    } else {
        Err(Error::Malformed(format!(
            "payload has {actual} elements, dims declare {expected}"
        )))
    }
}

/// Conversion between a typed tensor and its on-disk form.
pub trait TensorFile: Sized {
    fn to_raw(&self) -> RawTensor;
    fn from_raw(raw: RawTensor) -> Result<Self>;
}

impl TensorFile for RawTensor {
    fn to_raw(&self) -> RawTensor {
        self.clone()
    }

    fn from_raw(raw: RawTensor) -> Result<Self> {
        Ok(raw)
    }
}

/// Writes `bytes` through a temporary sibling file and renames it into place.
pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor<T: TensorFile>(path: impl AsRef<Path>, tensor: &T) -> Result<()> {
    let bytes = tensor.to_raw().encode()?;
    write_file_atomic(path.as_ref(), &bytes)
}

pub fn read_tensor<T: TensorFile>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    T::from_raw(RawTensor::decode(&bytes)?)
}

/// Per-class probabilities for one image, indexed `[class, row, col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    classes: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl ProbabilityMap {
    pub fn new(classes: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Validation(format!("need at least 2 classes, got {classes}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::Validation("probability map must be non-empty".into()));
        }
        if values.len() != classes * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {classes}x{height}x{width} map",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Validation(format!("probability {bad} outside [0,1]")));
        }
        let plane = height * width;
        let normalized = (0..plane).all(|p| {
            let sum: f64 = (0..classes).map(|j| values[j * plane + p]).sum();
            (sum - 1.0).abs() <= NORMALIZATION_TOL
        });
        Ok(Self {
            classes,
            height,
            width,
            values,
            normalized,
        })
    }

    /// Like [`ProbabilityMap::new`] but also requires per-pixel sums of one.
    pub fn new_normalized(classes: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let map = Self::new(classes, height, width, values)?;
        if !map.normalized {
            return Err(Error::Validation("per-pixel class sums differ from 1".into()));
        }
        Ok(map)
    }

    /// Constant map, mostly for tests and degenerate fields.
    pub fn filled(classes: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(classes, height, width, vec![value; classes * height * width])
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, class: usize, row: usize, col: usize) -> f64 {
        self.values[class * self.pixels() + row * self.width + col]
    }

    /// Probability of `class` at flat pixel index `pixel`.
    #[inline]
    pub fn prob(&self, class: usize, pixel: usize) -> f64 {
        self.values[class * self.pixels() + pixel]
    }

    /// Class vector at a flat pixel index, written into `out`.
    pub fn pixel_into(&self, pixel: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.classes).map(|j| self.prob(j, pixel)));
    }

    /// Per-pixel argmax, ties to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        let labels = (0..self.pixels())
            .map(|p| {
                let mut best = 0;
                for j in 1..self.classes {
                    if self.prob(j, p) > self.prob(best, p) {
                        best = j;
                    }
                }
                best as u16
            })
            .collect();
        LabelMap {
            height: self.height,
            width: self.width,
            labels,
        }
    }
}

impl TensorFile for ProbabilityMap {
    fn to_raw(&self) -> RawTensor {
        RawTensor::F64 {
            dims: vec![self.classes, self.height, self.width],
            data: self.values.clone(),
        }
    }

    fn from_raw(raw: RawTensor) -> Result<Self> {
        let (dims, data) = raw.into_f64("probability map", 3)?;
        Self::new(dims[0], dims[1], dims[2], data)
    }
}

/// Index-encoded class labels, `IGNORE` for unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Validation("label map must be non-empty".into()));
        }
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u16) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    /// Checks every non-ignored label is below `classes`.
    pub fn validate_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l != IGNORE && l as usize >= classes) {
            Some(l) => Err(Error::Validation(format!("label {l} >= class count {classes}"))),
            None => Ok(()),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn pixels(&self) -> usize {
        self.labels.len()
    }
    pub fn labels(&self) -> &[u16] {
        &self.labels
    }
    pub fn labels_mut(&mut self) -> &mut [u16] {
        &mut self.labels
    }
    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }
    pub fn ignore_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == IGNORE).count()
    }

    pub(crate) fn same_shape(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }
}

impl TensorFile for LabelMap {
    fn to_raw(&self) -> RawTensor {
        RawTensor::U16 {
            dims: vec![self.height, self.width],
            data: self.labels.clone(),
        }
    }

    fn from_raw(raw: RawTensor) -> Result<Self> {
        let (dims, data) = raw.into_u16("label map", 2)?;
        Self::new(dims[0], dims[1], data)
    }
}

/// Pseudo-label mask produced by calibrated mask resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibratedMask(LabelMap);

impl CalibratedMask {
    pub fn new(labels: LabelMap) -> Self {
        Self(labels)
    }
    pub fn into_inner(self) -> LabelMap {
        self.0
    }
    pub fn ignore_fraction(&self) -> f64 {
        self.0.ignore_count() as f64 / self.0.pixels() as f64
    }
}

impl std::ops::Deref for CalibratedMask {
    type Target = LabelMap;
    fn deref(&self) -> &LabelMap {
        &self.0
    }
}

impl TensorFile for CalibratedMask {
    fn to_raw(&self) -> RawTensor {
        self.0.to_raw()
    }
    fn from_raw(raw: RawTensor) -> Result<Self> {
        LabelMap::from_raw(raw).map(Self)
    }
}

/// Non-conformity scores indexed `[class, row, col]`; `None` marks a missing entry.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    classes: usize,
    height: usize,
    width: usize,
    scores: Vec<f64>,
}

impl ScoreMap {
    /// `scores` uses NaN for missing entries. Each pixel may hold at most one finite score.
    pub fn new(classes: usize, height: usize, width: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != classes * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} scores for a {classes}x{height}x{width} map",
                scores.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|v| !v.is_nan() && !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("score {bad} outside [0,1]")));
        }
        let plane = height * width;
        for p in 0..plane {
            let finite = (0..classes).filter(|&j| !scores[j * plane + p].is_nan()).count();
            if finite > 1 {
                return Err(Error::Validation(format!(
                    "pixel {p} has {finite} finite scores, expected at most one"
                )));
            }
        }
        Ok(Self {
            classes,
            height,
            width,
            scores,
        })
    }

    pub(crate) fn from_parts_unchecked(classes: usize, height: usize, width: usize, scores: Vec<f64>) -> Self {
        Self {
            classes,
            height,
            width,
            scores,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, class: usize, row: usize, col: usize) -> Option<f64> {
        let v = self.scores[class * self.pixels() + row * self.width + col];
        (!v.is_nan()).then_some(v)
    }

    /// The finite score at a flat pixel index, if any.
    pub fn pixel_score(&self, pixel: usize) -> Option<f64> {
        let plane = self.pixels();
        (0..self.classes)
            .map(|j| self.scores[j * plane + pixel])
            .find(|v| !v.is_nan())
    }

    pub fn finite_count(&self) -> usize {
        self.scores.iter().filter(|v| !v.is_nan()).count()
    }
}

impl PartialEq for ScoreMap {
    fn eq(&self, other: &Self) -> bool {
        self.classes == other.classes
            && self.height == other.height
            && self.width == other.width
            && self
                .scores
                .iter()
                .zip(&other.scores)
                .all(|(a, b)| (a.is_nan() && b.is_nan()) || a.to_bits() == b.to_bits())
    }
}

impl TensorFile for ScoreMap {
    fn to_raw(&self) -> RawTensor {
        RawTensor::F64 {
            dims: vec![self.classes, self.height, self.width],
            data: self.scores.clone(),
        }
    }

    fn from_raw(raw: RawTensor) -> Result<Self> {
        let (dims, data) = raw.into_f64("score map", 3)?;
        Self::new(dims[0], dims[1], dims[2], data)
    }
}

/// Observation features for one image, indexed `[feature, row, col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    dim: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureImage {
    pub fn new(dim: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || height == 0 || width == 0 {
            return Err(Error::Validation("feature image must be non-empty".into()));
        }
        if values.len() != dim * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {dim}x{height}x{width} feature image",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite feature value".into()));
        }
        Ok(Self {
            dim,
            height,
            width,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn feature(&self, d: usize, pixel: usize) -> f64 {
        self.values[d * self.pixels() + pixel]
    }
}

impl TensorFile for FeatureImage {
    fn to_raw(&self) -> RawTensor {
        RawTensor::F64 {
            dims: vec![self.dim, self.height, self.width],
            data: self.values.clone(),
        }
    }

    fn from_raw(raw: RawTensor) -> Result<Self> {
        let (dims, data) = raw.into_f64("feature image", 3)?;
        Self::new(dims[0], dims[1], dims[2], data)
    }
}

/// How calibration scores were pooled into units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Pixel,
    Image,
    KMeans,
    GenAnn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Pixel, Variant::Image, Variant::KMeans, Variant::GenAnn];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Pixel => "pixel",
            Variant::Image => "image",
            Variant::KMeans => "kmeans",
            Variant::GenAnn => "genann",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pixel" => Ok(Variant::Pixel),
            "image" | "global" => Ok(Variant::Image),
            "kmeans" | "k-means" => Ok(Variant::KMeans),
            "genann" => Ok(Variant::GenAnn),
            other => Err(Error::InvalidArgument(format!("unknown calibration variant '{other}'"))),
        }
    }
}

/// Per-pixel conformal thresholds plus the calibration metadata that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileField {
    pub(crate) height: usize,
    pub(crate) width: usize,
    pub(crate) thresholds: Vec<f64>,
    pub(crate) meta: QuantileMeta,
}

/// JSON sidecar stored next to a quantile field's CMTF tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileMeta {
    pub alpha: f64,
    pub variant: Variant,
    pub k_clusters: Option<usize>,
    pub seed: Option<u64>,
    /// Finite calibration scores per unit.
    pub calibration_size: Vec<usize>,
    /// Unit index of every pixel (row-major).
    pub assignment: Vec<u32>,
}

impl QuantileField {
    pub fn new(height: usize, width: usize, thresholds: Vec<f64>, meta: QuantileMeta) -> Result<Self> {
        if thresholds.len() != height * width || meta.assignment.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "quantile field {height}x{width} with {} thresholds and {} assignments",
                thresholds.len(),
                meta.assignment.len()
            )));
        }
        if let Some(bad) = thresholds.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Validation(format!("threshold {bad} outside [0,1]")));
        }
        if !(meta.alpha > 0.0 && meta.alpha < 1.0) {
            return Err(Error::Validation(format!("alpha {} outside (0,1)", meta.alpha)));
        }
        if meta
            .assignment
            .iter()
            .any(|&u| u as usize >= meta.calibration_size.len())
        {
            return Err(Error::Validation("pixel assigned to an unknown unit".into()));
        }
        if meta.variant == Variant::Image && thresholds.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Validation("image-variant field must be constant".into()));
        }
        Ok(Self {
            height,
            width,
            thresholds,
            meta,
        })
    }

    /// A field with the same threshold everywhere and a single unit.
    pub fn constant(height: usize, width: usize, threshold: f64, alpha: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            vec![threshold; height * width],
            QuantileMeta {
                alpha,
                variant: Variant::Image,
                k_clusters: None,
                seed: None,
                calibration_size: vec![0],
                assignment: vec![0; height * width],
            },
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }
    pub fn threshold(&self, pixel: usize) -> f64 {
        self.thresholds[pixel]
    }
    pub fn meta(&self) -> &QuantileMeta {
        &self.meta
    }
    pub fn alpha(&self) -> f64 {
        self.meta.alpha
    }
    pub fn variant(&self) -> Variant {
        self.meta.variant
    }

    /// Writes the thresholds to `path` and the metadata to `path` with a `.json` extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_tensor(path, self)?;
        let sidecar = serde_json::to_vec_pretty(&self.meta)?;
        write_file_atomic(&path.with_extension("json"), &sidecar)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw: RawTensor = read_tensor(path)?;
        let sidecar_path = path.with_extension("json");
        let bytes = fs::read(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
        let meta: QuantileMeta = serde_json::from_slice(&bytes)?;
        let (dims, data) = raw.into_f64("quantile field", 2)?;
        Self::new(dims[0], dims[1], data, meta)
    }
}

impl TensorFile for QuantileField {
    fn to_raw(&self) -> RawTensor {
        RawTensor::F64 {
            dims: vec![self.height, self.width],
            data: self.thresholds.clone(),
        }
    }

    /// Thresholds only; the metadata lives in the sidecar, see [`QuantileField::load`].
    fn from_raw(raw: RawTensor) -> Result<Self> {
        let (dims, data) = raw.into_f64("quantile field", 2)?;
        let pixels = dims[0] * dims[1];
        Self::new(
            dims[0],
            dims[1],
            data,
            QuantileMeta {
                alpha: 0.05,
                variant: Variant::Pixel,
                k_clusters: None,
                seed: None,
                calibration_size: vec![0; pixels],
                assignment: (0..pixels as u32).collect(),
            },
        )
    }
}

/// Renders a label map as a binary PGM, classes spread over gray levels 0..=254 and
/// `IGNORE` as 255.
pub fn encode_pgm(labels: &LabelMap, classes: usize) -> Result<Vec<u8>> {
    if classes == 0 || classes > 255 {
        return Err(Error::InvalidArgument(format!(
            "PGM export supports 1..=255 classes, got {classes}"
        )));
    }
    labels.validate_classes(classes)?;
    let step = if classes > 1 { 254.0 / (classes - 1) as f64 } else { 0.0 };
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend(labels.labels().iter().map(|&l| {
        if l == IGNORE {
            255
        } else {
            (l as f64 * step).round() as u8
        }
    }));
    Ok(out)
}

pub fn export_pgm(labels: &LabelMap, classes: usize, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_pgm(labels, classes)?;
    write_file_atomic(path.as_ref(), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pgm_pixels(bytes: &[u8]) -> &[u8] {
        // Header is three newline-terminated lines.
        let mut seen = 0;
        let start = bytes
            .iter()
            .position(|&b| {
                if b == b'\n' {
                    seen += 1;
                }
                seen == 3
            })
            .unwrap();
        &bytes[start + 1..]
    }

    #[test]
    fn probability_map_round_trips_bit_for_bit() {
        let values: Vec<f64> = (0..24).map(|i| (i as f64 * 0.0417).min(1.0)).collect();
        let map = ProbabilityMap::new(2, 3, 4, values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.cmtf");
        write_tensor(&path, &map).unwrap();
        let back: ProbabilityMap = read_tensor(&path).unwrap();
        assert_eq!(back, map);
        for (a, b) in back.values().iter().zip(map.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ignore_sentinel_survives_round_trip() {
        let labels = LabelMap::new(2, 2, vec![0, 1, IGNORE, 2]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.cmtf");
        write_tensor(&path, &labels).unwrap();
        let back: LabelMap = read_tensor(&path).unwrap();
        assert_eq!(back.get(1, 0), IGNORE);
        assert_eq!(back, labels);
    }

    #[test]
    fn header_layout_is_little_endian() {
        let map = ProbabilityMap::filled(2, 2, 2, 0.5).unwrap();
        let bytes = map.to_raw().encode().unwrap();
        assert_eq!(&bytes[..4], b"CMTF");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1);
        assert_eq!(bytes[6], 3);
        assert_eq!(&bytes[7..19], &[2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(bytes.len(), 19 + 8 * 8);
        assert_eq!(&bytes[19..27], &0.5f64.to_le_bytes());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = LabelMap::filled(1, 1, 0).unwrap().to_raw().encode().unwrap();
        bytes[0] = b'X';
        let err = RawTensor::decode(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "not a CMTF file");
    }

    #[test]
    fn bad_version_and_dtype_are_rejected() {
        let mut bytes = LabelMap::filled(1, 1, 0).unwrap().to_raw().encode().unwrap();
        bytes[4] = 2;
        assert!(matches!(RawTensor::decode(&bytes), Err(Error::BadVersion(2))));
        bytes[4] = 1;
        bytes[5] = 9;
        assert!(matches!(RawTensor::decode(&bytes), Err(Error::UnsupportedDtype(9))));
    }

    #[test]
    fn overflowing_dims_are_rejected() {
        let mut bytes = b"CMTF".to_vec();
        bytes.extend([1, 1, 4]);
        for _ in 0..4 {
            bytes.extend(u32::MAX.to_le_bytes());
        }
        assert!(matches!(RawTensor::decode(&bytes), Err(Error::Malformed(_))));
    }

    #[test]
    fn out_of_range_probability_fails_validation() {
        let raw = RawTensor::F64 {
            dims: vec![2, 1, 1],
            data: vec![1.5, 0.0],
        };
        let bytes = raw.encode().unwrap();
        let err = ProbabilityMap::from_raw(RawTensor::decode(&bytes).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn normalization_flag_tracks_pixel_sums() {
        let ok = ProbabilityMap::new(2, 1, 2, vec![0.3, 0.9, 0.7, 0.1]).unwrap();
        assert!(ok.is_normalized());
        let not = ProbabilityMap::new(2, 1, 2, vec![0.3, 0.9, 0.6, 0.1]).unwrap();
        assert!(!not.is_normalized());
        assert!(ProbabilityMap::new_normalized(2, 1, 2, vec![0.3, 0.9, 0.6, 0.1]).is_err());
    }

    #[test]
    fn score_map_missing_round_trips_as_nan() {
        let nan = f64::NAN;
        let scores = ScoreMap::new(2, 1, 2, vec![0.3, nan, nan, nan]).unwrap();
        let bytes = scores.to_raw().encode().unwrap();
        let tail = &bytes[bytes.len() - 8..];
        assert_eq!(tail, &CANONICAL_NAN_BITS.to_le_bytes());
        let back = ScoreMap::from_raw(RawTensor::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, scores);
        assert_eq!(back.get(0, 0, 0), Some(0.3));
        assert_eq!(back.get(1, 0, 0), None);
    }

    #[test]
    fn score_map_rejects_two_finite_entries_per_pixel() {
        assert!(ScoreMap::new(2, 1, 1, vec![0.1, 0.2]).is_err());
    }

    #[test]
    fn pgm_uniform_background() {
        let bytes = encode_pgm(&LabelMap::filled(2, 3, 0).unwrap(), 5).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(pgm_pixels(&bytes), &[0; 6]);
    }

    #[test]
    fn pgm_ignore_is_white_and_checkerboard_alternates() {
        let mask = LabelMap::new(2, 2, vec![0, 1, 1, IGNORE]).unwrap();
        let px = pgm_pixels(&encode_pgm(&mask, 2).unwrap()).to_vec();
        assert_eq!(px, vec![0, 254, 254, 255]);

        let checker = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let px = pgm_pixels(&encode_pgm(&checker, 2).unwrap()).to_vec();
        assert_eq!(px, vec![0, 254, 254, 0]);
    }

    #[test]
    fn pgm_rejects_too_many_classes() {
        let mask = LabelMap::filled(1, 1, 0).unwrap();
        assert!(encode_pgm(&mask, 256).is_err());
    }

    #[test]
    fn quantile_field_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.cmtf");
        let field = QuantileField::constant(2, 3, 0.25, 0.1).unwrap();
        field.save(&path).unwrap();
        assert!(dir.path().join("q.json").exists());
        assert_eq!(QuantileField::load(&path).unwrap(), field);
    }

    #[test]
    fn image_variant_must_be_constant() {
        let meta = QuantileMeta {
            alpha: 0.1,
            variant: Variant::Image,
            k_clusters: None,
            seed: None,
            calibration_size: vec![1],
            assignment: vec![0, 0],
        };
        assert!(QuantileField::new(1, 2, vec![0.1, 0.2], meta).is_err());
    }
}
