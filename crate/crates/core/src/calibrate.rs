//! Split-conformal thresholds and the four pooling variants that turn score
//! pools into a [`QuantileField`].
//!
//! Every variant reduces to the same rule: pool the calibration scores of a
//! unit, take the `ceil((n + 1)(1 - alpha))`-th smallest, and broadcast it to
//! the unit's pixels. The variants differ only in how pixels are grouped:
//!
//! * `pixel`: every pixel location is its own unit.
//! * `image`: one unit for the whole image.
//! * `kmeans`: pixel locations clustered by the shape of their score
//!   distribution (mean, variance, nine deciles; z-normalized).
//! * `genann`: pixel locations clustered by the empirical class histogram of
//!   the calibration annotations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, z_normalize, DEFAULT_MAX_ITERATIONS};
use crate::nonconformity::{ScorePools, UnitAssignment};
use crate::tensor::{LabelMap, QuantileField, QuantileMeta, Variant, IGNORE};

/// Threshold used for units with too few samples to certify `1 - alpha`.
pub const FALLBACK_THRESHOLD: f64 = 1.0;

pub const DEFAULT_CLUSTERS: usize = 8;

/// Absorbs rounding in `(n + 1)(1 - alpha)` when the exact product is an integer.
const RANK_EPS: f64 = 1e-9;

/// Features per pixel for the k-means variant: mean, variance and nine deciles.
pub const SCORE_FEATURES: usize = 11;

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha must lie in (0,1), got {alpha}")))
    }
}

/// One-based rank `ceil((n + 1)(1 - alpha))`, or `None` when it exceeds `n`.
pub fn conformal_rank(n: usize, alpha: f64) -> Option<usize> {
    if n == 0 {
        return None;
    }
    let k = (((n + 1) as f64) * (1.0 - alpha) - RANK_EPS).ceil().max(1.0) as usize;
    (k <= n).then_some(k)
}

/// The conformal threshold of a multiset of scores.
///
/// Returns [`FALLBACK_THRESHOLD`] when the rank exceeds the sample count.
pub fn conformal_quantile(samples: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let Some(k) = conformal_rank(samples.len(), alpha) else {
        return Ok(FALLBACK_THRESHOLD);
    };
    let mut scratch = samples.to_vec();
    let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

fn field_from_pools(
    pools: &ScorePools,
    alpha: f64,
    variant: Variant,
    k_clusters: Option<usize>,
    seed: Option<u64>,
) -> Result<QuantileField> {
    let unit_thresholds = pools
        .units()
        .iter()
        .map(|u| conformal_quantile(u, alpha))
        .collect::<Result<Vec<_>>>()?;
    let pixels = pools.height() * pools.width();
    let assignment = pools.assignment().to_vec(pixels);
    let thresholds = assignment.iter().map(|&u| unit_thresholds[u as usize]).collect();
    QuantileField::new(
        pools.height(),
        pools.width(),
        thresholds,
        QuantileMeta {
            alpha,
            variant,
            k_clusters,
            seed,
            calibration_size: pools.counts(),
            assignment,
        },
    )
}

fn require_pixel_pools(pools: &ScorePools) -> Result<()> {
    if *pools.assignment() == UnitAssignment::Pixel {
        Ok(())
    } else {
        Err(Error::InvalidArgument("this variant needs per-pixel score pools".into()))
    }
}

/// Independent threshold per pixel location.
pub fn calibrate_pixel(pools: &ScorePools, alpha: f64) -> Result<QuantileField> {
    require_pixel_pools(pools)?;
    field_from_pools(pools, alpha, Variant::Pixel, None, None)
}

/// One threshold from all scores of all pixels.
pub fn calibrate_global(pools: &ScorePools, alpha: f64) -> Result<QuantileField> {
    let global = match pools.assignment() {
        UnitAssignment::Global => pools.clone(),
        UnitAssignment::Pixel => pools.regroup(UnitAssignment::Global)?,
        UnitAssignment::Clusters { .. } => {
            return Err(Error::InvalidArgument("global calibration needs pixel or global pools".into()))
        }
    };
    field_from_pools(&global, alpha, Variant::Image, None, None)
}

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

/// Mean, variance and deciles of each pixel's pool, row-major `pixels x 11`.
/// Empty pools get the fallback threshold in every coordinate.
pub fn score_distribution_features(pools: &ScorePools) -> Result<Vec<f64>> {
    require_pixel_pools(pools)?;
    let mut features = Vec::with_capacity(pools.units().len() * SCORE_FEATURES);
    let mut sorted = Vec::new();
    for pool in pools.units() {
        if pool.is_empty() {
            features.push(FALLBACK_THRESHOLD);
            features.push(0.0);
            features.extend([FALLBACK_THRESHOLD; 9]);
            continue;
        }
        let n = pool.len() as f64;
        let mean = pool.iter().sum::<f64>() / n;
        let var = pool.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        sorted.clear();
        sorted.extend_from_slice(pool);
        sorted.sort_by(f64::total_cmp);
        features.push(mean);
        features.push(var);
        features.extend((1..=9).map(|d| nearest_rank(&sorted, d as f64 / 10.0)));
    }
    Ok(features)
}

fn cluster_and_calibrate(
    pools: &ScorePools,
    features: &[f64],
    dim: usize,
    k_clusters: usize,
    alpha: f64,
    seed: u64,
    variant: Variant,
) -> Result<QuantileField> {
    check_alpha(alpha)?;
    let result = kmeans(features, dim, k_clusters, DEFAULT_MAX_ITERATIONS, seed)?;
    let grouped = pools.regroup(UnitAssignment::Clusters {
        assignment: result.assignment,
        units: k_clusters,
    })?;
    field_from_pools(&grouped, alpha, variant, Some(k_clusters), Some(seed))
}

/// Pixels grouped by k-means on their score-distribution features.
pub fn calibrate_kmeans(pools: &ScorePools, k_clusters: usize, alpha: f64, seed: u64) -> Result<QuantileField> {
    let mut features = score_distribution_features(pools)?;
    z_normalize(&mut features, SCORE_FEATURES);
    cluster_and_calibrate(pools, &features, SCORE_FEATURES, k_clusters, alpha, seed, Variant::KMeans)
}

/// Empirical class frequencies per pixel over the calibration annotations,
/// row-major `pixels x classes`. Pixels never labeled get the zero vector.
pub fn annotation_histograms(labels: &[LabelMap], classes: usize) -> Result<Vec<f64>> {
    let first = labels.first().ok_or(Error::EmptyCalibration)?;
    let pixels = first.pixels();
    let mut counts = vec![0.0; pixels * classes];
    let mut totals = vec![0usize; pixels];
    for map in labels {
        if !map.same_shape(first.height(), first.width()) {
            return Err(Error::ShapeMismatch("calibration label maps differ in size".into()));
        }
        map.validate_classes(classes)?;
        for (p, &l) in map.labels().iter().enumerate() {
            if l != IGNORE {
                counts[p * classes + l as usize] += 1.0;
                totals[p] += 1;
            }
        }
    }
    for p in 0..pixels {
        if totals[p] > 0 {
            for c in &mut counts[p * classes..(p + 1) * classes] {
                *c /= totals[p] as f64;
            }
        }
    }
    Ok(counts)
}

/// Pixels grouped by k-means on their annotation class histograms.
pub fn calibrate_genann(
    labels: &[LabelMap],
    classes: usize,
    pools: &ScorePools,
    k_clusters: usize,
    alpha: f64,
    seed: u64,
) -> Result<QuantileField> {
    require_pixel_pools(pools)?;
    let features = annotation_histograms(labels, classes)?;
    if features.len() != pools.units().len() * classes {
        return Err(Error::ShapeMismatch("annotations and score pools differ in size".into()));
    }
    cluster_and_calibrate(pools, &features, classes, k_clusters, alpha, seed, Variant::GenAnn)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub variant: Variant,
    pub alpha: f64,
    #[serde(default = "default_clusters")]
    pub k_clusters: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_clusters() -> usize {
    DEFAULT_CLUSTERS
}

impl CalibrationConfig {
    pub fn new(variant: Variant, alpha: f64) -> Self {
        Self {
            variant,
            alpha,
            k_clusters: DEFAULT_CLUSTERS,
            seed: 0,
        }
    }
}

/// Dispatches to the variant named in `cfg`. `labels` is only read by `genann`.
pub fn calibrate(pools: &ScorePools, labels: &[LabelMap], classes: usize, cfg: &CalibrationConfig) -> Result<QuantileField> {
    check_alpha(cfg.alpha)?;
    match cfg.variant {
        Variant::Pixel => calibrate_pixel(pools, cfg.alpha),
        Variant::Image => calibrate_global(pools, cfg.alpha),
        Variant::KMeans => calibrate_kmeans(pools, cfg.k_clusters, cfg.alpha, cfg.seed),
        Variant::GenAnn => calibrate_genann(labels, classes, pools, cfg.k_clusters, cfg.alpha, cfg.seed),
    }
}
