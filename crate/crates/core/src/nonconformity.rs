//! Non-conformity scores (one minus the true-class probability) and their
//! pooling into calibration units.

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, ProbabilityMap, ScoreMap, IGNORE};

/// Scores `1 - P[y]` at the labeled class of each pixel; every other entry is missing.
pub fn inverse_prediction_map(probs: &ProbabilityMap, labels: &LabelMap) -> Result<ScoreMap> {
    if !labels.same_shape(probs.height(), probs.width()) {
        return Err(Error::ShapeMismatch(format!(
            "probabilities are {}x{}, labels are {}x{}",
            probs.height(),
            probs.width(),
            labels.height(),
            labels.width()
        )));
    }
    labels.validate_classes(probs.classes())?;
    let plane = probs.pixels();
    let mut scores = vec![f64::NAN; probs.classes() * plane];
    for (p, &label) in labels.labels().iter().enumerate() {
        if label != IGNORE {
            let j = label as usize;
            scores[j * plane + p] = 1.0 - probs.prob(j, p);
        }
    }
    Ok(ScoreMap::from_parts_unchecked(
        probs.classes(),
        probs.height(),
        probs.width(),
        scores,
    ))
}

/// Maps every pixel location to one calibration unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UnitAssignment {
    /// One unit per pixel location.
    Pixel,
    /// A single unit for all pixels.
    Global,
    /// Explicit unit index per pixel (row-major) over `units` units.
    Clusters { assignment: Vec<u32>, units: usize },
}

impl UnitAssignment {
    pub fn unit_count(&self, pixels: usize) -> usize {
        match self {
            UnitAssignment::Pixel => pixels,
            UnitAssignment::Global => 1,
            UnitAssignment::Clusters { units, .. } => *units,
        }
    }

    pub fn unit_of(&self, pixel: usize) -> usize {
        match self {
            UnitAssignment::Pixel => pixel,
            UnitAssignment::Global => 0,
            UnitAssignment::Clusters { assignment, .. } => assignment[pixel] as usize,
        }
    }

    /// Materialized per-pixel unit indices.
    pub fn to_vec(&self, pixels: usize) -> Vec<u32> {
        (0..pixels).map(|p| self.unit_of(p) as u32).collect()
    }
}

/// Finite calibration scores grouped by unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorePools {
    height: usize,
    width: usize,
    assignment: UnitAssignment,
    pools: Vec<Vec<f64>>,
}

impl ScorePools {
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn assignment(&self) -> &UnitAssignment {
        &self.assignment
    }
    pub fn units(&self) -> &[Vec<f64>] {
        &self.pools
    }
    pub fn unit(&self, index: usize) -> &[f64] {
        &self.pools[index]
    }
    pub fn counts(&self) -> Vec<usize> {
        self.pools.iter().map(Vec::len).collect()
    }
    pub fn total(&self) -> usize {
        self.pools.iter().map(Vec::len).sum()
    }

    /// Units that received no finite score. Calibration falls back to 1.0 there.
    pub fn empty_units(&self) -> Vec<usize> {
        (0..self.pools.len()).filter(|&u| self.pools[u].is_empty()).collect()
    }

    /// Re-pools per-pixel pools under a coarser assignment.
    pub fn regroup(&self, assignment: UnitAssignment) -> Result<ScorePools> {
        if self.assignment != UnitAssignment::Pixel {
            return Err(Error::InvalidArgument("regrouping needs per-pixel pools".into()));
        }
        let pixels = self.height * self.width;
        let mut pools = vec![Vec::new(); assignment.unit_count(pixels)];
        for (p, pool) in self.pools.iter().enumerate() {
            pools[assignment.unit_of(p)].extend_from_slice(pool);
        }
        Ok(ScorePools {
            height: self.height,
            width: self.width,
            assignment,
            pools,
        })
    }
}

/// Collects every finite score of every map into the unit of its pixel.
pub fn pool_scores(maps: &[ScoreMap], assignment: UnitAssignment) -> Result<ScorePools> {
    let first = maps.first().ok_or(Error::EmptyCalibration)?;
    let (classes, height, width) = (first.classes(), first.height(), first.width());
    let pixels = height * width;
    if let UnitAssignment::Clusters { assignment: a, units } = &assignment {
        if a.len() != pixels {
            return Err(Error::ShapeMismatch(format!(
                "assignment covers {} pixels, maps have {pixels}",
                a.len()
            )));
        }
        if a.iter().any(|&u| u as usize >= *units) {
            return Err(Error::InvalidArgument("assignment references unknown unit".into()));
        }
    }
    let mut pools = vec![Vec::new(); assignment.unit_count(pixels)];
    for map in maps {
        if map.classes() != classes || map.height() != height || map.width() != width {
            return Err(Error::ShapeMismatch(format!(
                "score map {}x{}x{} differs from {classes}x{height}x{width}",
                map.classes(),
                map.height(),
                map.width()
            )));
        }
        for p in 0..pixels {
            if let Some(s) = map.pixel_score(p) {
                pools[assignment.unit_of(p)].push(s);
            }
        }
    }
    Ok(ScorePools {
        height,
        width,
        assignment,
        pools,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probs_2x1x1(p0: f64, p1: f64) -> ProbabilityMap {
        ProbabilityMap::new(2, 1, 1, vec![p0, p1]).unwrap()
    }

    #[test]
    fn score_is_one_minus_true_class_probability() {
        let scores =
            inverse_prediction_map(&probs_2x1x1(0.7, 0.3), &LabelMap::filled(1, 1, 0).unwrap()).unwrap();
        assert!((scores.get(0, 0, 0).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(scores.get(1, 0, 0), None);
    }

    #[test]
    fn ignore_pixel_has_no_scores() {
        let scores =
            inverse_prediction_map(&probs_2x1x1(0.7, 0.3), &LabelMap::filled(1, 1, IGNORE).unwrap())
                .unwrap();
        assert_eq!(scores.finite_count(), 0);
    }

    #[test]
    fn certain_predictions_score_zero() {
        let probs = ProbabilityMap::new(2, 2, 2, [vec![1.0; 4], vec![0.0; 4]].concat()).unwrap();
        let scores = inverse_prediction_map(&probs, &LabelMap::filled(2, 2, 0).unwrap()).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                assert_eq!(scores.get(0, a, b), Some(0.0));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let err = inverse_prediction_map(&probs_2x1x1(0.5, 0.5), &LabelMap::filled(2, 1, 0).unwrap());
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn pixel_pools_gather_scores_across_images() {
        let a = inverse_prediction_map(&probs_2x1x1(0.8, 0.2), &LabelMap::filled(1, 1, 0).unwrap()).unwrap();
        let b = inverse_prediction_map(&probs_2x1x1(0.4, 0.6), &LabelMap::filled(1, 1, 1).unwrap()).unwrap();
        let pools = pool_scores(&[a, b], UnitAssignment::Pixel).unwrap();
        let got = pools.unit(0);
        assert_eq!(got.len(), 2);
        assert!((got[0] - 0.2).abs() < 1e-12);
        assert!((got[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn global_pool_counts_every_pixel() {
        let probs = ProbabilityMap::filled(2, 2, 2, 0.5).unwrap();
        let map = inverse_prediction_map(&probs, &LabelMap::filled(2, 2, 1).unwrap()).unwrap();
        let pools = pool_scores(&[map], UnitAssignment::Global).unwrap();
        assert_eq!(pools.counts(), vec![4]);
    }

    #[test]
    fn all_ignore_image_contributes_nothing() {
        let probs = ProbabilityMap::filled(2, 2, 2, 0.5).unwrap();
        let labeled = inverse_prediction_map(&probs, &LabelMap::filled(2, 2, 1).unwrap()).unwrap();
        let ignored = inverse_prediction_map(&probs, &LabelMap::filled(2, 2, IGNORE).unwrap()).unwrap();
        let alone = pool_scores(&[labeled.clone()], UnitAssignment::Pixel).unwrap();
        let with = pool_scores(&[labeled, ignored], UnitAssignment::Pixel).unwrap();
        assert_eq!(alone.counts(), with.counts());
    }

    #[test]
    fn empty_calibration_set_is_an_error() {
        assert!(matches!(pool_scores(&[], UnitAssignment::Pixel), Err(Error::EmptyCalibration)));
    }

    #[test]
    fn empty_units_are_flagged() {
        let probs = ProbabilityMap::filled(2, 1, 2, 0.5).unwrap();
        let map = inverse_prediction_map(&probs, &LabelMap::new(1, 2, vec![0, IGNORE]).unwrap()).unwrap();
        let pools = pool_scores(&[map], UnitAssignment::Pixel).unwrap();
        assert_eq!(pools.empty_units(), vec![1]);
    }

    fn arb_pair(k: usize, h: usize, w: usize) -> impl Strategy<Value = (ProbabilityMap, LabelMap)> {
        let n = h * w;
        (
            prop::collection::vec(0.0f64..=1.0, k * n),
            prop::collection::vec(prop_oneof![4 => 0..k as u16, 1 => Just(IGNORE)], n),
        )
            .prop_map(move |(v, l)| {
                (
                    ProbabilityMap::new(k, h, w, v).unwrap(),
                    LabelMap::new(h, w, l).unwrap(),
                )
            })
    }

    proptest! {
        #[test]
        fn pooled_total_equals_labeled_pixels(pairs in prop::collection::vec(arb_pair(3, 2, 3), 1..6)) {
            let maps: Vec<_> = pairs.iter().map(|(p, l)| inverse_prediction_map(p, l).unwrap()).collect();
            let labeled: usize = pairs.iter().map(|(_, l)| l.pixels() - l.ignore_count()).sum();
            for assignment in [UnitAssignment::Pixel, UnitAssignment::Global] {
                let pools = pool_scores(&maps, assignment).unwrap();
                prop_assert_eq!(pools.total(), labeled);
                prop_assert!(pools.units().iter().flatten().all(|s| (0.0..=1.0).contains(s)));
            }
        }

        #[test]
        fn pools_are_permutation_invariant(pairs in prop::collection::vec(arb_pair(3, 2, 2), 2..6)) {
            let maps: Vec<_> = pairs.iter().map(|(p, l)| inverse_prediction_map(p, l).unwrap()).collect();
            let mut reversed = maps.clone();
            reversed.reverse();
            let a = pool_scores(&maps, UnitAssignment::Pixel).unwrap();
            let b = pool_scores(&reversed, UnitAssignment::Pixel).unwrap();
            for (x, y) in a.units().iter().zip(b.units()) {
                let mut x = x.clone();
                let mut y = y.clone();
                x.sort_by(f64::total_cmp);
                y.sort_by(f64::total_cmp);
                prop_assert_eq!(x, y);
            }
        }
    }
}
