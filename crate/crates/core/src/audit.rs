//! Coverage, set-size and mask-quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskgen::SetSizeMap;
use crate::tensor::{LabelMap, ProbabilityMap, QuantileField, Variant, IGNORE};

/// Running counts of covered pixels, overall and by true class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageCounts {
    pub covered: Vec<u64>,
    pub total: Vec<u64>,
}

impl CoverageCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            covered: vec![0; classes],
            total: vec![0; classes],
        }
    }

    /// Adds every labeled pixel for which `keep(pixel)` holds.
    pub fn add_where(
        &mut self,
        probs: &ProbabilityMap,
        field: &QuantileField,
        labels: &LabelMap,
        keep: impl Fn(usize) -> bool,
    ) -> Result<()> {
        if !labels.same_shape(probs.height(), probs.width())
            || probs.height() != field.height()
            || probs.width() != field.width()
        {
            return Err(Error::ShapeMismatch("coverage inputs differ in size".into()));
        }
        if probs.classes() != self.total.len() {
            return Err(Error::ShapeMismatch(format!(
                "map has {} classes, counter has {}",
                probs.classes(),
                self.total.len()
            )));
        }
        labels.validate_classes(probs.classes())?;
        for (p, &l) in labels.labels().iter().enumerate() {
            if l == IGNORE || !keep(p) {
                continue;
            }
            let c = l as usize;
            self.total[c] += 1;
            if 1.0 - probs.prob(c, p) <= field.threshold(p) {
                self.covered[c] += 1;
            }
        }
        Ok(())
    }

    pub fn add(&mut self, probs: &ProbabilityMap, field: &QuantileField, labels: &LabelMap) -> Result<()> {
        self.add_where(probs, field, labels, |_| true)
    }

    pub fn merge(&mut self, other: &CoverageCounts) {
        for (a, b) in self.covered.iter_mut().zip(&other.covered) {
            *a += b;
        }
        for (a, b) in self.total.iter_mut().zip(&other.total) {
            *a += b;
        }
    }

    pub fn evaluated(&self) -> u64 {
        self.total.iter().sum()
    }

    pub fn rate(&self) -> Option<f64> {
        let n = self.evaluated();
        (n > 0).then(|| self.covered.iter().sum::<u64>() as f64 / n as f64)
    }

    pub fn report(&self) -> Result<CoverageReport> {
        let overall = self.rate().ok_or(Error::NoEvaluablePixels)?;
        Ok(CoverageReport {
            overall,
            per_class: self
                .covered
                .iter()
                .zip(&self.total)
                .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
                .collect(),
            evaluated: self.evaluated(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub overall: f64,
    /// Coverage conditioned on the true class; `None` for classes never seen.
    pub per_class: Vec<Option<f64>>,
    pub evaluated: u64,
}

/// Fraction of labeled pixels whose true class lies in the prediction set.
pub fn empirical_coverage(maps: &[ProbabilityMap], field: &QuantileField, labels: &[LabelMap]) -> Result<CoverageReport> {
    if maps.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probability maps for {} label maps",
            maps.len(),
            labels.len()
        )));
    }
    let classes = maps.first().ok_or(Error::NoEvaluablePixels)?.classes();
    let mut counts = CoverageCounts::new(classes);
    for (p, l) in maps.iter().zip(labels) {
        counts.add(p, field, l)?;
    }
    counts.report()
}

/// Confusion tallies for IoU. Prediction `IGNORE` counts against the true class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub intersection: Vec<u64>,
    pub predicted: Vec<u64>,
    pub actual: Vec<u64>,
    pub correct: u64,
    pub evaluated: u64,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            intersection: vec![0; classes],
            predicted: vec![0; classes],
            actual: vec![0; classes],
            correct: 0,
            evaluated: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.actual.len()
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if !pred.same_shape(gt.height(), gt.width()) {
            return Err(Error::ShapeMismatch(format!(
                "prediction is {}x{}, ground truth is {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let k = self.classes();
        gt.validate_classes(k)?;
        pred.validate_classes(k)?;
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == IGNORE {
                continue;
            }
            self.evaluated += 1;
            self.actual[g as usize] += 1;
            if p != IGNORE {
                self.predicted[p as usize] += 1;
                if p == g {
                    self.intersection[g as usize] += 1;
                    self.correct += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        let add = |a: &mut Vec<u64>, b: &Vec<u64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.intersection, &other.intersection);
        add(&mut self.predicted, &other.predicted);
        add(&mut self.actual, &other.actual);
        self.correct += other.correct;
        self.evaluated += other.evaluated;
    }

    pub fn miou(&self) -> Result<MiouReport> {
        if self.evaluated == 0 {
            return Err(Error::NoEvaluablePixels);
        }
        let per_class: Vec<Option<f64>> = (0..self.classes())
            .map(|c| {
                let union = self.predicted[c] + self.actual[c] - self.intersection[c];
                (union > 0).then(|| self.intersection[c] as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        Ok(MiouReport { per_class, mean })
    }

    pub fn accuracy(&self) -> Result<f64> {
        if self.evaluated == 0 {
            return Err(Error::NoEvaluablePixels);
        }
        Ok(self.correct as f64 / self.evaluated as f64)
    }

    /// Fraction of true-class `c` pixels predicted as `c`.
    pub fn recall(&self, class: usize) -> Option<f64> {
        (self.actual[class] > 0).then(|| self.intersection[class] as f64 / self.actual[class] as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// IoU per class; `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<MiouReport> {
    let mut c = Confusion::new(classes);
    c.add(pred, gt)?;
    c.miou()
}

/// Share of labeled ground-truth pixels predicted correctly.
pub fn pixel_accuracy(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    let classes = pred
        .labels()
        .iter()
        .chain(gt.labels())
        .filter(|&&l| l != IGNORE)
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(1);
    let mut c = Confusion::new(classes);
    c.add(pred, gt)?;
    c.accuracy()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSizeStats {
    pub mean: f64,
    /// `histogram[s]` counts pixels with set size `s`, for `s` in `0..=K`.
    pub histogram: Vec<u64>,
    pub empty_fraction: f64,
}

impl SetSizeStats {
    pub fn from_histogram(histogram: Vec<u64>) -> Self {
        let n: u64 = histogram.iter().sum();
        let weighted: u64 = histogram.iter().enumerate().map(|(s, &c)| s as u64 * c).sum();
        let (mean, empty_fraction) = if n == 0 {
            (0.0, 0.0)
        } else {
            (weighted as f64 / n as f64, histogram[0] as f64 / n as f64)
        };
        Self {
            mean,
            histogram,
            empty_fraction,
        }
    }
}

pub fn set_size_histogram(sizes: &SetSizeMap) -> Vec<u64> {
    let mut hist = vec![0u64; sizes.classes + 1];
    for &s in &sizes.sizes {
        hist[s as usize] += 1;
    }
    hist
}

pub fn set_size_stats(sizes: &SetSizeMap) -> SetSizeStats {
    SetSizeStats::from_histogram(set_size_histogram(sizes))
}

/// One audit record, as written by `cpseg audit`.
/// Coverage of a quantile field on held-out images plus quality of a set of masks.
///
/// The coverage fields are absent when only masks were audited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub variant: Option<Variant>,
    pub alpha: Option<f64>,
    pub background: Option<usize>,
    pub coverage: Option<f64>,
    pub per_class_coverage: Option<Vec<Option<f64>>>,
    pub set_size_stats: Option<SetSizeStats>,
    pub coverage_images: usize,
    /// mIoU of the masks against ground truth.
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub ignore_fraction: f64,
    pub mask_images: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lm(h: usize, w: usize, v: Vec<u16>) -> LabelMap {
        LabelMap::new(h, w, v).unwrap()
    }

    #[test]
    fn coverage_extremes() {
        let probs = ProbabilityMap::new(2, 1, 2, vec![0.6, 0.3, 0.4, 0.7]).unwrap();
        let labels = lm(1, 2, vec![0, 1]);
        let full = QuantileField::constant(1, 2, 1.0, 0.1).unwrap();
        let none = QuantileField::constant(1, 2, 0.0, 0.1).unwrap();
        assert_eq!(empirical_coverage(&[probs.clone()], &full, &[labels.clone()]).unwrap().overall, 1.0);
        assert_eq!(empirical_coverage(&[probs], &none, &[labels]).unwrap().overall, 0.0);
    }

    #[test]
    fn coverage_per_class() {
        let probs = ProbabilityMap::new(2, 1, 3, vec![0.9, 0.2, 0.5, 0.1, 0.8, 0.5]).unwrap();
        let labels = lm(1, 3, vec![0, 0, 1]);
        let field = QuantileField::constant(1, 3, 0.5, 0.1).unwrap();
        let r = empirical_coverage(&[probs], &field, &[labels]).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(1.0)]);
        assert!((r.overall - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn coverage_without_labels_errors() {
        let probs = ProbabilityMap::filled(2, 1, 1, 0.5).unwrap();
        let field = QuantileField::constant(1, 1, 0.5, 0.1).unwrap();
        let r = empirical_coverage(&[probs], &field, &[lm(1, 1, vec![IGNORE])]);
        assert!(matches!(r, Err(Error::NoEvaluablePixels)));
    }

    #[test]
    fn miou_perfect_and_half() {
        let gt = lm(2, 2, vec![0, 0, 1, 1]);
        assert_eq!(miou(&gt, &gt, 2).unwrap().mean, 1.0);
        let r = miou(&lm(2, 2, vec![0; 4]), &gt, 2).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(0.0)]);
        assert_eq!(r.mean, 0.25);
    }

    #[test]
    fn miou_all_ignore_gt_errors() {
        let err = miou(&lm(1, 2, vec![0, 1]), &lm(1, 2, vec![IGNORE; 2]), 2).unwrap_err();
        assert_eq!(err.to_string(), "no evaluable pixels");
    }

    #[test]
    fn ignore_prediction_counts_as_wrong() {
        let r = miou(&lm(1, 2, vec![0, IGNORE]), &lm(1, 2, vec![0, 0]), 2).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), None]);
    }

    #[test]
    fn absent_classes_are_skipped() {
        let r = miou(&lm(1, 2, vec![0, 0]), &lm(1, 2, vec![0, 0]), 5).unwrap();
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn accuracy_cases() {
        let gt = lm(1, 4, vec![0, 1, 0, 1]);
        assert_eq!(pixel_accuracy(&gt, &gt).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(&lm(1, 4, vec![1, 0, 1, 0]), &gt).unwrap(), 0.0);
        assert_eq!(pixel_accuracy(&lm(1, 4, vec![0, 1, 1, 0]), &gt).unwrap(), 0.5);
    }

    #[test]
    fn set_size_stat_cases() {
        let ones = SetSizeMap { height: 1, width: 4, classes: 3, sizes: vec![1; 4] };
        let s = set_size_stats(&ones);
        assert_eq!((s.mean, s.empty_fraction), (1.0, 0.0));
        let half = SetSizeMap { height: 1, width: 4, classes: 3, sizes: vec![0, 3, 0, 3] };
        let s = set_size_stats(&half);
        assert_eq!(s.empty_fraction, 0.5);
        assert_eq!(s.histogram, vec![2, 0, 0, 2]);
    }

    proptest! {
        #[test]
        fn set_size_stats_match_recount(sizes in prop::collection::vec(0u32..=4, 1..64)) {
            let n = sizes.len();
            let map = SetSizeMap { height: 1, width: n, classes: 4, sizes: sizes.clone() };
            let s = set_size_stats(&map);
            let mean = sizes.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
            let empty = sizes.iter().filter(|&&x| x == 0).count() as f64 / n as f64;
            prop_assert!((s.mean - mean).abs() < 1e-12);
            prop_assert!((s.empty_fraction - empty).abs() < 1e-12);
        }

        #[test]
        fn miou_symmetric_under_relabeling(
            pred in prop::collection::vec(0u16..3, 12),
            gt in prop::collection::vec(0u16..3, 12),
        ) {
            let perm = [2u16, 0, 1];
            let r1 = miou(&lm(3, 4, pred.clone()), &lm(3, 4, gt.clone()), 3).unwrap();
            let pp: Vec<u16> = pred.iter().map(|&l| perm[l as usize]).collect();
            let gp: Vec<u16> = gt.iter().map(|&l| perm[l as usize]).collect();
            let r2 = miou(&lm(3, 4, pp), &lm(3, 4, gp), 3).unwrap();
            prop_assert!((r1.mean - r2.mean).abs() < 1e-12);
        }

        #[test]
        fn coverage_monotone_in_thresholds(
            v in prop::collection::vec(0.0f64..=1.0, 16),
            labels in prop::collection::vec(0u16..2, 8),
            t in 0.0f64..=1.0,
            bump in 0.0f64..=0.5,
        ) {
            let probs = ProbabilityMap::new(2, 2, 4, v).unwrap();
            let labels = lm(2, 4, labels);
            let lo = QuantileField::constant(2, 4, t, 0.1).unwrap();
            let hi = QuantileField::constant(2, 4, (t + bump).min(1.0), 0.1).unwrap();
            let a = empirical_coverage(&[probs.clone()], &lo, &[labels.clone()]).unwrap().overall;
            let b = empirical_coverage(&[probs], &hi, &[labels]).unwrap().overall;
            prop_assert!(a <= b);
        }
    }
}
