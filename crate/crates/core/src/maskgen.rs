//! Prediction sets and class-conditional mask resolution.

use crate::error::{Error, Result};
use crate::tensor::{CalibratedMask, LabelMap, ProbabilityMap, QuantileField, IGNORE};

/// Classes whose non-conformity `1 - p` does not exceed `threshold`.
pub fn prediction_set(probs: &[f64], threshold: f64) -> Vec<usize> {
    probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| 1.0 - p <= threshold)
        .map(|(j, _)| j)
        .collect()
}

/// Resolves one pixel's prediction set to a label.
///
/// With a background class, any in-set foreground class wins over background.
/// Among candidates the highest probability wins, ties to the lowest index.
/// A set holding only background resolves to background; an empty set to `IGNORE`.
#[inline]
pub fn resolve_pixel(probs: &[f64], threshold: f64, background: Option<usize>) -> u16 {
    let mut best: Option<usize> = None;
    let mut background_in_set = false;
    for (j, &p) in probs.iter().enumerate() {
        if 1.0 - p > threshold {
            continue;
        }
        if Some(j) == background {
            background_in_set = true;
            continue;
        }
        match best {
            Some(b) if probs[b] >= p => {}
            _ => best = Some(j),
        }
    }
    match (best, background_in_set) {
        (Some(j), _) => j as u16,
        (None, true) => background.unwrap() as u16,
        (None, false) => IGNORE,
    }
}

fn check_shapes(probs: &ProbabilityMap, field: &QuantileField) -> Result<()> {
    if probs.height() != field.height() || probs.width() != field.width() {
        return Err(Error::ShapeMismatch(format!(
            "probabilities are {}x{}, quantile field is {}x{}",
            probs.height(),
            probs.width(),
            field.height(),
            field.width()
        )));
    }
    Ok(())
}

/// Calibrated pseudo-label mask for one probability map.
pub fn resolve_mask(probs: &ProbabilityMap, field: &QuantileField, background: Option<usize>) -> Result<CalibratedMask> {
    check_shapes(probs, field)?;
    if let Some(bg) = background {
        if bg >= probs.classes() {
            return Err(Error::InvalidArgument(format!(
                "background class {bg} >= class count {}",
                probs.classes()
            )));
        }
    }
    let mut pixel = Vec::with_capacity(probs.classes());
    let labels = (0..probs.pixels())
        .map(|p| {
            probs.pixel_into(p, &mut pixel);
            resolve_pixel(&pixel, field.threshold(p), background)
        })
        .collect();
    Ok(CalibratedMask::new(LabelMap::new(probs.height(), probs.width(), labels)?))
}

/// Per-pixel prediction-set sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetSizeMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub sizes: Vec<u32>,
}

pub fn set_size_map(probs: &ProbabilityMap, field: &QuantileField) -> Result<SetSizeMap> {
    check_shapes(probs, field)?;
    let sizes = (0..probs.pixels())
        .map(|p| {
            let q = field.threshold(p);
            (0..probs.classes()).filter(|&j| 1.0 - probs.prob(j, p) <= q).count() as u32
        })
        .collect();
    Ok(SetSizeMap {
        height: probs.height(),
        width: probs.width(),
        classes: probs.classes(),
        sizes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{QuantileMeta, Variant};
    use proptest::prelude::*;

    fn field(h: usize, w: usize, t: Vec<f64>) -> QuantileField {
        QuantileField::new(
            h,
            w,
            t,
            QuantileMeta {
                alpha: 0.1,
                variant: Variant::Pixel,
                k_clusters: None,
                seed: None,
                calibration_size: vec![0; h * w],
                assignment: (0..(h * w) as u32).collect(),
            },
        )
        .unwrap()
    }

    #[test]
    fn set_from_hand_computed_scores() {
        assert_eq!(prediction_set(&[0.8, 0.15, 0.05], 0.25), vec![0]);
        assert_eq!(prediction_set(&[0.8, 0.15, 0.05], 1.0), vec![0, 1, 2]);
        assert!(prediction_set(&[0.8, 0.15, 0.05], 0.0).is_empty());
    }

    #[test]
    fn foreground_beats_background() {
        // set {0, 2}
        assert_eq!(resolve_pixel(&[0.9, 0.0, 0.6], 0.5, Some(0)), 2);
    }

    #[test]
    fn empty_set_is_ignored() {
        assert_eq!(resolve_pixel(&[0.3, 0.3, 0.4], 0.1, Some(0)), IGNORE);
    }

    #[test]
    fn highest_probability_without_background() {
        assert_eq!(resolve_pixel(&[0.0, 0.9, 0.6], 0.5, Some(0)), 1);
    }

    #[test]
    fn background_only_set_keeps_background() {
        assert_eq!(resolve_pixel(&[0.95, 0.03, 0.02], 0.2, Some(0)), 0);
    }

    #[test]
    fn probability_ties_go_to_lowest_index() {
        assert_eq!(resolve_pixel(&[0.1, 0.45, 0.45], 0.6, None), 1);
    }

    #[test]
    fn full_threshold_without_background_is_argmax() {
        let probs = ProbabilityMap::new(3, 1, 3, vec![0.2, 0.5, 0.3, 0.7, 0.1, 0.3, 0.1, 0.4, 0.4]).unwrap();
        let mask = resolve_mask(&probs, &field(1, 3, vec![1.0; 3]), None).unwrap();
        assert_eq!(mask.labels(), probs.argmax().labels());
    }

    #[test]
    fn resolve_mask_errors() {
        let probs = ProbabilityMap::filled(2, 1, 2, 0.5).unwrap();
        assert!(matches!(resolve_mask(&probs, &field(2, 1, vec![0.5; 2]), None), Err(Error::ShapeMismatch(_))));
        assert!(resolve_mask(&probs, &field(1, 2, vec![0.5; 2]), Some(2)).is_err());
    }

    #[test]
    fn set_size_extremes() {
        let probs = ProbabilityMap::filled(3, 2, 2, 0.4).unwrap();
        assert!(set_size_map(&probs, &field(2, 2, vec![1.0; 4])).unwrap().sizes.iter().all(|&s| s == 3));
        assert!(set_size_map(&probs, &field(2, 2, vec![0.0; 4])).unwrap().sizes.iter().all(|&s| s == 0));
    }

    fn arb_probs(k: usize, n: usize) -> impl Strategy<Value = ProbabilityMap> {
        prop::collection::vec(0.0f64..=1.0, k * n).prop_map(move |v| ProbabilityMap::new(k, 1, n, v).unwrap())
    }

    proptest! {
        #[test]
        fn set_sizes_match_prediction_sets(probs in arb_probs(4, 8), t in prop::collection::vec(0.0f64..=1.0, 8)) {
            let f = field(1, 8, t.clone());
            let sizes = set_size_map(&probs, &f).unwrap();
            let mut px = Vec::new();
            for p in 0..8 {
                probs.pixel_into(p, &mut px);
                prop_assert_eq!(sizes.sizes[p] as usize, prediction_set(&px, t[p]).len());
            }
        }

        #[test]
        fn resolved_label_is_in_set_and_not_background_when_avoidable(
            probs in arb_probs(4, 8),
            t in prop::collection::vec(0.0f64..=1.0, 8),
        ) {
            let mask = resolve_mask(&probs, &field(1, 8, t.clone()), Some(0)).unwrap();
            let mut px = Vec::new();
            for p in 0..8 {
                probs.pixel_into(p, &mut px);
                let set = prediction_set(&px, t[p]);
                let l = mask.labels()[p];
                if l == IGNORE {
                    prop_assert!(set.is_empty());
                } else {
                    prop_assert!(set.contains(&(l as usize)));
                    if set.iter().any(|&j| j != 0) {
                        prop_assert_ne!(l, 0);
                    }
                }
            }
        }

        #[test]
        fn larger_thresholds_nest_sets(
            probs in arb_probs(3, 6),
            t in prop::collection::vec(0.0f64..=1.0, 6),
            bump in prop::collection::vec(0.0f64..=0.5, 6),
        ) {
            let t2: Vec<f64> = t.iter().zip(&bump).map(|(a, b)| (a + b).min(1.0)).collect();
            let small = resolve_mask(&probs, &field(1, 6, t.clone()), Some(0)).unwrap();
            let large = resolve_mask(&probs, &field(1, 6, t2.clone()), Some(0)).unwrap();
            prop_assert!(large.ignore_count() <= small.ignore_count());
            let mut px = Vec::new();
            for p in 0..6 {
                probs.pixel_into(p, &mut px);
                let a = prediction_set(&px, t[p]);
                let b = prediction_set(&px, t2[p]);
                prop_assert!(a.iter().all(|j| b.contains(j)));
            }
        }
    }
}
