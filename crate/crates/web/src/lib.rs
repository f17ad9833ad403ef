//! Browser bindings for the calibration demo.
//!
//! A [`Demo`] holds one synthetic dataset whose simulated model is sharp on the
//! left half of each image and noisy on the right. The page renders quantile
//! fields, pseudo-label masks and a coverage curve from it.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use cpseg::audit::{empirical_coverage, Confusion};
use cpseg::calibrate::CalibrationConfig;
use cpseg::maskgen::{resolve_mask, set_size_map};
use cpseg::pipeline::SyntheticSplit;
use cpseg::synth::{DatasetConfig, NoiseField, SceneConfig, SimModelConfig};
use cpseg::{LabelMap, QuantileField, Variant, IGNORE};

const CLASSES: usize = 5;
const SIDE: usize = 32;
const CURVE_ALPHAS: [f64; 8] = [0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4];

const PALETTE: [[u8; 3]; CLASSES] = [
    [40, 44, 52],
    [230, 97, 1],
    [94, 60, 153],
    [27, 158, 119],
    [230, 171, 2],
];
const IGNORE_COLOR: [u8; 3] = [250, 250, 250];

fn demo_config(seed: u64) -> DatasetConfig {
    DatasetConfig {
        seed,
        n_labeled: 60,
        n_unlabeled: 6,
        n_test: 20,
        scene: SceneConfig {
            classes: CLASSES,
            height: SIDE,
            width: SIDE,
            ..SceneConfig::default()
        },
        model: SimModelConfig {
            noise: NoiseField::LeftRight { left: 0.5, right: 3.0 },
            ..SimModelConfig::background_biased(CLASSES, 0.4)
        },
        ..DatasetConfig::default()
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CurvePoint {
    pub alpha: f64,
    pub coverage: f64,
    pub mean_set_size: f64,
    pub ignore_fraction: f64,
    pub mask_accuracy: Option<f64>,
}

fn js_err(e: cpseg::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(labels: &LabelMap) -> Vec<u8> {
    labels
        .labels()
        .iter()
        .flat_map(|&l| {
            let [r, g, b] = if l == IGNORE { IGNORE_COLOR } else { PALETTE[l as usize % CLASSES] };
            [r, g, b, 255]
        })
        .collect()
}

/// Dark blue for 0 through yellow for 1.
fn heat(t: f64) -> [u8; 4] {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    [lerp(20.0, 250.0), lerp(30.0, 220.0), lerp(110.0, 40.0), 255]
}

#[wasm_bindgen]
pub struct Demo {
    split: SyntheticSplit,
}

impl Demo {
    pub fn try_new(seed: u64) -> cpseg::Result<Self> {
        Ok(Self {
            split: SyntheticSplit::generate(&demo_config(seed))?,
        })
    }

    fn field(&self, variant: &str, alpha: f64) -> cpseg::Result<QuantileField> {
        let variant: Variant = variant.parse()?;
        self.split.calibrate(&CalibrationConfig::new(variant, alpha))
    }

    fn unlabeled(&self, image: usize) -> cpseg::Result<&cpseg::synth::SyntheticImage> {
        self.split
            .unlabeled
            .get(image)
            .ok_or_else(|| cpseg::Error::InvalidArgument(format!("no image {image}")))
    }

    pub fn quantile_pixels(&self, variant: &str, alpha: f64) -> cpseg::Result<Vec<u8>> {
        Ok(self.field(variant, alpha)?.thresholds().iter().flat_map(|&t| heat(t)).collect())
    }

    pub fn mask_pixels(&self, variant: &str, alpha: f64, image: usize, class_conditional: bool) -> cpseg::Result<Vec<u8>> {
        let field = self.field(variant, alpha)?;
        let background = class_conditional.then_some(0);
        let mask = resolve_mask(&self.unlabeled(image)?.probs, &field, background)?;
        Ok(rgba(&mask))
    }

    pub fn curve(&self, variant: &str, class_conditional: bool) -> cpseg::Result<Vec<CurvePoint>> {
        let background = class_conditional.then_some(0);
        let test_probs: Vec<_> = self.split.test.iter().map(|i| i.probs.clone()).collect();
        let test_labels: Vec<_> = self.split.test.iter().map(|i| i.labels.clone()).collect();
        CURVE_ALPHAS
            .iter()
            .map(|&alpha| {
                let field = self.field(variant, alpha)?;
                let coverage = empirical_coverage(&test_probs, &field, &test_labels)?.overall;
                let (mut size, mut ignored, mut pixels) = (0u64, 0usize, 0usize);
                let mut confusion = Confusion::new(CLASSES);
                for im in &self.split.unlabeled {
                    size += set_size_map(&im.probs, &field)?.sizes.iter().map(|&s| s as u64).sum::<u64>();
                    let mask = resolve_mask(&im.probs, &field, background)?;
                    ignored += mask.labels().iter().filter(|&&l| l == IGNORE).count();
                    pixels += mask.pixels();
                    confusion.add(&mask, &im.labels)?;
                }
                // Accuracy over the pixels the mask keeps.
                let kept = confusion.predicted.iter().sum::<u64>();
                let correct = confusion.intersection.iter().sum::<u64>();
                Ok(CurvePoint {
                    alpha,
                    coverage,
                    mean_set_size: size as f64 / pixels as f64,
                    ignore_fraction: ignored as f64 / pixels as f64,
                    mask_accuracy: (kept > 0).then(|| correct as f64 / kept as f64),
                })
            })
            .collect()
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        Demo::try_new(seed as u64).map_err(js_err)
    }

    pub fn width(&self) -> usize {
        SIDE
    }

    pub fn height(&self) -> usize {
        SIDE
    }

    pub fn images(&self) -> usize {
        self.split.unlabeled.len()
    }

    /// RGBA heat map of the per-pixel thresholds.
    pub fn quantile_rgba(&self, variant: &str, alpha: f64) -> Result<Vec<u8>, JsError> {
        self.quantile_pixels(variant, alpha).map_err(js_err)
    }

    /// RGBA pseudo-label mask of one unlabeled image. Ignored pixels are light grey.
    pub fn mask_rgba(&self, variant: &str, alpha: f64, image: usize, class_conditional: bool) -> Result<Vec<u8>, JsError> {
        self.mask_pixels(variant, alpha, image, class_conditional).map_err(js_err)
    }

    pub fn truth_rgba(&self, image: usize) -> Result<Vec<u8>, JsError> {
        self.unlabeled(image).map(|im| rgba(&im.labels)).map_err(js_err)
    }

    pub fn argmax_rgba(&self, image: usize) -> Result<Vec<u8>, JsError> {
        self.unlabeled(image).map(|im| rgba(&im.probs.argmax())).map_err(js_err)
    }

    /// Coverage, set size and mask statistics over a fixed alpha grid, as JSON.
    pub fn coverage_curve(&self, variant: &str, class_conditional: bool) -> Result<String, JsError> {
        let points = self.curve(variant, class_conditional).map_err(js_err)?;
        serde_json::to_string(&points).map_err(|e| JsError::new(&e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffers_have_rgba_size() {
        let demo = Demo::try_new(1).unwrap();
        for v in ["pixel", "image", "kmeans", "genann"] {
            assert_eq!(demo.quantile_pixels(v, 0.1).unwrap().len(), SIDE * SIDE * 4);
            assert_eq!(demo.mask_pixels(v, 0.1, 0, true).unwrap().len(), SIDE * SIDE * 4);
        }
    }

    #[test]
    fn image_variant_is_flat() {
        let demo = Demo::try_new(2).unwrap();
        let px = demo.quantile_pixels("image", 0.1).unwrap();
        assert!(px.chunks(4).all(|c| c == &px[..4]));
    }

    #[test]
    fn bad_inputs_are_errors() {
        let demo = Demo::try_new(3).unwrap();
        assert!(demo.quantile_pixels("nope", 0.1).is_err());
        assert!(demo.quantile_pixels("pixel", 1.5).is_err());
        assert!(demo.mask_pixels("pixel", 0.1, 99, true).is_err());
    }

    #[test]
    fn curve_is_monotone_in_alpha() {
        let demo = Demo::try_new(4).unwrap();
        let curve = demo.curve("pixel", true).unwrap();
        assert_eq!(curve.len(), CURVE_ALPHAS.len());
        for w in curve.windows(2) {
            assert!(w[1].mean_set_size <= w[0].mean_set_size);
            assert!(w[1].ignore_fraction >= w[0].ignore_fraction);
        }
        assert!(curve[0].coverage > curve.last().unwrap().coverage);
    }

    #[test]
    fn same_seed_same_pixels() {
        let a = Demo::try_new(5).unwrap().mask_pixels("kmeans", 0.05, 1, false).unwrap();
        let b = Demo::try_new(5).unwrap().mask_pixels("kmeans", 0.05, 1, false).unwrap();
        assert_eq!(a, b);
    }
}
