//! In-memory composition of the pipeline stages: score, calibrate, mask, train.

use serde::{Deserialize, Serialize};

use crate::calibrate::{calibrate, CalibrationConfig};
use crate::error::Result;
use crate::maskgen::resolve_mask;
use crate::nonconformity::{inverse_prediction_map, pool_scores, UnitAssignment};
use crate::synth::{DatasetConfig, NoiseField, ObservationConfig, SceneConfig, SimModelConfig, SyntheticImage};
use crate::tensor::{LabelMap, ProbabilityMap, QuantileField, Variant};
use crate::toytrain::{train, TrainRunConfig, TrainingData};

/// Calibrates a quantile field from labeled probability maps.
pub fn calibrate_images(
    calibration: &[(&ProbabilityMap, &LabelMap)],
    classes: usize,
    cfg: &CalibrationConfig,
) -> Result<QuantileField> {
    let maps = calibration
        .iter()
        .map(|(p, l)| inverse_prediction_map(p, l))
        .collect::<Result<Vec<_>>>()?;
    let pools = pool_scores(&maps, UnitAssignment::Pixel)?;
    let labels: Vec<LabelMap> = calibration.iter().map(|(_, l)| (*l).clone()).collect();
    calibrate(&pools, &labels, classes, cfg)
}

/// A generated dataset held in memory.
#[derive(Debug, Clone)]
pub struct SyntheticSplit {
    pub classes: usize,
    pub labeled: Vec<SyntheticImage>,
    pub unlabeled: Vec<SyntheticImage>,
    pub test: Vec<SyntheticImage>,
}

impl SyntheticSplit {
    /// Uses the same global image indexing as [`crate::synth::gen_dataset`].
    pub fn generate(cfg: &DatasetConfig) -> Result<Self> {
        cfg.validate()?;
        let range = |start: usize, n: usize| -> Result<Vec<SyntheticImage>> {
            (start..start + n).map(|i| cfg.generate_image(i)).collect()
        };
        Ok(Self {
            classes: cfg.classes(),
            labeled: range(0, cfg.n_labeled)?,
            unlabeled: range(cfg.n_labeled, cfg.n_unlabeled)?,
            test: range(cfg.n_labeled + cfg.n_unlabeled, cfg.n_test)?,
        })
    }

    pub fn calibrate(&self, cfg: &CalibrationConfig) -> Result<QuantileField> {
        let pairs: Vec<_> = self.labeled.iter().map(|i| (&i.probs, &i.labels)).collect();
        calibrate_images(&pairs, self.classes, cfg)
    }

    pub fn calibrated_masks(&self, field: &QuantileField, background: Option<usize>) -> Result<Vec<LabelMap>> {
        self.unlabeled
            .iter()
            .map(|i| resolve_mask(&i.probs, field, background).map(|m| m.into_inner()))
            .collect()
    }

    /// Per-pixel argmax of the simulated model, every pixel labeled.
    pub fn raw_masks(&self) -> Vec<LabelMap> {
        self.unlabeled.iter().map(|i| i.probs.argmax()).collect()
    }

    pub fn training_data(&self, pseudo: Vec<LabelMap>) -> Result<TrainingData> {
        let pair = |i: &SyntheticImage| (i.features.clone(), i.labels.clone());
        TrainingData::new(
            self.classes,
            self.labeled.iter().map(pair).collect(),
            self.unlabeled.iter().map(|i| i.features.clone()).collect(),
            pseudo,
            self.test.iter().map(pair).collect(),
        )
    }
}

/// Final test mIoU of the four paired training runs of the component ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub label_only: f64,
    pub raw_pseudo: f64,
    pub cp_stage1: f64,
    pub cp_self_reliance: f64,
}

impl AblationRow {
    /// raw <= CP Stage I <= CP + Stage II, and CP Stage I >= label-only.
    pub fn ordered(&self) -> bool {
        self.raw_pseudo <= self.cp_stage1
            && self.cp_stage1 <= self.cp_self_reliance
            && self.cp_stage1 >= self.label_only
    }
}

/// Desk-scale data for the component ablation: a noisy simulated model that
/// confuses most foreground pixels with background, and per-image feature
/// offsets that leave 20 labeled images short of the full distribution.
pub fn ablation_dataset_config(seed: u64) -> DatasetConfig {
    DatasetConfig {
        seed,
        n_labeled: 20,
        n_unlabeled: 120,
        n_test: 40,
        scene: SceneConfig {
            height: 32,
            width: 32,
            max_shapes: 3,
            ..SceneConfig::default()
        },
        model: SimModelConfig {
            signal: 3.0,
            noise: NoiseField::Uniform { sigma: 1.2 },
            ..SimModelConfig::background_biased(5, 0.9)
        },
        observation: ObservationConfig {
            feature_dim: 16,
            separation: 5.0,
            noise: 1.0,
            style_sigma: 2.0,
        },
    }
}

pub fn ablation_calibration() -> CalibrationConfig {
    CalibrationConfig::new(Variant::Pixel, 0.05)
}

/// 20 epochs, the last 5 in Stage II.
pub fn ablation_train_config(seed: u64) -> TrainRunConfig {
    TrainRunConfig {
        lr_init: 0.1,
        epochs: 20,
        stage_switch: 15,
        seed,
        ..TrainRunConfig::default()
    }
}

fn final_miou(data: &TrainingData, cfg: &TrainRunConfig) -> Result<f64> {
    let out = train(data, cfg)?;
    Ok(out.history.last().and_then(|r| r.test_miou).unwrap_or(f64::NAN))
}

/// Runs label-only, raw pseudo-labels, CP Stage I only and CP with self-reliance
/// on the same data and seed. `train_cfg.stage_switch` sets the Stage II start
/// of the last run; the Stage I-only runs train all epochs in Stage I.
pub fn run_ablation(split: &SyntheticSplit, calib: &CalibrationConfig, train_cfg: &TrainRunConfig) -> Result<AblationRow> {
    let field = split.calibrate(calib)?;
    let cp = split.calibrated_masks(&field, train_cfg.background)?;
    let stage1_only = TrainRunConfig {
        stage_switch: train_cfg.epochs,
        ..train_cfg.clone()
    };
    let cp_data = split.training_data(cp)?;
    Ok(AblationRow {
        seed: train_cfg.seed,
        label_only: final_miou(&cp_data, &TrainRunConfig { lambda0: 0.0, ..stage1_only.clone() })?,
        raw_pseudo: final_miou(&split.training_data(split.raw_masks())?, &stage1_only)?,
        cp_stage1: final_miou(&cp_data, &stage1_only)?,
        cp_self_reliance: final_miou(&cp_data, train_cfg)?,
    })
}
