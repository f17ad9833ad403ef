//! Synthetic scenes, observation features and a simulated segmentation model
//! with controllable miscalibration.
//!
//! Every image is generated from seeds derived from `(master_seed, image_index)`,
//! so calibration and test images are i.i.d. draws from one configured
//! distribution and generation order never changes the output.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{read_tensor, write_file_atomic, write_tensor, FeatureImage, LabelMap, ProbabilityMap, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub shape_kinds: Vec<ShapeKind>,
    /// Class 0 is background and shapes carry classes `1..K`.
    pub background: bool,
    /// Target share of pixels left uncovered by shapes.
    pub background_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            height: 64,
            width: 64,
            min_shapes: 1,
            max_shapes: 4,
            shape_kinds: vec![ShapeKind::Rectangle, ShapeKind::Ellipse],
            background: true,
            background_fraction: 0.7,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes >= IGNORE as usize {
            return Err(Error::Validation(format!("class count {} out of range", self.classes)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Validation("scene must be non-empty".into()));
        }
        if !(self.background_fraction > 0.0 && self.background_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "background_fraction {} outside (0,1)",
                self.background_fraction
            )));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::Validation("min_shapes exceeds max_shapes".into()));
        }
        if self.max_shapes > 0 && self.shape_kinds.is_empty() {
            return Err(Error::Validation("no shape kinds configured".into()));
        }
        Ok(())
    }
}

fn paint(labels: &mut [u16], height: usize, width: usize, kind: ShapeKind, center: (f64, f64), half: (f64, f64), class: u16) {
    let (cy, cx) = center;
    let (hy, hx) = half;
    let r0 = (cy - hy).floor().max(0.0) as usize;
    let r1 = ((cy + hy).ceil() as usize).min(height);
    let c0 = (cx - hx).floor().max(0.0) as usize;
    let c1 = ((cx + hx).ceil() as usize).min(width);
    for r in r0..r1 {
        for c in c0..c1 {
            let dy = (r as f64 + 0.5 - cy) / hy;
            let dx = (c as f64 + 0.5 - cx) / hx;
            let inside = match kind {
                ShapeKind::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
                ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
            };
            if inside {
                labels[r * width + c] = class;
            }
        }
    }
}

/// Paints random rectangles and ellipses over a base class until the
/// foreground share approaches `1 - background_fraction`.
pub fn gen_scene(cfg: &SceneConfig) -> Result<LabelMap> {
    cfg.validate()?;
    let (h, w, k) = (cfg.height, cfg.width, cfg.classes);
    let mut rng = rng_from(cfg.seed);
    let base: u16 = if cfg.background { 0 } else { rng.random_range(0..k) as u16 };
    let mut labels = vec![base; h * w];
    let n_shapes = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let target = (1.0 - cfg.background_fraction) * (h * w) as f64;

    for i in 0..n_shapes {
        let covered = labels.iter().filter(|&&l| l != base).count() as f64;
        let deficit = target - covered;
        if deficit <= 0.0 {
            break;
        }
        let area = (deficit / (n_shapes - i) as f64 * rng.random_range(0.7..1.3)).max(1.0);
        let kind = cfg.shape_kinds[rng.random_range(0..cfg.shape_kinds.len())];
        let aspect = rng.random_range(-std::f64::consts::LN_2..std::f64::consts::LN_2).exp();
        // Half-extents so that the painted area is `area`.
        let quarter_area = match kind {
            ShapeKind::Rectangle => area / 4.0,
            ShapeKind::Ellipse => area / std::f64::consts::PI,
        };
        let hy = (quarter_area / aspect).sqrt().max(0.5);
        let hx = (quarter_area * aspect).sqrt().max(0.5);
        let cy = if 2.0 * hy < h as f64 { rng.random_range(hy..=h as f64 - hy) } else { h as f64 / 2.0 };
        let cx = if 2.0 * hx < w as f64 { rng.random_range(hx..=w as f64 - hx) } else { w as f64 / 2.0 };
        let class = if cfg.background {
            rng.random_range(1..k) as u16
        } else {
            let c = rng.random_range(0..k - 1) as u16;
            if c >= base {
                c + 1
            } else {
                c
            }
        };
        paint(&mut labels, h, w, kind, (cy, cx), (hy, hx), class);
    }
    LabelMap::new(h, w, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationConfig {
    /// Must be at least the class count; class `c` has mean `separation * e_c`.
    pub feature_dim: usize,
    pub separation: f64,
    /// Per-pixel i.i.d. Gaussian noise.
    pub noise: f64,
    /// Per-image Gaussian offset shared by all pixels of the image.
    #[serde(default)]
    pub style_sigma: f64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            separation: 2.0,
            noise: 1.0,
            style_sigma: 1.0,
        }
    }
}

impl ObservationConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.feature_dim < classes {
            return Err(Error::Validation(format!(
                "feature_dim {} is smaller than class count {classes}",
                self.feature_dim
            )));
        }
        if !(self.noise >= 0.0 && self.style_sigma >= 0.0 && self.separation.is_finite()) {
            return Err(Error::Validation("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    /// Row-major `classes x feature_dim` class means.
    pub fn class_means(&self, classes: usize) -> Vec<f64> {
        let mut means = vec![0.0; classes * self.feature_dim];
        for c in 0..classes {
            means[c * self.feature_dim + c] = self.separation;
        }
        means
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Class-mean features plus per-image and per-pixel Gaussian noise.
/// `IGNORE` pixels get a zero mean.
pub fn gen_observation(labels: &LabelMap, classes: usize, cfg: &ObservationConfig, seed: u64) -> Result<FeatureImage> {
    cfg.validate(classes)?;
    labels.validate_classes(classes)?;
    let dim = cfg.feature_dim;
    let pixels = labels.pixels();
    let means = cfg.class_means(classes);
    let mut rng = rng_from(seed);
    let style: Vec<f64> = (0..dim).map(|_| cfg.style_sigma * normal(&mut rng)).collect();
    let mut values = vec![0.0; dim * pixels];
    for (p, &l) in labels.labels().iter().enumerate() {
        for d in 0..dim {
            let mean = if l == IGNORE { 0.0 } else { means[l as usize * dim + d] };
            values[d * pixels + p] = mean + style[d] + cfg.noise * normal(&mut rng);
        }
    }
    FeatureImage::new(dim, labels.height(), labels.width(), values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseField {
    Uniform { sigma: f64 },
    /// Columns left of the midline use `left`, the rest `right`.
    LeftRight { left: f64, right: f64 },
}

impl NoiseField {
    pub fn sigma_at(&self, col: usize, width: usize) -> f64 {
        match *self {
            NoiseField::Uniform { sigma } => sigma,
            NoiseField::LeftRight { left, right } => {
                if col < width / 2 {
                    left
                } else {
                    right
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseField::Uniform { sigma } => sigma >= 0.0,
            NoiseField::LeftRight { left, right } => left >= 0.0 && right >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation("noise sigma must be non-negative".into()))
        }
    }
}

/// With probability `prob`, a pixel of class `from` gets its `to` logit raised above the true one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusionPair {
    pub from: usize,
    pub to: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimModelConfig {
    /// Logit added to the true class.
    pub signal: f64,
    pub noise: NoiseField,
    #[serde(default)]
    pub confusion: Vec<ConfusionPair>,
    /// How far a confused logit exceeds the true-class logit.
    #[serde(default = "default_margin")]
    pub confusion_margin: f64,
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_margin() -> f64 {
    1.0
}

impl Default for SimModelConfig {
    fn default() -> Self {
        Self {
            signal: 4.0,
            noise: NoiseField::Uniform { sigma: 1.0 },
            confusion: (1..5).map(|c| ConfusionPair { from: c, to: 0, prob: 0.3 }).collect(),
            confusion_margin: 1.0,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl SimModelConfig {
    /// Foreground classes `1..classes` confused with background at rate `prob`.
    pub fn background_biased(classes: usize, prob: f64) -> Self {
        Self {
            confusion: (1..classes).map(|c| ConfusionPair { from: c, to: 0, prob }).collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        self.noise.validate()?;
        if !(self.temperature > 0.0) {
            return Err(Error::Validation(format!("temperature {} must be positive", self.temperature)));
        }
        if !self.signal.is_finite() || !self.confusion_margin.is_finite() {
            return Err(Error::Validation("signal and margin must be finite".into()));
        }
        for pair in &self.confusion {
            if pair.from >= classes || pair.to >= classes || pair.from == pair.to {
                return Err(Error::Validation(format!(
                    "confusion {} -> {} invalid for {classes} classes",
                    pair.from, pair.to
                )));
            }
            if !(0.0..=1.0).contains(&pair.prob) {
                return Err(Error::Validation(format!("confusion probability {} outside [0,1]", pair.prob)));
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
}

/// Probability maps from noisy one-hot logits, standing in for a pre-trained
/// segmentation model's output.
pub fn simulate_model(labels: &LabelMap, classes: usize, cfg: &SimModelConfig) -> Result<ProbabilityMap> {
    cfg.validate(classes)?;
    labels.validate_classes(classes)?;
    let (h, w) = (labels.height(), labels.width());
    let plane = h * w;
    let mut rng = rng_from(cfg.seed);
    let mut values = vec![0.0; classes * plane];
    let mut logits = vec![0.0; classes];
    for (p, &l) in labels.labels().iter().enumerate() {
        logits.iter_mut().for_each(|z| *z = 0.0);
        if l != IGNORE {
            let y = l as usize;
            logits[y] = cfg.signal;
            for pair in cfg.confusion.iter().filter(|c| c.from == y) {
                if rng.random::<f64>() < pair.prob {
                    logits[pair.to] = cfg.signal + cfg.confusion_margin;
                }
            }
        }
        let sigma = cfg.noise.sigma_at(p % w, w);
        for z in logits.iter_mut() {
            *z = (*z + sigma * normal(&mut rng)) / cfg.temperature;
        }
        softmax_in_place(&mut logits);
        for (j, &v) in logits.iter().enumerate() {
            values[j * plane + p] = v.clamp(0.0, 1.0);
        }
    }
    ProbabilityMap::new(classes, h, w, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub scene: SceneConfig,
    pub model: SimModelConfig,
    pub observation: ObservationConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_labeled: 20,
            n_unlabeled: 200,
            n_test: 100,
            scene: SceneConfig::default(),
            model: SimModelConfig::default(),
            observation: ObservationConfig::default(),
        }
    }
}

const STREAM_SCENE: u64 = 1;
const STREAM_OBSERVATION: u64 = 2;
const STREAM_MODEL: u64 = 3;

/// One generated image with everything the pipeline consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub labels: LabelMap,
    pub probs: ProbabilityMap,
    pub features: FeatureImage,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate(self.scene.classes)?;
        self.observation.validate(self.scene.classes)?;
        if self.n_labeled == 0 {
            return Err(Error::Validation("n_labeled must be positive".into()));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.scene.classes
    }

    /// Seeds of image `index` (global across partitions): scene, observation, model.
    pub fn image_seeds(&self, index: usize) -> [u64; 3] {
        let i = index as u64;
        [
            derive_seed(self.seed, STREAM_SCENE, i),
            derive_seed(self.seed, STREAM_OBSERVATION, i),
            derive_seed(self.seed, STREAM_MODEL, i),
        ]
    }

    pub fn generate_image(&self, index: usize) -> Result<SyntheticImage> {
        let [scene_seed, obs_seed, model_seed] = self.image_seeds(index);
        let labels = gen_scene(&SceneConfig {
            seed: scene_seed,
            ..self.scene.clone()
        })?;
        let k = self.classes();
        let probs = simulate_model(
            &labels,
            k,
            &SimModelConfig {
                seed: model_seed,
                ..self.model.clone()
            },
        )?;
        let features = gen_observation(&labels, k, &self.observation, obs_seed)?;
        Ok(SyntheticImage { labels, probs, features })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Labeled,
    Unlabeled,
    Test,
}

impl Partition {
    fn prefix(self) -> char {
        match self {
            Partition::Labeled => 'l',
            Partition::Unlabeled => 'u',
            Partition::Test => 't',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    /// Global image index; seeds derive from it.
    pub index: usize,
    pub scene_seed: u64,
    pub labels: String,
    pub probs: String,
    pub features: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partitions {
    pub labeled: Vec<ImageEntry>,
    pub unlabeled: Vec<ImageEntry>,
    pub test: Vec<ImageEntry>,
}

impl Partitions {
    pub fn get(&self, which: Partition) -> &[ImageEntry] {
        match which {
            Partition::Labeled => &self.labeled,
            Partition::Unlabeled => &self.unlabeled,
            Partition::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub classes: usize,
    pub scene_cfg: SceneConfig,
    pub model_cfg: SimModelConfig,
    pub observation_cfg: ObservationConfig,
    pub partitions: Partitions,
}

impl Manifest {
    pub fn config(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.seed,
            n_labeled: self.partitions.labeled.len(),
            n_unlabeled: self.partitions.unlabeled.len(),
            n_test: self.partitions.test.len(),
            scene: self.scene_cfg.clone(),
            model: self.model_cfg.clone(),
            observation: self.observation_cfg.clone(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        manifest.config().validate()?;
        Ok(manifest)
    }
}

/// A manifest together with the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let manifest = Manifest::load(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, manifest })
    }

    pub fn classes(&self) -> usize {
        self.manifest.classes
    }

    pub fn entries(&self, which: Partition) -> &[ImageEntry] {
        self.manifest.partitions.get(which)
    }

    pub fn labels(&self, entry: &ImageEntry) -> Result<LabelMap> {
        let l: LabelMap = read_tensor(self.root.join(&entry.labels))?;
        l.validate_classes(self.classes())?;
        Ok(l)
    }

    pub fn probs(&self, entry: &ImageEntry) -> Result<ProbabilityMap> {
        read_tensor(self.root.join(&entry.probs))
    }

    pub fn features(&self, entry: &ImageEntry) -> Result<FeatureImage> {
        read_tensor(self.root.join(&entry.features))
    }
}

/// Writes every partition's tensors under `out_dir/images/` plus `out_dir/manifest.json`.
pub fn gen_dataset(cfg: &DatasetConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let mut index = 0;
    let mut make = |which: Partition, count: usize| -> Result<Vec<ImageEntry>> {
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let id = format!("{}{i:04}", which.prefix());
            let img = cfg.generate_image(index)?;
            let rel = |name: &str| format!("images/{id}/{name}.cmtf");
            let dir = images_dir.join(&id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_tensor(out_dir.join(rel("labels")), &img.labels)?;
            write_tensor(out_dir.join(rel("probs")), &img.probs)?;
            write_tensor(out_dir.join(rel("features")), &img.features)?;
            entries.push(ImageEntry {
                id: id.clone(),
                index,
                scene_seed: cfg.image_seeds(index)[0],
                labels: rel("labels"),
                probs: rel("probs"),
                features: rel("features"),
            });
            index += 1;
        }
        Ok(entries)
    };
    let labeled = make(Partition::Labeled, cfg.n_labeled)?;
    let unlabeled = make(Partition::Unlabeled, cfg.n_unlabeled)?;
    let test = make(Partition::Test, cfg.n_test)?;

    let manifest = Manifest {
        seed: cfg.seed,
        classes: cfg.classes(),
        scene_cfg: cfg.scene.clone(),
        model_cfg: cfg.model.clone(),
        observation_cfg: cfg.observation.clone(),
        partitions: Partitions { labeled, unlabeled, test },
    };
    write_file_atomic(&out_dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_scene(seed: u64) -> SceneConfig {
        SceneConfig {
            height: 32,
            width: 32,
            seed,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn zero_shapes_is_all_background() {
        let cfg = SceneConfig {
            min_shapes: 0,
            max_shapes: 0,
            ..small_scene(3)
        };
        assert!(gen_scene(&cfg).unwrap().labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn scene_is_deterministic_per_seed() {
        assert_eq!(gen_scene(&small_scene(9)).unwrap(), gen_scene(&small_scene(9)).unwrap());
        assert_ne!(gen_scene(&small_scene(9)).unwrap(), gen_scene(&small_scene(10)).unwrap());
    }

    #[test]
    fn background_fraction_is_met_on_average() {
        let fractions: Vec<f64> = (0..100)
            .map(|s| {
                let m = gen_scene(&SceneConfig { seed: s, ..SceneConfig::default() }).unwrap();
                m.labels().iter().filter(|&&l| l == 0).count() as f64 / m.pixels() as f64
            })
            .collect();
        let mean = fractions.iter().sum::<f64>() / 100.0;
        assert!((mean - 0.7).abs() <= 0.1, "mean background fraction {mean}");
        assert!(fractions.iter().all(|f| (f - 0.7).abs() <= 0.2));
    }

    #[test]
    fn foreground_shapes_never_use_background_class() {
        for s in 0..20 {
            let m = gen_scene(&small_scene(s)).unwrap();
            m.validate_classes(5).unwrap();
        }
        let cfg = SceneConfig {
            background: false,
            ..small_scene(1)
        };
        gen_scene(&cfg).unwrap().validate_classes(5).unwrap();
    }

    #[test]
    fn invalid_scene_configs() {
        assert!(gen_scene(&SceneConfig { background_fraction: 1.0, ..small_scene(0) }).is_err());
        assert!(gen_scene(&SceneConfig { min_shapes: 5, max_shapes: 2, ..small_scene(0) }).is_err());
    }

    #[test]
    fn noiseless_observation_is_constant_per_class() {
        let labels = gen_scene(&small_scene(4)).unwrap();
        let cfg = ObservationConfig { noise: 0.0, style_sigma: 0.0, ..ObservationConfig::default() };
        let f = gen_observation(&labels, 5, &cfg, 1).unwrap();
        let means = cfg.class_means(5);
        for (p, &l) in labels.labels().iter().enumerate() {
            for d in 0..cfg.feature_dim {
                assert_eq!(f.feature(d, p), means[l as usize * cfg.feature_dim + d]);
            }
        }
        // Separable: feature `c` is largest exactly on class-`c` pixels.
        for (p, &l) in labels.labels().iter().enumerate() {
            let best = (0..5).max_by(|&a, &b| f.feature(a, p).total_cmp(&f.feature(b, p))).unwrap();
            assert_eq!(best, l as usize);
        }
    }

    #[test]
    fn class_means_recovered_by_averaging() {
        let labels = gen_scene(&SceneConfig { seed: 2, ..SceneConfig::default() }).unwrap();
        let cfg = ObservationConfig { style_sigma: 0.0, noise: 0.5, ..ObservationConfig::default() };
        let f = gen_observation(&labels, 5, &cfg, 8).unwrap();
        let means = cfg.class_means(5);
        let n0 = labels.labels().iter().filter(|&&l| l == 0).count() as f64;
        for d in 0..cfg.feature_dim {
            let avg: f64 = labels
                .labels()
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == 0)
                .map(|(p, _)| f.feature(d, p))
                .sum::<f64>()
                / n0;
            // Standard error is 0.5 / sqrt(n0) < 0.01 here.
            assert!((avg - means[d]).abs() < 0.05, "dim {d}: {avg}");
        }
    }

    #[test]
    fn noiseless_model_recovers_labels() {
        let labels = gen_scene(&small_scene(5)).unwrap();
        let cfg = SimModelConfig {
            noise: NoiseField::Uniform { sigma: 0.0 },
            confusion: vec![],
            ..SimModelConfig::default()
        };
        let p = simulate_model(&labels, 5, &cfg).unwrap();
        assert!(p.is_normalized());
        assert_eq!(p.argmax(), labels);
    }

    #[test]
    fn huge_temperature_gives_uniform() {
        let labels = gen_scene(&small_scene(6)).unwrap();
        let cfg = SimModelConfig { temperature: 1e9, ..SimModelConfig::default() };
        let p = simulate_model(&labels, 5, &cfg).unwrap();
        assert!(p.values().iter().all(|v| (v - 0.2).abs() < 1e-6));
    }

    #[test]
    fn confusion_rate_matches_configuration() {
        let labels = LabelMap::filled(100, 100, 1).unwrap();
        let cfg = SimModelConfig {
            noise: NoiseField::Uniform { sigma: 0.0 },
            confusion: vec![ConfusionPair { from: 1, to: 2, prob: 0.3 }],
            ..SimModelConfig::default()
        };
        let p = simulate_model(&labels, 5, &cfg).unwrap();
        let wrong = p.argmax().labels().iter().filter(|&&l| l == 2).count() as f64 / 10_000.0;
        // Binomial sd is about 0.0046.
        assert!((wrong - 0.3).abs() < 0.02, "{wrong}");
    }

    #[test]
    fn model_config_validation() {
        let bad = SimModelConfig { temperature: 0.0, ..SimModelConfig::default() };
        assert!(bad.validate(5).is_err());
        let bad = SimModelConfig { confusion: vec![ConfusionPair { from: 1, to: 9, prob: 0.1 }], ..SimModelConfig::default() };
        assert!(bad.validate(5).is_err());
    }

    #[test]
    fn dataset_round_trip_and_regeneration() {
        let cfg = DatasetConfig {
            n_labeled: 2,
            n_unlabeled: 3,
            n_test: 1,
            scene: SceneConfig { height: 8, width: 8, ..SceneConfig::default() },
            ..DatasetConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = gen_dataset(&cfg, a.path()).unwrap();
        assert_eq!(m.partitions.labeled.len(), 2);
        assert_eq!(m.partitions.unlabeled.len(), 3);
        assert_eq!(m.partitions.test.len(), 1);
        let mut indices: Vec<usize> = [&m.partitions.labeled, &m.partitions.unlabeled, &m.partitions.test]
            .iter()
            .flat_map(|p| p.iter().map(|e| e.index))
            .collect();
        indices.sort();
        indices.dedup();
        assert_eq!(indices.len(), 6);

        let m2 = gen_dataset(&Manifest::load(a.path().join("manifest.json")).unwrap().config(), b.path()).unwrap();
        assert_eq!(m, m2);
        for e in m.partitions.labeled.iter().chain(&m.partitions.test) {
            for rel in [&e.labels, &e.probs, &e.features] {
                assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
            }
        }
        let ds = Dataset::open(a.path().join("manifest.json")).unwrap();
        let e = &ds.entries(Partition::Unlabeled)[1];
        assert_eq!(ds.labels(e).unwrap(), cfg.generate_image(e.index).unwrap().labels);
    }
}
