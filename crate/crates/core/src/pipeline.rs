//! Run configuration and the stage functions behind the command line: each
//! stage reads the artifacts of its predecessors from one run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::atlas::{build_atlas, generate_query_anchors_with, Atlas};
use crate::error::{Error, Result};
use crate::explain::{attention_report, ExplainConfig};
use crate::geometry::{iou, map_coco, size_subsets, BoxSet, ClassDetection, EvalResult};
use crate::model::{FeatureLevel, FocusedDecoder, ModelConfig};
use crate::nn::ParamStore;
use crate::phantom::{generate_dataset, DatasetManifest, PhantomConfig, Split};
use crate::preprocess::{preprocess_dataset, PreprocessConfig};
use crate::training::{self, ground_truth, load_split, predict_samples, TrainConfig, TrainSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_samples: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_samples: 140,
            split: [100.0 / 140.0, 20.0 / 140.0, 20.0 / 140.0],
        }
    }
}

/// Every module configuration in one document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub phantom: PhantomConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub explain: ExplainConfig,
}

impl RunConfig {
    /// Parses JSON, reporting the path of the offending field on failure.
    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            format!("{path}: {}", e.into_inner())
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        crate::phantom::split_counts(self.dataset.num_samples, self.dataset.split)?;
        self.phantom.validate()?;
        self.preprocess.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let div = self.model.backbone.divisor();
        if self.preprocess.target_size.iter().any(|&s| s % div != 0) {
            return Err(Error::Config(format!(
                "preprocess.target_size {:?} must be divisible by {div} for {} backbone levels",
                self.preprocess.target_size, self.model.backbone.num_down_levels
            )));
        }
        Ok(())
    }

    pub fn apply(&mut self, ablation: Ablation) {
        let m = &mut self.model;
        match ablation {
            Ablation::NoAnchors => m.use_anchors = false,
            Ablation::OneQuery => m.queries_per_class = 1,
            Ablation::NoRestriction => m.use_mask_restriction = false,
            Ablation::Level(l) => m.input_level = l,
        }
    }
}

/// The ablation toggles exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    NoAnchors,
    OneQuery,
    NoRestriction,
    Level(FeatureLevel),
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "no-anchors" => Ablation::NoAnchors,
            "one-query" => Ablation::OneQuery,
            "no-restriction" => Ablation::NoRestriction,
            "level-P2" => Ablation::Level(FeatureLevel::P2),
            "level-P3" => Ablation::Level(FeatureLevel::P3),
            "level-P4" => Ablation::Level(FeatureLevel::P4),
            "level-P5" => Ablation::Level(FeatureLevel::P5),
            _ => {
                return Err(format!(
                    "unknown ablation {s:?}; expected no-anchors, one-query, no-restriction or level-P3/P4/P5"
                ))
            }
        })
    }
}

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn raw(&self) -> PathBuf {
        self.root.join("data/raw")
    }
    pub fn preprocessed(&self) -> PathBuf {
        self.root.join("data/preprocessed")
    }
    pub fn atlas(&self) -> PathBuf {
        self.root.join("atlas/atlas.json")
    }
    pub fn masks(&self) -> PathBuf {
        self.root.join("atlas/masks")
    }
    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.train().join(training::CHECKPOINT_FILE)
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn detections(&self) -> PathBuf {
        self.eval().join("detections.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.eval().join("metrics.json")
    }
    pub fn baseline(&self) -> PathBuf {
        self.eval().join("anchor_baseline.json")
    }
    pub fn explain(&self) -> PathBuf {
        self.root.join("explain")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes the resolved configuration snapshot.
pub fn write_snapshot(run: &RunDir, config: &RunConfig) -> Result<()> {
    fs::create_dir_all(&run.root).map_err(|e| Error::io(&run.root, e))?;
    let path = run.config();
    fs::write(&path, config.to_json() + "\n").map_err(|e| Error::io(&path, e))
}

pub fn run_phantom(run: &RunDir, config: &RunConfig) -> Result<DatasetManifest> {
    generate_dataset(&config.phantom, config.dataset.num_samples, config.dataset.split, &run.raw())
}

pub fn run_preprocess(run: &RunDir, config: &RunConfig) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::read(&run.raw())?;
    let (out, report) = preprocess_dataset(
        &manifest,
        &run.raw(),
        &run.preprocessed(),
        &config.preprocess,
        config.phantom.num_classes,
    )?;
    for d in &report.discarded {
        log::warn!("discarded {}: {}", d.sample_id, d.reason);
    }
    Ok(out)
}

/// Builds the atlas from the train and validation boxes and dumps the
/// feature-level attention masks for inspection.
pub fn run_atlas(run: &RunDir, config: &RunConfig) -> Result<Atlas> {
    let root = run.preprocessed();
    let manifest = DatasetManifest::read(&root)?;
    let boxes = manifest
        .entries
        .iter()
        .filter(|e| e.split != Split::Test)
        .map(|e| Ok(e.load(&root)?.boxes))
        .collect::<Result<Vec<BoxSet>>>()?;
    let atlas = build_atlas(&boxes, config.phantom.num_classes)?;
    fs::create_dir_all(run.masks()).map_err(|e| Error::io(run.masks(), e))?;
    atlas.write(&run.atlas())?;
    let model = build_model::<f32>(config, &atlas)?.0;
    if let Some(mask) = &model.mask {
        mask.dump(&run.masks())?;
    }
    Ok(atlas)
}

pub fn build_model<T: crate::tensor::Float>(config: &RunConfig, atlas: &Atlas) -> Result<(FocusedDecoder, ParamStore<T>)> {
    FocusedDecoder::new(&config.model, atlas, config.preprocess.target_size, config.train.seed)
}

pub fn run_train(run: &RunDir, config: &RunConfig) -> Result<TrainSummary> {
    let atlas = Atlas::read(&run.atlas())?;
    let (model, mut params) = build_model::<f32>(config, &atlas)?;
    let root = run.preprocessed();
    let manifest = DatasetManifest::read(&root)?;
    let train_set = load_split(&manifest, &root, Split::Train)?;
    let val_set = load_split(&manifest, &root, Split::Val)?;
    log::info!(
        "training on {} samples ({} validation), {} parameters",
        train_set.len(),
        val_set.len(),
        params.num_scalars()
    );
    training::train(&model, &mut params, &train_set, &val_set, &config.train, &run.train())
}

/// Per class-sample pair: IoU of the selected box against the best IoU any
/// of the class's untrained anchors reaches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorBaseline {
    pub pairs: usize,
    pub wins: usize,
    pub win_fraction: f64,
    pub mean_selected_iou: f64,
    pub mean_best_anchor_iou: f64,
}

pub fn anchor_baseline(
    atlas: &Atlas,
    predictions: &BTreeMap<String, Vec<ClassDetection>>,
    gt: &BTreeMap<String, BoxSet>,
) -> AnchorBaseline {
    // the baseline always uses the full 27-anchor layout
    let anchors = generate_query_anchors_with(atlas, 3);
    let (mut pairs, mut wins, mut sel_sum, mut base_sum) = (0, 0, 0.0, 0.0);
    for (sample, boxes) in gt {
        for (class, target) in boxes {
            let Some(pos) = anchors.class_ids.iter().position(|c| c == class) else { continue };
            let best = anchors
                .class_anchors(pos)
                .iter()
                .map(|a| iou(&a.to_box(), target))
                .fold(0.0, f64::max);
            let selected = predictions
                .get(sample)
                .and_then(|d| d.iter().find(|d| d.class == *class))
                .map_or(0.0, |d| iou(&d.bbox, target));
            pairs += 1;
            wins += usize::from(selected > best);
            sel_sum += selected;
            base_sum += best;
        }
    }
    let n = pairs.max(1) as f64;
    AnchorBaseline {
        pairs,
        wins,
        win_fraction: wins as f64 / n,
        mean_selected_iou: sel_sum / n,
        mean_best_anchor_iou: base_sum / n,
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub metrics: EvalResult,
    pub baseline: AnchorBaseline,
}

/// Evaluates on the test split, either by running the trained checkpoint or
/// by scoring an existing detections file.
pub fn run_eval(run: &RunDir, config: &RunConfig, detections: Option<&Path>) -> Result<EvalOutcome> {
    let atlas = Atlas::read(&run.atlas())?;
    let root = run.preprocessed();
    let manifest = DatasetManifest::read(&root)?;
    let test_set = load_split(&manifest, &root, Split::Test)?;
    let gt = ground_truth(&test_set);
    let predictions: BTreeMap<String, Vec<ClassDetection>> = match detections {
        Some(path) => read_json(path)?,
        None => {
            let (model, mut params) = build_model::<f32>(config, &atlas)?;
            params.load(&run.checkpoint())?;
            predict_samples(&model, &params, &test_set)?
        }
    };
    let metrics = map_coco(&predictions, &gt, &size_subsets(&atlas))?;
    let baseline = anchor_baseline(&atlas, &predictions, &gt);
    write_json(&run.detections(), &predictions)?;
    write_json(&run.metrics(), &metrics)?;
    write_json(&run.baseline(), &baseline)?;
    Ok(EvalOutcome { metrics, baseline })
}

pub fn run_explain(run: &RunDir, config: &RunConfig) -> Result<PathBuf> {
    let atlas = Atlas::read(&run.atlas())?;
    let root = run.preprocessed();
    let manifest = DatasetManifest::read(&root)?;
    let entry = match &config.explain.sample_id {
        Some(id) => manifest
            .entries
            .iter()
            .find(|e| &e.sample_id == id)
            .ok_or_else(|| Error::Argument(format!("unknown sample {id}")))?,
        None => manifest
            .split(Split::Test)
            .next()
            .ok_or_else(|| Error::Argument("no test sample to explain".into()))?,
    };
    let sample = entry.load(&root)?;
    let (model, mut params) = build_model::<f32>(config, &atlas)?;
    params.load(&run.checkpoint())?;
    let shape = sample.intensities.shape();
    let spacing = sample.intensities.spacing();
    let input = crate::tensor::Tensor::from_vec(&shape, sample.intensities.into_data())?;
    let pred = model.predict(&params, &input)?;
    let report = attention_report(&entry.sample_id, &pred, &config.explain, shape, spacing)?;
    let dir = run.explain().join(&entry.sample_id);
    report.write(&dir)?;
    Ok(dir)
}

/// Runs every stage in order.
pub fn run_all(run: &RunDir, config: &RunConfig) -> Result<EvalOutcome> {
    run_phantom(run, config)?;
    run_preprocess(run, config)?;
    run_atlas(run, config)?;
    run_train(run, config)?;
    let outcome = run_eval(run, config, None)?;
    run_explain(run, config)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(crate::phantom::split_counts(140, c.dataset.split).unwrap(), [100, 20, 20]);
    }

    #[test]
    fn schema_errors_name_the_field() {
        let e = RunConfig::from_json(r#"{"model": {"d_hiden": 3}}"#).unwrap_err();
        assert!(e.starts_with("model"), "{e}");
        let e = RunConfig::from_json(r#"{"train": {"epochs": "x"}}"#).unwrap_err();
        assert!(e.starts_with("train.epochs"), "{e}");
        let partial = RunConfig::from_json(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.model, ModelConfig::default());
    }

    #[test]
    fn ablations_toggle_the_model() {
        let mut c = RunConfig::default();
        for s in ["no-anchors", "one-query", "no-restriction", "level-P5"] {
            c.apply(s.parse().unwrap());
        }
        assert!(!c.model.use_anchors && !c.model.use_mask_restriction);
        assert_eq!(c.model.queries_per_class, 1);
        assert_eq!(c.model.input_level, FeatureLevel::P5);
        c.validate().unwrap();
        assert!("level-P9".parse::<Ablation>().is_err());
    }

    #[test]
    fn indivisible_target_size_is_rejected() {
        let mut c = RunConfig::default();
        c.model.backbone.num_down_levels = 6;
        c.preprocess.target_size = [64, 64, 80];
        assert!(c.validate().is_err());
    }
}
