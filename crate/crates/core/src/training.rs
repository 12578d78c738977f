//! Dynamic GIoU labels, the detection loss, AdamW with a step schedule, the
//! training loop and per-class inference.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::QueryAnchors;
use crate::error::{Error, Result};
use crate::geometry::{giou_grad, map_coco, Box3, BoxSet, ClassDetection};
use crate::model::{BlockNodes, BlockPrediction, FocusedDecoder};
use crate::nn::{Grads, Graph, NodeId, ParamStore};
use crate::phantom::{DatasetManifest, Split};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub giou: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            giou: 2.0,
            l1: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Epoch (0-based) from which the learning rate is multiplied by
    /// `lr_step_factor`; `None` means 70% of `epochs`.
    pub lr_step_epoch: Option<usize>,
    pub lr_step_factor: f64,
    pub loss_weights: LossWeights,
    /// Maximal global gradient norm; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Supervise absent-class queries with zero targets.
    pub bce_on_absent: bool,
    /// Standard deviation of additive Gaussian intensity noise; 0 disables.
    pub intensity_noise: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 2,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            lr_step_epoch: None,
            lr_step_factor: 0.1,
            loss_weights: LossWeights::default(),
            grad_clip: Some(1.0),
            bce_on_absent: false,
            intensity_noise: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn step_epoch(&self) -> usize {
        self.lr_step_epoch
            .unwrap_or_else(|| (0.7 * self.epochs as f64).round() as usize)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.step_epoch() {
            self.learning_rate * self.lr_step_factor
        } else {
            self.learning_rate
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.batch_size == 0 {
            return err("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0 && self.lr_step_factor >= 0.0) {
            return err("learning_rate, weight_decay and lr_step_factor must be non-negative");
        }
        if !(self.intensity_noise >= 0.0) {
            return err("intensity_noise must be non-negative");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return err("grad_clip must be positive");
        }
        let w = &self.loss_weights;
        if !(w.cls >= 0.0 && w.giou >= 0.0 && w.l1 >= 0.0) {
            return err("loss weights must be non-negative");
        }
        Ok(())
    }
}

/// Per-query confidence targets for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicLabels {
    /// Class-major, `#classes * queries_per_class` entries in [0, 1].
    pub labels: Vec<f64>,
    /// Within-class index of the query supervised with the box losses.
    pub matched_index: BTreeMap<u32, usize>,
    /// Per class position: ground truth present in the sample.
    pub presence: Vec<bool>,
}

/// Min-max normalized GIoU between each class's candidate boxes and its
/// ground truth. Equal GIoUs put the single label 1 on `center_index`; ties
/// for the maximum resolve to the lowest index.
pub fn labels_from_candidates(
    candidates: &[Box3],
    class_ids: &[u32],
    queries_per_class: usize,
    center_index: usize,
    gt: &BoxSet,
) -> DynamicLabels {
    let mut labels = vec![0.0; candidates.len()];
    let mut matched_index = BTreeMap::new();
    let mut presence = vec![false; class_ids.len()];
    for (pos, class) in class_ids.iter().enumerate() {
        let Some(target) = gt.get(class) else { continue };
        presence[pos] = true;
        let range = pos * queries_per_class..(pos + 1) * queries_per_class;
        let g: Vec<f64> = candidates[range.clone()]
            .iter()
            .map(|c| crate::geometry::giou(c, target))
            .collect();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in &g {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let out = &mut labels[range];
        if hi > lo {
            for (o, &v) in out.iter_mut().zip(&g) {
                *o = (v - lo) / (hi - lo);
            }
            // the argmax maps to exactly 1 and the argmin to exactly 0
            let best = g.iter().position(|&v| v == hi).expect("max exists");
            out[best] = 1.0;
            matched_index.insert(*class, best);
        } else {
            out[center_index] = 1.0;
            matched_index.insert(*class, center_index);
        }
    }
    DynamicLabels {
        labels,
        matched_index,
        presence,
    }
}

pub fn dynamic_labels(anchors: &QueryAnchors, gt: &BoxSet) -> DynamicLabels {
    let boxes: Vec<Box3> = anchors.anchors.iter().map(|a| a.to_box()).collect();
    labels_from_candidates(
        &boxes,
        &anchors.class_ids,
        anchors.queries_per_class(),
        anchors.center_index(),
        gt,
    )
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub bce: f64,
    pub giou: f64,
    pub l1: f64,
}

impl LossComponents {
    fn add(&mut self, o: &LossComponents) {
        self.total += o.total;
        self.bce += o.bce;
        self.giou += o.giou;
        self.l1 += o.l1;
    }

    fn scaled(&self, s: f64) -> Self {
        Self {
            total: self.total * s,
            bce: self.bce * s,
            giou: self.giou * s,
            l1: self.l1 * s,
        }
    }
}

/// One block's loss and its partial derivatives.
#[derive(Debug, Clone)]
pub struct BlockLoss {
    pub components: LossComponents,
    pub dlogits: Vec<f64>,
    pub dboxes: Vec<[f64; 6]>,
}

fn bce_with_logits(x: f64, y: f64) -> (f64, f64) {
    let loss = x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
    let sig = 1.0 / (1.0 + (-x).exp());
    (loss, sig - y)
}

/// Weighted BCE + GIoU + L1 loss of one block. Returns `None` when no class
/// is present (nothing to supervise).
#[allow(clippy::too_many_arguments)]
pub fn block_loss(
    logits: &[f64],
    boxes: &[Box3],
    labels: &DynamicLabels,
    gt: &BoxSet,
    class_ids: &[u32],
    queries_per_class: usize,
    weights: &LossWeights,
    bce_on_absent: bool,
) -> Option<BlockLoss> {
    let n_present = labels.presence.iter().filter(|&&p| p).count();
    if n_present == 0 {
        return None;
    }
    let mut dlogits = vec![0.0; logits.len()];
    let mut dboxes = vec![[0.0; 6]; boxes.len()];

    let supervised: Vec<usize> = (0..class_ids.len())
        .filter(|&p| labels.presence[p] || bce_on_absent)
        .collect();
    let n_bce = (supervised.len() * queries_per_class) as f64;
    let mut bce = 0.0;
    for &p in &supervised {
        for q in p * queries_per_class..(p + 1) * queries_per_class {
            let (l, d) = bce_with_logits(logits[q], labels.labels[q]);
            bce += l / n_bce;
            dlogits[q] = weights.cls * d / n_bce;
        }
    }

    let n_match = labels.matched_index.len() as f64;
    let (mut lg, mut l1) = (0.0, 0.0);
    for (p, class) in class_ids.iter().enumerate() {
        let Some(&m) = labels.matched_index.get(class) else { continue };
        let q = p * queries_per_class + m;
        let target = &gt[class];
        let (gv, gg) = giou_grad(&boxes[q], target);
        lg += (1.0 - gv) / n_match;
        for c in 0..6 {
            let diff = boxes[q].0[c] - target.0[c];
            l1 += diff.abs() / n_match;
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            dboxes[q][c] = (weights.giou * -gg[c] + weights.l1 * sign) / n_match;
        }
    }
    let total = weights.cls * bce + weights.giou * lg + weights.l1 * l1;
    Some(BlockLoss {
        components: LossComponents {
            total,
            bce,
            giou: lg,
            l1,
        },
        dlogits,
        dboxes,
    })
}

fn block_values<T: Float>(g: &Graph<T>, n: &BlockNodes) -> (Vec<f64>, Vec<Box3>) {
    let logits = g.value(n.logits).data().iter().map(|v| v.f64()).collect();
    let boxes = g
        .value(n.boxes)
        .data()
        .chunks(6)
        .map(|c| Box3(std::array::from_fn(|i| c[i].f64())))
        .collect();
    (logits, boxes)
}

/// Adds the summed per-block loss to the graph. With anchors the labels are
/// fixed per sample; without them they are recomputed from each block's
/// (detached) predictions.
pub fn detection_loss<T: Float>(
    g: &mut Graph<T>,
    model: &FocusedDecoder,
    nodes: &[BlockNodes],
    gt: &BoxSet,
    config: &TrainConfig,
) -> Result<Option<(NodeId, LossComponents)>> {
    let anchors = &model.anchors;
    let qpc = anchors.queries_per_class();
    let fixed = model.config.use_anchors.then(|| dynamic_labels(anchors, gt));
    let mut total: Option<NodeId> = None;
    let mut comps = LossComponents::default();
    for n in nodes {
        let (logits, boxes) = block_values(g, n);
        let labels = match &fixed {
            Some(l) => l.clone(),
            None => labels_from_candidates(&boxes, &anchors.class_ids, qpc, anchors.center_index(), gt),
        };
        let Some(bl) = block_loss(
            &logits,
            &boxes,
            &labels,
            gt,
            &anchors.class_ids,
            qpc,
            &config.loss_weights,
            config.bce_on_absent,
        ) else {
            return Ok(None);
        };
        comps.add(&bl.components);
        let dl = Tensor::from_vec(g.shape(n.logits), bl.dlogits.iter().map(|&v| T::of(v)).collect())?;
        let db = Tensor::from_vec(
            g.shape(n.boxes),
            bl.dboxes.iter().flatten().map(|&v| T::of(v)).collect(),
        )?;
        let s = g.scalar(T::of(bl.components.total), vec![n.logits, n.boxes], vec![dl, db])?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total.map(|t| (t, comps)))
}

/// Within-class index of the highest logit (equivalently the highest
/// sigmoid confidence); ties go to the lowest anchor index.
pub fn selected_index(logits: &[f64], class_pos: usize, queries_per_class: usize) -> usize {
    let row = &logits[class_pos * queries_per_class..(class_pos + 1) * queries_per_class];
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Highest-confidence candidate per class from one block.
pub fn select_detections(pred: &BlockPrediction, class_ids: &[u32], queries_per_class: usize) -> Vec<ClassDetection> {
    class_ids
        .iter()
        .enumerate()
        .map(|(p, &class)| {
            let q = p * queries_per_class + selected_index(&pred.logits, p, queries_per_class);
            ClassDetection {
                class,
                bbox: pred.boxes[q],
                confidence: 1.0 / (1.0 + (-pred.logits[q]).exp()),
            }
        })
        .collect()
}

/// One box per class from the last decoder block.
pub fn infer<T: Float>(model: &FocusedDecoder, params: &ParamStore<T>, input: &Tensor<T>) -> Result<Vec<ClassDetection>> {
    let pred = model.predict(params, input)?;
    Ok(select_detections(pred.last(), &pred.class_ids, pred.queries_per_class))
}

/// AdamW with decoupled weight decay on parameters of rank >= 2.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>, weight_decay: f64) -> Self {
        let zeros = || params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Grads<f32>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = self.eps as f32;
        for id in params.ids().collect::<Vec<_>>() {
            let decay = if params.get(id).shape().len() >= 2 {
                (lr * self.weight_decay) as f32
            } else {
                0.0
            };
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= decay * p[i];
                p[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// A preprocessed sample ready for the network.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub sample_id: String,
    pub input: Tensor<f32>,
    pub gt: BoxSet,
}

pub fn load_split(manifest: &DatasetManifest, root: &Path, split: Split) -> Result<Vec<TrainingSample>> {
    manifest
        .split(split)
        .map(|e| {
            let s = e.load(root)?;
            let shape = s.intensities.shape();
            Ok(TrainingSample {
                sample_id: s.sample_id,
                input: Tensor::from_vec(&shape, s.intensities.into_data())?,
                gt: s.boxes,
            })
        })
        .collect()
}

/// Last-block detections for every sample, keyed by sample ID.
pub fn predict_samples(
    model: &FocusedDecoder,
    params: &ParamStore<f32>,
    samples: &[TrainingSample],
) -> Result<BTreeMap<String, Vec<ClassDetection>>> {
    samples
        .iter()
        .map(|s| Ok((s.sample_id.clone(), infer(model, params, &s.input)?)))
        .collect()
}

pub fn ground_truth(samples: &[TrainingSample]) -> BTreeMap<String, BoxSet> {
    samples.iter().map(|s| (s.sample_id.clone(), s.gt.clone())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossComponents,
    pub val_map_coco: f64,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_map: f64,
    pub checkpoint: PathBuf,
}

fn noisy(input: &Tensor<f32>, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let dist = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("train: {e}")))?;
    Ok(input.map(|v| v + dist.sample(rng) as f32))
}

fn gradients(
    model: &FocusedDecoder,
    params: &ParamStore<f32>,
    sample: &TrainingSample,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(Grads<f32>, LossComponents)>> {
    let mut g = Graph::new(params);
    let nodes = if config.intensity_noise > 0.0 {
        model.forward(&mut g, &noisy(&sample.input, config.intensity_noise, rng)?)?
    } else {
        model.forward(&mut g, &sample.input)?
    };
    let Some((loss, comps)) = detection_loss(&mut g, model, &nodes, &sample.gt, config)? else {
        log::warn!("sample {} has no labeled class; skipped", sample.sample_id);
        return Ok(None);
    };
    Ok(Some((g.backward(loss)?, comps)))
}

/// Trains `params` in place; the parameters left in `params` are those of
/// the best validation epoch, which is also written to `out_dir`.
pub fn train(
    model: &FocusedDecoder,
    params: &mut ParamStore<f32>,
    train_set: &[TrainingSample],
    val_set: &[TrainingSample],
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainSummary> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training needs non-empty train and validation sets".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut csv = String::from("epoch,lr,loss_total,loss_bce,loss_giou,loss_l1,val_map_coco\n");
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    let mut opt = AdamW::new(params, config.weight_decay);
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut logs = Vec::new();
    let val_gt = ground_truth(val_set);
    let mut step = 0;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = config.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut epoch_loss = LossComponents::default();
        let mut counted = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut acc = Grads::new(params.len());
            let mut used = 0usize;
            for &i in batch {
                let Some((gr, comps)) = gradients(model, params, &train_set[i], config, &mut rng)? else { continue };
                if !comps.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        message: format!("non-finite loss on sample {}", train_set[i].sample_id),
                    });
                }
                acc.merge(gr);
                epoch_loss.add(&comps);
                used += 1;
            }
            if used == 0 {
                continue;
            }
            counted += used;
            acc.scale(1.0 / used as f32);
            let norm = acc.global_norm();
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    message: "non-finite gradient norm".into(),
                });
            }
            if let Some(c) = config.grad_clip {
                if norm > c {
                    acc.scale((c / norm) as f32);
                }
            }
            opt.step(params, &acc, lr);
            step += 1;
        }
        let mean = epoch_loss.scaled(1.0 / counted.max(1) as f64);
        let preds = predict_samples(model, params, val_set)?;
        let val = map_coco(&preds, &val_gt, &BTreeMap::new())?.map_coco;
        log::info!(
            "epoch {epoch}: lr {lr:.2e} loss {:.4} (bce {:.4}, giou {:.4}, l1 {:.4}) val mAP {val:.4} [{:.1}s]",
            mean.total,
            mean.bce,
            mean.giou,
            mean.l1,
            started.elapsed().as_secs_f64()
        );
        csv.push_str(&format!(
            "{epoch},{lr:e},{},{},{},{},{val}\n",
            mean.total, mean.bce, mean.giou, mean.l1
        ));
        fs::write(&log_path, &csv).map_err(|e| Error::io(&log_path, e))?;
        logs.push(EpochLog {
            epoch,
            lr,
            loss: mean,
            val_map_coco: val,
        });
        if best.as_ref().is_none_or(|(_, b, _)| val > *b) {
            params.save(&checkpoint)?;
            best = Some((epoch, val, params.clone()));
        }
    }
    let (best_epoch, best_val_map, best_params) = match best {
        Some(b) => b,
        None => {
            params.save(&checkpoint)?;
            (0, 0.0, params.clone())
        }
    };
    *params = best_params;
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    f.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainSummary {
        log: logs,
        best_epoch,
        best_val_map,
        checkpoint,
    })
}
