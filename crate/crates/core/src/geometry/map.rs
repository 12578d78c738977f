use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{iou, Box3, BoxSet};
use crate::atlas::Atlas;
use crate::error::{Error, Result};

/// A scored detection of one class in one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassDetection {
    pub class: u32,
    #[serde(rename = "box")]
    pub bbox: Box3,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeClass {
    #[serde(rename = "S")]
    Small,
    #[serde(rename = "M")]
    Medium,
    #[serde(rename = "L")]
    Large,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map_coco: f64,
    pub ap_per_threshold: Vec<f64>,
    /// `None` when no class of the subset has ground truth.
    pub map_small: Option<f64>,
    pub map_medium: Option<f64>,
    pub map_large: Option<f64>,
    /// Per-class AP averaged over the IoU thresholds.
    pub per_class_ap: BTreeMap<u32, f64>,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95 computed without accumulated error.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// All-point interpolated AP of a ranked hit list against `num_gt` ground
/// truths. The precision envelope at each hit is summed, then divided by
/// `num_gt`.
pub fn ap_all_point(ranked_hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(ranked_hits.len());
    let mut tp = 0usize;
    for (rank, &hit) in ranked_hits.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let area: f64 = ranked_hits
        .iter()
        .zip(&precision)
        .filter(|(&hit, _)| hit)
        .map(|(_, &p)| p)
        .sum();
    area / num_gt as f64
}

struct Candidate<'a> {
    sample: &'a str,
    bbox: Box3,
    confidence: f64,
}

/// COCO-style mAP over IoU thresholds 0.5:0.05:0.95 with S/M/L subsets.
///
/// `predictions` and `ground_truth` are keyed by sample ID. Detections of a
/// class are ranked by confidence (ties by sample ID) and greedily matched to
/// the unmatched ground truth of that class in the same sample.
pub fn map_coco(
    predictions: &BTreeMap<String, Vec<ClassDetection>>,
    ground_truth: &BTreeMap<String, BoxSet>,
    subsets: &BTreeMap<u32, SizeClass>,
) -> Result<EvalResult> {
    let classes: BTreeSet<u32> = ground_truth.values().flat_map(|s| s.keys().copied()).collect();
    if classes.is_empty() {
        return Err(Error::Eval("ground truth contains no boxes".into()));
    }
    let thresholds = iou_thresholds();

    // ap[class][threshold]
    let mut ap = BTreeMap::new();
    for &class in &classes {
        let num_gt = ground_truth.values().filter(|s| s.contains_key(&class)).count();
        let mut candidates: Vec<Candidate> = predictions
            .iter()
            .flat_map(|(sample, dets)| {
                dets.iter().filter(|d| d.class == class).map(move |d| Candidate {
                    sample: sample.as_str(),
                    bbox: d.bbox,
                    confidence: d.confidence,
                })
            })
            .collect();
        candidates.sort_by(|a, b| {
            b.confidence
                .total_cmp(&a.confidence)
                .then_with(|| a.sample.cmp(b.sample))
        });
        let per_t: Vec<f64> = thresholds
            .iter()
            .map(|&t| {
                let mut matched = BTreeSet::new();
                let hits: Vec<bool> = candidates
                    .iter()
                    .map(|c| {
                        let Some(gt) = ground_truth.get(c.sample).and_then(|s| s.get(&class))
                        else {
                            return false;
                        };
                        if matched.contains(c.sample) || iou(&c.bbox, gt) < t {
                            return false;
                        }
                        matched.insert(c.sample);
                        true
                    })
                    .collect();
                ap_all_point(&hits, num_gt)
            })
            .collect();
        ap.insert(class, per_t);
    }

    let mean_over = |selected: &[u32]| -> Option<(f64, Vec<f64>)> {
        if selected.is_empty() {
            return None;
        }
        let per_t: Vec<f64> = (0..thresholds.len())
            .map(|t| selected.iter().map(|c| ap[c][t]).sum::<f64>() / selected.len() as f64)
            .collect();
        Some((per_t.iter().sum::<f64>() / per_t.len() as f64, per_t))
    };

    let all: Vec<u32> = classes.iter().copied().collect();
    let (map, ap_per_threshold) = mean_over(&all).expect("nonempty class set");
    let subset_map = |size: SizeClass| {
        let sel: Vec<u32> = all
            .iter()
            .copied()
            .filter(|c| subsets.get(c) == Some(&size))
            .collect();
        mean_over(&sel).map(|(m, _)| m)
    };

    Ok(EvalResult {
        map_coco: map,
        ap_per_threshold,
        map_small: subset_map(SizeClass::Small),
        map_medium: subset_map(SizeClass::Medium),
        map_large: subset_map(SizeClass::Large),
        per_class_ap: ap
            .iter()
            .map(|(&c, v)| (c, v.iter().sum::<f64>() / v.len() as f64))
            .collect(),
    })
}

/// Assigns each atlas class to S/M/L by the volume fraction of its median box.
pub fn size_subsets(atlas: &Atlas) -> BTreeMap<u32, SizeClass> {
    atlas
        .classes
        .iter()
        .map(|(&c, entry)| {
            let occupancy: f64 = entry.median.iter().product();
            let size = if occupancy < 0.005 {
                SizeClass::Small
            } else if occupancy < 0.05 {
                SizeClass::Medium
            } else {
                SizeClass::Large
            };
            (c, size)
        })
        .collect()
}
