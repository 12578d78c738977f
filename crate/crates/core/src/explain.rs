//! Attention explainability: per-class cross-attention heatmaps and the
//! class-reduced self-attention matrix.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockPrediction, PredictionSet};
use crate::tensor::Tensor;
use crate::training::selected_index;
use crate::volume::Volume;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    /// Decoder block to export (0-based); `None` selects the last one.
    pub block: Option<usize>,
    /// Use only the selected (highest-confidence) query of each class
    /// instead of averaging all of the class's queries.
    pub matched_query_only: bool,
    /// Test sample to explain; `None` takes the first test sample.
    pub sample_id: Option<String>,
}

fn block_of(pred: &PredictionSet, block: Option<usize>) -> Result<(usize, &BlockPrediction)> {
    let n = pred.blocks.len();
    let b = block.unwrap_or(n - 1);
    pred.blocks
        .get(b)
        .map(|p| (b, p))
        .ok_or_else(|| Error::Argument(format!("block {b} out of range (model has {n})")))
}

fn class_pos(pred: &PredictionSet, class: u32) -> Result<usize> {
    pred.class_ids
        .iter()
        .position(|&c| c == class)
        .ok_or_else(|| Error::Argument(format!("unknown class {class}; known {:?}", pred.class_ids)))
}

/// Head-averaged cross-attention of one class at feature resolution,
/// `[D0, D1, D2]` in the same voxel order as the token sequence.
pub fn feature_heatmap(
    pred: &PredictionSet,
    class: u32,
    block: Option<usize>,
    matched_query_only: bool,
) -> Result<Tensor<f64>> {
    let pos = class_pos(pred, class)?;
    let (_, bp) = block_of(pred, block)?;
    let qpc = pred.queries_per_class;
    let queries: Vec<usize> = if matched_query_only {
        vec![pos * qpc + selected_index(&bp.logits, pos, qpc)]
    } else {
        (pos * qpc..(pos + 1) * qpc).collect()
    };
    let v = bp.cross_attention.shape()[1];
    let w = bp.cross_attention.data();
    let mut out = vec![0.0; v];
    for &q in &queries {
        for (o, &x) in out.iter_mut().zip(&w[q * v..(q + 1) * v]) {
            *o += x / queries.len() as f64;
        }
    }
    Tensor::from_vec(&pred.feature_grid, out)
}

/// Nearest-neighbor upsampling of a feature-resolution map to `shape`.
pub fn upsample_nearest(map: &Tensor<f64>, shape: [usize; 3]) -> Result<Volume<f32>> {
    let g = map.shape();
    if g.len() != 3 || (0..3).any(|a| g[a] == 0 || !shape[a].is_multiple_of(g[a])) {
        return Err(Error::Shape(format!("cannot upsample {g:?} to {shape:?}")));
    }
    let f: [usize; 3] = std::array::from_fn(|a| shape[a] / g[a]);
    let mut data = Vec::with_capacity(shape.iter().product());
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let idx = ((i / f[0]) * g[1] + j / f[1]) * g[2] + k / f[2];
                data.push(map.data()[idx] as f32);
            }
        }
    }
    Volume::from_vec(shape, [1.0; 3], data)
}

/// Cross-attention heatmap of `class` at input resolution.
pub fn export_cross_attention(
    pred: &PredictionSet,
    class: u32,
    block: Option<usize>,
    matched_query_only: bool,
    input_shape: [usize; 3],
    spacing: [f64; 3],
) -> Result<Volume<f32>> {
    let map = feature_heatmap(pred, class, block, matched_query_only)?;
    let up = upsample_nearest(&map, input_shape)?;
    Volume::from_vec(input_shape, spacing, up.into_data())
}

/// Reduces a `[Nq, Nq]` query self-attention matrix to classes: the mean
/// over source queries of the summed weight on each target class.
pub fn class_self_attention(weights: &Tensor<f64>, num_classes: usize, queries_per_class: usize) -> Result<Vec<Vec<f64>>> {
    let nq = num_classes * queries_per_class;
    if weights.shape() != [nq, nq] {
        return Err(Error::Shape(format!(
            "self-attention {:?} does not match {num_classes} classes x {queries_per_class} queries",
            weights.shape()
        )));
    }
    let w = weights.data();
    let mut m = vec![vec![0.0; num_classes]; num_classes];
    for (a, row) in m.iter_mut().enumerate() {
        for s in a * queries_per_class..(a + 1) * queries_per_class {
            for t in 0..nq {
                row[t / queries_per_class] += w[s * nq + t];
            }
        }
        for v in row.iter_mut() {
            *v /= queries_per_class as f64;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfAttentionReport {
    pub block: usize,
    pub heads_averaged: bool,
    pub class_ids: Vec<u32>,
    pub class_names: Vec<String>,
    /// Row `a`, column `b`: attention of class `a`'s queries on class `b`'s.
    pub matrix: Vec<Vec<f64>>,
}

pub fn class_name(class: u32) -> String {
    format!("class_{class}")
}

pub fn export_self_attention(pred: &PredictionSet, block: Option<usize>) -> Result<SelfAttentionReport> {
    let (b, bp) = block_of(pred, block)?;
    Ok(SelfAttentionReport {
        block: b,
        heads_averaged: true,
        class_ids: pred.class_ids.clone(),
        class_names: pred.class_ids.iter().map(|&c| class_name(c)).collect(),
        matrix: class_self_attention(&bp.self_attention, pred.class_ids.len(), pred.queries_per_class)?,
    })
}

/// Everything exported for one sample.
#[derive(Debug, Clone)]
pub struct AttentionReport {
    pub sample_id: String,
    pub block: usize,
    pub matched_query_only: bool,
    pub heatmaps: BTreeMap<u32, Volume<f32>>,
    pub self_attention: SelfAttentionReport,
}

pub const SELF_ATTENTION_FILE: &str = "self_attention.json";

pub fn heatmap_stem(out_dir: &Path, class: u32) -> std::path::PathBuf {
    out_dir.join(format!("cross_attention_{}", class_name(class)))
}

pub fn attention_report(
    sample_id: &str,
    pred: &PredictionSet,
    config: &ExplainConfig,
    input_shape: [usize; 3],
    spacing: [f64; 3],
) -> Result<AttentionReport> {
    let self_attention = export_self_attention(pred, config.block)?;
    let heatmaps = pred
        .class_ids
        .iter()
        .map(|&c| {
            let v = export_cross_attention(pred, c, config.block, config.matched_query_only, input_shape, spacing)?;
            Ok((c, v))
        })
        .collect::<Result<_>>()?;
    Ok(AttentionReport {
        sample_id: sample_id.to_string(),
        block: self_attention.block,
        matched_query_only: config.matched_query_only,
        heatmaps,
        self_attention,
    })
}

impl AttentionReport {
    /// Heatmaps as volume files plus `self_attention.json`.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        for (&c, v) in &self.heatmaps {
            v.write(&heatmap_stem(out_dir, c))?;
        }
        let path = out_dir.join(SELF_ATTENTION_FILE);
        let json = serde_json::to_string_pretty(&self.self_attention).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}
