//! Dataset preprocessing: orientation hook, foreground cropping, fixed-size
//! resampling, label-count filtering, and voxel-label to box conversion.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box3, BoxSet};
use crate::phantom::{write_sample, DatasetManifest, Sample, Split};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_size: [usize; 3],
    pub foreground_threshold: f64,
    /// Minimum number of distinct labeled classes for a sample to be kept.
    pub label_count_threshold: usize,
    pub test_requires_complete: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: [64, 64, 96],
            foreground_threshold: 0.15,
            label_count_threshold: 3,
            test_requires_complete: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size.iter().any(|&s| s == 0 || s % 32 != 0) {
            return Err(Error::Config(format!(
                "preprocess: target_size {:?} must be positive multiples of 32",
                self.target_size
            )));
        }
        Ok(())
    }
}

/// Tight normalized box of every class present in `labels`. Voxel `i` on an
/// axis of length `L` spans `[i/L, (i+1)/L)`.
pub fn labels_to_boxes(labels: &Volume<u32>) -> BoxSet {
    let shape = labels.shape();
    let mut extents: BTreeMap<u32, ([usize; 3], [usize; 3])> = BTreeMap::new();
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            let row = &labels.data()[labels.index(i, j, 0)..labels.index(i, j, 0) + shape[2]];
            for (k, &c) in row.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let e = extents.entry(c).or_insert(([i, j, k], [i, j, k]));
                let idx = [i, j, k];
                for a in 0..3 {
                    e.0[a] = e.0[a].min(idx[a]);
                    e.1[a] = e.1[a].max(idx[a]);
                }
            }
        }
    }
    extents
        .into_iter()
        .map(|(c, (lo, hi))| {
            let flo = std::array::from_fn(|a| lo[a] as f64 / shape[a] as f64);
            let fhi = std::array::from_fn(|a| (hi[a] + 1) as f64 / shape[a] as f64);
            (c, Box3::from_corners(flo, fhi))
        })
        .collect()
}

/// Orientation normalization hook. Phantoms are generated in a canonical
/// orientation, so this is the identity; real-data adapters replace it.
pub fn reorient(sample: Sample) -> Sample {
    sample
}

/// Crops to the smallest sub-volume containing every voxel brighter than
/// `threshold`.
pub fn crop_to_foreground(sample: &Sample, threshold: f64) -> Result<Sample> {
    let shape = sample.intensities.shape();
    let mut lo = shape;
    let mut hi = [0usize; 3];
    let mut any = false;
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                if f64::from(sample.intensities.get(i, j, k)) > threshold {
                    any = true;
                    let idx = [i, j, k];
                    for a in 0..3 {
                        lo[a] = lo[a].min(idx[a]);
                        hi[a] = hi[a].max(idx[a]);
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::Preprocess {
            sample_id: sample.sample_id.clone(),
            message: format!("no voxel exceeds the foreground threshold {threshold}"),
        });
    }
    Ok(Sample::from_volumes(
        sample.sample_id.clone(),
        sample.intensities.crop(lo, hi),
        sample.labels.crop(lo, hi),
    ))
}

/// Voxel-center aligned source coordinate of output index `i`.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64)
}

fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let x = source_coord(i, src, dst);
            let i0 = x.floor() as usize;
            (i0, (i0 + 1).min(src - 1), x - i0 as f64)
        })
        .collect()
}

fn nearest_taps(src: usize, dst: usize) -> Vec<usize> {
    (0..dst)
        .map(|i| (((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1))
        .collect()
}

/// Trilinear resampling of intensities and nearest-neighbor resampling of
/// labels to `target` voxels; boxes are recomputed from the resampled labels.
pub fn resize(sample: &Sample, target: [usize; 3]) -> Result<Sample> {
    if target.contains(&0) {
        return Err(Error::Config(format!("resize target {target:?} must be positive")));
    }
    let src = sample.intensities.shape();
    if src.contains(&0) {
        return Err(Error::Preprocess {
            sample_id: sample.sample_id.clone(),
            message: "cannot resize an empty volume".into(),
        });
    }
    if src == target {
        return Ok(sample.clone());
    }
    let spacing: [f64; 3] = std::array::from_fn(|a| {
        sample.intensities.spacing()[a] * src[a] as f64 / target[a] as f64
    });
    let lin: [Vec<(usize, usize, f64)>; 3] = std::array::from_fn(|a| linear_taps(src[a], target[a]));
    let near: [Vec<usize>; 3] = std::array::from_fn(|a| nearest_taps(src[a], target[a]));

    let img = &sample.intensities;
    let mut out = Volume::<f32>::new(target, spacing);
    let mut lbl = Volume::<u32>::new(target, spacing);
    for i in 0..target[0] {
        let (i0, i1, wi) = lin[0][i];
        for j in 0..target[1] {
            let (j0, j1, wj) = lin[1][j];
            for k in 0..target[2] {
                let (k0, k1, wk) = lin[2][k];
                let v = |a, b, c| f64::from(img.get(a, b, c));
                let c00 = v(i0, j0, k0) * (1.0 - wk) + v(i0, j0, k1) * wk;
                let c01 = v(i0, j1, k0) * (1.0 - wk) + v(i0, j1, k1) * wk;
                let c10 = v(i1, j0, k0) * (1.0 - wk) + v(i1, j0, k1) * wk;
                let c11 = v(i1, j1, k0) * (1.0 - wk) + v(i1, j1, k1) * wk;
                let c0 = c00 * (1.0 - wj) + c01 * wj;
                let c1 = c10 * (1.0 - wj) + c11 * wj;
                out.set(i, j, k, (c0 * (1.0 - wi) + c1 * wi) as f32);
                lbl.set(i, j, k, sample.labels.get(near[0][i], near[1][j], near[2][k]));
            }
        }
    }
    Ok(Sample::from_volumes(sample.sample_id.clone(), out, lbl))
}

/// Whether a sample survives the label-count filter; test samples must
/// additionally be complete when `test_requires_complete` is set.
pub fn filter_sample(sample: &Sample, config: &PreprocessConfig, split: Split, num_classes: u32) -> bool {
    let present: BTreeSet<u32> = sample.boxes.keys().copied().collect();
    if present.len() < config.label_count_threshold {
        return false;
    }
    if split == Split::Test && config.test_requires_complete {
        return (1..=num_classes).all(|c| present.contains(&c));
    }
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discarded {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub kept: Vec<String>,
    pub discarded: Vec<Discarded>,
}

pub const REPORT_FILE: &str = "preprocess_report.json";

/// Runs reorient → crop → resize → filter over a whole dataset, writing the
/// kept samples and a new manifest to `out_dir`.
pub fn preprocess_dataset(
    manifest: &DatasetManifest,
    in_dir: &Path,
    out_dir: &Path,
    config: &PreprocessConfig,
    num_classes: u32,
) -> Result<(DatasetManifest, PreprocessReport)> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results = manifest
        .entries
        .par_iter()
        .map(|entry| {
            let sample = reorient(entry.load(in_dir)?);
            let sample = resize(&crop_to_foreground(&sample, config.foreground_threshold)?, config.target_size)?;
            if !filter_sample(&sample, config, entry.split, num_classes) {
                let reason = format!(
                    "{} of {num_classes} classes labeled (threshold {}, split {:?})",
                    sample.boxes.len(),
                    config.label_count_threshold,
                    entry.split
                );
                return Ok(Err(Discarded {
                    sample_id: entry.sample_id.clone(),
                    reason,
                }));
            }
            Ok(Ok(write_sample(&sample, entry.split, out_dir)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut entries = Vec::new();
    let mut report = PreprocessReport::default();
    for r in results {
        match r {
            Ok(e) => {
                report.kept.push(e.sample_id.clone());
                entries.push(e);
            }
            Err(d) => report.discarded.push(d),
        }
    }
    let out = DatasetManifest { entries };
    out.write(out_dir)?;
    let path = out_dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok((out, report))
}
