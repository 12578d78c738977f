//! Procedural anatomy phantoms: solid ellipsoids at jittered, positionally
//! consistent locations inside a box-shaped body, with class-specific
//! intensities and additive Gaussian noise.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxSet;
use crate::preprocess::labels_to_boxes;
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub grid_size: [usize; 3],
    pub spacing: [f64; 3],
    pub num_classes: u32,
    /// Per-class normalized centers; snapped to the half-voxel lattice when rendered.
    pub canonical_centers: Vec<[f64; 3]>,
    pub canonical_sizes: Vec<[f64; 3]>,
    /// Maximal per-axis center displacement (normalized units).
    pub position_jitter: [f64; 3],
    /// Maximal fractional deviation of each extent from its canonical value.
    pub size_jitter: f64,
    pub intensity_noise_sd: f64,
    pub class_intensities: Vec<f64>,
    pub body_intensity: f64,
    /// The body occupies `[margin, 1 - margin]` on each axis.
    pub body_margin: [f64; 3],
    /// Probability that a sample is generated with a random subset of classes dropped.
    pub incomplete_rate: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            grid_size: [64, 64, 96],
            spacing: [1.5, 1.5, 2.0],
            num_classes: 6,
            canonical_centers: vec![
                [0.2734375, 0.2734375, 0.2604166666666667],
                [0.7265625, 0.2734375, 0.2604166666666667],
                [0.2734375, 0.7265625, 0.2604166666666667],
                [0.7265625, 0.7265625, 0.2604166666666667],
                [0.5, 0.296875, 0.71875],
                [0.5, 0.75, 0.71875],
            ],
            canonical_sizes: vec![
                [0.32, 0.32, 0.28],
                [0.30, 0.32, 0.26],
                [0.32, 0.28, 0.28],
                [0.28, 0.30, 0.24],
                [0.60, 0.36, 0.30],
                [0.16, 0.16, 0.12],
            ],
            position_jitter: [0.03, 0.03, 0.03],
            size_jitter: 0.1,
            intensity_noise_sd: 0.02,
            class_intensities: vec![0.45, 0.55, 0.65, 0.75, 0.85, 0.95],
            body_intensity: 0.3,
            body_margin: [0.04, 0.04, 0.04],
            incomplete_rate: 0.0,
            seed: 7,
        }
    }
}

/// Continuous placement of one class before voxelization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub class: u32,
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl PhantomConfig {
    fn extreme_box(&self, c: usize) -> ([f64; 3], [f64; 3]) {
        let lo = std::array::from_fn(|a| {
            self.canonical_centers[c][a]
                - self.position_jitter[a]
                - 0.5 * self.canonical_sizes[c][a] * (1.0 + self.size_jitter)
        });
        let hi = std::array::from_fn(|a| {
            self.canonical_centers[c][a]
                + self.position_jitter[a]
                + 0.5 * self.canonical_sizes[c][a] * (1.0 + self.size_jitter)
        });
        (lo, hi)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("phantom: {m}")));
        let n = self.num_classes as usize;
        if n < 2 {
            return err("num_classes must be at least 2".into());
        }
        if self.grid_size.contains(&0) {
            return err("grid_size must be positive".into());
        }
        if self.canonical_centers.len() != n
            || self.canonical_sizes.len() != n
            || self.class_intensities.len() != n
        {
            return err(format!(
                "canonical_centers, canonical_sizes and class_intensities need {n} entries"
            ));
        }
        if !(0.0..1.0).contains(&self.size_jitter)
            || self.position_jitter.iter().any(|&j| !(j >= 0.0))
            || !(self.intensity_noise_sd >= 0.0)
            || !(0.0..=1.0).contains(&self.incomplete_rate)
        {
            return err("jitter, noise and incomplete_rate out of range".into());
        }
        for c in 0..n {
            if self.canonical_centers[c].iter().any(|&x| !(x > 0.0 && x < 1.0)) {
                return err(format!("class {} center outside (0,1)^3", c + 1));
            }
            for a in 0..3 {
                let min_radius_vox = 0.5
                    * self.canonical_sizes[c][a]
                    * (1.0 - self.size_jitter)
                    * self.grid_size[a] as f64;
                if min_radius_vox < 1.0 {
                    return err(format!("class {} is thinner than two voxels on axis {a}", c + 1));
                }
            }
            let (lo, hi) = self.extreme_box(c);
            for a in 0..3 {
                if lo[a] < self.body_margin[a] || hi[a] > 1.0 - self.body_margin[a] {
                    return err(format!(
                        "jitter pushes class {} outside the body on axis {a}",
                        c + 1
                    ));
                }
            }
            for d in 0..c {
                if self.canonical_centers[c] == self.canonical_centers[d] {
                    return err(format!("classes {} and {} share a center", d + 1, c + 1));
                }
                let (dlo, dhi) = self.extreme_box(d);
                if (0..3).all(|a| lo[a] < dhi[a] && dlo[a] < hi[a]) {
                    return err(format!(
                        "classes {} and {} can overlap at jitter extremes",
                        d + 1,
                        c + 1
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub intensities: Volume<f32>,
    pub labels: Volume<u32>,
    pub boxes: BoxSet,
}

impl Sample {
    pub fn from_volumes(sample_id: String, intensities: Volume<f32>, labels: Volume<u32>) -> Self {
        let boxes = labels_to_boxes(&labels);
        Self {
            sample_id,
            intensities,
            labels,
            boxes,
        }
    }
}

pub fn sample_id(index: usize) -> String {
    format!("phantom_{index:05}")
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Snaps `x` (normalized) to the nearest half-voxel lattice point `m / (2L)`.
fn lattice(x: f64, len: usize) -> f64 {
    (x * 2.0 * len as f64).round() / (2.0 * len as f64)
}

/// Rounds an offset toward zero onto the half-voxel lattice, so the snapped
/// offset never exceeds the sampled one in magnitude.
fn lattice_offset(x: f64, len: usize) -> f64 {
    (x * 2.0 * len as f64).trunc() / (2.0 * len as f64)
}

/// Jittered placements and the set of classes present in sample `index`.
pub fn placements(config: &PhantomConfig, index: usize) -> Vec<Placement> {
    let mut rng = sample_rng(config.seed, index);
    let n = config.num_classes as usize;
    let mut present = vec![true; n];
    if config.incomplete_rate > 0.0 && rng.gen::<f64>() < config.incomplete_rate {
        let drop = rng.gen_range(1..n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for &c in &order[..drop] {
            present[c] = false;
        }
    }
    let mut out = Vec::with_capacity(n);
    for c in 0..n {
        let mut center = [0.0; 3];
        let mut size = [0.0; 3];
        for a in 0..3 {
            let j = config.position_jitter[a];
            let offset = if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
            let len = config.grid_size[a];
            center[a] = lattice(config.canonical_centers[c][a], len) + lattice_offset(offset, len);
            let s = config.size_jitter;
            let scale = if s > 0.0 { 1.0 + rng.gen_range(-s..=s) } else { 1.0 };
            size[a] = config.canonical_sizes[c][a] * scale;
        }
        if present[c] {
            out.push(Placement {
                class: c as u32 + 1,
                center,
                size,
            });
        }
    }
    out
}

/// Renders sample `index`. Deterministic in `(config.seed, index)`.
pub fn generate_sample(config: &PhantomConfig, index: usize) -> Result<Sample> {
    config.validate()?;
    let shape = config.grid_size;
    let mut labels = Volume::<u32>::new(shape, config.spacing);
    let mut intensities = Volume::<f32>::new(shape, config.spacing);

    let voxel_center = |i: usize, a: usize| (i as f64 + 0.5) / shape[a] as f64;
    let body_range = |a: usize| {
        let m = config.body_margin[a];
        (0..shape[a]).filter(move |&i| {
            let x = voxel_center(i, a);
            x >= m && x <= 1.0 - m
        })
    };
    for i in body_range(0) {
        for j in body_range(1) {
            for k in body_range(2) {
                intensities.set(i, j, k, config.body_intensity as f32);
            }
        }
    }

    for p in placements(config, index) {
        let radius = p.size.map(|s| 0.5 * s);
        let range = |a: usize| {
            let lo = ((p.center[a] - radius[a]) * shape[a] as f64).floor().max(0.0) as usize;
            let hi = (((p.center[a] + radius[a]) * shape[a] as f64).ceil() as usize).min(shape[a]);
            lo..hi
        };
        let value = config.class_intensities[p.class as usize - 1] as f32;
        for i in range(0) {
            let dx = (voxel_center(i, 0) - p.center[0]) / radius[0];
            for j in range(1) {
                let dy = (voxel_center(j, 1) - p.center[1]) / radius[1];
                for k in range(2) {
                    let dz = (voxel_center(k, 2) - p.center[2]) / radius[2];
                    if dx * dx + dy * dy + dz * dz <= 1.0 {
                        labels.set(i, j, k, p.class);
                        intensities.set(i, j, k, value);
                    }
                }
            }
        }
    }

    if config.intensity_noise_sd > 0.0 {
        // separate stream so noise does not perturb placements
        let mut rng = sample_rng(config.seed ^ 0x9e37_79b9_7f4a_7c15, index);
        let normal = Normal::new(0.0, config.intensity_noise_sd).expect("finite sd");
        for v in intensities.data_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }

    Ok(Sample::from_volumes(sample_id(index), intensities, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplePaths {
    /// Volume stems relative to the manifest directory.
    pub intensities: String,
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub split: Split,
    pub paths: SamplePaths,
}

/// Split membership of every sample in a dataset directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }
}

impl ManifestEntry {
    pub fn stems(&self, root: &Path) -> (PathBuf, PathBuf) {
        (root.join(&self.paths.intensities), root.join(&self.paths.labels))
    }

    pub fn load(&self, root: &Path) -> Result<Sample> {
        let (img, lbl) = self.stems(root);
        Ok(Sample::from_volumes(
            self.sample_id.clone(),
            Volume::read(&img)?,
            Volume::read(&lbl)?,
        ))
    }
}

/// Per-split counts by largest remainder, so counts always sum to `n`.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| !(f >= 0.0)) {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    if n < 3 {
        return Err(Error::Config(format!("dataset needs at least 3 samples, got {n}")));
    }
    let exact = fractions.map(|f| f * n as f64);
    let mut counts = exact.map(|x| x.floor() as usize);
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &s in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[s] += 1;
        rest -= 1;
    }
    Ok(counts)
}

/// Writes `n` samples plus `manifest.json` into `out_dir`. Samples are
/// assigned to train, val and test in index order.
pub fn generate_dataset(
    config: &PhantomConfig,
    n: usize,
    split: [f64; 3],
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    let counts = split_counts(n, split)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let split_of = |i: usize| {
        if i < counts[0] {
            Split::Train
        } else if i < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        }
    };
    let entries = (0..n)
        .into_par_iter()
        .map(|i| {
            let sample = generate_sample(config, i)?;
            let entry = write_sample(&sample, split_of(i), out_dir)?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest { entries };
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Writes both volumes of a sample under `root/samples/` and returns its manifest entry.
pub fn write_sample(sample: &Sample, split: Split, root: &Path) -> Result<ManifestEntry> {
    let paths = SamplePaths {
        intensities: format!("samples/{}_img", sample.sample_id),
        labels: format!("samples/{}_lbl", sample.sample_id),
    };
    sample.intensities.write(&root.join(&paths.intensities))?;
    sample.labels.write(&root.join(&paths.labels))?;
    Ok(ManifestEntry {
        sample_id: sample.sample_id.clone(),
        split,
        paths,
    })
}
