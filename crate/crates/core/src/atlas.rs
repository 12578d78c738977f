//! Anatomical region atlas, query anchors, and the cross-attention mask.
//!
//! The atlas holds, per class, the smallest box enclosing every training and
//! validation instance (the RoI) together with median/min/max box extents.
//! Anchors subdivide each RoI into a regular grid of tiles; every object query
//! owns one tile and may move its box center only within it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box3, BoxSet, CornerBox};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtlasClass {
    #[serde(with = "roi_pair")]
    pub roi: CornerBox,
    pub median: [f64; 3],
    pub min: [f64; 3],
    pub max: [f64; 3],
}

mod roi_pair {
    use super::CornerBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(roi: &CornerBox, s: S) -> Result<S::Ok, S::Error> {
        [roi.lo, roi.hi].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CornerBox, D::Error> {
        let [lo, hi] = <[[f64; 3]; 2]>::deserialize(d)?;
        Ok(CornerBox { lo, hi })
    }
}

/// Per-class RoIs and box-size statistics, keyed by class ID.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atlas {
    pub classes: BTreeMap<u32, AtlasClass>,
}

impl Atlas {
    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.keys().copied().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (&class, entry) in &self.classes {
            let fail = |message: &str| Error::Atlas {
                class,
                message: message.to_string(),
            };
            if entry.roi.extent().iter().any(|&e| !(e > 0.0)) {
                return Err(fail("has a RoI with non-positive extent"));
            }
            for a in 0..3 {
                if !(entry.min[a] <= entry.median[a] && entry.median[a] <= entry.max[a]) {
                    return Err(fail("has unordered size statistics"));
                }
                if !(entry.min[a] > 0.0) {
                    return Err(fail("has a non-positive minimum size"));
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let atlas: Atlas = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        atlas.validate()?;
        Ok(atlas)
    }
}

/// Lower median: for an even count the smaller of the two middle values.
fn lower_median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

/// Builds the atlas from the box sets of the training and validation splits.
pub fn build_atlas(boxsets: &[BoxSet], num_classes: u32) -> Result<Atlas> {
    let mut classes = BTreeMap::new();
    for class in 1..=num_classes {
        let instances: Vec<&Box3> = boxsets.iter().filter_map(|s| s.get(&class)).collect();
        if instances.is_empty() {
            return Err(Error::Atlas {
                class,
                message: "does not occur in any training or validation sample".into(),
            });
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for b in &instances {
            let (blo, bhi) = (b.lo(), b.hi());
            for a in 0..3 {
                lo[a] = lo[a].min(blo[a]);
                hi[a] = hi[a].max(bhi[a]);
            }
        }
        let mut median = [0.0; 3];
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for a in 0..3 {
            let mut sizes: Vec<f64> = instances.iter().map(|b| b.0[a + 3]).collect();
            median[a] = lower_median(&mut sizes);
            min[a] = sizes[0];
            max[a] = sizes[sizes.len() - 1];
        }
        classes.insert(
            class,
            AtlasClass {
                roi: CornerBox { lo, hi },
                median,
                min,
                max,
            },
        );
    }
    let atlas = Atlas { classes };
    atlas.validate()?;
    Ok(atlas)
}

/// A fixed reference box bound to one object query.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub class: u32,
    pub index: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    /// Region the decoded center may occupy: `center ± max_center_offset`,
    /// stored with boundaries shared bit-exactly with neighboring tiles.
    pub tile: CornerBox,
    pub max_center_offset: [f64; 3],
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
}

impl Anchor {
    pub fn to_box(&self) -> Box3 {
        Box3::from_center(self.center, self.size)
    }
}

/// Class-major, anchor-index-minor table of query anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryAnchors {
    pub class_ids: Vec<u32>,
    pub per_axis: usize,
    pub anchors: Vec<Anchor>,
}

impl QueryAnchors {
    pub fn queries_per_class(&self) -> usize {
        self.per_axis.pow(3)
    }

    pub fn num_queries(&self) -> usize {
        self.anchors.len()
    }

    pub fn class_anchors(&self, class_pos: usize) -> &[Anchor] {
        let q = self.queries_per_class();
        &self.anchors[class_pos * q..(class_pos + 1) * q]
    }

    /// Index of the anchor at the RoI center (13 for the 3×3×3 layout).
    pub fn center_index(&self) -> usize {
        let m = self.per_axis / 2;
        (m * self.per_axis + m) * self.per_axis + m
    }

    /// Anchors as a `#classes × queries × 6` center-format array.
    pub fn as_array(&self) -> Vec<[f64; 6]> {
        self.anchors.iter().map(|a| a.to_box().0).collect()
    }
}

/// Places `per_axis³` anchors per class on the uniform grid of the RoI; with
/// `per_axis = 3` the fractional positions are 1/6, 1/2 and 5/6 and the
/// maximal center offset is a sixth of the RoI extent.
pub fn generate_query_anchors_with(atlas: &Atlas, per_axis: usize) -> QueryAnchors {
    assert!(per_axis >= 1);
    let mut anchors = Vec::new();
    for (&class, entry) in &atlas.classes {
        let ext = entry.roi.extent();
        let bounds: [Vec<f64>; 3] = std::array::from_fn(|a| {
            let mut b: Vec<f64> = (0..=per_axis)
                .map(|k| entry.roi.lo[a] + ext[a] * k as f64 / per_axis as f64)
                .collect();
            b[0] = entry.roi.lo[a];
            b[per_axis] = entry.roi.hi[a];
            b
        });
        let max_center_offset = ext.map(|e| e / (2 * per_axis) as f64);
        for i in 0..per_axis {
            for j in 0..per_axis {
                for k in 0..per_axis {
                    let idx = [i, j, k];
                    let lo = std::array::from_fn(|a| bounds[a][idx[a]]);
                    let hi = std::array::from_fn(|a| bounds[a][idx[a] + 1]);
                    let center = std::array::from_fn(|a| 0.5 * (lo[a] + hi[a]));
                    anchors.push(Anchor {
                        class,
                        index: (i * per_axis + j) * per_axis + k,
                        center,
                        size: entry.median,
                        tile: CornerBox { lo, hi },
                        max_center_offset,
                        size_min: entry.min,
                        size_max: entry.max,
                    });
                }
            }
        }
    }
    QueryAnchors {
        class_ids: atlas.class_ids(),
        per_axis,
        anchors,
    }
}

/// The standard 27 anchors per class.
pub fn generate_query_anchors(atlas: &Atlas) -> QueryAnchors {
    generate_query_anchors_with(atlas, 3)
}

/// Cross-attention mask over a flattened feature grid. Queries of one class
/// share a row pattern; `true` marks voxels the query may attend to (mask
/// value 0), `false` marks voxels masked with −∞.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub feature_grid_shape: [usize; 3],
    pub queries_per_class: usize,
    pub class_ids: Vec<u32>,
    allowed: Vec<Arc<Vec<bool>>>,
}

impl AttentionMask {
    pub fn num_queries(&self) -> usize {
        self.class_ids.len() * self.queries_per_class
    }

    pub fn num_voxels(&self) -> usize {
        self.feature_grid_shape.iter().product()
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query / self.queries_per_class]
    }

    pub fn class_row(&self, class_pos: usize) -> &[bool] {
        &self.allowed[class_pos]
    }

    /// Additive mask value: 0 inside the RoI, −∞ outside.
    pub fn value(&self, query: usize, voxel: usize) -> f64 {
        if self.row(query)[voxel] {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Builds a mask from explicit per-class rows of admissible voxels.
    pub fn from_rows(
        feature_grid_shape: [usize; 3],
        queries_per_class: usize,
        class_ids: Vec<u32>,
        rows: Vec<Vec<bool>>,
    ) -> Result<Self> {
        let n: usize = feature_grid_shape.iter().product();
        if rows.len() != class_ids.len() || rows.iter().any(|r| r.len() != n) || queries_per_class == 0 {
            return Err(Error::Shape(format!(
                "mask rows do not match {} classes over a {feature_grid_shape:?} grid",
                class_ids.len()
            )));
        }
        Ok(Self {
            feature_grid_shape,
            queries_per_class,
            class_ids,
            allowed: rows.into_iter().map(Arc::new).collect(),
        })
    }

    /// A mask with every entry 0, used when the restriction is disabled.
    pub fn unrestricted(grid: [usize; 3], class_ids: Vec<u32>, queries_per_class: usize) -> Self {
        let n: usize = grid.iter().product();
        let row = Arc::new(vec![true; n]);
        Self {
            feature_grid_shape: grid,
            queries_per_class,
            allowed: vec![row; class_ids.len()],
            class_ids,
        }
    }

    /// Writes one float volume per class holding the additive mask values.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        for (pos, class) in self.class_ids.iter().enumerate() {
            let data = self.allowed[pos]
                .iter()
                .map(|&a| if a { 0.0 } else { f32::NEG_INFINITY })
                .collect();
            Volume::from_vec(self.feature_grid_shape, [1.0; 3], data)?
                .write(&dir.join(format!("mask_class_{class}")))?;
        }
        Ok(())
    }
}

/// Feature cells `[i/g, (i+1)/g)` that overlap `[lo, hi]` with positive
/// length. Partial cells are included, so any RoI of positive extent selects
/// at least one cell.
fn overlapping_cells(lo: f64, hi: f64, g: usize) -> Vec<bool> {
    (0..g)
        .map(|i| {
            let (cl, ch) = (i as f64 / g as f64, (i + 1) as f64 / g as f64);
            lo < ch && hi > cl
        })
        .collect()
}

pub fn roi_to_feature_mask(
    atlas: &Atlas,
    feature_grid_shape: [usize; 3],
    queries_per_class: usize,
) -> Result<AttentionMask> {
    let [g0, g1, g2] = feature_grid_shape;
    let mut allowed = Vec::with_capacity(atlas.num_classes());
    for (&class, entry) in &atlas.classes {
        let axes: [Vec<bool>; 3] = std::array::from_fn(|a| {
            overlapping_cells(entry.roi.lo[a], entry.roi.hi[a], feature_grid_shape[a])
        });
        let mut row = vec![false; g0 * g1 * g2];
        for i in 0..g0 {
            for j in 0..g1 {
                for k in 0..g2 {
                    row[(i * g1 + j) * g2 + k] = axes[0][i] && axes[1][j] && axes[2][k];
                }
            }
        }
        if !row.iter().any(|&a| a) {
            return Err(Error::Atlas {
                class,
                message: format!("RoI covers no cell of the {feature_grid_shape:?} feature grid"),
            });
        }
        allowed.push(Arc::new(row));
    }
    Ok(AttentionMask {
        feature_grid_shape,
        queries_per_class,
        class_ids: atlas.class_ids(),
        allowed,
    })
}
