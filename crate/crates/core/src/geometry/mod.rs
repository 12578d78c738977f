//! Axis-aligned 3D box algebra and detection metrics.
//!
//! Boxes live in normalized volume coordinates. The center format is
//! `(cx, cy, cz, h, w, d)` where axis 0 pairs with `(cx, h)`, axis 1 with
//! `(cy, w)` and axis 2 with `(cz, d)`.

mod map;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use map::{
    ap_all_point, iou_thresholds, map_coco, size_subsets, ClassDetection, EvalResult, SizeClass,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Box3(pub [f64; 6]);

impl Box3 {
    pub fn from_center(center: [f64; 3], size: [f64; 3]) -> Self {
        Box3([center[0], center[1], center[2], size[0], size[1], size[2]])
    }

    pub fn from_corners(lo: [f64; 3], hi: [f64; 3]) -> Self {
        let mut b = [0.0; 6];
        for a in 0..3 {
            b[a] = 0.5 * (lo[a] + hi[a]);
            b[a + 3] = hi[a] - lo[a];
        }
        Box3(b)
    }

    pub fn center(&self) -> [f64; 3] {
        [self.0[0], self.0[1], self.0[2]]
    }

    pub fn size(&self) -> [f64; 3] {
        [self.0[3], self.0[4], self.0[5]]
    }

    pub fn lo(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.0[a] - 0.5 * self.0[a + 3])
    }

    pub fn hi(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.0[a] + 0.5 * self.0[a + 3])
    }

    pub fn volume(&self) -> f64 {
        self.0[3] * self.0[4] * self.0[5]
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|v| v.is_finite()) && self.size().iter().all(|&s| s > 0.0)
    }

    /// True when `other` lies entirely inside `self` (closed boxes).
    pub fn contains(&self, other: &Box3) -> bool {
        let (lo, hi) = (self.lo(), self.hi());
        let (olo, ohi) = (other.lo(), other.hi());
        (0..3).all(|a| lo[a] <= olo[a] && ohi[a] <= hi[a])
    }
}

/// A box stored by its exact corners. Used where corner values must be kept
/// bit-exact (RoIs, anchor tiles) instead of being re-derived from centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerBox {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl CornerBox {
    pub fn extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.hi[a] - self.lo[a])
    }

    pub fn volume(&self) -> f64 {
        self.extent().iter().product()
    }

    pub fn to_box(&self) -> Box3 {
        Box3::from_corners(self.lo, self.hi)
    }

    pub fn contains_point(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }

    pub fn contains_box(&self, b: &Box3) -> bool {
        let (lo, hi) = (b.lo(), b.hi());
        (0..3).all(|a| self.lo[a] <= lo[a] && hi[a] <= self.hi[a])
    }

    pub fn overlap_volume(&self, other: &CornerBox) -> f64 {
        (0..3)
            .map(|a| (self.hi[a].min(other.hi[a]) - self.lo[a].max(other.lo[a])).max(0.0))
            .product()
    }
}

/// One box per class; classes are 1-based label IDs.
pub type BoxSet = BTreeMap<u32, Box3>;

/// Intersection, union and hull volumes, all measured from corners so that
/// identical boxes give exactly equal quantities.
fn overlap_union_hull(a: &Box3, b: &Box3) -> (f64, f64, f64) {
    let (alo, ahi, blo, bhi) = (a.lo(), a.hi(), b.lo(), b.hi());
    let (mut inter, mut hull, mut va, mut vb) = (1.0, 1.0, 1.0, 1.0);
    for ax in 0..3 {
        inter *= (ahi[ax].min(bhi[ax]) - alo[ax].max(blo[ax])).max(0.0);
        hull *= ahi[ax].max(bhi[ax]) - alo[ax].min(blo[ax]);
        va *= ahi[ax] - alo[ax];
        vb *= bhi[ax] - blo[ax];
    }
    (inter, va + vb - inter, hull)
}

/// Intersection over union; 0 for disjoint or touching boxes.
pub fn iou(a: &Box3, b: &Box3) -> f64 {
    let (inter, union, _) = overlap_union_hull(a, b);
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Generalized IoU, `iou - (hull - union) / hull`, in (-1, 1].
pub fn giou(a: &Box3, b: &Box3) -> f64 {
    let (inter, union, hull) = overlap_union_hull(a, b);
    inter / union - (hull - union) / hull
}

/// Generalized IoU of `p` against a fixed `g` and its gradient with respect
/// to the center-format coordinates of `p`. At kinks (coinciding faces) the
/// one-sided derivative that keeps `p`'s face active is used.
pub fn giou_grad(p: &Box3, g: &Box3) -> (f64, [f64; 6]) {
    let (plo, phi, glo, ghi) = (p.lo(), p.hi(), g.lo(), g.hi());
    let mut w = [0.0; 3];
    let mut e = [0.0; 3];
    let mut s = [0.0; 3];
    let mut sg = [0.0; 3];
    for a in 0..3 {
        w[a] = (phi[a].min(ghi[a]) - plo[a].max(glo[a])).max(0.0);
        e[a] = phi[a].max(ghi[a]) - plo[a].min(glo[a]);
        s[a] = phi[a] - plo[a];
        sg[a] = ghi[a] - glo[a];
    }
    let others = |v: &[f64; 3], a: usize| v[(a + 1) % 3] * v[(a + 2) % 3];
    let inter = w[0] * w[1] * w[2];
    let hull = e[0] * e[1] * e[2];
    let vp = s[0] * s[1] * s[2];
    let union = vp + sg[0] * sg[1] * sg[2] - inter;
    let value = inter / union - (hull - union) / hull;

    let d_inter = (union + inter) / (union * union) - 1.0 / hull;
    let d_vp = -inter / (union * union) + 1.0 / hull;
    let d_hull = -union / (hull * hull);
    let mut grad = [0.0; 6];
    for a in 0..3 {
        let (mut d_lo, mut d_hi) = (0.0, 0.0);
        if w[a] > 0.0 {
            let di = d_inter * others(&w, a);
            if phi[a] <= ghi[a] {
                d_hi += di;
            }
            if plo[a] >= glo[a] {
                d_lo -= di;
            }
        }
        let dh = d_hull * others(&e, a);
        if phi[a] >= ghi[a] {
            d_hi += dh;
        }
        if plo[a] <= glo[a] {
            d_lo -= dh;
        }
        let dv = d_vp * others(&s, a);
        d_hi += dv;
        d_lo -= dv;
        // lo = c - s/2, hi = c + s/2
        grad[a] = d_lo + d_hi;
        grad[a + 3] = 0.5 * (d_hi - d_lo);
    }
    (value, grad)
}
