//! Seeded fixtures shared by the benchmarks.

use std::collections::BTreeMap;

use focdec::{AttentionMask, Box3, BoxSet, ClassDetection, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_vec(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::from_vec(shape, random_vec(shape.iter().product(), seed)).expect("consistent shape")
}

/// Each class attends to one contiguous block of `voxels / classes` keys.
pub fn block_mask(classes: usize, queries_per_class: usize, voxels: usize) -> AttentionMask {
    let width = voxels / classes;
    let rows = (0..classes)
        .map(|c| (0..voxels).map(|v| v / width == c).collect())
        .collect();
    AttentionMask::from_rows([1, 1, voxels], queries_per_class, (1..=classes as u32).collect(), rows)
        .expect("valid mask")
}

/// `samples` samples with `classes` boxes each and one detection per box,
/// jittered by up to 5% of the box size.
pub fn detection_set(
    samples: usize,
    classes: u32,
    seed: u64,
) -> (BTreeMap<String, Vec<ClassDetection>>, BTreeMap<String, BoxSet>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dets = BTreeMap::new();
    let mut gt = BTreeMap::new();
    for s in 0..samples {
        let id = format!("s{s:04}");
        let mut boxes = BoxSet::new();
        let mut ds = Vec::new();
        for c in 1..=classes {
            let g = Box3(std::array::from_fn(|i| if i < 3 { rng.gen_range(0.3..0.7) } else { rng.gen_range(0.1..0.3) }));
            boxes.insert(c, g);
            ds.push(ClassDetection {
                class: c,
                bbox: Box3(std::array::from_fn(|i| {
                    let size = g.0[i % 3 + 3];
                    if i < 3 {
                        g.0[i] + size * rng.gen_range(-0.05..0.05)
                    } else {
                        size * rng.gen_range(0.95..1.05)
                    }
                })),
                confidence: rng.gen(),
            });
        }
        gt.insert(id.clone(), boxes);
        dets.insert(id, ds);
    }
    (dets, gt)
}
