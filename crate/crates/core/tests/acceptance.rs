//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line and
//! the binary fails if any criterion fails. Criteria run sequentially so the
//! timed training run has the machine to itself.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use focdec::atlas::roi_to_feature_mask;
use focdec::geometry::{ap_all_point, iou_thresholds, size_subsets};
use focdec::model::{decode_boxes, BackboneConfig, FeatureLevel};
use focdec::nn::{masked_attention, Graph};
use focdec::pipeline::{self, RunConfig, RunDir};
use focdec::training::{self, detection_loss, labels_from_candidates, load_split, predict_samples};
use focdec::{
    dynamic_labels, generate_query_anchors, giou, iou, map_coco, Atlas, AtlasClass, Box3, BoxSet,
    ClassDetection, CornerBox, FocusedDecoder, ModelConfig, ParamStore, Split, Tensor, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_atlas(rng: &mut ChaCha8Rng, classes: u32) -> Atlas {
    let classes = (1..=classes)
        .map(|c| {
            let lo: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.6));
            let ext: [f64; 3] = std::array::from_fn(|a| rng.gen_range(0.08..(1.0 - lo[a]).min(0.45)));
            let median: [f64; 3] = std::array::from_fn(|a| ext[a] * rng.gen_range(0.3..0.7));
            let entry = AtlasClass {
                roi: CornerBox {
                    lo,
                    hi: std::array::from_fn(|a| lo[a] + ext[a]),
                },
                median,
                min: median.map(|m| m * rng.gen_range(0.6..1.0)),
                max: median.map(|m| m * rng.gen_range(1.0..1.5)),
            };
            (c, entry)
        })
        .collect();
    Atlas { classes }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_sum, mut leaked) = (0.0f64, 0usize);
    for _ in 0..50 {
        let n = rng.gen_range(1..=4);
        let atlas = random_atlas(&mut rng, n);
        let grid = std::array::from_fn(|_| rng.gen_range(2..=8));
        let qpc = [1, 8, 27][rng.gen_range(0..3)];
        let mask = roi_to_feature_mask(&atlas, grid, qpc).unwrap();
        let (nq, nv, d) = (mask.num_queries(), mask.num_voxels(), 8);
        let q = random_tensor(&mut rng, &[nq, d], 3.0).cast::<f32>();
        let k = random_tensor(&mut rng, &[nv, d], 3.0).cast::<f32>();
        let v = random_tensor(&mut rng, &[nv, d], 1.0).cast::<f32>();
        let out = masked_attention(&q, &k, &v, 2, Some(&mask)).unwrap();
        let w = out.weights.data();
        for qi in 0..nq {
            let row = &w[qi * nv..(qi + 1) * nv];
            let allowed = mask.row(qi);
            leaked += row.iter().zip(allowed).filter(|(&x, &a)| !a && x != 0.0).count();
            let s: f64 = row.iter().map(|&x| x as f64).sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        leaked == 0 && worst_sum <= 1e-5 && secs < 60.0,
        format!("{leaked} nonzero weights outside RoIs, max |row sum - 1| = {worst_sum:.2e}, {secs:.2}s"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(1..=3);
        let atlas = random_atlas(&mut rng, n);
        let grid = std::array::from_fn(|_| rng.gen_range(2..=7));
        let qpc = [1, 27][rng.gen_range(0..2)];
        let mask = roi_to_feature_mask(&atlas, grid, qpc).unwrap();
        let (nq, nv, d, heads) = (mask.num_queries(), mask.num_voxels(), 12, 3);
        let q = random_tensor(&mut rng, &[nq, d], 2.0);
        let k = random_tensor(&mut rng, &[nv, d], 2.0);
        let v = random_tensor(&mut rng, &[nv, d], 1.0);
        let full = masked_attention(&q, &k, &v, heads, Some(&mask)).unwrap().output;
        for c in 0..atlas.num_classes() {
            let keep: Vec<usize> = (0..nv).filter(|&i| mask.class_row(c)[i]).collect();
            let gather = |t: &Tensor<f64>, rows: &[usize]| {
                let data = rows.iter().flat_map(|&r| t.data()[r * d..(r + 1) * d].to_vec()).collect();
                Tensor::from_vec(&[rows.len(), d], data).unwrap()
            };
            let qrows: Vec<usize> = (c * qpc..(c + 1) * qpc).collect();
            let dense = masked_attention(&gather(&q, &qrows), &gather(&k, &keep), &gather(&v, &keep), heads, None)
                .unwrap()
                .output;
            for (i, &qi) in qrows.iter().enumerate() {
                for j in 0..d {
                    worst = worst.max((dense.data()[i * d + j] - full.data()[qi * d + j]).abs());
                }
            }
        }
    }
    outcome(worst <= 1e-6, format!("max |masked - dense on RoI subsequence| = {worst:.2e} over 20 trials"))
}

const ORACLE_GRID: usize = 128;

/// IoU and GIoU from literal voxel counting on a 128³ grid of voxel centers.
fn voxel_oracle(a: &Box3, b: &Box3) -> (f64, f64) {
    let inside = |bx: &Box3, axis: usize| -> Vec<bool> {
        (0..ORACLE_GRID)
            .map(|i| {
                let x = (i as f64 + 0.5) / ORACLE_GRID as f64;
                x >= bx.lo()[axis] && x <= bx.hi()[axis]
            })
            .collect()
    };
    let ia: Vec<Vec<bool>> = (0..3).map(|ax| inside(a, ax)).collect();
    let ib: Vec<Vec<bool>> = (0..3).map(|ax| inside(b, ax)).collect();
    let hull = Box3::from_corners(
        std::array::from_fn(|ax| a.lo()[ax].min(b.lo()[ax])),
        std::array::from_fn(|ax| a.hi()[ax].max(b.hi()[ax])),
    );
    let ih: Vec<Vec<bool>> = (0..3).map(|ax| inside(&hull, ax)).collect();
    let (mut na, mut nb, mut ni, mut nh) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..ORACLE_GRID {
        for j in 0..ORACLE_GRID {
            for k in 0..ORACLE_GRID {
                let in_a = ia[0][i] && ia[1][j] && ia[2][k];
                let in_b = ib[0][i] && ib[1][j] && ib[2][k];
                na += in_a as u64;
                nb += in_b as u64;
                ni += (in_a && in_b) as u64;
                nh += (ih[0][i] && ih[1][j] && ih[2][k]) as u64;
            }
        }
    }
    let union = (na + nb - ni) as f64;
    let iou = ni as f64 / union;
    (iou, iou - (nh as f64 - union) / nh as f64)
}

fn criterion_3() -> Outcome {
    let hand_a = Box3::from_corners([0.0; 3], [0.25; 3]);
    let hand_b = Box3::from_corners([0.75; 3], [1.0; 3]);
    let hand_err = (giou(&hand_a, &hand_b) - (-0.96875)).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    // Corners on the oracle lattice make the voxel count exact; continuous
    // corners are reported alongside since the count itself is then off by
    // up to half a voxel per face.
    let lattice_box = |rng: &mut ChaCha8Rng| {
        let lo: [usize; 3] = std::array::from_fn(|_| rng.gen_range(0..ORACLE_GRID - 1));
        let hi: [usize; 3] = std::array::from_fn(|a| rng.gen_range(lo[a] + 1..=ORACLE_GRID));
        Box3::from_corners(lo.map(|v| v as f64 / ORACLE_GRID as f64), hi.map(|v| v as f64 / ORACLE_GRID as f64))
    };
    let continuous_box = |rng: &mut ChaCha8Rng| {
        let lo: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.75));
        let hi: [f64; 3] = std::array::from_fn(|a| rng.gen_range(lo[a] + 0.15..=1.0));
        Box3::from_corners(lo, hi)
    };
    let compare = |a: &Box3, b: &Box3| {
        let (oi, og) = voxel_oracle(a, b);
        let (ai, ag) = (iou(a, b), giou(a, b));
        ((ai - oi).abs().max((ag - og).abs()), ag > ai)
    };
    let (mut worst, mut order_violations) = (0.0f64, 0usize);
    for _ in 0..200 {
        let (a, b) = (lattice_box(&mut rng), lattice_box(&mut rng));
        let (err, violated) = compare(&a, &b);
        worst = worst.max(err);
        order_violations += violated as usize;
    }
    let mut continuous = 0.0f64;
    for _ in 0..50 {
        let (a, b) = (continuous_box(&mut rng), continuous_box(&mut rng));
        let (err, violated) = compare(&a, &b);
        continuous = continuous.max(err);
        order_violations += violated as usize;
    }
    outcome(
        worst <= 1e-2 && order_violations == 0 && hand_err <= 1e-12,
        format!(
            "max |analytic - voxel oracle| = {worst:.2e} (lattice corners), {continuous:.2e} (continuous corners, informational), GIoU > IoU on {order_violations}/250 pairs, hand case error {hand_err:.1e}"
        ),
    )
}

fn desk_atlas() -> Atlas {
    let cfg = focdec::PhantomConfig::default();
    let pre = focdec::PreprocessConfig::default();
    let boxes: Vec<BoxSet> = (0..30)
        .map(|i| {
            let s = focdec::phantom::generate_sample(&cfg, i).unwrap();
            let s = focdec::preprocess::crop_to_foreground(&s, pre.foreground_threshold).unwrap();
            focdec::preprocess::resize(&s, pre.target_size).unwrap().boxes
        })
        .collect();
    focdec::build_atlas(&boxes, cfg.num_classes).unwrap()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut atlases = vec![desk_atlas()];
    atlases.extend((0..20).map(|_| random_atlas(&mut rng, 3)));
    let (mut worst_vol, mut worst_overlap, mut classes) = (0.0f64, 0.0f64, 0);
    for atlas in &atlases {
        let anchors = generate_query_anchors(atlas);
        for (pos, entry) in atlas.classes.values().enumerate() {
            classes += 1;
            let tiles: Vec<&CornerBox> = anchors.class_anchors(pos).iter().map(|a| &a.tile).collect();
            let total: f64 = tiles.iter().map(|t| t.volume()).sum();
            worst_vol = worst_vol.max((total - entry.roi.volume()).abs());
            for i in 0..tiles.len() {
                for j in i + 1..tiles.len() {
                    worst_overlap = worst_overlap.max(tiles[i].overlap_volume(tiles[j]));
                }
            }
        }
    }
    outcome(
        worst_vol <= 1e-12 && worst_overlap == 0.0,
        format!("{classes} classes: max |sum of tiles - RoI volume| = {worst_vol:.1e}, max pairwise overlap = {worst_overlap:.1e}"),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut violations = 0usize;
    let mut boxes_checked = 0usize;
    for trial in 0..1000 {
        let atlas = random_atlas(&mut rng, 2);
        let anchors = generate_query_anchors(&atlas);
        let outputs: Vec<[f64; 6]> = (0..anchors.num_queries())
            .map(|_| {
                std::array::from_fn(|_| match trial % 4 {
                    0 => [-1.0, 0.0, 1.0][rng.gen_range(0..3)],
                    _ => rng.gen_range(-1.0..=1.0),
                })
            })
            .collect();
        let boxes = decode_boxes(&outputs, &anchors).unwrap();
        for (b, a) in boxes.iter().zip(&anchors.anchors) {
            boxes_checked += 1;
            let ok = (0..3).all(|ax| {
                let (c, s) = (b.0[ax], b.0[ax + 3]);
                a.tile.lo[ax] <= c && c <= a.tile.hi[ax] && a.size_min[ax] <= s && s <= a.size_max[ax]
            });
            violations += (!ok) as usize;
        }
    }
    outcome(
        violations == 0,
        format!("{violations} infeasible boxes among {boxes_checked} decoded from 1000 random head outputs"),
    )
}

fn criterion_6() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let atlas = desk_atlas();
    let config = ModelConfig {
        backbone: BackboneConfig {
            num_down_levels: 4,
            ..BackboneConfig::default()
        },
        ..ModelConfig::default()
    };
    let shape = [16, 16, 24];
    let (model, mut params) = FocusedDecoder::new::<f64>(&config, &atlas, shape, 6).unwrap();
    // the zero-initialized last regression layer would leave the box branch
    // without upstream gradient
    let reg2 = params.id("head.reg2.weight").unwrap();
    for v in params.get_mut(reg2).data_mut() {
        *v = rng.gen_range(-0.1..0.1);
    }
    let input = random_tensor(&mut rng, &shape, 1.0);
    let anchors = &model.anchors;
    let gt: BoxSet = atlas
        .class_ids()
        .iter()
        .enumerate()
        .map(|(pos, &c)| {
            let a = &anchors.class_anchors(pos)[rng.gen_range(0..27)];
            let b = Box3(std::array::from_fn(|i| {
                if i < 3 {
                    a.center[i] + rng.gen_range(-0.5..0.5) * a.max_center_offset[i]
                } else {
                    a.size[i - 3] * rng.gen_range(0.9..1.1)
                }
            }));
            (c, b)
        })
        .collect();
    let train = TrainConfig::default();
    let loss = |p: &ParamStore<f64>, backward: bool| {
        let mut g = Graph::new(p);
        let nodes = model.forward(&mut g, &input).unwrap();
        let (l, _) = detection_loss(&mut g, &model, &nodes, &gt, &train).unwrap().unwrap();
        let grads = backward.then(|| g.backward(l).unwrap());
        (g.value(l).data()[0], grads)
    };
    let grads = loss(&params, true).1.unwrap();
    let names = [
        "backbone.c0.conv.weight",
        "backbone.c1.down.weight",
        "backbone.c2.conv.norm.gamma",
        "backbone.c3.conv.weight",
        "backbone.lateral2.weight",
        "backbone.lateral3.bias",
        "backbone.p2.weight",
        "decoder.query_embed",
        "decoder.block0.self_attn.q.weight",
        "decoder.block0.self_attn.out.weight",
        "decoder.block0.cross_attn.q.weight",
        "decoder.block0.cross_attn.k.weight",
        "decoder.block1.cross_attn.v.weight",
        "decoder.block1.cross_attn.out.bias",
        "decoder.block1.norm2.gamma",
        "decoder.block2.ffn1.weight",
        "decoder.block2.ffn2.bias",
        "decoder.block2.norm3.beta",
        "head.cls.weight",
        "head.cls.bias",
        "head.reg0.weight",
        "head.reg1.weight",
        "head.reg2.weight",
    ];
    let h = 1e-6;
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    for name in names {
        let Some(id) = params.id(name) else {
            failures.push(format!("missing parameter {name}"));
            continue;
        };
        let g = grads.get(id).map(|t| t.data().to_vec()).unwrap_or_default();
        let Some(k) = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())) else {
            failures.push(format!("{name} has no gradient"));
            continue;
        };
        let orig = params.get(id).data()[k];
        params.get_mut(id).data_mut()[k] = orig + h;
        let up = loss(&params, false).0;
        params.get_mut(id).data_mut()[k] = orig - h;
        let down = loss(&params, false).0;
        params.get_mut(id).data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (g[k] - numeric).abs() / g[k].abs().max(numeric.abs()).max(1e-12);
        if rel > worst.0 {
            worst = (rel, format!("{name}[{k}]"));
        }
        if !(rel < 1e-4) {
            failures.push(format!("{name}[{k}]: analytic {:.6e} numeric {numeric:.6e}", g[k]));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < 600.0,
        format!(
            "{} parameters checked, worst relative error {:.2e} at {}, {secs:.1}s{}",
            names.len(),
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    )
}

/// Textbook PR-curve AP: precision envelope integrated over recall steps.
fn oracle_map(
    dets: &BTreeMap<String, Vec<ClassDetection>>,
    gt: &BTreeMap<String, BoxSet>,
) -> f64 {
    let mut classes: Vec<u32> = gt.values().flat_map(|s| s.keys().copied()).collect();
    classes.sort();
    classes.dedup();
    let mut per_threshold = Vec::new();
    for t in 0..10 {
        let thr = (50 + 5 * t) as f64 / 100.0;
        let mut aps = Vec::new();
        for &c in &classes {
            let npos = gt.values().filter(|s| s.contains_key(&c)).count();
            let mut list: Vec<(&String, &ClassDetection)> = dets
                .iter()
                .flat_map(|(s, ds)| ds.iter().filter(|d| d.class == c).map(move |d| (s, d)))
                .collect();
            list.sort_by(|a, b| b.1.confidence.partial_cmp(&a.1.confidence).unwrap().then(a.0.cmp(b.0)));
            let mut used: Vec<&String> = Vec::new();
            let (mut tp, mut fp) = (0.0, 0.0);
            let mut recall = vec![0.0];
            let mut precision = vec![0.0];
            for (s, d) in list {
                let hit = match gt[s].get(&c) {
                    Some(g) if !used.contains(&s) && brute_iou(&d.bbox, g) >= thr => {
                        used.push(s);
                        true
                    }
                    _ => false,
                };
                if hit {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
                recall.push(tp / npos as f64);
                precision.push(tp / (tp + fp));
            }
            recall.push(1.0);
            precision.push(0.0);
            for i in (0..precision.len() - 1).rev() {
                precision[i] = f64::max(precision[i], precision[i + 1]);
            }
            let mut ap = 0.0;
            for i in 1..recall.len() {
                ap += (recall[i] - recall[i - 1]) * precision[i];
            }
            aps.push(ap);
        }
        per_threshold.push(aps.iter().sum::<f64>() / aps.len() as f64);
    }
    per_threshold.iter().sum::<f64>() / 10.0
}

fn brute_iou(a: &Box3, b: &Box3) -> f64 {
    let mut inter = 1.0;
    for ax in 0..3 {
        let lo = f64::max(a.0[ax] - a.0[ax + 3] / 2.0, b.0[ax] - b.0[ax + 3] / 2.0);
        let hi = f64::min(a.0[ax] + a.0[ax + 3] / 2.0, b.0[ax] + b.0[ax + 3] / 2.0);
        inter *= (hi - lo).max(0.0);
    }
    let va = a.0[3] * a.0[4] * a.0[5];
    let vb = b.0[3] * b.0[4] * b.0[5];
    inter / (va + vb - inter)
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n_samples = rng.gen_range(2..=5);
        let n_classes = rng.gen_range(1..=3u32);
        let mut gt = BTreeMap::new();
        let mut dets = BTreeMap::new();
        for s in 0..n_samples {
            let id = format!("s{s:02}");
            let mut boxes = BoxSet::new();
            let mut ds = Vec::new();
            for c in 1..=n_classes {
                let g = Box3([
                    rng.gen_range(0.3..0.7),
                    rng.gen_range(0.3..0.7),
                    rng.gen_range(0.3..0.7),
                    rng.gen_range(0.1..0.3),
                    rng.gen_range(0.1..0.3),
                    rng.gen_range(0.1..0.3),
                ]);
                if rng.gen_bool(0.8) {
                    boxes.insert(c, g);
                }
                for _ in 0..rng.gen_range(0..=2) {
                    let jitter = rng.gen_range(0.0..0.08);
                    ds.push(ClassDetection {
                        class: c,
                        bbox: Box3(std::array::from_fn(|i| g.0[i] + rng.gen_range(-jitter..=jitter))),
                        // a coarse confidence grid produces ties
                        confidence: rng.gen_range(0..5) as f64 / 4.0,
                    });
                }
            }
            gt.insert(id.clone(), boxes);
            dets.insert(id, ds);
        }
        if gt.values().all(|s| s.is_empty()) {
            continue;
        }
        let ours = map_coco(&dets, &gt, &BTreeMap::new()).unwrap().map_coco;
        worst = worst.max((ours - oracle_map(&dets, &gt)).abs());
    }
    let a = Box3::from_corners([0.0; 3], [1.0; 3]);
    let b = Box3::from_corners([0.0; 3], [0.6, 1.0, 1.0]);
    let single = map_coco(
        &BTreeMap::from([("x".to_string(), vec![ClassDetection { class: 1, bbox: b, confidence: 0.9 }])]),
        &BTreeMap::from([("x".to_string(), BoxSet::from([(1, a)]))]),
        &BTreeMap::new(),
    )
    .unwrap()
    .map_coco;
    let thresholds_ok = iou_thresholds() == [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
    let ap_ok = ap_all_point(&[false, true], 1) == 0.5;
    outcome(
        worst <= 1e-12 && (single - 0.3).abs() <= 1e-12 && thresholds_ok && ap_ok,
        format!("max |map_coco - brute force| = {worst:.1e} on 50 instances, IoU 0.6 single detection -> {single}"),
    )
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut problems = Vec::new();
    let mut checked = 0usize;
    for trial in 0..100 {
        let n = rng.gen_range(1..=4);
        let atlas = random_atlas(&mut rng, n);
        let anchors = generate_query_anchors(&atlas);
        let mut gt = BoxSet::new();
        for (&c, e) in &atlas.classes {
            if rng.gen_bool(0.85) {
                let ext = e.roi.extent();
                let b = Box3(std::array::from_fn(|i| {
                    if i < 3 {
                        e.roi.lo[i] + ext[i] * rng.gen_range(0.1..0.9)
                    } else {
                        e.median[i - 3] * rng.gen_range(0.7..1.3)
                    }
                }));
                gt.insert(c, b);
            }
        }
        let labels = dynamic_labels(&anchors, &gt);
        for (pos, c) in anchors.class_ids.iter().enumerate() {
            let row = &labels.labels[pos * 27..(pos + 1) * 27];
            let Some(target) = gt.get(c) else {
                if labels.presence[pos] || row.iter().any(|&v| v != 0.0) {
                    problems.push(format!("trial {trial}: absent class {c} has labels"));
                }
                continue;
            };
            checked += 1;
            let g: Vec<f64> = anchors.class_anchors(pos).iter().map(|a| giou(&a.to_box(), target)).collect();
            let best = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let argmax = g.iter().position(|&v| v == best).unwrap();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
            if max != 1.0 || min != 0.0 || labels.matched_index[c] != argmax {
                problems.push(format!(
                    "trial {trial} class {c}: max {max} min {min} matched {} argmax {argmax}",
                    labels.matched_index[c]
                ));
            }
        }
    }
    // degenerate rows and the tie rule on constructed candidates
    let same = vec![Box3([0.5, 0.5, 0.5, 0.2, 0.2, 0.2]); 27];
    let gt = BoxSet::from([(1, Box3([0.1, 0.1, 0.1, 0.1, 0.1, 0.1]))]);
    let degenerate = labels_from_candidates(&same, &[1], 27, 13, &gt);
    if degenerate.matched_index[&1] != 13 || degenerate.labels.iter().sum::<f64>() != 1.0 {
        problems.push("degenerate row does not fall back to the center anchor".into());
    }
    let mut tied = vec![Box3([0.9, 0.9, 0.9, 0.1, 0.1, 0.1]); 27];
    tied[4] = gt[&1];
    tied[9] = gt[&1];
    if labels_from_candidates(&tied, &[1], 27, 13, &gt).matched_index[&1] != 4 {
        problems.push("tie not resolved to the lowest index".into());
    }
    outcome(
        problems.is_empty(),
        format!("{checked} present class rows checked{}", if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }),
    )
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    let config = RunConfig::default();
    config.validate().unwrap();
    let started = Instant::now();
    pipeline::write_snapshot(&run, &config).unwrap();
    pipeline::run_phantom(&run, &config).unwrap();
    pipeline::run_preprocess(&run, &config).unwrap();
    pipeline::run_atlas(&run, &config).unwrap();
    let t_train = Instant::now();
    let summary = pipeline::run_train(&run, &config).unwrap();
    let train_secs = t_train.elapsed().as_secs_f64();
    let eval = pipeline::run_eval(&run, &config, None).unwrap();
    let total = started.elapsed().as_secs_f64();
    let m = eval.metrics.map_coco;
    let b = &eval.baseline;
    let curve: Vec<String> = summary.log.iter().map(|l| format!("{:.3}", l.val_map_coco)).collect();
    outcome(
        train_secs < 1800.0 && m >= 0.5 && b.win_fraction >= 0.8,
        format!(
            "test mAP_coco {m:.4}, selected box beats best anchor on {}/{} pairs ({:.1}%), training {:.0}s, pipeline {:.0}s, val curve [{}]",
            b.wins,
            b.pairs,
            100.0 * b.win_fraction,
            train_secs,
            total,
            curve.join(", ")
        ),
    )
}

/// Smaller phantoms and a shorter schedule for the multi-run checks.
fn reduced_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.phantom.grid_size = [32, 32, 64];
    c.preprocess.target_size = [32, 32, 64];
    c.dataset.num_samples = 60;
    c.dataset.split = [40.0 / 60.0, 10.0 / 60.0, 10.0 / 60.0];
    c.train.epochs = 8;
    c
}

fn train_and_score(base: &RunConfig, data: &Path, out: &Path, atlas: &Atlas) -> f64 {
    let manifest = focdec::DatasetManifest::read(data).unwrap();
    let tr = load_split(&manifest, data, Split::Train).unwrap();
    let va = load_split(&manifest, data, Split::Val).unwrap();
    let te = load_split(&manifest, data, Split::Test).unwrap();
    let (model, mut params) = pipeline::build_model::<f32>(base, atlas).unwrap();
    training::train(&model, &mut params, &tr, &va, &base.train, out).unwrap();
    let preds = predict_samples(&model, &params, &te).unwrap();
    map_coco(&preds, &training::ground_truth(&te), &size_subsets(atlas)).unwrap().map_coco
}

fn criterion_10() -> Outcome {
    let full = std::env::var_os("FOCDEC_FULL_ABLATION").is_some();
    let (base, seeds) = if full { (RunConfig::default(), 5) } else { (reduced_config(), 3) };
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    pipeline::run_phantom(&run, &base).unwrap();
    pipeline::run_preprocess(&run, &base).unwrap();
    let atlas = pipeline::run_atlas(&run, &base).unwrap();
    let (mut restriction_wins, mut level_wins) = (0, 0);
    let mut rows = Vec::new();
    for seed in 0..seeds {
        let mut cfg = base.clone();
        cfg.train.seed = seed;
        let default = train_and_score(&cfg, &run.preprocessed(), &dir.path().join(format!("d{seed}")), &atlas);
        let mut unrestricted = cfg.clone();
        unrestricted.model.use_mask_restriction = false;
        let nr = train_and_score(&unrestricted, &run.preprocessed(), &dir.path().join(format!("n{seed}")), &atlas);
        let mut p5 = cfg.clone();
        p5.model.input_level = FeatureLevel::P5;
        let l5 = train_and_score(&p5, &run.preprocessed(), &dir.path().join(format!("p{seed}")), &atlas);
        restriction_wins += (nr < default) as usize;
        level_wins += (l5 < default) as usize;
        rows.push(format!("seed {seed}: P2 {default:.3} no-restriction {nr:.3} P5 {l5:.3}"));
    }
    // soft check: the direction is reported, never gated
    outcome(
        true,
        format!(
            "{} scale; no-restriction below default in {restriction_wins}/{seeds} seeds, P5 below P2 in {level_wins}/{seeds} seeds ({})",
            if full { "full" } else { "reduced" },
            rows.join("; ")
        ),
    )
}

fn tree_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_11() -> Outcome {
    let mut config = reduced_config();
    config.dataset.num_samples = 16;
    config.dataset.split = [0.5, 0.25, 0.25];
    config.train.epochs = 2;
    config.train.intensity_noise = 0.01;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run_once = || {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        pool.install(|| {
            pipeline::write_snapshot(&run, &config).unwrap();
            pipeline::run_all(&run, &config).unwrap();
        });
        (tree_files(dir.path()), dir)
    };
    let ((a, _da), (b, _db)) = (run_once(), run_once());
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let key_files = ["train/checkpoint.bin", "train/train_log.csv", "eval/metrics.json"];
    let present = key_files.iter().all(|f| a.contains_key(*f));
    outcome(
        differing.is_empty() && a.len() == b.len() && present,
        format!("{} files compared, {} differ {:?}", a.len(), differing.len(), differing),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

#[test]
fn acceptance() {
    let criteria: [Criterion; 11] = [
        (1, "mask exactness", criterion_1),
        (2, "masked/dense equivalence", criterion_2),
        (3, "GIoU/IoU voxel oracle", criterion_3),
        (4, "anchor tiling", criterion_4),
        (5, "box feasibility", criterion_5),
        (6, "gradient check", criterion_6),
        (7, "mAP oracle equivalence", criterion_7),
        (8, "dynamic-label contract", criterion_8),
        (9, "desk-scale end-to-end", criterion_9),
        (10, "ablation direction (soft)", criterion_10),
        (11, "determinism", criterion_11),
    ];
    let only: Option<Vec<u32>> = std::env::var("FOCDEC_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let line = format!(
            "criterion {n:>2} {:<28} {} ({:.1}s): {}",
            name,
            if result.pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            result.detail
        );
        // written to the raw handle so the line survives output capture
        let _ = writeln!(std::io::stdout().lock(), "{line}");
        if !result.pass {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
