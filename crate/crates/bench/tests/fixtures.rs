use focdec::map_coco;
use focdec_bench::{block_mask, detection_set, random_vec};

#[test]
fn fixtures_are_seeded() {
    assert_eq!(random_vec(16, 3), random_vec(16, 3));
    assert_ne!(random_vec(16, 3), random_vec(16, 4));
}

#[test]
fn block_mask_partitions_keys() {
    let m = block_mask(3, 2, 12);
    assert_eq!(m.num_queries(), 6);
    for v in 0..12 {
        assert_eq!((0..3).filter(|&c| m.class_row(c)[v]).count(), 1);
    }
}

#[test]
fn detection_set_scores_high() {
    let (d, g) = detection_set(20, 3, 1);
    let r = map_coco(&d, &g, &Default::default()).unwrap();
    assert!(r.map_coco > 0.5 && r.map_coco < 1.0, "{}", r.map_coco);
}
