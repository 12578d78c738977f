use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use focdec::nn::conv::{conv3d_backward, conv3d_forward, ConvGeom};
use focdec::nn::masked_attention;
use focdec_bench::{block_mask, detection_set, random_tensor, random_vec};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d");
    group.sample_size(10);
    for (c_in, c_out, stride, input) in [(1, 8, 1, [32, 32, 48]), (8, 16, 2, [32, 32, 48]), (16, 16, 1, [16, 16, 24])] {
        let g = ConvGeom { c_in, c_out, k: 3, stride, input };
        let x = random_vec(c_in * input.iter().product::<usize>(), 1);
        let w = random_vec(c_out * c_in * 27, 2);
        let id = format!("{c_in}to{c_out}_s{stride}_{}x{}x{}", input[0], input[1], input[2]);
        group.bench_function(BenchmarkId::new("forward", &id), |b| b.iter(|| conv3d_forward(&x, &w, None, &g)));
        let dy = conv3d_forward(&x, &w, None, &g);
        group.bench_function(BenchmarkId::new("backward", &id), |b| b.iter(|| conv3d_backward(&x, &w, &dy, &g, true)));
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("masked_attention");
    group.sample_size(10);
    let (classes, qpc, d) = (6, 27, 96);
    for voxels in [768, 6144] {
        let q = random_tensor(&[classes * qpc, d], 3);
        let k = random_tensor(&[voxels, d], 4);
        let v = random_tensor(&[voxels, d], 5);
        let mask = block_mask(classes, qpc, voxels);
        group.bench_function(BenchmarkId::new("masked", voxels), |b| {
            b.iter(|| masked_attention(&q, &k, &v, 4, Some(&mask)).unwrap())
        });
        group.bench_function(BenchmarkId::new("dense", voxels), |b| {
            b.iter(|| masked_attention(&q, &k, &v, 4, None).unwrap())
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let mut group = c.benchmark_group("map_coco");
    for samples in [20, 200] {
        let (d, g) = detection_set(samples, 6, 7);
        group.bench_function(BenchmarkId::from_parameter(samples), |b| {
            b.iter(|| focdec::map_coco(&d, &g, &Default::default()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, attention, evaluation);
criterion_main!(benches);
