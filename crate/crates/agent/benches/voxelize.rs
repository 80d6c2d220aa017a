use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxbc::voxel::{voxelize_seq, ColoredPoint};
use voxbc_sim::v3;

fn point_sets(per_camera: usize) -> Vec<Vec<ColoredPoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    (0..4)
        .map(|_| {
            (0..per_camera)
                .map(|_| ColoredPoint {
                    pos: v3(rng.gen(), rng.gen(), rng.gen()),
                    rgb: [rng.gen(), rng.gen(), rng.gen()],
                })
                .collect()
        })
        .collect()
}

fn bench_voxelize(c: &mut Criterion) {
    let mut group = c.benchmark_group("voxelize");
    for per_camera in [16 * 1024, 64 * 1024] {
        let sets = point_sets(per_camera);
        group.bench_with_input(BenchmarkId::new("seq", per_camera), &sets, |b, s| {
            b.iter(|| voxelize_seq(s, 32).unwrap())
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("par", per_camera), &sets, |b, s| {
            b.iter(|| voxbc::voxel::voxelize_par(s, 32).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_voxelize);
criterion_main!(benches);
