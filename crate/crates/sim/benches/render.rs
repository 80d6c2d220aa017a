use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxbc_sim::render::{render_seq, RenderBox};
use voxbc_sim::scene::{TABLE, TABLE_COLOR};
use voxbc_sim::{default_cameras, Env, TaskKind};

#[cfg(feature = "parallel")]
use voxbc_sim::render::render_par;

fn scene_boxes(env: &Env) -> Vec<RenderBox> {
    let mut boxes = vec![RenderBox { aabb: TABLE, color: TABLE_COLOR }];
    boxes.extend(env.objects().iter().map(|o| o.render_box()));
    boxes
}

fn bench_render(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let env = Env::new(TaskKind::OpenDrawer, 0, 0.03, &[], &mut rng).unwrap();
    let boxes = scene_boxes(&env);
    let mut group = c.benchmark_group("render");
    for resolution in [64usize, 128] {
        let cam = default_cameras(resolution).into_iter().next().unwrap();
        group.bench_with_input(BenchmarkId::new("seq", resolution), &resolution, |b, _| {
            b.iter(|| render_seq(&boxes, &cam))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("par", resolution), &resolution, |b, _| {
            b.iter(|| render_par(&boxes, &cam))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_render);
criterion_main!(benches);
