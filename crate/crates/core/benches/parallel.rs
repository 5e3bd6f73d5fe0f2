//! Sequential vs data-parallel timings for the hot loops. Build with
//! `--no-default-features` to see the fallback, where both rows run
//! sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use foldedit_core::engine::{synth_initial_state, SessionSpec};
use foldedit_core::eval::{background_mask, masked_ssim};
use foldedit_core::par::Exec;
use foldedit_core::scene::render::render_with;
use foldedit_core::scene::{apply_transition, EditCommand};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench(c: &mut Criterion) {
    let (w, h) = (1024, 768);
    let spec = SessionSpec {
        canvas: (w, h),
        n_objects_range: (6, 6),
        ..SessionSpec::with_seed(9)
    };
    let scene = synth_initial_state(9, &spec).unwrap();
    let post_scene = apply_transition(&scene, &[EditCommand::remove(scene.objects[0].id.clone())]).unwrap();
    let pre = render_with(Exec::Sequential, &scene, w, h).unwrap();
    let post = render_with(Exec::Sequential, &post_scene, w, h).unwrap();
    let (mask, _) = background_mask(&pre, &post).unwrap();

    let mut g = c.benchmark_group("render_1024x768");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| render_with(exec, &scene, w, h).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("masked_ssim_1024x768");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| masked_ssim(&pre, &post, &mask, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
