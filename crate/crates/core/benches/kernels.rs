//! Sequential versus data-parallel kernels. The sequential arm runs inside a
//! one-thread rayon pool, which executes the same code path as building
//! without the `parallel` feature.

use std::hint::black_box;
use std::path::Path;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use normlab::harness::config::RunConfig;
use normlab::harness::run::Experiment;
use normlab::numerics::{Mat, Rng};
use normlab::objective::dense_g_values;

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    vec![
        (
            "sequential",
            rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap(),
        ),
        (
            "parallel",
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap(),
        ),
    ]
}

fn unit_rows(n: usize, d: usize, rng: &mut Rng) -> Mat {
    let mut m = Mat::uniform(n, d, -1.0, 1.0, rng);
    for i in 0..n {
        let nr = normlab::numerics::norm(m.row(i));
        m.row_mut(i).iter_mut().for_each(|x| *x /= nr);
    }
    m
}

fn oracle(c: &mut Criterion) {
    let mut rng = Rng::new(0);
    let (e1, e2) = (unit_rows(2048, 16, &mut rng), unit_rows(2048, 16, &mut rng));
    let mut group = c.benchmark_group("dense_g_values_2048x16");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| dense_g_values(black_box(&e1), black_box(&e2), 0.07).unwrap()))
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let text =
        "data.n = 4096\ndata.k = 64\nencoder.kind = direct\nencoder.dim = 16\nmethod = neuclip\nbatch_size = 128\n";
    let exp = Experiment::new(RunConfig::parse(text, Path::new(".")).unwrap()).unwrap();
    let mut group = c.benchmark_group("neuclip_step_b128");
    for (name, pool) in pools() {
        let mut state = exp.fresh_state().unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| state.step(&exp.cfg.trainer, exp.raw()).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, oracle, train_step);
criterion_main!(benches);
