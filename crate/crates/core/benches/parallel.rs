use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lqglm::datasets::vaso;
use lqglm::diagnose::{envelope, ResidualKind};
use lqglm::estimate::{fit_mlq, FitControl};
use lqglm::numerics::RngStream;
use lqglm::parallel::Parallelism;
use lqglm::simulate::{run_study, SimDesign};

fn modes() -> [(&'static str, Parallelism); 2] {
    [("sequential", Parallelism::Sequential), ("threads", Parallelism::Threads)]
}

fn study(c: &mut Criterion) {
    let design = SimDesign::new(100, 0.05, 5.0, 100, vec![1.0, 0.9], 1);
    let mut g = c.benchmark_group("run_study");
    g.sample_size(10);
    for (name, par) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| run_study(&design, par).unwrap())
        });
    }
    g.finish();
}

fn bootstrap(c: &mut Criterion) {
    let data = vaso().unwrap();
    let control = FitControl::with_q(0.79);
    let fit = fit_mlq(&data, &control).unwrap();
    let mut g = c.benchmark_group("envelope");
    g.sample_size(10);
    for (name, par) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| {
                envelope(&data, &fit, ResidualKind::Deviance, 99, &control, RngStream::new(1, 0), par).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, study, bootstrap);
criterion_main!(benches);
