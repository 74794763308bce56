use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use epsem::harness::{run_strong_error, EpsRule, StrongErrorPlan};
use epsem::model::presets::strong_p_sweep;
use epsem::par::ExecMode;

fn strong_error(c: &mut Criterion) {
    let model = strong_p_sweep().unwrap();
    let mut group = c.benchmark_group("strong_error");
    group.sample_size(10);
    for (name, mode) in [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)] {
        let plan = StrongErrorPlan {
            p_norms: vec![2, 4],
            n_grid: vec![16, 32, 64],
            n_max: 512,
            eps_rule: EpsRule::HalfPlusInvP,
            mc_paths: 4096,
            seed: 1,
            mode,
        };
        group.bench_with_input(BenchmarkId::from_parameter(name), &plan, |b, plan| {
            b.iter(|| run_strong_error(&model, plan).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, strong_error);
criterion_main!(benches);
