use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use susmap_bench::workload;
use susmap_core::mcmc::{fit_ism, fit_sdsm_full, McmcConfig};
use susmap_core::picar::{build_basis, fit_sdsm_picar};
use susmap_core::BackgroundRate;

fn samplers(c: &mut Criterion) {
    let cfg = McmcConfig { n_iter: 200, burn_in: 100, thin: 5, ..McmcConfig::default() };
    let mut g = c.benchmark_group("mcmc_200_iterations");
    g.sample_size(10);
    for n in [100, 250] {
        let w = workload(n, 100);
        let gamma = BackgroundRate::new(w.scenario.gamma).unwrap();
        let k = w.scenario.kernel;
        g.bench_with_input(BenchmarkId::new("ism", n), &w, |b, w| b.iter(|| fit_ism(&w.panel, &w.d, &k, gamma, &cfg).unwrap()));
        g.bench_with_input(BenchmarkId::new("sdsm", n), &w, |b, w| {
            b.iter(|| fit_sdsm_full(&w.panel, &w.d, &k, gamma, &cfg).unwrap())
        });
        let basis = build_basis(&w.scenario.units, None, 50).unwrap();
        g.bench_with_input(BenchmarkId::new("sdsm_picar", n), &w, |b, w| {
            b.iter(|| fit_sdsm_picar(&w.panel, &w.d, &k, gamma, &basis, &cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, samplers);
criterion_main!(benches);
