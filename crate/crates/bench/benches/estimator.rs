use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use xlmimo_core::experiment::build_trial;
use xlmimo_core::{
    run_algorithm, Algorithm, CMatrix, ExperimentConfig, MrfParams, MrfPrior, Prior, RMatrix, C64,
};

fn config() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.uamp.max_iters = 10;
    c.uamp.tol = 0.0;
    c
}

fn operator(c: &mut Criterion) {
    let config = config();
    let problem = build_trial(&config, 0, 10.0).unwrap();
    let op = &problem.operator;
    let x = CMatrix::from_element(op.x_shape().0, op.x_shape().1, C64::new(1.0, 0.0));
    let y = problem.observation.clone();
    c.bench_function("forward", |b| b.iter(|| op.forward(&x).unwrap()));
    c.bench_function("adjoint", |b| b.iter(|| op.adjoint(&y).unwrap()));
    c.bench_function("svd_preprocess", |b| {
        b.iter(|| op.svd_preprocess().unwrap())
    });
}

fn mrf_sweep(c: &mut Criterion) {
    let (rows, cols) = (256, 64);
    let x_hat = CMatrix::from_fn(rows, cols, |i, q| {
        C64::new(((i * 7 + q * 3) % 11) as f64 * 0.1, 0.0)
    });
    let var = RMatrix::from_element(rows, cols, 0.05);
    c.bench_function("mrf_update", |b| {
        b.iter_batched(
            || {
                let mut p = MrfPrior::new(MrfParams::default(), 1).unwrap();
                p.reset((rows, cols));
                p
            },
            |mut p| p.update(&x_hat, &var).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn estimators(c: &mut Criterion) {
    let mut config = config();
    config.somp_atoms = Some(16);
    let problem = build_trial(&config, 0, 10.0).unwrap();
    let mut group = c.benchmark_group("estimate");
    group.sample_size(10);
    for alg in Algorithm::ALL {
        group.bench_function(alg.to_string(), |b| {
            b.iter(|| run_algorithm(&problem, alg, &config).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, operator, mrf_sweep, estimators);
criterion_main!(benches);
