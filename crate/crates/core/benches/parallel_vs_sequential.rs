use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lvcs::model::{build_mean_design, Priors, SpatialBasis};
use lvcs::par::Execution;
use lvcs::sampler::{gibbs_sweep, initial_params, initial_state, ChainConfig, ModelData};
use lvcs::simulate::{simulate_granule, SimConfig};

fn sweep(c: &mut Criterion) {
    let sim = SimConfig {
        n_lon: 20,
        n_lat: 15,
        n_p: 24,
        seed: 5,
        ..SimConfig::default()
    };
    let granule = simulate_granule(&sim).unwrap().granule;
    let dl = build_mean_design(&granule, 3, SpatialBasis::Constant).unwrap();
    let dh = build_mean_design(&granule, 3, SpatialBasis::Constant).unwrap();
    let data = ModelData::new(&granule, dl, dh).unwrap();
    let priors = Priors::default();

    let mut group = c.benchmark_group("gibbs_sweep_300x24");
    group.sample_size(20);
    for (name, execution) in [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)] {
        let config = ChainConfig {
            execution,
            ..ChainConfig::default()
        };
        let settings = config.sweep_settings();
        let start = initial_state(&data, initial_params(&data, &priors, &config).unwrap()).unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            let mut state = start.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            b.iter(|| gibbs_sweep(&mut state, &data, &priors, &settings, [1.0, 1.0], &mut rng).unwrap());
        });
    }
    group.finish();
}

criterion_group!(benches, sweep);
criterion_main!(benches);
