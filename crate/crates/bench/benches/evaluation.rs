use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use landscape_atlas::grape::random_pulse;
use landscape_atlas::rng::tagged_stream;
use landscape_atlas::spin::{self, Boundary, SpinChainSpec};
use landscape_atlas::surrogates::{NeuralNet, Surrogate};

const N: usize = 20;
const T_J: f64 = 2.0;
const U_MAX: f64 = 1.0;

fn pulses(count: usize) -> Vec<Vec<f64>> {
    let mut rng = tagged_stream(0, "criterion");
    (0..count)
        .map(|_| random_pulse(&mut rng, N, T_J, U_MAX).unwrap().amplitudes().to_vec())
        .collect()
}

fn exact_evaluation(c: &mut Criterion) {
    let batch = pulses(10);
    let mut group = c.benchmark_group("exact-infidelity");
    for l in [2usize, 4, 6] {
        let spec = SpinChainSpec::new(l, 0.0, Boundary::Periodic).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(l), &spec, |b, spec| {
            b.iter(|| {
                let mut acc = 0.0;
                for u in &batch {
                    let pulse = spin::Pulse::new(u.clone(), T_J, U_MAX).unwrap();
                    acc += spin::infidelity(spec, &pulse).unwrap();
                }
                acc
            })
        });
    }
    group.finish();
}

fn exact_gradient(c: &mut Criterion) {
    let spec = SpinChainSpec::new(4, 0.0, Boundary::Periodic).unwrap();
    let u = pulses(1).remove(0);
    let pulse = spin::Pulse::new(u, T_J, U_MAX).unwrap();
    c.bench_function("exact-gradient-L4-N20", |b| {
        b.iter(|| spin::infidelity_value_and_gradient(&spec, &pulse).unwrap())
    });
}

fn nn_forward(c: &mut Criterion) {
    let net = NeuralNet::for_problem(N, U_MAX, 0);
    let batch = pulses(1000);
    c.bench_function("nn-forward-batch1000", |b| b.iter(|| net.predict(&batch).unwrap()));
}

criterion_group!(benches, exact_evaluation, exact_gradient, nn_forward);
criterion_main!(benches);
