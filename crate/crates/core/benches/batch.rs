use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gexpect_core::bsde::{max_w_norm, solve, CatalogDriver, DriverSpec, SolveOptions};
use gexpect_core::exec::map_indexed;
use gexpect_core::gexp::RSpec;
use gexpect_core::martrep::davis_varaiya_basis;
use gexpect_core::probspace::{FilteredSpace, RandomVariable, TimeGrid};
use gexpect_core::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn modes() -> [(&'static str, Execution); 2] {
    [
        ("sequential", Execution::Sequential),
        ("parallel", Execution::Parallel),
    ]
}

fn tree(depth: usize) -> FilteredSpace {
    FilteredSpace::regular(TimeGrid::from_increments(&vec![0.25; depth]).unwrap(), 3).unwrap()
}

fn payoffs(space: &FilteredSpace, n: usize) -> Vec<RandomVariable> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (0..n)
        .map(|_| {
            RandomVariable::new(
                space.steps(),
                (0..space.n_outcomes())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
            )
        })
        .collect()
}

/// Many independent solves on a small tree: parallel over payoffs.
fn payoff_batch(c: &mut Criterion) {
    let space = tree(5);
    let basis = davis_varaiya_basis(&space);
    let rho = 0.5 / max_w_norm(&space, &basis);
    let g = CatalogDriver::new(
        DriverSpec::RNorm {
            r: RSpec::Scalar(rho),
        },
        &space,
        &basis,
    )
    .unwrap();
    let batch = payoffs(&space, 256);
    let mut group = c.benchmark_group("payoff_batch");
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            let opts = SolveOptions {
                exec: Execution::Sequential,
                ..SolveOptions::default()
            };
            b.iter(|| {
                map_indexed(exec, batch.len(), |i| {
                    solve(&g, &space, &basis, &batch[i], &opts).unwrap().y0()
                })
            })
        });
    }
    group.finish();
}

/// One solve on a wide tree: parallel over the atoms of each level.
fn wide_level(c: &mut Criterion) {
    let space = tree(9);
    let basis = davis_varaiya_basis(&space);
    let g = CatalogDriver::new(DriverSpec::LinearY { a: -0.5 }, &space, &basis).unwrap();
    let q = payoffs(&space, 1).remove(0);
    let mut group = c.benchmark_group("wide_level");
    group.sample_size(20);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            let opts = SolveOptions {
                exec,
                ..SolveOptions::default()
            };
            b.iter(|| black_box(solve(&g, &space, &basis, &q, &opts).unwrap().y0()))
        });
    }
    group.finish();
}

criterion_group!(benches, payoff_batch, wide_level);
criterion_main!(benches);
