use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use gprop_bench::{glass_context, result_for, tasks};
use gprop_core::queue::{Claim, JobStore};

/// Enqueue a generation-sized batch, claim and answer every task, collect.
fn cycle(c: &mut Criterion) {
    let ctx = glass_context(1);
    for n in [30, 1000] {
        c.bench_function(&format!("queue/cycle_{n}"), |b| {
            b.iter_batched(
                || {
                    let store = JobStore::new();
                    let job = store.create_job(ctx.descriptor.clone(), 60_000).unwrap();
                    let batch = tasks(&ctx, &job, n);
                    (store, job, batch)
                },
                |(store, job, batch)| {
                    store.enqueue(&job, batch).unwrap();
                    while let Claim::Task(t) = store.claim(&job, "w").unwrap() {
                        store.submit(&job, result_for(&t, "w")).unwrap();
                    }
                    store.collect(&job, 0).unwrap()
                },
                BatchSize::SmallInput,
            )
        });
    }
}

criterion_group!(benches, cycle);
criterion_main!(benches);
