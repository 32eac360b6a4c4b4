use criterion::{black_box, criterion_group, criterion_main, Criterion};

use mgrq_bench::toy_pair;
use mgrq_core::reconstruct::{reconstruct_cached, BlockCache, BlockObjective, Components, LossLog, ReconstructionConfig};
use mgrq_core::Tape;

fn block(c: &mut Criterion) {
    let (fp, q, calib) = toy_pair(64);
    let cache = BlockCache::new(&fp, &q, 1, &calib).unwrap();
    let batch = cache.batch(&(0..32).collect::<Vec<_>>()).unwrap();

    c.bench_function("block 1 objective forward (batch 32)", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            black_box(BlockObjective::build(&mut tape, &q, 1, &batch, true).unwrap());
        })
    });
    c.bench_function("block 1 objective forward+backward (batch 32)", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let obj = BlockObjective::build(&mut tape, &q, 1, &batch, true).unwrap();
            let (loss, _) = obj.fuse(&mut tape, Components::ALL, 1.0, 1.0).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });

    let config = ReconstructionConfig {
        iterations: 5,
        ..ReconstructionConfig::default()
    };
    c.bench_function("reconstruct block 1, 5 iterations", |b| {
        b.iter(|| {
            let mut model = q.clone();
            let mut log = LossLog::default();
            reconstruct_cached(&mut model, 1, &cache, &config, &mut log).unwrap();
            black_box(log)
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = block
}
criterion_main!(benches);
