use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgvl_bench::Fixture;
use sgvl_core::scenegraph::parse;
use sgvl_core::train::step_batch;
use std::hint::black_box;

fn text(c: &mut Criterion) {
    let f = Fixture::small();
    let captions: Vec<&str> = f.corpus.captions.iter().take(64).map(|c| c.text.as_str()).collect();
    c.bench_function("parse_64_captions", |b| {
        b.iter(|| captions.iter().map(|t| parse(black_box(t), &f.lexicon).node_count()).sum::<usize>())
    });
    c.bench_function("wordpiece_64_captions", |b| {
        b.iter(|| captions.iter().map(|t| f.vocab.wordpiece(black_box(t)).len()).sum::<usize>())
    });
}

fn training(c: &mut Criterion) {
    let f = Fixture::small();
    let cfg = f.train_config(8);
    let policy = sgvl_core::train::effective_policy(&f.data, &cfg).unwrap();
    let mut model = f.model();
    let batch = step_batch(&f.data, &policy, &cfg, 0).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("masking_batch_8", |b| {
        let mut step = 0u64;
        b.iter(|| {
            step += 1;
            step_batch(&f.data, &policy, &cfg, step).unwrap()
        })
    });
    group.bench_function("forward_backward_batch_8", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.iter(|| {
            model.params_mut().clear_grads();
            model.loss_and_grad(&batch, Some(&mut rng)).unwrap().total
        })
    });
    group.finish();
}

criterion_group!(benches, text, training);
criterion_main!(benches);
