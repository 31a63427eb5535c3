use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use forestnmt::decoder::{greedy_decode, sentence_loss};
use forestnmt::encoder::encode;
use forestnmt::eval::corpus_bleu;
use forestnmt::synth::random_forest;
use forestnmt::train::batch_gradients;
use forestnmt::{Mode, Tape};
use forestnmt_bench::fixture;

fn encoders(c: &mut Criterion) {
    let mut g = c.benchmark_group("encode");
    for mode in Mode::ALL {
        let f = fixture(mode, 64, 20, 1, 1);
        let ex = &f.examples[0];
        g.bench_function(BenchmarkId::from_parameter(mode), |b| {
            b.iter(|| {
                let mut tape = Tape::with_params(&f.model.store);
                black_box(encode(&mut tape, &f.model, ex.input()).unwrap().num_attendable())
            })
        });
    }
    g.finish();
}

fn loss_and_backward(c: &mut Criterion) {
    let mut g = c.benchmark_group("sentence_loss_backward");
    for mode in Mode::ALL {
        let f = fixture(mode, 64, 20, 1, 2);
        let ex = &f.examples[0];
        g.bench_function(BenchmarkId::from_parameter(mode), |b| {
            b.iter(|| {
                let mut tape = Tape::with_params(&f.model.store);
                let loss = sentence_loss(&mut tape, &f.model, ex.input(), &ex.tgt).unwrap();
                tape.backward(loss).unwrap();
                black_box(tape.param_grads())
            })
        });
    }
    g.finish();
}

fn minibatch(c: &mut Criterion) {
    let f = fixture(Mode::Forest, 32, 12, 16, 3);
    let batch: Vec<_> = f.examples.iter().collect();
    c.bench_function("batch_gradients/forest/16x12", |b| {
        b.iter(|| black_box(batch_gradients(&f.model, &batch).unwrap()))
    });
}

fn decoding(c: &mut Criterion) {
    let f = fixture(Mode::Forest, 64, 20, 1, 4);
    let ex = &f.examples[0];
    c.bench_function("greedy_decode/forest/20", |b| {
        b.iter(|| black_box(greedy_decode(&f.model, ex.input(), None).unwrap()))
    });
}

fn forests(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let forest = random_forest(40, 32, &mut rng);
    c.bench_function("forest/tree_count/40w32t", |b| b.iter(|| black_box(forest.tree_count())));
    let text = forest.to_text();
    c.bench_function("forest/parse/40w32t", |b| b.iter(|| black_box(forestnmt::forest::parse_forest(&text).unwrap())));
}

fn bleu(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut sentence = |len: usize| -> Vec<String> { (0..len).map(|_| format!("w{}", rng.gen_range(0..50))).collect() };
    let hyps: Vec<_> = (0..2000).map(|_| sentence(25)).collect();
    let refs: Vec<_> = (0..2000).map(|_| sentence(25)).collect();
    c.bench_function("corpus_bleu/2000x25", |b| b.iter(|| black_box(corpus_bleu(&hyps, &refs).unwrap().bleu)));
}

criterion_group!(benches, encoders, loss_and_backward, minibatch, decoding, forests, bleu);
criterion_main!(benches);
