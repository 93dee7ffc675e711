use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use spanfuse_bench::{example, fixture};
use spanfuse_core::extraction::{example_span_tables, extract_top_k, mle_extract_loss};
use spanfuse_core::selection::score_candidates;
use spanfuse_core::Tape;

fn bench_extraction_forward(c: &mut Criterion) {
    let (vocab, state) = fixture(32);
    let ex = example(5, 40);
    c.bench_function("extraction_forward_n5_len40", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let vars = state.extraction.bind(&mut tape);
            let mut none = None;
            black_box(example_span_tables(&mut tape, &vars, &vocab, &ex, 8, &mut none).unwrap());
        })
    });
}

fn bench_extraction_backward(c: &mut Criterion) {
    let (vocab, state) = fixture(32);
    let ex = example(5, 40);
    c.bench_function("extraction_loss_backward_n5_len40", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let vars = state.extraction.bind(&mut tape);
            let mut none = None;
            let loss = mle_extract_loss(&mut tape, &vars, &vocab, &ex, 8, &mut none)
                .unwrap()
                .unwrap();
            tape.backward(loss).unwrap();
            state.zero_grads();
        })
    });
}

fn bench_selection_forward(c: &mut Criterion) {
    let (vocab, state) = fixture(32);
    let ex = example(5, 40);
    let mut tape = Tape::new();
    let xvars = state.extraction.bind(&mut tape);
    let mut none = None;
    let tables = example_span_tables(&mut tape, &xvars, &vocab, &ex, 8, &mut none).unwrap();
    let set = extract_top_k(&mut tape, &tables, 2).unwrap();
    c.bench_function("selection_forward_m10_len40", |bench| {
        bench.iter(|| {
            let mut t2 = Tape::new();
            let svars = state.selection.bind(&mut t2);
            let mut n2 = None;
            black_box(
                score_candidates(&mut t2, &svars, &vocab, &ex, &set.spans, state.flags, &mut n2)
                    .unwrap(),
            );
        })
    });
}

criterion_group!(
    benches,
    bench_extraction_forward,
    bench_extraction_backward,
    bench_selection_forward
);
criterion_main!(benches);
