use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use iwin_bench::{attention, depthwise, feature_map};
use iwin_core::interleave::{self, WindowLayout};
use iwin_core::layers::{dense_attention, iw_msa};
use iwin_core::Tape;

fn rearrange_restore(c: &mut Criterion) {
    let mut group = c.benchmark_group("rearrange_restore");
    for (size, m) in [(56, 7), (224, 7)] {
        let x = feature_map(size, 96, 0);
        let layout = WindowLayout::new(size, size, m).unwrap();
        assert!(
            interleave::restore(&interleave::rearrange(&x, &layout).unwrap(), &layout)
                .unwrap()
                .bit_eq(&x)
        );
        group.bench_with_input(BenchmarkId::from_parameter(size), &x, |b, x| {
            b.iter(|| {
                let y = interleave::rearrange(black_box(x), &layout).unwrap();
                interleave::restore(&y, &layout).unwrap()
            })
        });
    }
    group.finish();
}

fn attention_kinds(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention_28x28x96");
    group.sample_size(10);
    let (store, a) = attention(96, 3, 1).unwrap();
    let x = feature_map(28, 96, 2);
    let layout = WindowLayout::new(28, 28, 7).unwrap();
    let tape = Tape::no_grad();
    let p = store.bind(&tape);
    let xv = tape.leaf(x);
    group.bench_function("iw_msa_m7", |b| {
        b.iter(|| iw_msa(black_box(&xv), &layout, &a, &p).unwrap())
    });
    group.bench_function("dense", |b| b.iter(|| dense_attention(black_box(&xv), &a, &p).unwrap()));
    group.finish();
}

fn depthwise_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("dwconv_56x56x96");
    let x = feature_map(56, 96, 3);
    for k in [3, 5, 7] {
        let (store, conv) = depthwise(96, k, 4).unwrap();
        let tape = Tape::no_grad();
        let p = store.bind(&tape);
        let xv = tape.leaf(x.clone());
        group.bench_function(BenchmarkId::from_parameter(k), |b| {
            b.iter(|| conv.forward(black_box(&xv), &p).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, rearrange_restore, attention_kinds, depthwise_conv);
criterion_main!(benches);
