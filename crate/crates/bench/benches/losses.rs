use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fcam_bench::{image, maps};
use fcam_core::losses::{asc_log_barrier, crf_loss, crf_loss_pooled, partial_cross_entropy};
use fcam_core::sampling::{PixelLabel, PseudoLabelMask};
use std::hint::black_box;

fn crf(c: &mut Criterion) {
    let mut g = c.benchmark_group("crf");
    g.sample_size(10);
    for side in [32, 64] {
        let (m, img) = (maps(side), image(side));
        g.bench_with_input(BenchmarkId::new("full", side), &side, |b, _| {
            b.iter(|| crf_loss(black_box(&m), &img, 15.0, 0.1).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("pooled_2", side), &side, |b, _| {
            b.iter(|| crf_loss_pooled(black_box(&m), &img, 15.0, 0.1, 2).unwrap())
        });
    }
    g.finish();
}

fn pixel_terms(c: &mut Criterion) {
    let side = 64;
    let m = maps(side);
    let mut mask = PseudoLabelMask::unknown(side, side);
    for p in (0..side * side).step_by(97) {
        mask.labels[p] = if p % 2 == 0 { PixelLabel::Foreground } else { PixelLabel::Background };
    }
    c.bench_function("partial_ce_64", |b| b.iter(|| partial_cross_entropy(black_box(&m), &mask).unwrap()));
    c.bench_function("asc_64", |b| b.iter(|| asc_log_barrier(black_box(&m), 5.0).unwrap()));
}

criterion_group!(benches, crf, pixel_terms);
criterion_main!(benches);
