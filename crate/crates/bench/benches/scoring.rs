use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use itm_bench::{slices, synth, BatchFixture};
use itm_core::ngram::{self, CaptionScorer};
use itm_core::semrel;
use itm_core::trainer::{self, BatchFeatures};

fn cider(c: &mut Criterion) {
    let (corpus, _, _) = synth(100);
    let df = ngram::build_df(&corpus);
    let profiles = ngram::corpus_profiles(&corpus);
    let refs: Vec<_> = corpus.gt(0).iter().map(|&j| profiles[j].clone()).collect();
    c.bench_function("cider_d/direct", |b| b.iter(|| ngram::cider_d(black_box(&profiles[7]), &refs, &df)));

    let scorer = CaptionScorer::new(&corpus, &df);
    c.bench_function("cider_d/cached", |b| b.iter(|| scorer.phi(black_box(0), black_box(7))));
    let mut scratch = scorer.row_scratch();
    let mut row = vec![0.0; corpus.n_captions()];
    c.bench_function("cider_d/row_of_500", |b| b.iter(|| scorer.phi_row(black_box(3), &mut scratch, &mut row)));
}

fn sim_matrix(c: &mut Criterion) {
    let mut group = c.benchmark_group("build_sim_matrix");
    group.sample_size(10);
    for images in [100, 400] {
        let (corpus, _, _) = synth(images);
        let df = ngram::build_df(&corpus);
        group.bench_with_input(BenchmarkId::from_parameter(images), &corpus, |b, corpus| {
            b.iter(|| semrel::build_sim_matrix(corpus, &df))
        });
    }
    group.finish();
}

fn loss(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_grad");
    for size in [32, 128] {
        let f = BatchFixture::new(size, 32);
        let (imgs, caps) = (slices(&f.images), slices(&f.captions));
        let batch = BatchFeatures { images: &imgs, captions: &caps };
        group.bench_function(BenchmarkId::from_parameter(size), |b| {
            b.iter(|| trainer::loss_and_grad(&f.model, &batch, &f.triplets, &f.cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, cider, sim_matrix, loss);
criterion_main!(benches);
