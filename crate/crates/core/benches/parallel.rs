use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use matret_core::encoder::{embed, init_from_seed, patchify, EncoderConfig};
use matret_core::material::sample_gallery;
use matret_core::par;
use matret_core::renderer::render_sphere_swatch;

fn encode_batch(c: &mut Criterion) {
    let params = init_from_seed(&EncoderConfig::default()).unwrap();
    let gallery = sample_gallery(1, 32, "b");
    let inputs: Vec<_> = gallery
        .iter()
        .map(|m| patchify(&params.config, &render_sphere_swatch(m, 32).unwrap()).unwrap())
        .collect();
    let mut group = c.benchmark_group("encode_32");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("map", if par::is_parallel() { "rayon" } else { "fallback" }), |b| {
        b.iter(|| par::map(&inputs, |x| embed(&params, x).unwrap()))
    });
    group.bench_function(BenchmarkId::new("map", "sequential"), |b| {
        b.iter(|| par::map_range_seq(inputs.len(), |i| embed(&params, &inputs[i]).unwrap()))
    });
    group.finish();
}

fn render_swatches(c: &mut Criterion) {
    let gallery = sample_gallery(2, 16, "b");
    let mut group = c.benchmark_group("swatch_16");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("map", if par::is_parallel() { "rayon" } else { "fallback" }), |b| {
        b.iter(|| par::map(&gallery, |m| render_sphere_swatch(m, 64).unwrap()))
    });
    group.bench_function(BenchmarkId::new("map", "sequential"), |b| {
        b.iter(|| par::map_range_seq(gallery.len(), |i| render_sphere_swatch(&gallery[i], 64).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, encode_batch, render_swatches);
criterion_main!(benches);
