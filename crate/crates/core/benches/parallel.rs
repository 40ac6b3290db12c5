use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tilevlm::decoder::DecoderConfig;
use tilevlm::encoder::{encode_view_patches, EncoderConfig};
use tilevlm::grid::{GridSpec, PixelNorm};
use tilevlm::image::RasterImage;
use tilevlm::par;
use tilevlm::pipeline::{Example, Pipeline, PipelineConfig};

fn config(grid: GridSpec) -> PipelineConfig {
    PipelineConfig {
        grid,
        encoder: EncoderConfig {
            patch_size: 8,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
            view_side: grid.view_side,
            channels: 1,
        },
        decoder: DecoderConfig {
            vocab_size: 256,
            d_lm: 64,
            depth: 2,
            heads: 4,
            max_seq: 1024,
        },
        lora: Some(Default::default()),
        norm: PixelNorm::default(),
    }
}

fn image(side: usize) -> RasterImage {
    let data = (0..side * side).map(|i| ((i * 7919) % 256) as f32 / 255.0).collect();
    RasterImage::new(side, side, 1, data).unwrap()
}

fn view_encoding(c: &mut Criterion) {
    let mut group = c.benchmark_group("encode_views");
    for label in ["2x2+g", "3x3+g"] {
        let shape: tilevlm::grid::GridShape = label.parse().unwrap();
        let model = Pipeline::<f32>::new(config(shape.with_side(32).unwrap()), 0).unwrap();
        let patches = model.view_patches(&model.split(&image(96)).unwrap()).unwrap();
        let cfg = &model.config.encoder;
        group.bench_with_input(BenchmarkId::new("parallel", label), &patches, |b, p| {
            b.iter(|| par::map_slice(p, |v| encode_view_patches(v, cfg, &model.params).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("sequential", label), &patches, |b, p| {
            b.iter(|| par::map_slice_seq(p, |v| encode_view_patches(v, cfg, &model.params).unwrap()))
        });
    }
    group.finish();
}

fn batch_gradients(c: &mut Criterion) {
    let model = Pipeline::<f32>::new(config(GridSpec::new(2, 2, true, 32).unwrap()), 0).unwrap();
    let images: Vec<RasterImage> = (0..4).map(|k| image(64 + k)).collect();
    let step = |img: &RasterImage| {
        model
            .loss_and_grads(&Example {
                image: img,
                prompt: b"which glyph?",
                answer: b"3",
            })
            .unwrap()
    };
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    group.bench_function("parallel", |b| b.iter(|| par::map_slice(&images, step)));
    group.bench_function("sequential", |b| b.iter(|| par::map_slice_seq(&images, step)));
    group.finish();
}

criterion_group!(benches, view_encoding, batch_gradients);
criterion_main!(benches);
