//! Criterion benchmarks for the codec's hot paths: spectral transforms,
//! nearest-neighbor quantization and the decode pipeline.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use monoq::dsp::{self, AudioBuffer, SpectralConfig};
use monoq::model::{Codec, CodecConfig};
use monoq::vq::{quantize, Codebook};

fn bench_stft(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<f32> = (0..24000).map(|_| rng.random::<f32>() - 0.5).collect();
    let audio = AudioBuffer::new(samples, 24000).unwrap();
    let cfg = SpectralConfig::hann(1024, 256);

    c.bench_function("stft_1s", |b| {
        b.iter(|| dsp::stft(&audio, &cfg).unwrap());
    });

    let spec = dsp::stft(&audio, &cfg).unwrap();
    c.bench_function("istft_1s", |b| {
        b.iter(|| dsp::istft(&spec).unwrap());
    });

    let mel = dsp::MelConfig::for_loss(24000);
    c.bench_function("mel_1s", |b| {
        b.iter(|| dsp::mel_spectrogram(&audio, &cfg, &mel).unwrap());
    });
}

fn bench_quantize(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let book = Codebook::random(4096, 512, &mut rng);
    let latents =
        ndarray::Array2::from_shape_fn((75, 512), |_| rng.random::<f64>() * 2.0 - 1.0);
    c.bench_function("quantize_75x4096x512", |b| {
        b.iter(|| quantize(&latents, &book).unwrap());
    });
}

fn bench_codec(c: &mut Criterion) {
    let mut cfg = CodecConfig::toy(64, 64);
    cfg.vq.kmeans_init = false;
    let codec = Codec::new(cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<f32> = (0..24000).map(|_| (rng.random::<f32>() - 0.5) * 0.5).collect();
    let audio = AudioBuffer::new(samples, 24000).unwrap();

    c.bench_function("encode_1s_toy", |b| {
        b.iter(|| codec.encode_audio(&audio).unwrap());
    });

    let (_, q) = codec.encode_audio(&audio).unwrap();
    c.bench_function("decode_1s_toy", |b| {
        b.iter_batched(
            || q.indices.clone(),
            |ix| codec.decode_indices(&ix).unwrap(),
            BatchSize::SmallInput,
        );
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_stft, bench_quantize, bench_codec
}
criterion_main!(benches);
