use monoq::discriminators::DiscriminatorConfig;
use monoq::dsp::AudioBuffer;
use monoq::losses::LossReport;
use monoq::model::CodecConfig;
use monoq::training::{DataSource, TrainConfig, TrainSetup, Trainer};
use monoq::{DecoderConfig, EncoderConfig, LossWeights, VQConfig};
use std::time::Instant;

fn overfit_clips() -> Vec<AudioBuffer> {
    let harmonics: [usize; 10] = [2, 3, 4, 5, 6, 8, 10, 12, 16, 20];
    harmonics
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let f0 = 75.0 * k as f64;
            let am_rate = 75.0 / [8.0, 16.0, 4.0, 8.0, 16.0, 8.0, 4.0, 16.0, 8.0, 4.0][i];
            let samples: Vec<f32> = (0..24000usize)
                .map(|t| {
                    let tt = t as f64 / 24000.0;
                    let ph = 2.0 * std::f64::consts::PI * f0 * tt;
                    let env = 0.75 + 0.25 * (2.0 * std::f64::consts::PI * am_rate * tt).sin();
                    let tone = 0.5 * ph.sin()
                        + 0.25 * (2.0 * ph + 0.7).sin()
                        + 0.12 * (3.0 * ph + 1.9).sin();
                    (0.5 * env * tone) as f32
                })
                .collect();
            AudioBuffer::new(samples, 24000).unwrap()
        })
        .collect()
}

fn main() {
    let latent = 128usize;
    let model = CodecConfig {
        sample_rate: 24000,
        encoder: EncoderConfig {
            channels: 12, blocks: 4, latent_dim: latent, strides: vec![2, 4, 5, 8],
            lstm_layers: 2, lstm_hidden: None, activation: Default::default(),
        },
        vq: VQConfig { codebook_size: 128, dim: latent, init_buffer_frames: 512, kmeans_iters: 4, ..VQConfig::default() },
        decoder: DecoderConfig {
            latent_dim: latent, hidden_dim: 256, attn_heads: 4, convnext_depth: 3,
            ..DecoderConfig::for_hop(320)
        },
    };
    let setup = TrainSetup {
        model,
        discriminators: DiscriminatorConfig {
            periods: vec![2, 3], mpd_channels: vec![8, 32, 64],
            mrd_resolutions: vec![], mrd_channels: 8, mrd_band_splits: vec![0.5],
            stft_scales: vec![512, 256], stftd_channels: 24, leaky_slope: 0.1,
        },
        weights: LossWeights::default(),
        train: TrainConfig {
            crop_seconds: 1.0, batch_size: 4, lr: 2e-4, total_steps: 2000, seed: 17,
            weight_decay: 0.0, ..TrainConfig::default()
        },
        ..TrainSetup::default()
    };

    let source = DataSource::from_clips(overfit_clips()).unwrap();
    let mut trainer = Trainer::new(setup).unwrap();
    let t0 = Instant::now();
    trainer.ensure_codebook_init(&source).unwrap();
    println!("init: {:?}", t0.elapsed());

    let t = Instant::now();
    let mut mel10 = None;
    let mut last_mel = 0.0;
    let mut reports = Vec::new();
    for i in 0..2000u64 {
        reports.extend(trainer.train_steps(1, &source).unwrap());
        if i % 200 == 199 {
            let rss = std::fs::read_to_string("/proc/self/statm").unwrap();
            let pages: u64 = rss.split_whitespace().nth(1).unwrap().parse().unwrap();
            let corr = trainer.eval_correlation(&source).unwrap();
            let mel_now = reports.iter().rev().find_map(|(_, r)| match r {
                LossReport::Generator { mel, .. } => Some(*mel), _ => None }).unwrap();
            println!("step {i}: rss {} MB corr {corr:.4} mel {mel_now:.3}", pages * 4096 / 1024 / 1024);
        }
    }
    for (step, r) in &reports {
        if let LossReport::Generator { mel, .. } = r {
            if mel10.is_none() && *step >= 9 {
                mel10 = Some(*mel);
            }
            last_mel = *mel;
        }
    }
    let dt = t.elapsed();
    println!("600 steps in {:?} ({:.2} s/pair)", dt, dt.as_secs_f64() / 300.0);
    println!("mel@10 {:?} mel@600 {last_mel}", mel10);
    println!("utilization {:.3}", trainer.utilization());
    let corr = trainer.eval_correlation(&source).unwrap();
    println!("corr {corr:.4}");
    println!("projected 2000 steps: {:.0} min", dt.as_secs_f64() / 2000.0 * 2000.0 / 60.0);
}
