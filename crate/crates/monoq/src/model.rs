//! The assembled codec: encoder -> single quantizer -> decoder, plus the
//! straight-through glue used during training.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode, Decoder, DecoderConfig};
use crate::dsp::AudioBuffer;
use crate::encoder::{encode, total_stride, Encoder, EncoderConfig, LatentSequence};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::vq::{quantize, Codebook, QuantizationResult, VQConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CodecConfig {
    pub sample_rate: u32,
    pub encoder: EncoderConfig,
    pub vq: VQConfig,
    pub decoder: DecoderConfig,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24000,
            encoder: EncoderConfig::default(),
            vq: VQConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.vq.validate()?;
        self.decoder.validate()?;
        if self.vq.dim != self.encoder.latent_dim {
            return Err(Error::Config(format!(
                "vq dim {} must match encoder latent_dim {}",
                self.vq.dim, self.encoder.latent_dim
            )));
        }
        if self.decoder.latent_dim != self.encoder.latent_dim {
            return Err(Error::Config(format!(
                "decoder latent_dim {} must match encoder latent_dim {}",
                self.decoder.latent_dim, self.encoder.latent_dim
            )));
        }
        let stride = total_stride(&self.encoder);
        if self.decoder.hop != stride {
            return Err(Error::Config(format!(
                "decoder hop {} must equal encoder total stride {stride}",
                self.decoder.hop
            )));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        total_stride(&self.encoder)
    }

    /// Desk-scale configuration used by tests and the ablation grid.
    pub fn toy(latent_dim: usize, codebook_size: usize) -> Self {
        let encoder = EncoderConfig {
            channels: 8,
            blocks: 4,
            latent_dim,
            strides: vec![2, 4, 5, 8],
            lstm_layers: 2,
            lstm_hidden: None,
            activation: Default::default(),
        };
        let decoder = DecoderConfig {
            latent_dim,
            hidden_dim: latent_dim,
            attn_heads: 4,
            convnext_depth: 2,
            ..DecoderConfig::for_hop(320)
        };
        let vq = VQConfig {
            codebook_size,
            dim: latent_dim,
            init_buffer_frames: 2 * codebook_size,
            kmeans_iters: 2,
            ..VQConfig::default()
        };
        Self { sample_rate: 24000, encoder, vq, decoder }
    }
}

/// Generator-side model: encoder and decoder parameters live in one store;
/// the codebook is plain data updated by EMA, not by gradients.
pub struct Codec {
    pub config: CodecConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub codebook: Codebook,
    pub params: ParamStore,
}

impl Codec {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(Device::Cpu, DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&config.encoder, &mut params, &mut rng)?;
        let decoder = Decoder::new(&config.decoder, &mut params, &mut rng)?;
        let codebook = Codebook::random(config.vq.codebook_size, config.vq.dim, &mut rng);
        Ok(Self { config, encoder, decoder, codebook, params })
    }

    pub fn frame_rate(&self) -> f64 {
        self.config.sample_rate as f64 / self.config.total_stride() as f64
    }

    /// Audio -> latents -> nearest codes.
    pub fn encode_audio(&self, audio: &AudioBuffer) -> Result<(LatentSequence, QuantizationResult)> {
        if audio.is_empty() {
            return Err(Error::EmptyInput("encode"));
        }
        let latents = encode(audio, &self.encoder)?;
        let q = quantize(&latents.to_f64(), &self.codebook)?;
        Ok((latents, q))
    }

    /// Token indices -> codebook rows -> waveform of len * hop samples.
    pub fn decode_indices(&self, indices: &[u32]) -> Result<AudioBuffer> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("decode"));
        }
        let zq = self.codebook.lookup(indices)?;
        decode(&zq, &self.decoder, self.config.sample_rate)
    }

    /// Full round trip used by evaluation paths.
    pub fn reconstruct(&self, audio: &AudioBuffer) -> Result<AudioBuffer> {
        let (_, q) = self.encode_audio(audio)?;
        self.decode_indices(&q.indices)
    }

    /// Training forward: encode a batch, quantize (f64, per flattened
    /// frames), and rebuild the straight-through latents so decoder
    /// gradients reach the encoder.
    pub fn forward_training(&self, batch: &Tensor) -> Result<TrainingForward> {
        let (b, _, t) = batch.dims3()?;
        let stride = self.config.total_stride();
        if t < stride {
            return Err(Error::TooShort { needed: stride, got: t });
        }
        let z = self.encoder.forward(batch)?; // (B, T', D)
        let (_, frames, dim) = z.dims3()?;
        let flat = z.flatten_all()?.to_vec1::<f32>()?;
        let latents = Array2::from_shape_vec(
            (b * frames, dim),
            flat.iter().map(|&v| v as f64).collect(),
        )
        .map_err(|e| Error::Shape(format!("latent reshape: {e}")))?;
        let q = quantize(&latents, &self.codebook)?;
        let zq_data: Vec<f32> = q.quantized.iter().map(|&v| v as f32).collect();
        let zq_const = Tensor::from_vec(zq_data, (b, frames, dim), batch.device())?;
        // straight-through: forward value is z_q, gradient bypasses the table
        let zq_ste = (&z + (&zq_const - &z)?.detach())?;
        let audio_hat = self.decoder.forward(&zq_ste)?;
        Ok(TrainingForward { z, zq_const, zq_ste, audio_hat, quantization: q, latents })
    }
}

/// Intermediate tensors of one training forward pass.
pub struct TrainingForward {
    /// Encoder output (B, T', D), gradient-carrying.
    pub z: Tensor,
    /// Quantized latents as constants (B, T', D).
    pub zq_const: Tensor,
    /// Straight-through latents fed to the decoder.
    pub zq_ste: Tensor,
    /// Reconstructed waveform (B, T' * hop).
    pub audio_hat: Tensor,
    /// Flattened (B*T', D) quantization outcome.
    pub quantization: QuantizationResult,
    /// Flattened (B*T', D) f64 latents for EMA updates.
    pub latents: Array2<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_codec() -> Codec {
        let mut cfg = CodecConfig::toy(16, 8);
        cfg.vq.kmeans_init = false;
        Codec::new(cfg, 99).unwrap()
    }

    #[test]
    fn config_validation_catches_mismatches() {
        let mut cfg = CodecConfig::toy(16, 8);
        cfg.decoder.hop = 300;
        assert!(cfg.validate().is_err());
        let mut cfg = CodecConfig::toy(16, 8);
        cfg.vq.dim = 17;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_decode_round_trip_lengths() {
        let codec = toy_codec();
        let audio = AudioBuffer::new(vec![0.1; 24000], 24000).unwrap();
        let (latents, q) = codec.encode_audio(&audio).unwrap();
        assert_eq!(latents.num_frames(), 75);
        assert_eq!(q.indices.len(), 75);
        let back = codec.decode_indices(&q.indices).unwrap();
        assert_eq!(back.len(), 75 * 320);
        assert_eq!(back.sample_rate, 24000);
    }

    #[test]
    fn quantized_rows_are_exact_lookups() {
        let codec = toy_codec();
        let audio = AudioBuffer::new((0..3200).map(|i| (i as f32 * 0.01).sin()).collect(), 24000).unwrap();
        let (_, q) = codec.encode_audio(&audio).unwrap();
        for (t, &i) in q.indices.iter().enumerate() {
            for d in 0..codec.codebook.dim() {
                assert_eq!(q.quantized[(t, d)], codec.codebook.vectors[(i as usize, d)]);
            }
        }
    }

    #[test]
    fn training_forward_shapes() {
        let codec = toy_codec();
        let batch = Tensor::randn(0f32, 0.1f32, (2, 1, 1600), &Device::Cpu).unwrap();
        let fwd = codec.forward_training(&batch).unwrap();
        assert_eq!(fwd.z.dims(), &[2, 5, 16]);
        assert_eq!(fwd.audio_hat.dims(), &[2, 1600]);
        assert_eq!(fwd.quantization.indices.len(), 10);
        // straight-through forward value equals the quantized constant
        let d = (&fwd.zq_ste - &fwd.zq_const)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d < 1e-6);
    }

    #[test]
    fn empty_inputs_error() {
        let codec = toy_codec();
        let audio = AudioBuffer::new(vec![], 24000).unwrap();
        assert!(matches!(codec.encode_audio(&audio), Err(Error::EmptyInput(_))));
        assert!(matches!(codec.decode_indices(&[]), Err(Error::EmptyInput(_))));
    }
}
