//! monoq: a single-quantizer neural audio codec.
//!
//! 24 kHz audio is downsampled by a convolutional encoder into latent
//! frames, discretized by one large-codebook vector quantizer (k-means
//! initialized, EMA updated, with forced awakening of dead codes), and
//! reconstructed by an attention + ConvNeXt decoder that upsamples through
//! an inverse STFT head. Training is adversarial against a multi-period /
//! multi-resolution / multi-scale-STFT critic ensemble. Tokens serialize to
//! a compact bitstream at 40-75 tokens per second.

pub mod analysis;
pub mod bitstream;
pub mod decoder;
pub mod discriminators;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod training;
pub mod vq;

pub use decoder::{Decoder, DecoderConfig, DecoderVariant};
pub use dsp::{AudioBuffer, ComplexSpectrogram, MelConfig, SpectralConfig};
pub use encoder::{Encoder, EncoderConfig, LatentSequence};
pub use error::{BitstreamError, Error, Result};
pub use losses::{LossReport, LossWeights};
pub use model::{Codec, CodecConfig};
pub use vq::{Codebook, QuantizationResult, VQConfig};
