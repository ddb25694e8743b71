//! Decoder: conv input layer -> attention block -> ConvNeXt stack -> iSTFT
//! head. Feature resolution stays constant at all depths; waveform
//! upsampling happens through the inverse Fourier transform rather than
//! transposed convolutions. A mirrored transposed-conv decoder exists only
//! as an ablation variant behind the config.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{AudioBuffer, SpectralConfig};
use crate::error::{Error, Result};
use crate::nn::{
    softmax, Activation, Conv1d, DepthwiseConv1d, LayerNorm, Linear, ParamStore, SpectralOps,
    UpsampleConv1d,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    /// The default iSTFT-head decoder.
    Istft,
    /// Ablation only: transposed-conv upsampler mirroring the encoder.
    Mirror { channels: usize, strides: Vec<usize> },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecoderConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub attn_heads: usize,
    /// Ablation switch; `false` replaces attention with an identity.
    pub use_attention: bool,
    pub convnext_depth: usize,
    pub convnext_kernel: usize,
    pub convnext_expansion: usize,
    /// Head DFT size; the head emits n_fft + 2 channels.
    pub n_fft: usize,
    /// Head frame step; must equal the encoder's total stride.
    pub hop: usize,
    /// Ceiling applied to exp(log-magnitude) to guard early training.
    pub magnitude_ceiling: f64,
    pub variant: DecoderVariant,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 512,
            hidden_dim: 512,
            attn_heads: 8,
            use_attention: true,
            convnext_depth: 8,
            convnext_kernel: 7,
            convnext_expansion: 3,
            n_fft: 1280, // 4x the 320 hop
            hop: 320,
            magnitude_ceiling: 1e2,
            variant: DecoderVariant::Istft,
        }
    }
}

impl DecoderConfig {
    pub fn for_hop(hop: usize) -> Self {
        Self { hop, n_fft: 4 * hop, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config("decoder dims must be positive".into()));
        }
        if self.use_attention && self.hidden_dim % self.attn_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must divide evenly across {} heads",
                self.hidden_dim, self.attn_heads
            )));
        }
        if self.n_fft % 2 != 0 || self.n_fft < 2 {
            return Err(Error::Config("head n_fft must be even and >= 2".into()));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::Config("head hop must satisfy 0 < hop <= n_fft".into()));
        }
        if let DecoderVariant::Mirror { strides, .. } = &self.variant {
            let product: usize = strides.iter().product();
            if product != self.hop {
                return Err(Error::Config(format!(
                    "mirror strides product {product} must equal hop {}",
                    self.hop
                )));
            }
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Channel count emitted by the head projection.
    pub fn head_channels(&self) -> usize {
        self.n_fft + 2
    }
}

/// Per-frame magnitude and phase predicted by the head.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub magnitude: Tensor,
    pub phase: Tensor,
}

/// Pre-normalized multi-head self-attention with a residual connection;
/// full attention over all frames, no causal mask.
pub struct AttentionBlock {
    norm: LayerNorm,
    qkv: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

impl AttentionBlock {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        ps.push_scope(name);
        let norm = LayerNorm::new(ps, "norm", dim)?;
        let qkv = Linear::new(ps, rng, "qkv", dim, 3 * dim)?;
        let out = Linear::new(ps, rng, "out", dim, dim)?;
        ps.pop_scope();
        Ok(Self { norm, qkv, out, heads, head_dim: dim / heads })
    }

    fn project(&self, h: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (b, t, c) = h.dims3()?;
        let qkv = self.qkv.forward(&self.norm.forward(h)?)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(2, i * c, c)?
                .reshape((b, t, self.heads, self.head_dim))?
                .permute((0, 2, 1, 3))?
                .contiguous()?)
        };
        Ok((split(0)?, split(1)?, split(2)?))
    }

    /// (B, H, T, T) attention distribution, each row summing to one.
    pub fn attention_weights(&self, h: &Tensor) -> Result<Tensor> {
        let (q, k, _) = self.project(h)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        softmax(&scores, 3)
    }

    /// h + W_o(MHSA(LN(h)))
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let (b, t, c) = h.dims3()?;
        let (q, k, v) = self.project(h)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        let weights = softmax(&scores, 3)?;
        let ctx = weights
            .matmul(&v)?
            .permute((0, 2, 1, 3))?
            .contiguous()?
            .reshape((b, t, c))?;
        Ok((h + self.out.forward(&ctx)?)?)
    }
}

/// Large-kernel depthwise conv, inverted bottleneck with GELU, residual add;
/// layer normalization sits at the block boundary.
pub struct ConvNextBlock {
    norm: LayerNorm,
    depthwise: DepthwiseConv1d,
    expand: Linear,
    project: Linear,
}

impl ConvNextBlock {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        kernel: usize,
        expansion: usize,
    ) -> Result<Self> {
        ps.push_scope(name);
        let norm = LayerNorm::new(ps, "norm", dim)?;
        let depthwise = DepthwiseConv1d::new(ps, rng, "dw", dim, kernel)?;
        let expand = Linear::new(ps, rng, "pw1", dim, dim * expansion)?;
        let project = Linear::new(ps, rng, "pw2", dim * expansion, dim)?;
        ps.pop_scope();
        Ok(Self { norm, depthwise, expand, project })
    }

    /// (B, T, C) -> (B, T, C)
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let x = self.norm.forward(h)?;
        let x = x.transpose(1, 2)?.contiguous()?;
        let x = self.depthwise.forward(&x)?;
        let x = x.transpose(1, 2)?.contiguous()?;
        let x = self.expand.forward(&x)?.gelu_erf()?;
        let x = self.project.forward(&x)?;
        Ok((h + x)?)
    }
}

enum Backbone {
    Istft {
        in_conv: Conv1d,
        attention: Option<AttentionBlock>,
        blocks: Vec<ConvNextBlock>,
        final_norm: LayerNorm,
        head: Linear,
        synth: SpectralOps,
    },
    Mirror {
        in_conv: Conv1d,
        stages: Vec<(UpsampleConv1d, MirrorResidual)>,
        out_conv: Conv1d,
        act: Activation,
    },
}

struct MirrorResidual {
    conv1: Conv1d,
    conv2: Conv1d,
}

impl MirrorResidual {
    fn forward(&self, x: &Tensor, act: Activation) -> Result<Tensor> {
        let h = self.conv1.forward(&act.apply(x)?)?;
        let h = self.conv2.forward(&act.apply(&h)?)?;
        Ok((x + h)?)
    }
}

pub struct Decoder {
    config: DecoderConfig,
    backbone: Backbone,
}

impl Decoder {
    pub fn new(cfg: &DecoderConfig, ps: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        ps.push_scope("decoder");
        let backbone = match &cfg.variant {
            DecoderVariant::Istft => {
                let in_conv = Conv1d::same(ps, rng, "in_conv", cfg.latent_dim, cfg.hidden_dim, 7, false)?;
                let attention = if cfg.use_attention {
                    Some(AttentionBlock::new(ps, rng, "attn", cfg.hidden_dim, cfg.attn_heads)?)
                } else {
                    None
                };
                let mut blocks = Vec::new();
                for i in 0..cfg.convnext_depth {
                    blocks.push(ConvNextBlock::new(
                        ps,
                        rng,
                        &format!("convnext{i}"),
                        cfg.hidden_dim,
                        cfg.convnext_kernel,
                        cfg.convnext_expansion,
                    )?);
                }
                let final_norm = LayerNorm::new(ps, "final_norm", cfg.hidden_dim)?;
                let head = Linear::new(ps, rng, "head", cfg.hidden_dim, cfg.head_channels())?;
                let spectral = SpectralConfig::hann(cfg.n_fft, cfg.hop);
                let synth = SpectralOps::new(&spectral, ps.dtype(), ps.device())?;
                Backbone::Istft { in_conv, attention, blocks, final_norm, head, synth }
            }
            DecoderVariant::Mirror { channels, strides } => {
                let top_width = channels * (1 << strides.len());
                let in_conv = Conv1d::same(ps, rng, "in_conv", cfg.latent_dim, top_width, 7, false)?;
                let mut stages = Vec::new();
                let mut width = top_width;
                for (i, &s) in strides.iter().enumerate() {
                    ps.push_scope(&format!("up{i}"));
                    let up = UpsampleConv1d::new(ps, rng, "up", width, width / 2, s, false)?;
                    let res = MirrorResidual {
                        conv1: Conv1d::same(ps, rng, "conv1", width / 2, width / 2, 3, false)?,
                        conv2: Conv1d::same(ps, rng, "conv2", width / 2, width / 2, 3, false)?,
                    };
                    ps.pop_scope();
                    stages.push((up, res));
                    width /= 2;
                }
                let out_conv = Conv1d::same(ps, rng, "out_conv", width, 1, 7, false)?;
                Backbone::Mirror { in_conv, stages, out_conv, act: Activation::Elu }
            }
        };
        ps.pop_scope();
        Ok(Self { config: cfg.clone(), backbone })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn is_mirror(&self) -> bool {
        matches!(self.backbone, Backbone::Mirror { .. })
    }

    /// (B, T, D) quantized latents -> (B, T * hop) waveform.
    pub fn forward(&self, zq: &Tensor) -> Result<Tensor> {
        let (_, t, d) = zq.dims3()?;
        if t == 0 {
            return Err(Error::EmptyInput("decode"));
        }
        if d != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent dim {d} does not match decoder input {}",
                self.config.latent_dim
            )));
        }
        match &self.backbone {
            Backbone::Istft { in_conv, attention, blocks, final_norm, head, synth } => {
                let mut h = in_conv
                    .forward(&zq.transpose(1, 2)?.contiguous()?)?
                    .transpose(1, 2)?
                    .contiguous()?;
                if let Some(attn) = attention {
                    h = attn.forward(&h)?;
                }
                for block in blocks {
                    h = block.forward(&h)?;
                }
                let h = final_norm.forward(&h)?;
                let out = head.forward(&h)?;
                let HeadOutput { magnitude, phase } = self.split_head(&out)?;
                synth.synthesize_polar(&magnitude, &phase)
            }
            Backbone::Mirror { in_conv, stages, out_conv, act } => {
                let mut h = in_conv.forward(&zq.transpose(1, 2)?.contiguous()?)?;
                for (up, res) in stages {
                    h = up.forward(&act.apply(&h)?)?;
                    h = res.forward(&h, *act)?;
                }
                let h = out_conv.forward(&act.apply(&h)?)?;
                Ok(h.squeeze(1)?)
            }
        }
    }

    /// Splits head activations (B, T, n_fft + 2) into clipped magnitude and
    /// phase halves of n_fft/2 + 1 channels each.
    pub fn split_head(&self, h: &Tensor) -> Result<HeadOutput> {
        let (_, _, ch) = h.dims3()?;
        if ch != self.config.head_channels() {
            return Err(Error::Shape(format!(
                "head expects {} channels, got {ch}",
                self.config.head_channels()
            )));
        }
        let bins = self.config.bins();
        let log_mag = h.narrow(2, 0, bins)?;
        let phase = h.narrow(2, bins, bins)?;
        let magnitude = log_mag.exp()?.clamp(0.0, self.config.magnitude_ceiling)?;
        Ok(HeadOutput { magnitude, phase })
    }

    /// Runs the iSTFT head directly on pre-activations, for the head's own
    /// contract: F frames in, F * hop samples out.
    pub fn istft_head(&self, h: &Tensor) -> Result<Tensor> {
        let Backbone::Istft { synth, .. } = &self.backbone else {
            return Err(Error::Config("istft_head is not part of the mirror variant".into()));
        };
        let HeadOutput { magnitude, phase } = self.split_head(h)?;
        synth.synthesize_polar(&magnitude, &phase)
    }
}

/// Decodes a quantized latent sequence to audio; output length is exactly
/// `frames * hop` samples.
pub fn decode(
    quantized: &ndarray::Array2<f64>,
    decoder: &Decoder,
    sample_rate: u32,
) -> Result<AudioBuffer> {
    if quantized.nrows() == 0 {
        return Err(Error::EmptyInput("decode"));
    }
    let (t, d) = quantized.dim();
    let data: Vec<f32> = quantized.iter().map(|&v| v as f32).collect();
    let zq = Tensor::from_vec(data, (1, t, d), &candle_core::Device::Cpu)?;
    let audio = decoder.forward(&zq)?;
    let samples = audio.flatten_all()?.to_vec1::<f32>()?;
    AudioBuffer::new(samples, sample_rate)
}
