//! Loss suite: discriminator hinge, quantizer, mel reconstruction,
//! generator adversarial, feature matching and the weighted total.
//!
//! Hinges are applied per element and averaged within each logit map, then
//! across the K sub-discriminators.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::discriminators::CriticScore;
use crate::dsp::{self, AudioBuffer, MelConfig, SpectralConfig};
use crate::error::{Error, Result};
use crate::nn::MelOps;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub lambda_q: f64,
    pub lambda_mel: f64,
    pub lambda_adv: f64,
    pub lambda_feat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_q: 1.0, lambda_mel: 45.0, lambda_adv: 1.0, lambda_feat: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_q", self.lambda_q),
            ("lambda_mel", self.lambda_mel),
            ("lambda_adv", self.lambda_adv),
            ("lambda_feat", self.lambda_feat),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Reduction of the quantizer loss over frames; the sum form is normative,
/// the mean is exposed for batch-size invariance. Either way the batch axis
/// is mean-reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerReduction {
    #[default]
    FrameSum,
    FrameMean,
}

/// Per-term values plus the weighted total for one optimizer side.
#[derive(Debug, Clone, PartialEq)]
pub enum LossReport {
    Generator {
        quantizer: f64,
        mel: f64,
        adversarial: f64,
        feature_matching: f64,
        total: f64,
    },
    Discriminator {
        hinge: f64,
    },
}

impl LossReport {
    pub fn total(&self) -> f64 {
        match self {
            LossReport::Generator { total, .. } => *total,
            LossReport::Discriminator { hinge } => *hinge,
        }
    }
}

fn mean_scalar(t: &Tensor) -> Result<Tensor> {
    Ok(t.mean_all()?)
}

/// Discriminator hinge loss:
/// (1/K) sum_k [ E max(0, 1 - D_k(x)) + E max(0, 1 + D_k(x~)) ].
pub fn disc_loss(real: &[CriticScore], fake: &[CriticScore]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Shape(format!(
            "disc_loss arity mismatch: {} real vs {} fake",
            real.len(),
            fake.len()
        )));
    }
    let k = real.len() as f64;
    let mut acc: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        let real_term = mean_scalar(&r.logits.affine(-1.0, 1.0)?.relu()?)?;
        let fake_term = mean_scalar(&f.logits.affine(1.0, 1.0)?.relu()?)?;
        let term = (real_term + fake_term)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    Ok((acc.unwrap() / k)?)
}

/// Generator adversarial hinge: (1/K) sum_k E max(0, 1 - D_k(x~)).
pub fn adv_loss(fake: &[CriticScore]) -> Result<Tensor> {
    if fake.is_empty() {
        return Err(Error::Shape("adv_loss over an empty ensemble".into()));
    }
    let k = fake.len() as f64;
    let mut acc: Option<Tensor> = None;
    for f in fake {
        let term = mean_scalar(&f.logits.affine(-1.0, 1.0)?.relu()?)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    Ok((acc.unwrap() / k)?)
}

/// Feature matching: (1/(K L)) sum_k sum_l E | D_k^l(x) - D_k^l(x~) |,
/// element-mean within each map. Real features are treated as constants.
pub fn feat_match_loss(real: &[CriticScore], fake: &[CriticScore]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Shape(format!(
            "feat_match arity mismatch: {} vs {}",
            real.len(),
            fake.len()
        )));
    }
    let k = real.len() as f64;
    let mut acc: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        if r.features.len() != f.features.len() || r.features.is_empty() {
            return Err(Error::Shape(format!(
                "feature list mismatch: {} vs {}",
                r.features.len(),
                f.features.len()
            )));
        }
        let l = r.features.len() as f64;
        let mut inner: Option<Tensor> = None;
        for (rf, ff) in r.features.iter().zip(&f.features) {
            let term = mean_scalar(&(rf.detach() - ff)?.abs()?)?;
            inner = Some(match inner {
                Some(a) => (a + term)?,
                None => term,
            });
        }
        let per_k = (inner.unwrap() / l)?;
        acc = Some(match acc {
            Some(a) => (a + per_k)?,
            None => per_k,
        });
    }
    Ok((acc.unwrap() / k)?)
}

/// Quantizer (commitment) loss, sum_i ||Z_i - Z^_i||^2, mean over the batch
/// axis. The codebook side carries no gradient; pass it detached.
pub fn quantizer_loss(z: &Tensor, z_hat: &Tensor, reduction: QuantizerReduction) -> Result<Tensor> {
    if z.dims() != z_hat.dims() {
        return Err(Error::Shape(format!(
            "quantizer_loss shapes {:?} vs {:?}",
            z.dims(),
            z_hat.dims()
        )));
    }
    let sq = (z - z_hat)?.sqr()?;
    match reduction {
        QuantizerReduction::FrameSum => {
            let b = sq.dims()[0] as f64;
            Ok((sq.sum_all()? / b)?)
        }
        QuantizerReduction::FrameMean => Ok(sq.mean_all()?),
    }
}

/// Mel reconstruction distance between two equal-length waveforms, computed
/// through the pure dsp route. Used for evaluation and reporting.
pub fn mel_loss(
    a: &AudioBuffer,
    b: &AudioBuffer,
    cfg: &SpectralConfig,
    mel: &MelConfig,
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "mel_loss lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.sample_rate != b.sample_rate {
        return Err(Error::Config("mel_loss sample rates differ".into()));
    }
    let ma = dsp::mel_spectrogram(a, cfg, mel)?;
    let mb = dsp::mel_spectrogram(b, cfg, mel)?;
    let n = ma.len() as f64;
    let mut acc = 0.0f64;
    for (x, y) in ma.iter().zip(mb.iter()) {
        acc += (x - y).abs() as f64;
    }
    Ok(acc / n)
}

/// Differentiable mel reconstruction loss over (B, T) tensors.
pub fn mel_loss_t(mel_ops: &MelOps, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    if x.dims() != x_hat.dims() {
        return Err(Error::Shape(format!(
            "mel_loss_t shapes {:?} vs {:?}",
            x.dims(),
            x_hat.dims()
        )));
    }
    let ma = mel_ops.log_mel(x)?;
    let mb = mel_ops.log_mel(x_hat)?;
    Ok((ma - mb)?.abs()?.mean_all()?)
}

/// Weighted generator total; errors on non-finite terms so training aborts
/// with a diagnostic instead of poisoning the optimizer state.
pub fn generator_total(
    quantizer: f64,
    mel: f64,
    adversarial: f64,
    feature_matching: f64,
    w: &LossWeights,
) -> Result<LossReport> {
    for (name, v) in [
        ("quantizer", quantizer),
        ("mel", mel),
        ("adversarial", adversarial),
        ("feature_matching", feature_matching),
    ] {
        if !v.is_finite() {
            return Err(Error::TrainingFault(format!(
                "{name} loss is not finite: {v}"
            )));
        }
    }
    let total = w.lambda_q * quantizer
        + w.lambda_mel * mel
        + w.lambda_adv * adversarial
        + w.lambda_feat * feature_matching;
    Ok(LossReport::Generator { quantizer, mel, adversarial, feature_matching, total })
}

/// Tensor-side weighted total for the backward pass.
pub fn generator_total_t(
    quantizer: &Tensor,
    mel: &Tensor,
    adversarial: Option<&Tensor>,
    feature_matching: Option<&Tensor>,
    w: &LossWeights,
) -> Result<Tensor> {
    let mut total = ((quantizer * w.lambda_q)? + (mel * w.lambda_mel)?)?;
    if let Some(adv) = adversarial {
        total = (total + (adv * w.lambda_adv)?)?;
    }
    if let Some(feat) = feature_matching {
        total = (total + (feat * w.lambda_feat)?)?;
    }
    Ok(total)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn const_score(value: f64, shape: (usize, usize), feats: Vec<Tensor>) -> CriticScore {
        let logits = (Tensor::ones(shape, DType::F32, &Device::Cpu).unwrap() * value).unwrap();
        CriticScore { logits, features: feats }
    }

    fn feat(value: f64, n: usize) -> Tensor {
        (Tensor::ones((1, n), DType::F32, &Device::Cpu).unwrap() * value).unwrap()
    }

    #[test]
    fn disc_loss_hand_cases() -> Result<()> {
        // D(x) = 1, D(x~) = -1 for all k: both hinges vanish
        let real: Vec<_> = (0..3).map(|_| const_score(1.0, (2, 4), vec![])).collect();
        let fake: Vec<_> = (0..3).map(|_| const_score(-1.0, (2, 4), vec![])).collect();
        assert!((scalar_f64(&disc_loss(&real, &fake)?)?).abs() < 1e-7);

        // D(x) = 0, D(x~) = 0: 1 + 1 = 2
        let real: Vec<_> = (0..2).map(|_| const_score(0.0, (1, 3), vec![])).collect();
        let fake: Vec<_> = (0..2).map(|_| const_score(0.0, (1, 3), vec![])).collect();
        assert!((scalar_f64(&disc_loss(&real, &fake)?)? - 2.0).abs() < 1e-7);

        // saturated hinges: D(x) = 2, D(x~) = -3 -> 0
        let real = vec![const_score(2.0, (1, 1), vec![])];
        let fake = vec![const_score(-3.0, (1, 1), vec![])];
        assert!((scalar_f64(&disc_loss(&real, &fake)?)?).abs() < 1e-7);
        Ok(())
    }

    #[test]
    fn disc_loss_arity_mismatch() {
        let real = vec![const_score(1.0, (1, 1), vec![])];
        let fake = vec![];
        assert!(disc_loss(&real, &fake).is_err());
    }

    #[test]
    fn adv_loss_hand_cases() -> Result<()> {
        let mk = |v: f64| vec![const_score(v, (2, 2), vec![]); 4];
        assert!((scalar_f64(&adv_loss(&mk(1.0))?)?).abs() < 1e-7);
        assert!((scalar_f64(&adv_loss(&mk(0.0))?)? - 1.0).abs() < 1e-7);
        assert!((scalar_f64(&adv_loss(&mk(5.0))?)?).abs() < 1e-7);
        Ok(())
    }

    #[test]
    fn feat_match_hand_cases() -> Result<()> {
        // identical features -> 0
        let real = vec![const_score(0.0, (1, 1), vec![feat(0.5, 6), feat(-1.0, 3)])];
        let fake = vec![const_score(0.0, (1, 1), vec![feat(0.5, 6), feat(-1.0, 3)])];
        assert!((scalar_f64(&feat_match_loss(&real, &fake)?)?).abs() < 1e-7);

        // one map differing by a constant 1, K = L = 1 -> 1
        let real = vec![const_score(0.0, (1, 1), vec![feat(2.0, 5)])];
        let fake = vec![const_score(0.0, (1, 1), vec![feat(1.0, 5)])];
        assert!((scalar_f64(&feat_match_loss(&real, &fake)?)? - 1.0).abs() < 1e-7);

        // nonnegative on random features
        let real = vec![const_score(0.0, (1, 1), vec![feat(0.3, 4), feat(0.9, 4)])];
        let fake = vec![const_score(0.0, (1, 1), vec![feat(-0.2, 4), feat(1.4, 4)])];
        assert!(scalar_f64(&feat_match_loss(&real, &fake)?)? >= 0.0);
        Ok(())
    }

    #[test]
    fn quantizer_loss_hand_cases() -> Result<()> {
        let dev = Device::Cpu;
        let z = Tensor::from_vec(vec![1f32, 0.0], (1, 1, 2), &dev)?;
        let zh = Tensor::zeros((1, 1, 2), DType::F32, &dev)?;
        let l = quantizer_loss(&z, &zh, QuantizerReduction::FrameSum)?;
        assert!((scalar_f64(&l)? - 1.0).abs() < 1e-7);

        // zero when equal
        let l0 = quantizer_loss(&z, &z, QuantizerReduction::FrameSum)?;
        assert!(scalar_f64(&l0)?.abs() < 1e-9);

        // homogeneity: scaling both by c scales the loss by c^2
        let c = 3.0f64;
        let lc = quantizer_loss(&(&z * c)?, &(&zh * c)?, QuantizerReduction::FrameSum)?;
        assert!((scalar_f64(&lc)? - c * c * 1.0).abs() < 1e-5);

        // frame-mean divides by T * D
        let lm = quantizer_loss(&z, &zh, QuantizerReduction::FrameMean)?;
        assert!((scalar_f64(&lm)? - 0.5).abs() < 1e-7);
        Ok(())
    }

    #[test]
    fn quantizer_loss_shape_mismatch() {
        let dev = Device::Cpu;
        let z = Tensor::zeros((1, 2, 2), DType::F32, &dev).unwrap();
        let zh = Tensor::zeros((1, 3, 2), DType::F32, &dev).unwrap();
        assert!(quantizer_loss(&z, &zh, QuantizerReduction::FrameSum).is_err());
    }

    #[test]
    fn mel_loss_properties() -> Result<()> {
        let sr = 24000;
        let cfg = SpectralConfig::hann(1024, 256);
        let mel = MelConfig::for_loss(sr);
        let mut state = 7u64;
        let noise: Vec<f32> = (0..8192)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                (((state >> 33) as f32 / (1u64 << 31) as f32) - 0.5) * 0.6
            })
            .collect();
        let a = AudioBuffer::new(noise, sr)?;
        let silence = AudioBuffer::new(vec![0.0; 8192], sr)?;

        assert!(mel_loss(&a, &a, &cfg, &mel)?.abs() < 1e-12);
        let ab = mel_loss(&a, &silence, &cfg, &mel)?;
        let ba = mel_loss(&silence, &a, &cfg, &mel)?;
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-12);

        // two-call oracle: mel each side, then L1 by hand
        let ma = dsp::mel_spectrogram(&a, &cfg, &mel)?;
        let mb = dsp::mel_spectrogram(&silence, &cfg, &mel)?;
        let want: f64 = ma
            .iter()
            .zip(mb.iter())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum::<f64>()
            / ma.len() as f64;
        assert!((ab - want).abs() < 1e-12);

        // length mismatch is an error
        let short = AudioBuffer::new(vec![0.0; 100], sr)?;
        assert!(mel_loss(&a, &short, &cfg, &mel).is_err());
        Ok(())
    }

    #[test]
    fn generator_total_arithmetic() -> Result<()> {
        let unit = LossWeights { lambda_q: 1.0, lambda_mel: 1.0, lambda_adv: 1.0, lambda_feat: 1.0 };
        let r = generator_total(1.0, 2.0, 3.0, 4.0, &unit)?;
        assert!((r.total() - 10.0).abs() < 1e-7);

        let zero = LossWeights { lambda_q: 0.0, lambda_mel: 0.0, lambda_adv: 0.0, lambda_feat: 0.0 };
        assert!((generator_total(1.0, 2.0, 3.0, 4.0, &zero)?.total()).abs() < 1e-7);

        let defaults = LossWeights::default();
        let r = generator_total(0.5, 0.1, 1.0, 2.0, &defaults)?;
        assert!((r.total() - 8.0).abs() < 1e-7);
        Ok(())
    }

    #[test]
    fn generator_total_linearity_per_term() -> Result<()> {
        let w = LossWeights { lambda_q: 2.0, lambda_mel: 3.0, lambda_adv: 5.0, lambda_feat: 7.0 };
        let base = generator_total(1.0, 1.0, 1.0, 1.0, &w)?.total();
        let bump_q = generator_total(2.0, 1.0, 1.0, 1.0, &w)?.total();
        assert!((bump_q - base - w.lambda_q).abs() < 1e-9);
        let bump_f = generator_total(1.0, 1.0, 1.0, 3.5, &w)?.total();
        assert!((bump_f - base - 2.5 * w.lambda_feat).abs() < 1e-9);
        Ok(())
    }

    #[test]
    fn generator_total_rejects_nan() {
        let w = LossWeights::default();
        assert!(matches!(
            generator_total(f64::NAN, 0.0, 0.0, 0.0, &w),
            Err(Error::TrainingFault(_))
        ));
    }

    #[test]
    fn hinge_losses_are_bounded_below() -> Result<()> {
        // both Eq.2 and Eq.5 are nonnegative for any logits
        for v in [-7.5, -1.0, 0.0, 0.3, 1.0, 42.0] {
            let real = vec![const_score(v, (2, 3), vec![])];
            let fake = vec![const_score(-v, (2, 3), vec![])];
            assert!(scalar_f64(&disc_loss(&real, &fake)?)? >= 0.0);
            assert!(scalar_f64(&adv_loss(&fake)?)? >= 0.0);
        }
        Ok(())
    }
}
