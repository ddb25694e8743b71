//! Windowed-sinc resampler for ingest-time rate conversion.

use std::f64::consts::PI;

use super::AudioBuffer;
use crate::error::Result;

/// Half-width of the sinc kernel in input samples.
const HALF_TAPS: i64 = 24;

/// Resamples to `target_rate` with a Hann-windowed sinc kernel. A no-op when
/// the rates already match. Downsampling lowpasses at the output Nyquist.
pub fn resample(audio: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if audio.sample_rate == target_rate || audio.is_empty() {
        return AudioBuffer::new(audio.samples.clone(), target_rate);
    }
    let ratio = target_rate as f64 / audio.sample_rate as f64;
    let cutoff = ratio.min(1.0) * 0.945;
    let out_len = (audio.len() as f64 * ratio).floor() as usize;
    let x = &audio.samples;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let t = n as f64 / ratio;
        let center = t.floor() as i64;
        let mut acc = 0.0f64;
        for j in (center - HALF_TAPS + 1)..=(center + HALF_TAPS) {
            let idx = j.clamp(0, x.len() as i64 - 1) as usize;
            let d = t - j as f64;
            let s = cutoff * sinc(cutoff * d);
            // Hann taper over the kernel span
            let w = 0.5 * (1.0 + (PI * d / HALF_TAPS as f64).cos());
            acc += x[idx] as f64 * s * w;
        }
        out.push(acc as f32);
    }
    AudioBuffer::new(out, target_rate)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, sr: u32, len: usize) -> AudioBuffer {
        let samples = (0..len)
            .map(|n| (2.0 * PI * freq * n as f64 / sr as f64).sin() as f32)
            .collect();
        AudioBuffer::new(samples, sr).unwrap()
    }

    #[test]
    fn identity_when_rates_match() {
        let a = sine(440.0, 24000, 1000);
        let b = resample(&a, 24000).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn halving_preserves_tone() {
        let a = sine(1000.0, 48000, 9600);
        let b = resample(&a, 24000).unwrap();
        assert_eq!(b.len(), 4800);
        // compare against an exact 1 kHz tone at 24 kHz away from the edges
        let mut max_err = 0.0f32;
        for n in 200..b.len() - 200 {
            let want = (2.0 * PI * 1000.0 * n as f64 / 24000.0).sin() as f32;
            max_err = max_err.max((b.samples[n] - want).abs());
        }
        assert!(max_err < 0.02, "max err {max_err}");
    }

    #[test]
    fn upsampling_preserves_tone() {
        let a = sine(500.0, 16000, 8000);
        let b = resample(&a, 24000).unwrap();
        assert_eq!(b.len(), 12000);
        let mut max_err = 0.0f32;
        for n in 300..b.len() - 300 {
            let want = (2.0 * PI * 500.0 * n as f64 / 24000.0).sin() as f32;
            max_err = max_err.max((b.samples[n] - want).abs());
        }
        assert!(max_err < 0.02, "max err {max_err}");
    }
}
