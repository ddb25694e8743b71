//! Spectral primitives: STFT, inverse STFT and mel spectrograms.
//!
//! Shared by the decoder head, the mel reconstruction loss and the
//! spectrogram discriminators. Everything here is a pure function of its
//! inputs; transforms run in f64 internally and only the stored waveform
//! is f32.

mod resample;
mod wav;

pub use resample::resample;
pub use wav::{read_wav, write_wav};

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Mono waveform plus its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("audio contains non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Analysis/synthesis parameters for the short-time Fourier transform.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralConfig {
    /// DFT size, even and >= 2.
    pub n_fft: usize,
    /// Samples between consecutive frames.
    pub hop: usize,
    /// Real taper of length `n_fft`.
    pub window: Vec<f64>,
    /// Reflect-pad by `n_fft / 2` on both sides before framing.
    pub centered: bool,
}

impl SpectralConfig {
    /// Periodic Hann window; satisfies the squared-window overlap-add
    /// condition for hops that divide `n_fft / 4`.
    pub fn hann(n_fft: usize, hop: usize) -> Self {
        Self {
            n_fft,
            hop,
            window: hann_window(n_fft),
            centered: true,
        }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 || self.n_fft % 2 != 0 {
            return Err(Error::Config(format!("n_fft must be even and >= 2, got {}", self.n_fft)));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::Config(format!(
                "hop must satisfy 0 < hop <= n_fft, got hop {} for n_fft {}",
                self.hop, self.n_fft
            )));
        }
        if self.window.len() != self.n_fft {
            return Err(Error::Config(format!(
                "window length {} does not match n_fft {}",
                self.window.len(),
                self.n_fft
            )));
        }
        if !window_is_cola(&self.window, self.hop, 1e-8) {
            return Err(Error::Config(format!(
                "window does not satisfy the constant-overlap-add condition for hop {}",
                self.hop
            )));
        }
        Ok(())
    }

    /// Number of frames produced for an input of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if self.centered {
            len / self.hop + 1
        } else if len >= self.n_fft {
            (len - self.n_fft) / self.hop + 1
        } else {
            0
        }
    }
}

/// Single-sided complex spectrogram: F x (n_fft/2 + 1).
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub frames: Array2<Complex64>,
    pub config: SpectralConfig,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }
}

/// Mel filterbank parameters for the log-mel transform.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Clamp applied to mel energies before the logarithm.
    pub log_floor: f64,
}

impl MelConfig {
    /// Settings used by the mel reconstruction loss: 100 bands over the
    /// full band up to Nyquist.
    pub fn for_loss(sample_rate: u32) -> Self {
        Self {
            n_mels: 100,
            fmin: 0.0,
            fmax: sample_rate as f64 / 2.0,
            log_floor: 1e-5,
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if self.fmin < 0.0 || self.fmin >= self.fmax {
            return Err(Error::Config(format!(
                "mel band edges must satisfy 0 <= fmin < fmax, got [{}, {}]",
                self.fmin, self.fmax
            )));
        }
        if self.fmax > nyquist {
            return Err(Error::Config(format!(
                "fmax {} exceeds Nyquist {}",
                self.fmax, nyquist
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be positive".into()));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Periodic Hann taper, w[n] = 0.5 (1 - cos(2 pi n / N)).
pub fn hann_window(n_fft: usize) -> Vec<f64> {
    (0..n_fft)
        .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / n_fft as f64).cos()))
        .collect()
}

/// Checks the squared-window constant-overlap-add condition: the sum of
/// hop-shifted squared windows must be constant over one period.
pub fn window_is_cola(window: &[f64], hop: usize, rel_tol: f64) -> bool {
    let n = window.len();
    if hop == 0 || hop > n || n % hop != 0 {
        return false;
    }
    let mut sums = vec![0.0f64; hop];
    for (i, w) in window.iter().enumerate() {
        sums[i % hop] += w * w;
    }
    let max = sums.iter().cloned().fold(f64::MIN, f64::max);
    let min = sums.iter().cloned().fold(f64::MAX, f64::min);
    min > 0.0 && (max - min) <= rel_tol * max
}

fn reflect_pad(samples: &[f32], pad: usize) -> Vec<f64> {
    let n = samples.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    // reflect without repeating the edge sample, wrapping for short inputs
    for i in 0..pad {
        let idx = reflect_index(pad - i, n);
        out.push(samples[idx] as f64);
    }
    out.extend(samples.iter().map(|&s| s as f64));
    for i in 0..pad {
        let idx = reflect_index(n + i, n);
        out.push(samples[idx] as f64);
    }
    out
}

fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Windowed DFT analysis. Centered mode reflect-pads by `n_fft / 2`, giving
/// `len / hop + 1` frames.
pub fn stft(audio: &AudioBuffer, cfg: &SpectralConfig) -> Result<ComplexSpectrogram> {
    if audio.is_empty() {
        return Err(Error::EmptyInput("stft"));
    }
    cfg.validate()?;
    let n_fft = cfg.n_fft;
    let bins = cfg.bins();
    let padded: Vec<f64> = if cfg.centered {
        reflect_pad(&audio.samples, n_fft / 2)
    } else {
        audio.samples.iter().map(|&s| s as f64).collect()
    };
    let num_frames = cfg.frame_count(audio.len());
    if num_frames == 0 {
        return Err(Error::TooShort { needed: n_fft, got: audio.len() });
    }

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut frames = Array2::<Complex64>::zeros((num_frames, bins));
    let mut buf = vec![Complex64::default(); n_fft];
    for m in 0..num_frames {
        let start = m * cfg.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let x = padded.get(start + i).copied().unwrap_or(0.0);
            *slot = Complex64::new(x * cfg.window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            frames[(m, k)] = buf[k];
        }
    }
    Ok(ComplexSpectrogram { frames, config: cfg.clone(), sample_rate: audio.sample_rate })
}

/// Inverse STFT by windowed overlap-add with per-sample squared-window
/// normalization. For centered analysis the result has `(F - 1) * hop`
/// samples after trimming `n_fft / 2` from each side.
pub fn istft(spec: &ComplexSpectrogram) -> Result<AudioBuffer> {
    let cfg = &spec.config;
    cfg.validate()?;
    let bins = cfg.bins();
    if spec.frames.ncols() != bins {
        return Err(Error::Shape(format!(
            "expected {} bins per frame, got {}",
            bins,
            spec.frames.ncols()
        )));
    }
    let num_frames = spec.num_frames();
    if num_frames == 0 {
        return Err(Error::EmptyInput("istft"));
    }

    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(cfg.n_fft);
    let frames = synthesize_frames(spec, ifft.as_ref());
    let trim = cfg.n_fft / 2;
    let samples = overlap_add(&frames, &cfg.window, cfg.hop, trim, trim)?;
    AudioBuffer::new(
        samples.iter().map(|&s| s as f32).collect(),
        spec.sample_rate,
    )
}

/// Per-frame inverse DFT of the single-sided spectrum. The missing half is
/// reconstructed by Hermitian symmetry, which discards any imaginary part
/// supplied at DC and Nyquist.
pub(crate) fn synthesize_frames(spec: &ComplexSpectrogram, ifft: &dyn Fft<f64>) -> Array2<f64> {
    let n_fft = spec.config.n_fft;
    let bins = spec.config.bins();
    let num_frames = spec.num_frames();
    let mut out = Array2::<f64>::zeros((num_frames, n_fft));
    let mut buf = vec![Complex64::default(); n_fft];
    for m in 0..num_frames {
        for k in 0..bins {
            buf[k] = spec.frames[(m, k)];
        }
        for k in 1..n_fft - bins + 1 {
            buf[n_fft - k] = spec.frames[(m, k)].conj();
        }
        ifft.process(&mut buf);
        let scale = 1.0 / n_fft as f64;
        for (i, v) in buf.iter().enumerate() {
            out[(m, i)] = v.re * scale;
        }
    }
    out
}

/// Windowed overlap-add of time frames at `hop` spacing, normalized by the
/// accumulated squared window, then trimmed.
pub(crate) fn overlap_add(
    frames: &Array2<f64>,
    window: &[f64],
    hop: usize,
    trim_left: usize,
    trim_right: usize,
) -> Result<Vec<f64>> {
    let num_frames = frames.nrows();
    let n_fft = frames.ncols();
    let span = (num_frames - 1) * hop + n_fft;
    let mut acc = vec![0.0f64; span];
    let mut norm = vec![0.0f64; span];
    for m in 0..num_frames {
        let start = m * hop;
        for i in 0..n_fft {
            acc[start + i] += frames[(m, i)] * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    if span <= trim_left + trim_right {
        return Err(Error::Shape(format!(
            "overlap-add span {span} shorter than trim {trim_left}+{trim_right}"
        )));
    }
    let mut out = Vec::with_capacity(span - trim_left - trim_right);
    for i in trim_left..span - trim_right {
        if norm[i] <= f64::EPSILON {
            return Err(Error::WindowNormalization(i));
        }
        out.push(acc[i] / norm[i]);
    }
    Ok(out)
}

/// Log-mel spectrogram: mel filterbank applied to the magnitude spectrum,
/// clamped at `log_floor` before the natural log.
pub fn mel_spectrogram(
    audio: &AudioBuffer,
    cfg: &SpectralConfig,
    mel: &MelConfig,
) -> Result<Array2<f32>> {
    mel.validate(audio.sample_rate)?;
    let spec = stft(audio, cfg)?;
    let fb = mel_filterbank(mel, cfg.n_fft, audio.sample_rate)?;
    let bins = cfg.bins();
    let num_frames = spec.num_frames();
    let mut out = Array2::<f32>::zeros((num_frames, mel.n_mels));
    for m in 0..num_frames {
        for band in 0..mel.n_mels {
            let mut e = 0.0f64;
            for k in 0..bins {
                let w = fb[(band, k)];
                if w != 0.0 {
                    e += w * spec.frames[(m, k)].norm();
                }
            }
            out[(m, band)] = e.max(mel.log_floor).ln() as f32;
        }
    }
    Ok(out)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank (HTK scale, unit peaks), `n_mels x bins`.
/// Errors if any filter would be entirely zero for the given resolution.
pub fn mel_filterbank(mel: &MelConfig, n_fft: usize, sample_rate: u32) -> Result<Array2<f64>> {
    mel.validate(sample_rate)?;
    let bins = n_fft / 2 + 1;
    let mel_lo = hz_to_mel(mel.fmin);
    let mel_hi = hz_to_mel(mel.fmax);
    let edges: Vec<f64> = (0..mel.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (mel.n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::<f64>::zeros((mel.n_mels, bins));
    for band in 0..mel.n_mels {
        let (lo, ctr, hi) = (edges[band], edges[band + 1], edges[band + 2]);
        let mut any = false;
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= ctr {
                (f - lo) / (ctr - lo)
            } else {
                (hi - f) / (hi - ctr)
            };
            if w > 0.0 {
                fb[(band, k)] = w;
                any = true;
            }
        }
        if !any {
            return Err(Error::Config(format!(
                "mel filter {band} has no nonzero weight; n_mels {} too large for n_fft {}",
                mel.n_mels, n_fft
            )));
        }
    }
    Ok(fb)
}

/// Frame-count bookkeeping used by length contracts: floor(len / hop).
pub fn trimmed_length(len: usize, hop: usize) -> usize {
    (len / hop) * hop
}

/// Energy of a signal, used by the Parseval consistency checks.
pub fn energy(samples: &[f32]) -> f64 {
    samples.iter().map(|&s| (s as f64) * (s as f64)).sum()
}

#[allow(unused_imports)]
pub(crate) use ndarray_helpers::*;

mod ndarray_helpers {
    use super::*;

    /// Column-wise maximum magnitude per frame, handy in tests.
    #[allow(dead_code)]
    pub fn peak_bin(frames: &Array2<Complex64>, frame: usize) -> usize {
        let row = frames.row(frame);
        let mut best = 0;
        let mut best_mag = -1.0;
        for (k, v) in row.iter().enumerate() {
            let mag = v.norm();
            if mag > best_mag {
                best_mag = mag;
                best = k;
            }
        }
        best
    }

    #[allow(dead_code)]
    pub fn to_array1(v: &[f32]) -> Array1<f64> {
        Array1::from_iter(v.iter().map(|&x| x as f64))
    }
}
