//! WAV ingest and export. Mono 16-bit PCM and 32-bit float files are
//! accepted; everything is resampled to the requested rate on read.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{resample, AudioBuffer};
use crate::error::{Error, Result};

/// Reads a mono WAV file and resamples it to `target_rate`.
pub fn read_wav(path: impl AsRef<Path>, target_rate: u32) -> Result<AudioBuffer> {
    let mut reader = WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Config(format!(
            "{}: expected mono audio, got {} channels",
            path.as_ref().display(),
            spec.channels
        )));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Config(format!(
                "{}: unsupported sample format {fmt:?}/{bits}-bit; use 16-bit PCM or 32-bit float",
                path.as_ref().display()
            )))
        }
    };
    let audio = AudioBuffer::new(samples, spec.sample_rate)?;
    resample(&audio, target_rate)
}

/// Writes a waveform as 16-bit PCM, clamping to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for &s in &audio.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}
