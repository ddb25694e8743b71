//! Dataset manifest and the truncate-then-crop sampling policy.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::dsp::{read_wav, AudioBuffer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub duration_seconds: f64,
    pub split: String,
}

/// Tab-separated manifest: one `path\tduration\tsplit` line per clip.
#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let (path, duration, split) = match (cols.next(), cols.next(), cols.next()) {
                (Some(p), Some(d), Some(s)) => (p, d, s),
                _ => {
                    return Err(Error::Config(format!(
                        "manifest line {}: expected path<TAB>duration<TAB>split",
                        lineno + 1
                    )))
                }
            };
            let duration_seconds: f64 = duration.parse().map_err(|_| {
                Error::Config(format!("manifest line {}: bad duration {duration:?}", lineno + 1))
            })?;
            let mut path = PathBuf::from(path);
            if path.is_relative() {
                if let Some(base) = base {
                    path = base.join(path);
                }
            }
            entries.push(ManifestEntry { path, duration_seconds, split: split.to_string() });
        }
        if entries.is_empty() {
            return Err(Error::EmptyInput("manifest"));
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::parse(&text, path.as_ref().parent())
    }

    pub fn split(&self, tag: &str) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == tag).collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                e.path.display(),
                e.duration_seconds,
                e.split
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Truncates to `max_clip_seconds`, then takes a uniform random crop of
/// `crop_seconds`; shorter clips are zero-padded up to the crop length.
pub fn crop_sample(audio: &AudioBuffer, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> AudioBuffer {
    let sr = audio.sample_rate;
    let max_len = (cfg.max_clip_seconds * sr as f64).round() as usize;
    let crop_len = (cfg.crop_seconds * sr as f64).round() as usize;
    let truncated = &audio.samples[..audio.len().min(max_len)];
    let mut samples = if truncated.len() <= crop_len {
        let mut s = truncated.to_vec();
        s.resize(crop_len, 0.0);
        s
    } else {
        let start = rng.random_range(0..=truncated.len() - crop_len);
        truncated[start..start + crop_len].to_vec()
    };
    samples.truncate(crop_len);
    AudioBuffer { samples, sample_rate: sr }
}

/// In-memory training source: manifest entries of one split, decoded and
/// resampled once, sampled with replacement per batch.
pub struct DataSource {
    clips: Vec<AudioBuffer>,
    paths: Vec<PathBuf>,
}

impl DataSource {
    pub fn from_manifest(
        manifest: &DatasetManifest,
        split: &str,
        sample_rate: u32,
    ) -> Result<Self> {
        let entries = manifest.split(split);
        if entries.is_empty() {
            return Err(Error::Config(format!("manifest has no entries for split {split:?}")));
        }
        let mut cache: HashMap<PathBuf, AudioBuffer> = HashMap::new();
        let mut clips = Vec::new();
        let mut paths = Vec::new();
        for e in entries {
            let audio = match cache.get(&e.path) {
                Some(a) => a.clone(),
                None => {
                    let a = read_wav(&e.path, sample_rate)?;
                    cache.insert(e.path.clone(), a.clone());
                    a
                }
            };
            if audio.is_empty() {
                return Err(Error::EmptyInput("manifest clip"));
            }
            clips.push(audio);
            paths.push(e.path.clone());
        }
        Ok(Self { clips, paths })
    }

    pub fn from_clips(clips: Vec<AudioBuffer>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::EmptyInput("data source"));
        }
        let paths = (0..clips.len()).map(|i| PathBuf::from(format!("clip{i}"))).collect();
        Ok(Self { clips, paths })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn clips(&self) -> &[AudioBuffer] {
        &self.clips
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    /// Samples a batch of equal-length crops.
    pub fn sample_batch(
        &self,
        cfg: &TrainConfig,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<AudioBuffer> {
        (0..batch_size)
            .map(|_| {
                let idx = rng.random_range(0..self.clips.len());
                crop_sample(&self.clips[idx], cfg, rng)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg(crop: f64) -> TrainConfig {
        TrainConfig { crop_seconds: crop, ..TrainConfig::default() }
    }

    #[test]
    fn crop_truncates_long_clips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let audio = AudioBuffer::new(vec![0.5; 15 * 24000], 24000).unwrap();
        let c = crop_sample(&audio, &cfg(3.0), &mut rng);
        assert_eq!(c.len(), 72000);
        // crop start stays within the 10 s truncation window
        assert!(c.samples.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn crop_exact_length_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<f32> = (0..72000).map(|i| (i as f32 * 1e-4).sin()).collect();
        let audio = AudioBuffer::new(samples.clone(), 24000).unwrap();
        let c = crop_sample(&audio, &cfg(3.0), &mut rng);
        assert_eq!(c.samples, samples);
    }

    #[test]
    fn crop_pads_short_clips_with_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let audio = AudioBuffer::new(vec![0.3; 24000], 24000).unwrap();
        let c = crop_sample(&audio, &cfg(3.0), &mut rng);
        assert_eq!(c.len(), 72000);
        assert!(c.samples[..24000].iter().all(|&s| s == 0.3));
        assert!(c.samples[24000..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn manifest_parse_and_split() {
        let text = "a.wav\t3.5\ttrain\nb.wav\t2.0\ttest\n# comment\nc.wav\t9\ttrain\n";
        let m = DatasetManifest::parse(text, None).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.split("train").len(), 2);
        assert_eq!(m.split("test").len(), 1);
        assert_eq!(m.entries[1].duration_seconds, 2.0);
    }

    #[test]
    fn manifest_rejects_malformed_lines() {
        assert!(DatasetManifest::parse("nope this has no tabs\n", None).is_err());
        assert!(DatasetManifest::parse("a.wav\tNaN?\ttrain\n", None).is_err());
        assert!(DatasetManifest::parse("", None).is_err());
    }

    #[test]
    fn manifest_round_trip_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        let m = DatasetManifest {
            entries: vec![ManifestEntry {
                path: dir.path().join("x.wav"),
                duration_seconds: 1.0,
                split: "train".into(),
            }],
        };
        m.write(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.entries.len(), 1);
        assert_eq!(back.entries[0].split, "train");
    }

    #[test]
    fn batches_are_seed_reproducible() {
        let clips: Vec<AudioBuffer> = (0..5)
            .map(|i| AudioBuffer::new(vec![i as f32 * 0.1; 24000], 24000).unwrap())
            .collect();
        let src = DataSource::from_clips(clips).unwrap();
        let c = cfg(0.5);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let b1 = src.sample_batch(&c, 4, &mut r1);
        let b2 = src.sample_batch(&c, 4, &mut r2);
        assert_eq!(b1, b2);
    }
}
