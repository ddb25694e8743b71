//! Measurement machinery: codebook index distributions, utilization and
//! entropy, mel-distance evaluation between directories, and the ablation
//! grid driver that trains toy-scale cells and tabulates them.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::decoder::DecoderVariant;
use crate::dsp::{read_wav, AudioBuffer, MelConfig, SpectralConfig};
use crate::error::{Error, Result};
use crate::losses::mel_loss;
use crate::model::Codec;
use crate::training::{DataSource, DatasetManifest, TrainSetup, Trainer};
use crate::vq::utilization_rate;

/// Index histogram over a corpus with the derived statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilizationReport {
    pub histogram: Vec<u64>,
    pub utilization: f64,
    pub entropy_bits: f64,
    pub total_frames: u64,
    pub dataset: String,
}

/// Shannon entropy of the index distribution, in bits.
pub fn entropy_bits(histogram: &[u64]) -> f64 {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mut h = 0.0;
    for &c in histogram {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.log2();
        }
    }
    h
}

/// Encodes every clip in the source and accumulates index counts.
pub fn index_distribution(
    codec: &Codec,
    source: &DataSource,
    dataset: &str,
) -> Result<UtilizationReport> {
    if source.is_empty() {
        return Err(Error::EmptyInput("index_distribution corpus"));
    }
    let v = codec.config.vq.codebook_size;
    let mut histogram = vec![0u64; v];
    let mut total = 0u64;
    for clip in source.clips() {
        let (_, q) = codec.encode_audio(clip)?;
        for &i in &q.indices {
            histogram[i as usize] += 1;
            total += 1;
        }
    }
    let utilization = utilization_rate(&histogram)?;
    let entropy = entropy_bits(&histogram);
    Ok(UtilizationReport {
        histogram,
        utilization,
        entropy_bits: entropy,
        total_frames: total,
        dataset: dataset.to_string(),
    })
}

/// Convenience wrapper loading the corpus from a manifest split.
pub fn index_distribution_from_manifest(
    codec: &Codec,
    manifest: &DatasetManifest,
    split: &str,
) -> Result<UtilizationReport> {
    let source = DataSource::from_manifest(manifest, split, codec.config.sample_rate)?;
    index_distribution(codec, &source, split)
}

/// Normalized distribution CSV, sorted by index.
pub fn write_distribution_csv(report: &UtilizationReport, mut w: impl Write) -> Result<()> {
    writeln!(w, "index,count,probability")?;
    let total = report.total_frames.max(1) as f64;
    for (i, &c) in report.histogram.iter().enumerate() {
        writeln!(w, "{i},{c},{}", c as f64 / total)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct MelEvalRow {
    pub file: String,
    pub mel_distance: f64,
}

#[derive(Debug, Clone)]
pub struct MelEvalReport {
    pub rows: Vec<MelEvalRow>,
    pub unpaired: Vec<String>,
    pub mean: f64,
    pub std: f64,
}

/// Pairs files by name across a reference and a degraded directory and
/// reports the mel distance per pair. Unpaired files are listed and skipped.
pub fn mel_distance_eval(
    ref_dir: impl AsRef<Path>,
    deg_dir: impl AsRef<Path>,
    sample_rate: u32,
    spectral: &SpectralConfig,
    mel: &MelConfig,
) -> Result<MelEvalReport> {
    let list = |dir: &Path| -> Result<BTreeMap<String, std::path::PathBuf>> {
        let mut map = BTreeMap::new();
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let path = entry.path();
            if path.extension().map(|e| e == "wav").unwrap_or(false) {
                if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                    map.insert(name.to_string(), path.clone());
                }
            }
        }
        Ok(map)
    };
    let refs = list(ref_dir.as_ref())?;
    let degs = list(deg_dir.as_ref())?;
    if refs.is_empty() {
        return Err(Error::EmptyInput("reference directory"));
    }

    let mut rows = Vec::new();
    let mut unpaired = Vec::new();
    for (name, ref_path) in &refs {
        match degs.get(name) {
            Some(deg_path) => {
                let a = read_wav(ref_path, sample_rate)?;
                let b = read_wav(deg_path, sample_rate)?;
                let n = a.len().min(b.len());
                if n == 0 {
                    unpaired.push(name.clone());
                    continue;
                }
                let a = AudioBuffer::new(a.samples[..n].to_vec(), sample_rate)?;
                let b = AudioBuffer::new(b.samples[..n].to_vec(), sample_rate)?;
                rows.push(MelEvalRow { file: name.clone(), mel_distance: mel_loss(&a, &b, spectral, mel)? });
            }
            None => unpaired.push(name.clone()),
        }
    }
    for name in degs.keys() {
        if !refs.contains_key(name) {
            unpaired.push(name.clone());
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("no paired files"));
    }
    let mean = rows.iter().map(|r| r.mel_distance).sum::<f64>() / rows.len() as f64;
    let var = rows
        .iter()
        .map(|r| (r.mel_distance - mean).powi(2))
        .sum::<f64>()
        / rows.len() as f64;
    Ok(MelEvalReport { rows, unpaired, mean, std: var.sqrt() })
}

pub fn write_mel_eval_csv(report: &MelEvalReport, mut w: impl Write) -> Result<()> {
    writeln!(w, "file,mel_distance")?;
    for row in &report.rows {
        writeln!(w, "{},{}", row.file, row.mel_distance)?;
    }
    writeln!(w, "mean,{}", report.mean)?;
    writeln!(w, "std,{}", report.std)?;
    Ok(())
}

/// One ablation cell: which table it reproduces and what it changes.
#[derive(Debug, Clone, PartialEq)]
pub enum AblationCell {
    /// Codebook-scale sweep.
    CodebookSize(usize),
    /// Contextual-window sweep (crop seconds).
    ContextWindow(f64),
    /// Component ablations: the full model, a mirrored transposed-conv
    /// decoder, attention removed, or the multi-scale STFT critic removed.
    Full,
    MirrorDecoder,
    NoAttention,
    NoMsstftd,
}

impl AblationCell {
    fn table(&self) -> &'static str {
        match self {
            AblationCell::CodebookSize(_) => "codebook_scale",
            AblationCell::ContextWindow(_) => "context_window",
            _ => "components",
        }
    }

    fn label(&self) -> String {
        match self {
            AblationCell::CodebookSize(v) => format!("V={v}"),
            AblationCell::ContextWindow(s) => format!("window={s}s"),
            AblationCell::Full => "full".into(),
            AblationCell::MirrorDecoder => "w/ mirror decoder".into(),
            AblationCell::NoAttention => "w/o attention".into(),
            AblationCell::NoMsstftd => "w/o msstftd".into(),
        }
    }

    /// Applies the cell to a copy of the base setup.
    fn apply(&self, base: &TrainSetup) -> TrainSetup {
        let mut setup = base.clone();
        match self {
            AblationCell::CodebookSize(v) => {
                setup.model.vq.codebook_size = *v;
                setup.model.vq.init_buffer_frames = 2 * *v;
            }
            AblationCell::ContextWindow(seconds) => {
                setup.train.crop_seconds = *seconds;
                setup.train.max_clip_seconds = setup.train.max_clip_seconds.max(*seconds);
            }
            AblationCell::Full => {}
            AblationCell::MirrorDecoder => {
                setup.model.decoder.variant = DecoderVariant::Mirror {
                    channels: 2,
                    strides: setup.model.encoder.strides.iter().rev().cloned().collect(),
                };
            }
            AblationCell::NoAttention => {
                setup.model.decoder.use_attention = false;
            }
            AblationCell::NoMsstftd => {
                setup.discriminators.stft_scales.clear();
            }
        }
        setup
    }
}

/// The cell grid matching the reported tables.
pub fn standard_grid() -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for v in [1024usize, 4096, 8192, 16384] {
        cells.push(AblationCell::CodebookSize(v));
    }
    for s in [1.0f64, 3.0, 5.0] {
        cells.push(AblationCell::ContextWindow(s));
    }
    cells.extend([
        AblationCell::Full,
        AblationCell::MirrorDecoder,
        AblationCell::NoAttention,
        AblationCell::NoMsstftd,
    ]);
    cells
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    pub table: String,
    pub cell: String,
    pub codebook_size: usize,
    pub context_window_s: f64,
    pub steps: u64,
    pub utilization: Option<f64>,
    pub entropy_bits: Option<f64>,
    pub mel_distance: Option<f64>,
    /// Slot for an externally computed UTMOS score.
    pub utmos: Option<f64>,
    pub error: Option<String>,
}

/// Trains each cell at toy scale on the given source, measuring utilization
/// and mel distance on it. Cell failures are recorded and the grid
/// continues.
pub fn ablation_grid(
    base: &TrainSetup,
    cells: &[AblationCell],
    steps: u64,
    source: &DataSource,
) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for cell in cells {
        let setup = cell.apply(base);
        let mut row = GridRow {
            table: cell.table().to_string(),
            cell: cell.label(),
            codebook_size: setup.model.vq.codebook_size,
            context_window_s: setup.train.crop_seconds,
            steps,
            utilization: None,
            entropy_bits: None,
            mel_distance: None,
            utmos: None,
            error: None,
        };
        match run_cell(setup, steps, source) {
            Ok((utilization, entropy, mel_distance)) => {
                row.utilization = Some(utilization);
                row.entropy_bits = Some(entropy);
                row.mel_distance = Some(mel_distance);
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        rows.push(row);
    }
    Ok(rows)
}

fn run_cell(setup: TrainSetup, steps: u64, source: &DataSource) -> Result<(f64, f64, f64)> {
    let mut trainer = Trainer::new(setup)?;
    trainer.train_steps(steps, source)?;
    let report = index_distribution(&trainer.codec, source, "grid")?;
    let mel = trainer.eval_mel_distance(source)?;
    Ok((report.utilization, report.entropy_bits, mel))
}

pub fn write_grid_csv(rows: &[GridRow], w: impl Write) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}
