//! The single quantizer: large-codebook nearest-neighbor VQ with k-means
//! initialization, exponential-moving-average codebook updates and forced
//! awakening of long-unused codes.
//!
//! Codebook state is kept in f64. The nearest-neighbor search uses the
//! expansion ||z - c||^2 = ||z||^2 - 2 z.c + ||c||^2 through a matmul and
//! re-evaluates near-ties with the exact summation so results match a
//! brute-force oracle index-for-index.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VQConfig {
    /// Number of code vectors V. The ablation grid exercises
    /// {1024, 4096, 8192, 16384}; any V >= 1 is accepted.
    pub codebook_size: usize,
    /// Latent dimensionality D.
    pub dim: usize,
    /// EMA decay for codebook statistics.
    pub ema_decay: f64,
    /// Batches a code may stay unassigned before forced replacement.
    pub revival_age: u32,
    pub kmeans_init: bool,
    pub kmeans_iters: usize,
    /// Latent frames gathered before k-means initialization.
    pub init_buffer_frames: usize,
    /// Laplace smoothing applied to EMA cluster sizes.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1e-5
}

impl Default for VQConfig {
    fn default() -> Self {
        Self {
            codebook_size: 4096,
            dim: 512,
            ema_decay: 0.99,
            revival_age: 2,
            kmeans_init: true,
            kmeans_iters: 4,
            init_buffer_frames: 8192,
            epsilon: 1e-5,
        }
    }
}

impl VQConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size == 0 {
            return Err(Error::Config("codebook_size must be >= 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("vq dim must be >= 1".into()));
        }
        if !(0.0 < self.ema_decay && self.ema_decay < 1.0) {
            return Err(Error::Config(format!(
                "ema_decay must lie in (0, 1), got {}",
                self.ema_decay
            )));
        }
        Ok(())
    }
}

/// V x D code vectors plus EMA statistics and per-code usage age.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub vectors: Array2<f64>,
    pub ema_cluster_size: Array1<f64>,
    pub ema_embed_sum: Array2<f64>,
    /// Batches since each code was last assigned.
    pub usage_age: Vec<u32>,
}

impl Codebook {
    /// Codebook seeded with small random vectors; used when k-means
    /// initialization is disabled.
    pub fn random(size: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let vectors = Array2::from_shape_fn((size, dim), |_| (rng.random::<f64>() * 2.0 - 1.0) * scale);
        let ema_cluster_size = Array1::ones(size);
        let ema_embed_sum = vectors.clone();
        Self { vectors, ema_cluster_size, ema_embed_sum, usage_age: vec![0; size] }
    }

    pub fn size(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Exact table lookup of code vectors for a sequence of indices.
    pub fn lookup(&self, indices: &[u32]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((indices.len(), self.dim()));
        for (t, &i) in indices.iter().enumerate() {
            if i as usize >= self.size() {
                return Err(Error::Shape(format!(
                    "index {i} out of range for codebook of size {}",
                    self.size()
                )));
            }
            out.row_mut(t).assign(&self.vectors.row(i as usize));
        }
        Ok(out)
    }

    /// Dumps code vectors (and an optional assignment histogram) as CSV.
    pub fn export_csv<W: Write>(&self, histogram: Option<&[u64]>, mut w: W) -> Result<()> {
        if let Some(h) = histogram {
            if h.len() != self.size() {
                return Err(Error::Shape(format!(
                    "histogram length {} vs codebook size {}",
                    h.len(),
                    self.size()
                )));
            }
        }
        write!(w, "index,usage_age,ema_cluster_size")?;
        if histogram.is_some() {
            write!(w, ",count")?;
        }
        for d in 0..self.dim() {
            write!(w, ",v{d}")?;
        }
        writeln!(w)?;
        for v in 0..self.size() {
            write!(w, "{v},{},{}", self.usage_age[v], self.ema_cluster_size[v])?;
            if let Some(h) = histogram {
                write!(w, ",{}", h[v])?;
            }
            for d in 0..self.dim() {
                write!(w, ",{}", self.vectors[(v, d)])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Indices, quantized frames and squared distances for one latent sequence.
#[derive(Debug, Clone)]
pub struct QuantizationResult {
    pub indices: Vec<u32>,
    /// Rows equal `vectors[indices[t]]` exactly.
    pub quantized: Array2<f64>,
    pub distances: Vec<f64>,
}

fn exact_sq_dist(z: ArrayView1<f64>, c: ArrayView1<f64>) -> f64 {
    let mut acc = 0.0;
    for (a, b) in z.iter().zip(c.iter()) {
        let d = a - b;
        acc += d * d;
    }
    acc
}

/// Nearest-code assignment with smallest-index tie-breaking.
pub fn quantize(latents: &Array2<f64>, book: &Codebook) -> Result<QuantizationResult> {
    if latents.ncols() != book.dim() {
        return Err(Error::Shape(format!(
            "latent dim {} does not match codebook dim {}",
            latents.ncols(),
            book.dim()
        )));
    }
    let t_frames = latents.nrows();
    let v_codes = book.size();
    // scores[t][v] = ||c_v||^2 - 2 z_t . c_v  (the ||z||^2 term is rank-free)
    let cross = latents.dot(&book.vectors.t());
    let code_norms: Vec<f64> = (0..v_codes)
        .map(|v| book.vectors.row(v).iter().map(|x| x * x).sum())
        .collect();

    let mut indices = Vec::with_capacity(t_frames);
    let mut distances = Vec::with_capacity(t_frames);
    let mut quantized = Array2::zeros((t_frames, book.dim()));
    for t in 0..t_frames {
        let mut best_score = f64::INFINITY;
        for v in 0..v_codes {
            let s = code_norms[v] - 2.0 * cross[(t, v)];
            if s < best_score {
                best_score = s;
            }
        }
        // margin generous against matmul rounding; near-ties re-ranked exactly
        let z_norm: f64 = latents.row(t).iter().map(|x| x * x).sum();
        let margin = 1e-9 * (best_score.abs() + z_norm + 1.0);
        let mut best_v = usize::MAX;
        let mut best_exact = f64::INFINITY;
        for v in 0..v_codes {
            let s = code_norms[v] - 2.0 * cross[(t, v)];
            if s <= best_score + margin {
                let d = exact_sq_dist(latents.row(t), book.vectors.row(v));
                if d < best_exact {
                    best_exact = d;
                    best_v = v;
                }
            }
        }
        indices.push(best_v as u32);
        distances.push(best_exact);
        quantized.row_mut(t).assign(&book.vectors.row(best_v));
    }
    Ok(QuantizationResult { indices, quantized, distances })
}

/// Lloyd k-means over the init buffer; centroids seed the codebook and the
/// EMA statistics, with empty clusters re-seeded from far points.
pub fn kmeans_init(buffer: &Array2<f64>, cfg: &VQConfig, rng: &mut ChaCha8Rng) -> Result<Codebook> {
    cfg.validate()?;
    let v_codes = cfg.codebook_size;
    let n = buffer.nrows();
    if n < v_codes {
        return Err(Error::InsufficientInitData { needed: v_codes, got: n });
    }
    if buffer.ncols() != cfg.dim {
        return Err(Error::Shape(format!(
            "buffer dim {} vs configured dim {}",
            buffer.ncols(),
            cfg.dim
        )));
    }

    // sample V distinct rows as starting centroids
    let mut picked = sample_distinct(n, v_codes, rng);
    picked.sort_unstable();
    let mut centroids = Array2::zeros((v_codes, cfg.dim));
    for (c, &row) in picked.iter().enumerate() {
        centroids.row_mut(c).assign(&buffer.row(row));
    }

    let mut book = Codebook {
        vectors: centroids,
        ema_cluster_size: Array1::ones(v_codes),
        ema_embed_sum: Array2::zeros((v_codes, cfg.dim)),
        usage_age: vec![0; v_codes],
    };

    let mut counts = vec![0f64; v_codes];
    for _ in 0..cfg.kmeans_iters.max(1) {
        let assignment = quantize(buffer, &book)?;
        let mut sums = Array2::<f64>::zeros((v_codes, cfg.dim));
        counts.iter_mut().for_each(|c| *c = 0.0);
        for (t, &v) in assignment.indices.iter().enumerate() {
            counts[v as usize] += 1.0;
            let mut row = sums.row_mut(v as usize);
            row += &buffer.row(t);
        }
        // means for populated clusters
        for v in 0..v_codes {
            if counts[v] > 0.0 {
                let mut row = book.vectors.row_mut(v);
                row.assign(&sums.row(v));
                row /= counts[v];
            }
        }
        // re-seed empty clusters from the farthest points, avoiding value
        // duplicates within this round
        let empties: Vec<usize> = (0..v_codes).filter(|&v| counts[v] == 0.0).collect();
        if !empties.is_empty() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                assignment.distances[b]
                    .partial_cmp(&assignment.distances[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let mut chosen: Vec<usize> = Vec::new();
            let mut it = order.into_iter();
            for &e in &empties {
                let mut seed_row = None;
                for cand in it.by_ref() {
                    let is_dup = chosen
                        .iter()
                        .any(|&c| buffer.row(c) == buffer.row(cand));
                    if !is_dup {
                        seed_row = Some(cand);
                        break;
                    }
                }
                if let Some(rowi) = seed_row {
                    book.vectors.row_mut(e).assign(&buffer.row(rowi));
                    chosen.push(rowi);
                    counts[e] = 1.0;
                }
            }
        }
    }

    // final assignment fixes the EMA seed statistics
    let assignment = quantize(buffer, &book)?;
    counts.iter_mut().for_each(|c| *c = 0.0);
    let mut sums = Array2::<f64>::zeros((v_codes, cfg.dim));
    for (t, &v) in assignment.indices.iter().enumerate() {
        counts[v as usize] += 1.0;
        let mut row = sums.row_mut(v as usize);
        row += &buffer.row(t);
    }
    for v in 0..v_codes {
        if counts[v] > 0.0 {
            let mut row = book.vectors.row_mut(v);
            row.assign(&sums.row(v));
            row /= counts[v];
            book.ema_cluster_size[v] = counts[v];
            book.ema_embed_sum.row_mut(v).assign(&sums.row(v));
        } else {
            book.ema_cluster_size[v] = 1.0;
            let seed = book.vectors.row(v).to_owned();
            book.ema_embed_sum.row_mut(v).assign(&seed);
        }
    }
    Ok(book)
}

fn sample_distinct(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    // partial Fisher-Yates over row indices
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// EMA codebook update. Statistics decay for every code; vectors move only
/// for codes that received assignments, and usage ages advance otherwise.
pub fn ema_update(
    book: &mut Codebook,
    latents: &Array2<f64>,
    assignments: &[u32],
    cfg: &VQConfig,
) -> Result<()> {
    if latents.nrows() != assignments.len() {
        return Err(Error::Shape(format!(
            "{} latents vs {} assignments",
            latents.nrows(),
            assignments.len()
        )));
    }
    if latents.ncols() != book.dim() {
        return Err(Error::Shape("latent dim mismatch in ema_update".into()));
    }
    let v_codes = book.size();
    let gamma = cfg.ema_decay;
    let mut counts = vec![0f64; v_codes];
    let mut sums = Array2::<f64>::zeros((v_codes, book.dim()));
    for (t, &v) in assignments.iter().enumerate() {
        let v = v as usize;
        if v >= v_codes {
            return Err(Error::Shape(format!("assignment {v} out of range")));
        }
        counts[v] += 1.0;
        let mut row = sums.row_mut(v);
        row += &latents.row(t);
    }

    for v in 0..v_codes {
        book.ema_cluster_size[v] = gamma * book.ema_cluster_size[v] + (1.0 - gamma) * counts[v];
        let mut row = book.ema_embed_sum.row_mut(v);
        row *= gamma;
        row.scaled_add(1.0 - gamma, &sums.row(v));
    }

    // Laplace smoothing over totals keeps the smoothed sizes summing to the
    // raw total, so a lone fully-assigned code divides by its exact size.
    let total: f64 = book.ema_cluster_size.sum();
    let denom_scale = total / (total + v_codes as f64 * cfg.epsilon);
    for v in 0..v_codes {
        if counts[v] > 0.0 {
            let smoothed = (book.ema_cluster_size[v] + cfg.epsilon) * denom_scale;
            let mut row = book.vectors.row_mut(v);
            row.assign(&book.ema_embed_sum.row(v));
            row /= smoothed;
            book.usage_age[v] = 0;
        } else {
            book.usage_age[v] += 1;
        }
    }
    Ok(())
}

/// Replaces every code older than `revival_age` with a batch frame sampled
/// uniformly under the provided rng; EMA stats re-seed to (1, vector).
/// Returns the number of codes revived.
pub fn revive_dead(
    book: &mut Codebook,
    batch_latents: &Array2<f64>,
    cfg: &VQConfig,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if batch_latents.nrows() == 0 {
        return Err(Error::EmptyInput("revive_dead"));
    }
    let n = batch_latents.nrows();
    let mut revived = 0;
    for v in 0..book.size() {
        if book.usage_age[v] > cfg.revival_age {
            let pick = rng.random_range(0..n);
            let frame = batch_latents.row(pick).to_owned();
            book.vectors.row_mut(v).assign(&frame);
            book.ema_embed_sum.row_mut(v).assign(&frame);
            book.ema_cluster_size[v] = 1.0;
            book.usage_age[v] = 0;
            revived += 1;
        }
    }
    Ok(revived)
}

/// Fraction of codes assigned at least once: |{v : count_v > 0}| / V.
pub fn utilization_rate(histogram: &[u64]) -> Result<f64> {
    if histogram.is_empty() {
        return Err(Error::Config("utilization of an empty histogram".into()));
    }
    let used = histogram.iter().filter(|&&c| c > 0).count();
    Ok(used as f64 / histogram.len() as f64)
}
