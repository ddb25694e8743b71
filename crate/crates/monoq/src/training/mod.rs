//! Alternating GAN training loop: AdamW with cosine decay, strict G,D,G,D
//! alternation, EMA codebook updates and dead-code awakening inside the
//! generator step, metrics streaming and resumable checkpoints.

mod checkpoint;
mod data;

pub use checkpoint::{read_container, write_container, ArrayData, Container, Entry};
pub use data::{crop_sample, DataSource, DatasetManifest, ManifestEntry};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discriminators::{DiscriminatorConfig, DiscriminatorEnsemble};
use crate::dsp::{AudioBuffer, MelConfig, SpectralConfig};
use crate::error::{Error, Result};
use crate::losses::{
    adv_loss, disc_loss, feat_match_loss, generator_total, generator_total_t, mel_loss_t,
    quantizer_loss, scalar_f64, LossReport, LossWeights, QuantizerReduction,
};
use crate::model::{Codec, CodecConfig};
use crate::nn::{clip_grad_norm, AdamW, MelOps, ParamStore};
use crate::vq::{ema_update, kmeans_init, quantize, revive_dead};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    /// Random-crop length fed to the model.
    pub crop_seconds: f64,
    /// Clips are truncated to this length before cropping.
    pub max_clip_seconds: f64,
    pub batch_size: usize,
    /// Initial learning rate, decayed on a cosine schedule.
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    /// Total optimizer steps (generator and discriminator each take half).
    pub total_steps: u64,
    pub seed: u64,
    /// First step at which discriminator signals enter the generator loss.
    pub disc_start_step: u64,
    /// Global-norm gradient clip; disabled by default.
    pub grad_clip: Option<f64>,
    pub quantizer_reduction: QuantizerReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            crop_seconds: 3.0,
            max_clip_seconds: 10.0,
            batch_size: 40,
            lr: 2e-4,
            betas: (0.9, 0.999),
            weight_decay: 0.01,
            total_steps: 2_000_000,
            seed: 0,
            disc_start_step: 0,
            grad_clip: None,
            quantizer_reduction: QuantizerReduction::FrameSum,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_seconds <= 0.0 || self.crop_seconds > self.max_clip_seconds {
            return Err(Error::Config(format!(
                "crop_seconds {} must lie in (0, max_clip_seconds {}]",
                self.crop_seconds, self.max_clip_seconds
            )));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            // zero is allowed so frozen-weight checks can run the full loop
            return Err(Error::Config("lr must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine learning-rate schedule: lr * 0.5 * (1 + cos(pi * step / total)).
pub fn lr_at(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::Config(format!(
            "step {step} outside schedule of {} steps",
            cfg.total_steps
        )));
    }
    let x = step as f64 / cfg.total_steps as f64;
    Ok(cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * x).cos()))
}

/// Full training configuration: model, critics, loss weights, mel-loss
/// analysis settings and the optimizer schedule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainSetup {
    #[serde(default)]
    pub model: CodecConfig,
    #[serde(default)]
    pub discriminators: DiscriminatorConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_mel_n_fft")]
    pub mel_n_fft: usize,
    #[serde(default = "default_mel_hop")]
    pub mel_hop: usize,
    #[serde(default = "default_mel_config")]
    pub mel: MelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_mel_n_fft() -> usize {
    1024
}

fn default_mel_hop() -> usize {
    256
}

fn default_mel_config() -> MelConfig {
    MelConfig::for_loss(24000)
}

impl Default for TrainSetup {
    fn default() -> Self {
        Self {
            model: CodecConfig::default(),
            discriminators: DiscriminatorConfig::default(),
            weights: LossWeights::default(),
            mel_n_fft: 1024,
            mel_hop: 256,
            mel: MelConfig::for_loss(24000),
            train: TrainConfig::default(),
        }
    }
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.discriminators.validate()?;
        self.weights.validate()?;
        self.train.validate()?;
        self.mel.validate(self.model.sample_rate)?;
        Ok(())
    }

    pub fn mel_spectral(&self) -> SpectralConfig {
        SpectralConfig::hann(self.mel_n_fft, self.mel_hop)
    }
}

#[derive(Debug, Clone, Serialize)]
struct MetricsRow {
    step: u64,
    side: &'static str,
    lr: f64,
    quantizer: Option<f64>,
    mel: Option<f64>,
    adversarial: Option<f64>,
    feature_matching: Option<f64>,
    disc_hinge: Option<f64>,
    total: f64,
    utilization: f64,
}

pub struct Trainer {
    pub setup: TrainSetup,
    pub codec: Codec,
    pub discs: DiscriminatorEnsemble,
    disc_params: ParamStore,
    opt_g: AdamW,
    opt_d: AdamW,
    mel_ops: MelOps,
    rng: ChaCha8Rng,
    step: u64,
    kmeans_ready: bool,
    /// Cumulative assignment histogram across generator steps.
    assign_hist: Vec<u64>,
    metrics: Option<csv::Writer<std::fs::File>>,
}

impl Trainer {
    pub fn new(setup: TrainSetup) -> Result<Self> {
        setup.validate()?;
        let codec = Codec::new(setup.model.clone(), setup.train.seed)?;
        let mut disc_params = ParamStore::new(Device::Cpu, DType::F32);
        let mut disc_rng = ChaCha8Rng::seed_from_u64(setup.train.seed.wrapping_add(1));
        let discs = DiscriminatorEnsemble::new(&setup.discriminators, &mut disc_params, &mut disc_rng)?;
        let opt_g = AdamW::new(codec.params.named().to_vec(), setup.train.betas, setup.train.weight_decay)?;
        let opt_d = AdamW::new(disc_params.named().to_vec(), setup.train.betas, setup.train.weight_decay)?;
        let mel_ops = MelOps::new(
            &setup.mel_spectral(),
            &setup.mel,
            setup.model.sample_rate,
            DType::F32,
            &Device::Cpu,
        )?;
        let rng = ChaCha8Rng::seed_from_u64(setup.train.seed.wrapping_add(2));
        let v = setup.model.vq.codebook_size;
        Ok(Self {
            setup,
            codec,
            discs,
            disc_params,
            opt_g,
            opt_d,
            mel_ops,
            rng,
            step: 0,
            kmeans_ready: false,
            assign_hist: vec![0; v],
            metrics: None,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn utilization(&self) -> f64 {
        crate::vq::utilization_rate(&self.assign_hist).unwrap_or(0.0)
    }

    pub fn assign_histogram(&self) -> &[u64] {
        &self.assign_hist
    }

    pub fn stream_metrics_to(&mut self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let writer = csv::Writer::from_writer(std::fs::File::create(path)?);
        self.metrics = Some(writer);
        Ok(())
    }

    fn log(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(w) = self.metrics.as_mut() {
            w.serialize(row)?;
            w.flush()?;
        }
        Ok(())
    }

    /// Gathers encoder latents and runs k-means before the first step.
    pub fn ensure_codebook_init(&mut self, source: &DataSource) -> Result<()> {
        if self.kmeans_ready {
            return Ok(());
        }
        if !self.setup.model.vq.kmeans_init {
            self.kmeans_ready = true;
            return Ok(());
        }
        let vq = self.setup.model.vq.clone();
        let target = vq.init_buffer_frames.max(vq.codebook_size);
        let mut rows: Vec<f64> = Vec::with_capacity(target * vq.dim);
        let mut frames = 0usize;
        while frames < target {
            let batch = source.sample_batch(&self.setup.train, self.setup.train.batch_size, &mut self.rng);
            for clip in &batch {
                let latents = crate::encoder::encode(clip, &self.codec.encoder)?;
                frames += latents.num_frames();
                rows.extend(latents.frames.iter().map(|&v| v as f64));
            }
        }
        let buffer = ndarray::Array2::from_shape_vec((frames, vq.dim), rows)
            .map_err(|e| Error::Shape(format!("init buffer: {e}")))?;
        self.codec.codebook = kmeans_init(&buffer, &vq, &mut self.rng)?;
        self.kmeans_ready = true;
        Ok(())
    }

    fn batch_tensor(&self, batch: &[AudioBuffer]) -> Result<Tensor> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        let len = batch[0].len();
        if batch.iter().any(|a| a.len() != len) {
            return Err(Error::Shape("ragged batch".into()));
        }
        let mut data = Vec::with_capacity(batch.len() * len);
        for clip in batch {
            data.extend_from_slice(&clip.samples);
        }
        Ok(Tensor::from_vec(data, (batch.len(), 1, len), self.codec.params.device())?)
    }

    fn adversarial_active(&self) -> bool {
        self.discs.arity() > 0
            && self.step >= self.setup.train.disc_start_step
            && (self.setup.weights.lambda_adv > 0.0 || self.setup.weights.lambda_feat > 0.0)
    }

    /// One generator update: losses per the weighted total, then the EMA
    /// codebook update and dead-code awakening.
    pub fn train_step_g(&mut self, batch: &[AudioBuffer]) -> Result<LossReport> {
        if !self.kmeans_ready {
            return Err(Error::TrainingFault(
                "codebook init must run before the first generator step".into(),
            ));
        }
        let lr = lr_at(self.step, &self.setup.train)?;
        let x = self.batch_tensor(batch)?;
        let fwd = self.codec.forward_training(&x)?;
        let out_len = fwd.audio_hat.dims()[1];
        let x_ref = x.squeeze(1)?.narrow(1, 0, out_len)?;

        let l_q = quantizer_loss(&fwd.z, &fwd.zq_const, self.setup.train.quantizer_reduction)?;
        let l_mel = mel_loss_t(&self.mel_ops, &x_ref, &fwd.audio_hat)?;
        let (l_adv, l_feat) = if self.adversarial_active() {
            let real_scores = self.discs.forward(&x_ref.detach())?;
            let fake_scores = self.discs.forward(&fwd.audio_hat)?;
            (
                Some(adv_loss(&fake_scores)?),
                Some(feat_match_loss(&real_scores, &fake_scores)?),
            )
        } else {
            (None, None)
        };

        let total_t = generator_total_t(&l_q, &l_mel, l_adv.as_ref(), l_feat.as_ref(), &self.setup.weights)?;
        let report = generator_total(
            scalar_f64(&l_q)?,
            scalar_f64(&l_mel)?,
            l_adv.as_ref().map(scalar_f64).transpose()?.unwrap_or(0.0),
            l_feat.as_ref().map(scalar_f64).transpose()?.unwrap_or(0.0),
            &self.setup.weights,
        )
        .map_err(|e| self.fault(e))?;

        let mut grads = total_t.backward()?;
        if let Some(max_norm) = self.setup.train.grad_clip {
            clip_grad_norm(&mut grads, self.codec.params.named(), max_norm)?;
        }
        self.opt_g.step(&grads, lr)?;

        // quantizer bookkeeping lives inside the generator step
        ema_update(
            &mut self.codec.codebook,
            &fwd.latents,
            &fwd.quantization.indices,
            &self.setup.model.vq,
        )?;
        revive_dead(&mut self.codec.codebook, &fwd.latents, &self.setup.model.vq, &mut self.rng)?;
        for &i in &fwd.quantization.indices {
            self.assign_hist[i as usize] += 1;
        }

        let (quantizer, mel, adversarial, feature_matching, total) = match &report {
            LossReport::Generator { quantizer, mel, adversarial, feature_matching, total } => {
                (*quantizer, *mel, *adversarial, *feature_matching, *total)
            }
            _ => unreachable!(),
        };
        let util = self.utilization();
        self.step += 1;
        self.log(MetricsRow {
            step: self.step,
            side: "g",
            lr,
            quantizer: Some(quantizer),
            mel: Some(mel),
            adversarial: Some(adversarial),
            feature_matching: Some(feature_matching),
            disc_hinge: None,
            total,
            utilization: util,
        })?;
        Ok(report)
    }

    /// One discriminator update against the frozen generator.
    pub fn train_step_d(&mut self, batch: &[AudioBuffer]) -> Result<LossReport> {
        if !self.kmeans_ready {
            return Err(Error::TrainingFault(
                "codebook init must run before the first discriminator step".into(),
            ));
        }
        let lr = lr_at(self.step, &self.setup.train)?;
        let x = self.batch_tensor(batch)?;
        let fwd = self.codec.forward_training(&x)?;
        let out_len = fwd.audio_hat.dims()[1];
        let x_ref = x.squeeze(1)?.narrow(1, 0, out_len)?.detach();
        let fake = fwd.audio_hat.detach();

        let (real_scores, fake_scores) = self.discs.forward_pair(&x_ref, &fake)?;
        let l_d = disc_loss(&real_scores, &fake_scores)?;
        let hinge = scalar_f64(&l_d)?;
        if !hinge.is_finite() {
            return Err(self.fault(Error::TrainingFault(format!(
                "discriminator loss is not finite: {hinge}"
            ))));
        }
        let mut grads = l_d.backward()?;
        if let Some(max_norm) = self.setup.train.grad_clip {
            clip_grad_norm(&mut grads, self.disc_params.named(), max_norm)?;
        }
        self.opt_d.step(&grads, lr)?;

        let util = self.utilization();
        self.step += 1;
        self.log(MetricsRow {
            step: self.step,
            side: "d",
            lr,
            quantizer: None,
            mel: None,
            adversarial: None,
            feature_matching: None,
            disc_hinge: Some(hinge),
            total: hinge,
            utilization: util,
        })?;
        Ok(LossReport::Discriminator { hinge })
    }

    fn fault(&self, e: Error) -> Error {
        Error::TrainingFault(format!("aborting at step {}: {e}", self.step))
    }

    /// Runs `n` optimizer steps with strict G,D,G,D alternation, sampling a
    /// fresh batch per step. Returns the per-step reports.
    pub fn train_steps(&mut self, n: u64, source: &DataSource) -> Result<Vec<(u64, LossReport)>> {
        self.ensure_codebook_init(source)?;
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let batch =
                source.sample_batch(&self.setup.train, self.setup.train.batch_size, &mut self.rng);
            let report = if self.step % 2 == 0 {
                self.train_step_g(&batch)?
            } else {
                self.train_step_d(&batch)?
            };
            out.push((self.step, report));
        }
        Ok(out)
    }

    /// Mean per-clip reconstruction correlation over a source, through the
    /// full encode -> quantize -> decode path.
    pub fn eval_correlation(&self, source: &DataSource) -> Result<f64> {
        let mut total = 0.0;
        for clip in source.clips() {
            let recon = self.codec.reconstruct(clip)?;
            let n = recon.len().min(clip.len());
            total += pearson(&clip.samples[..n], &recon.samples[..n]);
        }
        Ok(total / source.len() as f64)
    }

    /// Mean pure-dsp mel distance over a source through the codec.
    pub fn eval_mel_distance(&self, source: &DataSource) -> Result<f64> {
        let spectral = self.setup.mel_spectral();
        let mut total = 0.0;
        for clip in source.clips() {
            let recon = self.codec.reconstruct(clip)?;
            let n = recon.len().min(clip.len());
            let a = AudioBuffer::new(clip.samples[..n].to_vec(), clip.sample_rate)?;
            let b = AudioBuffer::new(recon.samples[..n].to_vec(), recon.sample_rate)?;
            total += crate::losses::mel_loss(&a, &b, &spectral, &self.setup.mel)?;
        }
        Ok(total / source.len() as f64)
    }

    // ---- checkpointing ----

    fn var_to_f32(var: &Var) -> Result<(Vec<usize>, Vec<f32>)> {
        let t = var.as_tensor();
        Ok((t.dims().to_vec(), t.flatten_all()?.to_vec1::<f32>()?))
    }

    fn tensor_to_f32(t: &Tensor) -> Result<(Vec<usize>, Vec<f32>)> {
        Ok((t.dims().to_vec(), t.flatten_all()?.to_vec1::<f32>()?))
    }

    pub fn save_checkpoint(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut entries = Vec::new();
        for (name, var) in self.codec.params.named() {
            let (dims, data) = Self::var_to_f32(var)?;
            entries.push(Entry { name: format!("gen.{name}"), dims, data: ArrayData::F32(data) });
        }
        for (name, var) in self.disc_params.named() {
            let (dims, data) = Self::var_to_f32(var)?;
            entries.push(Entry { name: format!("disc.{name}"), dims, data: ArrayData::F32(data) });
        }
        for (name, m, v) in self.opt_g.state() {
            let (dims, data) = Self::tensor_to_f32(&m)?;
            entries.push(Entry { name: format!("optg.m.{name}"), dims, data: ArrayData::F32(data) });
            let (dims, data) = Self::tensor_to_f32(&v)?;
            entries.push(Entry { name: format!("optg.v.{name}"), dims, data: ArrayData::F32(data) });
        }
        for (name, m, v) in self.opt_d.state() {
            let (dims, data) = Self::tensor_to_f32(&m)?;
            entries.push(Entry { name: format!("optd.m.{name}"), dims, data: ArrayData::F32(data) });
            let (dims, data) = Self::tensor_to_f32(&v)?;
            entries.push(Entry { name: format!("optd.v.{name}"), dims, data: ArrayData::F32(data) });
        }
        let book = &self.codec.codebook;
        entries.push(Entry {
            name: "codebook.vectors".into(),
            dims: vec![book.size(), book.dim()],
            data: ArrayData::F64(book.vectors.iter().cloned().collect()),
        });
        entries.push(Entry {
            name: "codebook.ema_cluster_size".into(),
            dims: vec![book.size()],
            data: ArrayData::F64(book.ema_cluster_size.to_vec()),
        });
        entries.push(Entry {
            name: "codebook.ema_embed_sum".into(),
            dims: vec![book.size(), book.dim()],
            data: ArrayData::F64(book.ema_embed_sum.iter().cloned().collect()),
        });
        entries.push(Entry {
            name: "codebook.usage_age".into(),
            dims: vec![book.size()],
            data: ArrayData::U32(book.usage_age.clone()),
        });
        entries.push(Entry {
            name: "assign_hist_lo".into(),
            dims: vec![self.assign_hist.len()],
            data: ArrayData::U32(self.assign_hist.iter().map(|&c| c as u32).collect()),
        });
        entries.push(Entry {
            name: "assign_hist_hi".into(),
            dims: vec![self.assign_hist.len()],
            data: ArrayData::U32(self.assign_hist.iter().map(|&c| (c >> 32) as u32).collect()),
        });
        entries.push(Entry {
            name: "rng.seed".into(),
            dims: vec![8],
            data: ArrayData::U32(seed_words(&self.rng)),
        });

        let word_pos = self.rng.get_word_pos();
        let container = Container {
            meta_json: serde_json::to_string(&self.setup)?,
            scalars: vec![
                ("step".into(), self.step),
                ("optg_step".into(), self.opt_g.step_count()),
                ("optd_step".into(), self.opt_d.step_count()),
                ("rng_word_pos_lo".into(), word_pos as u64),
                ("rng_word_pos_hi".into(), (word_pos >> 64) as u64),
                ("kmeans_ready".into(), self.kmeans_ready as u64),
            ],
            entries,
        };
        write_container(path, &container)
    }

    pub fn load_checkpoint(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let container = read_container(path)?;
        let setup: TrainSetup = serde_json::from_str(&container.meta_json)?;
        let mut trainer = Self::new(setup)?;
        trainer.restore_from(&container)?;
        Ok(trainer)
    }

    fn restore_from(&mut self, c: &Container) -> Result<()> {
        let device = self.codec.params.device().clone();
        let mut gen_count = 0;
        let mut disc_count = 0;
        let mut optg_pairs: std::collections::BTreeMap<String, (Option<Tensor>, Option<Tensor>)> =
            Default::default();
        let mut optd_pairs: std::collections::BTreeMap<String, (Option<Tensor>, Option<Tensor>)> =
            Default::default();
        for e in &c.entries {
            if let Some(name) = e.name.strip_prefix("gen.") {
                let ArrayData::F32(data) = &e.data else {
                    return Err(Error::CheckpointCorrupt(format!("{} has wrong dtype", e.name)));
                };
                let t = Tensor::from_vec(data.clone(), e.dims.as_slice(), &device)?;
                self.codec.params.set(name, &t)?;
                gen_count += 1;
            } else if let Some(name) = e.name.strip_prefix("disc.") {
                let ArrayData::F32(data) = &e.data else {
                    return Err(Error::CheckpointCorrupt(format!("{} has wrong dtype", e.name)));
                };
                let t = Tensor::from_vec(data.clone(), e.dims.as_slice(), &device)?;
                self.disc_params.set(name, &t)?;
                disc_count += 1;
            } else if let Some(rest) = e.name.strip_prefix("optg.") {
                collect_moment(rest, e, &device, &mut optg_pairs)?;
            } else if let Some(rest) = e.name.strip_prefix("optd.") {
                collect_moment(rest, e, &device, &mut optd_pairs)?;
            }
        }
        if gen_count != self.codec.params.named().len() {
            return Err(Error::CheckpointCorrupt(format!(
                "checkpoint has {gen_count} generator params, model needs {}",
                self.codec.params.named().len()
            )));
        }
        if disc_count != self.disc_params.named().len() {
            return Err(Error::CheckpointCorrupt(format!(
                "checkpoint has {disc_count} discriminator params, model needs {}",
                self.disc_params.named().len()
            )));
        }
        let mut optg = Vec::new();
        for (name, (m, v)) in optg_pairs {
            match (m, v) {
                (Some(m), Some(v)) => optg.push((name, m, v)),
                _ => return Err(Error::CheckpointCorrupt(format!("incomplete optg state for {name}"))),
            }
        }
        let mut optd = Vec::new();
        for (name, (m, v)) in optd_pairs {
            match (m, v) {
                (Some(m), Some(v)) => optd.push((name, m, v)),
                _ => return Err(Error::CheckpointCorrupt(format!("incomplete optd state for {name}"))),
            }
        }
        self.opt_g.restore(c.scalar("optg_step")?, &optg)?;
        self.opt_d.restore(c.scalar("optd_step")?, &optd)?;

        let book = &mut self.codec.codebook;
        let vectors = c.entry("codebook.vectors")?;
        let ArrayData::F64(vec_data) = &vectors.data else {
            return Err(Error::CheckpointCorrupt("codebook.vectors dtype".into()));
        };
        book.vectors = ndarray::Array2::from_shape_vec((vectors.dims[0], vectors.dims[1]), vec_data.clone())
            .map_err(|e| Error::CheckpointCorrupt(format!("codebook shape: {e}")))?;
        let sizes = c.entry("codebook.ema_cluster_size")?;
        let ArrayData::F64(size_data) = &sizes.data else {
            return Err(Error::CheckpointCorrupt("codebook.ema_cluster_size dtype".into()));
        };
        book.ema_cluster_size = ndarray::Array1::from_vec(size_data.clone());
        let sums = c.entry("codebook.ema_embed_sum")?;
        let ArrayData::F64(sum_data) = &sums.data else {
            return Err(Error::CheckpointCorrupt("codebook.ema_embed_sum dtype".into()));
        };
        book.ema_embed_sum = ndarray::Array2::from_shape_vec((sums.dims[0], sums.dims[1]), sum_data.clone())
            .map_err(|e| Error::CheckpointCorrupt(format!("ema sum shape: {e}")))?;
        let ages = c.entry("codebook.usage_age")?;
        let ArrayData::U32(age_data) = &ages.data else {
            return Err(Error::CheckpointCorrupt("codebook.usage_age dtype".into()));
        };
        book.usage_age = age_data.clone();

        let lo = c.entry("assign_hist_lo")?;
        let hi = c.entry("assign_hist_hi")?;
        let (ArrayData::U32(lo_data), ArrayData::U32(hi_data)) = (&lo.data, &hi.data) else {
            return Err(Error::CheckpointCorrupt("assign_hist dtype".into()));
        };
        self.assign_hist = lo_data
            .iter()
            .zip(hi_data)
            .map(|(&l, &h)| ((h as u64) << 32) | l as u64)
            .collect();

        let seed_entry = c.entry("rng.seed")?;
        let ArrayData::U32(seed_data) = &seed_entry.data else {
            return Err(Error::CheckpointCorrupt("rng.seed dtype".into()));
        };
        let mut seed = [0u8; 32];
        for (i, w) in seed_data.iter().enumerate().take(8) {
            seed[i * 4..i * 4 + 4].copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        let lo = c.scalar("rng_word_pos_lo")? as u128;
        let hi = c.scalar("rng_word_pos_hi")? as u128;
        rng.set_word_pos((hi << 64) | lo);
        self.rng = rng;

        self.step = c.scalar("step")?;
        self.kmeans_ready = c.scalar("kmeans_ready")? != 0;
        Ok(())
    }
}

fn collect_moment(
    rest: &str,
    e: &Entry,
    device: &Device,
    map: &mut std::collections::BTreeMap<String, (Option<Tensor>, Option<Tensor>)>,
) -> Result<()> {
    let ArrayData::F32(data) = &e.data else {
        return Err(Error::CheckpointCorrupt(format!("{} has wrong dtype", e.name)));
    };
    let t = Tensor::from_vec(data.clone(), e.dims.as_slice(), device)?;
    if let Some(name) = rest.strip_prefix("m.") {
        map.entry(name.to_string()).or_default().0 = Some(t);
    } else if let Some(name) = rest.strip_prefix("v.") {
        map.entry(name.to_string()).or_default().1 = Some(t);
    } else {
        return Err(Error::CheckpointCorrupt(format!("unknown optimizer entry {}", e.name)));
    }
    Ok(())
}

fn seed_words(rng: &ChaCha8Rng) -> Vec<u32> {
    rng.get_seed()
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Loads just the codec (generator weights + codebook) from a training
/// checkpoint, for encode/decode/analysis.
pub fn load_codec(path: impl AsRef<std::path::Path>) -> Result<(Codec, TrainSetup)> {
    let trainer = Trainer::load_checkpoint(path)?;
    Ok((trainer.codec, trainer.setup))
}

/// Pearson correlation between two sample sequences.
pub fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let ma = a[..n].iter().map(|&x| x as f64).sum::<f64>() / n as f64;
    let mb = b[..n].iter().map(|&x| x as f64).sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..n {
        let da = a[i] as f64 - ma;
        let db = b[i] as f64 - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Re-quantizes cached latents through the codebook, used by tests checking
/// the lossy-codec contract.
pub fn requantize(codec: &Codec, latents: &ndarray::Array2<f64>) -> Result<Vec<u32>> {
    Ok(quantize(latents, &codec.codebook)?.indices)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig { lr: 2e-4, total_steps: 1000, ..TrainConfig::default() };
        assert_eq!(lr_at(0, &cfg).unwrap(), 2e-4);
        assert!((lr_at(500, &cfg).unwrap() - 1e-4).abs() < 1e-12);
        assert!(lr_at(1000, &cfg).unwrap().abs() < 1e-20);
        assert!(lr_at(1001, &cfg).is_err());
    }

    #[test]
    fn pearson_sanity() {
        let a: Vec<f32> = (0..100).map(|i| (i as f32 * 0.1).sin()).collect();
        assert!((pearson(&a, &a) - 1.0).abs() < 1e-12);
        let b: Vec<f32> = a.iter().map(|&x| -x).collect();
        assert!((pearson(&a, &b) + 1.0).abs() < 1e-12);
    }
}
