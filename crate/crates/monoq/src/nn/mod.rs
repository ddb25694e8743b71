//! Tensor-side building blocks: parameter store, initializers, optimizer,
//! and the differentiable spectral ops used by training.
//!
//! The pure `dsp` module is the reference implementation of every transform;
//! the tensor routines here exist so gradients can flow, and are tested
//! against `dsp` for agreement.

mod layers;
mod ops;

pub use layers::*;
pub use ops::*;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Ordered, named collection of trainable parameters.
///
/// Creation order is deterministic given a fixed model configuration, which
/// keeps optimizer state and checkpoints stable across runs.
pub struct ParamStore {
    prefix: Vec<String>,
    entries: Vec<(String, Var)>,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(device: Device, dtype: DType) -> Self {
        Self { prefix: Vec::new(), entries: Vec::new(), device, dtype }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn push_scope(&mut self, name: &str) {
        self.prefix.push(name.to_string());
    }

    pub fn pop_scope(&mut self) {
        self.prefix.pop();
    }

    fn scoped(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix.join("."), name)
        }
    }

    /// Registers a parameter initialized from the provided f64 data.
    pub fn var_from(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let full = self.scoped(name);
        let t = match self.dtype {
            DType::F64 => Tensor::from_vec(data, shape, &self.device)?,
            _ => {
                let data32: Vec<f32> = data.into_iter().map(|v| v as f32).collect();
                Tensor::from_vec(data32, shape, &self.device)?.to_dtype(self.dtype)?
            }
        };
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.entries.push((full, var));
        Ok(out)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.var_from(name, shape, vec![0.0; n])
    }

    /// Truncated-normal init (resampled beyond two standard deviations).
    pub fn trunc_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| sample_trunc_normal(rng) * std).collect();
        self.var_from(name, shape, data)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.as_tensor().elem_count()).sum()
    }

    /// Overwrites a parameter by name, for checkpoint restore and tests.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        for (n, v) in &self.entries {
            if n == name {
                if v.shape() != value.shape() {
                    return Err(Error::Shape(format!(
                        "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                        value.shape(),
                        v.shape()
                    )));
                }
                v.set(&value.to_dtype(v.dtype())?)?;
                return Ok(());
            }
        }
        Err(Error::CheckpointCorrupt(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}

fn sample_trunc_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        // Box-Muller
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// AdamW with explicit, serializable state.
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    params: Vec<(String, Var)>,
    state: Vec<(Tensor, Tensor)>,
    step: u64,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, betas: (f64, f64), weight_decay: f64) -> Result<Self> {
        let state = params
            .iter()
            .map(|(_, v)| {
                let z1 = v.as_tensor().zeros_like()?;
                let z2 = v.as_tensor().zeros_like()?;
                Ok((z1, z2))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { betas: (betas.0, betas.1), eps: 1e-8, weight_decay, params, state, step: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update with the given learning rate. `grads` values of
    /// `None` (parameter unused by this loss) are skipped.
    pub fn step(&mut self, grads: &candle_core::backprop::GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for (i, (_, var)) in self.params.iter().enumerate() {
            let Some(grad) = grads.get(var) else { continue };
            let (m, v) = &self.state[i];
            // detached: stored moments must not retain the step's graph
            let m_new = ((m * b1)? + (grad * (1.0 - b1))?)?.detach();
            let v_new = ((v * b2)? + (grad.sqr()? * (1.0 - b2))?)?.detach();
            let m_hat = (&m_new * (1.0 / bc1))?;
            let v_hat = (&v_new * (1.0 / bc2))?;
            let denom = (v_hat.sqrt()? + self.eps)?;
            let mut update = m_hat.broadcast_div(&denom)?;
            if self.weight_decay != 0.0 {
                update = (update + (var.as_tensor() * self.weight_decay)?)?;
            }
            let new_p = (var.as_tensor() - (update * lr)?)?.detach();
            var.set(&new_p)?;
            self.state[i] = (m_new, v_new);
        }
        Ok(())
    }

    /// Serializable snapshot: (param name, first moment, second moment).
    pub fn state(&self) -> Vec<(String, Tensor, Tensor)> {
        self.params
            .iter()
            .zip(&self.state)
            .map(|((n, _), (m, v))| (n.clone(), m.clone(), v.clone()))
            .collect()
    }

    pub fn restore(&mut self, step: u64, moments: &[(String, Tensor, Tensor)]) -> Result<()> {
        self.step = step;
        for (name, m, v) in moments {
            let idx = self
                .params
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::CheckpointCorrupt(format!("optimizer state for unknown parameter {name}")))?;
            self.state[idx] = (m.clone(), v.clone());
        }
        Ok(())
    }
}

/// Scales gradients in-place-equivalent fashion so the global L2 norm does
/// not exceed `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(
    grads: &mut candle_core::backprop::GradStore,
    params: &[(String, Var)],
    max_norm: f64,
) -> Result<f64> {
    let mut total = 0.0f64;
    for (_, var) in params {
        if let Some(g) = grads.get(var) {
            total += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, var) in params {
            if let Some(g) = grads.get(var) {
                let scaled = (g * scale)?;
                grads.insert(var, scaled);
            }
        }
    }
    Ok(norm)
}
