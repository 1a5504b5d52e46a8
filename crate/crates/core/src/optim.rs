//! Bias-corrected Adam with per-group learning rates.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Updates applied to this group; drives bias correction.
    pub step: u64,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Rebuilds row-strided buffers after the parameter rows were reordered.
    /// `sources[r]` names the old row that new row `r` came from; `None`
    /// starts the row with fresh (zero) moments.
    pub fn remap_rows(&mut self, stride: usize, sources: &[Option<usize>]) {
        let mut m = Vec::with_capacity(sources.len() * stride);
        let mut v = Vec::with_capacity(sources.len() * stride);
        for src in sources {
            match src {
                Some(s) => {
                    m.extend_from_slice(&self.m[s * stride..(s + 1) * stride]);
                    v.extend_from_slice(&self.v[s * stride..(s + 1) * stride]);
                }
                None => {
                    m.extend(std::iter::repeat(0.0).take(stride));
                    v.extend(std::iter::repeat(0.0).take(stride));
                }
            }
        }
        self.m = m;
        self.v = v;
    }
}

/// Optimizer state: a global step counter plus one [`Moments`] per group.
/// Groups skipped on some steps keep their own bias-correction count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub groups: Vec<Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig, group_lens: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            groups: group_lens.iter().map(|&n| Moments::zeros(n)).collect(),
        }
    }

    /// Advances the shared step counter. Call once per optimization step,
    /// before the per-group updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one Adam update to group `group`.
    pub fn update(&mut self, group: usize, lr: f64, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let AdamConfig { beta1, beta2, eps } = self.config;
        let moments = self
            .groups
            .get_mut(group)
            .ok_or_else(|| Error::ShapeMismatch(format!("no optimizer group {group}")))?;
        if params.len() != grads.len() || params.len() != moments.len() {
            return Err(Error::ShapeMismatch(format!(
                "group {group}: params {}, grads {}, moments {}",
                params.len(),
                grads.len(),
                moments.len()
            )));
        }
        moments.step += 1;
        let step = moments.step.min(i32::MAX as u64) as i32;
        let bc1 = 1.0 - beta1.powi(step);
        let bc2 = 1.0 - beta2.powi(step);
        for i in 0..params.len() {
            let g = grads[i];
            let m = &mut moments.m[i];
            let v = &mut moments.v[i];
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
