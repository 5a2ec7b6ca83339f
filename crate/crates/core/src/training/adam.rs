use crate::error::{Error, Result};
use crate::models::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale all gradients together when their joint L2 norm exceeds this.
    pub max_grad_norm: Option<f64>,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|p| vec![0.0; p.len()]).collect();
        AdamState {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one bias-corrected update. `grads[i]` belongs to parameter
    /// `i`; `None` leaves that parameter and its moments untouched. Nothing
    /// is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("adam", &[params.len()], &[grads.len()]));
        }
        let mut sq = 0.0;
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params.get(i).shape() {
                    return Err(Error::shape("adam", params.get(i).shape(), g.shape()));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite {
                        tensor: format!("gradient of {}", params.name(i)),
                    });
                }
                sq += g.data().iter().map(|v| v * v).sum::<f64>();
            }
        }
        let clip = match self.config.max_grad_norm {
            Some(max) if sq.sqrt() > max => max / sq.sqrt(),
            _ => 1.0,
        };
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.get_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= c.learning_rate * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
