//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::NetParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamConfig {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let beta = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0 && self.lr.is_finite() && beta(self.beta1) && beta(self.beta2) && self.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Optimizer state for one network. Moments mirror the parameter names and
/// are kept at `f32` precision, like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: NetParams,
    pub v: NetParams,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &NetParams) -> Result<Self> {
        config.validate()?;
        let zeros = || -> Result<NetParams> {
            let mut z = NetParams::new();
            for (name, t) in params.iter() {
                z.insert(name, Tensor::zeros(t.shape()))?;
            }
            Ok(z)
        };
        Ok(Adam {
            config,
            t: 0,
            m: zeros()?,
            v: zeros()?,
        })
    }

    /// Apply one update. `grads` follow the parameter order.
    pub fn step(&mut self, params: &mut NetParams, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let moments = self.m.tensors_mut().zip(self.v.tensors_mut());
        for ((p, g), (m, v)) in params.tensors_mut().zip(grads).zip(moments) {
            p.ensure_same_shape(g, "gradient")?;
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = (beta1 * m[i] + (1.0 - beta1) * gi) as f32 as f64;
                v[i] = (beta2 * v[i] + (1.0 - beta2) * gi * gi) as f32 as f64;
                let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p[i] = (p[i] - step) as f32 as f64;
            }
        }
        Ok(())
    }
}
