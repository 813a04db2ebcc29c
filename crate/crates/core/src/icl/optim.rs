use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("invalid AdamW settings {self:?}")));
        }
        Ok(())
    }
}

/// AdamW with one learning rate per parameter tensor and decoupled weight
/// decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    lrs: Vec<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &[Tensor], lrs: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        if lrs.len() != params.len() {
            return Err(Error::config("one learning rate per parameter is required"));
        }
        Ok(AdamW {
            cfg,
            lrs,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        })
    }

    pub fn lrs(&self) -> &[f64] {
        &self.lrs
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[&Tensor]) -> Result<()> {
        self.t += 1;
        let AdamWConfig {
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
        } = self.cfg;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("AdamW::step", p.shape(), g.shape()));
            }
            let lr = self.lrs[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = std::mem::replace(p, Tensor::scalar(0.0)).into_data();
            for (k, (w, &gk)) in data.iter_mut().zip(g.data()).enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                *w -= lr * (update + wd * *w);
            }
            *p = Tensor::new(g.shape(), data)?;
        }
        Ok(())
    }
}
