//! Width-aware initialization and Adam learning rates.
//!
//! Every `Θ(·)` rule uses constant 1; `η_base` absorbs the rest. Learning
//! rates are `η_base` times an exact rational multiplier.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Base learning rates swept at the base width.
pub const BASE_LR_GRID: [f64; 5] = [1e-3, 5e-4, 1e-4, 5e-5, 1e-5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "kebab-case")]
pub enum MupRole {
    Embedding,
    HiddenDense,
    /// Final readout; initialized to zero.
    Output,
    /// Bilinear MLR factor at a level with `blocks` blocks.
    MlrFactor { blocks: usize },
    /// `a×cs` left BTT factor.
    BttLeft,
    /// `d×bs` right BTT factor of a BTT whose left blocks have `a` rows.
    BttRight { a: usize },
}

impl MupRole {
    pub fn name(&self) -> String {
        match self {
            MupRole::Embedding => "embedding".into(),
            MupRole::HiddenDense => "hidden-dense".into(),
            MupRole::Output => "output".into(),
            MupRole::MlrFactor { blocks } => format!("mlr-factor(p={blocks})"),
            MupRole::BttLeft => "btt-left".into(),
            MupRole::BttRight { .. } => "btt-right".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MupRule {
    pub role: MupRole,
    pub fan_in: usize,
    pub fan_out: usize,
    pub base_lr: f64,
    /// `D₁`, the width at which `base_lr` was tuned.
    pub base_width: usize,
    /// `D₂`, the model width being initialized.
    pub target_width: usize,
}

impl MupRule {
    pub fn new(role: MupRole, fan_in: usize, fan_out: usize, base_lr: f64, base_width: usize, target_width: usize) -> Result<Self> {
        let rule = MupRule {
            role,
            fan_in,
            fan_out,
            base_lr,
            base_width,
            target_width,
        };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.fan_in > 0 && self.fan_out > 0 && self.base_width > 0 && self.target_width > 0;
        let role_ok = match self.role {
            MupRole::MlrFactor { blocks } => blocks > 0,
            MupRole::BttRight { a } => a > 0,
            _ => true,
        };
        if !dims_ok || !role_ok {
            return Err(Error::config(format!("μP rule needs positive dims: {self:?}")));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("base learning rate must be positive, got {}", self.base_lr)));
        }
        Ok(())
    }
}

/// Initialization variance as an exact ratio; zero for the output layer.
///
/// Dense roles: `σ² = 1/d_in · min(1, d_out/d_in)`. MLR factors:
/// `σ² = p/D₂`. BTT factors: `σ² = 1/fan_in` (`1/(cs)` left, `1/d` right).
pub fn init_variance(rule: &MupRule) -> Ratio<u64> {
    let (fi, fo) = (rule.fan_in as u64, rule.fan_out as u64);
    match rule.role {
        MupRole::Output => Ratio::from_integer(0),
        MupRole::Embedding | MupRole::HiddenDense => {
            let shrink = Ratio::new(fo, fi).min(Ratio::from_integer(1));
            Ratio::new(1, fi) * shrink
        }
        MupRole::MlrFactor { blocks } => Ratio::new(blocks as u64, rule.target_width as u64),
        MupRole::BttLeft | MupRole::BttRight { .. } => Ratio::new(1, fi),
    }
}

pub fn init_std(rule: &MupRule) -> f64 {
    let v = init_variance(rule);
    (*v.numer() as f64 / *v.denom() as f64).sqrt()
}

/// `lr / η_base` as an exact ratio.
///
/// Embedding: 1. Dense hidden and output: `D₁/fan_in`. MLR factors:
/// `D₁·p/D₂`. BTT left: `D₁/(cs)`. BTT right: `D₁/a`.
pub fn lr_multiplier(rule: &MupRule) -> Ratio<u64> {
    let d1 = rule.base_width as u64;
    match rule.role {
        MupRole::Embedding => Ratio::from_integer(1),
        MupRole::HiddenDense | MupRole::Output | MupRole::BttLeft => Ratio::new(d1, rule.fan_in as u64),
        MupRole::MlrFactor { blocks } => Ratio::new(d1 * blocks as u64, rule.target_width as u64),
        MupRole::BttRight { a } => Ratio::new(d1, a as u64),
    }
}

pub fn adam_lr(rule: &MupRule) -> f64 {
    let m = lr_multiplier(rule);
    rule.base_lr * *m.numer() as f64 / *m.denom() as f64
}

/// All-zero readout weights.
pub fn zero_init_output(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape)
}

/// Draws a tensor with the rule's standard deviation.
pub fn init_tensor<R: rand::Rng + ?Sized>(rule: &MupRule, shape: &[usize], rng: &mut R) -> Tensor {
    match rule.role {
        MupRole::Output => zero_init_output(shape),
        _ => Tensor::randn(shape, init_std(rule), rng),
    }
}

/// One row of the audit table.
#[derive(Debug, Clone, PartialEq)]
pub struct MupEntry {
    pub path: String,
    pub rule: MupRule,
}

/// CSV with columns `path, role, fan_in, fan_out, sigma, lr`.
pub fn write_table<W: std::io::Write>(entries: &[MupEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = crate::cost::csv_err;
    w.write_record(["path", "role", "fan_in", "fan_out", "sigma", "lr"]).map_err(err)?;
    for e in entries {
        w.write_record([
            e.path.clone(),
            e.rule.role.name(),
            e.rule.fan_in.to_string(),
            e.rule.fan_out.to_string(),
            format!("{:e}", init_std(&e.rule)),
            format!("{:e}", adam_lr(&e.rule)),
        ])
        .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule(role: MupRole, fan_in: usize, fan_out: usize) -> MupRule {
        MupRule::new(role, fan_in, fan_out, 1e-3, 256, 512).unwrap()
    }

    #[test]
    fn init_examples() {
        let dense = rule(MupRole::HiddenDense, 512, 512);
        assert_eq!(init_variance(&dense), Ratio::new(1, 512));
        let mlr = rule(MupRole::MlrFactor { blocks: 4 }, 128, 8);
        assert_eq!(init_variance(&mlr), Ratio::new(1, 128));
        let btt = rule(MupRole::BttLeft, 32, 16);
        assert_eq!(init_variance(&btt), Ratio::new(1, 32));
        let narrow = rule(MupRole::HiddenDense, 512, 128);
        assert_eq!(init_variance(&narrow), Ratio::new(1, 2048));
        assert_eq!(init_std(&rule(MupRole::Output, 512, 1)), 0.0);
    }

    #[test]
    fn lr_examples() {
        assert_eq!(adam_lr(&rule(MupRole::HiddenDense, 512, 512)), 5e-4);
        let p1 = rule(MupRole::MlrFactor { blocks: 1 }, 512, 8);
        assert_eq!(lr_multiplier(&p1), lr_multiplier(&rule(MupRole::HiddenDense, 512, 8)));
        let right = MupRule::new(MupRole::BttRight { a: 16 }, 16, 32, 1e-3, 256, 256).unwrap();
        assert!((adam_lr(&right) - 1.6e-2).abs() < 1e-18);
        assert_eq!(adam_lr(&rule(MupRole::Embedding, 8, 512)), 1e-3);
    }

    #[test]
    fn rejects_bad_rules() {
        assert!(MupRule::new(MupRole::HiddenDense, 0, 4, 1e-3, 1, 1).is_err());
        assert!(MupRule::new(MupRole::HiddenDense, 4, 4, 0.0, 1, 1).is_err());
    }

    #[test]
    fn table_columns() {
        let entries = vec![MupEntry {
            path: "layers.0.attn.wq".into(),
            rule: rule(MupRole::HiddenDense, 512, 512),
        }];
        let mut buf = vec![];
        write_table(&entries, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("path,role,fan_in,fan_out,sigma,lr\n"));
        assert!(text.contains("hidden-dense,512,512"));
    }
}
