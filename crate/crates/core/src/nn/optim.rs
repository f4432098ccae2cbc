use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A trainable tensor with its momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub momentum: Tensor,
    /// Whether weight decay applies to this parameter.
    pub decay: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let momentum = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            momentum,
            decay: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub momentum: f32,
    pub weight_decay: f32,
    pub nesterov: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 5.0e-4,
            nesterov: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One in-place SGD step with momentum and coupled weight decay:
///
/// ```text
/// g = grad + wd * w
/// v = mu * v + g
/// w = w - lr * (g + mu * v)   // nesterov
/// w = w - lr * v              // plain momentum
/// ```
pub fn sgd_nesterov_step(
    param: &mut Parameter,
    grad: &Tensor,
    lr: f32,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if grad.shape() != param.value.shape() {
        return Err(Error::Shape(format!(
            "gradient {:?} for parameter {} of shape {:?}",
            grad.shape(),
            param.name,
            param.value.shape()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite(format!("gradient of {}", param.name)));
    }
    let wd = if param.decay { cfg.weight_decay } else { 0.0 };
    let mu = cfg.momentum;
    let values = param.value.data_mut();
    let velocity = param.momentum.data_mut();
    for ((w, v), &g) in values.iter_mut().zip(velocity.iter_mut()).zip(grad.data()) {
        let g = g + wd * *w;
        *v = mu * *v + g;
        let step = if cfg.nesterov { g + mu * *v } else { *v };
        *w -= lr * step;
    }
    Ok(())
}

/// Step decay: `lr0 * 0.1^s`, `s` = number of milestones at or below the epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
    pub total_epochs: usize,
}

impl LrSchedule {
    /// Drops by 10x at epochs 30, 60 and 80 of 100.
    pub fn standard(lr0: f64) -> Self {
        LrSchedule {
            lr0,
            milestones: vec![30, 60, 80],
            factor: 0.1,
            total_epochs: 100,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} is past the {}-epoch schedule",
                self.total_epochs
            )));
        }
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        Ok(self.lr0 * self.factor.powi(drops as i32))
    }
}

pub fn lr_schedule(epoch: usize) -> Result<f64> {
    LrSchedule::standard(0.01).lr_at(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(w: f32) -> Parameter {
        Parameter::new("w", Tensor::new(&[1], vec![w]).unwrap())
    }

    #[test]
    fn reduces_to_vanilla_sgd() {
        let cfg = OptimizerConfig {
            lr0: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            nesterov: true,
        };
        let mut p = scalar(2.0);
        sgd_nesterov_step(&mut p, &Tensor::new(&[1], vec![0.5]).unwrap(), 0.1, &cfg).unwrap();
        assert!((p.value.data()[0] - 1.95).abs() < 1e-7);
        let before = p.clone();
        sgd_nesterov_step(&mut p, &Tensor::new(&[1], vec![3.0]).unwrap(), 0.0, &cfg).unwrap();
        assert_eq!(p.value, before.value);
    }

    #[test]
    fn nesterov_scalar_reference() {
        let cfg = OptimizerConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 0.5,
            nesterov: true,
        };
        let mut p = scalar(1.0);
        sgd_nesterov_step(&mut p, &Tensor::zeros(&[1]), 0.1, &cfg).unwrap();
        // g = 0.5, v = 0.5, w = 1 - 0.1 * (0.5 + 0.45)
        assert!((p.value.data()[0] - 0.905).abs() < 1e-6);
        assert!((p.momentum.data()[0] - 0.5).abs() < 1e-7);
        let plain = OptimizerConfig {
            nesterov: false,
            ..cfg
        };
        let mut q = scalar(1.0);
        sgd_nesterov_step(&mut q, &Tensor::zeros(&[1]), 0.1, &plain).unwrap();
        assert!((q.value.data()[0] - 0.95).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = scalar(1.0);
        let err = sgd_nesterov_step(
            &mut p,
            &Tensor::new(&[1], vec![f32::NAN]).unwrap(),
            0.1,
            &OptimizerConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains('w'));
    }

    #[test]
    fn schedule_values() {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b;
        assert!(close(lr_schedule(0).unwrap(), 0.01));
        assert!(close(lr_schedule(29).unwrap(), 0.01));
        assert!(close(lr_schedule(30).unwrap(), 0.001));
        assert!(close(lr_schedule(60).unwrap(), 1e-4));
        assert!(close(lr_schedule(80).unwrap(), 1e-5));
        assert!(close(lr_schedule(99).unwrap(), 1e-5));
        assert!(lr_schedule(100).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        assert!(OptimizerConfig {
            momentum: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            lr0: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            weight_decay: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
