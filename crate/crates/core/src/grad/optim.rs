//! SGD and Adam over named parameters, global-norm clipping, lr schedules.

use std::f64::consts::PI;

use super::GradientSet;
use crate::error::{Error, Result};
use crate::model::ModelWeights;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const ADAM: OptimizerKind = OptimizerKind::Adam { beta1: 0.9, beta2: 0.95, eps: 1e-8 };

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::ADAM),
            _ => Err(Error::config(format!("unknown optimizer '{s}' (sgd|adam)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over `warmup` steps, then cosine decay to `min_ratio · lr`.
    Cosine { warmup: usize, min_ratio: f64 },
}

impl LrSchedule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine { warmup: 0, min_ratio: 0.1 }),
            _ => Err(Error::config(format!("unknown lr schedule '{s}' (constant|cosine)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine { .. } => "cosine",
        }
    }

    /// Learning rate at 0-based `step` of `total`.
    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { warmup, min_ratio } => {
                if step < warmup {
                    return base * (step + 1) as f64 / warmup as f64;
                }
                let span = total.saturating_sub(warmup).max(1) as f64;
                let progress = ((step - warmup) as f64 / span).min(1.0);
                let floor = base * min_ratio;
                floor + (base - floor) * 0.5 * (1.0 + (PI * progress).cos())
            }
        }
    }
}

/// Rescales `g` so its global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(g: &mut GradientSet, max_norm: f64) -> f64 {
    let norm = g.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        g.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, w: &ModelWeights) -> Self {
        let zeros: Vec<Vec<f64>> = w.tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let v = if matches!(kind, OptimizerKind::Adam { .. }) { zeros.clone() } else { Vec::new() };
        let m = if matches!(kind, OptimizerKind::Adam { .. }) { zeros } else { Vec::new() };
        Optimizer { kind, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update and refreshes derived gate tables.
    pub fn step(&mut self, w: &mut ModelWeights, g: &GradientSet, lr: f64) -> Result<()> {
        if matches!(self.kind, OptimizerKind::Adam { .. }) && g.len() != self.m.len() {
            return Err(Error::Invalid("optimizer state does not match the gradient set".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        for (k, ((name, param), (gname, grad))) in w.tensors_mut().into_iter().zip(g.iter()).enumerate() {
            if name != gname || param.len() != grad.len() {
                return Err(Error::Invalid(format!("gradient {gname} does not match parameter {name}")));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, d) in param.data_mut().iter_mut().zip(grad.data()) {
                        *p -= lr * d;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (bc1, bc2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (i, (p, &d)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * d;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * d * d;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        w.refresh_gate_tables()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Variant};
    use crate::kernel::Rng;

    fn model() -> ModelWeights {
        ModelWeights::build(&ModelConfig::tiny(Variant::EgMla), &mut Rng::new(3)).unwrap()
    }

    #[test]
    fn adam_with_zero_gradient_is_identity() {
        let mut w = model();
        let before = w.clone();
        let g = GradientSet::zeros_like(&w);
        let mut opt = Optimizer::new(OptimizerKind::ADAM, &w);
        for _ in 0..3 {
            opt.step(&mut w, &g, 1e-2).unwrap();
        }
        assert!(w.tensors().iter().zip(before.tensors()).all(|((_, a), (_, b))| a.bit_eq(b)));
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut w = model();
        let before = w.unembed.clone();
        let mut g = GradientSet::zeros_like(&w);
        g.accumulate("unembed", &crate::kernel::Tensor::filled(before.shape(), 2.0)).unwrap();
        Optimizer::new(OptimizerKind::Sgd, &w).step(&mut w, &g, 0.5).unwrap();
        assert!(w.unembed.max_abs_diff(&before.map(|v| v - 1.0)) < 1e-15);
    }

    #[test]
    fn first_adam_step_has_magnitude_lr() {
        let mut w = model();
        let before = w.unembed.clone();
        let mut g = GradientSet::zeros_like(&w);
        g.accumulate("unembed", &crate::kernel::Tensor::filled(before.shape(), -3.0)).unwrap();
        Optimizer::new(OptimizerKind::ADAM, &w).step(&mut w, &g, 0.01).unwrap();
        assert!(w.unembed.max_abs_diff(&before.map(|v| v + 0.01)) < 1e-10);
    }

    #[test]
    fn clipping_and_schedules() {
        let w = model();
        let mut g = GradientSet::zeros_like(&w);
        g.accumulate("final_norm", &crate::kernel::Tensor::filled(&[16], 1.0)).unwrap();
        assert_eq!(clip_global_norm(&mut g, 1.0), 4.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        let c = LrSchedule::Cosine { warmup: 10, min_ratio: 0.1 };
        assert!((c.lr_at(1.0, 0, 110) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(1.0, 10, 110) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(1.0, 110, 110) - 0.1).abs() < 1e-12);
        assert_eq!(LrSchedule::Constant.lr_at(0.3, 50, 100), 0.3);
    }
}
